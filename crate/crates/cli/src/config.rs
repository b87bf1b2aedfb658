//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use cobformer_core::check::GradcheckSpec;
use cobformer_core::model::{AttentionMode, ModelConfig};
use cobformer_core::synth::SynthSpec;
use cobformer_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Built-in synthetic citation-shaped graph.
    CitationLike,
    /// Raw `cora.content` / `cora.cites` in `dir`, public split.
    Cora { dir: PathBuf },
    /// TAB edge list, labels, features and optional masks.
    EdgeList { edges: PathBuf, labels: PathBuf, features: PathBuf, masks: Option<PathBuf> },
    /// Generated from the `synth` section.
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// Random balanced assignments the cut is compared against.
    pub baseline_samples: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { baseline_samples: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub k_max: usize,
    /// Homophily fed to the theoretical profile; measured when absent.
    pub rho: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub dump_attention: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { k_max: 6, rho: None, checkpoint: None, dump_attention: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every seeded component.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub partition: PartitionSection,
    pub synth: SynthSpec,
    pub analysis: AnalysisSection,
    pub gradcheck: GradcheckSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSource::CitationLike,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            partition: PartitionSection::default(),
            synth: SynthSpec::default(),
            analysis: AnalysisSection::default(),
            gradcheck: GradcheckSpec::default(),
        }
    }
}

impl RunConfig {
    /// `default` or a JSON file; missing keys keep their defaults.
    pub fn load(spec: &str) -> anyhow::Result<Self> {
        if spec == "default" {
            return Ok(Self::default());
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }
}

/// Flags shared by every subcommand. Each one, when given, overrides the
/// config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file, or `default`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,

    /// citation-like, cora, edge-list or synth.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub cora_dir: Option<PathBuf>,
    #[arg(long)]
    pub edges: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,

    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub baseline_samples: Option<usize>,

    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub deg: Option<f64>,

    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// bga or vanilla.
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub dropout_gcn: Option<f64>,
    #[arg(long)]
    pub dropout_bga: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_clusters: Option<usize>,

    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dump_attention: bool,
}

impl Overrides {
    /// Defaults, then the config file, then every flag that was given.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(out => out);
        set!(seed => seed);
        if let Some(kind) = &self.data {
            c.data = match kind.as_str() {
                "citation-like" => DataSource::CitationLike,
                "synth" => DataSource::Synth,
                "cora" => DataSource::Cora { dir: self.cora_dir.clone().unwrap_or_else(|| PathBuf::from("data/cora")) },
                "edge-list" => {
                    let (Some(edges), Some(labels), Some(features)) = (&self.edges, &self.labels, &self.features) else {
                        bail!("--data edge-list needs --edges, --labels and --features");
                    };
                    DataSource::EdgeList {
                        edges: edges.clone(),
                        labels: labels.clone(),
                        features: features.clone(),
                        masks: self.masks.clone(),
                    }
                }
                other => bail!("unknown --data {other:?} (expected citation-like, cora, edge-list or synth)"),
            };
        } else {
            match &mut c.data {
                DataSource::Cora { dir } => {
                    if let Some(d) = &self.cora_dir {
                        *dir = d.clone();
                    }
                }
                DataSource::EdgeList { edges, labels, features, masks } => {
                    for (slot, flag) in [(edges, &self.edges), (labels, &self.labels), (features, &self.features)] {
                        if let Some(p) = flag {
                            *slot = p.clone();
                        }
                    }
                    if self.masks.is_some() {
                        *masks = self.masks.clone();
                    }
                }
                _ => {}
            }
        }
        set!(parts => train.num_clusters);
        set!(eps => train.epsilon);
        set!(baseline_samples => partition.baseline_samples);
        set!(n => synth.num_nodes);
        set!(classes => synth.num_classes);
        set!(rho => synth.target_rho);
        set!(deg => synth.avg_degree);
        if let Some(h) = self.hidden {
            c.model.hidden = h;
            c.model.gcn_hidden = h;
        }
        set!(heads => model.num_heads);
        set!(layers => model.num_bga_layers);
        if let Some(a) = &self.attention {
            c.model.attention = match a.as_str() {
                "bga" => AttentionMode::Bga,
                "vanilla" => AttentionMode::Vanilla,
                other => bail!("unknown --attention {other:?} (expected bga or vanilla)"),
            };
        }
        set!(alpha => model.alpha);
        set!(tau => model.tau);
        set!(dropout_gcn => model.dropout_gcn);
        set!(dropout_bga => model.dropout_bga);
        set!(lr => train.learning_rate);
        set!(epochs => train.max_epochs);
        set!(patience => train.patience);
        if self.batch_clusters.is_some() {
            c.train.batch_clusters = self.batch_clusters;
        }
        set!(k_max => analysis.k_max);
        if self.checkpoint.is_some() {
            c.analysis.checkpoint = self.checkpoint.clone();
        }
        if self.dump_attention {
            c.analysis.dump_attention = true;
        }
        c.sync_seeds();
        Ok(c)
    }
}
