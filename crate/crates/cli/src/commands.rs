//! Subcommand bodies. Each returns the artifact names it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;

use cobformer_core::analysis::{
    attention_cost, attn_k_profile, attn_snr, empirical_cuk, theoretical_cuk, AttnView,
};
use cobformer_core::check::full_model_gradcheck;
use cobformer_core::graph::{
    edge_homophily, load_cora_raw, load_edge_list, planetoid_split, write_edge_list, write_features, write_labels,
    write_masks, Dataset, DatasetPaths, SplitSpec,
};
use cobformer_core::io::{
    encode_attention_dump, encode_jsonl, load_checkpoint, restore_params, save_checkpoint, save_partition, write_json,
    write_text,
};
use cobformer_core::model::Cobformer;
use cobformer_core::partition::{edge_cut, max_allowed_load, partition_multilevel, random_balanced_partition, Partition};
use cobformer_core::synth::generate_homophilic_graph;
use cobformer_core::tensor::{ParamStore, Tape};
use cobformer_core::train::{prepare_inputs, train_loop, EpochRecord, TrainData};

use crate::config::{DataSource, RunConfig};

/// Loads or generates the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    Ok(match &cfg.data {
        DataSource::CitationLike => cobformer_core::synth::citation_like(cfg.seed)?,
        DataSource::Cora { dir } => {
            let content = dir.join("cora.content");
            let cites = dir.join("cora.cites");
            let (ds, report) = load_cora_raw(&content, &cites, SplitSpec::PlanetoidPublic)?;
            log::info!("cora: {} nodes, {} edges, {} citations skipped", ds.graph.num_nodes(), report.num_edges, report.skipped_cites);
            ds
        }
        DataSource::EdgeList { edges, labels, features, masks } => {
            let paths = DatasetPaths { edges: edges.clone(), labels: labels.clone(), features: features.clone(), masks: masks.clone() };
            load_edge_list(&paths)?.0
        }
        DataSource::Synth => synth_dataset(cfg)?,
    })
}

/// 20 per class / 500 / 1000 split, shrunk to fit graphs under about 1.6k
/// nodes.
fn synth_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let mut ds = generate_homophilic_graph(&cfg.synth)?;
    let k = cfg.synth.num_classes;
    let per_class = 20.min(cfg.synth.num_nodes / (4 * k)).max(1);
    let rest = cfg.synth.num_nodes.saturating_sub(per_class * k);
    let val = 500.min(rest / 3);
    let (tr, va, te) = planetoid_split(&ds.data.labels, k, per_class, val, 1000.min(rest - val));
    ds.data.train_mask = tr;
    ds.data.val_mask = va;
    ds.data.test_mask = te;
    Ok(ds)
}

fn partition_for(cfg: &RunConfig, ds: &Dataset) -> anyhow::Result<Partition> {
    let p = cfg.train.num_clusters.min(ds.graph.num_nodes()).max(1);
    Ok(partition_multilevel(&ds.graph, p, cfg.train.epsilon, cfg.seed)?)
}

#[derive(Serialize)]
struct PartitionStats {
    num_nodes: usize,
    num_edges: usize,
    num_parts: usize,
    epsilon: f64,
    edge_cut: usize,
    largest_part: usize,
    smallest_part: usize,
    allowed_load: usize,
    random_mean_cut: f64,
    cut_ratio: f64,
}

pub fn partition(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let part = partition_for(cfg, &ds)?;
    let n = ds.graph.num_nodes();
    let cut = edge_cut(&ds.graph, &part);
    let samples = cfg.partition.baseline_samples;
    let mut total = 0.0;
    for i in 0..samples {
        let r = random_balanced_partition(n, part.num_parts(), cfg.seed.wrapping_add(1 + i as u64))?;
        total += edge_cut(&ds.graph, &r) as f64;
    }
    let random_mean_cut = if samples == 0 { f64::NAN } else { total / samples as f64 };
    let sizes: Vec<usize> = part.members().iter().map(Vec::len).collect();
    let stats = PartitionStats {
        num_nodes: n,
        num_edges: ds.graph.num_edges(),
        num_parts: part.num_parts(),
        epsilon: part.epsilon(),
        edge_cut: cut,
        largest_part: sizes.iter().copied().max().unwrap_or(0),
        smallest_part: sizes.iter().copied().min().unwrap_or(0),
        allowed_load: max_allowed_load(n, part.num_parts(), part.epsilon()),
        random_mean_cut,
        cut_ratio: cut as f64 / random_mean_cut,
    };
    save_partition(&out.join("partition.txt"), &part, Some(&ds.graph))?;
    write_json(&out.join("partition_stats.json"), &stats)?;
    println!(
        "P={} cut={} maxload={} allowed={} random_mean_cut={:.1} ratio={:.3}",
        stats.num_parts, cut, stats.largest_part, stats.allowed_load, random_mean_cut, stats.cut_ratio
    );
    Ok(vec!["partition.txt".into(), "partition_stats.json".into()])
}

#[derive(Serialize)]
struct SynthStats {
    num_nodes: usize,
    num_edges: usize,
    target_rho: f64,
    measured_rho: f64,
    cuk_empirical: Vec<Option<f64>>,
    cuk_theory: Vec<f64>,
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let ds = synth_dataset(cfg)?;
    write_edge_list(&out.join("edges.tsv"), &ds.graph)?;
    write_labels(&out.join("labels.tsv"), &ds.data.labels)?;
    write_features(&out.join("features.txt"), &ds.data.features)?;
    write_masks(&out.join("masks.tsv"), &ds.data)?;
    let measured_rho = edge_homophily(&ds.graph, &ds.data.labels)?;
    let k_max = 3;
    let stats = SynthStats {
        num_nodes: ds.graph.num_nodes(),
        num_edges: ds.graph.num_edges(),
        target_rho: cfg.synth.target_rho,
        measured_rho,
        cuk_empirical: empirical_cuk(&ds.graph, &ds.data.labels, k_max).mean,
        cuk_theory: (0..=k_max).map(|k| theoretical_cuk(measured_rho, cfg.synth.num_classes, k)).collect(),
    };
    write_json(&out.join("synth_stats.json"), &stats)?;
    println!("nodes={} edges={} rho={measured_rho:.4}", stats.num_nodes, stats.num_edges);
    Ok(["edges.tsv", "labels.tsv", "features.txt", "masks.tsv", "synth_stats.json"].map(String::from).to_vec())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_run: usize,
    best: Option<EpochRecord>,
    attention_cost: usize,
    num_parameters: usize,
}

pub fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let part = partition_for(cfg, &ds)?;
    let mut store = ParamStore::new();
    let model = Cobformer::new(&mut store, cfg.model.clone(), ds.data.features.cols(), ds.data.num_classes, cfg.seed)?;
    let data = TrainData { graph: &ds.graph, data: &ds.data, partition: &part };
    let outcome = train_loop(&model, &mut store, &data, &cfg.train, |r| {
        log::info!("epoch {} loss {:.5} val_g {:.4} val_t {:.4}", r.epoch, r.loss, r.val_g, r.val_t);
    })?;
    write_text(&out.join("metrics.jsonl"), &encode_jsonl(&outcome.history))?;
    save_checkpoint(&out.join("checkpoint.cbt"), &outcome.best_params)?;
    save_partition(&out.join("partition.txt"), &part, Some(&ds.graph))?;
    let summary = TrainSummary {
        epochs_run: outcome.history.len(),
        best: outcome.best.clone(),
        attention_cost: outcome.attention_cost,
        num_parameters: store.num_scalars(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    match &outcome.best {
        Some(b) => println!(
            "epochs={} best_epoch={} test CoB-G {:.4} CoB-T {:.4}",
            summary.epochs_run, b.epoch, b.test_mi_g, b.test_mi_t
        ),
        None => println!("epochs=0"),
    }
    Ok(["metrics.jsonl", "checkpoint.cbt", "partition.txt", "summary.json"].map(String::from).to_vec())
}

/// Attention views of every layer for `store`'s weights, plus the
/// instrumented score-entry counter.
pub fn capture_views(
    model: &Cobformer,
    store: &ParamStore,
    ds: &Dataset,
    part: &Partition,
    cfg: &RunConfig,
) -> anyhow::Result<(Vec<AttnView>, usize)> {
    let inputs = prepare_inputs(&TrainData { graph: &ds.graph, data: &ds.data, partition: part }, &cfg.train);
    let mut t = Tape::no_grad();
    let fwd = model.forward(&mut t, store, &inputs, true)?;
    let eff = model.effective_partition(part);
    let views = fwd.captures.iter().enumerate().map(|(l, c)| AttnView::from_capture(&eff, c, l)).collect();
    Ok((views, fwd.attention_cost))
}

pub fn analyze(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let part = partition_for(cfg, &ds)?;
    let mut store = ParamStore::new();
    let model = Cobformer::new(&mut store, cfg.model.clone(), ds.data.features.cols(), ds.data.num_classes, cfg.seed)?;
    match &cfg.analysis.checkpoint {
        Some(path) => restore_params(&mut store, &load_checkpoint(path)?).with_context(|| format!("restoring {}", path.display()))?,
        None => log::warn!("no checkpoint given; analysing the initial weights"),
    }
    let mut written = Vec::new();
    let k_max = cfg.analysis.k_max;
    let labels = &ds.data.labels;

    let emp = empirical_cuk(&ds.graph, labels, k_max);
    let mut s = String::from("k,mean_C\n");
    for (k, m) in emp.mean.iter().enumerate() {
        let v = m.map_or_else(|| "nan".to_string(), |x| x.to_string());
        writeln!(s, "{k},{v}")?;
    }
    write_text(&out.join("cuk_empirical.csv"), &s)?;
    written.push("cuk_empirical.csv".to_string());

    let rho = match cfg.analysis.rho {
        Some(r) => r,
        None => edge_homophily(&ds.graph, labels)?,
    };
    let mut s = format!("# rho={rho} classes={}\nk,C\n", ds.data.num_classes);
    for k in 0..=k_max {
        writeln!(s, "{k},{}", theoretical_cuk(rho, ds.data.num_classes, k))?;
    }
    write_text(&out.join("cuk_theory.csv"), &s)?;
    written.push("cuk_theory.csv".to_string());

    let (views, counter) = capture_views(&model, &store, &ds, &part, cfg)?;
    let mut attnk = String::from("layer,k,attn_mass\n");
    let mut snr = String::from("layer,S,D,dB\n");
    for view in &views {
        let prof = attn_k_profile(view, &ds.graph, k_max);
        for (k, m) in prof.bins.iter().enumerate() {
            writeln!(attnk, "{},{k},{m}", view.layer())?;
        }
        writeln!(attnk, "{},overflow,{}", view.layer(), prof.overflow)?;
        let r = attn_snr(view, labels)?;
        writeln!(snr, "{},{},{},{}", view.layer(), r.same_label_mass, r.diff_label_mass, r.snr_db)?;
        if cfg.analysis.dump_attention {
            let name = format!("attn_layer{}.txt", view.layer());
            write_text(&out.join(&name), &encode_attention_dump(view))?;
            written.push(name);
        }
    }
    write_text(&out.join("attnk.csv"), &attnk)?;
    write_text(&out.join("snr.txt"), &snr)?;
    let eff = model.effective_partition(&part);
    let formula = attention_cost(&eff) * cfg.model.num_bga_layers;
    let n = ds.graph.num_nodes();
    write_text(
        &out.join("cost.txt"),
        &format!("counter={counter}\nbound={formula}\ndense={}\n", n * n * cfg.model.num_bga_layers),
    )?;
    print!("{snr}");
    println!("counter={counter} bound={formula}");
    if counter != formula {
        bail!("instrumented counter {counter} differs from the cost formula {formula}");
    }
    written.extend(["attnk.csv", "snr.txt", "cost.txt"].map(String::from));
    Ok(written)
}

/// Returns whether the check passed alongside the artifacts.
pub fn gradcheck(cfg: &RunConfig, out: &Path) -> anyhow::Result<(bool, Vec<String>)> {
    let spec = &cfg.gradcheck;
    let report = full_model_gradcheck(spec)?;
    let pass = report.max_relative_error < spec.threshold;
    println!(
        "max relative error {:.3e} over {} coordinates (threshold {:e}): {}",
        report.max_relative_error,
        report.coords_checked,
        spec.threshold,
        if pass { "PASS" } else { "FAIL" }
    );
    #[derive(Serialize)]
    struct Out<'a> {
        max_relative_error: f64,
        max_abs_error: f64,
        worst: &'a Option<(String, usize)>,
        coords_checked: usize,
        threshold: f64,
        pass: bool,
    }
    let o = Out {
        max_relative_error: report.max_relative_error,
        max_abs_error: report.max_abs_error,
        worst: &report.worst,
        coords_checked: report.coords_checked,
        threshold: spec.threshold,
        pass,
    };
    write_json(&out.join("gradcheck.json"), &o)?;
    Ok((pass, vec!["gradcheck.json".into()]))
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}
