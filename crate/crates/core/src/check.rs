//! Finite-difference check of the full training objective on a small
//! random instance.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::graph::planetoid_split;
use crate::model::{collaborative_loss, soft_labels, AttentionMode, Cobformer, ModelConfig, ModelError, ModelInputs, SoftTargets};
use crate::nn::normalized_adjacency;
use crate::partition::partition_multilevel;
use crate::synth::{generate_homophilic_graph, SynthSpec};
use std::sync::Arc;

use crate::tensor::{grad_check, grad_check_floor, GradCheckReport, Matrix, ParamStore, SparseMatrix, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub num_nodes: usize,
    pub num_parts: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    pub rho: f64,
    pub num_heads: usize,
    pub num_bga_layers: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub tau: f64,
    pub attention: AttentionMode,
    pub step: f64,
    /// Denominator floor of the per-coordinate relative error.
    pub abs_floor: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            num_nodes: 30,
            num_parts: 2,
            hidden: 8,
            num_classes: 3,
            feature_dim: 6,
            avg_degree: 4.0,
            rho: 0.7,
            num_heads: 1,
            num_bga_layers: 1,
            dropout: 0.2,
            alpha: 0.8,
            tau: 0.9,
            attention: AttentionMode::Bga,
            step: 1e-5,
            abs_floor: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckError {
    #[error("invalid gradcheck spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Random homophilic graph with uniform features in `[−1, 1]`, a multilevel
/// partition and a fresh model; compares the gradient of the full loss
/// against central differences with the relative-error floor
/// `spec.abs_floor`. Dropout masks are frozen by reusing one seed; the
/// co-training targets are frozen at their initial values. Points where a
/// ReLU input lies within 10 steps of zero are redrawn.
pub fn full_model_gradcheck(spec: &GradcheckSpec) -> Result<GradCheckReport, CheckError> {
    let synth = SynthSpec {
        num_nodes: spec.num_nodes,
        num_classes: spec.num_classes,
        target_rho: spec.rho,
        avg_degree: spec.avg_degree,
        seed: spec.seed,
    };
    let ds = generate_homophilic_graph(&synth).map_err(|e| CheckError::Spec(e.to_string()))?;
    let partition =
        partition_multilevel(&ds.graph, spec.num_parts, 0.5, spec.seed).map_err(|e| CheckError::Spec(e.to_string()))?;
    let (train_mask, _, _) = planetoid_split(&ds.data.labels, spec.num_classes, 3, 0, 0);
    let adjacency = normalized_adjacency(&ds.graph);
    let config = ModelConfig {
        hidden: spec.hidden,
        gcn_hidden: spec.hidden,
        num_bga_layers: spec.num_bga_layers,
        num_heads: spec.num_heads,
        dropout_gcn: spec.dropout,
        dropout_bga: spec.dropout,
        gcn_layers: 2,
        alpha: spec.alpha,
        tau: spec.tau,
        attention: spec.attention,
    };

    // Redraw features and weights until no ReLU input sits within reach
    // of the finite-difference step.
    for attempt in 0..MAX_DRAWS {
        let draw = spec.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        let mut rng = Xoshiro256StarStar::seed_from_u64(draw ^ 0xF00D);
        let features = Matrix::from_fn(spec.num_nodes, spec.feature_dim, |_, _| rng.gen_range(-1.0..1.0));
        let mut store = ParamStore::new();
        let model = Cobformer::new(&mut store, config.clone(), spec.feature_dim, spec.num_classes, draw)?;
        let inputs = ModelInputs { features, adjacency: adjacency.clone(), partition: partition.clone() };
        let dropout_seed = draw.wrapping_add(17);
        let mut t = Tape::training(dropout_seed);
        let out = model.forward(&mut t, &store, &inputs, false)?;
        if t.relu_margin() < RELU_MARGIN_STEPS * spec.step {
            continue;
        }
        let tg = soft_labels(t.value(out.gcn_logits), spec.tau);
        let tt = soft_labels(t.value(out.bga_logits), spec.tau);
        let labels = &ds.data.labels;
        return grad_check_floor(&mut store, spec.step, spec.abs_floor, Some(dropout_seed), |t, store| -> Result<_, CheckError> {
            let out = model.forward(t, store, &inputs, false)?;
            let frozen = SoftTargets { gcn: &tg, bga: &tt };
            let parts =
                collaborative_loss(t, out.gcn_logits, out.bga_logits, labels, &train_mask, spec.alpha, spec.tau, Some(frozen))?;
            Ok(parts.total)
        });
    }
    Err(CheckError::Spec(format!("no draw in {MAX_DRAWS} kept every ReLU input {RELU_MARGIN_STEPS} steps away from 0")))
}

const MAX_DRAWS: u64 = 64;
const RELU_MARGIN_STEPS: f64 = 10.0;

/// Uniform entries in `[−1, 1]` with magnitude at least `1e-3`, so no point
/// sits next to a ReLU kink.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Xoshiro256StarStar) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let x: f64 = rng.gen_range(-1.0..1.0);
        if x.abs() >= 1e-3 {
            break x;
        }
    })
}

/// Names of the primitives covered by [`primitive_gradcheck`].
pub const PRIMITIVES: [&str; 20] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "add_row",
    "scale",
    "mul",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "row_select",
    "mean_rows",
    "row_softmax",
    "layer_norm",
    "relu",
    "dropout",
    "log",
    "sum",
    "spmm",
];

/// Checks one primitive at a random point. The loss is `Σ W ⊙ op(inputs)`
/// with a fixed random `W`, so every output entry gets a distinct weight.
pub fn primitive_gradcheck(name: &str, seed: u64) -> Result<GradCheckReport, CheckError> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", away_from_zero(4, 3, &mut rng));
    let b = store.add("b", away_from_zero(3, 5, &mut rng));
    let c = store.add("c", away_from_zero(4, 3, &mut rng));
    let row = store.add("row", away_from_zero(1, 3, &mut rng));
    let pos = store.add("pos", Matrix::from_fn(4, 3, |_, _| rng.gen_range(0.2..2.0)));
    let sparse = Arc::new(
        SparseMatrix::from_rows(4, vec![vec![(0, 0.5), (2, -1.0)], vec![(1, 2.0)], vec![], vec![(0, 0.3), (3, 0.7)]])
            .expect("sorted columns"),
    );
    let name = name.to_string();
    let op = move |t: &mut Tape, store: &ParamStore| -> Result<Var, TensorError> {
        let (va, vb, vc) = (t.param(store, a), t.param(store, b), t.param(store, c));
        Ok(match name.as_str() {
            "matmul" => t.matmul(va, vb)?,
            "transpose" => t.transpose(va)?,
            "add" => t.add(va, vc)?,
            "sub" => t.sub(va, vc)?,
            "add_row" => {
                let r = t.param(store, row);
                t.add_row(va, r)?
            }
            "scale" => t.scale(va, -1.7)?,
            "mul" => t.mul(va, vc)?,
            "concat_cols" => t.concat_cols(&[va, vc, va])?,
            "concat_rows" => t.concat_rows(&[vc, va])?,
            "slice_rows" => t.slice_rows(va, 1, 2)?,
            "gather_rows" => t.gather_rows(va, vec![3, 0, 0, 2, 1])?,
            "row_select" => t.row_select(va, &[true, false, true, true])?,
            "mean_rows" => t.mean_rows(va, vec![vec![0, 2], vec![1], vec![3, 1, 0]])?,
            "row_softmax" => t.row_softmax(va)?,
            "layer_norm" => {
                let g = t.param(store, row);
                let bt = t.param(store, c);
                let bt = t.slice_rows(bt, 0, 1)?;
                t.layer_norm(va, g, bt, crate::nn::LAYER_NORM_EPS)?
            }
            "relu" => t.relu(va)?,
            "dropout" => t.dropout(va, 0.4)?,
            "log" => {
                let p = t.param(store, pos);
                t.log(p)?
            }
            "sum" => t.sum(va)?,
            "spmm" => t.spmm(&sparse, va)?,
            other => {
                return Err(TensorError::InvalidArgument { op: "primitive_gradcheck", msg: format!("unknown primitive {other}") })
            }
        })
    };
    grad_check(&mut store, crate::tensor::DEFAULT_STEP, Some(seed ^ 0xD0), |t, store| -> Result<_, CheckError> {
        let y = op(t, store)?;
        let (r, c) = t.shape(y);
        let w = t.constant(away_from_zero(r, c, &mut Xoshiro256StarStar::seed_from_u64(seed ^ 0x3E1)));
        let prod = t.mul(y, w)?;
        Ok(t.sum(prod)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_passes() {
        let spec = GradcheckSpec { num_nodes: 12, hidden: 4, feature_dim: 3, ..GradcheckSpec::default() };
        let r = full_model_gradcheck(&spec).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert!(r.coords_checked > 100);
    }

    #[test]
    fn every_primitive_passes() {
        for name in PRIMITIVES {
            let r = primitive_gradcheck(name, 3).unwrap();
            assert!(r.max_relative_error < 1e-6, "{name}: {r:?}");
        }
        assert!(primitive_gradcheck("conv", 0).is_err());
    }
}
