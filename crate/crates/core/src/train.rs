//! Adam, the full-batch training loop with early stopping, and F1 metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeData};
use crate::model::{collaborative_loss, Cobformer, ModelError, ModelInputs};
use crate::nn::normalized_adjacency;
use crate::partition::Partition;
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay_gcn: f64,
    pub weight_decay_bga: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub num_clusters: usize,
    pub epsilon: f64,
    /// Scale feature rows to sum to one before training.
    pub normalize_features: bool,
    /// Train on random groups of this many clusters per step instead of
    /// the full graph.
    pub batch_clusters: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            weight_decay_gcn: 5e-4,
            weight_decay_bga: 1e-4,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
            num_clusters: 96,
            epsilon: 0.1,
            normalize_features: true,
            batch_clusters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch {epoch}: {source}")]
    Epoch { epoch: usize, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric mask is empty")]
    EmptyMask,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.weight_decay_gcn < 0.0 || self.weight_decay_bga < 0.0 {
            return Err(TrainError::Config("weight decay must be >= 0".into()));
        }
        if self.batch_clusters == Some(0) {
            return Err(TrainError::Config("batch_clusters must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moments for every parameter, plus per-parameter step
/// counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    slots: Vec<Option<(Matrix, Matrix, u64)>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.slots.get(id.index()).and_then(|s| s.as_ref()).map_or(0, |s| s.2)
    }
}

/// One Adam update with decoupled weight decay for the parameters in
/// `ids`. A parameter without a gradient is treated as having a zero one.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], state: &mut AdamState, lr: f64, weight_decay: f64) {
    for &id in ids {
        if state.slots.len() <= id.index() {
            state.slots.resize(id.index() + 1, None);
        }
        let p = store.get_mut(id);
        let (rows, cols) = p.value.shape();
        let slot = state.slots[id.index()].get_or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols), 0));
        slot.2 += 1;
        let t = slot.2 as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let zero;
        let g = match &p.grad {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![0.0; rows * cols];
                &zero
            }
        };
        let decay = 1.0 - lr * weight_decay;
        let (m, v) = (slot.0.as_mut_slice(), slot.1.as_mut_slice());
        for (k, theta) in p.value.as_mut_slice().iter_mut().enumerate() {
            *theta *= decay;
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// `(Micro-F1, Macro-F1)` over the nodes in `mask`. Macro-F1 averages
/// over every class that occurs among the masked labels or predictions.
pub fn micro_macro_f1(predicted: &[usize], labels: &[usize], mask: &[bool]) -> Result<(f64, f64), TrainError> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&u| mask[u]).collect();
    if idx.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let k = idx.iter().map(|&u| labels[u].max(predicted[u])).max().unwrap() + 1;
    let (mut tp, mut fp, mut fnc) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut present = vec![false; k];
    for &u in &idx {
        let (y, p) = (labels[u], predicted[u]);
        present[y] = true;
        present[p] = true;
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fnc[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let micro = correct as f64 / idx.len() as f64;
    let f1s: Vec<f64> = (0..k)
        .filter(|&c| present[c])
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnc[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    Ok((micro, macro_f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_g: f64,
    pub val_t: f64,
    pub test_mi_g: f64,
    pub test_ma_g: f64,
    pub test_mi_t: f64,
    pub test_ma_t: f64,
}

impl EpochRecord {
    pub fn val_mean(&self) -> f64 {
        0.5 * (self.val_g + self.val_t)
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Record of the epoch with the best mean validation Micro-F1.
    pub best: Option<EpochRecord>,
    /// Parameters at the best epoch, or the initialisation when no epoch ran.
    pub best_params: ParamStore,
    pub attention_cost: usize,
}

/// Prepared graph-level tensors plus the split, shared by training and
/// evaluation.
pub struct TrainData<'a> {
    pub graph: &'a Graph,
    pub data: &'a NodeData,
    pub partition: &'a Partition,
}

/// Evaluation-mode predictions of both heads.
pub fn predict(model: &Cobformer, store: &ParamStore, inputs: &ModelInputs) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let mut t = Tape::no_grad();
    let out = model.forward(&mut t, store, inputs, false)?;
    Ok((t.value(out.gcn_logits).argmax_rows(), t.value(out.bga_logits).argmax_rows()))
}

fn evaluate(epoch: usize, loss: f64, pg: &[usize], pt: &[usize], data: &NodeData) -> Result<EpochRecord, TrainError> {
    let y = &data.labels;
    let (val_g, _) = micro_macro_f1(pg, y, &data.val_mask)?;
    let (val_t, _) = micro_macro_f1(pt, y, &data.val_mask)?;
    let (test_mi_g, test_ma_g) = micro_macro_f1(pg, y, &data.test_mask)?;
    let (test_mi_t, test_ma_t) = micro_macro_f1(pt, y, &data.test_mask)?;
    Ok(EpochRecord { epoch, loss, val_g, val_t, test_mi_g, test_ma_g, test_mi_t, test_ma_t })
}

/// Features as used by the model under `config`.
pub fn prepare_inputs(data: &TrainData<'_>, config: &TrainConfig) -> ModelInputs {
    let mut nd = data.data.clone();
    if config.normalize_features {
        nd.row_normalize_features();
    }
    ModelInputs { features: nd.features, adjacency: normalized_adjacency(data.graph), partition: data.partition.clone() }
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 20) ^ batch as u64
}

/// One gradient step on `inputs` with `labels` and `train_mask`; returns
/// the loss value.
fn train_step(
    model: &Cobformer,
    store: &mut ParamStore,
    adam: &mut AdamState,
    config: &TrainConfig,
    inputs: &ModelInputs,
    labels: &[usize],
    train_mask: &[bool],
    seed: u64,
) -> Result<f64, ModelError> {
    store.zero_grads();
    let mut t = Tape::training(seed);
    let out = model.forward(&mut t, store, inputs, false)?;
    let parts =
        collaborative_loss(&mut t, out.gcn_logits, out.bga_logits, labels, train_mask, model.config.alpha, model.config.tau, None)?;
    let loss = t.value(parts.total).item();
    t.backward(parts.total, store)?;
    let gcn = model.gcn_group();
    let bga = model.bga_group(store);
    adam_step(store, &gcn, adam, config.learning_rate, config.weight_decay_gcn);
    adam_step(store, &bga, adam, config.learning_rate, config.weight_decay_bga);
    Ok(loss)
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn train_loop(
    model: &Cobformer,
    store: &mut ParamStore,
    data: &TrainData<'_>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let nd = data.data;
    nd.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if data.partition.num_nodes() != nd.num_nodes() || data.graph.num_nodes() != nd.num_nodes() {
        return Err(TrainError::Config("graph, data and partition disagree on the node count".into()));
    }
    let inputs = prepare_inputs(data, config);
    let cost = {
        let p = model.effective_partition(&inputs.partition);
        p.members().iter().map(|m| m.len() * m.len()).sum::<usize>() + p.num_parts() * p.num_parts()
    } * model.config.num_bga_layers;

    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut best: Option<EpochRecord> = None;
    let mut best_params = store.clone();
    let mut since_best = 0;
    let mut shuffler = Xoshiro256StarStar::seed_from_u64(config.seed ^ 0x5EED);
    for epoch in 0..config.max_epochs {
        let wrap = |source| TrainError::Epoch { epoch, source };
        let loss = match config.batch_clusters {
            None => train_step(model, store, &mut adam, config, &inputs, &nd.labels, &nd.train_mask, step_seed(config.seed, epoch, 0))
                .map_err(wrap)?,
            Some(k) => {
                let mut clusters: Vec<usize> = (0..data.partition.num_parts()).collect();
                clusters.shuffle(&mut shuffler);
                let mut total = 0.0;
                let mut steps = 0;
                for (b, group) in clusters.chunks(k).enumerate() {
                    let batch = cluster_batch(data, &inputs.features, group);
                    if !batch.train_mask.iter().any(|&m| m) {
                        continue;
                    }
                    total += train_step(
                        model,
                        store,
                        &mut adam,
                        config,
                        &batch.inputs,
                        &batch.labels,
                        &batch.train_mask,
                        step_seed(config.seed, epoch, b + 1),
                    )
                    .map_err(wrap)?;
                    steps += 1;
                }
                if steps == 0 { 0.0 } else { total / steps as f64 }
            }
        };
        let (pg, pt) = predict(model, store, &inputs).map_err(wrap)?;
        let record = evaluate(epoch, loss, &pg, &pt, nd)?;
        log::debug!("epoch {epoch}: loss {loss:.5} val_g {:.4} val_t {:.4}", record.val_g, record.val_t);
        on_epoch(&record);
        if best.as_ref().is_none_or(|b| record.val_mean() > b.val_mean()) {
            best = Some(record.clone());
            best_params = store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(record);
        if since_best >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome { history, best, best_params, attention_cost: cost })
}

struct ClusterBatch {
    inputs: ModelInputs,
    labels: Vec<usize>,
    train_mask: Vec<bool>,
}

/// Induced subgraph on the union of `clusters`, keeping their partition.
fn cluster_batch(data: &TrainData<'_>, features: &Matrix, clusters: &[usize]) -> ClusterBatch {
    let members = data.partition.members();
    let nodes: Vec<usize> = clusters.iter().flat_map(|&c| members[c].iter().copied()).collect();
    let mut local = vec![usize::MAX; data.graph.num_nodes()];
    for (i, &u) in nodes.iter().enumerate() {
        local[u] = i;
    }
    let edges = nodes.iter().flat_map(|&u| {
        let local = &local;
        data.graph.neighbors(u).iter().filter(move |&&v| local[v] != usize::MAX && u < v).map(move |&v| (local[u], local[v]))
    });
    let sub = Graph::from_edges(nodes.len(), edges.collect::<Vec<_>>()).expect("local ids are in range").0;
    let assignment: Vec<usize> =
        clusters.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, members[c].len())).collect();
    let partition = Partition::from_assignment(assignment, clusters.len(), f64::MAX / 4.0)
        .expect("every batch cluster is non-empty");
    let feats = Matrix::from_fn(nodes.len(), features.cols(), |r, c| features.get(nodes[r], c));
    ClusterBatch {
        inputs: ModelInputs { features: feats, adjacency: normalized_adjacency(&sub), partition },
        labels: nodes.iter().map(|&u| data.data.labels[u]).collect(),
        train_mask: nodes.iter().map(|&u| data.data.train_mask[u]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_no_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![1.5, -2.0]]));
        let mut st = AdamState::new();
        adam_step(&mut store, &[id], &mut st, 0.1, 0.0);
        assert_eq!(store.value(id).as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![1.0, 1.0]]));
        store.get_mut(id).grad = Some(Matrix::from_rows(&[vec![0.3, -2.0]]));
        let mut st = AdamState::new();
        let (lr, wd) = (0.01, 0.1);
        adam_step(&mut store, &[id], &mut st, lr, wd);
        let decayed = 1.0 - lr * wd;
        let expect = [decayed - lr * 0.3 / (0.3 + ADAM_EPS), decayed + lr * 2.0 / (2.0 + ADAM_EPS)];
        for (a, b) in store.value(id).as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(st.steps(id), 1);
    }

    #[test]
    fn adam_decay_only() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(2.0));
        adam_step(&mut store, &[id], &mut AdamState::new(), 0.1, 0.5);
        assert!((store.value(id).item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(micro_macro_f1(&[0, 1, 2], &[0, 1, 2], &[true; 3]).unwrap(), (1.0, 1.0));
        let (mi, ma) = micro_macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], &[true; 4]).unwrap();
        assert!((mi - 0.5).abs() < 1e-15 && (ma - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(micro_macro_f1(&[2, 0], &[2, 1], &[true, false]).unwrap(), (1.0, 1.0));
        assert_eq!(micro_macro_f1(&[0], &[0], &[false]), Err(TrainError::EmptyMask));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
