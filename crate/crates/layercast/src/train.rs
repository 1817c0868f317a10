//! Training loop: MSE objective, Adam with L2 weight decay, plateau/step
//! learning-rate schedules, z-scored input features, and multi-seed trials.
//!
//! One run is single-threaded and fully deterministic in its seed: parameter
//! init, epoch shuffles and dropout all draw from streams derived from it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{child_seed, ThicknessRecord};
use crate::error::{Error, Result};
use crate::graph::{
    build_sequence, neighbor_lists, weighted_neighbor_lists, PartitionSpec,
    TemporalGraphSequence,
};
use crate::model::{
    alpha_values, clamp_alphas, forward, init_params, Aggregator, ModelConfig, ModelInput,
};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_TRIAL: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Halve the learning rate after `plateau_patience` epochs without a
    /// strictly better validation loss.
    #[default]
    Plateau,
    /// Multiply the learning rate by `step_factor` every `step_period` epochs.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Desk-scale default; the full-scale protocol uses 450.
    pub epochs: usize,
    pub scheduler: SchedulerKind,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub step_period: usize,
    pub step_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            weight_decay: 1e-4,
            epochs: 100,
            scheduler: SchedulerKind::Plateau,
            plateau_patience: 12,
            plateau_factor: 0.5,
            step_period: 75,
            step_factor: 0.5,
            batch_size: 4,
            seed: 0,
            trials: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor == 0.0 {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be >= 1".into()));
        }
        if self.step_period == 0 || self.batch_size == 0 {
            return Err(Error::Config("step_period and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Feature normalization ────────────────────────────────────────────

/// Per-feature z-score statistics, computed on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Population statistics over every node of every graph of `seqs`.
    /// A zero standard deviation is replaced by 1.
    pub fn compute(seqs: &[&TemporalGraphSequence]) -> NormStats {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for seq in seqs {
            for g in &seq.graphs {
                let f = &g.node_features;
                for row in f.data().chunks(3) {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                count += g.n_nodes;
            }
        }
        let mean = sum.map(|s| s / count.max(1) as f64);
        let mut sq = [0.0f64; 3];
        for seq in seqs {
            for g in &seq.graphs {
                for row in g.node_features.data().chunks(3) {
                    for c in 0..3 {
                        let d = row[c] - mean[c];
                        sq[c] += d * d;
                    }
                }
            }
        }
        let std = sq.map(|s| {
            let v = (s / count.max(1) as f64).sqrt();
            if v > 0.0 {
                v
            } else {
                1.0
            }
        });
        NormStats { mean, std }
    }

    pub fn apply(&self, raw: &[f64; 3]) -> [f64; 3] {
        [
            (raw[0] - self.mean[0]) / self.std[0],
            (raw[1] - self.mean[1]) / self.std[1],
            (raw[2] - self.mean[2]) / self.std[2],
        ]
    }
}

/// Normalize a sequence's features and precompute its neighbor structure.
pub fn encode_sequence(
    seq: &TemporalGraphSequence,
    stats: &NormStats,
    aggregator: Aggregator,
) -> ModelInput {
    let n = seq.n_nodes();
    let features = seq
        .graphs
        .iter()
        .map(|g| {
            let mut data = Vec::with_capacity(n * 3);
            for row in g.node_features.data().chunks(3) {
                data.extend_from_slice(&stats.apply(&[row[0], row[1], row[2]]));
            }
            Tensor::new(vec![n, 3], data).expect("shape/data agree by construction")
        })
        .collect();
    let g0 = &seq.graphs[0];
    let adjacency = neighbor_lists(n, &g0.edges);
    let weighted_adjacency = match aggregator {
        Aggregator::WeightedMean => {
            Some(weighted_neighbor_lists(n, &g0.edges, &g0.edge_weights))
        }
        Aggregator::UnweightedMean => None,
    };
    ModelInput { features, adjacency, weighted_adjacency }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam first/second moment estimates, aligned with a `ParamSet`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One Adam update from the gradients currently stored on `params`.
/// Weight decay enters as an L2 term added to the gradient. Non-finite
/// gradients abort with a diagnostic naming the parameter.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (_, p) in params.iter() {
        if !p.grad.is_all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {:?}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for j in 0..value.len() {
            let g = grad[j] + weight_decay * value[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── Schedulers ───────────────────────────────────────────────────────

/// Reduce-on-plateau state; `observe` is called once per epoch after
/// validation and returns the learning rate for the next epoch.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler { patience, factor, best: f64::INFINITY, stale: 0 }
    }

    /// Strict improvement resets the stagnation counter; `patience`
    /// consecutive non-improvements halve the rate and reset the counter.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            lr
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.stale = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

/// Step-decay rate for (0-based) epoch `e`: `lr0 * factor^(e / period)`.
pub fn step_lr(lr0: f64, factor: f64, period: usize, epoch: usize) -> f64 {
    lr0 * factor.powi((epoch / period) as i32)
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, SavedTensor>,
    pub alpha_values: Vec<f64>,
    pub rng_state: RngState,
    pub norm_stats: NormStats,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(
        cfg: &ModelConfig,
        params: &ParamSet,
        stats: &NormStats,
        seed: u64,
        epochs_completed: usize,
    ) -> Self {
        let map = params
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    SavedTensor {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: cfg.clone(),
            params: map,
            alpha_values: alpha_values(params, cfg),
            rng_state: RngState { seed, epochs_completed },
            norm_stats: stats.clone(),
        }
    }

    /// Rebuild the parameter registry, validating every name and shape
    /// against what the stored config implies.
    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut params = init_params(&self.config, 0)?;
        if self.params.len() != params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                params.len()
            )));
        }
        for (_, p) in params.iter_mut() {
            let saved = self.params.get(&p.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint missing parameter {:?}", p.name))
            })?;
            if saved.shape != p.value.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint parameter {:?} has shape {:?}, config implies {:?}",
                    p.name,
                    saved.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(saved.shape.clone(), saved.values.clone())?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "epoch,train_mse,val_mse,lr")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in trace {
        writeln!(f, "{},{},{},{}", row.epoch, row.train_mse, row.val_mse, row.lr)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub best_val_mse: f64,
    pub best_epoch: Option<usize>,
    /// Set when training aborted on a non-finite loss or gradient; the
    /// checkpoint then holds the last good parameters.
    pub diverged: Option<String>,
}

/// Pooled MSE of eval-mode predictions over `inputs` (sum of squared errors
/// over every entry, divided by the total entry count).
pub fn pooled_mse(
    params: &ParamSet,
    cfg: &ModelConfig,
    inputs: &[(ModelInput, Tensor)],
) -> Result<f64> {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (input, target) in inputs {
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, cfg, input, &mut rng, false)?;
        for (p, t) in tape.value(out).data().iter().zip(target.data()) {
            let d = p - t;
            sum_sq += d * d;
        }
        count += target.len();
    }
    Ok(sum_sq / count.max(1) as f64)
}

/// Train one model on prebuilt sequences. Deterministic in `seed`.
pub fn train_one(
    train_seqs: &[&TemporalGraphSequence],
    val_seqs: &[&TemporalGraphSequence],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }

    let stats = NormStats::compute(train_seqs);
    let prep = |seqs: &[&TemporalGraphSequence]| -> Vec<(ModelInput, Tensor)> {
        seqs.iter()
            .map(|s| (encode_sequence(s, &stats, model_cfg.aggregator), s.targets.clone()))
            .collect()
    };
    let train_data = prep(train_seqs);
    let val_data = prep(val_seqs);

    let mut params = init_params(model_cfg, child_seed(seed, STREAM_INIT))?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, STREAM_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, STREAM_DROPOUT));

    let mut lr = train_cfg.lr0;
    let mut plateau = PlateauScheduler::new(train_cfg.plateau_patience, train_cfg.plateau_factor);
    let mut trace = Vec::with_capacity(train_cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut best_ckpt = Checkpoint::from_params(model_cfg, &params, &stats, seed, 0);

    let mut grad_acc: Vec<Tensor> = params
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.shape()))
        .collect();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..train_cfg.epochs {
        if train_cfg.scheduler == SchedulerKind::Step {
            lr = step_lr(train_cfg.lr0, train_cfg.step_factor, train_cfg.step_period, epoch);
        }
        // seeded shuffle of the record order
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            for t in &mut grad_acc {
                t.data_mut().fill(0.0);
            }
            let mut batch_ok = true;
            for &ri in batch {
                let (input, target) = &train_data[ri];
                let mut tape = Tape::new();
                let out = forward(&mut tape, &params, model_cfg, input, &mut dropout_rng, true)?;
                let tgt = tape.leaf(target.clone())?;
                let loss = tape.mse(out, tgt)?;
                let loss_val = tape.value(loss).scalar_value()?;
                if !loss_val.is_finite() {
                    batch_ok = false;
                    break;
                }
                epoch_loss_sum += loss_val;
                tape.backward(loss, &mut params)?;
                for (acc, (_, p)) in grad_acc.iter_mut().zip(params.iter()) {
                    for (a, g) in acc.data_mut().iter_mut().zip(p.grad.data()) {
                        *a += g;
                    }
                }
            }
            if !batch_ok {
                return Ok(TrainRun {
                    checkpoint: best_ckpt,
                    trace,
                    best_val_mse: best_val,
                    best_epoch,
                    diverged: Some(format!("non-finite training loss at epoch {epoch}")),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for (acc, (_, p)) in grad_acc.iter().zip(params.iter_mut()) {
                for (g, a) in p.grad.data_mut().iter_mut().zip(acc.data()) {
                    *g = a * inv;
                }
            }
            if let Err(e) = adam_step(&mut params, &mut adam, lr, train_cfg.weight_decay) {
                return Ok(TrainRun {
                    checkpoint: best_ckpt,
                    trace,
                    best_val_mse: best_val,
                    best_epoch,
                    diverged: Some(format!("{e} at epoch {epoch}")),
                });
            }
            clamp_alphas(&mut params, model_cfg);
        }

        let train_mse = epoch_loss_sum / train_data.len() as f64;
        let val_mse = if val_data.is_empty() {
            train_mse
        } else {
            pooled_mse(&params, model_cfg, &val_data)?
        };
        if !val_mse.is_finite() {
            return Ok(TrainRun {
                checkpoint: best_ckpt,
                trace,
                best_val_mse: best_val,
                best_epoch,
                diverged: Some(format!("non-finite validation loss at epoch {epoch}")),
            });
        }
        trace.push(TraceRow { epoch, train_mse, val_mse, lr });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = Some(epoch);
            best_ckpt = Checkpoint::from_params(model_cfg, &params, &stats, seed, epoch + 1);
        }
        if train_cfg.scheduler == SchedulerKind::Plateau {
            lr = plateau.observe(val_mse, lr);
        }
    }

    Ok(TrainRun {
        checkpoint: best_ckpt,
        trace,
        best_val_mse: best_val,
        best_epoch,
        diverged: None,
    })
}

/// Per-trial seed for trial `t` (1-based), derived from the config seed.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    child_seed(base, STREAM_TRIAL + trial as u64)
}

/// Build sequences for every record; `l` comes from the model's `k` and the
/// target depth from its `m`.
pub fn build_all_sequences(
    records: &[ThicknessRecord],
    model_cfg: &ModelConfig,
    spec: &PartitionSpec,
    standard_haversine: bool,
) -> Result<Vec<TemporalGraphSequence>> {
    records
        .iter()
        .map(|r| build_sequence(r, model_cfg.k, model_cfg.m, spec, standard_haversine))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, to_thickness};
    use crate::model::SkipMode;

    fn mini_corpus(count: usize, seed: u64) -> Vec<ThicknessRecord> {
        synth_generate(count, seed, 24, 8)
            .iter()
            .map(|r| to_thickness(r).unwrap())
            .collect()
    }

    fn mini_cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            l_sage: 2,
            n_blocks: 1,
            n_heads: 2,
            dropout_p: 0.1,
            m: 2,
            k: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn norm_stats_use_training_split_only() {
        let recs = mini_corpus(6, 1);
        let cfg = mini_cfg();
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs[..3].iter().collect();
        let other: Vec<&TemporalGraphSequence> = seqs[3..].iter().collect();
        let a = NormStats::compute(&train);
        let b = NormStats::compute(&other);
        assert_ne!(a, b, "distinct splits should give distinct stats");
        assert!(a.std.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let cfg = mini_cfg();
        let mut params = init_params(&cfg, 0).unwrap();
        let before: Vec<f64> = params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
        let mut adam = AdamState::new(&params);
        params.zero_grads();
        adam_step(&mut params, &mut adam, 1e-3, 0.0).unwrap();
        let after: Vec<f64> = params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_single_step_matches_hand_recurrence() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(2.0)).unwrap();
        let mut adam = AdamState::new(&params);
        let g = 0.37;
        params.accumulate_grad(id, &[g]);
        let lr = 1e-2;
        adam_step(&mut params, &mut adam, lr, 0.0).unwrap();
        // t=1: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        let expect = 2.0 - lr * g / (g.abs() + ADAM_EPS);
        let got = params.value(id).data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn adam_second_step_matches_hand_recurrence() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = AdamState::new(&params);
        let (g1, g2) = (0.5, -0.25);
        let lr = 1e-3;
        params.accumulate_grad(id, &[g1]);
        adam_step(&mut params, &mut adam, lr, 0.0).unwrap();
        let v1 = params.value(id).data()[0];
        params.zero_grads();
        params.accumulate_grad(id, &[g2]);
        adam_step(&mut params, &mut adam, lr, 0.0).unwrap();
        let m2 = ADAM_BETA1 * (1.0 - ADAM_BETA1) * g1 + (1.0 - ADAM_BETA1) * g2;
        let v2 = ADAM_BETA2 * (1.0 - ADAM_BETA2) * g1 * g1 + (1.0 - ADAM_BETA2) * g2 * g2;
        let m_hat = m2 / (1.0 - ADAM_BETA1.powi(2));
        let v_hat = v2 / (1.0 - ADAM_BETA2.powi(2));
        let expect = v1 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        let got = params.value(id).data()[0];
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_weight_decay_pulls_toward_zero() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(5.0)).unwrap();
        let mut adam = AdamState::new(&params);
        params.zero_grads();
        adam_step(&mut params, &mut adam, 1e-2, 1e-1).unwrap();
        assert!(params.value(id).data()[0] < 5.0);
    }

    #[test]
    fn adam_rejects_nan_grad_naming_param() {
        let mut params = ParamSet::new();
        params.add("w.bad", Tensor::scalar(0.0)).unwrap();
        let id = params.id("w.bad").unwrap();
        let mut adam = AdamState::new(&params);
        params.accumulate_grad(id, &[f64::NAN]);
        let err = adam_step(&mut params, &mut adam, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("w.bad"), "{err}");
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut s = PlateauScheduler::new(12, 0.5);
        let mut lr = 1.0;
        for e in 0..40 {
            lr = s.observe(100.0 - e as f64, lr);
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn plateau_halves_at_exact_epochs_under_constant_loss() {
        let mut s = PlateauScheduler::new(12, 0.5);
        let mut lr = 1.0;
        let mut halving_epochs = Vec::new();
        for epoch in 0..40 {
            let before = lr;
            lr = s.observe(7.0, lr);
            if lr < before {
                halving_epochs.push(epoch);
            }
        }
        assert_eq!(halving_epochs, vec![12, 24, 36]);
    }

    #[test]
    fn plateau_improvement_just_before_patience_prevents_halving() {
        let mut s = PlateauScheduler::new(12, 0.5);
        let mut lr = 1.0;
        lr = s.observe(10.0, lr);
        for _ in 0..11 {
            lr = s.observe(10.0, lr);
        }
        // improvement on the 12th consecutive observation resets the counter
        lr = s.observe(9.0, lr);
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn step_schedule_is_exact() {
        for e in 0..300 {
            let lr = step_lr(0.01, 0.5, 75, e);
            let expect = 0.01 * 0.5f64.powi((e / 75) as i32);
            assert_eq!(lr, expect);
        }
    }

    #[test]
    fn training_loss_decreases_on_fixed_batch() {
        let recs = mini_corpus(2, 3);
        let cfg = mini_cfg();
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs.iter().collect();
        let tc = TrainConfig {
            lr0: 1e-3,
            epochs: 10,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = train_one(&train, &[], &cfg, &tc, 5).unwrap();
        assert!(run.diverged.is_none());
        let first = run.trace.first().unwrap().train_mse;
        let last = run.trace.last().unwrap().train_mse;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let recs = mini_corpus(6, 9);
        let cfg = mini_cfg();
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs[..4].iter().collect();
        let val: Vec<&TemporalGraphSequence> = seqs[4..].iter().collect();
        let tc = TrainConfig { epochs: 4, ..TrainConfig::default() };
        let a = train_one(&train, &val, &cfg, &tc, 11).unwrap();
        let b = train_one(&train, &val, &cfg, &tc, 11).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let recs = mini_corpus(5, 13);
        let cfg = mini_cfg();
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs.iter().collect();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let run = train_one(&train, &[], &cfg, &tc, 21).unwrap();
        let init = init_params(&cfg, child_seed(21, STREAM_INIT)).unwrap();
        let restored = run.checkpoint.to_param_set().unwrap();
        for ((_, a), (_, b)) in restored.iter().zip(init.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs_bitwise() {
        let recs = mini_corpus(5, 17);
        let cfg = mini_cfg();
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs.iter().collect();
        let tc = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let run = train_one(&train, &[], &cfg, &tc, 31).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        run.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, run.checkpoint);

        let p1 = run.checkpoint.to_param_set().unwrap();
        let p2 = loaded.to_param_set().unwrap();
        let input = encode_sequence(&seqs[0], &loaded.norm_stats, cfg.aggregator);
        let eval = |params: &ParamSet| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let out = forward(&mut tape, params, &cfg, &input, &mut rng, false).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(eval(&p1), eval(&p2));
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let cfg = mini_cfg();
        let params = init_params(&cfg, 0).unwrap();
        let stats = NormStats { mean: [0.0; 3], std: [1.0; 3] };
        let mut ckpt = Checkpoint::from_params(&cfg, &params, &stats, 0, 0);
        ckpt.config.d = 8; // config now disagrees with every stored shape
        assert!(ckpt.to_param_set().is_err());
    }

    #[test]
    fn alphas_stay_in_bounds_during_training() {
        let recs = mini_corpus(5, 23);
        let cfg = ModelConfig { skip: SkipMode::Adaptive, ..mini_cfg() };
        let seqs = build_all_sequences(&recs, &cfg, &PartitionSpec::default(), false).unwrap();
        let train: Vec<&TemporalGraphSequence> = seqs.iter().collect();
        let tc = TrainConfig { epochs: 3, lr0: 0.05, ..TrainConfig::default() };
        let run = train_one(&train, &[], &cfg, &tc, 41).unwrap();
        for a in &run.checkpoint.alpha_values {
            assert!((0.0..=1.0).contains(a), "alpha out of bounds: {a}");
        }
    }
}
