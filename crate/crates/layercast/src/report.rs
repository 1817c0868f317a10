//! Metrics, trial reports, and the ablation / alpha-sensitivity runners.
//!
//! The headline metric is pixel RMSE pooled over every predicted entry of
//! the test split. The boundary metric restricts the pooling to the leftmost
//! and rightmost `p` columns of each predicted layer, where stitching
//! adjacent radargrams makes accuracy matter most.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ThicknessRecord;
use crate::error::{Error, Result};
use crate::graph::{PartitionSpec, TemporalGraphSequence};
use crate::model::{forward, ModelConfig, SkipMode, SpatialEncoder};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{
    build_all_sequences, encode_sequence, train_one, trial_seed, NormStats, TrainConfig,
};

/// Boundary widths reported by default.
pub const DEFAULT_BOUNDARY_PIXELS: [usize; 4] = [1, 2, 5, 10];

// ── Metrics ──────────────────────────────────────────────────────────

/// Square root of the mean squared difference over every entry.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "rmse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / n).sqrt())
}

/// RMSE over the `p` leftmost and `p` rightmost columns of each layer.
/// `pred` and `target` are `m x w` (layers by columns).
pub fn boundary_rmse(pred: &Tensor, target: &Tensor, p: usize) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() != 2 {
        return Err(Error::Shape {
            op: "boundary_rmse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (m, w) = (pred.shape()[0], pred.shape()[1]);
    if p == 0 || 2 * p > w {
        return Err(Error::Validation(format!(
            "boundary width must satisfy 1 <= p <= w/2, got p={p} w={w}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..p {
            let left = pred.at2(i, j) - target.at2(i, j);
            let right = pred.at2(i, w - p + j) - target.at2(i, w - p + j);
            sum += left * left + right * right;
        }
    }
    Ok((sum / (m * 2 * p) as f64).sqrt())
}

/// Incremental pooled squared error, for dataset-level metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pooled {
    pub sum_sq: f64,
    pub count: usize,
}

impl Pooled {
    pub fn push(&mut self, pred: f64, target: f64) {
        let d = pred - target;
        self.sum_sq += d * d;
        self.count += 1;
    }

    pub fn rmse(&self) -> f64 {
        (self.sum_sq / self.count.max(1) as f64).sqrt()
    }
}

/// Population mean and standard deviation of a sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ── Evaluation over a test split ─────────────────────────────────────

/// Pooled evaluation of a trained model on a set of sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rmse: f64,
    /// p -> boundary RMSE, pooled over records.
    pub boundary: BTreeMap<usize, f64>,
    /// Mean absolute error per column, pooled over records and layers.
    pub column_mae: Vec<f64>,
    /// Mean of per-record RMSEs (alternative to the pooled figure).
    pub per_record_rmse_mean: f64,
}

/// Run eval-mode predictions over `seqs` and pool the error metrics.
pub fn evaluate(
    params: &ParamSet,
    cfg: &ModelConfig,
    stats: &NormStats,
    seqs: &[&TemporalGraphSequence],
    boundary_pixels: &[usize],
) -> Result<EvalOutcome> {
    use rand::SeedableRng;
    let mut pooled = Pooled::default();
    let mut boundary_pools: BTreeMap<usize, Pooled> =
        boundary_pixels.iter().map(|&p| (p, Pooled::default())).collect();
    let mut per_record = Vec::with_capacity(seqs.len());
    let w = seqs.first().map_or(0, |s| s.n_nodes());
    let mut col_abs = vec![0.0f64; w];
    let mut col_count = vec![0usize; w];

    for seq in seqs {
        let input = encode_sequence(seq, stats, cfg.aggregator);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, cfg, &input, &mut rng, false)?;
        let pred = tape.value(out);
        let target = &seq.targets;
        per_record.push(rmse(pred, target)?);
        let (n, m) = (target.shape()[0], target.shape()[1]);
        for c in 0..n {
            for j in 0..m {
                let (pv, tv) = (pred.at2(c, j), target.at2(c, j));
                pooled.push(pv, tv);
                col_abs[c] += (pv - tv).abs();
                col_count[c] += 1;
            }
        }
        for (&p, pool) in boundary_pools.iter_mut() {
            if 2 * p > n {
                return Err(Error::Validation(format!(
                    "boundary width p={p} too large for width {n}"
                )));
            }
            // columns are nodes; layers index the prediction columns
            for j in 0..m {
                for c in 0..p {
                    pool.push(pred.at2(c, j), target.at2(c, j));
                    pool.push(pred.at2(n - p + c, j), target.at2(n - p + c, j));
                }
            }
        }
    }

    let column_mae = col_abs
        .iter()
        .zip(&col_count)
        .map(|(s, c)| s / (*c).max(1) as f64)
        .collect();
    let (per_record_mean, _) = mean_std(&per_record);
    Ok(EvalOutcome {
        rmse: pooled.rmse(),
        boundary: boundary_pools.iter().map(|(&p, pool)| (p, pool.rmse())).collect(),
        column_mae,
        per_record_rmse_mean: per_record_mean,
    })
}

// ── Trials ───────────────────────────────────────────────────────────

/// Metrics from one trained trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub split_seed: u64,
    pub rmse: f64,
    pub boundary: BTreeMap<usize, f64>,
    pub final_alphas: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub config_fingerprint: String,
    pub wall_time_s: f64,
}

/// Aggregate over trials: mean and population standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub trials: Vec<TrialReport>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub boundary_mean: BTreeMap<usize, f64>,
    pub boundary_std: BTreeMap<usize, f64>,
}

pub fn aggregate(trials: Vec<TrialReport>) -> TrialAggregate {
    let rmses: Vec<f64> = trials.iter().map(|t| t.rmse).collect();
    let (rmse_mean, rmse_std) = mean_std(&rmses);
    let mut boundary_mean = BTreeMap::new();
    let mut boundary_std = BTreeMap::new();
    if let Some(first) = trials.first() {
        for &p in first.boundary.keys() {
            let vals: Vec<f64> = trials.iter().map(|t| t.boundary[&p]).collect();
            let (m, s) = mean_std(&vals);
            boundary_mean.insert(p, m);
            boundary_std.insert(p, s);
        }
    }
    TrialAggregate { trials, rmse_mean, rmse_std, boundary_mean, boundary_std }
}

/// FNV-1a over the canonical JSON of both configs; stable across runs.
pub fn config_fingerprint(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> String {
    let text = format!(
        "{}|{}",
        serde_json::to_string(model_cfg).unwrap_or_default(),
        serde_json::to_string(train_cfg).unwrap_or_default()
    );
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Train and evaluate `trials` seeded splits of `records`. Trial `t` splits
/// with seed `t` and trains with a seed derived from the config seed and `t`.
pub fn run_trials(
    records: &[ThicknessRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    spec: &PartitionSpec,
    standard_haversine: bool,
    trials: usize,
    boundary_pixels: &[usize],
) -> Result<TrialAggregate> {
    let seqs = build_all_sequences(records, model_cfg, spec, standard_haversine)?;
    let fingerprint = config_fingerprint(model_cfg, train_cfg);
    let mut reports = Vec::with_capacity(trials);
    for trial in 1..=trials {
        let started = Instant::now();
        let split = crate::data::split(records, trial as u64)?;
        let pick = |ids: &[String]| -> Vec<&TemporalGraphSequence> {
            seqs.iter().filter(|s| ids.contains(&s.id)).collect()
        };
        let train = pick(&split.train);
        let val = pick(&split.val);
        let test = pick(&split.test);
        let seed = trial_seed(train_cfg.seed, trial);
        let run = train_one(&train, &val, model_cfg, train_cfg, seed)?;
        if let Some(msg) = run.diverged {
            return Err(Error::Numeric(format!("trial {trial} diverged: {msg}")));
        }
        let params = run.checkpoint.to_param_set()?;
        let outcome = evaluate(
            &params,
            model_cfg,
            &run.checkpoint.norm_stats,
            &test,
            boundary_pixels,
        )?;
        log::info!(
            "trial {trial}: test rmse {:.4} (best epoch {:?})",
            outcome.rmse,
            run.best_epoch
        );
        reports.push(TrialReport {
            trial,
            split_seed: trial as u64,
            rmse: outcome.rmse,
            boundary: outcome.boundary,
            final_alphas: run.checkpoint.alpha_values.clone(),
            best_epoch: run.best_epoch,
            config_fingerprint: fingerprint.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(aggregate(reports))
}

// ── Ablation grid ────────────────────────────────────────────────────

/// Component toggles for one ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub graph: bool,
    pub attention: bool,
    pub lr_skip: bool,
    pub localized: bool,
}

impl AblationVariant {
    /// A variant is meaningful when it keeps at least one encoder component
    /// and only uses the long-range skip where attention blocks exist.
    pub fn validate(&self) -> Result<()> {
        if !self.graph && !self.attention {
            return Err(Error::Config(
                "ablation variant needs the graph encoder or attention".into(),
            ));
        }
        if self.lr_skip && !self.attention {
            return Err(Error::Config(
                "long-range skip without attention blocks is meaningless".into(),
            ));
        }
        Ok(())
    }

    pub fn flags_string(&self) -> String {
        let mark = |b: bool| if b { 'y' } else { 'n' };
        format!(
            "graph={} attention={} lr_skip={} localized={}",
            mark(self.graph),
            mark(self.attention),
            mark(self.lr_skip),
            mark(self.localized)
        )
    }

    /// Derive the model config and partition handling for this variant.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if !self.graph {
            cfg.spatial = SpatialEncoder::LinearLift;
        }
        if !self.attention {
            cfg.n_blocks = 0;
        }
        cfg.skip = if self.lr_skip { SkipMode::Adaptive } else { SkipMode::Off };
        cfg
    }
}

/// The ten meaningful combinations of the four components.
pub fn default_ablation_grid() -> Vec<AblationVariant> {
    let mut grid = Vec::new();
    for graph in [true, false] {
        for attention in [true, false] {
            for lr_skip in [false, true] {
                for localized in [false, true] {
                    let v = AblationVariant { graph, attention, lr_skip, localized };
                    if v.validate().is_ok() {
                        grid.push(v);
                    }
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: AblationVariant,
    pub n_blocks: usize,
    pub alpha0: f64,
    pub aggregate: TrialAggregate,
}

/// Train/evaluate every variant under the shared trial protocol. The
/// non-localized variants replace the window partition with one fully
/// connected graph over all nodes.
pub fn run_ablation(
    records: &[ThicknessRecord],
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    spec: &PartitionSpec,
    standard_haversine: bool,
    variants: &[AblationVariant],
    trials: usize,
    boundary_pixels: &[usize],
) -> Result<Vec<VariantReport>> {
    let width = records
        .first()
        .map(|r| r.width)
        .ok_or_else(|| Error::Validation("empty record set".into()))?;
    let full_spec = PartitionSpec::fully_connected(width);
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        v.validate()?;
        let cfg = v.apply(base_model);
        let use_spec = if v.localized { spec } else { &full_spec };
        log::info!("ablation variant: {}", v.flags_string());
        let agg = run_trials(
            records,
            &cfg,
            train_cfg,
            use_spec,
            standard_haversine,
            trials,
            boundary_pixels,
        )?;
        out.push(VariantReport {
            variant: *v,
            n_blocks: cfg.n_blocks,
            alpha0: cfg.alpha0,
            aggregate: agg,
        });
    }
    Ok(out)
}

// ── Alpha sensitivity sweep ──────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub n_blocks: usize,
    pub alpha0: f64,
    pub aggregate: TrialAggregate,
}

/// Trial protocol over the (block count, initial alpha) grid.
pub fn run_alpha_sweep(
    records: &[ThicknessRecord],
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    spec: &PartitionSpec,
    standard_haversine: bool,
    n_blocks_list: &[usize],
    alpha0_list: &[f64],
    trials: usize,
    boundary_pixels: &[usize],
) -> Result<Vec<SweepReport>> {
    for &a in alpha0_list {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("alpha0 {a} outside [0,1]")));
        }
    }
    let mut out = Vec::new();
    for &n_blocks in n_blocks_list {
        for &alpha0 in alpha0_list {
            let cfg = ModelConfig { n_blocks, alpha0, ..base_model.clone() };
            log::info!("alpha sweep: n_blocks={n_blocks} alpha0={alpha0}");
            let agg = run_trials(
                records,
                &cfg,
                train_cfg,
                spec,
                standard_haversine,
                trials,
                boundary_pixels,
            )?;
            out.push(SweepReport { n_blocks, alpha0, aggregate: agg });
        }
    }
    Ok(out)
}

// ── Writers ──────────────────────────────────────────────────────────

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn wline(f: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

/// One CSV row per trial with stable column names.
pub fn write_trials_csv(
    path: impl AsRef<Path>,
    rows: &[(String, usize, f64, &TrialReport)],
) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    wline(
        &mut f,
        path,
        "variant_flags,n_blocks,alpha0,trial,rmse,brmse_p1,brmse_p2,brmse_p5,brmse_p10",
    )?;
    for (flags, n_blocks, alpha0, t) in rows {
        let b = |p: usize| {
            t.boundary
                .get(&p)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        wline(
            &mut f,
            path,
            &format!(
                "{},{},{},{},{},{},{},{},{}",
                flags,
                n_blocks,
                alpha0,
                t.trial,
                t.rmse,
                b(1),
                b(2),
                b(5),
                b(10)
            ),
        )?;
    }
    Ok(())
}

/// Per-column mean absolute error profile, for external plotting.
pub fn write_column_mae_csv(path: impl AsRef<Path>, column_mae: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    wline(&mut f, path, "column,mae")?;
    for (c, v) in column_mae.iter().enumerate() {
        wline(&mut f, path, &format!("{c},{v}"))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let json =
        serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}
