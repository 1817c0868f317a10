//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side re-evaluates the loss with each parameter component
//! nudged by ±step; it never touches the backward pass, so it stays an
//! independent oracle for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::error::Result;
use crate::graph::{build_partitioned_edges, neighbor_lists, PartitionSpec};
use crate::model::{forward, init_params, ModelConfig, ModelInput, IN_FEATURES};
use crate::params::ParamSet;
use crate::tape::{Adjacency, Tape, ValueId, WeightedAdjacency};
use crate::tensor::Tensor;

/// Loss builder: records a fresh forward pass on `tape` and returns the
/// scalar loss node. Must be deterministic in the parameter values.
pub type LossFn<'a> = dyn Fn(&mut Tape, &ParamSet) -> Result<ValueId> + 'a;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.max_rel_err))
    }
}

fn eval_loss(f: &LossFn, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.value(loss).scalar_value()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of `f` against central differences with
/// the given `step`, over every component of every parameter in `params`.
/// Returns the maximum relative error seen.
pub fn check_gradients(params: &mut ParamSet, f: &LossFn, step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Tensor> = params.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.iter().enumerate() {
        for ci in 0..params.value(*id).len() {
            let orig = params.value(*id).data()[ci];
            params.value_mut(*id).data_mut()[ci] = orig + step;
            let plus = eval_loss(f, params)?;
            params.value_mut(*id).data_mut()[ci] = orig - step;
            let minus = eval_loss(f, params)?;
            params.value_mut(*id).data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[pi].data()[ci], numeric));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Random values kept away from a set of non-smooth points.
fn rand_tensor_avoiding(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            data.push(v);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Finite-difference suite over every differentiable tape operation.
/// `step` 1e-5 and tolerance 1e-4 are the working defaults.
pub fn run_op_suite(seed: u64, step: f64, tolerance: f64) -> Result<CheckReport> {
    let mut report = CheckReport { entries: Vec::new(), tolerance };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Each case owns a small ParamSet so the checker perturbs exactly the
    // tensors the op consumes.
    {
        let mut ps = ParamSet::new();
        ps.add("a", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        ps.add("b", rand_tensor(&mut rng, &[4, 2], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let a = t.named(p, "a")?;
            let b = t.named(p, "b")?;
            let c = t.matmul(a, b)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(c, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "matmul".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("a", rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0))?;
        ps.add("b", rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let a = t.named(p, "a")?;
            let b = t.named(p, "b")?;
            let c = t.batched_matmul(a, b)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(c, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "batched_matmul".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[4, 2, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.permute(x, &[2, 0, 1])?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "permute".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.reshape(x, &[2, 6])?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "reshape".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("a", rand_tensor(&mut rng, &[3, 3], -1.0, 1.0))?;
        ps.add("b", rand_tensor(&mut rng, &[3, 3], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let a = t.named(p, "a")?;
            let b = t.named(p, "b")?;
            let s = t.add(a, b)?;
            let m2 = t.mul(s, b)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(m2, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "add+mul".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[4, 3], -1.0, 1.0))?;
        ps.add("b", rand_tensor(&mut rng, &[3], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let b = t.named(p, "b")?;
            let y = t.add_bias(x, b)?;
            let y2 = t.scale(y, 1.7)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y2, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "add_bias+scale".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("alpha", Tensor::scalar(0.3))?;
        ps.add("x", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        ps.add("y", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let a = t.named(p, "alpha")?;
            let x = t.named(p, "x")?;
            let y = t.named(p, "y")?;
            let m2 = t.convex_mix(a, x, y)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(m2, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "convex_mix".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor_avoiding(&mut rng, &[4, 4], -2.0, 2.0, &[0.0], 0.05))?;
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.relu(x)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "relu".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add(
            "x",
            rand_tensor_avoiding(&mut rng, &[4, 4], -5.0, 5.0, &[-3.0, 3.0], 0.05),
        )?;
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.hardswish(x)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "hardswish".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[3, 5], -2.0, 2.0))?;
        let probe = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.softmax_lastdim(x)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "softmax_lastdim".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[4, 6], -2.0, 2.0))?;
        ps.add("gain", rand_tensor(&mut rng, &[6], 0.5, 1.5))?;
        ps.add("bias", rand_tensor(&mut rng, &[6], -0.5, 0.5))?;
        let probe = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let g = t.named(p, "gain")?;
            let b = t.named(p, "bias")?;
            let y = t.layernorm(x, g, b, 1e-5)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "layernorm".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[5, 3], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            // fixed seed per forward: the mask is identical across FD evals
            let mut drng = ChaCha8Rng::seed_from_u64(99);
            let x = t.named(p, "x")?;
            let y = t.dropout(x, 0.3, true, &mut drng)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "dropout".into(), max_rel_err: err });
    }
    {
        let adj: Adjacency = Arc::new(vec![
            vec![1, 2],
            vec![0, 2, 3],
            vec![0, 1],
            vec![1, 4],
            vec![3],
        ]);
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[5, 3], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.segment_mean(x, adj.clone())?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "segment_mean".into(), max_rel_err: err });
    }
    {
        let wadj: WeightedAdjacency = Arc::new(vec![
            vec![(1, 0.75), (2, 0.25)],
            vec![(0, 0.5), (2, 0.5)],
            vec![(0, 1.0)],
        ]);
        let mut ps = ParamSet::new();
        ps.add("x", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let x = t.named(p, "x")?;
            let y = t.segment_weighted_mean(x, wadj.clone())?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry {
            name: "segment_weighted_mean".into(),
            max_rel_err: err,
        });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("a", rand_tensor(&mut rng, &[2, 1, 3], -1.0, 1.0))?;
        ps.add("b", rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0))?;
        let probe = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let a = t.named(p, "a")?;
            let b = t.named(p, "b")?;
            let y = t.concat(&[a, b], 1)?;
            let r = t.leaf(probe.clone())?;
            let m = t.mul(y, r)?;
            t.sum_all(m)
        }, step)?;
        report.entries.push(CheckEntry { name: "concat".into(), max_rel_err: err });
    }
    {
        let mut ps = ParamSet::new();
        ps.add("pred", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0))?;
        let target = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let err = check_gradients(&mut ps, &|t: &mut Tape, p: &ParamSet| {
            let pr = t.named(p, "pred")?;
            let tg = t.leaf(target.clone())?;
            t.mse(pr, tg)
        }, step)?;
        report.entries.push(CheckEntry { name: "mse".into(), max_rel_err: err });
    }

    Ok(report)
}

/// The tiny end-to-end configuration used for whole-model gradient checks:
/// 8 nodes, 3 input graphs, width 4, 2 blocks, 2 heads, 2 output layers.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        l_sage: 2,
        n_blocks: 2,
        n_heads: 2,
        dropout_p: 0.0,
        m: 2,
        k: 3,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the full model at the tiny configuration:
/// every parameter of every component participates in one MSE loss.
pub fn check_tiny_model(seed: u64, step: f64) -> Result<f64> {
    let cfg = tiny_model_config();
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Tensor> = (0..cfg.k)
        .map(|_| rand_tensor(&mut rng, &[n, IN_FEATURES], -1.0, 1.0))
        .collect();
    let target = rand_tensor(&mut rng, &[n, cfg.m], -1.0, 1.0);
    let edges = build_partitioned_edges(n, &PartitionSpec::default())?;
    let input = ModelInput {
        features,
        adjacency: neighbor_lists(n, &edges),
        weighted_adjacency: None,
    };
    let mut params = init_params(&cfg, seed.wrapping_add(1))?;
    check_gradients(&mut params, &|t: &mut Tape, p: &ParamSet| {
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(t, p, &cfg, &input, &mut drng, true)?;
        let tgt = t.leaf(target.clone())?;
        t.mse(out, tgt)
    }, step)
}
