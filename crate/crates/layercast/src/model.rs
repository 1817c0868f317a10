//! The spatio-temporal graph transformer.
//!
//! Per input graph, a stack of GraphSAGE layers extracts spatial features;
//! the per-graph embeddings stack along a time axis and run through N
//! temporal attention blocks. After every block an adaptive long-range skip
//! mixes the block output back toward the original spatial embedding with a
//! learnable scalar, followed by layer normalization. A linear map collapses
//! the time axis and three linear layers with hardswish produce the per-node
//! deep-layer thickness predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Adjacency, Tape, ValueId, WeightedAdjacency};
use crate::tensor::Tensor;

/// Layer-normalization epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Raw node features per graph: latitude, longitude, thickness.
pub const IN_FEATURES: usize = 3;

/// How neighbor features are pooled in a GraphSAGE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// Plain arithmetic mean over neighbors.
    #[default]
    UnweightedMean,
    /// Mean weighted by per-edge weights, normalized per neighborhood.
    WeightedMean,
}

/// Spatial encoder choice; the linear lift replaces the SAGE stack in the
/// attention-only ablation so raw features feed the temporal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialEncoder {
    #[default]
    Sage,
    LinearLift,
}

/// What happens between consecutive temporal attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    /// Learnable mix of block output and the original embedding, then LN.
    #[default]
    Adaptive,
    /// LN of the block output only (the limit of `Adaptive` at alpha = 0).
    LayerNormOnly,
    /// Plain block chaining; no mix, no extra LN.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// GraphSAGE layers in the spatial stack.
    pub l_sage: usize,
    /// Temporal attention blocks.
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Feedforward width; `None` means `4 * d`.
    pub d_ff: Option<usize>,
    pub dropout_p: f64,
    /// Initial value of every skip-mix scalar.
    pub alpha0: f64,
    /// Deep layers predicted per node.
    pub m: usize,
    /// Input graphs per sequence.
    pub k: usize,
    pub aggregator: Aggregator,
    pub spatial: SpatialEncoder,
    pub skip: SkipMode,
    /// One shared mix scalar instead of one per block.
    pub shared_alpha: bool,
    /// Separate SAGE weights per input graph instead of shared ones.
    pub per_graph_sage: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            l_sage: 5,
            n_blocks: 8,
            n_heads: 8,
            d_ff: None,
            dropout_p: 0.1,
            alpha0: 0.25,
            m: 15,
            k: 5,
            aggregator: Aggregator::default(),
            spatial: SpatialEncoder::default(),
            skip: SkipMode::default(),
            shared_alpha: false,
            per_graph_sage: false,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.k == 0 || self.n_heads == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.spatial == SpatialEncoder::Sage && self.l_sage == 0 {
            return Err(Error::Config("sage stack needs at least one layer".into()));
        }
        if self.d_ff() == 0 {
            return Err(Error::Config("feedforward width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::Config(format!(
                "alpha0 must lie in [0,1], got {}",
                self.alpha0
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0,1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    fn uses_skip_params(&self) -> bool {
        self.skip != SkipMode::Off && self.n_blocks > 0
    }
}

// ── Parameter registry ───────────────────────────────────────────────

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

fn add_linear(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    ps.add(format!("{prefix}.weight"), uniform(rng, &[d_out, d_in], d_in))?;
    ps.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

fn add_layernorm(ps: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    ps.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    ps.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Build and initialize every learnable tensor for `cfg`.
///
/// Weights are uniform in `±1/sqrt(fan_in)`, biases zero, LN affines
/// identity, skip scalars `alpha0`. Deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let d = cfg.d;

    match cfg.spatial {
        SpatialEncoder::Sage => {
            let graphs: usize = if cfg.per_graph_sage { cfg.k } else { 1 };
            for g in 0..graphs {
                for l in 0..cfg.l_sage {
                    let prefix = if cfg.per_graph_sage {
                        format!("sage.g{g}.{l}")
                    } else {
                        format!("sage.{l}")
                    };
                    let d_in = if l == 0 { IN_FEATURES } else { d };
                    ps.add(format!("{prefix}.w_root"), uniform(&mut rng, &[d, d_in], d_in))?;
                    ps.add(format!("{prefix}.w_neigh"), uniform(&mut rng, &[d, d_in], d_in))?;
                    ps.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
                }
            }
        }
        SpatialEncoder::LinearLift => {
            add_linear(&mut ps, &mut rng, "lift", IN_FEATURES, d)?;
        }
    }

    if cfg.shared_alpha && cfg.uses_skip_params() {
        ps.add("skip.alpha", Tensor::scalar(cfg.alpha0))?;
    }
    for b in 0..cfg.n_blocks {
        for proj in ["w_q", "w_k", "w_v", "w_o"] {
            ps.add(format!("block.{b}.attn.{proj}"), uniform(&mut rng, &[d, d], d))?;
        }
        ps.add(format!("block.{b}.ffn.w1"), uniform(&mut rng, &[cfg.d_ff(), d], d))?;
        ps.add(format!("block.{b}.ffn.b1"), Tensor::zeros(&[cfg.d_ff()]))?;
        ps.add(format!("block.{b}.ffn.w2"), uniform(&mut rng, &[d, cfg.d_ff()], cfg.d_ff()))?;
        ps.add(format!("block.{b}.ffn.b2"), Tensor::zeros(&[d]))?;
        add_layernorm(&mut ps, &format!("block.{b}.ln1"), d)?;
        add_layernorm(&mut ps, &format!("block.{b}.ln2"), d)?;
        if cfg.uses_skip_params() {
            if !cfg.shared_alpha {
                ps.add(format!("block.{b}.skip.alpha"), Tensor::scalar(cfg.alpha0))?;
            }
            add_layernorm(&mut ps, &format!("block.{b}.skip.ln"), d)?;
        }
    }

    ps.add("head.temporal.weight", uniform(&mut rng, &[1, cfg.k], cfg.k))?;
    ps.add("head.temporal.bias", Tensor::zeros(&[1]))?;
    add_linear(&mut ps, &mut rng, "head.fc1", d, d)?;
    add_linear(&mut ps, &mut rng, "head.fc2", d, d)?;
    add_linear(&mut ps, &mut rng, "head.out", d, cfg.m)?;
    Ok(ps)
}

/// Scalar parameter count implied by a config; a closed-form companion to
/// [`init_params`] so tests can cross-check both.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let mut total = 0;
    total += match cfg.spatial {
        SpatialEncoder::Sage => {
            let per_stack: usize = (0..cfg.l_sage)
                .map(|l| {
                    let d_in = if l == 0 { IN_FEATURES } else { d };
                    2 * d * d_in + d
                })
                .sum();
            per_stack * if cfg.per_graph_sage { cfg.k } else { 1 }
        }
        SpatialEncoder::LinearLift => d * IN_FEATURES + d,
    };
    let d_ff = cfg.d_ff();
    let mut per_block = 4 * d * d + (d_ff * d + d_ff) + (d * d_ff + d) + 4 * d;
    if cfg.uses_skip_params() {
        per_block += 2 * d;
        if !cfg.shared_alpha {
            per_block += 1;
        }
    }
    total += per_block * cfg.n_blocks;
    if cfg.shared_alpha && cfg.uses_skip_params() {
        total += 1;
    }
    total += cfg.k + 1;
    total += 2 * (d * d + d);
    total += cfg.m * d + cfg.m;
    total
}

/// Names of the skip-mix scalars in block order (a single shared name when
/// `shared_alpha` is set).
pub fn alpha_param_names(cfg: &ModelConfig) -> Vec<String> {
    if !cfg.uses_skip_params() {
        return Vec::new();
    }
    if cfg.shared_alpha {
        vec!["skip.alpha".to_string()]
    } else {
        (0..cfg.n_blocks)
            .map(|b| format!("block.{b}.skip.alpha"))
            .collect()
    }
}

/// Current values of the skip-mix scalars.
pub fn alpha_values(params: &ParamSet, cfg: &ModelConfig) -> Vec<f64> {
    alpha_param_names(cfg)
        .iter()
        .filter_map(|name| params.id(name))
        .map(|id| params.value(id).data()[0])
        .collect()
}

/// Clamp every skip-mix scalar into `[0, 1]`; call after each optimizer step.
pub fn clamp_alphas(params: &mut ParamSet, cfg: &ModelConfig) {
    for name in alpha_param_names(cfg) {
        if let Some(id) = params.id(&name) {
            let v = params.value(id).data()[0];
            params.value_mut(id).data_mut()[0] = v.clamp(0.0, 1.0);
        }
    }
}

// ── Forward pass ─────────────────────────────────────────────────────

/// Normalized model input: one `n x 3` feature tensor per graph plus the
/// shared neighbor structure.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub features: Vec<Tensor>,
    pub adjacency: Adjacency,
    pub weighted_adjacency: Option<WeightedAdjacency>,
}

impl ModelInput {
    pub fn n_nodes(&self) -> usize {
        self.features.first().map_or(0, |f| f.shape()[0])
    }
}

/// One GraphSAGE layer: root transform plus aggregated neighbor transform.
pub fn sage_layer(
    tape: &mut Tape,
    h: ValueId,
    w_root: ValueId,
    w_neigh: ValueId,
    bias: Option<ValueId>,
    input: &ModelInput,
    aggregator: Aggregator,
) -> Result<ValueId> {
    let wr_t = tape.transpose(w_root)?;
    let root = tape.matmul(h, wr_t)?;
    let pooled = match aggregator {
        Aggregator::UnweightedMean => tape.segment_mean(h, input.adjacency.clone())?,
        Aggregator::WeightedMean => {
            let wadj = input.weighted_adjacency.clone().ok_or_else(|| {
                Error::Usage("weighted aggregation requested without edge weights".into())
            })?;
            tape.segment_weighted_mean(h, wadj)?
        }
    };
    let wn_t = tape.transpose(w_neigh)?;
    let neigh = tape.matmul(pooled, wn_t)?;
    let sum = tape.add(root, neigh)?;
    match bias {
        Some(b) => tape.add_bias(sum, b),
        None => Ok(sum),
    }
}

fn sage_stack(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    input: &ModelInput,
    graph_idx: usize,
    h0: ValueId,
) -> Result<ValueId> {
    let mut h = h0;
    for l in 0..cfg.l_sage {
        let prefix = if cfg.per_graph_sage {
            format!("sage.g{graph_idx}.{l}")
        } else {
            format!("sage.{l}")
        };
        let w_root = tape.named(params, &format!("{prefix}.w_root"))?;
        let w_neigh = tape.named(params, &format!("{prefix}.w_neigh"))?;
        let bias = tape.named(params, &format!("{prefix}.bias"))?;
        h = sage_layer(tape, h, w_root, w_neigh, Some(bias), input, cfg.aggregator)?;
        if l + 1 < cfg.l_sage {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Encode all `k` graphs and stack the per-graph embeddings. Returns the
/// embedding flattened to `[n*k, d]` with time fastest.
pub fn spatial_encode(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    input: &ModelInput,
) -> Result<ValueId> {
    if input.features.len() != cfg.k {
        return Err(Error::Shape {
            op: "spatial_encode",
            lhs: vec![input.features.len()],
            rhs: vec![cfg.k],
        });
    }
    let n = input.n_nodes();
    let mut per_graph = Vec::with_capacity(cfg.k);
    for (t, feat) in input.features.iter().enumerate() {
        let h0 = tape.leaf(feat.clone())?;
        let enc = match cfg.spatial {
            SpatialEncoder::Sage => sage_stack(tape, params, cfg, input, t, h0)?,
            SpatialEncoder::LinearLift => {
                let w = tape.named(params, "lift.weight")?;
                let b = tape.named(params, "lift.bias")?;
                let wt = tape.transpose(w)?;
                let lifted = tape.matmul(h0, wt)?;
                tape.add_bias(lifted, b)?
            }
        };
        per_graph.push(tape.reshape(enc, &[n, 1, cfg.d])?);
    }
    let stacked = tape.concat(&per_graph, 1)?;
    tape.reshape(stacked, &[n * cfg.k, cfg.d])
}

/// A temporal attention block's outputs: the transformed embedding and the
/// attention probabilities (`[n*heads, k, k]`) for inspection.
pub struct BlockOutput {
    pub out: ValueId,
    pub attention: ValueId,
}

/// One transformer encoder block attending over the time axis of each node
/// independently. `z` is `[n*k, d]`, time fastest.
pub fn temporal_block(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    block_idx: usize,
    n: usize,
    z: ValueId,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<BlockOutput> {
    let (d, k, heads) = (cfg.d, cfg.k, cfg.n_heads);
    let dk = d / heads;
    let prefix = format!("block.{block_idx}");

    let project = |tape: &mut Tape, name: &str| -> Result<ValueId> {
        let w = tape.named(params, &format!("{prefix}.attn.{name}"))?;
        let wt = tape.transpose(w)?;
        let p = tape.matmul(z, wt)?;
        // [n*k, d] -> [n, k, heads, dk] -> [n, heads, k, dk] -> [n*heads, k, dk]
        let p = tape.reshape(p, &[n, k, heads, dk])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[n * heads, k, dk])
    };
    let q = project(tape, "w_q")?;
    let key = project(tape, "w_k")?;
    let v = project(tape, "w_v")?;

    let key_t = tape.permute(key, &[0, 2, 1])?;
    let scores = tape.batched_matmul(q, key_t)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let attention = tape.softmax_lastdim(scaled)?;
    let ctx = tape.batched_matmul(attention, v)?;
    let ctx = tape.reshape(ctx, &[n, heads, k, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n * k, d])?;
    let w_o = tape.named(params, &format!("{prefix}.attn.w_o"))?;
    let w_o_t = tape.transpose(w_o)?;
    let mha = tape.matmul(ctx, w_o_t)?;

    let mha = tape.dropout(mha, cfg.dropout_p, train, rng)?;
    let sum1 = tape.add(z, mha)?;
    let g1 = tape.named(params, &format!("{prefix}.ln1.gain"))?;
    let b1 = tape.named(params, &format!("{prefix}.ln1.bias"))?;
    let a = tape.layernorm(sum1, g1, b1, LN_EPS)?;

    let w1 = tape.named(params, &format!("{prefix}.ffn.w1"))?;
    let w1_t = tape.transpose(w1)?;
    let f = tape.matmul(a, w1_t)?;
    let fb1 = tape.named(params, &format!("{prefix}.ffn.b1"))?;
    let f = tape.add_bias(f, fb1)?;
    let f = tape.relu(f)?;
    let w2 = tape.named(params, &format!("{prefix}.ffn.w2"))?;
    let w2_t = tape.transpose(w2)?;
    let f = tape.matmul(f, w2_t)?;
    let fb2 = tape.named(params, &format!("{prefix}.ffn.b2"))?;
    let f = tape.add_bias(f, fb2)?;
    let f = tape.dropout(f, cfg.dropout_p, train, rng)?;
    let sum2 = tape.add(a, f)?;
    let g2 = tape.named(params, &format!("{prefix}.ln2.gain"))?;
    let b2 = tape.named(params, &format!("{prefix}.ln2.bias"))?;
    let out = tape.layernorm(sum2, g2, b2, LN_EPS)?;

    Ok(BlockOutput { out, attention })
}

/// Long-range skip after block `block_idx`: mixes block output `y` back
/// toward the original spatial embedding `x` per the configured mode.
pub fn adaptive_lr_skip(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    block_idx: usize,
    y: ValueId,
    x: ValueId,
) -> Result<ValueId> {
    match cfg.skip {
        SkipMode::Off => Ok(y),
        SkipMode::LayerNormOnly => {
            let g = tape.named(params, &format!("block.{block_idx}.skip.ln.gain"))?;
            let b = tape.named(params, &format!("block.{block_idx}.skip.ln.bias"))?;
            tape.layernorm(y, g, b, LN_EPS)
        }
        SkipMode::Adaptive => {
            let alpha_name = if cfg.shared_alpha {
                "skip.alpha".to_string()
            } else {
                format!("block.{block_idx}.skip.alpha")
            };
            let alpha = tape.named(params, &alpha_name)?;
            let mixed = tape.convex_mix(alpha, x, y)?;
            let g = tape.named(params, &format!("block.{block_idx}.skip.ln.gain"))?;
            let b = tape.named(params, &format!("block.{block_idx}.skip.ln.bias"))?;
            tape.layernorm(mixed, g, b, LN_EPS)
        }
    }
}

/// Output head: collapse the time axis with a learned linear map, then three
/// linear layers with hardswish between them.
pub fn head(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    n: usize,
    z: ValueId,
) -> Result<ValueId> {
    let (d, k) = (cfg.d, cfg.k);
    let z3 = tape.reshape(z, &[n, k, d])?;
    let zp = tape.permute(z3, &[0, 2, 1])?;
    let zf = tape.reshape(zp, &[n * d, k])?;
    let tw = tape.named(params, "head.temporal.weight")?;
    let tw_t = tape.transpose(tw)?;
    let tb = tape.named(params, "head.temporal.bias")?;
    let collapsed = tape.matmul(zf, tw_t)?;
    let collapsed = tape.add_bias(collapsed, tb)?;
    let mut h = tape.reshape(collapsed, &[n, d])?;

    for fc in ["head.fc1", "head.fc2"] {
        let w = tape.named(params, &format!("{fc}.weight"))?;
        let wt = tape.transpose(w)?;
        let b = tape.named(params, &format!("{fc}.bias"))?;
        let lin = tape.matmul(h, wt)?;
        let lin = tape.add_bias(lin, b)?;
        h = tape.hardswish(lin)?;
    }
    let w = tape.named(params, "head.out.weight")?;
    let wt = tape.transpose(w)?;
    let b = tape.named(params, "head.out.bias")?;
    let out = tape.matmul(h, wt)?;
    tape.add_bias(out, b)
}

/// Full forward pass: `n x m` predictions for one input sequence.
pub fn forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    input: &ModelInput,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<ValueId> {
    let n = input.n_nodes();
    let x = spatial_encode(tape, params, cfg, input)?;
    let mut z = x;
    for b in 0..cfg.n_blocks {
        let block = temporal_block(tape, params, cfg, b, n, z, rng, train)?;
        z = adaptive_lr_skip(tape, params, cfg, b, block.out, x)?;
    }
    head(tape, params, cfg, n, z)
}
