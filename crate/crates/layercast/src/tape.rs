//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation; `backward` replays the tape in
//! reverse topological order (which is tape order) and accumulates gradients
//! into the [`ParamSet`] that was bound during the forward pass. One tape is
//! one training context: it is single-threaded and is cleared by `backward`.
//!
//! Dense matrix products go through `matrixmultiply::dgemm`; everything else
//! is written out directly so each backward rule is visible next to its
//! forward rule.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{strides_of, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Neighbor lists for mean aggregation, shared across tape nodes.
pub type Adjacency = Arc<Vec<Vec<usize>>>;

/// Per-node normalized (weight, neighbor) lists for weighted aggregation.
/// Weights are expected to sum to 1 within each list.
pub type WeightedAdjacency = Arc<Vec<Vec<(usize, f64)>>>;

enum Op {
    Leaf,
    Param(ParamId),
    Matmul { a: ValueId, b: ValueId },
    BatchedMatmul { a: ValueId, b: ValueId },
    Permute { x: ValueId, perm: Vec<usize> },
    Reshape { x: ValueId },
    Add { a: ValueId, b: ValueId },
    AddBias { x: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    Mul { a: ValueId, b: ValueId },
    ConvexMix { alpha: ValueId, x: ValueId, y: ValueId },
    Relu { x: ValueId },
    Hardswish { x: ValueId },
    SoftmaxLastDim { x: ValueId },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, stats: Vec<(f64, f64)> },
    Dropout { x: ValueId, mask: Option<Vec<f64>> },
    SegmentMean { x: ValueId, adj: Adjacency },
    SegmentWeightedMean { x: ValueId, adj: WeightedAdjacency },
    Concat { inputs: Vec<ValueId>, axis: usize },
    SumAll { x: ValueId },
    Mse { pred: ValueId, target: ValueId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, ValueId>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_usable(&self) -> Result<()> {
        if self.spent {
            Err(Error::Usage(
                "tape already consumed by backward; start a new forward pass".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record a constant input (no gradient is tracked past it).
    pub fn leaf(&mut self, value: Tensor) -> Result<ValueId> {
        self.check_usable()?;
        Ok(self.push(Op::Leaf, value))
    }

    /// Bind a parameter's current value. Binding the same parameter twice
    /// returns the same node, so its gradient accumulates in one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<ValueId> {
        self.check_usable()?;
        if let Some(&vid) = self.param_cache.get(&id) {
            return Ok(vid);
        }
        let vid = self.push(Op::Param(id), params.value(id).clone());
        self.param_cache.insert(id, vid);
        Ok(vid)
    }

    /// Convenience: bind a parameter by name.
    pub fn named(&mut self, params: &ParamSet, name: &str) -> Result<ValueId> {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))?;
        self.param(params, id)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`. Intended for small per-batch matrices.
    pub fn batched_matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape { op: "batched_matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ab[i * k + p];
                    let brow = &bb[p * n..(p + 1) * n];
                    let orow = &mut ob[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(Op::BatchedMatmul { a, b }, value))
    }

    /// Reorder axes; `perm` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        self.check_usable()?;
        let shape = self.shape(x).to_vec();
        if !is_permutation(perm, shape.len()) {
            return Err(Error::Shape { op: "permute", lhs: shape, rhs: perm.to_vec() });
        }
        let (data, new_shape) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(new_shape, data)?;
        Ok(self.push(Op::Permute { x, perm: perm.to_vec() }, value))
    }

    /// 2-D transpose, as `permute([1,0])`.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        self.permute(x, &[1, 0])
    }

    /// Same element count, new extents.
    pub fn reshape(&mut self, x: ValueId, new_shape: &[usize]) -> Result<ValueId> {
        self.check_usable()?;
        let old = self.shape(x).to_vec();
        if new_shape.iter().product::<usize>() != old.iter().product::<usize>() {
            return Err(Error::Shape { op: "reshape", lhs: old, rhs: new_shape.to_vec() });
        }
        let value = Tensor::new(new_shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op: "add", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Broadcast a `[d]` vector over the last axis of `x`.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d || d == 0 {
            return Err(Error::Shape { op: "add_bias", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(Op::AddBias { x, b }, value))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_usable()?;
        let data: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::Scale { x, c }, value))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op: "mul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// `alpha*x + (1-alpha)*y` with a scalar `alpha` that receives gradient.
    pub fn convex_mix(&mut self, alpha: ValueId, x: ValueId, y: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        if self.value(alpha).len() != 1 {
            return Err(Error::Shape {
                op: "convex_mix(alpha)",
                lhs: self.shape(alpha).to_vec(),
                rhs: vec![1],
            });
        }
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx != sy {
            return Err(Error::Shape { op: "convex_mix", lhs: sx.to_vec(), rhs: sy.to_vec() });
        }
        let a = self.value(alpha).data()[0];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(xv, yv)| a * xv + (1.0 - a) * yv)
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(Op::ConvexMix { alpha, x, y }, value))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::Relu { x }, value))
    }

    /// `h(x) = x * clamp(x+3, 0, 6) / 6`, with `h'(-3)=0` and `h'(3)=1`.
    pub fn hardswish(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::Hardswish { x }, value))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Shape { op: "softmax_lastdim", lhs: shape, rhs: vec![1] });
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::SoftmaxLastDim { x }, value))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    /// Uses the population variance of each slice; `eps` guards division.
    pub fn layernorm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        self.check_usable()?;
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        if d == 0 || sg != [d] || sb != [d] {
            return Err(Error::Shape { op: "layernorm", lhs: shape, rhs: sg.to_vec() });
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        let mut stats = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for (v, (gv, bv)) in row.iter_mut().zip(g.iter().zip(&b)) {
                *v = (*v - mean) * inv_std * gv + bv;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, stats }, value))
    }

    /// Inverted dropout: at train time kept entries are scaled by `1/(1-p)`,
    /// so evaluation is the identity.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ValueId> {
        self.check_usable()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        if !train || p == 0.0 {
            let value = self.value(x).clone();
            return Ok(self.push(Op::Dropout { x, mask: None }, value));
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask: Some(mask) }, value))
    }

    // ── Graph aggregation ────────────────────────────────────────────

    /// Row `i` of the output is the mean of rows `j` in `adj[i]`.
    /// An empty neighbor list yields a zero row and logs a structural warning.
    pub fn segment_mean(&mut self, x: ValueId, adj: Adjacency) -> Result<ValueId> {
        self.check_usable()?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != adj.len() {
            return Err(Error::Shape { op: "segment_mean", lhs: shape, rhs: vec![adj.len()] });
        }
        let (n, d) = (shape[0], shape[1]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for (i, neigh) in adj.iter().enumerate() {
            if neigh.is_empty() {
                log::warn!("segment_mean: node {i} has no neighbors; emitting zero row");
                continue;
            }
            let row = &mut out[i * d..(i + 1) * d];
            for &j in neigh {
                let src = &xs[j * d..(j + 1) * d];
                for (o, v) in row.iter_mut().zip(src) {
                    *o += v;
                }
            }
            let inv = 1.0 / neigh.len() as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SegmentMean { x, adj }, value))
    }

    /// Weighted neighbor mean; weights in `adj` must already sum to 1 per row.
    pub fn segment_weighted_mean(&mut self, x: ValueId, adj: WeightedAdjacency) -> Result<ValueId> {
        self.check_usable()?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != adj.len() {
            return Err(Error::Shape {
                op: "segment_weighted_mean",
                lhs: shape,
                rhs: vec![adj.len()],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for (i, neigh) in adj.iter().enumerate() {
            if neigh.is_empty() {
                log::warn!("segment_weighted_mean: node {i} has no neighbors; emitting zero row");
                continue;
            }
            let row = &mut out[i * d..(i + 1) * d];
            for &(j, w) in neigh {
                let src = &xs[j * d..(j + 1) * d];
                for (o, v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SegmentWeightedMean { x, adj }, value))
    }

    // ── Shape combinators ────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        self.check_usable()?;
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape { op: "concat", lhs: base, rhs: vec![axis] });
        }
        let mut total_axis = 0;
        for &id in inputs {
            let s = self.shape(id);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Shape { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total_axis += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &id in inputs {
            let s_axis = self.shape(id)[axis];
            let src = self.value(id).data();
            for o in 0..outer {
                let dst_start = (o * total_axis + offset) * inner;
                let src_start = o * s_axis * inner;
                data[dst_start..dst_start + s_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + s_axis * inner]);
            }
            offset += s_axis;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Op::SumAll { x }, Tensor::scalar(s)))
    }

    /// Mean squared error over every element of `pred` vs `target`.
    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        self.check_usable()?;
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::Shape { op: "mse", lhs: sp.to_vec(), rhs: st.to_vec() });
        }
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Op::Mse { pred, target }, Tensor::scalar(s / n)))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every
    /// parameter reachable from the loss (others stay zero), then clears
    /// the tape. Calling this twice on one tape is a usage error.
    pub fn backward(&mut self, loss: ValueId, params: &mut ParamSet) -> Result<()> {
        self.check_usable()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        params.zero_grads();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g),
                Op::Matmul { a, b } => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    {
                        let bd = self.nodes[b.0].value.data();
                        let ga = ensure(&mut grads, a.0, m * k);
                        mm_nt(&g, bd, m, n, k, ga);
                    }
                    {
                        let ad = self.nodes[a.0].value.data();
                        let gb = ensure(&mut grads, b.0, k * n);
                        mm_tn(ad, &g, m, k, n, gb);
                    }
                }
                Op::BatchedMatmul { a, b } => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    {
                        let bd = self.nodes[b.0].value.data();
                        let ga = ensure(&mut grads, a.0, bs * m * k);
                        for bi in 0..bs {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bd[bi * k * n..(bi + 1) * k * n];
                            let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                            for i2 in 0..m {
                                for p in 0..k {
                                    let mut acc = 0.0;
                                    let gcrow = &gc[i2 * n..(i2 + 1) * n];
                                    let brow = &bb[p * n..(p + 1) * n];
                                    for (gv, bv) in gcrow.iter().zip(brow) {
                                        acc += gv * bv;
                                    }
                                    gab[i2 * k + p] += acc;
                                }
                            }
                        }
                    }
                    {
                        let ad = self.nodes[a.0].value.data();
                        let gb = ensure(&mut grads, b.0, bs * k * n);
                        for bi in 0..bs {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let ab = &ad[bi * m * k..(bi + 1) * m * k];
                            let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                            for i2 in 0..m {
                                let gcrow = &gc[i2 * n..(i2 + 1) * n];
                                for p in 0..k {
                                    let av = ab[i2 * k + p];
                                    let grow = &mut gbb[p * n..(p + 1) * n];
                                    for (gv, gcv) in grow.iter_mut().zip(gcrow) {
                                        *gv += av * gcv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Permute { x, perm } => {
                    let out_shape = self.shape(ValueId(i)).to_vec();
                    let inv = invert_permutation(perm);
                    let (gx, _) = permute_data(&g, &out_shape, &inv);
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Reshape { x } => accumulate(&mut grads, x.0, &g),
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddBias { x, b } => {
                    let d = self.shape(*b)[0];
                    accumulate(&mut grads, x.0, &g);
                    let gb = ensure(&mut grads, b.0, d);
                    for row in g.chunks(d) {
                        for (gv, rv) in gb.iter_mut().zip(row) {
                            *gv += rv;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let gx: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Mul { a, b } => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut grads, a.0, &ga);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::ConvexMix { alpha, x, y } => {
                    let a_val = self.nodes[alpha.0].value.data()[0];
                    let xd = self.nodes[x.0].value.data();
                    let yd = self.nodes[y.0].value.data();
                    let mut galpha = 0.0;
                    let mut gx = vec![0.0; xd.len()];
                    let mut gy = vec![0.0; yd.len()];
                    for (((gv, xv), yv), (gxe, gye)) in g
                        .iter()
                        .zip(xd)
                        .zip(yd)
                        .zip(gx.iter_mut().zip(gy.iter_mut()))
                    {
                        galpha += gv * (xv - yv);
                        *gxe = a_val * gv;
                        *gye = (1.0 - a_val) * gv;
                    }
                    accumulate(&mut grads, x.0, &gx);
                    accumulate(&mut grads, y.0, &gy);
                    accumulate(&mut grads, alpha.0, &[galpha]);
                }
                Op::Relu { x } => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Hardswish { x } => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(gv, &xv)| {
                            let slope = if xv <= -3.0 {
                                0.0
                            } else if xv >= 3.0 {
                                1.0
                            } else {
                                (2.0 * xv + 3.0) / 6.0
                            };
                            gv * slope
                        })
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::SoftmaxLastDim { x } => {
                    let y = self.nodes[i].value.data();
                    let d = *self.shape(ValueId(i)).last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for ((yrow, grow), gxrow) in
                        y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for ((gv, yv), gxv) in grow.iter().zip(yrow).zip(gxrow.iter_mut()) {
                            *gxv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let d = self.shape(*gain)[0];
                    let xd = self.nodes[x.0].value.data();
                    let gd = self.nodes[gain.0].value.data();
                    let mut gx = vec![0.0; xd.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for (((xrow, grow), gxrow), (mean, inv_std)) in xd
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(stats)
                    {
                        let df = d as f64;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i2 in 0..d {
                            let xhat = (xrow[i2] - mean) * inv_std;
                            let dxhat = grow[i2] * gd[i2];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            ggain[i2] += grow[i2] * xhat;
                            gbias[i2] += grow[i2];
                        }
                        for i2 in 0..d {
                            let xhat = (xrow[i2] - mean) * inv_std;
                            let dxhat = grow[i2] * gd[i2];
                            gxrow[i2] = inv_std / df
                                * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                    accumulate(&mut grads, gain.0, &ggain);
                    accumulate(&mut grads, bias.0, &gbias);
                }
                Op::Dropout { x, mask } => match mask {
                    None => accumulate(&mut grads, x.0, &g),
                    Some(mask) => {
                        let gx: Vec<f64> =
                            g.iter().zip(mask).map(|(gv, mv)| gv * mv).collect();
                        accumulate(&mut grads, x.0, &gx);
                    }
                },
                Op::SegmentMean { x, adj } => {
                    let d = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for (i2, neigh) in adj.iter().enumerate() {
                        if neigh.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / neigh.len() as f64;
                        let grow = &g[i2 * d..(i2 + 1) * d];
                        for &j in neigh {
                            let dst = &mut gx[j * d..(j + 1) * d];
                            for (dv, gv) in dst.iter_mut().zip(grow) {
                                *dv += gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::SegmentWeightedMean { x, adj } => {
                    let d = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for (i2, neigh) in adj.iter().enumerate() {
                        let grow = &g[i2 * d..(i2 + 1) * d];
                        for &(j, w) in neigh {
                            let dst = &mut gx[j * d..(j + 1) * d];
                            for (dv, gv) in dst.iter_mut().zip(grow) {
                                *dv += gv * w;
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Concat { inputs, axis } => {
                    let inputs = inputs.clone();
                    let axis = *axis;
                    let out_shape = self.shape(ValueId(i)).to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total_axis = out_shape[axis];
                    let mut offset = 0;
                    for id in inputs {
                        let s_axis = self.shape(id)[axis];
                        let mut gpart = vec![0.0; outer * s_axis * inner];
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst_start = o * s_axis * inner;
                            gpart[dst_start..dst_start + s_axis * inner]
                                .copy_from_slice(&g[src_start..src_start + s_axis * inner]);
                        }
                        accumulate(&mut grads, id.0, &gpart);
                        offset += s_axis;
                    }
                }
                Op::SumAll { x } => {
                    let gx = vec![g[0]; self.nodes[x.0].value.len()];
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Mse { pred, target } => {
                    let pd = self.nodes[pred.0].value.data();
                    let td = self.nodes[target.0].value.data();
                    let scale = 2.0 * g[0] / pd.len() as f64;
                    let gp: Vec<f64> = pd
                        .iter()
                        .zip(td)
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, pred.0, &gp);
                    accumulate(&mut grads, target.0, &gt);
                }
            }
        }

        self.nodes.clear();
        self.param_cache.clear();
        self.spent = true;
        Ok(())
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    let g = grads[idx].get_or_insert_with(|| vec![0.0; contribution.len()]);
    for (gv, cv) in g.iter_mut().zip(contribution) {
        *gv += cv;
    }
}

fn is_permutation(perm: &[usize], ndim: usize) -> bool {
    if perm.len() != ndim {
        return false;
    }
    let mut seen = vec![false; ndim];
    for &p in perm {
        if p >= ndim || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Rearrange `data` (row-major, `shape`) so axis `d` of the output is axis
/// `perm[d]` of the input. Returns the moved data and the new shape.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ndim = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if ndim <= 1 {
        return (data.to_vec(), new_shape);
    }
    let in_strides = strides_of(shape);
    // stride in the input for a unit step along output axis d
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; ndim];
    let mut in_flat = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_flat];
        // odometer increment over the output index space
        for d in (0..ndim).rev() {
            idx[d] += 1;
            in_flat += step[d];
            if idx[d] < new_shape[d] {
                break;
            }
            in_flat -= step[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

// ── Dense kernels ────────────────────────────────────────────────────

/// C = A·B + beta·C with A:[m,k], B:[k,n], all row-major.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C += A·Bᵀ with A:[m,n], B:[k,n] row-major, C:[m,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// C += Aᵀ·B with A:[m,k], B:[m,n] row-major, C:[k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
