//! Partitioned spatial graphs from thickness records.
//!
//! Columns of a record are spatially ordered nodes. Edges are the union of
//! complete subgraphs over overlapping fixed-size sliding windows, so every
//! connection stays local; a final tail-anchored window guarantees coverage
//! of the last nodes. Edge weights come from the great-circle closeness of
//! the node coordinates.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::data::ThicknessRecord;
use crate::error::{Error, Result};
use crate::tape::{Adjacency, WeightedAdjacency};
use crate::tensor::Tensor;

/// Sliding-window partition: window size and stride.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub window: usize,
    pub stride: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { window: 5, stride: 3 }
    }
}

impl PartitionSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let spec = PartitionSpec { window, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window size must be >= 2, got {}",
                self.window
            )));
        }
        if self.stride == 0 || self.stride >= self.window {
            return Err(Error::Config(format!(
                "stride must satisfy 1 <= stride < window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }

    /// One window spanning all `n` nodes: the fully connected fallback.
    pub fn fully_connected(n: usize) -> Self {
        PartitionSpec { window: n, stride: (n - 1).max(1) }
    }
}

/// Window start indices: multiples of the stride while a full window fits,
/// plus a tail window anchored at `n - window` when the last node would
/// otherwise be uncovered.
pub fn window_starts(n: usize, spec: &PartitionSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let (w, s) = (spec.window, spec.stride);
    if n < w {
        return Err(Error::Validation(format!(
            "cannot window {n} nodes with window size {w}"
        )));
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * s).take_while(|st| st + w <= n).collect();
    let last_covered = starts.last().map_or(0, |st| st + w - 1);
    if last_covered < n - 1 {
        starts.push(n - w);
    }
    Ok(starts)
}

/// Undirected edges as the union of all within-window pairs, deduplicated
/// and sorted; pairs are stored with `i < j`.
pub fn build_partitioned_edges(n: usize, spec: &PartitionSpec) -> Result<Vec<(usize, usize)>> {
    let starts = window_starts(n, spec)?;
    let w = spec.window;
    let mut edges = Vec::new();
    for st in starts {
        for i in st..st + w {
            for j in i + 1..st + w {
                edges.push((i, j));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Haversine-style closeness weight between two coordinates in degrees.
///
/// `w = 1 / (2 asin(h))` where `h = hav(dphi) + cos(phi_i) cos(phi_j)
/// hav(dlambda)` and `hav(t) = sin^2(t/2)`. With `standard_haversine` the
/// square root of `h` is taken before the arcsine, which recovers the
/// classical central-angle formula (still without an Earth-radius factor).
/// The arcsine argument is clamped to `[1e-12, 1]`, so coincident points
/// yield the maximum finite weight instead of a division by zero.
pub fn edge_weight(
    lat_i: f64,
    lon_i: f64,
    lat_j: f64,
    lon_j: f64,
    standard_haversine: bool,
) -> f64 {
    let phi_i = lat_i.to_radians();
    let phi_j = lat_j.to_radians();
    let dphi = phi_j - phi_i;
    let dlambda = (lon_j - lon_i).to_radians();
    let hav = |t: f64| (t / 2.0).sin().powi(2);
    let mut h = hav(dphi) + phi_i.cos() * phi_j.cos() * hav(dlambda);
    if standard_haversine {
        h = h.sqrt();
    }
    let h = h.clamp(1e-12, 1.0);
    1.0 / (2.0 * h.asin())
}

/// One spatial graph: per-node raw features (latitude degrees, longitude
/// degrees, thickness pixels), shared window edges and positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedGraph {
    pub n_nodes: usize,
    /// `n x 3` rows of (lat, lon, thickness).
    pub node_features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f64>,
}

/// Temporal sequence of spatial graphs plus deep-layer targets.
///
/// Graph `t` carries the thickness of shallow layer `t`; all graphs share
/// the node set, edges and weights. `targets` is `n x m`, column `j`
/// holding the thickness of deep layer `j` (layer `l + j` of the record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalGraphSequence {
    pub id: String,
    pub graphs: Vec<PartitionedGraph>,
    pub targets: Tensor,
}

impl TemporalGraphSequence {
    pub fn n_nodes(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.n_nodes)
    }

    pub fn k(&self) -> usize {
        self.graphs.len()
    }

    pub fn m(&self) -> usize {
        self.targets.shape()[1]
    }
}

/// Build the k-graph sequence for the top `l` layers and `m` deep targets.
pub fn build_sequence(
    rec: &ThicknessRecord,
    l: usize,
    m: usize,
    spec: &PartitionSpec,
    standard_haversine: bool,
) -> Result<TemporalGraphSequence> {
    if l == 0 || m == 0 {
        return Err(Error::Config(format!(
            "need l >= 1 and m >= 1, got l={l} m={m}"
        )));
    }
    if !rec.is_complete(l + m) {
        return Err(Error::Validation(format!(
            "record {}: needs {} complete layers for l={l}, m={m}, has {} (or gaps)",
            rec.id,
            l + m,
            rec.layers.len()
        )));
    }
    let n = rec.width;
    let edges = build_partitioned_edges(n, spec)?;
    let edge_weights: Vec<f64> = edges
        .iter()
        .map(|&(i, j)| {
            edge_weight(rec.lat[i], rec.lon[i], rec.lat[j], rec.lon[j], standard_haversine)
        })
        .collect();

    let graphs = (0..l)
        .map(|t| {
            let mut feat = Vec::with_capacity(n * 3);
            for c in 0..n {
                feat.push(rec.lat[c]);
                feat.push(rec.lon[c]);
                feat.push(rec.layers[t][c].expect("completeness checked above"));
            }
            Ok(PartitionedGraph {
                n_nodes: n,
                node_features: Tensor::new(vec![n, 3], feat)?,
                edges: edges.clone(),
                edge_weights: edge_weights.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tgt = Vec::with_capacity(n * m);
    for c in 0..n {
        for j in 0..m {
            tgt.push(rec.layers[l + j][c].expect("completeness checked above"));
        }
    }
    Ok(TemporalGraphSequence {
        id: rec.id.clone(),
        graphs,
        targets: Tensor::new(vec![n, m], tgt)?,
    })
}

/// Sorted neighbor lists from an undirected edge list.
pub fn neighbor_lists(n: usize, edges: &[(usize, usize)]) -> Adjacency {
    let mut lists = vec![Vec::new(); n];
    for &(i, j) in edges {
        lists[i].push(j);
        lists[j].push(i);
    }
    for l in &mut lists {
        l.sort_unstable();
    }
    Arc::new(lists)
}

/// Neighbor lists with weights normalized to sum to 1 per neighborhood.
pub fn weighted_neighbor_lists(
    n: usize,
    edges: &[(usize, usize)],
    weights: &[f64],
) -> WeightedAdjacency {
    let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(i, j), &w) in edges.iter().zip(weights) {
        lists[i].push((j, w));
        lists[j].push((i, w));
    }
    for l in &mut lists {
        l.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let total: f64 = l.iter().map(|(_, w)| w).sum();
        if total > 0.0 {
            for (_, w) in l.iter_mut() {
                *w /= total;
            }
        }
    }
    Arc::new(lists)
}

/// Cache file layout for one record's prebuilt graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphCacheEntry {
    pub id: String,
    pub starts: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    /// `k` rows of per-node thickness features (lat/lon live in `coords`).
    pub features_by_layer: Vec<Vec<f64>>,
    pub coords: Vec<(f64, f64)>,
    pub targets: Vec<Vec<f64>>,
}

impl GraphCacheEntry {
    pub fn from_sequence(seq: &TemporalGraphSequence, starts: Vec<usize>) -> Self {
        let n = seq.n_nodes();
        let m = seq.m();
        let coords = (0..n)
            .map(|c| {
                let f = &seq.graphs[0].node_features;
                (f.at2(c, 0), f.at2(c, 1))
            })
            .collect();
        GraphCacheEntry {
            id: seq.id.clone(),
            starts,
            edges: seq.graphs[0].edges.clone(),
            weights: seq.graphs[0].edge_weights.clone(),
            features_by_layer: seq
                .graphs
                .iter()
                .map(|g| (0..n).map(|c| g.node_features.at2(c, 2)).collect())
                .collect(),
            coords,
            targets: (0..n)
                .map(|c| (0..m).map(|j| seq.targets.at2(c, j)).collect())
                .collect(),
        }
    }
}
