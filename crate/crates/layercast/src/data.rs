//! Radargram records: file format, validation, preprocessing and the
//! deterministic synthetic corpus generator.
//!
//! A record stores per-column geocoordinates plus the traced boundary row of
//! each internal layer, top to bottom. Boundaries may have gaps (`null` in
//! the JSON Lines file); layer thickness is the difference between adjacent
//! boundaries and inherits a gap from either side.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One traced radargram: flight-path coordinates and layer boundary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadargramRecord {
    pub id: String,
    pub width: usize,
    /// Latitude in degrees, one per column.
    pub lat: Vec<f64>,
    /// Longitude in degrees, one per column.
    pub lon: Vec<f64>,
    /// Boundary row positions in pixels, top to bottom; `None` marks a gap.
    pub boundaries: Vec<Vec<Option<f64>>>,
}

impl RadargramRecord {
    /// Check every documented invariant, naming the offending record/column.
    pub fn validate(&self) -> Result<()> {
        let w = self.width;
        if self.lat.len() != w || self.lon.len() != w {
            return Err(Error::Validation(format!(
                "record {}: lat/lon length {}/{} != width {}",
                self.id,
                self.lat.len(),
                self.lon.len(),
                w
            )));
        }
        for (c, (&la, &lo)) in self.lat.iter().zip(&self.lon).enumerate() {
            if !(-90.0..=90.0).contains(&la) || !(-180.0..=180.0).contains(&lo) {
                return Err(Error::Validation(format!(
                    "record {}: coordinate out of range at column {c}: ({la}, {lo})",
                    self.id
                )));
            }
        }
        for (li, layer) in self.boundaries.iter().enumerate() {
            if layer.len() != w {
                return Err(Error::Validation(format!(
                    "record {}: boundary {li} has {} entries, expected {w}",
                    self.id,
                    layer.len()
                )));
            }
        }
        for c in 0..w {
            let mut prev: Option<f64> = None;
            for (li, layer) in self.boundaries.iter().enumerate() {
                if let Some(v) = layer[c] {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "record {}: non-finite boundary {li} at column {c}",
                            self.id
                        )));
                    }
                    if let Some(p) = prev {
                        if v <= p {
                            return Err(Error::Validation(format!(
                                "record {}: boundaries not increasing at column {c} \
                                 (boundary {li}: {v} <= {p})",
                                self.id
                            )));
                        }
                    }
                    prev = Some(v);
                }
            }
        }
        Ok(())
    }
}

/// Per-layer thickness derived from adjacent boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThicknessRecord {
    pub id: String,
    pub width: usize,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    /// `layers[i][c]` is boundary `i+1` minus boundary `i` at column `c`.
    pub layers: Vec<Vec<Option<f64>>>,
}

impl ThicknessRecord {
    /// True when the top `min_layers` thickness layers have no gap anywhere.
    pub fn is_complete(&self, min_layers: usize) -> bool {
        self.layers.len() >= min_layers
            && self.layers[..min_layers]
                .iter()
                .all(|layer| layer.iter().all(Option::is_some))
    }
}

/// Thickness is the boundary-to-boundary pixel distance; a gap in either
/// bounding boundary makes the thickness a gap too.
pub fn to_thickness(rec: &RadargramRecord) -> Result<ThicknessRecord> {
    if rec.boundaries.len() < 2 {
        return Err(Error::Validation(format!(
            "record {}: need at least 2 boundaries to form a layer, got {}",
            rec.id,
            rec.boundaries.len()
        )));
    }
    let layers = rec
        .boundaries
        .windows(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(top, bot)| match (top, bot) {
                    (Some(t), Some(b)) => Some(b - t),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(ThicknessRecord {
        id: rec.id.clone(),
        width: rec.width,
        lat: rec.lat.clone(),
        lon: rec.lon.clone(),
        layers,
    })
}

/// Keep only records whose top `min_layers` layers are complete.
pub fn filter_complete(recs: Vec<ThicknessRecord>, min_layers: usize) -> Vec<ThicknessRecord> {
    recs.into_iter()
        .filter(|r| r.is_complete(min_layers))
        .collect()
}

/// Train/validation/test id lists in a 3:1:1 ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Deterministic permutation from `seed`, then a contiguous 3:1:1 partition.
pub fn split(recs: &[ThicknessRecord], seed: u64) -> Result<DatasetSplit> {
    if recs.len() < 5 {
        return Err(Error::Validation(format!(
            "need at least 5 records to split 3:1:1, got {}",
            recs.len()
        )));
    }
    let mut ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_train = ((n as f64) * 0.6).round() as usize;
    let n_val = ((n as f64) * 0.2).round() as usize;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit { train: ids, val, test, seed })
}

// ── JSON Lines I/O ───────────────────────────────────────────────────

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RadargramRecord>> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RadargramRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records(path: impl AsRef<Path>, recs: &[RadargramRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for rec in recs {
        let line = serde_json::to_string(rec).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

// ── Synthetic corpus ─────────────────────────────────────────────────

pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_BOUNDARIES: usize = 21;

pub(crate) fn child_seed(master: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over a tagged master seed
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Harmonic {
    cycles: f64,
    phase: f64,
    amp: f64,
    /// phase advance per layer: the along-depth dynamics the model must learn
    drift: f64,
    /// amplitude modulation per layer
    depth_gain: f64,
}

/// Deterministic synthetic radargrams with Greenland-plausible coordinates.
///
/// Per record, layer thickness fields share a small set of low-frequency
/// harmonics whose phase and amplitude drift smoothly with depth, so deeper
/// layers are a learnable function of the shallow ones. Boundaries are
/// cumulative sums from a top offset. Every record passes
/// `filter_complete(DEFAULT_BOUNDARIES - 1)` by construction.
pub fn synth_generate(
    count: usize,
    seed: u64,
    width: usize,
    n_boundaries: usize,
) -> Vec<RadargramRecord> {
    assert!(count >= 1, "count must be >= 1");
    assert!(width >= 2 && n_boundaries >= 2);
    (0..count)
        .map(|idx| synth_one(idx, child_seed(seed, idx as u64), width, n_boundaries))
        .collect()
}

fn synth_one(idx: usize, seed: u64, width: usize, n_boundaries: usize) -> RadargramRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = width;
    let n_layers = n_boundaries - 1;

    // Flight path: linear ramp plus smooth low-amplitude wiggle.
    let lat0 = rng.gen_range(66.0..79.0);
    let lat_slope = rng.gen_range(-0.05..0.05);
    let lon0 = rng.gen_range(-59.0..-31.0);
    let lon_slope = rng.gen_range(-0.08..0.08);
    let path_wiggle = |rng: &mut ChaCha8Rng| {
        let cycles = rng.gen_range(1.0..3.0);
        let phase = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.001..0.004);
        move |t: f64| amp * (TAU * cycles * t + phase).sin()
    };
    let wig_lat = path_wiggle(&mut rng);
    let wig_lon = path_wiggle(&mut rng);
    let lat: Vec<f64> = (0..w)
        .map(|c| {
            let t = c as f64 / w as f64;
            lat0 + lat_slope * t + wig_lat(t)
        })
        .collect();
    let lon: Vec<f64> = (0..w)
        .map(|c| {
            let t = c as f64 / w as f64;
            lon0 + lon_slope * t + wig_lon(t)
        })
        .collect();

    // Depth profile of the per-layer base thickness: smooth in the layer
    // index so deep bases follow from shallow ones.
    let base0 = rng.gen_range(10.0..18.0);
    let base_slope = rng.gen_range(-4.0..4.0);
    let base_amp = rng.gen_range(1.0..4.0);
    let base_phase = rng.gen_range(0.0..TAU);
    let base = |l: usize| {
        let t = l as f64 / n_layers as f64;
        base0 + base_slope * t + base_amp * (std::f64::consts::PI * t + base_phase).sin()
    };
    let min_base = (0..n_layers).map(base).fold(f64::INFINITY, f64::min);

    // Shared harmonics across layers, drifting with depth.
    let n_harm = rng.gen_range(2..=4usize);
    let mut harmonics: Vec<Harmonic> = (0..n_harm)
        .map(|_| Harmonic {
            cycles: rng.gen_range(0.5..4.0),
            phase: rng.gen_range(0.0..TAU),
            amp: rng.gen_range(0.4..1.0),
            drift: rng.gen_range(-0.35..0.35),
            depth_gain: rng.gen_range(-0.015..0.03),
        })
        .collect();
    // Bound the total amplitude so thickness stays well above zero at any
    // depth, leaving headroom for measurement noise.
    let budget = 0.35 * (min_base - 2.0);
    let max_gain: f64 = harmonics
        .iter()
        .map(|h| (1.0 + h.depth_gain * n_layers as f64).max(1.0) * h.amp)
        .sum();
    let scale = budget / max_gain;
    for h in &mut harmonics {
        h.amp *= scale;
    }

    let noise_sd = rng.gen_range(0.05..0.15);
    let mut thickness = vec![vec![0.0f64; w]; n_layers];
    for (l, row) in thickness.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let t = c as f64 / w as f64;
            let mut x = base(l);
            for h in &harmonics {
                let gain = (1.0 + h.depth_gain * l as f64).max(0.2);
                x += h.amp * gain * (TAU * h.cycles * t + h.phase + h.drift * l as f64).sin();
            }
            // Box-Muller gaussian noise
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos();
            *v = (x + noise_sd * z).max(0.5);
        }
    }

    let top0 = rng.gen_range(15.0..60.0);
    let top_cycles = rng.gen_range(0.5..2.0);
    let top_phase = rng.gen_range(0.0..TAU);
    let top_amp = rng.gen_range(0.0..2.0);
    let mut boundaries = vec![vec![None; w]; n_boundaries];
    for c in 0..w {
        let t = c as f64 / w as f64;
        let mut b = top0 + top_amp * (TAU * top_cycles * t + top_phase).sin();
        boundaries[0][c] = Some(b);
        for (l, row) in thickness.iter().enumerate() {
            b += row[c];
            boundaries[l + 1][c] = Some(b);
        }
    }

    let rec = RadargramRecord {
        id: format!("synth-{idx:04}"),
        width: w,
        lat,
        lon,
        boundaries,
    };
    debug_assert!(rec.validate().is_ok());
    rec
}
