//! Per-pair summary statistics of pre-rotation queries and keys.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::rope::{RopeConfig, RotaryPair};

/// Pair norms below this are left out of angular statistics.
pub const DEFAULT_ANGLE_FLOOR: f64 = 1e-6;

/// Below this mean resultant length the sample is treated as fully
/// dispersed; `sqrt(-2 ln R)` is only ~7.4 at 1e-12 and float cancellation
/// of a balanced sample lands around there.
const RESULTANT_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Key,
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Side::Query),
            "key" | "k" => Ok(Side::Key),
            _ => Err(Error::Config(format!("unknown side '{s}' (query|key)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    MaxAbs,
    MeanAbs,
}

impl std::str::FromStr for Reducer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "max_abs" | "max" => Ok(Reducer::MaxAbs),
            "mean_abs" | "mean" => Ok(Reducer::MeanAbs),
            _ => Err(Error::Config(format!("unknown reducer '{s}' (max_abs|mean_abs)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StatsOptions {
    pub angle_floor: f64,
    /// Positions left out of every mean, for sink sensitivity checks.
    pub exclude_positions: BTreeSet<usize>,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            angle_floor: DEFAULT_ANGLE_FLOOR,
            exclude_positions: BTreeSet::new(),
        }
    }
}

/// Statistics of one rotary feature: a (layer, query head, pair) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub layer: usize,
    pub q_head: usize,
    pub kv_head: usize,
    pub pair: usize,
    pub q_mean: RotaryPair,
    pub k_mean: RotaryPair,
    pub q_radius: f64,
    pub k_radius: f64,
    /// Counterclockwise angle from `q_mean` to `k_mean` in `(0, 2pi]`;
    /// `None` when either mean is the zero vector.
    pub phi: Option<f64>,
    /// `None` when no position clears the angle floor.
    pub q_circ_std: Option<f64>,
    pub k_circ_std: Option<f64>,
    /// Largest `|value|` over positions for the pair's two dims.
    pub q_max_abs: [f64; 2],
    pub k_max_abs: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStatsTable {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_pairs: usize,
    /// Ordered by layer, then query head, then pair.
    pub entries: Vec<PairStat>,
}

impl PairStatsTable {
    pub fn get(&self, layer: usize, q_head: usize, pair: usize) -> &PairStat {
        &self.entries[(layer * self.n_q_heads + q_head) * self.n_pairs + pair]
    }

    /// All pairs of one head.
    pub fn head(&self, layer: usize, q_head: usize) -> Result<&[PairStat]> {
        if layer >= self.n_layers || q_head >= self.n_q_heads {
            return Err(Error::OutOfRange(format!(
                "layer {layer}/head {q_head} outside {}x{}",
                self.n_layers, self.n_q_heads
            )));
        }
        let start = (layer * self.n_q_heads + q_head) * self.n_pairs;
        Ok(&self.entries[start..start + self.n_pairs])
    }

    pub fn same_shape(&self, other: &PairStatsTable) -> bool {
        (self.n_layers, self.n_q_heads, self.n_pairs) == (other.n_layers, other.n_q_heads, other.n_pairs)
    }

    /// Writes one CSV row per feature with a fixed column order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer", "q_head", "kv_head", "pair", "q_mean_x", "q_mean_y", "k_mean_x", "k_mean_y",
            "q_radius", "k_radius", "phi", "q_circ_std", "k_circ_std", "q_max_abs_a",
            "q_max_abs_b", "k_max_abs_a", "k_max_abs_b",
        ])
        .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.layer.to_string(),
                e.q_head.to_string(),
                e.kv_head.to_string(),
                e.pair.to_string(),
                e.q_mean.x.to_string(),
                e.q_mean.y.to_string(),
                e.k_mean.x.to_string(),
                e.k_mean.y.to_string(),
                e.q_radius.to_string(),
                e.k_radius.to_string(),
                opt(e.phi),
                opt(e.q_circ_std),
                opt(e.k_circ_std),
                e.q_max_abs[0].to_string(),
                e.q_max_abs[1].to_string(),
                e.k_max_abs[0].to_string(),
                e.k_max_abs[1].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}

/// Extracts rotary pair `i` from a head vector.
pub fn pair_slice(v: &[f64], i: usize, config: &RopeConfig) -> Result<RotaryPair> {
    if i >= config.n_pairs() {
        return Err(Error::OutOfRange(format!(
            "pair {i} outside {} rotary pairs",
            config.n_pairs()
        )));
    }
    if v.len() != config.head_dim {
        return Err(Error::Shape(format!("vector has {} dims, head_dim is {}", v.len(), config.head_dim)));
    }
    let (a, b) = config.pair_dims(i);
    Ok(RotaryPair::new(v[a], v[b]))
}

/// Counterclockwise sweep carrying `q_mean` onto `k_mean`, in `(0, 2pi]`.
pub fn angle_between(q_mean: RotaryPair, k_mean: RotaryPair) -> Result<f64> {
    if q_mean.norm() == 0.0 || k_mean.norm() == 0.0 {
        return Err(Error::UndefinedAngle("angle against a zero-length mean vector".into()));
    }
    let phi = (k_mean.angle() - q_mean.angle()).rem_euclid(TAU);
    Ok(if phi <= 0.0 { TAU } else { phi })
}

/// Circular standard deviation `sqrt(-2 ln R)` with `R` the mean resultant
/// length. Returns `+inf` for a sample with no preferred direction.
pub fn circular_std(angles: &[f64]) -> Result<f64> {
    if angles.is_empty() {
        return Err(Error::OutOfRange("circular_std of an empty sample".into()));
    }
    let n = angles.len() as f64;
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    if s.hypot(c) / n < RESULTANT_ZERO {
        return Ok(f64::INFINITY);
    }
    // 1 - R from half-angle terms about the mean direction; avoids the
    // cancellation of 1 - hypot(s, c) / n for concentrated samples.
    let mu = s.atan2(c);
    let one_minus_r = 2.0 * angles
        .iter()
        .map(|a| ((a - mu) / 2.0).sin().powi(2))
        .sum::<f64>()
        / n;
    if one_minus_r >= 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok((-2.0 * (-one_minus_r).ln_1p()).sqrt())
}

fn mean_pair(pairs: impl Iterator<Item = RotaryPair>) -> RotaryPair {
    let (sx, sy, n) = pairs.fold((0.0, 0.0, 0usize), |(sx, sy, n), p| (sx + p.x, sy + p.y, n + 1));
    if n == 0 {
        return RotaryPair::default();
    }
    RotaryPair::new(sx / n as f64, sy / n as f64)
}

fn angles_above_floor(pairs: &[RotaryPair], floor: f64) -> Vec<f64> {
    pairs.iter().filter(|p| p.norm() >= floor).map(|p| p.angle()).collect()
}

fn max_abs(pairs: &[RotaryPair]) -> [f64; 2] {
    pairs
        .iter()
        .fold([0.0f64, 0.0f64], |m, p| [m[0].max(p.x.abs()), m[1].max(p.y.abs())])
}

/// Mean query and key pair vectors of every (layer, query head, pair).
pub fn mean_vectors(dump: &ActivationDump, config: &RopeConfig, opts: &StatsOptions) -> Result<PairStatsTable> {
    dump.require_pre_rotation()?;
    dump.check_config(config)?;
    let m = &dump.meta;
    let n_pairs = config.n_pairs();
    let positions: Vec<usize> = (0..m.n_positions)
        .filter(|p| !opts.exclude_positions.contains(p))
        .collect();
    if positions.is_empty() {
        return Err(Error::Validation("every position is excluded".into()));
    }

    let heads: Vec<(usize, usize)> = (0..m.n_layers)
        .flat_map(|l| (0..m.n_q_heads).map(move |h| (l, h)))
        .collect();
    let per_head: Vec<Vec<PairStat>> = heads
        .par_iter()
        .map(|&(layer, q_head)| {
            (0..n_pairs)
                .map(|i| {
                    let (a, b) = config.pair_dims(i);
                    let qs: Vec<RotaryPair> = positions
                        .iter()
                        .map(|&p| {
                            let r = dump.query(layer, q_head, p);
                            RotaryPair::new(r[a], r[b])
                        })
                        .collect();
                    let ks: Vec<RotaryPair> = positions
                        .iter()
                        .map(|&p| {
                            let r = dump.key_for(layer, q_head, p);
                            RotaryPair::new(r[a], r[b])
                        })
                        .collect();
                    let q_mean = mean_pair(qs.iter().copied());
                    let k_mean = mean_pair(ks.iter().copied());
                    let q_angles = angles_above_floor(&qs, opts.angle_floor);
                    let k_angles = angles_above_floor(&ks, opts.angle_floor);
                    PairStat {
                        layer,
                        q_head,
                        kv_head: dump.kv_head_for(q_head),
                        pair: i,
                        q_mean,
                        k_mean,
                        q_radius: q_mean.norm(),
                        k_radius: k_mean.norm(),
                        phi: angle_between(q_mean, k_mean).ok(),
                        q_circ_std: circular_std(&q_angles).ok(),
                        k_circ_std: circular_std(&k_angles).ok(),
                        q_max_abs: max_abs(&qs),
                        k_max_abs: max_abs(&ks),
                    }
                })
                .collect()
        })
        .collect();

    Ok(PairStatsTable {
        n_layers: m.n_layers,
        n_q_heads: m.n_q_heads,
        n_pairs,
        entries: per_head.into_iter().flatten().collect(),
    })
}

/// `|activation|` reduced over heads and positions, per (layer, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMatrix {
    pub side: Side,
    pub reducer: Reducer,
    pub n_layers: usize,
    pub head_dim: usize,
    /// Row-major `[layer][dim]`.
    pub values: Vec<f64>,
}

impl MagnitudeMatrix {
    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.head_dim..(layer + 1) * self.head_dim]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn magnitude_summary(dump: &ActivationDump, side: Side, reducer: Reducer) -> MagnitudeMatrix {
    let m = &dump.meta;
    let t = match side {
        Side::Query => &dump.q,
        Side::Key => &dump.k,
    };
    let [n_layers, n_heads, n_pos, d] = t.shape();
    let mut values = vec![0.0f64; n_layers * d];
    for layer in 0..n_layers {
        let acc = &mut values[layer * d..(layer + 1) * d];
        for head in 0..n_heads {
            for pos in 0..n_pos {
                for (a, v) in acc.iter_mut().zip(t.row(layer, head, pos)) {
                    match reducer {
                        Reducer::MaxAbs => *a = (*a).max(v.abs()),
                        Reducer::MeanAbs => *a += v.abs(),
                    }
                }
            }
        }
        if reducer == Reducer::MeanAbs {
            let count = (n_heads * n_pos) as f64;
            acc.iter_mut().for_each(|a| *a /= count);
        }
    }
    MagnitudeMatrix {
        side,
        reducer,
        n_layers,
        head_dim: m.head_dim,
        values,
    }
}

/// One (layer, head) point of the spread-versus-radius relation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadPoint {
    pub layer: usize,
    pub head: usize,
    pub radius: f64,
    /// `None` when no position clears the angle floor.
    pub circ_std: Option<f64>,
}

/// Mean radius against circular spread of per-position angles for one pair.
/// Key-side points are per kv head.
pub fn spread_vs_radius(
    dump: &ActivationDump,
    config: &RopeConfig,
    side: Side,
    pair: usize,
    angle_floor: f64,
) -> Result<Vec<SpreadPoint>> {
    dump.check_config(config)?;
    if pair >= config.n_pairs() {
        return Err(Error::OutOfRange(format!("pair {pair} outside {} rotary pairs", config.n_pairs())));
    }
    let t = match side {
        Side::Query => &dump.q,
        Side::Key => &dump.k,
    };
    let [n_layers, n_heads, n_pos, _] = t.shape();
    let (a, b) = config.pair_dims(pair);
    let mut out = Vec::with_capacity(n_layers * n_heads);
    for layer in 0..n_layers {
        for head in 0..n_heads {
            let pairs: Vec<RotaryPair> = (0..n_pos)
                .map(|p| {
                    let r = t.row(layer, head, p);
                    RotaryPair::new(r[a], r[b])
                })
                .collect();
            let radius = mean_pair(pairs.iter().copied()).norm();
            let angles = angles_above_floor(&pairs, angle_floor);
            let circ_std = if angles.is_empty() { None } else { Some(circular_std(&angles)?) };
            out.push(SpreadPoint { layer, head, radius, circ_std });
        }
    }
    Ok(out)
}

/// Equal-count radius bins over points with a defined spread; each bin
/// reports (mean radius, mean circular std). Infinite spreads are skipped.
pub fn bin_by_radius(points: &[SpreadPoint], n_bins: usize) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.circ_std.filter(|s| s.is_finite()).map(|s| (p.radius, s)))
        .collect();
    if pts.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_bins = n_bins.min(pts.len());
    (0..n_bins)
        .map(|b| {
            let chunk = &pts[b * pts.len() / n_bins..(b + 1) * pts.len() / n_bins];
            let n = chunk.len() as f64;
            (
                chunk.iter().map(|p| p.0).sum::<f64>() / n,
                chunk.iter().map(|p| p.1).sum::<f64>() / n,
            )
        })
        .collect()
}

/// Wraps an angle into `(0, 2pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w <= 0.0 {
        TAU
    } else {
        w
    }
}
