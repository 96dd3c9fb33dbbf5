//! Rotary position embedding primitives.
//!
//! A head vector of width `head_dim` carries `rotary_dim / 2` rotary pairs and
//! `head_dim - rotary_dim` non-rotary features. Pair `i` is rotated by
//! `position * theta_i` with `theta_i = base^(-2i / rotary_dim)` unless the
//! config carries explicit per-pair frequencies.
//!
//! Two memory layouts are supported:
//!
//! - [`Layout::SlicedFirst`]: pair `i` lives at dims `(i, i + r/2)`, rotary
//!   dims lead the vector (the common `transformers` "rotate half" layout).
//! - [`Layout::InterleavedLast`]: pair `i` lives at dims
//!   `(d_h - r + 2i, d_h - r + 2i + 1)`, rotary dims trail the vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SlicedFirst,
    InterleavedLast,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::SlicedFirst => f.write_str("sliced_first"),
            Layout::InterleavedLast => f.write_str("interleaved_last"),
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sliced_first" | "sliced" => Ok(Layout::SlicedFirst),
            "interleaved_last" | "interleaved" => Ok(Layout::InterleavedLast),
            other => Err(Error::Config(format!("unknown layout '{other}'"))),
        }
    }
}

impl Layout {
    /// Dims holding pair `pair` for a head of the given geometry.
    pub fn pair_dims(self, pair: usize, head_dim: usize, rotary_dim: usize) -> (usize, usize) {
        match self {
            Layout::SlicedFirst => (pair, pair + rotary_dim / 2),
            Layout::InterleavedLast => {
                let start = head_dim - rotary_dim + 2 * pair;
                (start, start + 1)
            }
        }
    }

    /// Dims holding the non-rotary features, in order.
    pub fn non_rotary_dims(self, head_dim: usize, rotary_dim: usize) -> std::ops::Range<usize> {
        match self {
            Layout::SlicedFirst => rotary_dim..head_dim,
            Layout::InterleavedLast => 0..head_dim - rotary_dim,
        }
    }
}

/// Frequency schedule and head geometry for one rotary attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    /// The schedule constant `c` in `theta_i = c^(-2i/r)`.
    pub base: f64,
    pub head_dim: usize,
    pub rotary_dim: usize,
    /// Effective trained context length used by the offset-feature bounds.
    pub p_max: usize,
    pub layout: Layout,
    /// Explicit per-pair frequencies, used for extension-scaled models whose
    /// schedule is remapped per dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_override: Option<Vec<f64>>,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize, rotary_dim: usize, p_max: usize) -> Result<Self> {
        let config = RopeConfig {
            base,
            head_dim,
            rotary_dim,
            p_max,
            layout: Layout::SlicedFirst,
            theta_override: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_p_max(mut self, p_max: usize) -> Result<Self> {
        self.p_max = p_max;
        self.validate()?;
        Ok(self)
    }

    pub fn with_theta_override(mut self, thetas: Vec<f64>) -> Result<Self> {
        self.theta_override = Some(thetas);
        self.validate()?;
        Ok(self)
    }

    /// Phi-1: c = 10000, d_h = 64, r = 32, p_max = 2048.
    pub fn phi1() -> Self {
        RopeConfig::new(10_000.0, 64, 32, 2048).expect("valid preset")
    }

    /// Llama-3-8B with the effective context length 8192.
    pub fn llama3_8b() -> Self {
        RopeConfig::new(500_000.0, 128, 128, 8192).expect("valid preset")
    }

    /// DeepSeek-V2-Lite rotary part (r = 64) with effective context length
    /// 4096, after reordering activations to the sliced layout.
    pub fn deepseek_v2_lite() -> Self {
        RopeConfig::new(10_000.0, 64, 64, 4096).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::Config(format!(
                "rope base must be a finite real > 1, got {}",
                self.base
            )));
        }
        if self.rotary_dim == 0 || !self.rotary_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary_dim must be even and positive, got {}",
                self.rotary_dim
            )));
        }
        if self.rotary_dim > self.head_dim {
            return Err(Error::Config(format!(
                "rotary_dim {} exceeds head_dim {}",
                self.rotary_dim, self.head_dim
            )));
        }
        if self.p_max == 0 {
            return Err(Error::Config("p_max must be positive".into()));
        }
        if let Some(thetas) = &self.theta_override {
            if thetas.len() != self.n_pairs() {
                return Err(Error::Config(format!(
                    "theta override has {} entries, expected {}",
                    thetas.len(),
                    self.n_pairs()
                )));
            }
            if let Some((i, t)) = thetas
                .iter()
                .enumerate()
                .find(|(_, t)| !(t.is_finite() && **t > 0.0))
            {
                return Err(Error::Config(format!(
                    "theta override entry {i} must be finite and positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.rotary_dim / 2
    }

    /// Frequency of pair `i`. The config is assumed valid.
    pub fn theta(&self, i: usize) -> f64 {
        match &self.theta_override {
            Some(thetas) => thetas[i],
            None => self.base.powf(-2.0 * i as f64 / self.rotary_dim as f64),
        }
    }

    pub fn pair_dims(&self, i: usize) -> (usize, usize) {
        self.layout.pair_dims(i, self.head_dim, self.rotary_dim)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.head_dim {
            return Err(Error::Shape(format!(
                "vector has {} dims, head_dim is {}",
                v.len(),
                self.head_dim
            )));
        }
        Ok(())
    }
}

/// Angular frequencies of all rotary pairs, in radians per position.
pub fn theta_schedule(config: &RopeConfig) -> Result<Vec<f64>> {
    config.validate()?;
    Ok((0..config.n_pairs()).map(|i| config.theta(i)).collect())
}

/// One 2-D rotary feature pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotaryPair {
    pub x: f64,
    pub y: f64,
}

impl RotaryPair {
    pub const fn new(x: f64, y: f64) -> Self {
        RotaryPair { x, y }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotaryPair::new(radius * c, radius * s)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Polar angle in `(-pi, pi]`.
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn dot(self, other: RotaryPair) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn scale(self, s: f64) -> Self {
        RotaryPair::new(self.x * s, self.y * s)
    }

    pub fn rotate(self, angle: f64) -> Self {
        rotate_pair(self, angle)
    }
}

/// Counterclockwise rotation of a pair by `angle` radians.
pub fn rotate_pair(v: RotaryPair, angle: f64) -> RotaryPair {
    let (s, c) = angle.sin_cos();
    RotaryPair::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Applies the rotary transform for `position` to a full head vector.
/// Non-rotary dims are copied through unchanged.
pub fn apply_rope(v: &[f64], position: usize, config: &RopeConfig) -> Result<Vec<f64>> {
    config.check_len(v)?;
    let mut out = v.to_vec();
    let m = position as f64;
    for i in 0..config.n_pairs() {
        let (a, b) = config.pair_dims(i);
        let r = rotate_pair(RotaryPair::new(v[a], v[b]), m * config.theta(i));
        out[a] = r.x;
        out[b] = r.y;
    }
    Ok(out)
}

/// Reorders a head vector between layouts, keeping pair `i` as pair `i` and
/// non-rotary features in their original order.
pub fn convert_layout(v: &[f64], from: Layout, to: Layout, config: &RopeConfig) -> Result<Vec<f64>> {
    config.check_len(v)?;
    if from == to {
        return Ok(v.to_vec());
    }
    let (d, r) = (config.head_dim, config.rotary_dim);
    let mut out = vec![0.0; d];
    for i in 0..r / 2 {
        let (sa, sb) = from.pair_dims(i, d, r);
        let (ta, tb) = to.pair_dims(i, d, r);
        out[ta] = v[sa];
        out[tb] = v[sb];
    }
    for (s, t) in from.non_rotary_dims(d, r).zip(to.non_rotary_dims(d, r)) {
        out[t] = v[s];
    }
    Ok(out)
}

/// Attention logit (before scaling) between a query at position `m` and a key
/// at position `n <= m`.
pub fn relative_score(q: &[f64], k: &[f64], m: usize, n: usize, config: &RopeConfig) -> Result<f64> {
    if m < n {
        return Err(Error::OutOfRange(format!(
            "query position {m} precedes key position {n}"
        )));
    }
    let rq = apply_rope(q, m, config)?;
    let rk = apply_rope(k, n, config)?;
    Ok(rq.iter().zip(&rk).map(|(a, b)| a * b).sum())
}
