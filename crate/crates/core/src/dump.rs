//! RKD1 activation dumps.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "RKD1"              4 bytes magic
//! header_len          u32
//! header              header_len bytes of UTF-8 JSON (DumpMeta)
//! Q                   f32 [n_layers][n_q_heads][n_positions][head_dim]
//! K                   f32 [n_layers][n_kv_heads][n_positions][head_dim]
//! ```
//!
//! Queries and keys are stored before the rotary transform. Grouped-query
//! models store each kv head once; the query-to-kv mapping is applied when
//! statistics are computed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{Layout, RopeConfig, RotaryPair};

pub const MAGIC: &[u8; 4] = b"RKD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMeta {
    pub model_name: String,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub n_positions: usize,
    pub head_dim: usize,
    pub rotary_dim: usize,
    pub rope_base: f64,
    pub p_max_config: usize,
    pub layout: Layout,
    pub pre_rotation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

impl DumpMeta {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("n_positions", self.n_positions),
            ("head_dim", self.head_dim),
            ("rotary_dim", self.rotary_dim),
            ("p_max_config", self.p_max_config),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Validation(format!(
                "n_q_heads {} is not a multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.rotary_dim.is_multiple_of(2) || self.rotary_dim > self.head_dim {
            return Err(Error::Validation(format!(
                "rotary_dim {} must be even and <= head_dim {}",
                self.rotary_dim, self.head_dim
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Validation(format!(
                "rope_base must be positive, got {}",
                self.rope_base
            )));
        }
        if let Some(tokens) = &self.tokens {
            if tokens.len() != self.n_positions {
                return Err(Error::Validation(format!(
                    "{} tokens for {} positions",
                    tokens.len(),
                    self.n_positions
                )));
            }
        }
        Ok(())
    }

    pub fn q_shape(&self) -> [usize; 4] {
        [self.n_layers, self.n_q_heads, self.n_positions, self.head_dim]
    }

    pub fn k_shape(&self) -> [usize; 4] {
        [self.n_layers, self.n_kv_heads, self.n_positions, self.head_dim]
    }

    /// Rotary config implied by the metadata, using `p_max_config` as the
    /// context length.
    pub fn rope_config(&self) -> Result<RopeConfig> {
        Ok(RopeConfig::new(self.rope_base, self.head_dim, self.rotary_dim, self.p_max_config)?
            .with_layout(self.layout))
    }

    /// Label for a position: its token text when present, else `#<pos>`.
    pub fn token_label(&self, pos: usize) -> String {
        match self.tokens.as_ref().and_then(|t| t.get(pos)) {
            Some(t) => t.clone(),
            None => format!("#{pos}"),
        }
    }
}

/// Dense row-major `[layer][head][position][dim]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, layer: usize, head: usize, pos: usize) -> usize {
        let [_, h, p, d] = self.shape;
        ((layer * h + head) * p + pos) * d
    }

    /// The head vector at `(layer, head, pos)`.
    pub fn row(&self, layer: usize, head: usize, pos: usize) -> &[f64] {
        let o = self.offset(layer, head, pos);
        &self.data[o..o + self.shape[3]]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(layer, head, pos);
        let d = self.shape[3];
        &mut self.data[o..o + d]
    }

    fn first_non_finite(&self) -> Option<[usize; 4]> {
        let [_, h, p, d] = self.shape;
        self.data.iter().position(|v| !v.is_finite()).map(|flat| {
            [flat / (h * p * d), flat / (p * d) % h, flat / d % p, flat % d]
        })
    }
}

/// Pre-rotation queries and keys for every layer, head and position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub meta: DumpMeta,
    pub q: Tensor4,
    pub k: Tensor4,
}

impl ActivationDump {
    pub fn new(meta: DumpMeta, q: Tensor4, k: Tensor4) -> Result<Self> {
        let dump = ActivationDump { meta, q, k };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.q.shape() != self.meta.q_shape() {
            return Err(Error::Validation(format!(
                "Q shape {:?} does not match metadata {:?}",
                self.q.shape(),
                self.meta.q_shape()
            )));
        }
        if self.k.shape() != self.meta.k_shape() {
            return Err(Error::Validation(format!(
                "K shape {:?} does not match metadata {:?}",
                self.k.shape(),
                self.meta.k_shape()
            )));
        }
        for (name, t) in [("Q", &self.q), ("K", &self.k)] {
            if let Some([l, h, p, d]) = t.first_non_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value in {name} at layer {l}, head {h}, position {p}, dim {d}"
                )));
            }
        }
        Ok(())
    }

    /// Statistics operations only make sense on un-rotated activations.
    pub fn require_pre_rotation(&self) -> Result<()> {
        if !self.meta.pre_rotation {
            return Err(Error::Validation(
                "dump holds post-rotation activations; pre-rotation data is required".into(),
            ));
        }
        Ok(())
    }

    /// Kv head serving query head `q_head`.
    pub fn kv_head_for(&self, q_head: usize) -> usize {
        q_head / (self.meta.n_q_heads / self.meta.n_kv_heads)
    }

    pub fn query(&self, layer: usize, q_head: usize, pos: usize) -> &[f64] {
        self.q.row(layer, q_head, pos)
    }

    /// Key seen by query head `q_head` (kv heads are expanded here).
    pub fn key_for(&self, layer: usize, q_head: usize, pos: usize) -> &[f64] {
        self.k.row(layer, self.kv_head_for(q_head), pos)
    }

    pub fn check_head(&self, layer: usize, q_head: usize) -> Result<()> {
        if layer >= self.meta.n_layers || q_head >= self.meta.n_q_heads {
            return Err(Error::OutOfRange(format!(
                "layer {layer}/head {q_head} outside {}x{}",
                self.meta.n_layers, self.meta.n_q_heads
            )));
        }
        Ok(())
    }

    /// Checks that an analysis config describes this dump's head geometry.
    pub fn check_config(&self, config: &RopeConfig) -> Result<()> {
        if config.head_dim != self.meta.head_dim || config.rotary_dim != self.meta.rotary_dim {
            return Err(Error::Config(format!(
                "config geometry (head_dim {}, rotary_dim {}) differs from dump ({}, {})",
                config.head_dim, config.rotary_dim, self.meta.head_dim, self.meta.rotary_dim
            )));
        }
        Ok(())
    }
}

fn header_bytes(meta: &DumpMeta) -> Result<Vec<u8>> {
    serde_json::to_vec(meta).map_err(|e| Error::Validation(format!("cannot encode header: {e}")))
}

/// Writes `dump` in RKD1 format and returns the number of bytes written.
pub fn write_dump<W: Write>(dump: &ActivationDump, mut out: W) -> Result<u64> {
    dump.validate()?;
    let header = header_bytes(&dump.meta)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Validation("header exceeds 4 GiB".into()))?;

    out.write_all(MAGIC)?;
    out.write_all(&header_len.to_le_bytes())?;
    out.write_all(&header)?;
    let mut written = 8 + header.len() as u64;
    for (name, t) in [("Q", &dump.q), ("K", &dump.k)] {
        let mut buf = Vec::with_capacity(t.as_slice().len() * 4);
        for (i, &v) in t.as_slice().iter().enumerate() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} value {v} at flat index {i} overflows f32"
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
        out.write_all(&buf)?;
        written += buf.len() as u64;
    }
    out.flush()?;
    Ok(written)
}

pub fn write_dump_file(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<u64> {
    let file = File::create(path)?;
    write_dump(dump, BufWriter::new(file))
}

/// Parses and validates an RKD1 dump.
pub fn read_dump<R: Read>(mut src: R) -> Result<ActivationDump> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)?;
    parse_dump(&bytes)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let file = File::open(path)?;
    read_dump(BufReader::new(file))
}

fn parse_dump(bytes: &[u8]) -> Result<ActivationDump> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, too short for the RKD1 preamble",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?} at byte offset 0, expected \"RKD1\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format(format!(
            "header declares {header_len} bytes but file ends at byte offset {}",
            bytes.len()
        )));
    }
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header is not UTF-8 (byte offset {}): {e}", 8 + e.valid_up_to())))?;
    let meta: DumpMeta = serde_json::from_str(header)
        .map_err(|e| Error::Format(format!("cannot parse header: {e}")))?;
    meta.validate()?;

    let mut cursor = header_end;
    let q = read_tensor(bytes, &mut cursor, "Q", meta.q_shape())?;
    let k = read_tensor(bytes, &mut cursor, "K", meta.k_shape())?;
    if cursor != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after K at byte offset {cursor}",
            bytes.len() - cursor
        )));
    }
    ActivationDump::new(meta, q, k)
}

fn read_tensor(bytes: &[u8], cursor: &mut usize, name: &str, shape: [usize; 4]) -> Result<Tensor4> {
    let n: usize = shape.iter().product();
    let start = *cursor;
    let end = start + 4 * n;
    if bytes.len() < end {
        let complete = (bytes.len() - start) / 4;
        return Err(Error::Format(format!(
            "{name} truncated: expected {n} floats from byte offset {start}, \
             data ends at byte offset {} after {complete} floats",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value in {name} at flat index {i} (byte offset {})",
            start + 4 * i
        )));
    }
    *cursor = end;
    Tensor4::from_vec(shape, data)
}

/// Target statistics for one rotary pair of a synthetic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTarget {
    /// Counterclockwise angle from mean query to mean key, in `(0, 2pi]`.
    pub phi: f64,
    pub q_radius: f64,
    pub k_radius: f64,
    /// Standard deviation of wrapped-normal angular jitter, radians.
    #[serde(default)]
    pub angular_noise: f64,
    /// Positions whose key points along the mean query direction.
    #[serde(default)]
    pub sink_positions: BTreeSet<usize>,
}

impl PairTarget {
    pub fn new(phi: f64, q_radius: f64, k_radius: f64) -> Self {
        PairTarget {
            phi,
            q_radius,
            k_radius,
            angular_noise: 0.0,
            sink_positions: BTreeSet::new(),
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.angular_noise = noise;
        self
    }

    pub fn with_sinks(mut self, sinks: impl IntoIterator<Item = usize>) -> Self {
        self.sink_positions = sinks.into_iter().collect();
        self
    }
}

/// Per-head pair targets replacing [`SynthSpec::pairs`] for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTargets {
    pub layer: usize,
    pub head: usize,
    pub pairs: Vec<PairTarget>,
}

/// Recipe for a synthetic dump with known per-pair means and spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "one")]
    pub n_layers: usize,
    #[serde(default = "one")]
    pub n_heads: usize,
    pub n_positions: usize,
    #[serde(default)]
    pub seed: u64,
    /// One target per rotary pair, used by every head without an override.
    pub pairs: Vec<PairTarget>,
    #[serde(default)]
    pub head_overrides: Vec<HeadTargets>,
}

fn default_model_name() -> String {
    "synthetic".into()
}

fn one() -> usize {
    1
}

impl SynthSpec {
    pub fn new(n_positions: usize, seed: u64, pairs: Vec<PairTarget>) -> Self {
        SynthSpec {
            model_name: default_model_name(),
            n_layers: 1,
            n_heads: 1,
            n_positions,
            seed,
            pairs,
            head_overrides: Vec::new(),
        }
    }

    pub fn with_heads(mut self, n_layers: usize, n_heads: usize) -> Self {
        self.n_layers = n_layers;
        self.n_heads = n_heads;
        self
    }

    pub fn with_head_override(mut self, layer: usize, head: usize, pairs: Vec<PairTarget>) -> Self {
        self.head_overrides.push(HeadTargets { layer, head, pairs });
        self
    }

    fn validate(&self, config: &RopeConfig) -> Result<()> {
        config.validate()?;
        if self.n_layers == 0 || self.n_heads == 0 || self.n_positions == 0 {
            return Err(Error::Config("synthetic dump needs layers, heads and positions".into()));
        }
        let all = std::iter::once(&self.pairs).chain(self.head_overrides.iter().map(|h| &h.pairs));
        for pairs in all {
            if pairs.len() != config.n_pairs() {
                return Err(Error::Config(format!(
                    "{} pair targets for {} rotary pairs",
                    pairs.len(),
                    config.n_pairs()
                )));
            }
            for (i, t) in pairs.iter().enumerate() {
                let ok = t.phi.is_finite()
                    && t.q_radius.is_finite()
                    && t.q_radius >= 0.0
                    && t.k_radius.is_finite()
                    && t.k_radius >= 0.0
                    && t.angular_noise.is_finite()
                    && t.angular_noise >= 0.0;
                if !ok {
                    return Err(Error::Config(format!("pair target {i} has invalid values: {t:?}")));
                }
                if let Some(&p) = t.sink_positions.iter().find(|&&p| p >= self.n_positions) {
                    return Err(Error::Config(format!("sink position {p} beyond {} positions", self.n_positions)));
                }
                if t.sink_positions.len() >= self.n_positions {
                    return Err(Error::Config("every position is a sink".into()));
                }
            }
        }
        for h in &self.head_overrides {
            if h.layer >= self.n_layers || h.head >= self.n_heads {
                return Err(Error::Config(format!(
                    "override for layer {} head {} is out of range",
                    h.layer, h.head
                )));
            }
        }
        Ok(())
    }
}

/// Generates a pre-rotation dump whose per-pair statistics follow `spec`.
///
/// For each pair the mean query sits at a seeded random angle `alpha` and the
/// mean key at `alpha + phi`. Without noise every position carries exactly the
/// mean vector, so sample means are exact. With noise, angles get wrapped
/// normal jitter and radii are inflated by `exp(noise^2 / 2)` so the expected
/// mean radius matches the target. Sink keys point along the mean query
/// direction with the target key radius; the remaining keys are shifted so the
/// key mean is unchanged.
pub fn synth_dump(spec: &SynthSpec, config: &RopeConfig) -> Result<ActivationDump> {
    spec.validate(config)?;
    let meta = DumpMeta {
        model_name: spec.model_name.clone(),
        n_layers: spec.n_layers,
        n_q_heads: spec.n_heads,
        n_kv_heads: spec.n_heads,
        n_positions: spec.n_positions,
        head_dim: config.head_dim,
        rotary_dim: config.rotary_dim,
        rope_base: config.base,
        p_max_config: config.p_max,
        layout: config.layout,
        pre_rotation: true,
        tokens: None,
    };
    let overrides: BTreeMap<(usize, usize), &Vec<PairTarget>> = spec
        .head_overrides
        .iter()
        .map(|h| ((h.layer, h.head), &h.pairs))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut q = Tensor4::zeros(meta.q_shape());
    let mut k = Tensor4::zeros(meta.k_shape());
    let n = spec.n_positions;

    for layer in 0..spec.n_layers {
        for head in 0..spec.n_heads {
            let targets = overrides.get(&(layer, head)).copied().unwrap_or(&spec.pairs);
            for (i, t) in targets.iter().enumerate() {
                let (a, b) = config.pair_dims(i);
                let alpha: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let q_pairs = jittered(&mut rng, t.q_radius, alpha, t.angular_noise, n);
                let mut k_pairs = jittered(&mut rng, t.k_radius, alpha + t.phi, t.angular_noise, n);

                if !t.sink_positions.is_empty() {
                    let sink = RotaryPair::from_polar(t.k_radius, alpha);
                    let target = RotaryPair::from_polar(t.k_radius, alpha + t.phi);
                    let n_sinks = t.sink_positions.len() as f64;
                    let shift = RotaryPair::new(
                        n_sinks * (target.x - sink.x) / (n as f64 - n_sinks),
                        n_sinks * (target.y - sink.y) / (n as f64 - n_sinks),
                    );
                    for (pos, kp) in k_pairs.iter_mut().enumerate() {
                        if t.sink_positions.contains(&pos) {
                            *kp = sink;
                        } else {
                            *kp = RotaryPair::new(kp.x + shift.x, kp.y + shift.y);
                        }
                    }
                }

                for pos in 0..n {
                    let row = q.row_mut(layer, head, pos);
                    row[a] = q_pairs[pos].x;
                    row[b] = q_pairs[pos].y;
                    let row = k.row_mut(layer, head, pos);
                    row[a] = k_pairs[pos].x;
                    row[b] = k_pairs[pos].y;
                }
            }
        }
    }
    ActivationDump::new(meta, q, k)
}

fn jittered(rng: &mut ChaCha8Rng, radius: f64, angle: f64, noise: f64, n: usize) -> Vec<RotaryPair> {
    if noise == 0.0 {
        return vec![RotaryPair::from_polar(radius, angle); n];
    }
    let normal = Normal::new(0.0, noise).expect("noise validated as finite and non-negative");
    let inflated = radius * (noise * noise / 2.0).exp();
    (0..n)
        .map(|_| RotaryPair::from_polar(inflated, angle + normal.sample(rng)))
        .collect()
}
