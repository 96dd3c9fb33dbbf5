//! Mean-vector dot-product decomposition and attention reconstruction.
//!
//! For a head with mean query/key pair vectors `q_i`, `k_i`, the rotary
//! contribution at query-key distance `p` is
//! `d_i(p) = (R(p * theta_i) q_i) . k_i = |q_i| |k_i| cos(phi_i - theta_i p)`
//! where `phi_i` is the counterclockwise angle from `q_i` to `k_i`. Summing
//! over pairs gives the positional score `D(p)`.

use std::collections::BTreeSet;
use std::io::Write;

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::rope::{apply_rope, RopeConfig, RotaryPair};
use crate::stats::{csv_err, PairStat};

/// Rotate-then-dot contribution of one pair at distance `p`.
pub fn d_component(entry: &PairStat, p: usize, config: &RopeConfig) -> f64 {
    let theta = config.theta(entry.pair);
    entry.q_mean.rotate(p as f64 * theta).dot(entry.k_mean)
}

/// Closed-form `|q||k| cos(phi - theta p)`; zero when `phi` is undefined.
pub fn d_component_closed_form(entry: &PairStat, p: usize, config: &RopeConfig) -> f64 {
    match entry.phi {
        Some(phi) => entry.q_radius * entry.k_radius * (phi - config.theta(entry.pair) * p as f64).cos(),
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionProfile {
    /// Largest distance covered; positions are `0..=max_distance`.
    pub max_distance: usize,
    /// `components[i][p] = d_i(p)`.
    pub components: Vec<Vec<f64>>,
    /// Sum of the included components.
    pub total: Vec<f64>,
    pub excluded: BTreeSet<usize>,
}

impl DecompositionProfile {
    /// Total with every pair included, regardless of the exclusion set.
    pub fn total_all(&self) -> Vec<f64> {
        (0..=self.max_distance)
            .map(|p| self.components.iter().map(|c| c[p]).sum())
            .collect()
    }

    /// CSV with columns `p, d_0 .. d_{n-1}, total_all` and, when pairs are
    /// excluded, `total_excluding`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["p".to_string()];
        header.extend((0..self.components.len()).map(|i| format!("d_{i}")));
        header.push("total_all".into());
        let with_excl = !self.excluded.is_empty();
        if with_excl {
            header.push("total_excluding".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        let all = self.total_all();
        for p in 0..=self.max_distance {
            let mut row = vec![p.to_string()];
            row.extend(self.components.iter().map(|c| c[p].to_string()));
            row.push(all[p].to_string());
            if with_excl {
                row.push(self.total[p].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Components and total for distances `0..=max_distance` of one head.
/// `head` holds the head's pair statistics in pair order.
pub fn d_profile(
    head: &[PairStat],
    max_distance: usize,
    exclude: &BTreeSet<usize>,
    config: &RopeConfig,
) -> Result<DecompositionProfile> {
    if head.len() != config.n_pairs() {
        return Err(Error::Shape(format!(
            "{} pair statistics for {} rotary pairs",
            head.len(),
            config.n_pairs()
        )));
    }
    if let Some(&bad) = exclude.iter().find(|&&i| i >= config.n_pairs()) {
        return Err(Error::OutOfRange(format!(
            "excluded pair {bad} outside {} rotary pairs",
            config.n_pairs()
        )));
    }
    let components: Vec<Vec<f64>> = head
        .iter()
        .map(|e| (0..=max_distance).map(|p| d_component(e, p, config)).collect())
        .collect();
    let total = (0..=max_distance)
        .map(|p| {
            components
                .iter()
                .enumerate()
                .filter(|(i, _)| !exclude.contains(i))
                .map(|(_, c)| c[p])
                .sum()
        })
        .collect();
    Ok(DecompositionProfile {
        max_distance,
        components,
        total,
        excluded: exclude.clone(),
    })
}

/// Causal, row-normalized attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub size: usize,
    pub scale: f64,
    /// Row-major `size x size`, zero above the diagonal.
    pub weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn weight(&self, m: usize, n: usize) -> f64 {
        self.weights[m * self.size + n]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.size..(m + 1) * self.size]
    }

    /// Builds weights from causal logits `logit(m, n)` for `n <= m`.
    fn from_logits(size: usize, scale: f64, logit: impl Fn(usize, usize) -> f64) -> Self {
        let mut weights = vec![0.0; size * size];
        for m in 0..size {
            let row = &mut weights[m * size..m * size + m + 1];
            for (n, w) in row.iter_mut().enumerate() {
                *w = logit(m, n) * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in row.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            row.iter_mut().for_each(|w| *w /= sum);
        }
        AttentionMatrix { size, scale, weights }
    }

    /// Mean weight each key position receives from the rows that can see it.
    pub fn column_means(&self) -> Vec<f64> {
        (0..self.size)
            .map(|n| {
                let rows = self.size - n;
                (n..self.size).map(|m| self.weight(m, n)).sum::<f64>() / rows as f64
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "n", "weight"]).map_err(csv_err)?;
        for m in 0..self.size {
            for n in 0..=m {
                w.write_record([m.to_string(), n.to_string(), self.weight(m, n).to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Attention implied by the positional score alone: row `m` attends to
/// `n <= m` with logit `total(m - n) / sqrt(head_dim)`. Covers positions
/// `0..=max_distance` of the profile.
pub fn positional_attention(profile: &DecompositionProfile, head_dim: usize) -> AttentionMatrix {
    let size = profile.max_distance + 1;
    let scale = 1.0 / (head_dim as f64).sqrt();
    AttentionMatrix::from_logits(size, scale, |m, n| profile.total[m - n])
}

/// Materializes the full causal attention of one head from the dump's
/// actual queries and keys, rotating them at their positions. Memory is
/// quadratic in the number of positions.
pub fn full_attention(dump: &ActivationDump, layer: usize, q_head: usize, config: &RopeConfig) -> Result<AttentionMatrix> {
    dump.check_head(layer, q_head)?;
    dump.check_config(config)?;
    let n = dump.meta.n_positions;
    let qs: Vec<Vec<f64>> = (0..n)
        .map(|p| apply_rope(dump.query(layer, q_head, p), p, config))
        .collect::<Result<_>>()?;
    let ks: Vec<Vec<f64>> = (0..n)
        .map(|p| apply_rope(dump.key_for(layer, q_head, p), p, config))
        .collect::<Result<_>>()?;
    let scale = 1.0 / (config.head_dim as f64).sqrt();
    Ok(AttentionMatrix::from_logits(n, scale, |m, j| {
        qs[m].iter().zip(&ks[j]).map(|(a, b)| a * b).sum()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkScores {
    /// `scores[n]` = mean query pair . key pair at position `n`.
    pub scores: Vec<f64>,
    pub positive: BTreeSet<usize>,
}

/// Dot product of the head's un-rotated mean query pair with every raw key
/// pair. Keys aligned with the mean query direction score positive.
pub fn sink_scores(dump: &ActivationDump, layer: usize, q_head: usize, pair: usize, config: &RopeConfig) -> Result<SinkScores> {
    dump.check_head(layer, q_head)?;
    dump.check_config(config)?;
    if pair >= config.n_pairs() {
        return Err(Error::OutOfRange(format!("pair {pair} outside {} rotary pairs", config.n_pairs())));
    }
    let (a, b) = config.pair_dims(pair);
    let n = dump.meta.n_positions;
    let (sx, sy) = (0..n).fold((0.0, 0.0), |(sx, sy), p| {
        let r = dump.query(layer, q_head, p);
        (sx + r[a], sy + r[b])
    });
    let q_mean = RotaryPair::new(sx / n as f64, sy / n as f64);
    if q_mean.norm() == 0.0 {
        return Err(Error::UndefinedAngle(format!(
            "mean query of layer {layer} head {q_head} pair {pair} is zero"
        )));
    }
    let scores: Vec<f64> = (0..n)
        .map(|p| {
            let r = dump.key_for(layer, q_head, p);
            q_mean.dot(RotaryPair::new(r[a], r[b]))
        })
        .collect();
    let positive = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(p, _)| p)
        .collect();
    Ok(SinkScores { scores, positive })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::{synth_dump, DumpMeta, PairTarget, SynthSpec, Tensor4};
    use crate::rope::{relative_score, Layout};
    use crate::stats::{mean_vectors, StatsOptions};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn entry(pair: usize, phi: f64, qr: f64, kr: f64) -> PairStat {
        let q_mean = RotaryPair::from_polar(qr, 0.3);
        let k_mean = RotaryPair::from_polar(kr, 0.3 + phi);
        PairStat {
            layer: 0,
            q_head: 0,
            kv_head: 0,
            pair,
            q_mean,
            k_mean,
            q_radius: q_mean.norm(),
            k_radius: k_mean.norm(),
            phi: crate::stats::angle_between(q_mean, k_mean).ok(),
            q_circ_std: None,
            k_circ_std: None,
            q_max_abs: [0.0; 2],
            k_max_abs: [0.0; 2],
        }
    }

    #[test]
    fn d_component_examples() {
        let c = RopeConfig::new(10000.0, 2, 2, 16).unwrap();
        let e = entry(0, PI, 5.0, 7.0);
        assert_abs_diff_eq!(d_component(&e, 0, &c), -35.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d_component_closed_form(&e, 0, &c), -35.0, epsilon = 1e-12);

        let c = RopeConfig::new(10000.0, 2, 2, 16).unwrap().with_theta_override(vec![FRAC_PI_2]).unwrap();
        let e = entry(0, 3.0 * FRAC_PI_2, 2.0, 3.0);
        assert_abs_diff_eq!(d_component(&e, 1, &c), -6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d_component_closed_form(&e, 1, &c), -6.0, epsilon = 1e-12);

        let z = entry(0, 1.0, 0.0, 3.0);
        assert_eq!(d_component(&z, 5, &c), 0.0);
        assert_eq!(d_component_closed_form(&z, 5, &c), 0.0);
    }

    #[test]
    fn profile_exclusion() {
        let c = RopeConfig::new(100.0, 6, 6, 32).unwrap();
        let head: Vec<PairStat> = (0..3).map(|i| entry(i, 1.0 + i as f64, 1.0 + i as f64, 2.0)).collect();
        let none = d_profile(&head, 40, &BTreeSet::new(), &c).unwrap();
        let all = d_profile(&head, 40, &[0, 1, 2].into_iter().collect(), &c).unwrap();
        assert!(all.total.iter().all(|&t| t == 0.0));
        let ex1 = d_profile(&head, 40, &[1].into_iter().collect(), &c).unwrap();
        for p in 0..=40 {
            assert_abs_diff_eq!(ex1.total[p] + d_component(&head[1], p, &c), none.total[p], epsilon = 1e-9);
        }
        assert!(d_profile(&head, 4, &[3].into_iter().collect(), &c).is_err());
        assert!(d_profile(&head[..2], 4, &BTreeSet::new(), &c).is_err());
    }

    #[test]
    fn profile_csv_columns() {
        let c = RopeConfig::new(100.0, 4, 4, 32).unwrap();
        let head: Vec<PairStat> = (0..2).map(|i| entry(i, 4.0, 1.0, 2.0)).collect();
        let prof = d_profile(&head, 3, &[1].into_iter().collect(), &c).unwrap();
        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "p,d_0,d_1,total_all,total_excluding");
        assert_eq!(s.lines().count(), 5);
    }

    #[test]
    fn profile_matches_full_vector_oracle() {
        let c = RopeConfig::new(10000.0, 10, 8, 512).unwrap();
        let head: Vec<PairStat> = (0..4).map(|i| entry(i, 0.7 * (i + 1) as f64, 1.5, 0.5 + i as f64)).collect();
        let prof = d_profile(&head, 300, &BTreeSet::new(), &c).unwrap();
        let mut q = vec![0.0; 10];
        let mut k = vec![0.0; 10];
        for e in &head {
            let (a, b) = c.pair_dims(e.pair);
            q[a] = e.q_mean.x;
            q[b] = e.q_mean.y;
            k[a] = e.k_mean.x;
            k[b] = e.k_mean.y;
        }
        for p in 0..=300 {
            let oracle = relative_score(&q, &k, p, 0, &c).unwrap();
            assert!((prof.total[p] - oracle).abs() <= 1e-5 * oracle.abs().max(1.0));
        }
    }

    fn profile_from_total(total: Vec<f64>) -> DecompositionProfile {
        DecompositionProfile {
            max_distance: total.len() - 1,
            components: vec![total.clone()],
            total,
            excluded: BTreeSet::new(),
        }
    }

    #[test]
    fn positional_attention_examples() {
        let a = positional_attention(&profile_from_total(vec![3.0; 10]), 64);
        for m in 0..10 {
            for n in 0..=m {
                assert_abs_diff_eq!(a.weight(m, n), 1.0 / (m + 1) as f64, epsilon = 1e-12);
            }
            for n in m + 1..10 {
                assert_eq!(a.weight(m, n), 0.0);
            }
        }

        let base: Vec<f64> = (0..20).map(|p| (p as f64 * 0.37).sin() * 5.0).collect();
        let a = positional_attention(&profile_from_total(base.clone()), 16);
        let b = positional_attention(&profile_from_total(base.iter().map(|x| x + 123.0).collect()), 16);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-9);
        }

        let mut peak = vec![0.0; 30];
        peak[0] = 10.0;
        peak[1] = 10.0;
        let a = positional_attention(&profile_from_total(peak), 1);
        for m in 1..30 {
            assert!(a.weight(m, m) + a.weight(m, m - 1) >= 0.9);
        }
    }

    fn dump_from(q: Vec<f64>, k: Vec<f64>, n_pos: usize, d: usize) -> ActivationDump {
        let meta = DumpMeta {
            model_name: "t".into(),
            n_layers: 1,
            n_q_heads: 1,
            n_kv_heads: 1,
            n_positions: n_pos,
            head_dim: d,
            rotary_dim: d,
            rope_base: 10000.0,
            p_max_config: 64,
            layout: Layout::SlicedFirst,
            pre_rotation: true,
            tokens: None,
        };
        let qt = Tensor4::from_vec(meta.q_shape(), q).unwrap();
        let kt = Tensor4::from_vec(meta.k_shape(), k).unwrap();
        ActivationDump::new(meta, qt, kt).unwrap()
    }

    #[test]
    fn full_attention_examples() {
        let c = RopeConfig::new(10000.0, 2, 2, 64).unwrap();
        let a = full_attention(&dump_from(vec![1.0, 2.0], vec![3.0, 4.0], 1, 2), 0, 0, &c).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert!(full_attention(&dump_from(vec![1.0, 2.0], vec![3.0, 4.0], 1, 2), 0, 1, &c).is_err());

        // zero keys give equal logits
        let d = dump_from((0..16).map(|i| i as f64).collect(), vec![0.0; 16], 8, 2);
        let a = full_attention(&d, 0, 0, &c).unwrap();
        for m in 0..8 {
            for n in 0..=m {
                assert_abs_diff_eq!(a.weight(m, n), 1.0 / (m + 1) as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn full_attention_sink_column() {
        // non-rotary dims carry the signal: head_dim 4, rotary_dim 2
        let c = RopeConfig::new(10000.0, 4, 2, 64).unwrap();
        let n = 32;
        let mut q = Vec::new();
        let mut k = Vec::new();
        for p in 0..n {
            q.extend([0.0, 0.0, 2.0, 0.0]);
            // logits before scaling: +-20 -> +-10 after 1/sqrt(4)
            k.extend(if p == 5 { [0.0, 0.0, 10.0, 0.0] } else { [0.0, 0.0, -10.0, 0.0] });
        }
        let meta = DumpMeta {
            model_name: "sink".into(),
            n_layers: 1,
            n_q_heads: 1,
            n_kv_heads: 1,
            n_positions: n,
            head_dim: 4,
            rotary_dim: 2,
            rope_base: 10000.0,
            p_max_config: 64,
            layout: Layout::SlicedFirst,
            pre_rotation: true,
            tokens: None,
        };
        let d = ActivationDump::new(
            meta.clone(),
            Tensor4::from_vec(meta.q_shape(), q).unwrap(),
            Tensor4::from_vec(meta.k_shape(), k).unwrap(),
        )
        .unwrap();
        let a = full_attention(&d, 0, 0, &c).unwrap();
        for m in 5..n {
            assert!(a.weight(m, 5) >= 0.99, "row {m}: {}", a.weight(m, 5));
        }
    }

    #[test]
    fn sink_score_examples() {
        let c = RopeConfig::new(10000.0, 2, 2, 1024).unwrap();
        let spec = SynthSpec::new(300, 4, vec![PairTarget::new(4.0, 3.0, 6.0).with_sinks([0, 204])]);
        let d = synth_dump(&spec, &c).unwrap();
        let s = sink_scores(&d, 0, 0, 0, &c).unwrap();
        assert_eq!(s.positive, [0, 204].into_iter().collect());

        let mut doubled = d.clone();
        doubled.k = Tensor4::from_vec(d.k.shape(), d.k.as_slice().iter().map(|v| v * 2.0).collect()).unwrap();
        let s2 = sink_scores(&doubled, 0, 0, 0, &c).unwrap();
        assert_eq!(s2.positive, s.positive);
        for (a, b) in s.scores.iter().zip(&s2.scores) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-9);
        }

        let opposite = synth_dump(&SynthSpec::new(50, 4, vec![PairTarget::new(PI, 3.0, 6.0)]), &c).unwrap();
        assert!(sink_scores(&opposite, 0, 0, 0, &c).unwrap().positive.is_empty());

        let zero = dump_from(vec![0.0; 8], vec![1.0; 8], 4, 2);
        assert!(matches!(sink_scores(&zero, 0, 0, 0, &c), Err(Error::UndefinedAngle(_))));
    }

    #[test]
    fn profile_from_dump_stats() {
        let c = RopeConfig::new(10000.0, 4, 4, 64).unwrap();
        let d = synth_dump(&SynthSpec::new(10, 0, vec![PairTarget::new(PI, 5.0, 7.0), PairTarget::new(4.0, 1.0, 1.0)]), &c).unwrap();
        let t = mean_vectors(&d, &c, &StatsOptions::default()).unwrap();
        let prof = d_profile(t.head(0, 0).unwrap(), 10, &BTreeSet::new(), &c).unwrap();
        assert_abs_diff_eq!(prof.components[0][0], -35.0, epsilon = 1e-9);
        assert_abs_diff_eq!(prof.components[1][0], 4f64.cos(), epsilon = 1e-9);
    }
}
