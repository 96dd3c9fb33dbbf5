//! Rotary offset features.
//!
//! A rotary pair is an offset feature when its mean-vector contribution
//! `d(p)` stays strictly below `d(0)` for every distance `1 ..= p_max`. Two
//! necessary conditions follow from the geometry of a rotating mean query:
//!
//! - frequency bound: `theta < 2 pi / p_max` (no full period in context);
//! - angle bound: `phi > pi + p_max theta / 2`.
//!
//! Writing `x = theta p`, `d` first returns to `d(0)` at `x = 2 phi - 2 pi`
//! when `phi > pi`, so the continuous-position predicate is exactly
//! `phi > pi && theta p_max < 2 phi - 2 pi`.

use std::f64::consts::{PI, TAU};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rope::{RopeConfig, RotaryPair};
use crate::stats::{PairStatsTable, Side};

/// Default radius thresholds for positives.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [6.0, 9.0, 12.0];
/// Default lower-bound relaxation, radians.
pub const DEFAULT_RELAX: f64 = 0.1;

/// Frequency upper bound: true when pair `i` never completes a period
/// within `p_max` positions.
pub fn eligible(config: &RopeConfig, i: usize) -> bool {
    theta_eligible(config.theta(i), config.p_max)
}

fn theta_eligible(theta: f64, p_max: usize) -> bool {
    theta < TAU / p_max as f64
}

/// Minimum query-key angle for pair `i` to stay an offset feature through
/// the context: `pi + p_max theta_i / 2`.
pub fn lower_bound(config: &RopeConfig, i: usize) -> f64 {
    PI + config.p_max as f64 * config.theta(i) / 2.0
}

/// Exact predicate for continuous positions `x in (0, theta p_max]`.
pub fn classify_continuous(phi: f64, theta: f64, p_max: usize) -> Result<bool> {
    if !(phi > 0.0 && phi <= TAU) {
        return Err(Error::OutOfRange(format!("phi {phi} outside (0, 2pi]")));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::OutOfRange(format!("theta {theta} must be positive")));
    }
    if p_max == 0 {
        return Err(Error::OutOfRange("p_max must be at least 1".into()));
    }
    Ok(phi > PI && theta * (p_max as f64) < 2.0 * phi - TAU)
}

/// Brute-force predicate over integer distances `1 ..= p_max`. Zero-length
/// means give a constant `d` and are never offset features.
pub fn classify_discrete(q_mean: RotaryPair, k_mean: RotaryPair, theta: f64, p_max: usize) -> bool {
    if q_mean.norm() == 0.0 || k_mean.norm() == 0.0 {
        return false;
    }
    let d0 = q_mean.dot(k_mean);
    (1..=p_max).all(|p| q_mean.rotate(p as f64 * theta).dot(k_mean) < d0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetVerdict {
    pub layer: usize,
    pub q_head: usize,
    pub pair: usize,
    pub theta: f64,
    pub eligible: bool,
    pub lower_bound: f64,
    pub is_rof_discrete: bool,
    pub is_rof_continuous: bool,
    /// `None` when either mean is zero; such features are never offset features.
    pub phi: Option<f64>,
    pub q_radius: f64,
    pub k_radius: f64,
}

impl OffsetVerdict {
    pub fn undefined_angle(&self) -> bool {
        self.phi.is_none()
    }

    pub fn above_lower_bound(&self, relax: f64) -> bool {
        self.phi.is_some_and(|phi| phi > self.lower_bound - relax)
    }

    pub fn radius(&self, side: Side) -> f64 {
        match side {
            Side::Query => self.q_radius,
            Side::Key => self.k_radius,
        }
    }
}

/// One verdict per (layer, query head, pair), in table order.
pub fn verdicts(stats: &PairStatsTable, config: &RopeConfig) -> Result<Vec<OffsetVerdict>> {
    config.validate()?;
    if stats.n_pairs != config.n_pairs() {
        return Err(Error::Shape(format!(
            "statistics have {} pairs, config has {}",
            stats.n_pairs,
            config.n_pairs()
        )));
    }
    stats
        .entries
        .iter()
        .map(|e| {
            let theta = config.theta(e.pair);
            let is_rof_continuous = match e.phi {
                Some(phi) => classify_continuous(phi, theta, config.p_max)?,
                None => false,
            };
            Ok(OffsetVerdict {
                layer: e.layer,
                q_head: e.q_head,
                pair: e.pair,
                theta,
                eligible: eligible(config, e.pair),
                lower_bound: lower_bound(config, e.pair),
                is_rof_discrete: classify_discrete(e.q_mean, e.k_mean, theta, config.p_max),
                is_rof_continuous,
                phi: e.phi,
                q_radius: e.q_radius,
                k_radius: e.k_radius,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairBound {
    pub pair: usize,
    pub theta: f64,
    pub period: f64,
    pub total_rotation: f64,
    pub eligible: bool,
    pub lower_bound: f64,
}

/// Frequency and angle bounds of every pair.
pub fn bounds_table(config: &RopeConfig) -> Result<Vec<PairBound>> {
    config.validate()?;
    Ok((0..config.n_pairs())
        .map(|i| {
            let theta = config.theta(i);
            PairBound {
                pair: i,
                theta,
                period: TAU / theta,
                total_rotation: config.p_max as f64 * theta,
                eligible: eligible(config, i),
                lower_bound: lower_bound(config, i),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_pairs: usize,
    pub n_eligible: usize,
    /// Fraction of pairs passing the frequency bound, in `[0, 1]`.
    pub rof_fraction: f64,
    /// Mean angle bound over eligible pairs; `None` when none is eligible.
    pub mean_lower_bound: Option<f64>,
}

pub fn summary(config: &RopeConfig) -> Result<Summary> {
    let bounds = bounds_table(config)?;
    let eligible: Vec<&PairBound> = bounds.iter().filter(|b| b.eligible).collect();
    let mean_lower_bound = if eligible.is_empty() {
        None
    } else {
        Some(eligible.iter().map(|b| b.lower_bound).sum::<f64>() / eligible.len() as f64)
    };
    Ok(Summary {
        n_pairs: bounds.len(),
        n_eligible: eligible.len(),
        rof_fraction: eligible.len() as f64 / bounds.len() as f64,
        mean_lower_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub min_radius: f64,
    pub positives: usize,
    /// Recalls are `None` when there are no positives.
    pub ub_recall: Option<f64>,
    pub lb_recall: Option<f64>,
    pub lb_relaxed_recall: Option<f64>,
}

/// Recall of the frequency and angle bounds among large-radius features.
/// A feature is positive when its `side` radius is at least the threshold.
pub fn recall_table(verdicts: &[OffsetVerdict], thresholds: &[f64], relax: f64, side: Side) -> Result<Vec<RecallRow>> {
    if thresholds.is_empty() {
        return Err(Error::OutOfRange("at least one radius threshold is required".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&min_radius| {
            let pos: Vec<&OffsetVerdict> = verdicts.iter().filter(|v| v.radius(side) >= min_radius).collect();
            let frac = |pred: &dyn Fn(&OffsetVerdict) -> bool| {
                if pos.is_empty() {
                    None
                } else {
                    Some(pos.iter().filter(|v| pred(v)).count() as f64 / pos.len() as f64)
                }
            };
            RecallRow {
                min_radius,
                positives: pos.len(),
                ub_recall: frac(&|v| v.eligible),
                lb_recall: frac(&|v| v.above_lower_bound(0.0)),
                lb_relaxed_recall: frac(&|v| v.above_lower_bound(relax)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateGroup {
    /// Eligible before extension, not after.
    DroppedCandidate,
    /// Eligible under both configs.
    RetainedCandidate,
    /// Eligible only after extension (possible with remapped frequencies).
    GainedCandidate,
    /// Eligible under neither config.
    NeverCandidate,
}

impl CandidateGroup {
    pub const ALL: [CandidateGroup; 4] = [
        CandidateGroup::DroppedCandidate,
        CandidateGroup::RetainedCandidate,
        CandidateGroup::GainedCandidate,
        CandidateGroup::NeverCandidate,
    ];

    pub fn from_flags(before: bool, after: bool) -> Self {
        match (before, after) {
            (true, false) => CandidateGroup::DroppedCandidate,
            (true, true) => CandidateGroup::RetainedCandidate,
            (false, true) => CandidateGroup::GainedCandidate,
            (false, false) => CandidateGroup::NeverCandidate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateGroup::DroppedCandidate => "dropped_candidate",
            CandidateGroup::RetainedCandidate => "retained_candidate",
            CandidateGroup::GainedCandidate => "gained_candidate",
            CandidateGroup::NeverCandidate => "never_candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtensionDelta {
    pub layer: usize,
    pub q_head: usize,
    pub pair: usize,
    /// Key radii.
    pub radius_before: f64,
    pub radius_after: f64,
    pub eligible_before: bool,
    pub eligible_after: bool,
    pub group: CandidateGroup,
}

impl ExtensionDelta {
    pub fn delta(&self) -> f64 {
        self.radius_after - self.radius_before
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GroupSum {
    pub count: usize,
    pub radius_before: f64,
    pub radius_after: f64,
}

/// Radius sums per group; `None` for the global row, else `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSumRow {
    pub head: Option<(usize, usize)>,
    pub group: CandidateGroup,
    pub sum: GroupSum,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtensionComparison {
    pub deltas: Vec<ExtensionDelta>,
    /// Per-head rows in head order followed by global rows, each block in
    /// [`CandidateGroup::ALL`] order.
    pub sums: Vec<GroupSumRow>,
}

impl ExtensionComparison {
    pub fn global(&self, group: CandidateGroup) -> &GroupSum {
        &self
            .sums
            .iter()
            .find(|r| r.head.is_none() && r.group == group)
            .expect("global rows cover every group")
            .sum
    }
}

/// Key-radius changes between a base model and its context-extended
/// counterpart, grouped by how eligibility changes between the two configs.
pub fn compare_extension(
    stats_base: &PairStatsTable,
    config_base: &RopeConfig,
    stats_ext: &PairStatsTable,
    config_ext: &RopeConfig,
) -> Result<ExtensionComparison> {
    config_base.validate()?;
    config_ext.validate()?;
    if !stats_base.same_shape(stats_ext) {
        return Err(Error::Shape(format!(
            "base statistics {}x{}x{} vs extended {}x{}x{}",
            stats_base.n_layers,
            stats_base.n_q_heads,
            stats_base.n_pairs,
            stats_ext.n_layers,
            stats_ext.n_q_heads,
            stats_ext.n_pairs
        )));
    }
    if stats_base.n_pairs != config_base.n_pairs() || stats_ext.n_pairs != config_ext.n_pairs() {
        return Err(Error::Shape("statistics and configs disagree on the number of pairs".into()));
    }

    let deltas: Vec<ExtensionDelta> = stats_base
        .entries
        .iter()
        .zip(&stats_ext.entries)
        .map(|(b, a)| {
            let eligible_before = eligible(config_base, b.pair);
            let eligible_after = eligible(config_ext, a.pair);
            ExtensionDelta {
                layer: b.layer,
                q_head: b.q_head,
                pair: b.pair,
                radius_before: b.k_radius,
                radius_after: a.k_radius,
                eligible_before,
                eligible_after,
                group: CandidateGroup::from_flags(eligible_before, eligible_after),
            }
        })
        .collect();

    let n_heads = stats_base.n_layers * stats_base.n_q_heads;
    let mut head_sums = vec![[(); 4].map(|_| GroupSum::default()); n_heads];
    let mut global = [(); 4].map(|_| GroupSum::default());
    for d in &deltas {
        let g = CandidateGroup::ALL.iter().position(|&g| g == d.group).unwrap();
        for s in [&mut head_sums[d.layer * stats_base.n_q_heads + d.q_head][g], &mut global[g]] {
            s.count += 1;
            s.radius_before += d.radius_before;
            s.radius_after += d.radius_after;
        }
    }
    let mut sums = Vec::with_capacity((n_heads + 1) * 4);
    for (h, groups) in head_sums.into_iter().enumerate() {
        let head = (h / stats_base.n_q_heads, h % stats_base.n_q_heads);
        for (group, sum) in CandidateGroup::ALL.into_iter().zip(groups) {
            sums.push(GroupSumRow { head: Some(head), group, sum });
        }
    }
    for (group, sum) in CandidateGroup::ALL.into_iter().zip(global) {
        sums.push(GroupSumRow { head: None, group, sum });
    }
    Ok(ExtensionComparison { deltas, sums })
}
