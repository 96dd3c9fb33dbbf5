//! Tabular exports and static SVG plots.
//!
//! SVG output is hand-assembled: every data mark carries a class so tests and
//! downstream tooling can count marks without a renderer.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::Write;

use crate::decompose::AttentionMatrix;
use crate::error::{Error, Result};
use crate::offset::{eligible, lower_bound, ExtensionComparison, OffsetVerdict, PairBound, RecallRow, Summary};
use crate::rope::{Layout, RopeConfig};
use crate::stats::{csv_err, opt, MagnitudeMatrix, SpreadPoint};

pub fn write_verdicts_csv<W: Write>(verdicts: &[OffsetVerdict], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer", "q_head", "pair", "theta", "eligible", "lower_bound", "phi", "q_radius", "k_radius",
        "is_rof_continuous", "is_rof_discrete", "undefined_angle",
    ])
    .map_err(csv_err)?;
    for v in verdicts {
        w.write_record([
            v.layer.to_string(),
            v.q_head.to_string(),
            v.pair.to_string(),
            v.theta.to_string(),
            v.eligible.to_string(),
            v.lower_bound.to_string(),
            opt(v.phi),
            v.q_radius.to_string(),
            v.k_radius.to_string(),
            v.is_rof_continuous.to_string(),
            v.is_rof_discrete.to_string(),
            v.undefined_angle().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `min_radius, positives, ub_recall, lb_recall, lb_relaxed_recall`.
/// Undefined recalls (no positives) are written as empty fields.
pub fn write_recall_csv<W: Write>(rows: &[RecallRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["min_radius", "positives", "ub_recall", "lb_recall", "lb_relaxed_recall"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.min_radius.to_string(),
            r.positives.to_string(),
            opt(r.ub_recall),
            opt(r.lb_recall),
            opt(r.lb_relaxed_recall),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_spread_csv<W: Write>(points: &[SpreadPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "radius", "circ_std"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.layer.to_string(), p.head.to_string(), p.radius.to_string(), opt(p.circ_std)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-feature deltas to `deltas` and the group sums to `sums`.
pub fn write_extension_csv<W1: Write, W2: Write>(cmp: &ExtensionComparison, deltas: W1, sums: W2) -> Result<()> {
    let mut w = csv::Writer::from_writer(deltas);
    w.write_record([
        "layer", "q_head", "pair", "radius_before", "radius_after", "delta", "eligible_before",
        "eligible_after", "group",
    ])
    .map_err(csv_err)?;
    for d in &cmp.deltas {
        w.write_record([
            d.layer.to_string(),
            d.q_head.to_string(),
            d.pair.to_string(),
            d.radius_before.to_string(),
            d.radius_after.to_string(),
            d.delta().to_string(),
            d.eligible_before.to_string(),
            d.eligible_after.to_string(),
            d.group.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(sums);
    w.write_record(["scope", "layer", "q_head", "group", "count", "radius_before_sum", "radius_after_sum"])
        .map_err(csv_err)?;
    for r in &cmp.sums {
        let (scope, layer, head) = match r.head {
            Some((l, h)) => ("head", l.to_string(), h.to_string()),
            None => ("global", String::new(), String::new()),
        };
        w.write_record([
            scope.to_string(),
            layer,
            head,
            r.group.as_str().to_string(),
            r.sum.count.to_string(),
            r.sum.radius_before.to_string(),
            r.sum.radius_after.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text bounds table followed by the %ROF / Mean LB summary.
pub fn format_bounds(config: &RopeConfig, bounds: &[PairBound], summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# base={} head_dim={} rotary_dim={} p_max={} layout={}",
        config.base, config.head_dim, config.rotary_dim, config.p_max, config.layout
    );
    let _ = writeln!(s, "{:>4}  {:>12}  {:>12}  {:>12}  {:>8}  {:>11}", "pair", "theta", "period", "p_max*theta", "eligible", "lower_bound");
    for b in bounds {
        let lb = if b.eligible { format!("{:.4}", b.lower_bound) } else { "-".into() };
        let _ = writeln!(
            s,
            "{:>4}  {:>12.6e}  {:>12.2}  {:>12.4}  {:>8}  {:>11}",
            b.pair,
            b.theta,
            b.period,
            b.total_rotation,
            if b.eligible { "yes" } else { "no" },
            lb
        );
    }
    let eligible: Vec<String> = bounds.iter().filter(|b| b.eligible).map(|b| b.pair.to_string()).collect();
    let _ = writeln!(s, "eligible pairs: {}", if eligible.is_empty() { "none".into() } else { eligible.join(",") });
    let _ = writeln!(s, "%ROF: {:.2}% ({}/{})", summary.rof_fraction * 100.0, summary.n_eligible, summary.n_pairs);
    match summary.mean_lower_bound {
        Some(m) => {
            let _ = writeln!(s, "Mean LB: {m:.4}");
        }
        None => {
            let _ = writeln!(s, "Mean LB: undefined (no eligible pairs)");
        }
    }
    s
}

fn layer_color(layer: usize, n_layers: usize) -> String {
    let hue = 300.0 * layer as f64 / n_layers.max(2).saturating_sub(1) as f64;
    format!("hsl({hue:.1},70%,45%)")
}

/// Sequential white-to-dark-red scale for `t in [0, 1]`.
fn heat_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let r = 255.0 - 115.0 * t;
    let g = 255.0 * (1.0 - t);
    let b = 255.0 * (1.0 - t).powi(2);
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 170.0;
const MARGIN: f64 = 36.0;

/// One panel per pair: `(phi, key radius)` points colored by layer, with a
/// dashed vertical line at the angle bound of eligible pairs only.
pub fn emit_scatter<W: Write>(verdicts: &[OffsetVerdict], config: &RopeConfig, mut out: W) -> Result<()> {
    if verdicts.is_empty() {
        return Err(Error::OutOfRange("scatter needs at least one verdict".into()));
    }
    let n_pairs = config.n_pairs();
    let cols = n_pairs.min(4);
    let rows = n_pairs.div_ceil(cols);
    let n_layers = verdicts.iter().map(|v| v.layer + 1).max().unwrap_or(1);
    let width = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = rows as f64 * (PANEL_H + MARGIN) + MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for pair in 0..n_pairs {
        let pts: Vec<&OffsetVerdict> = verdicts.iter().filter(|v| v.pair == pair).collect();
        let y_max = pts.iter().map(|v| v.k_radius).fold(0.0, f64::max).max(f64::MIN_POSITIVE) * 1.05;
        let x0 = MARGIN + (pair % cols) as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN + (pair / cols) as f64 * (PANEL_H + MARGIN);
        let sx = |phi: f64| x0 + phi / TAU * PANEL_W;
        let sy = |r: f64| y0 + PANEL_H - r / y_max * PANEL_H;

        let _ = writeln!(
            s,
            r#"<g class="panel" id="panel-{pair}" data-pair="{pair}" data-x-min="0" data-x-max="{TAU}" data-y-min="0" data-y-max="{y_max}">"#
        );
        let _ = writeln!(
            s,
            r#"<rect class="frame" x="{x0:.2}" y="{y0:.2}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">pair {pair}</text>"#, x0 + 4.0, y0 - 4.0);
        let _ = writeln!(s, r#"<text x="{x0:.2}" y="{:.2}">0</text>"#, y0 + PANEL_H + 12.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">2π</text>"#, x0 + PANEL_W, y0 + PANEL_H + 12.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y_max:.2}</text>"#, x0 - 2.0, y0 + 8.0);
        if eligible(config, pair) {
            let x = sx(lower_bound(config, pair));
            let _ = writeln!(
                s,
                r#"<line class="bound" x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black" stroke-dasharray="4,3"/>"#,
                y0 + PANEL_H
            );
        }
        for v in &pts {
            if let Some(phi) = v.phi {
                let _ = writeln!(
                    s,
                    r#"<circle class="mark" cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.7"/>"#,
                    sx(phi),
                    sy(v.k_radius),
                    layer_color(v.layer, n_layers)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    out.write_all(s.as_bytes())?;
    Ok(())
}

const CELL: f64 = 8.0;

/// Layer-by-dim magnitude grid. For the sliced layout a dashed line
/// separates the two halves of the rotary pairs and another separates rotary
/// from non-rotary dims; for the interleaved layout only the rotary boundary
/// is drawn.
pub fn emit_heatmap<W: Write>(matrix: &MagnitudeMatrix, config: &RopeConfig, mut out: W) -> Result<()> {
    if matrix.values.is_empty() || matrix.n_layers == 0 {
        return Err(Error::OutOfRange("heatmap needs a non-empty matrix".into()));
    }
    if matrix.head_dim != config.head_dim {
        return Err(Error::Shape(format!(
            "matrix has {} dims, config head_dim is {}",
            matrix.head_dim, config.head_dim
        )));
    }
    let max = matrix.max_value();
    let (w, h) = (matrix.head_dim as f64 * CELL, matrix.n_layers as f64 * CELL);
    let (width, height) = (w + 2.0 * MARGIN, h + 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.1}">{:?} {:?}, max {max:.4}</text>"#,
        MARGIN - 8.0,
        matrix.side,
        matrix.reducer
    );
    for layer in 0..matrix.n_layers {
        for (dim, v) in matrix.row(layer).iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                MARGIN + dim as f64 * CELL,
                MARGIN + layer as f64 * CELL,
                heat_color(t)
            );
        }
    }
    let r = config.rotary_dim;
    let mut sep = |class: &str, after_dim: usize, color: &str| {
        let x = MARGIN + after_dim as f64 * CELL;
        let _ = writeln!(
            s,
            r#"<line class="{class}" x1="{x:.1}" y1="{MARGIN}" x2="{x:.1}" y2="{:.1}" stroke="{color}" stroke-width="1.5" stroke-dasharray="4,3"/>"#,
            MARGIN + h
        );
    };
    match config.layout {
        Layout::SlicedFirst => {
            sep("sep-half", r / 2, "white");
            if r < config.head_dim {
                sep("sep-rotary", r, "red");
            }
        }
        Layout::InterleavedLast => {
            if r < config.head_dim {
                sep("sep-rotary", config.head_dim - r, "red");
            }
        }
    }
    let _ = writeln!(s, "</svg>");
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Attention weights as a heatmap, block-averaged down to at most
/// `max_cells` cells per side.
pub fn emit_attention_svg<W: Write>(attn: &AttentionMatrix, max_cells: usize, mut out: W) -> Result<()> {
    if attn.size == 0 {
        return Err(Error::OutOfRange("empty attention matrix".into()));
    }
    let block = attn.size.div_ceil(max_cells.max(1));
    let cells = attn.size.div_ceil(block);
    let mut grid = vec![0.0; cells * cells];
    for m in 0..attn.size {
        for n in 0..=m {
            grid[(m / block) * cells + n / block] += attn.weight(m, n);
        }
    }
    let norm = (block * block) as f64;
    grid.iter_mut().for_each(|g| *g /= norm);
    let max = grid.iter().copied().fold(0.0, f64::max);
    let cell = (512.0 / cells as f64).clamp(1.0, CELL);
    let side = cells as f64 * cell + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..cells {
        for j in 0..=i {
            let v = grid[i * cells + j];
            if v <= 0.0 {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#,
                MARGIN + j as f64 * cell,
                MARGIN + i as f64 * cell,
                heat_color((v / max).sqrt())
            );
        }
    }
    let _ = writeln!(s, "</svg>");
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{Reducer, Side};
    use std::f64::consts::PI;

    fn verdict(pair: usize, phi: f64, k_radius: f64) -> OffsetVerdict {
        OffsetVerdict {
            layer: 0,
            q_head: 0,
            pair,
            theta: 1.0,
            eligible: false,
            lower_bound: 0.0,
            is_rof_discrete: false,
            is_rof_continuous: false,
            phi: Some(phi),
            q_radius: 1.0,
            k_radius,
        }
    }

    fn panel(svg: &str, pair: usize) -> &str {
        let start = svg.find(&format!(r#"id="panel-{pair}""#)).unwrap();
        let end = start + svg[start..].find("</g>").unwrap();
        &svg[start..end]
    }

    fn render_scatter(vs: &[OffsetVerdict], c: &RopeConfig) -> String {
        let mut buf = Vec::new();
        emit_scatter(vs, c, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn scatter_single_point() {
        let c = RopeConfig::phi1();
        let svg = render_scatter(&[verdict(3, PI, 1.0)], &c);
        let p = panel(&svg, 3);
        assert_eq!(p.matches(r#"class="mark""#).count(), 1);
        assert!(p.contains(r#"data-y-max="1.05""#));
        assert!(p.contains(&format!(r#"data-x-max="{TAU}""#)));
        assert_eq!(svg.matches(r#"class="panel""#).count(), 16);
    }

    #[test]
    fn scatter_bound_lines_only_on_eligible_panels() {
        let c = RopeConfig::phi1();
        let svg = render_scatter(&[verdict(10, 4.0, 2.0), verdict(12, 4.5, 3.0)], &c);
        assert!(!panel(&svg, 10).contains(r#"class="bound""#));
        assert!(panel(&svg, 12).contains(r#"class="bound""#));
        assert_eq!(svg.matches(r#"class="bound""#).count(), 5);
        assert!(emit_scatter(&[], &c, Vec::new()).is_err());
    }

    fn matrix(n_layers: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> MagnitudeMatrix {
        MagnitudeMatrix {
            side: Side::Key,
            reducer: Reducer::MaxAbs,
            n_layers,
            head_dim: d,
            values: (0..n_layers * d).map(|i| f(i / d, i % d)).collect(),
        }
    }

    fn render_heatmap(m: &MagnitudeMatrix, c: &RopeConfig) -> String {
        let mut buf = Vec::new();
        emit_heatmap(m, c, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn heatmap_separators() {
        let c = RopeConfig::new(10000.0, 8, 4, 64).unwrap();
        let svg = render_heatmap(&matrix(3, 8, |_, _| 0.0), &c);
        assert_eq!(svg.matches(r#"class="cell""#).count(), 24);
        let fills: std::collections::BTreeSet<&str> = svg
            .match_indices(r#"class="cell""#)
            .map(|(i, _)| {
                let f = &svg[i..];
                let a = f.find("fill=\"").unwrap() + 6;
                &f[a..a + f[a..].find('"').unwrap()]
            })
            .collect();
        assert_eq!(fills.len(), 1);
        assert!(svg.contains(r#"class="sep-half""#));
        assert!(svg.contains(r#"class="sep-rotary""#));

        let full = RopeConfig::new(10000.0, 8, 8, 64).unwrap();
        let svg = render_heatmap(&matrix(3, 8, |_, _| 1.0), &full);
        assert!(!svg.contains("sep-rotary"));
        assert!(svg.contains("sep-half"));
    }

    #[test]
    fn heatmap_bands_follow_dominant_pair() {
        let c = RopeConfig::new(10000.0, 8, 8, 64).unwrap();
        let svg = render_heatmap(&matrix(2, 8, |_, d| if d == 1 || d == 5 { 10.0 } else { 1.0 }), &c);
        let dark = heat_color(1.0);
        let xs: Vec<&str> = svg
            .lines()
            .filter(|l| l.contains(r#"class="cell""#) && l.contains(&dark))
            .map(|l| {
                let a = l.find("x=\"").unwrap() + 3;
                &l[a..a + l[a..].find('"').unwrap()]
            })
            .collect();
        let expect_1 = format!("{:.1}", MARGIN + CELL);
        let expect_5 = format!("{:.1}", MARGIN + 5.0 * CELL);
        assert_eq!(xs.len(), 4);
        assert!(xs.iter().all(|x| *x == expect_1 || *x == expect_5));
    }

    #[test]
    fn recall_csv_header_and_sentinel() {
        let rows = vec![RecallRow { min_radius: 6.0, positives: 0, ub_recall: None, lb_recall: None, lb_relaxed_recall: None }];
        let mut buf = Vec::new();
        write_recall_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "min_radius,positives,ub_recall,lb_recall,lb_relaxed_recall\n6,0,,,\n"
        );
    }

    #[test]
    fn bounds_text_lists_phi1_pairs() {
        let c = RopeConfig::phi1();
        let b = crate::offset::bounds_table(&c).unwrap();
        let s = crate::offset::summary(&c).unwrap();
        let text = format_bounds(&c, &b, &s);
        assert!(text.contains("eligible pairs: 11,12,13,14,15"));
        assert!(text.contains("%ROF: 31.25% (5/16)"));
        assert!(text.contains("Mean LB: 3.9269"));
    }
}
