//! DET curves and report files.
//!
//! CSV schemas written by [`emit_reports`]:
//!
//! * `det_<label>.csv`: `threshold,frr,fa_count,hours_per_fa`
//! * `scatter.csv`: `utterance_id,label,early,late`
//! * `latency.csv`: `system,latency_s,frr`
//!
//! Floats use nine significant digits; infinite hours/FA is written `inf`
//! and a missing FRR is left empty.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::decision::{hours_per_fa, ScorePair, ABOVE_ONE};
use crate::error::{Error, Result};
use crate::util::fmt_sig9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub frr: f64,
    pub fa_count: usize,
    pub hours_per_fa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub label: String,
    pub points: Vec<DetPoint>,
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset(format!("no {what} scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config(format!("non-finite {what} score")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact DET curve over every observed score: `frr = P(pos < θ)`,
/// `fa = #(neg ≥ θ)`.
pub fn det_curve(pos: &[f64], neg: &[f64], timeline_hours: f64, label: &str) -> Result<DetCurve> {
    check_scores(pos, "positive")?;
    check_scores(neg, "negative")?;
    if !(timeline_hours > 0.0) {
        return Err(Error::Config(format!("timeline_hours must be > 0, got {timeline_hours}")));
    }
    let (sp, sn) = (sorted(pos), sorted(neg));
    let mut grid: Vec<f64> = sp.iter().chain(&sn).cloned().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = grid
        .into_iter()
        .map(|theta| {
            let fa = sn.len() - sn.partition_point(|&s| s < theta);
            DetPoint {
                threshold: theta,
                frr: sp.partition_point(|&s| s < theta) as f64 / sp.len() as f64,
                fa_count: fa,
                hours_per_fa: hours_per_fa(timeline_hours, fa),
            }
        })
        .collect();
    Ok(DetCurve {
        label: label.to_string(),
        points,
    })
}

/// FRR at the smallest threshold whose hours/FA reaches the target.
/// Step convention, no interpolation. `None` when unreachable.
pub fn frr_at_operating_point(curve: &DetCurve, hours_per_fa_target: f64) -> Option<f64> {
    curve.points.iter().find(|p| p.hours_per_fa >= hours_per_fa_target).map(|p| p.frr)
}

/// FRR at the smallest threshold with at most `max_fa` false accepts.
pub fn frr_at_fa_count(curve: &DetCurve, max_fa: usize) -> Option<f64> {
    curve.points.iter().find(|p| p.fa_count <= max_fa).map(|p| p.frr)
}

/// Accepted flag of every pair under the two-stage policy.
pub fn two_stage_accepts(pairs: &[ScorePair], t_e: f64, t_l: f64) -> Vec<bool> {
    pairs.iter().map(|p| p.early >= t_e || p.late >= t_l).collect()
}

/// Two-stage DET with `T_e` fixed, sweeping `T_l` over the observed late
/// scores, 0 and a value above one. Point thresholds are `T_l`.
pub fn two_stage_det(pos: &[ScorePair], neg: &[ScorePair], timeline_hours: f64, t_e: f64, label: &str) -> Result<DetCurve> {
    check_scores(&pos.iter().map(|p| p.early).collect::<Vec<_>>(), "positive")?;
    check_scores(&neg.iter().map(|p| p.early).collect::<Vec<_>>(), "negative")?;
    if !(timeline_hours > 0.0) {
        return Err(Error::Config(format!("timeline_hours must be > 0, got {timeline_hours}")));
    }
    // Deferred candidates only; early accepts are counted once.
    let split = |v: &[ScorePair]| -> (usize, Vec<f64>) {
        let early = v.iter().filter(|p| p.early >= t_e).count();
        let deferred = sorted(&v.iter().filter(|p| p.early < t_e).map(|p| p.late).collect::<Vec<_>>());
        (early, deferred)
    };
    let (pos_early, pos_def) = split(pos);
    let (neg_early, neg_def) = split(neg);
    let mut grid: Vec<f64> = pos.iter().chain(neg).map(|p| p.late).collect();
    grid.extend([0.0, ABOVE_ONE]);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = grid
        .into_iter()
        .map(|t_l| {
            let pos_rej = pos_def.partition_point(|&s| s < t_l);
            let fa = neg_early + neg_def.len() - neg_def.partition_point(|&s| s < t_l);
            debug_assert!(pos_early + pos_def.len() == pos.len());
            DetPoint {
                threshold: t_l,
                frr: pos_rej as f64 / pos.len() as f64,
                fa_count: fa,
                hours_per_fa: hours_per_fa(timeline_hours, fa),
            }
        })
        .collect();
    Ok(DetCurve {
        label: label.to_string(),
        points,
    })
}

/// One two-stage curve per early FRR target, `T_e` calibrated on the
/// positives' early scores.
pub fn two_stage_det_grid(
    pos: &[ScorePair],
    neg: &[ScorePair],
    timeline_hours: f64,
    early_frr_grid: &[f64],
) -> Result<Vec<(f64, DetCurve)>> {
    let early: Vec<f64> = pos.iter().map(|p| p.early).collect();
    early_frr_grid
        .iter()
        .map(|&target| {
            let t_e = crate::decision::calibrate_threshold(&early, target)?;
            let curve = two_stage_det(pos, neg, timeline_hours, t_e, &format!("two-stage-{}", fmt_sig9(target)))?;
            Ok((t_e, curve))
        })
        .collect()
}

/// Figure curve that follows the early-only curve up to `T_e` and the
/// two-stage sweep beyond it, ordered by decreasing FA count.
pub fn composite_curve(early: &DetCurve, two_stage: &DetCurve, t_e: f64) -> DetCurve {
    let mut points: Vec<DetPoint> = early.points.iter().filter(|p| p.threshold < t_e).cloned().collect();
    points.extend(two_stage.points.iter().cloned());
    points.sort_by(|a, b| b.fa_count.cmp(&a.fa_count).then(a.frr.total_cmp(&b.frr)));
    DetCurve {
        label: two_stage.label.clone(),
        points,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyBar {
    pub system: String,
    pub latency_s: f64,
    pub frr: Option<f64>,
}

pub struct ReportInputs<'a> {
    pub curves: &'a [DetCurve],
    pub pairs: &'a [ScorePair],
    pub latency: &'a [LatencyBar],
    /// Threshold pair drawn on the scatter plot.
    pub thresholds: Option<(f64, f64)>,
}

fn fmt_hours(h: f64) -> String {
    if h.is_infinite() {
        "inf".into()
    } else {
        fmt_sig9(h)
    }
}

pub fn det_csv(curve: &DetCurve) -> String {
    let mut out = String::from("threshold,frr,fa_count,hours_per_fa\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_sig9(p.threshold),
            fmt_sig9(p.frr),
            p.fa_count,
            fmt_hours(p.hours_per_fa)
        );
    }
    out
}

pub fn scatter_csv(pairs: &[ScorePair]) -> String {
    let mut out = String::from("utterance_id,label,early,late\n");
    for p in pairs {
        let label = if p.positive { "positive" } else { "negative" };
        let _ = writeln!(out, "{},{label},{},{}", p.id, fmt_sig9(p.early), fmt_sig9(p.late));
    }
    out
}

pub fn latency_csv(bars: &[LatencyBar]) -> String {
    let mut out = String::from("system,latency_s,frr\n");
    for b in bars {
        let frr = b.frr.map(fmt_sig9).unwrap_or_default();
        let _ = writeln!(out, "{},{},{frr}", b.system, fmt_sig9(b.latency_s));
    }
    out
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmittedReports {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write(out: &mut EmittedReports, path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    out.files.push(path);
    Ok(())
}

/// Write CSVs and SVG figures into `out_dir`.
pub fn emit_reports(inputs: &ReportInputs, out_dir: &Path) -> Result<EmittedReports> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = EmittedReports::default();
    if inputs.curves.is_empty() {
        out.warnings.push("no DET curves to write".into());
    } else {
        for c in inputs.curves {
            write(&mut out, out_dir.join(format!("det_{}.csv", file_label(&c.label))), &det_csv(c))?;
        }
        write(&mut out, out_dir.join("det.svg"), &svg::det_plot(inputs.curves))?;
    }
    write(&mut out, out_dir.join("scatter.csv"), &scatter_csv(inputs.pairs))?;
    write(&mut out, out_dir.join("scatter.svg"), &svg::scatter_plot(inputs.pairs, inputs.thresholds))?;
    write(&mut out, out_dir.join("latency.csv"), &latency_csv(inputs.latency))?;
    write(&mut out, out_dir.join("latency.svg"), &svg::latency_plot(inputs.latency))?;
    Ok(out)
}

mod svg {
    use super::{DetCurve, LatencyBar, ScorePair};
    use std::fmt::Write as _;

    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 170.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];

    fn esc(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    struct Frame {
        body: String,
    }

    impl Frame {
        fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
            let mut body = String::new();
            let _ = writeln!(
                body,
                r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
            );
            let _ = writeln!(body, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
            let _ = writeln!(
                body,
                r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
                (LEFT + W - RIGHT) / 2.0,
                esc(title)
            );
            let _ = writeln!(
                body,
                r#"<rect x="{LEFT}" y="{TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
                W - LEFT - RIGHT,
                H - TOP - BOTTOM
            );
            let _ = writeln!(
                body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                (LEFT + W - RIGHT) / 2.0,
                H - 15.0,
                esc(xlabel)
            );
            let _ = writeln!(
                body,
                r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
                (TOP + H - BOTTOM) / 2.0,
                (TOP + H - BOTTOM) / 2.0,
                esc(ylabel)
            );
            Frame { body }
        }

        fn px(fx: f64) -> f64 {
            LEFT + fx.clamp(0.0, 1.0) * (W - LEFT - RIGHT)
        }

        fn py(fy: f64) -> f64 {
            H - BOTTOM - fy.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
        }

        fn xtick(&mut self, fx: f64, label: &str) {
            let x = Self::px(fx);
            let _ = writeln!(
                self.body,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{TOP}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                H - BOTTOM,
                H - BOTTOM + 16.0,
                esc(label)
            );
        }

        fn ytick(&mut self, fy: f64, label: &str) {
            let y = Self::py(fy);
            let _ = writeln!(
                self.body,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 6.0,
                y + 4.0,
                esc(label)
            );
        }

        fn legend(&mut self, i: usize, color: &str, label: &str) {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                y - 9.0,
                x + 18.0,
                y + 1.0,
                esc(label)
            );
        }

        fn finish(mut self) -> String {
            self.body.push_str("</svg>\n");
            self.body
        }
    }

    /// FRR against log-scaled hours/FA. Points without FAs are drawn at the
    /// right edge.
    pub fn det_plot(curves: &[DetCurve]) -> String {
        let finite = curves
            .iter()
            .flat_map(|c| &c.points)
            .map(|p| p.hours_per_fa)
            .filter(|h| h.is_finite() && *h > 0.0);
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), h| (a.min(h), b.max(h)));
        if !lo.is_finite() {
            lo = 0.1;
            hi = 10.0;
        }
        let (d0, mut d1) = (lo.log10().floor(), hi.log10().ceil());
        if d1 <= d0 {
            d1 = d0 + 1.0;
        }
        let max_frr = curves
            .iter()
            .flat_map(|c| &c.points)
            .map(|p| p.frr)
            .fold(0.0f64, f64::max)
            .max(0.01);
        let ymax = (max_frr * 10.0).ceil() / 10.0;
        let fx = |h: f64| if h.is_infinite() { 1.0 } else { (h.log10() - d0) / (d1 - d0) };
        let mut f = Frame::new("DET", "hours per false accept", "false reject rate");
        for d in (d0 as i32)..=(d1 as i32) {
            f.xtick((d as f64 - d0) / (d1 - d0), &format!("1e{d}"));
        }
        for k in 0..=5 {
            let v = ymax * k as f64 / 5.0;
            f.ytick(v / ymax, &format!("{v:.2}"));
        }
        for (i, c) in curves.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut path = String::new();
            for p in &c.points {
                let sep = if path.is_empty() { "" } else { " " };
                let _ = write!(path, "{sep}{:.2},{:.2}", Frame::px(fx(p.hours_per_fa)), Frame::py(p.frr / ymax));
            }
            let _ = writeln!(f.body, r#"<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
            f.legend(i, color, &c.label);
        }
        f.finish()
    }

    pub fn scatter_plot(pairs: &[ScorePair], thresholds: Option<(f64, f64)>) -> String {
        let mut f = Frame::new("early vs late scores", "early score", "late score");
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            f.xtick(v, &format!("{v:.1}"));
            f.ytick(v, &format!("{v:.1}"));
        }
        for p in pairs {
            let color = if p.positive { "#1f77b4" } else { "#d62728" };
            let _ = writeln!(
                f.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
                Frame::px(p.early),
                Frame::py(p.late)
            );
        }
        if let Some((t_e, t_l)) = thresholds {
            let x = Frame::px(t_e);
            let y = Frame::py(t_l);
            let _ = writeln!(
                f.body,
                r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="black"/><line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-dasharray="4 3"/>"#,
                H - BOTTOM,
                W - RIGHT
            );
        }
        f.legend(0, "#1f77b4", "positive");
        f.legend(1, "#d62728", "negative");
        f.finish()
    }

    pub fn latency_plot(bars: &[LatencyBar]) -> String {
        let mut f = Frame::new("latency", "system", "latency (s)");
        let max = bars.iter().map(|b| b.latency_s).fold(0.0f64, f64::max).max(0.1);
        let ymax = (max * 2.0).ceil() / 2.0;
        for k in 0..=5 {
            let v = ymax * k as f64 / 5.0;
            f.ytick(v / ymax, &format!("{v:.2}"));
        }
        let n = bars.len().max(1) as f64;
        let slot = (W - LEFT - RIGHT) / n;
        for (i, b) in bars.iter().enumerate() {
            let x = LEFT + slot * (i as f64 + 0.2);
            let y = Frame::py(b.latency_s / ymax);
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(
                f.body,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                slot * 0.6,
                H - BOTTOM - y
            );
            let label = match b.frr {
                Some(frr) => format!("{} (FRR {:.3})", b.system, frr),
                None => b.system.clone(),
            };
            f.legend(i, color, &label);
        }
        f.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_score_example() {
        let c = det_curve(&[0.9, 0.8], &[0.1], 1.0, "x").unwrap();
        let thetas: Vec<f64> = c.points.iter().map(|p| p.threshold).collect();
        assert_eq!(thetas, vec![0.1, 0.8, 0.9]);
        // θ = 0.5 falls between 0.1 and 0.8: same counts as θ = 0.8.
        let p = c.points[1];
        assert_eq!((p.frr, p.fa_count), (0.0, 0));
        assert!(p.hours_per_fa.is_infinite());
    }

    #[test]
    fn separated_scores_reach_zero_zero() {
        let c = det_curve(&[0.6, 0.7, 0.9], &[0.1, 0.2, 0.5], 2.0, "x").unwrap();
        assert!(c.points.iter().any(|p| p.frr == 0.0 && p.fa_count == 0));
    }

    #[test]
    fn empty_inputs_error() {
        assert!(det_curve(&[], &[0.1], 1.0, "x").is_err());
        assert!(det_curve(&[0.1], &[], 1.0, "x").is_err());
        assert!(det_curve(&[0.1], &[0.2], 0.0, "x").is_err());
    }

    #[test]
    fn operating_points() {
        let c = det_curve(&[0.2, 0.6, 0.9], &[0.1, 0.5, 0.7], 100.0, "x").unwrap();
        // θ = 0.6 is the first with one FA (100 h/FA); FRR 1/3.
        assert_eq!(frr_at_operating_point(&c, 100.0), Some(1.0 / 3.0));
        assert_eq!(frr_at_fa_count(&c, 1), Some(1.0 / 3.0));
        assert_eq!(frr_at_fa_count(&c, 0), Some(2.0 / 3.0));
        let perfect = det_curve(&[0.9], &[0.1], 100.0, "x").unwrap();
        assert_eq!(frr_at_operating_point(&perfect, 100.0), Some(0.0));
        let hopeless = det_curve(&[0.1], &[0.9, 0.95], 1.0, "x").unwrap();
        assert_eq!(frr_at_operating_point(&hopeless, 100.0), None);
    }

    fn pair(id: &str, positive: bool, early: f64, late: f64) -> ScorePair {
        ScorePair {
            id: id.into(),
            positive,
            early,
            late,
        }
    }

    #[test]
    fn above_one_early_threshold_gives_late_only_curve() {
        let pos = vec![pair("a", true, 0.2, 0.9), pair("b", true, 0.8, 0.4)];
        let neg = vec![pair("c", false, 0.7, 0.3), pair("d", false, 0.1, 0.5)];
        let two = two_stage_det(&pos, &neg, 1.0, ABOVE_ONE, "t").unwrap();
        let late = det_curve(&[0.9, 0.4], &[0.3, 0.5], 1.0, "l").unwrap();
        let inner: Vec<DetPoint> = two
            .points
            .iter()
            .filter(|p| p.threshold > 0.0 && p.threshold < ABOVE_ONE)
            .cloned()
            .collect();
        assert_eq!(inner, late.points);
    }

    #[test]
    fn reports_are_deterministic_and_parse() {
        let curves = vec![det_curve(&[0.9, 0.8], &[0.1, 0.85], 2.0, "0.3").unwrap()];
        let pairs = vec![pair("a", true, 0.9, 0.95), pair("b", false, 0.1, 0.2)];
        let bars = vec![LatencyBar {
            system: "two-stage".into(),
            latency_s: 0.351,
            frr: Some(0.01),
        }];
        let inputs = ReportInputs {
            curves: &curves,
            pairs: &pairs,
            latency: &bars,
            thresholds: Some((0.5, 0.4)),
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = emit_reports(&inputs, a.path()).unwrap();
        emit_reports(&inputs, b.path()).unwrap();
        for f in &ra.files {
            let name = f.file_name().unwrap();
            let x = fs::read(f).unwrap();
            assert_eq!(x, fs::read(b.path().join(name)).unwrap());
            if name.to_string_lossy().ends_with(".svg") {
                roxmltree::Document::parse(std::str::from_utf8(&x).unwrap()).unwrap();
            }
        }
        let scatter = fs::read_to_string(a.path().join("scatter.csv")).unwrap();
        assert_eq!(scatter.lines().count(), 1 + pairs.len());
    }

    #[test]
    fn no_curves_warns() {
        let dir = tempfile::tempdir().unwrap();
        let r = emit_reports(
            &ReportInputs {
                curves: &[],
                pairs: &[],
                latency: &[],
                thresholds: None,
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(!dir.path().join("det.svg").exists());
    }
}
