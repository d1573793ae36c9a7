//! Calibration and evaluation over a score table.
//!
//! Positives are the annotated utterances; the negatives that define false
//! accepts are the stub candidates on the negative timeline. Detection
//! quality is compared at a fixed false-accept budget, which equals a
//! hours-per-FA target of `timeline_hours / fa_budget`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decision::{
    calibrate_threshold, calibrate_two_stage, decisions_csv, run_policy, LateTarget, PolicyReport, ScorePair,
    ScoredDecision, Thresholds,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    composite_curve, det_curve, emit_reports, frr_at_fa_count, frr_at_operating_point, two_stage_accepts,
    two_stage_det, DetCurve, LatencyBar, ReportInputs,
};
use crate::scorer::{Origin, ScoreTable};
use crate::synthgen::Label;
use crate::util::fmt_sig9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub contexts: Vec<f64>,
    pub early_context: f64,
    pub late_context: f64,
    pub early_frr: f64,
    pub late_frr: f64,
    pub late_target: LateTarget,
    /// False accepts allowed on the timeline at the operating point.
    pub fa_budget: usize,
    /// Early FRR targets for the two-stage superset sweep.
    pub early_frr_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            contexts: vec![0.3, 0.5, 1.0, 1.5, 2.0],
            early_context: 0.3,
            late_context: 2.0,
            early_frr: 0.03,
            late_frr: 0.01,
            late_target: LateTarget::AllPositives,
            fa_budget: 50,
            early_frr_grid: vec![0.0, 0.01, 0.03, 0.05, 0.1, 0.2],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("eval: {m}")));
        if self.contexts.iter().any(|c| !(*c >= 0.0)) {
            return bad("contexts must be >= 0".into());
        }
        for (name, v) in [("early_frr", self.early_frr), ("late_frr", self.late_frr)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} not in [0, 1)"));
            }
        }
        if !(self.early_context >= 0.0 && self.late_context >= self.early_context) {
            return bad("need 0 <= early_context <= late_context".into());
        }
        Ok(())
    }

    /// Every context that has to be scored: the grid plus early and late.
    pub fn all_contexts(&self) -> Vec<f64> {
        let mut v = self.contexts.clone();
        for c in [self.early_context, self.late_context] {
            if !v.contains(&c) {
                v.push(c);
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextResult {
    pub context: f64,
    pub frr_at_fa_budget: Option<f64>,
    pub frr_at_hours_per_fa_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageComparison {
    pub two_stage_frr: f64,
    pub two_stage_fa_count: usize,
    /// Early-only FRR at the smallest threshold with at most
    /// `two_stage_fa_count` FAs.
    pub early_only_frr: Option<f64>,
    /// `1 - two_stage / early_only`; absent when early-only FRR is 0 or
    /// unreachable.
    pub relative_reduction: Option<f64>,
    /// Two-stage FRR at the FA budget with `T_e` fixed.
    pub two_stage_frr_at_fa_budget: Option<f64>,
    pub early_only_frr_at_fa_budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupersetCheck {
    pub threshold_pairs: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub timeline_hours: f64,
    pub fa_budget: usize,
    pub hours_per_fa_target: f64,
    pub n_positive: usize,
    pub n_timeline_candidates: usize,
    pub contexts: Vec<ContextResult>,
    pub thresholds: Thresholds,
    pub policy: PolicyReport,
    pub comparison: TwoStageComparison,
    pub superset: SupersetCheck,
    #[serde(skip)]
    pub curves: Vec<DetCurve>,
    #[serde(skip)]
    pub pairs: Vec<ScorePair>,
    #[serde(skip)]
    pub decisions: Vec<ScoredDecision>,
    #[serde(skip)]
    pub latency: Vec<LatencyBar>,
}

fn to_pairs(table: &ScoreTable, cfg: &EvalConfig, keep: impl Fn(Label, Origin) -> bool) -> Result<Vec<ScorePair>> {
    Ok(table
        .pairs(cfg.early_context, cfg.late_context)?
        .into_iter()
        .filter(|(_, l, o, _, _)| keep(*l, *o))
        .map(|(id, label, _, early, late)| ScorePair {
            id,
            positive: label == Label::Positive,
            early,
            late,
        })
        .collect())
}

pub fn evaluate(table: &ScoreTable, timeline_hours: f64, cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    if !(timeline_hours > 0.0) {
        return Err(Error::EmptyDataset("evaluation needs a negative timeline".into()));
    }
    let target_hours = timeline_hours / cfg.fa_budget.max(1) as f64;
    let is_pos = |l: Label, o: Origin| l == Label::Positive && o == Origin::Utterance;
    let is_neg = |l: Label, o: Origin| l == Label::Negative && o == Origin::Timeline;

    let mut curves = Vec::new();
    let mut contexts = Vec::new();
    for &c in &cfg.contexts {
        let pos = table.scores_at(c, Label::Positive, Some(Origin::Utterance))?;
        let neg = table.scores_at(c, Label::Negative, Some(Origin::Timeline))?;
        let curve = det_curve(&pos, &neg, timeline_hours, &fmt_sig9(c))?;
        contexts.push(ContextResult {
            context: c,
            frr_at_fa_budget: frr_at_fa_count(&curve, cfg.fa_budget),
            frr_at_hours_per_fa_target: frr_at_operating_point(&curve, target_hours),
        });
        curves.push(curve);
    }

    let pos_pairs = to_pairs(table, cfg, is_pos)?;
    let neg_pairs = to_pairs(table, cfg, is_neg)?;
    if neg_pairs.is_empty() {
        return Err(Error::EmptyDataset("no timeline candidates were scored".into()));
    }
    let thresholds = calibrate_two_stage(
        &pos_pairs,
        cfg.early_frr,
        cfg.late_frr,
        cfg.late_target,
        cfg.early_context,
        cfg.late_context,
    )?;
    let (policy, decisions) = run_policy(&pos_pairs, &neg_pairs, timeline_hours, &thresholds)?;

    let early_pos: Vec<f64> = pos_pairs.iter().map(|p| p.early).collect();
    let early_neg: Vec<f64> = neg_pairs.iter().map(|p| p.early).collect();
    let early_curve = det_curve(&early_pos, &early_neg, timeline_hours, "early-only")?;
    let two_stage = two_stage_det(&pos_pairs, &neg_pairs, timeline_hours, thresholds.early_accept, "two-stage")?;
    let early_only_frr = frr_at_fa_count(&early_curve, policy.fa_count);
    let comparison = TwoStageComparison {
        two_stage_frr: policy.frr,
        two_stage_fa_count: policy.fa_count,
        early_only_frr,
        relative_reduction: early_only_frr.filter(|&e| e > 0.0).map(|e| 1.0 - policy.frr / e),
        two_stage_frr_at_fa_budget: frr_at_fa_count(&two_stage, cfg.fa_budget),
        early_only_frr_at_fa_budget: frr_at_fa_count(&early_curve, cfg.fa_budget),
    };
    curves.push(composite_curve(&early_curve, &two_stage, thresholds.early_accept));

    let superset = superset_check(&pos_pairs, &neg_pairs, &cfg.early_frr_grid, &thresholds)?;

    let mut latency: Vec<LatencyBar> = cfg
        .contexts
        .iter()
        .zip(&contexts)
        .map(|(&c, r)| LatencyBar {
            system: format!("{}s", fmt_sig9(c)),
            latency_s: c,
            frr: r.frr_at_fa_budget,
        })
        .collect();
    if let Some(m) = policy.mean_latency_s {
        latency.push(LatencyBar {
            system: "two-stage".into(),
            latency_s: m,
            frr: Some(policy.frr),
        });
    }

    let mut pairs = pos_pairs;
    pairs.extend(neg_pairs);
    Ok(Evaluation {
        timeline_hours,
        fa_budget: cfg.fa_budget,
        hours_per_fa_target: target_hours,
        n_positive: policy.n_positive,
        n_timeline_candidates: policy.n_negative,
        contexts,
        thresholds,
        policy,
        comparison,
        superset,
        curves,
        pairs,
        decisions,
        latency,
    })
}

/// Checks `accepted(T_e, T_l) ⊇ accepted_early(T_e)` for every `T_e` from
/// the grid and the calibrated one, against every observed late score.
fn superset_check(pos: &[ScorePair], neg: &[ScorePair], grid: &[f64], th: &Thresholds) -> Result<SupersetCheck> {
    let all: Vec<ScorePair> = pos.iter().chain(neg).cloned().collect();
    let early: Vec<f64> = pos.iter().map(|p| p.early).collect();
    let mut t_es = vec![th.early_accept];
    for &target in grid {
        t_es.push(calibrate_threshold(&early, target)?);
    }
    let mut t_ls: Vec<f64> = all.iter().map(|p| p.late).collect();
    t_ls.extend([0.0, th.late_accept, crate::decision::ABOVE_ONE]);
    t_ls.sort_by(f64::total_cmp);
    t_ls.dedup();
    let mut violations = 0;
    let mut count = 0;
    for &t_e in &t_es {
        let early_only: Vec<bool> = all.iter().map(|p| p.early >= t_e).collect();
        for &t_l in &t_ls {
            count += 1;
            let two = two_stage_accepts(&all, t_e, t_l);
            if early_only.iter().zip(&two).any(|(&e, &t)| e && !t) {
                violations += 1;
            }
        }
    }
    Ok(SupersetCheck {
        threshold_pairs: count,
        violations,
    })
}

/// Write thresholds, policy report, evaluation summary, decisions and
/// figures under `out_dir`. Returns the files written and any warnings.
pub fn write_evaluation(eval: &Evaluation, out_dir: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    put("thresholds.json", to_json(&eval.thresholds)?)?;
    put("policy_report.json", to_json(&eval.policy)?)?;
    put("evaluation.json", to_json(eval)?)?;
    put("decisions.csv", decisions_csv(&eval.decisions))?;
    let emitted = emit_reports(
        &ReportInputs {
            curves: &eval.curves,
            pairs: &eval.pairs,
            latency: &eval.latency,
            thresholds: Some((eval.thresholds.early_accept, eval.thresholds.late_accept)),
        },
        &out_dir.join("figures"),
    )?;
    files.extend(emitted.files);
    Ok((files, emitted.warnings))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(format!("serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ScoredCandidate;

    fn table() -> ScoreTable {
        let mut rows = Vec::new();
        for i in 0..100 {
            let x = i as f64 / 100.0;
            rows.push(ScoredCandidate {
                key: format!("pos-{i:05}"),
                label: Label::Positive,
                origin: Origin::Utterance,
                scores: vec![0.5 + 0.5 * x, 0.6 + 0.4 * x, 0.7 + 0.3 * x, 0.8 + 0.2 * x, 0.9 + 0.1 * x],
            });
            rows.push(ScoredCandidate {
                key: format!("timeline-000@{i}.000"),
                label: Label::Negative,
                origin: Origin::Timeline,
                scores: vec![0.9 * x, 0.8 * x, 0.7 * x, 0.6 * x, 0.5 * x],
            });
        }
        ScoreTable {
            contexts: vec![0.3, 0.5, 1.0, 1.5, 2.0],
            rows,
        }
    }

    #[test]
    fn synthetic_table_evaluates() {
        let cfg = EvalConfig {
            fa_budget: 5,
            ..EvalConfig::default()
        };
        let eval = evaluate(&table(), 1.0, &cfg).unwrap();
        assert_eq!(eval.n_positive, 100);
        assert_eq!(eval.n_timeline_candidates, 100);
        let frr: Vec<f64> = eval.contexts.iter().map(|c| c.frr_at_fa_budget.unwrap()).collect();
        assert!(frr.windows(2).all(|w| w[1] <= w[0]), "{frr:?}");
        assert_eq!(eval.superset.violations, 0);
        assert!(eval.policy.defer_fraction <= 0.03 + 1e-12);
        assert!(eval.policy.frr <= 0.01 + 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let (files, warnings) = write_evaluation(&eval, dir.path()).unwrap();
        assert!(warnings.is_empty());
        assert!(files.iter().any(|f| f.ends_with("policy_report.json")));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("policy_report.json")).unwrap()).unwrap();
        assert!(report.get("mean_latency_s").is_some());
    }

    #[test]
    fn missing_timeline_is_an_error() {
        assert!(evaluate(&table(), 0.0, &EvalConfig::default()).is_err());
    }
}
