//! Two-stage accept/defer/reject policy.
//!
//! A candidate whose early score reaches `T_e` is accepted at the early
//! context. Otherwise its late score is requested and compared with `T_l`.
//! All comparisons accept on equality.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::util::fmt_sig9;

/// Smallest grid value above every posterior.
pub const ABOVE_ONE: f64 = 1.0 + f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub early_accept: f64,
    pub late_accept: f64,
    pub early_context: f64,
    pub late_context: f64,
}

impl Thresholds {
    pub fn new(early_accept: f64, late_accept: f64) -> Self {
        Self {
            early_accept,
            late_accept,
            early_context: 0.3,
            late_context: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AcceptEarly,
    AcceptLate,
    Reject,
}

impl Outcome {
    pub fn accepted(self) -> bool {
        self != Outcome::Reject
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::AcceptEarly => "accept_early",
            Outcome::AcceptLate => "accept_late",
            Outcome::Reject => "reject",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDecision {
    pub id: String,
    pub early: f64,
    pub late: Option<f64>,
    pub outcome: Outcome,
    pub latency: f64,
}

/// Apply the policy to one candidate. `late` is only called when the early
/// score falls below `T_e`.
pub fn decide<F>(id: &str, early: f64, late: F, th: &Thresholds) -> Result<ScoredDecision>
where
    F: FnOnce() -> Result<f64>,
{
    if early >= th.early_accept {
        return Ok(ScoredDecision {
            id: id.to_string(),
            early,
            late: None,
            outcome: Outcome::AcceptEarly,
            latency: th.early_context,
        });
    }
    let late = late().map_err(|e| Error::DeferredEvaluation(Box::new(e)))?;
    Ok(ScoredDecision {
        id: id.to_string(),
        early,
        late: Some(late),
        outcome: if late >= th.late_accept {
            Outcome::AcceptLate
        } else {
            Outcome::Reject
        },
        latency: th.late_context,
    })
}

/// Largest threshold among the scores, 0 and [`ABOVE_ONE`] that rejects at
/// most `target_frr` of `scores` (rejection means `score < threshold`).
pub fn calibrate_threshold(scores: &[f64], target_frr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::NoPositives);
    }
    if !(0.0..1.0).contains(&target_frr) {
        return Err(Error::Config(format!("target FRR {target_frr} not in [0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let allowed = target_frr * scores.len() as f64 + 1e-9;
    let mut grid = sorted.clone();
    grid.push(0.0);
    grid.push(ABOVE_ONE);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best = grid[0];
    for &theta in &grid {
        let below = sorted.partition_point(|&s| s < theta);
        if below as f64 <= allowed {
            best = theta;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Which positives the late FRR target is measured over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LateTarget {
    /// Fraction of all positives with a late score below `T_l`.
    #[default]
    AllPositives,
    /// Fraction of deferred positives with a late score below `T_l`.
    DeferredOnly,
}

/// Early and late score of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub id: String,
    pub positive: bool,
    pub early: f64,
    pub late: f64,
}

pub fn calibrate_two_stage(
    pairs: &[ScorePair],
    early_frr_target: f64,
    late_frr_target: f64,
    mode: LateTarget,
    early_context: f64,
    late_context: f64,
) -> Result<Thresholds> {
    let pos: Vec<&ScorePair> = pairs.iter().filter(|p| p.positive).collect();
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    let early: Vec<f64> = pos.iter().map(|p| p.early).collect();
    let t_e = calibrate_threshold(&early, early_frr_target)?;
    let late: Vec<f64> = match mode {
        LateTarget::AllPositives => pos.iter().map(|p| p.late).collect(),
        LateTarget::DeferredOnly => pos.iter().filter(|p| p.early < t_e).map(|p| p.late).collect(),
    };
    let t_l = if late.is_empty() {
        ABOVE_ONE
    } else {
        calibrate_threshold(&late, late_frr_target)?
    };
    Ok(Thresholds {
        early_accept: t_e,
        late_accept: t_l,
        early_context,
        late_context,
    })
}

/// Serializes infinite hours/FA as the string `"inf"`.
pub fn serialize_hours<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyReport {
    pub frr: f64,
    pub fa_count: usize,
    /// `timeline_hours / fa_count`; serialized as `"inf"` without FAs.
    #[serde(serialize_with = "serialize_hours")]
    pub hours_per_fa: f64,
    /// Fraction of positives whose early score falls below `T_e`.
    pub defer_fraction: f64,
    /// Mean latency of accepted positives; absent when none is accepted.
    pub mean_latency_s: Option<f64>,
    pub n_early: usize,
    pub n_late: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub timeline_hours: f64,
    /// Late scores requested while evaluating all candidates.
    pub late_evaluations: usize,
    pub thresholds: Thresholds,
}

/// Mean latency of accepted positives.
pub fn mean_latency(n_early: usize, n_late: usize, early_context: f64, late_context: f64) -> Option<f64> {
    let n = n_early + n_late;
    (n > 0).then(|| (n_early as f64 * early_context + n_late as f64 * late_context) / n as f64)
}

/// Run the policy over positives and timeline negatives.
pub fn run_policy(
    positives: &[ScorePair],
    negatives: &[ScorePair],
    timeline_hours: f64,
    th: &Thresholds,
) -> Result<(PolicyReport, Vec<ScoredDecision>)> {
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut decisions = Vec::with_capacity(positives.len() + negatives.len());
    let mut late_evaluations = 0usize;
    for p in positives.iter().chain(negatives) {
        decisions.push(decide(
            &p.id,
            p.early,
            || {
                late_evaluations += 1;
                Ok(p.late)
            },
            th,
        )?);
    }
    let (pos_dec, neg_dec) = decisions.split_at(positives.len());
    let n_early = pos_dec.iter().filter(|d| d.outcome == Outcome::AcceptEarly).count();
    let n_late = pos_dec.iter().filter(|d| d.outcome == Outcome::AcceptLate).count();
    let rejected = pos_dec.len() - n_early - n_late;
    let fa_count = neg_dec.iter().filter(|d| d.outcome.accepted()).count();
    let report = PolicyReport {
        frr: rejected as f64 / positives.len() as f64,
        fa_count,
        hours_per_fa: hours_per_fa(timeline_hours, fa_count),
        defer_fraction: (positives.len() - n_early) as f64 / positives.len() as f64,
        mean_latency_s: mean_latency(n_early, n_late, th.early_context, th.late_context),
        n_early,
        n_late,
        n_positive: positives.len(),
        n_negative: negatives.len(),
        timeline_hours,
        late_evaluations,
        thresholds: *th,
    };
    Ok((report, decisions))
}

pub fn hours_per_fa(timeline_hours: f64, fa_count: usize) -> f64 {
    if fa_count == 0 {
        f64::INFINITY
    } else {
        timeline_hours / fa_count as f64
    }
}

pub fn decisions_csv(decisions: &[ScoredDecision]) -> String {
    let mut out = String::from("utterance_id,early,late,outcome,latency_s\n");
    for d in decisions {
        let late = d.late.map(fmt_sig9).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            d.id,
            fmt_sig9(d.early),
            late,
            d.outcome.as_str(),
            fmt_sig9(d.latency)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn th(e: f64, l: f64) -> Thresholds {
        Thresholds::new(e, l)
    }

    #[test]
    fn early_accept_skips_late() {
        let called = Cell::new(false);
        let d = decide(
            "a",
            0.99,
            || {
                called.set(true);
                Ok(0.0)
            },
            &th(0.9, 0.8),
        )
        .unwrap();
        assert_eq!(d.outcome, Outcome::AcceptEarly);
        assert_eq!(d.latency, 0.3);
        assert_eq!(d.late, None);
        assert!(!called.get());
    }

    #[test]
    fn late_accept_and_reject() {
        let d = decide("a", 0.5, || Ok(0.95), &th(0.9, 0.8)).unwrap();
        assert_eq!((d.outcome, d.latency, d.late), (Outcome::AcceptLate, 2.0, Some(0.95)));
        let d = decide("a", 0.5, || Ok(0.5), &th(0.9, 0.8)).unwrap();
        assert_eq!((d.outcome, d.latency), (Outcome::Reject, 2.0));
    }

    #[test]
    fn supplier_failure_is_deferred_error() {
        let err = decide("a", 0.1, || Err(Error::EmptyInput), &th(0.9, 0.8)).unwrap_err();
        assert!(matches!(err, Error::DeferredEvaluation(_)));
    }

    #[test]
    fn calibration_examples() {
        let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(calibrate_threshold(&tenths, 0.3).unwrap(), 0.4);
        assert_eq!(calibrate_threshold(&tenths, 0.0).unwrap(), 0.1);
        assert_eq!(calibrate_threshold(&[0.7; 5], 0.5).unwrap(), 0.7);
        assert!(calibrate_threshold(&[], 0.1).is_err());
        assert!(calibrate_threshold(&[0.5], 1.0).is_err());
    }

    #[test]
    fn latency_of_three_percent_deferral() {
        let m = mean_latency(97, 3, 0.3, 2.0).unwrap();
        assert!((m - 0.351).abs() < 1e-12);
        assert!((m / 0.3 - 1.17).abs() < 1e-12);
        assert_eq!(mean_latency(0, 0, 0.3, 2.0), None);
    }

    #[test]
    fn hours_per_fa_division() {
        assert_eq!(hours_per_fa(2000.0, 4), 500.0);
        assert!(hours_per_fa(2.0, 0).is_infinite());
    }

    #[test]
    fn zero_early_threshold_accepts_everything_early() {
        let pos: Vec<ScorePair> = (0..5)
            .map(|i| ScorePair {
                id: format!("p{i}"),
                positive: true,
                early: i as f64 / 5.0,
                late: 0.5,
            })
            .collect();
        let (r, _) = run_policy(&pos, &[], 1.0, &th(0.0, 0.5)).unwrap();
        assert_eq!((r.n_early, r.n_late, r.late_evaluations), (5, 0, 0));
        assert_eq!(r.mean_latency_s, Some(0.3));
    }

    #[test]
    fn report_json_has_inf_and_latency() {
        let pos = vec![ScorePair {
            id: "p".into(),
            positive: true,
            early: 0.9,
            late: 0.9,
        }];
        let (r, _) = run_policy(&pos, &[], 2.0, &th(0.5, 0.5)).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["hours_per_fa"], "inf");
        assert_eq!(v["mean_latency_s"], 0.3);
        assert_eq!(v["fa_count"], 0);
    }
}
