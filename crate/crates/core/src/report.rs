//! Session summaries: online success and attempts, continuous-mode rates,
//! per-run ERP measurements and their variability.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::{retrospective_reduce, ContinuousTrace, OutcomeKind, ReducedStats, RunOutcome};
use crate::error::{BciError, Result};
use crate::stats::{coefficient_of_variation, Cv, ErpMeasurement};
use crate::stim::N_VIBRATORS;
use crate::synth::Condition;

/// The set over which CVs are taken.
pub const CV_POPULATION: &str = "per-run Cz target averages within one session";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSummary {
    pub runs: usize,
    pub windows: usize,
    pub hits: usize,
    pub false_positives: usize,
    pub acc_pct: f64,
    pub fpr_pct: f64,
    /// Longest run of consecutive hits in any run.
    pub longest_sustained: usize,
}

impl ContinuousSummary {
    pub fn from_traces(traces: &[ContinuousTrace]) -> Result<Self> {
        let windows: usize = traces.iter().map(|t| t.windows.len()).sum();
        if windows == 0 {
            return Err(BciError::InvalidParameter("continuous summary needs at least one window".into()));
        }
        let hits: usize = traces.iter().map(|t| t.hits()).sum();
        let false_positives: usize = traces.iter().map(|t| t.false_positives()).sum();
        Ok(Self {
            runs: traces.len(),
            windows,
            hits,
            false_positives,
            acc_pct: 100.0 * hits as f64 / windows as f64,
            fpr_pct: 100.0 * false_positives as f64 / windows as f64,
            longest_sustained: traces.iter().flat_map(|t| t.sustained_runs()).max().unwrap_or(0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub condition: Condition,
    pub day: u8,
    pub config_hash: String,
    pub n_trials: usize,
    pub successes: usize,
    pub failures_nontarget: usize,
    pub failures_exhausted: usize,
    pub success_rate_pct: f64,
    /// Over successful trials only; absent without any.
    pub attempts_mean: Option<f64>,
    /// Sample sd over successful trials; absent with fewer than two.
    pub attempts_sd: Option<f64>,
    pub continuous: Option<ContinuousSummary>,
    pub erp: Vec<ErpMeasurement>,
    pub amplitude_cv: Option<Cv>,
    pub latency_cv: Option<Cv>,
    pub cv_population: String,
    /// Success statistics re-evaluated over 1..=4 candidate vibrators.
    pub reduction: Vec<ReducedStats>,
    /// Simulated clock time of the online block in ms.
    pub online_clock_ms: u64,
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt());
    (Some(m), sd)
}

/// Summarise one online session (plus an optional continuous block).
pub fn aggregate_report(
    condition: Condition,
    day: u8,
    config_hash: &str,
    outcomes: &[RunOutcome],
    erp: &[ErpMeasurement],
    continuous: &[ContinuousTrace],
    online_clock_ms: u64,
) -> Result<SessionReport> {
    if outcomes.is_empty() {
        return Err(BciError::InvalidParameter("a session report needs at least one trial".into()));
    }
    let count = |k: OutcomeKind| outcomes.iter().filter(|o| o.result == k).count();
    let successes = count(OutcomeKind::Success);
    let attempts: Vec<f64> =
        outcomes.iter().filter(|o| o.result == OutcomeKind::Success).map(|o| o.attempts as f64).collect();
    let (attempts_mean, attempts_sd) = mean_sd(&attempts);
    let amps: Vec<f64> = erp.iter().map(|m| m.peak_amp_uv).collect();
    let lats: Vec<f64> = erp.iter().map(|m| m.peak_latency_ms).collect();
    let reduction = (1..=N_VIBRATORS).map(|k| retrospective_reduce(outcomes, k)).collect::<Result<Vec<_>>>()?;
    Ok(SessionReport {
        condition,
        day,
        config_hash: config_hash.to_string(),
        n_trials: outcomes.len(),
        successes,
        failures_nontarget: count(OutcomeKind::FailureNontarget),
        failures_exhausted: count(OutcomeKind::FailureExhausted),
        success_rate_pct: 100.0 * successes as f64 / outcomes.len() as f64,
        attempts_mean,
        attempts_sd,
        continuous: if continuous.is_empty() { None } else { Some(ContinuousSummary::from_traces(continuous)?) },
        erp: erp.to_vec(),
        amplitude_cv: coefficient_of_variation(&amps).ok(),
        latency_cv: coefficient_of_variation(&lats).ok(),
        cv_population: CV_POPULATION.to_string(),
        reduction,
        online_clock_ms,
    })
}

pub const CSV_HEADER: &str = "day,condition,n_trials,successes,failures_nontarget,failures_exhausted,success_rate_pct,\
attempts_mean,attempts_sd,continuous_acc_pct,continuous_fpr_pct,amp_mean_uv,amp_cv,latency_mean_ms,latency_cv,\
success_k1,success_k2,success_k3,success_k4,config_hash";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BciError::Data(format!("session report: {e}")))
    }

    /// One row in [`CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        let k = |i: usize| opt(self.reduction.iter().find(|r| r.k == i).map(|r| 100.0 * r.success_rate));
        [
            self.day.to_string(),
            self.condition.to_string(),
            self.n_trials.to_string(),
            self.successes.to_string(),
            self.failures_nontarget.to_string(),
            self.failures_exhausted.to_string(),
            self.success_rate_pct.to_string(),
            opt(self.attempts_mean),
            opt(self.attempts_sd),
            opt(self.continuous.as_ref().map(|c| c.acc_pct)),
            opt(self.continuous.as_ref().map(|c| c.fpr_pct)),
            opt(self.amplitude_cv.map(|c| c.mean)),
            opt(self.amplitude_cv.map(|c| c.value)),
            opt(self.latency_cv.map(|c| c.mean)),
            opt(self.latency_cv.map(|c| c.value)),
            k(1),
            k(2),
            k(3),
            k(4),
            self.config_hash.clone(),
        ]
        .join(",")
    }
}

pub fn reports_to_csv(reports: &[SessionReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecodeDecision;
    use crate::stim::VibratorId;

    fn outcome(target: u8, detect_at: Option<(usize, u8)>) -> RunOutcome {
        let t = VibratorId::new(target).unwrap();
        let decisions = (0..17)
            .map(|i| {
                let mut scores = [-1.0; 4];
                if let Some((r, v)) = detect_at {
                    if i >= r {
                        scores[v as usize - 1] = 1.0;
                    }
                }
                DecodeDecision::from_scores(i as u32 + 3, scores, |s| s > 0.0)
            })
            .collect();
        RunOutcome::from_decisions(t, decisions, false)
    }

    fn erp(i: usize) -> ErpMeasurement {
        ErpMeasurement { peak_amp_uv: 5.0 + i as f64 * 0.1, peak_latency_ms: 350.0 + i as f64, channel: "Cz".into() }
    }

    #[test]
    fn success_rate_arithmetic() {
        let mut outs = Vec::new();
        for i in 0..32 {
            let tgt = (i % 4) as u8 + 1;
            outs.push(if i < 25 { outcome(tgt, Some((i % 3, tgt))) } else { outcome(tgt, None) });
        }
        let erps: Vec<_> = (0..32).map(erp).collect();
        let r = aggregate_report(Condition::Single, 3, "h", &outs, &erps, &[], 0).unwrap();
        assert_eq!(r.success_rate_pct, 78.125);
        assert_eq!(r.successes, 25);
        assert_eq!(r.failures_exhausted, 7);
        let expected: Vec<f64> = (0..25).map(|i| (i % 3 + 1) as f64).collect();
        let m = expected.iter().sum::<f64>() / 25.0;
        assert!((r.attempts_mean.unwrap() - m).abs() < 1e-12);
        assert!(r.amplitude_cv.unwrap().value > 0.0);
        assert_eq!(r.reduction.len(), 4);
    }

    #[test]
    fn no_success_means_no_attempts() {
        let outs: Vec<_> = (0..4).map(|i| outcome(i + 1, None)).collect();
        let r = aggregate_report(Condition::Dual, 1, "h", &outs, &[], &[], 0).unwrap();
        assert_eq!(r.success_rate_pct, 0.0);
        assert!(r.attempts_mean.is_none() && r.attempts_sd.is_none());
        assert!(r.amplitude_cv.is_none());
        assert!(r.csv_row().contains(",,"));
    }

    #[test]
    fn all_success_is_hundred_percent() {
        let outs: Vec<_> = (0..8).map(|i| outcome(i % 4 + 1, Some((0, i % 4 + 1)))).collect();
        let r = aggregate_report(Condition::Single, 2, "h", &outs, &[], &[], 0).unwrap();
        assert_eq!(r.success_rate_pct, 100.0);
        assert_eq!(r.attempts_mean, Some(1.0));
    }

    #[test]
    fn json_round_trip_and_csv_shape() {
        let outs: Vec<_> = (0..8).map(|i| outcome(i % 4 + 1, Some((i as usize % 5, (i + 1) % 4 + 1)))).collect();
        let traces: Vec<_> = outs.iter().map(|o| ContinuousTrace::from_decisions(o.target, o.decisions.clone())).collect();
        let erps: Vec<_> = (0..8).map(erp).collect();
        let r = aggregate_report(Condition::Dual, 2, "cafe", &outs, &erps, &traces, 123_456).unwrap();
        let back = SessionReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), r.to_json());
        let csv = reports_to_csv(&[r.clone(), back]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let n_cols = CSV_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == n_cols));
        assert_eq!(lines[1], lines[2]);
    }
}
