//! Online decision logic.
//!
//! Each vibrator keeps its four most recent epochs; once every vibrator has
//! four (after round 4) a decision is made after every round. A decision
//! detects the highest-scoring vibrator among those the classifier marks
//! positive, lowest id on ties. The first detection ends an online run:
//! success if it is the target, failure otherwise; a run with no detection
//! by the last round fails as exhausted.
//!
//! Traces keep every decision round, including those after the terminal
//! one, so that target-subset reductions can be re-evaluated later.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{DecoderModel, AVERAGE_WINDOW};
use crate::error::{BciError, Result};
use crate::stim::{StimulationSchedule, VibratorId, N_VIBRATORS};

/// Rounds that must complete before the first decision.
pub const FIRST_DECISION_ROUND: usize = AVERAGE_WINDOW;

/// Anything that turns an averaged window into a score and a detection.
pub trait WindowScorer {
    fn score(&self, window: &Array2<f64>) -> Result<f64>;
    fn detect(&self, score: f64) -> bool;
}

/// Scores spatially filtered windows (n_filters x 40).
impl WindowScorer for DecoderModel {
    fn score(&self, window: &Array2<f64>) -> Result<f64> {
        self.score_filtered(window)
    }

    fn detect(&self, score: f64) -> bool {
        DecoderModel::detect(self, score)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SlidingBuffer {
    queues: [VecDeque<Array2<f64>>; N_VIBRATORS],
}

impl SlidingBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add an epoch; returns the mean of the last four once four are held.
    pub fn push(&mut self, vibrator: VibratorId, window: Array2<f64>) -> Option<Array2<f64>> {
        let q = &mut self.queues[vibrator.slot()];
        if q.len() == AVERAGE_WINDOW {
            q.pop_front();
        }
        q.push_back(window);
        self.average(vibrator)
    }

    pub fn average(&self, vibrator: VibratorId) -> Option<Array2<f64>> {
        let q = &self.queues[vibrator.slot()];
        if q.len() < AVERAGE_WINDOW {
            return None;
        }
        let mut acc = q[0].clone();
        for w in q.iter().skip(1) {
            acc += w;
        }
        Some(acc / AVERAGE_WINDOW as f64)
    }

    pub fn len(&self, vibrator: VibratorId) -> usize {
        self.queues[vibrator.slot()].len()
    }

    pub fn is_ready(&self) -> bool {
        self.queues.iter().all(|q| q.len() == AVERAGE_WINDOW)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeDecision {
    /// Zero-based index of the round just completed.
    pub round_index: u32,
    pub scores: [f64; N_VIBRATORS],
    pub positive: [bool; N_VIBRATORS],
    pub detected: Option<VibratorId>,
    pub is_decision_round: bool,
}

impl DecodeDecision {
    pub fn from_scores(round_index: u32, scores: [f64; N_VIBRATORS], detect: impl Fn(f64) -> bool) -> Self {
        let positive = scores.map(&detect);
        let detected = select(&scores, &positive, &[true; N_VIBRATORS]);
        Self { round_index, scores, positive, detected, is_decision_round: true }
    }

    /// Detection restricted to the vibrators marked in `allowed`.
    pub fn detected_within(&self, allowed: &[bool; N_VIBRATORS]) -> Option<VibratorId> {
        select(&self.scores, &self.positive, allowed)
    }
}

fn select(scores: &[f64; N_VIBRATORS], positive: &[bool; N_VIBRATORS], allowed: &[bool; N_VIBRATORS]) -> Option<VibratorId> {
    let mut best: Option<usize> = None;
    for s in 0..N_VIBRATORS {
        if positive[s] && allowed[s] && best.is_none_or(|b| scores[s] > scores[b]) {
            best = Some(s);
        }
    }
    best.map(VibratorId::from_slot)
}

/// Score the four averages and decide.
pub fn decide_round<S: WindowScorer + ?Sized>(
    round_index: u32,
    averages: &[Option<Array2<f64>>; N_VIBRATORS],
    scorer: &S,
) -> Result<DecodeDecision> {
    let mut scores = [0.0; N_VIBRATORS];
    for (s, avg) in averages.iter().enumerate() {
        let w = avg
            .as_ref()
            .ok_or_else(|| BciError::Data(format!("no average for vibrator {}", s + 1)))?;
        scores[s] = scorer.score(w)?;
    }
    Ok(DecodeDecision::from_scores(round_index, scores, |x| scorer.detect(x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Success,
    FailureNontarget,
    FailureExhausted,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Success => "success",
            OutcomeKind::FailureNontarget => "failure_nontarget",
            OutcomeKind::FailureExhausted => "failure_exhausted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "success" => Ok(OutcomeKind::Success),
            "failure_nontarget" => Ok(OutcomeKind::FailureNontarget),
            "failure_exhausted" => Ok(OutcomeKind::FailureExhausted),
            other => Err(BciError::Data(format!("unknown outcome {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub target: VibratorId,
    pub result: OutcomeKind,
    /// Decision rounds elapsed through the terminal one (all of them when exhausted).
    pub attempts: u32,
    /// Every decision round of the run.
    pub decisions: Vec<DecodeDecision>,
    /// The epoch stream ended before the last round.
    pub partial: bool,
}

/// First detection among `allowed` vibrators decides the run.
pub fn evaluate(decisions: &[DecodeDecision], target: VibratorId, allowed: &[bool; N_VIBRATORS]) -> (OutcomeKind, u32) {
    for (i, d) in decisions.iter().enumerate() {
        if let Some(v) = d.detected_within(allowed) {
            let kind = if v == target { OutcomeKind::Success } else { OutcomeKind::FailureNontarget };
            return (kind, i as u32 + 1);
        }
    }
    (OutcomeKind::FailureExhausted, decisions.len() as u32)
}

impl RunOutcome {
    pub fn from_decisions(target: VibratorId, decisions: Vec<DecodeDecision>, partial: bool) -> Self {
        let (result, attempts) = evaluate(&decisions, target, &[true; N_VIBRATORS]);
        Self { target, result, attempts, decisions, partial }
    }

    /// Decisions up to and including the terminal one.
    pub fn online_decisions(&self) -> &[DecodeDecision] {
        &self.decisions[..(self.attempts as usize).min(self.decisions.len())]
    }

    /// Re-evaluate under a new decision threshold applied to the stored scores.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let decisions = self
            .decisions
            .iter()
            .map(|d| DecodeDecision::from_scores(d.round_index, d.scores, |s| s > threshold))
            .collect();
        Self::from_decisions(self.target, decisions, self.partial)
    }

    /// `# target=T result=R attempts=A partial=P` then
    /// `round,s1,s2,s3,s4,detected,outcome` rows. `outcome` is the per-round
    /// reading relative to the target: hit, false_positive or miss.
    pub fn to_trace_text(&self) -> String {
        let mut out = format!(
            "# target={} result={} attempts={} partial={}\nround,s1,s2,s3,s4,detected,outcome\n",
            self.target,
            self.result.as_str(),
            self.attempts,
            self.partial
        );
        for d in &self.decisions {
            let detected = d.detected.map_or("none".to_string(), |v| v.to_string());
            let outcome = window_outcome(d.detected, self.target).as_str();
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{},{}",
                d.round_index + 1,
                d.scores[0],
                d.scores[1],
                d.scores[2],
                d.scores[3],
                detected,
                outcome
            );
        }
        out
    }

    /// Parse a trace written by [`Self::to_trace_text`] given the threshold
    /// that produced it. The stored result must match a fresh evaluation.
    pub fn from_trace_text(text: &str, threshold: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| BciError::Data("empty trace".into()))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| BciError::Data(format!("trace header lacks {key}")))
        };
        let target: VibratorId = field("target")?.parse()?;
        let result = OutcomeKind::parse(field("result")?)?;
        let partial = field("partial")? == "true";
        if lines.next() != Some("round,s1,s2,s3,s4,detected,outcome") {
            return Err(BciError::Data("trace column header missing".into()));
        }
        let mut decisions = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(BciError::Data(format!("trace line {} has {} fields", n + 3, cols.len())));
            }
            let round: u32 = cols[0].parse().map_err(|_| BciError::Data(format!("bad round {:?}", cols[0])))?;
            let mut scores = [0.0; N_VIBRATORS];
            for s in 0..N_VIBRATORS {
                scores[s] = cols[1 + s].parse().map_err(|_| BciError::Data(format!("bad score {:?}", cols[1 + s])))?;
            }
            let d = DecodeDecision::from_scores(round.saturating_sub(1), scores, |x| x > threshold);
            let recorded = if cols[5] == "none" { None } else { Some(cols[5].parse()?) };
            if recorded != d.detected {
                return Err(BciError::Data(format!("trace line {} detection disagrees with scores", n + 3)));
            }
            decisions.push(d);
        }
        let out = Self::from_decisions(target, decisions, partial);
        if out.result != result {
            return Err(BciError::Data("trace result disagrees with its decisions".into()));
        }
        Ok(out)
    }
}

/// Run the online protocol over per-stimulus windows in schedule order.
///
/// `windows` yields one window per stimulus; a stream that ends early gives
/// an exhausted, partial outcome.
pub fn run_online_trial<S, I>(schedule: &StimulationSchedule, windows: I, scorer: &S) -> Result<RunOutcome>
where
    S: WindowScorer + ?Sized,
    I: IntoIterator<Item = Result<Array2<f64>>>,
{
    let mut buffer = SlidingBuffer::new();
    let mut decisions = Vec::new();
    let mut iter = windows.into_iter();
    let mut partial = false;
    'rounds: for (r, round) in schedule.rounds.iter().enumerate() {
        for &v in round {
            match iter.next() {
                Some(w) => {
                    buffer.push(v, w?);
                }
                None => {
                    partial = true;
                    break 'rounds;
                }
            }
        }
        if r + 1 >= FIRST_DECISION_ROUND {
            let averages = VibratorId::ALL.map(|v| buffer.average(v));
            decisions.push(decide_round(r as u32, &averages, scorer)?);
        }
    }
    Ok(RunOutcome::from_decisions(schedule.target, decisions, partial))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowOutcome {
    Hit,
    FalsePositive,
    Miss,
}

impl WindowOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowOutcome::Hit => "hit",
            WindowOutcome::FalsePositive => "false_positive",
            WindowOutcome::Miss => "miss",
        }
    }
}

pub fn window_outcome(detected: Option<VibratorId>, target: VibratorId) -> WindowOutcome {
    match detected {
        Some(v) if v == target => WindowOutcome::Hit,
        Some(_) => WindowOutcome::FalsePositive,
        None => WindowOutcome::Miss,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrace {
    pub target: VibratorId,
    pub windows: Vec<WindowOutcome>,
    pub decisions: Vec<DecodeDecision>,
}

impl ContinuousTrace {
    pub fn from_decisions(target: VibratorId, decisions: Vec<DecodeDecision>) -> Self {
        let windows = decisions.iter().map(|d| window_outcome(d.detected, target)).collect();
        Self { target, windows, decisions }
    }

    pub fn hits(&self) -> usize {
        self.windows.iter().filter(|w| **w == WindowOutcome::Hit).count()
    }

    pub fn false_positives(&self) -> usize {
        self.windows.iter().filter(|w| **w == WindowOutcome::FalsePositive).count()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.hits(), self.windows.len())
    }

    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.false_positives(), self.windows.len())
    }

    /// Lengths of maximal runs of consecutive hits.
    pub fn sustained_runs(&self) -> Vec<usize> {
        sustained_runs(&self.windows)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn sustained_runs(windows: &[WindowOutcome]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0;
    for w in windows {
        if *w == WindowOutcome::Hit {
            current += 1;
        } else if current > 0 {
            runs.push(current);
            current = 0;
        }
    }
    if current > 0 {
        runs.push(current);
    }
    runs
}

/// Continuous decoding: every decision window is scored, nothing stops the run.
pub fn run_continuous<S, I>(schedule: &StimulationSchedule, windows: I, scorer: &S) -> Result<ContinuousTrace>
where
    S: WindowScorer + ?Sized,
    I: IntoIterator<Item = Result<Array2<f64>>>,
{
    let outcome = run_online_trial(schedule, windows, scorer)?;
    Ok(ContinuousTrace::from_decisions(schedule.target, outcome.decisions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedStats {
    pub k: usize,
    pub success_rate: f64,
    /// Mean attempts over successful (trace, subset) pairs.
    pub mean_attempts: Option<f64>,
    pub subsets_per_trace: usize,
}

/// Re-evaluate four-target traces as if only `k` vibrators (always
/// including the target) had been on offer, averaging over all such subsets.
pub fn retrospective_reduce(traces: &[RunOutcome], k: usize) -> Result<ReducedStats> {
    if !(1..=N_VIBRATORS).contains(&k) {
        return Err(BciError::InvalidParameter(format!("k must be in 1..={N_VIBRATORS}, got {k}")));
    }
    if traces.is_empty() {
        return Err(BciError::InvalidParameter("no traces to reduce".into()));
    }
    let mut successes = 0.0;
    let mut total = 0.0;
    let mut attempts_sum = 0.0;
    let mut subsets_per_trace = 0;
    for t in traces {
        let others: Vec<usize> = (0..N_VIBRATORS).filter(|&s| s != t.target.slot()).collect();
        let mut count = 0;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != k - 1 {
                continue;
            }
            let mut allowed = [false; N_VIBRATORS];
            allowed[t.target.slot()] = true;
            for (bit, &s) in others.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    allowed[s] = true;
                }
            }
            let (kind, attempts) = evaluate(&t.decisions, t.target, &allowed);
            total += 1.0;
            if kind == OutcomeKind::Success {
                successes += 1.0;
                attempts_sum += attempts as f64;
            }
            count += 1;
        }
        subsets_per_trace = count;
    }
    Ok(ReducedStats {
        k,
        success_rate: successes / total,
        mean_attempts: (successes > 0.0).then(|| attempts_sum / successes),
        subsets_per_trace,
    })
}
