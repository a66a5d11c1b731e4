//! Multi-day protocol orchestration on a logical clock.
//!
//! Seeds are derived per (day, condition) so that a condition's results do
//! not depend on which other conditions or days are run alongside it.

use serde::{Deserialize, Serialize};

use crate::classifier::{DecoderModel, TrainReport};
use crate::config::ExperimentConfig;
use crate::decoder::{ContinuousTrace, OutcomeKind, FIRST_DECISION_ROUND};
use crate::error::{BciError, Result};
use crate::model_file::model_digest;
use crate::pipeline::{target_order, CalibrationData, OnlineDecoder, Pipeline, TrialRecord};
use crate::preprocess::{EPOCH_START_MS, FEATURE_FS_HZ};
use crate::report::{aggregate_report, ContinuousSummary, SessionReport};
use crate::robot::{apply_command, plan_from, Rejection, WorldState};
use crate::seeds::{derive, tag};
use crate::stats::{coefficient_of_variation, measure_p300, pearson, Correlation, ErpMeasurement};
use crate::stim::{VibratorId, ROUND_MS};
use crate::synth::{Condition, SubjectProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub condition: Condition,
    pub day: u8,
    pub config_hash: String,
    pub runs: usize,
    pub epochs: usize,
    pub target_epochs: usize,
    /// Stimulation plus inter-run pauses, in ms.
    pub clock_ms: u64,
    pub model_sha256: String,
    pub svm_sweeps: usize,
    pub svm_converged: bool,
    pub duality_gap: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub model: DecoderModel,
    pub train: TrainReport,
    pub data: CalibrationData,
    pub summary: CalibrationSummary,
}

#[derive(Debug, Clone)]
pub struct OnlineOutput {
    pub records: Vec<TrialRecord>,
    pub erp: Vec<ErpMeasurement>,
    pub clock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct ContinuousOutput {
    pub traces: Vec<ContinuousTrace>,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub calibration: CalibrationOutput,
    pub online: OnlineOutput,
    pub continuous: ContinuousOutput,
    pub report: SessionReport,
}

#[derive(Debug, Clone)]
pub struct DayResult {
    pub day: u8,
    /// Conditions in the order they were run.
    pub order: Vec<Condition>,
    pub conditions: Vec<ConditionResult>,
}

impl DayResult {
    pub fn report(&self) -> DayReport {
        DayReport {
            day: self.day,
            config_hash: self.conditions.first().map(|c| c.report.config_hash.clone()).unwrap_or_default(),
            order: self.order.clone(),
            sessions: self.conditions.iter().map(|c| c.report.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousReport {
    pub condition: Condition,
    pub day: u8,
    pub config_hash: String,
    pub summary: ContinuousSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub day: u8,
    pub config_hash: String,
    pub order: Vec<Condition>,
    pub sessions: Vec<SessionReport>,
}

impl DayReport {
    pub fn success_rate(&self, condition: Condition) -> Option<f64> {
        self.sessions.iter().find(|s| s.condition == condition).map(|s| s.success_rate_pct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStep {
    pub run: usize,
    /// Command the subject attended (first step of the current plan).
    pub intended: VibratorId,
    /// Command the decoder produced; `None` when the run exhausted.
    pub decoded: Option<VibratorId>,
    pub attempts: u32,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
    pub world_after: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub config_hash: String,
    pub condition: Condition,
    pub day: u8,
    pub script: String,
    pub steps: Vec<FunctionalStep>,
    pub goal_reached: bool,
    pub commands_issued: usize,
    pub commands_rejected: usize,
    pub clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// 0 = single-task day-3 preset, 1 = dual-task day-1 preset.
    pub fraction: f64,
    pub amp_mean_uv: f64,
    pub latency_cv: f64,
    pub amplitude_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub runs_per_point: usize,
    /// Mean amplitude against latency CV across points.
    pub correlation: Correlation,
}

/// Simulated duration of an online run that stopped after `attempts`
/// decisions (or ran out).
pub fn online_run_clock_ms(attempts: u32, result: OutcomeKind, n_rounds: usize) -> u64 {
    let rounds = match result {
        OutcomeKind::FailureExhausted => n_rounds,
        _ => (attempts as usize + FIRST_DECISION_ROUND - 1).min(n_rounds),
    };
    rounds as u64 * ROUND_MS
}

/// Measure the P300 on a per-run Cz average (-100..700 ms at 100 Hz).
pub fn measure_run_erp(cz: &[f64]) -> Result<ErpMeasurement> {
    measure_p300(cz, EPOCH_START_MS as f64, FEATURE_FS_HZ)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Profile between the single-task day-3 and dual-task day-1 presets.
pub fn sweep_profile(fraction: f64) -> Result<SubjectProfile> {
    let a = SubjectProfile::preset(Condition::Single, 3)?;
    let b = SubjectProfile::preset(Condition::Dual, 1)?;
    let mut p = a.clone();
    p.p300_amp_mean_uv = lerp(a.p300_amp_mean_uv, b.p300_amp_mean_uv, fraction);
    p.p300_amp_sd_uv = lerp(a.p300_amp_sd_uv, b.p300_amp_sd_uv, fraction);
    p.p300_latency_mean_ms = lerp(a.p300_latency_mean_ms, b.p300_latency_mean_ms, fraction);
    p.p300_latency_sd_ms = lerp(a.p300_latency_sd_ms, b.p300_latency_sd_ms, fraction);
    p.lapse_prob = lerp(a.lapse_prob, b.lapse_prob, fraction);
    p.orientation_error_prob = lerp(a.orientation_error_prob, b.orientation_error_prob, fraction);
    if fraction >= 0.5 {
        p.condition = Condition::Dual;
    }
    p.validate()?;
    Ok(p)
}

pub struct SessionRunner {
    pub config: ExperimentConfig,
    pub hash: String,
    pub pipeline: Pipeline,
}

impl SessionRunner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pipeline = Pipeline::new(config.pipeline_settings())?;
        let hash = config.hash();
        Ok(Self { config, hash, pipeline })
    }

    pub fn condition_seed(&self, condition: Condition, day: u8) -> u64 {
        derive(self.config.seed, &[day as u64, condition.code()])
    }

    pub fn profile(&self, condition: Condition, day: u8) -> Result<SubjectProfile> {
        self.config.profile_for(condition, day)
    }

    /// Condition order for a day: counterbalanced by seed.
    pub fn condition_order(&self, day: u8) -> Vec<Condition> {
        let mut order = self.config.conditions.clone();
        order.sort();
        if derive(self.config.seed, &[tag::CONDITION_ORDER, day as u64]) & 1 == 1 {
            order.reverse();
        }
        order
    }

    fn pause_ms(&self) -> u64 {
        self.config.protocol.inter_run_pause_ms
    }

    pub fn run_calibration(&self, condition: Condition, day: u8) -> Result<CalibrationOutput> {
        let profile = self.profile(condition, day)?;
        let seed = self.condition_seed(condition, day);
        let (model, train, data) = self.pipeline.calibrate(&profile, seed, &self.hash)?;
        let stim: u64 = data.schedules.iter().map(|s| s.n_rounds() as u64 * ROUND_MS).sum();
        let clock_ms = stim + self.pause_ms() * data.schedules.len().saturating_sub(1) as u64;
        let summary = CalibrationSummary {
            condition,
            day,
            config_hash: self.hash.clone(),
            runs: data.schedules.len(),
            epochs: data.n_epochs(),
            target_epochs: data.n_target_epochs(),
            clock_ms,
            model_sha256: model_digest(&model),
            svm_sweeps: train.sweeps,
            svm_converged: train.converged,
            duality_gap: train.duality_gap,
        };
        Ok(CalibrationOutput { model, train, data, summary })
    }

    /// Cued online session: each vibrator `trials_per_vibrator` times.
    pub fn run_online(&self, condition: Condition, day: u8, decoder: &OnlineDecoder) -> Result<OnlineOutput> {
        let profile = self.profile(condition, day)?;
        let seed = derive(self.condition_seed(condition, day), &[tag::ONLINE]);
        let order = target_order(self.config.protocol.trials_per_vibrator, seed);
        let mut records = Vec::with_capacity(order.len());
        let mut erp = Vec::with_capacity(order.len());
        let mut clock_ms = 0;
        for (i, &target) in order.iter().enumerate() {
            let record = self.pipeline.run_trial(decoder, &profile, target, Some(target), derive(seed, &[i as u64]))?;
            if i > 0 {
                clock_ms += self.pause_ms();
            }
            clock_ms += online_run_clock_ms(record.outcome.attempts, record.outcome.result, self.config.protocol.n_rounds);
            erp.push(measure_run_erp(&record.cz_target_average)?);
            records.push(record);
        }
        Ok(OnlineOutput { records, erp, clock_ms })
    }

    /// Continuous block: every vibrator attended for whole runs.
    pub fn run_continuous_block(&self, condition: Condition, day: u8, decoder: &OnlineDecoder) -> Result<ContinuousOutput> {
        let profile = self.profile(condition, day)?;
        let seed = derive(self.condition_seed(condition, day), &[tag::CONTINUOUS]);
        let n = self.config.protocol.continuous_runs_per_vibrator * VibratorId::ALL.len();
        let mut traces = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let target = VibratorId::from_slot(i % VibratorId::ALL.len());
            let (trace, record) = self.pipeline.run_continuous(decoder, &profile, target, derive(seed, &[i as u64]))?;
            traces.push(trace);
            records.push(record);
        }
        Ok(ContinuousOutput { traces, records })
    }

    /// Calibration followed by the cued session, without a continuous block.
    pub fn run_online_session(&self, condition: Condition, day: u8) -> Result<(CalibrationOutput, OnlineOutput, SessionReport)> {
        let calibration = self.run_calibration(condition, day)?;
        let decoder = self.pipeline.online_decoder(&calibration.model)?;
        let online = self.run_online(condition, day, &decoder)?;
        let outcomes: Vec<_> = online.records.iter().map(|r| r.outcome.clone()).collect();
        let report = aggregate_report(condition, day, &self.hash, &outcomes, &online.erp, &[], online.clock_ms)?;
        Ok((calibration, online, report))
    }

    /// Calibration followed by the continuous block alone.
    pub fn run_continuous_session(
        &self,
        condition: Condition,
        day: u8,
    ) -> Result<(CalibrationOutput, ContinuousOutput, ContinuousReport)> {
        let calibration = self.run_calibration(condition, day)?;
        let decoder = self.pipeline.online_decoder(&calibration.model)?;
        let block = self.run_continuous_block(condition, day, &decoder)?;
        let report = ContinuousReport {
            condition,
            day,
            config_hash: self.hash.clone(),
            summary: ContinuousSummary::from_traces(&block.traces)?,
        };
        Ok((calibration, block, report))
    }

    /// Calibration, online session and continuous block for one condition.
    pub fn run_condition(&self, condition: Condition, day: u8) -> Result<ConditionResult> {
        let calibration = self.run_calibration(condition, day)?;
        let decoder = self.pipeline.online_decoder(&calibration.model)?;
        let online = self.run_online(condition, day, &decoder)?;
        let continuous = self.run_continuous_block(condition, day, &decoder)?;
        let outcomes: Vec<_> = online.records.iter().map(|r| r.outcome.clone()).collect();
        let report =
            aggregate_report(condition, day, &self.hash, &outcomes, &online.erp, &continuous.traces, online.clock_ms)?;
        Ok(ConditionResult { calibration, online, continuous, report })
    }

    pub fn run_day(&self, day: u8) -> Result<DayResult> {
        if !self.config.days.contains(&day) {
            return Err(BciError::Config(format!("day {day} is not in the configured days {:?}", self.config.days)));
        }
        let order = self.condition_order(day);
        let conditions = order.iter().map(|&c| self.run_condition(c, day)).collect::<Result<Vec<_>>>()?;
        Ok(DayResult { day, order, conditions })
    }

    pub fn run_all(&self) -> Result<Vec<DayResult>> {
        self.config.days.iter().map(|&d| self.run_day(d)).collect()
    }

    /// Drive the configured robot script: before each run the subject
    /// attends the first command of a shortest plan from the current world;
    /// the decoded command is applied whatever it is.
    pub fn run_functional(&self, condition: Condition, day: u8, decoder: &OnlineDecoder) -> Result<FunctionalReport> {
        let script = self.config.script()?;
        let profile = self.profile(condition, day)?;
        let seed = derive(self.condition_seed(condition, day), &[tag::FUNCTIONAL]);
        let mut world = script.initial;
        let mut steps = Vec::new();
        let mut clock_ms = 0;
        for run in 0..self.config.functional.max_runs {
            if script.goal_reached(&world) {
                break;
            }
            let plan = plan_from(&script, &world)
                .ok_or_else(|| BciError::Data(format!("script {} has no path to its goal", script.name)))?;
            let intended = plan[0];
            let record = self.pipeline.run_trial(decoder, &profile, intended, Some(intended), derive(seed, &[run as u64]))?;
            let o = &record.outcome;
            if run > 0 {
                clock_ms += self.pause_ms();
            }
            clock_ms += online_run_clock_ms(o.attempts, o.result, self.config.protocol.n_rounds);
            let decoded = o.online_decisions().last().and_then(|d| d.detected);
            let (accepted, rejection) = match decoded {
                Some(cmd) => match apply_command(&world, &script, cmd) {
                    Ok(next) => {
                        world = next;
                        (true, None)
                    }
                    Err(r) => (false, Some(r)),
                },
                None => (false, None),
            };
            steps.push(FunctionalStep { run, intended, decoded, attempts: o.attempts, accepted, rejection, world_after: world });
        }
        Ok(FunctionalReport {
            config_hash: self.hash.clone(),
            condition,
            day,
            script: script.name.clone(),
            goal_reached: script.goal_reached(&world),
            commands_issued: steps.iter().filter(|s| s.decoded.is_some()).count(),
            commands_rejected: steps.iter().filter(|s| s.rejection.is_some()).count(),
            steps,
            clock_ms,
        })
    }

    /// ERP variability across profiles between the single-task day-3 and
    /// dual-task day-1 presets, `points` steps, `runs` attended runs each.
    pub fn erp_sweep(&self, points: usize, runs: usize) -> Result<SweepReport> {
        if points < 3 || runs < 2 {
            return Err(BciError::InvalidParameter("sweep needs at least 3 points and 2 runs per point".into()));
        }
        let mut out = Vec::with_capacity(points);
        for p in 0..points {
            let fraction = p as f64 / (points - 1) as f64;
            let mut profile = sweep_profile(fraction)?;
            self.config.profile.apply(&mut profile);
            let mut amps = Vec::with_capacity(runs);
            let mut lats = Vec::with_capacity(runs);
            for r in 0..runs {
                let target = VibratorId::from_slot(r % VibratorId::ALL.len());
                let seed = derive(self.config.seed, &[tag::SWEEP, p as u64, r as u64]);
                let m = measure_run_erp(&self.pipeline.cz_target_average(&profile, target, seed)?)?;
                amps.push(m.peak_amp_uv);
                lats.push(m.peak_latency_ms);
            }
            let amp = coefficient_of_variation(&amps)?;
            out.push(SweepPoint {
                fraction,
                amp_mean_uv: amp.mean,
                latency_cv: coefficient_of_variation(&lats)?.value,
                amplitude_cv: amp.value,
            });
        }
        let xs: Vec<f64> = out.iter().map(|p| p.amp_mean_uv).collect();
        let ys: Vec<f64> = out.iter().map(|p| p.latency_cv).collect();
        let correlation = pearson(&xs, &ys)?;
        Ok(SweepReport { points: out, runs_per_point: runs, correlation })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig { seed: 7, days: vec![3], ..Default::default() };
        c.protocol.calibration_runs_per_target = 1;
        c.protocol.trials_per_vibrator = 1;
        c.protocol.continuous_runs_per_vibrator = 1;
        c.protocol.n_taps = 301;
        c
    }

    #[test]
    fn clock_counts_executed_rounds() {
        assert_eq!(online_run_clock_ms(1, OutcomeKind::Success, 20), 4 * 1600);
        assert_eq!(online_run_clock_ms(17, OutcomeKind::FailureNontarget, 20), 20 * 1600);
        assert_eq!(online_run_clock_ms(17, OutcomeKind::FailureExhausted, 20), 20 * 1600);
    }

    #[test]
    fn calibration_counts_and_clock() {
        let runner = SessionRunner::new(small_config()).unwrap();
        let cal = runner.run_calibration(Condition::Single, 3).unwrap();
        assert_eq!(cal.summary.runs, 4);
        assert_eq!(cal.summary.epochs, 4 * 80);
        assert_eq!(cal.summary.target_epochs, 4 * 20);
        assert_eq!(cal.summary.clock_ms, 4 * 32_000 + 3 * 7000);
        let again = runner.run_calibration(Condition::Single, 3).unwrap();
        assert_eq!(again.summary.model_sha256, cal.summary.model_sha256);
    }

    #[test]
    fn condition_order_is_seeded_and_complete() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..16 {
            let runner = SessionRunner::new(ExperimentConfig { seed, ..small_config() }).unwrap();
            let order = runner.condition_order(3);
            assert_eq!(order.len(), 2);
            assert_ne!(order[0], order[1]);
            assert_eq!(order, runner.condition_order(3));
            seen.insert(order);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn unconfigured_day_is_a_config_error() {
        let runner = SessionRunner::new(small_config()).unwrap();
        assert_eq!(runner.run_day(1).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sweep_endpoints_are_the_presets() {
        let a = sweep_profile(0.0).unwrap();
        let b = sweep_profile(1.0).unwrap();
        assert_eq!(a, SubjectProfile::preset(Condition::Single, 3).unwrap());
        let d = SubjectProfile::preset(Condition::Dual, 1).unwrap();
        assert_eq!(b.p300_amp_mean_uv, d.p300_amp_mean_uv);
        assert_eq!(b.p300_latency_sd_ms, d.p300_latency_sd_ms);
    }
}
