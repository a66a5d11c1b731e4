//! Stimulus-by-stimulus run driver for live sessions.
//!
//! Attention can change between any two stimuli. Epoch `k` is final once
//! stimulus `k + 3` has been placed (later onsets start after its window
//! closes), so decoding lags placement by three stimuli and each decision
//! arrives a little after its round has ended. The recorded attention log
//! replays through the batch pipeline to the same decisions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::{decide_round, DecodeDecision, RunOutcome, SlidingBuffer, FIRST_DECISION_ROUND};
use crate::error::{BciError, Result};
use crate::layout::REFERENCE_CHANNELS;
use crate::pipeline::{OnlineDecoder, Pipeline, RunSeeds, ERP_CHANNEL};
use crate::stim::{StimulationSchedule, VibratorId, N_VIBRATORS, STIMULUS_PERIOD_MS};
use crate::synth::{RunSynthesizer, SubjectProfile};

/// Stimuli between placement and decodability.
pub const DECODE_LAG: usize = 3;
/// Display trace rate.
pub const TRACE_FS_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Stop at the first detection.
    Online,
    /// Decode every round.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LiveEvent {
    Stimulus { index: usize, round: u32, vibrator: VibratorId, onset_ms: u64, attended: Option<VibratorId> },
    Decision { attempt: u32, decision: DecodeDecision },
    /// Mastoid-referenced Cz over one stimulus period: a 20 ms moving mean
    /// (which cancels 50 Hz) sampled at 100 Hz.
    Trace { start_ms: u64, fs_hz: f64, cz_uv: Vec<f64> },
    RunEnd { outcome: RunOutcome },
}

pub struct LiveRun {
    schedule: StimulationSchedule,
    synth: RunSynthesizer,
    mode: RunMode,
    attention: Option<VibratorId>,
    log: Vec<Option<VibratorId>>,
    decoded: usize,
    buffer: SlidingBuffer,
    decisions: Vec<DecodeDecision>,
    outcome: Option<RunOutcome>,
    rows: [usize; 3],
    fs_hz: f64,
}

impl LiveRun {
    pub fn new(
        pipeline: &Pipeline,
        profile: &SubjectProfile,
        target: VibratorId,
        run_seed: u64,
        mode: RunMode,
        attention: Option<VibratorId>,
    ) -> Result<Self> {
        let schedule = pipeline.schedule(target, run_seed)?;
        let synth = RunSynthesizer::new(
            &schedule,
            profile,
            &pipeline.layout,
            Some(pipeline.raw_channels()),
            RunSeeds::from_run(run_seed).subject,
        )?;
        let row = |name: &str| {
            pipeline.raw_channels().iter().position(|c| c == name).ok_or_else(|| BciError::MissingChannel(name.into()))
        };
        let rows = [row(ERP_CHANNEL)?, row(REFERENCE_CHANNELS[0])?, row(REFERENCE_CHANNELS[1])?];
        Ok(Self {
            schedule,
            synth,
            mode,
            attention,
            log: Vec::new(),
            decoded: 0,
            buffer: SlidingBuffer::new(),
            decisions: Vec::new(),
            outcome: None,
            rows,
            fs_hz: pipeline.layout.fs_hz,
        })
    }

    pub fn schedule(&self) -> &StimulationSchedule {
        &self.schedule
    }

    /// Takes effect from the next stimulus.
    pub fn set_attention(&mut self, attention: Option<VibratorId>) {
        self.attention = attention;
    }

    pub fn attention(&self) -> Option<VibratorId> {
        self.attention
    }

    /// Attention in force at each stimulus placed so far.
    pub fn attention_log(&self) -> &[Option<VibratorId>] {
        &self.log
    }

    pub fn decisions(&self) -> &[DecodeDecision] {
        &self.decisions
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn placed(&self) -> usize {
        self.log.len()
    }

    /// Place the next stimulus and decode whatever became final. After the
    /// last stimulus the remaining epochs are decoded and the run ends.
    pub fn step(&mut self, pipeline: &Pipeline, decoder: &OnlineDecoder) -> Result<Vec<LiveEvent>> {
        if self.is_finished() {
            return Err(BciError::InvalidParameter("run already finished".into()));
        }
        let k = self.log.len();
        let st = self.schedule.stimuli[k];
        self.synth.place(k, self.attention)?;
        self.log.push(self.attention);
        let mut events = vec![LiveEvent::Stimulus {
            index: k,
            round: st.round_index,
            vibrator: st.vibrator,
            onset_ms: st.onset_ms,
            attended: self.attention,
        }];
        let n = self.schedule.stimuli.len();
        let ready = if k + 1 == n { n } else { (k + 1).saturating_sub(DECODE_LAG) };
        while self.decoded < ready && !self.is_finished() {
            self.decode_next(pipeline, decoder, &mut events)?;
        }
        if !self.is_finished() && self.decoded == n {
            self.finish(&mut events);
        }
        Ok(events)
    }

    fn decode_next(&mut self, pipeline: &Pipeline, decoder: &OnlineDecoder, events: &mut Vec<LiveEvent>) -> Result<()> {
        let j = self.decoded;
        let raw = pipeline.raw_epoch(&self.synth, j, Some(self.schedule.target))?;
        let (features, _) = decoder.epoch_features(pipeline, &raw)?;
        let st = self.schedule.stimuli[j];
        self.buffer.push(st.vibrator, features);
        self.decoded += 1;
        events.push(LiveEvent::Trace { start_ms: st.onset_ms, fs_hz: TRACE_FS_HZ, cz_uv: self.cz_trace(j)? });
        let round = st.round_index as usize;
        if self.decoded % N_VIBRATORS == 0 && round + 1 >= FIRST_DECISION_ROUND {
            let averages = VibratorId::ALL.map(|v| self.buffer.average(v));
            let d = decide_round(round as u32, &averages, &decoder.model)?;
            self.decisions.push(d);
            events.push(LiveEvent::Decision { attempt: self.decisions.len() as u32, decision: d });
            if self.mode == RunMode::Online && d.detected.is_some() {
                self.finish(events);
            }
        }
        Ok(())
    }

    fn finish(&mut self, events: &mut Vec<LiveEvent>) {
        let outcome = RunOutcome::from_decisions(self.schedule.target, self.decisions.clone(), false);
        events.push(LiveEvent::RunEnd { outcome: outcome.clone() });
        self.outcome = Some(outcome);
    }

    fn cz_trace(&self, j: usize) -> Result<Vec<f64>> {
        let step = (self.fs_hz / TRACE_FS_HZ).round() as usize;
        let step_ms = (1000.0 / TRACE_FS_HZ) as i64;
        let data: Array2<f64> = self.synth.epoch_data(j, -step_ms, STIMULUS_PERIOD_MS as i64 + step_ms)?;
        let [cz, m1, m2] = self.rows;
        let referenced: Vec<f64> =
            (0..data.ncols()).map(|s| data[[cz, s]] - 0.5 * (data[[m1, s]] + data[[m2, s]])).collect();
        let n_out = (STIMULUS_PERIOD_MS as f64 * TRACE_FS_HZ / 1000.0) as usize;
        Ok((0..n_out)
            .map(|i| {
                let c = step + i * step;
                referenced[c - step..c + step].iter().sum::<f64>() / (2 * step) as f64
            })
            .collect())
    }
}

/// Run the batch pipeline over a recorded attention log.
pub fn replay_attention(
    pipeline: &Pipeline,
    decoder: &OnlineDecoder,
    profile: &SubjectProfile,
    target: VibratorId,
    run_seed: u64,
    log: &[Option<VibratorId>],
) -> Result<RunOutcome> {
    let schedule = pipeline.schedule(target, run_seed)?;
    let mut plan = log.to_vec();
    // stimuli that never happened: attention as last recorded
    let last = log.last().copied().flatten();
    plan.resize(schedule.stimuli.len(), last);
    let synth = pipeline.synthesize(profile, &schedule, &plan, run_seed)?;
    Ok(pipeline.decode_run(decoder, &synth)?.outcome)
}
