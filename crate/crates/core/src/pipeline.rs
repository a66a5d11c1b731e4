//! Simulation pipeline: synthesize runs for a subject profile, preprocess
//! them, calibrate a decoder and run it online.
//!
//! Only the channels decoding needs (the 44 decoding channels plus both
//! mastoids) are synthesized. Online, the spatial filters and the mastoid
//! re-reference are folded into one projection of the raw channels, so only
//! the handful of virtual channels (one per filter, plus Cz for ERP
//! measurement) go through the filters.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{calibrate, CalibrationEpoch, CalibrationOptions, DecoderModel, TrainReport};
use crate::decoder::{run_online_trial, ContinuousTrace, RunOutcome};
use crate::error::{BciError, Result};
use crate::filter::DEFAULT_TAPS;
use crate::layout::{ChannelLayout, REFERENCE_CHANNELS};
use crate::preprocess::{
    extract_feature_window, project_epoch, reref_projection, Epoch, Label, Preprocessor, EPOCH_END_MS,
    EPOCH_START_MS, FEATURE_SAMPLES, FEATURE_START_MS, FILTER_CONTEXT_MS,
};
use crate::seeds::{derive, tag};
use crate::stim::{build_run_schedule, StimulationSchedule, VibratorId, DEFAULT_ROUNDS, N_VIBRATORS};
use crate::synth::{attention_plan, RunSynthesizer, SubjectProfile};

pub const ERP_CHANNEL: &str = "Cz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub n_rounds: usize,
    pub n_taps: usize,
    pub calibration_runs_per_target: usize,
    pub decoder: CalibrationOptions,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            n_rounds: DEFAULT_ROUNDS,
            n_taps: DEFAULT_TAPS,
            calibration_runs_per_target: 3,
            decoder: CalibrationOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub layout: ChannelLayout,
    pub preprocessor: Preprocessor,
    pub settings: PipelineSettings,
    /// Decoding channels followed by nothing else, in layout order.
    decoding: Vec<String>,
    /// Decoding channels plus mastoids, in layout order.
    raw_channels: Arc<[String]>,
}

/// Per-run stimulus seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub schedule: u64,
    pub subject: u64,
}

impl RunSeeds {
    pub fn from_run(run_seed: u64) -> Self {
        Self { schedule: derive(run_seed, &[tag::SCHEDULE]), subject: run_seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub targets: Vec<VibratorId>,
    pub schedules: Vec<StimulationSchedule>,
    pub epochs: Vec<CalibrationEpoch>,
}

impl CalibrationData {
    pub fn n_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn n_target_epochs(&self) -> usize {
        self.epochs.iter().filter(|e| e.is_target).count()
    }
}

/// One online (or continuous) run as decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub schedule: StimulationSchedule,
    pub outcome: RunOutcome,
    /// Average preprocessed Cz waveform over the run's target epochs
    /// (-100..700 ms at 100 Hz).
    pub cz_target_average: Vec<f64>,
}

impl Pipeline {
    pub fn new(settings: PipelineSettings) -> Result<Self> {
        let layout = ChannelLayout::standard_64();
        let preprocessor = Preprocessor::new(settings.n_taps, layout.fs_hz)?;
        let decoding = layout.decoding_channels();
        let raw_channels: Arc<[String]> = layout
            .names()
            .iter()
            .filter(|n| decoding.contains(n) || REFERENCE_CHANNELS.contains(&n.as_str()))
            .cloned()
            .collect();
        Ok(Self { layout, preprocessor, settings, decoding, raw_channels })
    }

    pub fn decoding_channels(&self) -> &[String] {
        &self.decoding
    }

    pub fn raw_channels(&self) -> &Arc<[String]> {
        &self.raw_channels
    }

    pub fn schedule(&self, target: VibratorId, run_seed: u64) -> Result<StimulationSchedule> {
        build_run_schedule(target, self.settings.n_rounds, RunSeeds::from_run(run_seed).schedule)
    }

    /// Synthesize a run with the given per-stimulus attention.
    pub fn synthesize(
        &self,
        profile: &SubjectProfile,
        schedule: &StimulationSchedule,
        attention: &[Option<VibratorId>],
        run_seed: u64,
    ) -> Result<RunSynthesizer> {
        let mut synth =
            RunSynthesizer::new(schedule, profile, &self.layout, Some(&self.raw_channels), RunSeeds::from_run(run_seed).subject)?;
        if attention.len() != schedule.stimuli.len() {
            return Err(BciError::Shape("attention plan length differs from schedule".into()));
        }
        for (k, &a) in attention.iter().enumerate() {
            synth.place(k, a)?;
        }
        Ok(synth)
    }

    /// Raw epoch (with filter context) for stimulus `k` of a synthesized run.
    pub fn raw_epoch(&self, synth: &RunSynthesizer, k: usize, target: Option<VibratorId>) -> Result<Epoch> {
        let stimulus = synth.schedule().stimuli[k];
        let data = synth.epoch_data(k, EPOCH_START_MS - FILTER_CONTEXT_MS, EPOCH_END_MS + FILTER_CONTEXT_MS)?;
        let label = match target {
            Some(t) if t == stimulus.vibrator => Label::Target,
            Some(_) => Label::Nontarget,
            None => Label::Unknown,
        };
        Ok(Epoch {
            data,
            channel_names: self.raw_channels.clone(),
            t0_ms: (EPOCH_START_MS - FILTER_CONTEXT_MS) as f64,
            fs_hz: self.layout.fs_hz,
            stimulus,
            label,
        })
    }

    /// Synthesize and preprocess the calibration runs: each target attended
    /// for `calibration_runs_per_target` runs, in seeded random order.
    pub fn calibration_data(&self, profile: &SubjectProfile, seed: u64) -> Result<CalibrationData> {
        let mut targets: Vec<VibratorId> = (0..self.settings.calibration_runs_per_target)
            .flat_map(|_| VibratorId::ALL)
            .collect();
        targets.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[tag::CALIBRATION])));
        let mut schedules = Vec::new();
        let mut epochs = Vec::new();
        for (run, &target) in targets.iter().enumerate() {
            let run_seed = derive(seed, &[tag::CALIBRATION, run as u64]);
            let schedule = self.schedule(target, run_seed)?;
            let plan = attention_plan(&schedule, profile, Some(target), RunSeeds::from_run(run_seed).subject);
            let synth = self.synthesize(profile, &schedule, &plan, run_seed)?;
            for k in 0..schedule.stimuli.len() {
                let raw = self.raw_epoch(&synth, k, Some(target))?;
                let pre = self.preprocessor.preprocess_epoch(&raw)?;
                epochs.push(CalibrationEpoch {
                    run,
                    round: raw.stimulus.round_index as usize,
                    vibrator: raw.stimulus.vibrator,
                    is_target: raw.label == Label::Target,
                    window: extract_feature_window(&pre)?,
                });
            }
            schedules.push(schedule);
        }
        Ok(CalibrationData { targets, schedules, epochs })
    }

    pub fn calibrate(
        &self,
        profile: &SubjectProfile,
        seed: u64,
        config_hash: &str,
    ) -> Result<(DecoderModel, TrainReport, CalibrationData)> {
        let data = self.calibration_data(profile, seed)?;
        let (model, report) = calibrate(&data.epochs, &self.decoding, &self.settings.decoder, config_hash)?;
        Ok((model, report, data))
    }

    pub fn online_decoder(&self, model: &DecoderModel) -> Result<OnlineDecoder> {
        OnlineDecoder::new(self, model)
    }

    /// Synthesize and decode one run with attention fixed on `target`
    /// (`None` = resting, scored against `schedule.target`).
    pub fn run_trial(
        &self,
        decoder: &OnlineDecoder,
        profile: &SubjectProfile,
        target: VibratorId,
        attended: Option<VibratorId>,
        run_seed: u64,
    ) -> Result<TrialRecord> {
        let schedule = self.schedule(target, run_seed)?;
        let plan = attention_plan(&schedule, profile, attended, RunSeeds::from_run(run_seed).subject);
        let synth = self.synthesize(profile, &schedule, &plan, run_seed)?;
        self.decode_run(decoder, &synth)
    }

    /// Decode every stimulus of an already synthesized run.
    pub fn decode_run(&self, decoder: &OnlineDecoder, synth: &RunSynthesizer) -> Result<TrialRecord> {
        let schedule = synth.schedule().clone();
        let mut cz_sum = vec![0.0; 81];
        let mut n_target = 0usize;
        let mut windows = Vec::with_capacity(schedule.stimuli.len());
        for k in 0..schedule.stimuli.len() {
            let raw = self.raw_epoch(synth, k, Some(schedule.target))?;
            let (features, cz) = decoder.epoch_features(self, &raw)?;
            if raw.label == Label::Target {
                n_target += 1;
                cz_sum.iter_mut().zip(&cz).for_each(|(a, b)| *a += b);
            }
            windows.push(Ok(features));
        }
        let outcome = run_online_trial(&schedule, windows, &decoder.model)?;
        let cz_target_average = cz_sum.iter().map(|v| v / n_target.max(1) as f64).collect();
        Ok(TrialRecord { schedule, outcome, cz_target_average })
    }

    /// Average preprocessed Cz waveform over the target epochs of one
    /// attended run, synthesizing only Cz and the mastoids.
    pub fn cz_target_average(&self, profile: &SubjectProfile, target: VibratorId, run_seed: u64) -> Result<Vec<f64>> {
        let names: Arc<[String]> =
            [ERP_CHANNEL, REFERENCE_CHANNELS[0], REFERENCE_CHANNELS[1]].iter().map(|s| s.to_string()).collect();
        let schedule = self.schedule(target, run_seed)?;
        let plan = attention_plan(&schedule, profile, Some(target), RunSeeds::from_run(run_seed).subject);
        let mut synth =
            RunSynthesizer::new(&schedule, profile, &self.layout, Some(&names), RunSeeds::from_run(run_seed).subject)?;
        for (k, &a) in plan.iter().enumerate() {
            synth.place(k, a)?;
        }
        let projection = reref_projection(&names, &[ERP_CHANNEL.to_string()], &Array2::ones((1, 1)))?;
        let out_names: Arc<[String]> = [ERP_CHANNEL.to_string()].into_iter().collect();
        let mut sum = vec![0.0; 81];
        let mut n = 0usize;
        for (k, st) in schedule.stimuli.iter().enumerate() {
            if st.vibrator != target {
                continue;
            }
            let data = synth.epoch_data(k, EPOCH_START_MS - FILTER_CONTEXT_MS, EPOCH_END_MS + FILTER_CONTEXT_MS)?;
            let raw = Epoch {
                data,
                channel_names: names.clone(),
                t0_ms: (EPOCH_START_MS - FILTER_CONTEXT_MS) as f64,
                fs_hz: self.layout.fs_hz,
                stimulus: *st,
                label: Label::Target,
            };
            let pre = self.preprocessor.preprocess_projected(&project_epoch(&raw, &projection, out_names.clone())?)?;
            sum.iter_mut().zip(pre.data.row(0)).for_each(|(a, b)| *a += b);
            n += 1;
        }
        Ok(sum.iter().map(|v| v / n.max(1) as f64).collect())
    }

    pub fn run_continuous(
        &self,
        decoder: &OnlineDecoder,
        profile: &SubjectProfile,
        target: VibratorId,
        run_seed: u64,
    ) -> Result<(ContinuousTrace, TrialRecord)> {
        // attention is sustained across a continuous block, so there is no
        // orientation phase; lapses still apply
        let schedule = self.schedule(target, run_seed)?;
        let plan = vec![Some(target); schedule.stimuli.len()];
        let synth = self.synthesize(profile, &schedule, &plan, run_seed)?;
        let record = self.decode_run(decoder, &synth)?;
        Ok((ContinuousTrace::from_decisions(target, record.outcome.decisions.clone()), record))
    }
}

/// Decoder with the spatial filters folded into a raw-channel projection.
#[derive(Debug, Clone)]
pub struct OnlineDecoder {
    pub model: DecoderModel,
    projection: Array2<f64>,
    names: Arc<[String]>,
}

impl OnlineDecoder {
    pub fn new(pipeline: &Pipeline, model: &DecoderModel) -> Result<Self> {
        if model.channel_names.as_slice() != pipeline.decoding_channels() {
            return Err(BciError::Shape("model channels differ from the pipeline's decoding channels".into()));
        }
        let k = model.bank.n_filters();
        let n = model.bank.n_channels();
        let cz = model
            .channel_names
            .iter()
            .position(|c| c == ERP_CHANNEL)
            .ok_or_else(|| BciError::MissingChannel(ERP_CHANNEL.into()))?;
        let mut weights = Array2::zeros((k + 1, n));
        weights.slice_mut(s![..k, ..]).assign(&model.bank.filters);
        weights[[k, cz]] = 1.0;
        let projection = reref_projection(pipeline.raw_channels(), &model.channel_names, &weights)?;
        let names = (0..k).map(|i| format!("xdawn{}", i + 1)).chain([ERP_CHANNEL.to_string()]).collect();
        Ok(Self { model: model.clone(), projection, names })
    }

    /// Filtered feature window (n_filters x 40) and the preprocessed Cz
    /// waveform (81 samples) of one raw epoch.
    pub fn epoch_features(&self, pipeline: &Pipeline, raw: &Epoch) -> Result<(Array2<f64>, Vec<f64>)> {
        let projected = project_epoch(raw, &self.projection, self.names.clone())?;
        let pre = pipeline.preprocessor.preprocess_projected(&projected)?;
        let k = self.model.bank.n_filters();
        let a = pre
            .sample_index(FEATURE_START_MS as f64)
            .ok_or_else(|| BciError::Shape("epoch does not cover the feature window".into()))?;
        let features = pre.data.slice(s![..k, a..a + FEATURE_SAMPLES]).to_owned();
        let cz = pre.data.row(k).to_vec();
        Ok((features, cz))
    }
}

/// Target order for an online session: each vibrator `per_vibrator` times,
/// shuffled by seed.
pub fn target_order(per_vibrator: usize, seed: u64) -> Vec<VibratorId> {
    let mut order: Vec<VibratorId> = (0..per_vibrator).flat_map(|_| VibratorId::ALL).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[tag::TARGET_ORDER])));
    debug_assert_eq!(order.len(), per_vibrator * N_VIBRATORS);
    order
}
