//! Synthetic attending subject.
//!
//! Background activity is pink noise plus a 10 Hz rhythm and 50 Hz mains
//! pickup, independent per channel. Every stimulus evokes a small early
//! somatosensory deflection; stimuli on the attended vibrator additionally
//! evoke a P300 whose amplitude and latency jitter trial to trial. Lapses
//! (attended stimulus, no P300) follow a per-round two-state Markov chain
//! with stationary probability `lapse_prob` and lag-one autocorrelation
//! `lapse_persistence` (0 in the presets, i.e. independent rounds). Some
//! runs start with attention on the wrong vibrator; see [`attention_plan`].

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};
use crate::layout::{ChannelLayout, REFERENCE_CHANNELS};
use crate::seeds::{derive, tag};
use crate::stim::{StimulationSchedule, StimulusSpec, VibratorId};

/// Full width at half maximum over sigma for a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.3548;
pub const TEMPLATE_SPAN_MS: usize = 700;
/// Recording time before the first onset.
pub const LEAD_IN_MS: u64 = 1000;
/// Recording time after the last round ends.
pub const TAIL_MS: u64 = 1000;
/// Phase diffusion of the alpha rhythm in rad²/s.
pub const ALPHA_PHASE_DIFFUSION: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Single,
    Dual,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::Single, Condition::Dual];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Single => "single",
            Condition::Dual => "dual",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Condition::Single => 1,
            Condition::Dual => 2,
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = BciError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Condition::Single),
            "dual" => Ok(Condition::Dual),
            other => Err(BciError::Config(format!("unknown condition {other:?}"))),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generative parameters of the simulated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub condition: Condition,
    pub day: u8,
    pub p300_amp_mean_uv: f64,
    pub p300_amp_sd_uv: f64,
    pub p300_latency_mean_ms: f64,
    pub p300_latency_sd_ms: f64,
    pub p300_width_ms: f64,
    pub lapse_prob: f64,
    pub lapse_persistence: f64,
    /// Probability that a run starts with attention on a wrong vibrator.
    pub orientation_error_prob: f64,
    /// Rounds the subject needs to find the cued vibrator after such a start.
    pub orientation_error_rounds: u32,
    pub noise_rms_uv: f64,
    pub alpha_amp_uv: f64,
    pub line_amp_uv: f64,
    pub exogenous_amp_uv: f64,
    pub exogenous_latency_ms: f64,
    pub exogenous_width_ms: f64,
    /// Topography length scale in radians of scalp arc.
    pub topography_scale_rad: f64,
}

/// Day/condition presets. Amplitude and latency means are the group values
/// reported for the tactile paradigm; per-trial spreads, lapse behaviour and
/// noise levels are tuned model inputs.
const PRESETS: [(Condition, u8, f64, f64, f64, f64, f64); 6] = [
    // condition, day, amp mean, latency mean, latency sd, lapse prob, orientation error prob
    (Condition::Single, 1, 7.0, 349.0, 45.0, 0.16, 0.24),
    (Condition::Single, 2, 6.9, 330.0, 38.0, 0.12, 0.20),
    (Condition::Single, 3, 7.2, 373.0, 30.0, 0.10, 0.16),
    (Condition::Dual, 1, 4.4, 364.0, 95.0, 0.26, 0.36),
    (Condition::Dual, 2, 3.8, 372.0, 90.0, 0.24, 0.32),
    (Condition::Dual, 3, 4.7, 388.0, 45.0, 0.18, 0.24),
];

impl SubjectProfile {
    pub fn preset(condition: Condition, day: u8) -> Result<Self> {
        let &(_, _, amp, lat, lat_sd, lapse, orientation) = PRESETS
            .iter()
            .find(|p| p.0 == condition && p.1 == day)
            .ok_or_else(|| BciError::Config(format!("no preset for day {day}")))?;
        Ok(Self {
            condition,
            day,
            p300_amp_mean_uv: amp,
            p300_amp_sd_uv: 0.35 * amp,
            p300_latency_mean_ms: lat,
            p300_latency_sd_ms: lat_sd,
            p300_width_ms: 150.0,
            lapse_prob: lapse,
            lapse_persistence: 0.0,
            orientation_error_prob: orientation,
            orientation_error_rounds: 4,
            noise_rms_uv: 3.0,
            alpha_amp_uv: 5.0,
            line_amp_uv: 20.0,
            exogenous_amp_uv: 2.0,
            exogenous_latency_ms: 100.0,
            exogenous_width_ms: 50.0,
            topography_scale_rad: 0.8,
        })
    }

    /// Noise-free copy, used by tests and by the evoked-only oracle.
    pub fn noiseless(&self) -> Self {
        Self { noise_rms_uv: 0.0, alpha_amp_uv: 0.0, line_amp_uv: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let non_neg = [
            ("p300_amp_mean_uv", self.p300_amp_mean_uv),
            ("p300_amp_sd_uv", self.p300_amp_sd_uv),
            ("p300_latency_sd_ms", self.p300_latency_sd_ms),
            ("noise_rms_uv", self.noise_rms_uv),
            ("alpha_amp_uv", self.alpha_amp_uv),
            ("line_amp_uv", self.line_amp_uv),
            ("exogenous_amp_uv", self.exogenous_amp_uv),
        ];
        for (name, v) in non_neg {
            if !v.is_finite() || v < 0.0 {
                return Err(BciError::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lapse_prob) {
            return Err(BciError::InvalidParameter("lapse_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.orientation_error_prob) {
            return Err(BciError::InvalidParameter("orientation_error_prob must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.lapse_persistence) {
            return Err(BciError::InvalidParameter("lapse_persistence must lie in [0, 1)".into()));
        }
        if !(200.0..=500.0).contains(&self.p300_latency_mean_ms) {
            return Err(BciError::InvalidParameter("p300 latency mean must lie in [200, 500] ms".into()));
        }
        if !(self.p300_width_ms > 0.0 && self.exogenous_width_ms > 0.0 && self.topography_scale_rad > 0.0) {
            return Err(BciError::InvalidParameter("widths and length scale must be positive".into()));
        }
        if !(self.exogenous_latency_ms > 0.0 && self.exogenous_latency_ms < TEMPLATE_SPAN_MS as f64) {
            return Err(BciError::InvalidParameter("exogenous latency out of range".into()));
        }
        Ok(())
    }
}

/// Gaussian bump over 0..=700 ms with the given peak amplitude and FWHM,
/// zeroed beyond three standard deviations.
pub fn p300_template(amp_uv: f64, latency_ms: f64, width_ms: f64, fs: f64) -> Result<Vec<f64>> {
    if ![amp_uv, latency_ms, width_ms, fs].iter().all(|v| v.is_finite()) {
        return Err(BciError::NonFinite("template parameters"));
    }
    if amp_uv < 0.0 || width_ms <= 0.0 || fs <= 0.0 {
        return Err(BciError::InvalidParameter("template needs amp >= 0, width > 0, fs > 0".into()));
    }
    if !(latency_ms > 0.0 && latency_ms < TEMPLATE_SPAN_MS as f64) {
        return Err(BciError::InvalidParameter(format!("latency {latency_ms} ms outside (0, 700)")));
    }
    let sigma = width_ms / FWHM_PER_SIGMA;
    let n = (TEMPLATE_SPAN_MS as f64 * fs / 1000.0).round() as usize + 1;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 * 1000.0 / fs;
            let z = (t - latency_ms) / sigma;
            if z.abs() > 3.0 {
                0.0
            } else {
                amp_uv * (-0.5 * z * z).exp()
            }
        })
        .collect())
}

/// Per-channel gain of the evoked response: 1 at Cz, `exp(-arc / scale)`
/// elsewhere.
pub fn spatial_topography(layout: &ChannelLayout, scale_rad: f64) -> Vec<f64> {
    let cz = layout.cz();
    (0..layout.len()).map(|c| (-layout.arc_distance(cz, c) / scale_rad).exp()).collect()
}

/// Background activity for the given layout channels.
///
/// Each channel draws from its own stream keyed by its layout index, so a
/// channel's noise does not depend on which other channels are generated.
pub fn background_noise_channels(
    profile: &SubjectProfile,
    n_samples: usize,
    channels: &[usize],
    seed: u64,
    fs: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros((channels.len(), n_samples));
    for (row, &ch) in channels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[tag::NOISE, ch as u64]));
        let mut lane = out.row_mut(row);
        if profile.noise_rms_uv > 0.0 {
            let pink = pink_noise(&mut rng, n_samples);
            let mean = pink.iter().sum::<f64>() / n_samples as f64;
            let rms = (pink.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_samples as f64).sqrt();
            let gain = if rms > 0.0 { profile.noise_rms_uv / rms } else { 0.0 };
            for (o, p) in lane.iter_mut().zip(&pink) {
                *o = (p - mean) * gain;
            }
        }
        let line_phase = rng.random::<f64>() * std::f64::consts::TAU;
        // The rhythm's phase wanders (Wiener process) so it is not locked to
        // the 400 ms stimulus grid, which is an exact multiple of its period.
        let mut alpha_rng = ChaCha8Rng::seed_from_u64(derive(seed, &[tag::NOISE, ch as u64, 1]));
        let mut alpha_phase = alpha_rng.random::<f64>() * std::f64::consts::TAU;
        let step = std::f64::consts::TAU * 10.0 / fs;
        let diffusion = (ALPHA_PHASE_DIFFUSION / fs).sqrt();
        for (i, o) in lane.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *o += profile.alpha_amp_uv * alpha_phase.sin()
                + profile.line_amp_uv * (std::f64::consts::TAU * 50.0 * t + line_phase).sin();
            let kick: f64 = StandardNormal.sample(&mut alpha_rng);
            alpha_phase += step + diffusion * kick;
        }
    }
    out
}

pub fn background_noise(profile: &SubjectProfile, n_samples: usize, n_channels: usize, seed: u64) -> Array2<f64> {
    let channels: Vec<usize> = (0..n_channels).collect();
    background_noise_channels(profile, n_samples, &channels, seed, crate::layout::FS_HZ)
}

/// Paul Kellet's refined pink filter driven by unit white noise.
fn pink_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    const BURN_IN: usize = 4000;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + BURN_IN {
        let white: f64 = StandardNormal.sample(rng);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let pink = b.iter().sum::<f64>() + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= BURN_IN {
            out.push(pink);
        }
    }
    out
}

/// Per-stimulus random draws, made for every stimulus whether or not it is
/// attended, so changing attention never shifts other stimuli's draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimulusDraw {
    pub p300_amp_uv: f64,
    pub p300_latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordedEvent {
    pub stimulus: StimulusSpec,
    /// Ground truth: the stimulus was on the attended vibrator.
    pub is_target: bool,
    /// A P300 was actually placed (attended and not lapsed).
    pub evoked_p300: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRecording {
    pub channel_names: Vec<String>,
    pub fs_hz: f64,
    /// Channels x samples, microvolts.
    pub data: Array2<f64>,
    /// Recording time of sample 0 relative to the first onset, in ms (negative).
    pub t0_ms: i64,
    pub events: Vec<RecordedEvent>,
}

impl ContinuousRecording {
    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    /// Sample index of a time given in ms relative to the first onset.
    pub fn sample_at(&self, t_ms: i64) -> Option<usize> {
        let idx = (t_ms - self.t0_ms) as f64 * self.fs_hz / 1000.0;
        (idx >= 0.0 && (idx as usize) < self.n_samples()).then_some(idx.round() as usize)
    }

    pub fn window(&self, start_ms: i64, end_ms_inclusive: i64) -> Option<ArrayView2<'_, f64>> {
        let a = self.sample_at(start_ms)?;
        let b = self.sample_at(end_ms_inclusive)?;
        Some(self.data.slice(s![.., a..=b]))
    }
}

/// Incremental run synthesizer.
///
/// Background noise for the whole run is drawn up front; evoked responses are
/// placed stimulus by stimulus as attention becomes known. The batch
/// [`synthesize_run`] and the live gateway both go through this type.
#[derive(Debug, Clone)]
pub struct RunSynthesizer {
    schedule: StimulationSchedule,
    profile: SubjectProfile,
    channels: Vec<usize>,
    channel_names: Vec<String>,
    gains: Vec<f64>,
    data: Array2<f64>,
    draws: Vec<StimulusDraw>,
    round_lapsed: Vec<bool>,
    events: Vec<Option<RecordedEvent>>,
    fs: f64,
}

impl RunSynthesizer {
    pub fn new(
        schedule: &StimulationSchedule,
        profile: &SubjectProfile,
        layout: &ChannelLayout,
        channels: Option<&[String]>,
        seed: u64,
    ) -> Result<Self> {
        profile.validate()?;
        let fs = layout.fs_hz;
        let channels: Vec<usize> = match channels {
            None => (0..layout.len()).collect(),
            Some(names) => names.iter().map(|n| layout.require(n)).collect::<Result<_>>()?,
        };
        let channel_names = channels.iter().map(|&c| layout.names()[c].clone()).collect();
        let topo = spatial_topography(layout, profile.topography_scale_rad);
        let gains = channels
            .iter()
            .map(|&c| {
                if REFERENCE_CHANNELS.contains(&layout.names()[c].as_str()) {
                    0.0
                } else {
                    topo[c]
                }
            })
            .collect();
        let n_ms = LEAD_IN_MS + schedule.duration_ms() + TAIL_MS;
        let n_samples = (n_ms as f64 * fs / 1000.0) as usize;
        let data = background_noise_channels(profile, n_samples, &channels, seed, fs);

        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[tag::EVOKED]));
        let amp = Normal::new(profile.p300_amp_mean_uv, profile.p300_amp_sd_uv)
            .map_err(|e| BciError::InvalidParameter(e.to_string()))?;
        let lat = Normal::new(profile.p300_latency_mean_ms, profile.p300_latency_sd_ms)
            .map_err(|e| BciError::InvalidParameter(e.to_string()))?;
        let draws = schedule
            .stimuli
            .iter()
            .map(|_| StimulusDraw {
                p300_amp_uv: amp.sample(&mut rng).max(0.0),
                p300_latency_ms: lat.sample(&mut rng).clamp(100.0, 650.0),
            })
            .collect();

        let round_lapsed = lapse_chain(
            profile.lapse_prob,
            profile.lapse_persistence,
            schedule.n_rounds(),
            derive(seed, &[tag::LAPSE]),
        );
        Ok(Self {
            events: vec![None; schedule.stimuli.len()],
            schedule: schedule.clone(),
            profile: profile.clone(),
            channels,
            channel_names,
            gains,
            data,
            draws,
            round_lapsed,
            fs,
        })
    }

    pub fn schedule(&self) -> &StimulationSchedule {
        &self.schedule
    }

    pub fn draws(&self) -> &[StimulusDraw] {
        &self.draws
    }

    pub fn round_lapsed(&self) -> &[bool] {
        &self.round_lapsed
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn layout_channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn n_placed(&self) -> usize {
        self.events.iter().take_while(|e| e.is_some()).count()
    }

    fn sample_of(&self, t_ms: f64) -> isize {
        ((t_ms + LEAD_IN_MS as f64) * self.fs / 1000.0).round() as isize
    }

    fn add_bump(&mut self, onset_ms: u64, amp: f64, latency_ms: f64, width_ms: f64) -> Result<()> {
        if amp == 0.0 {
            return Ok(());
        }
        let template = p300_template(amp, latency_ms, width_ms, self.fs)?;
        let start = self.sample_of(onset_ms as f64);
        let n = self.data.ncols() as isize;
        for (i, &v) in template.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let idx = start + i as isize;
            if (0..n).contains(&idx) {
                for (row, &g) in self.gains.iter().enumerate() {
                    if g != 0.0 {
                        self.data[[row, idx as usize]] += g * v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Place stimulus `k` given the vibrator the subject attends at that moment.
    pub fn place(&mut self, k: usize, attended: Option<VibratorId>) -> Result<RecordedEvent> {
        let stimulus = *self
            .schedule
            .stimuli
            .get(k)
            .ok_or_else(|| BciError::InvalidParameter(format!("stimulus {k} out of range")))?;
        if self.events[k].is_some() {
            return Err(BciError::InvalidParameter(format!("stimulus {k} already placed")));
        }
        let p = self.profile.clone();
        self.add_bump(stimulus.onset_ms, p.exogenous_amp_uv, p.exogenous_latency_ms, p.exogenous_width_ms)?;
        let is_target = attended == Some(stimulus.vibrator);
        let lapsed = self.round_lapsed[stimulus.round_index as usize];
        let evoked_p300 = is_target && !lapsed;
        if evoked_p300 {
            let d = self.draws[k];
            self.add_bump(stimulus.onset_ms, d.p300_amp_uv, d.p300_latency_ms, p.p300_width_ms)?;
        }
        let event = RecordedEvent { stimulus, is_target, evoked_p300 };
        self.events[k] = Some(event);
        Ok(event)
    }

    /// Raw samples for `[onset + start_ms, onset + end_ms]` of stimulus `k`.
    pub fn epoch_data(&self, k: usize, start_ms: i64, end_ms: i64) -> Result<Array2<f64>> {
        let onset = self.schedule.stimuli[k].onset_ms as f64;
        let a = self.sample_of(onset + start_ms as f64);
        let b = self.sample_of(onset + end_ms as f64);
        if a < 0 || b >= self.data.ncols() as isize {
            return Err(BciError::Data(format!("epoch {k} extends beyond the recording")));
        }
        Ok(self.data.slice(s![.., a as usize..=b as usize]).to_owned())
    }

    pub fn into_recording(self) -> Result<ContinuousRecording> {
        let events = self
            .events
            .into_iter()
            .enumerate()
            .map(|(k, e)| e.ok_or_else(|| BciError::Data(format!("stimulus {k} never placed"))))
            .collect::<Result<_>>()?;
        Ok(ContinuousRecording {
            channel_names: self.channel_names,
            fs_hz: self.fs,
            data: self.data,
            t0_ms: -(LEAD_IN_MS as i64),
            events,
        })
    }
}

fn lapse_chain(p: f64, rho: f64, n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stay = p + rho * (1.0 - p);
    let enter = p * (1.0 - rho);
    let mut state = rng.random::<f64>() < p;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let u: f64 = rng.random();
            state = if state { u < stay } else { u < enter };
        }
        out.push(state);
    }
    out
}

/// Per-stimulus attention for a run cued on `cued` (`None` = resting).
///
/// With probability `orientation_error_prob` the subject first attends one
/// of the other vibrators, chosen uniformly, for `orientation_error_rounds`
/// rounds.
pub fn attention_plan(
    schedule: &StimulationSchedule,
    profile: &SubjectProfile,
    cued: Option<VibratorId>,
    seed: u64,
) -> Vec<Option<VibratorId>> {
    let mut plan = vec![cued; schedule.stimuli.len()];
    let Some(cued) = cued else { return plan };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[tag::ORIENTATION]));
    let erred = rng.random::<f64>() < profile.orientation_error_prob;
    let others: Vec<VibratorId> = VibratorId::ALL.into_iter().filter(|&v| v != cued).collect();
    let wrong = others[rng.random_range(0..others.len())];
    if erred {
        for (a, st) in plan.iter_mut().zip(&schedule.stimuli) {
            if st.round_index < profile.orientation_error_rounds {
                *a = Some(wrong);
            }
        }
    }
    plan
}

/// Synthesize a full run with attention fixed on one vibrator.
pub fn synthesize_run(
    schedule: &StimulationSchedule,
    profile: &SubjectProfile,
    attended: VibratorId,
    seed: u64,
) -> Result<ContinuousRecording> {
    let plan = vec![Some(attended); schedule.stimuli.len()];
    synthesize_run_with_attention(schedule, profile, &ChannelLayout::standard_64(), &plan, None, seed)
}

/// Synthesize with per-stimulus attention (`None` = resting).
pub fn synthesize_run_with_attention(
    schedule: &StimulationSchedule,
    profile: &SubjectProfile,
    layout: &ChannelLayout,
    attention: &[Option<VibratorId>],
    channels: Option<&[String]>,
    seed: u64,
) -> Result<ContinuousRecording> {
    if attention.len() != schedule.stimuli.len() {
        return Err(BciError::Shape(format!(
            "attention plan has {} entries for {} stimuli",
            attention.len(),
            schedule.stimuli.len()
        )));
    }
    let mut synth = RunSynthesizer::new(schedule, profile, layout, channels, seed)?;
    for (k, &a) in attention.iter().enumerate() {
        synth.place(k, a)?;
    }
    synth.into_recording()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stim::build_run_schedule;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn v(i: u8) -> VibratorId {
        VibratorId::new(i).unwrap()
    }

    /// Welch PSD with Hann segments; returns power per bin.
    fn welch(x: &[f64], seg: usize) -> Vec<f64> {
        let fft = FftPlanner::new().plan_fft_forward(seg);
        let win: Vec<f64> = (0..seg)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / seg as f64).cos())
            .collect();
        let mut acc = vec![0.0; seg / 2 + 1];
        let mut count = 0;
        let mut start = 0;
        while start + seg <= x.len() {
            let mut buf: Vec<Complex<f64>> =
                (0..seg).map(|i| Complex::new(x[start + i] * win[i], 0.0)).collect();
            fft.process(&mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b.norm_sqr();
            }
            count += 1;
            start += seg / 2;
        }
        acc.iter().map(|a| a / count as f64).collect()
    }

    #[test]
    fn template_peaks_at_latency() {
        let t = p300_template(7.0, 350.0, 150.0, 1000.0).unwrap();
        assert_eq!(t.len(), 701);
        let (imax, &max) = t.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imax, 350);
        assert!((max - 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_template_is_flat() {
        assert!(p300_template(0.0, 350.0, 150.0, 1000.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn template_integral_matches_gaussian_closed_form() {
        let (amp, width) = (7.0, 150.0);
        let sigma = width / FWHM_PER_SIGMA;
        let t = p300_template(amp, 350.0, width, 1000.0).unwrap();
        let integral: f64 = t.iter().sum::<f64>() * 1.0; // 1 ms per sample
        let expected = amp * sigma * (std::f64::consts::TAU).sqrt();
        assert!((integral / expected - 1.0).abs() < 0.01, "{integral} vs {expected}");
    }

    #[test]
    fn template_rejects_bad_parameters() {
        assert!(p300_template(f64::NAN, 350.0, 150.0, 1000.0).is_err());
        assert!(p300_template(1.0, 0.0, 150.0, 1000.0).is_err());
        assert!(p300_template(1.0, 700.0, 150.0, 1000.0).is_err());
        assert!(p300_template(-1.0, 300.0, 150.0, 1000.0).is_err());
    }

    #[test]
    fn topography_peaks_at_cz() {
        let layout = ChannelLayout::standard_64();
        let g = spatial_topography(&layout, 0.8);
        let cz = layout.cz();
        assert_eq!(g[cz], 1.0);
        assert!(g.iter().enumerate().all(|(i, &x)| i == cz || x < 1.0));
        assert!(g.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(g, spatial_topography(&layout, 0.8));
        let far = (0..layout.len())
            .max_by(|&a, &b| layout.arc_distance(cz, a).total_cmp(&layout.arc_distance(cz, b)))
            .unwrap();
        // arc(Cz, M1) = 18 deg * |(-5.5, -2)| = 105.3 deg = 1.838 rad; exp(-1.838/0.8) = 0.100
        assert!(g[far] < 0.2, "{} gain {}", layout.names()[far], g[far]);
        assert!((g[far] - 0.1005).abs() < 1e-3);
    }

    #[test]
    fn noise_is_deterministic_and_scaled() {
        let p = SubjectProfile::preset(Condition::Single, 3).unwrap();
        let a = background_noise(&p, 5000, 3, 42);
        assert_eq!(a, background_noise(&p, 5000, 3, 42));
        assert_ne!(a, background_noise(&p, 5000, 3, 43));
        let quiet = SubjectProfile { alpha_amp_uv: 0.0, line_amp_uv: 0.0, ..p };
        let b = background_noise(&quiet, 5000, 3, 42);
        for row in b.rows() {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
            assert!((rms - quiet.noise_rms_uv).abs() < 1e-9);
        }
    }

    #[test]
    fn line_noise_stands_out_by_20_db() {
        let p = SubjectProfile::preset(Condition::Single, 3).unwrap();
        let x = background_noise(&p, 32_000, 1, 3);
        let psd = welch(x.row(0).as_slice().unwrap(), 1000); // 1 Hz bins
        let neighbours = (psd[45] + psd[46] + psd[54] + psd[55]) / 4.0;
        let db = 10.0 * (psd[50] / neighbours).log10();
        assert!(db >= 20.0, "50 Hz peak only {db:.1} dB above neighbours");
    }

    #[test]
    fn no_discrete_peaks_without_rhythms() {
        let p = SubjectProfile::preset(Condition::Single, 3).unwrap();
        let quiet = SubjectProfile { alpha_amp_uv: 0.0, line_amp_uv: 0.0, ..p };
        let x = background_noise(&quiet, 32_000, 1, 3);
        let psd = welch(x.row(0).as_slice().unwrap(), 1000);
        for f in [10usize, 50] {
            let neighbours = (psd[f - 5] + psd[f - 4] + psd[f + 4] + psd[f + 5]) / 4.0;
            let db = 10.0 * (psd[f] / neighbours).log10();
            assert!(db < 6.0, "unexpected {db:.1} dB peak at {f} Hz");
        }
    }

    #[test]
    fn evoked_energy_is_additive() {
        let base = SubjectProfile::preset(Condition::Single, 3).unwrap().noiseless();
        let schedule = build_run_schedule(v(2), 20, 8).unwrap();
        let with = SubjectProfile { lapse_prob: 0.0, ..base.clone() };
        let without = SubjectProfile { lapse_prob: 1.0, ..base.clone() };
        let a = synthesize_run(&schedule, &with, v(2), 5).unwrap();
        let b = synthesize_run(&schedule, &without, v(2), 5).unwrap();
        let synth = RunSynthesizer::new(&schedule, &with, &ChannelLayout::standard_64(), None, 5).unwrap();
        let layout = ChannelLayout::standard_64();
        let topo = spatial_topography(&layout, base.topography_scale_rad);
        let mut expected = Array2::<f64>::zeros(a.data.dim());
        for (k, st) in schedule.stimuli.iter().enumerate() {
            if st.vibrator != v(2) {
                continue;
            }
            let d = synth.draws()[k];
            let t = p300_template(d.p300_amp_uv, d.p300_latency_ms, base.p300_width_ms, 1000.0).unwrap();
            let start = (st.onset_ms + LEAD_IN_MS) as usize;
            for c in 0..64 {
                if REFERENCE_CHANNELS.contains(&layout.names()[c].as_str()) {
                    continue;
                }
                for (i, &x) in t.iter().enumerate() {
                    expected[[c, start + i]] += topo[c] * x;
                }
            }
        }
        let diff = &a.data - &b.data;
        let err = (&diff - &expected).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-9, "max deviation {err}");
    }

    #[test]
    fn ground_truth_follows_attention() {
        let p = SubjectProfile::preset(Condition::Single, 3).unwrap();
        let schedule = build_run_schedule(v(1), 5, 1).unwrap();
        let rec = synthesize_run(&schedule, &p, v(3), 9).unwrap();
        assert!(rec.events.iter().all(|e| e.is_target == (e.stimulus.vibrator == v(3))));
        assert!(rec.events.iter().all(|e| !e.evoked_p300 || e.is_target));
        assert!(rec.data.iter().all(|x| x.is_finite()));
        let last = schedule.last_onset_ms() as i64;
        assert!(rec.sample_at(last + 700).is_some());
    }

    #[test]
    fn attention_only_moves_the_p300() {
        let p = SubjectProfile { lapse_prob: 0.0, ..SubjectProfile::preset(Condition::Single, 3).unwrap() };
        let schedule = build_run_schedule(v(1), 6, 4).unwrap();
        let a = synthesize_run(&schedule, &p, v(1), 9).unwrap();
        let b = synthesize_run(&schedule, &p, v(2), 9).unwrap();
        let quiet = p.noiseless();
        let qa = synthesize_run(&schedule, &quiet, v(1), 9).unwrap();
        let qb = synthesize_run(&schedule, &quiet, v(2), 9).unwrap();
        // The noisy difference equals the evoked-only difference.
        let d_noisy = &a.data - &b.data;
        let d_quiet = &qa.data - &qb.data;
        let err = (&d_noisy - &d_quiet).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn full_lapse_leaves_no_p300() {
        let p = SubjectProfile { lapse_prob: 1.0, ..SubjectProfile::preset(Condition::Single, 3).unwrap() };
        let schedule = build_run_schedule(v(1), 20, 4).unwrap();
        let rec = synthesize_run(&schedule, &p, v(1), 2).unwrap();
        assert!(rec.events.iter().all(|e| !e.evoked_p300));
    }

    #[test]
    fn orientation_errors_cover_the_first_rounds() {
        let schedule = build_run_schedule(v(3), 20, 2).unwrap();
        let base = SubjectProfile::preset(Condition::Single, 3).unwrap();
        let never = SubjectProfile { orientation_error_prob: 0.0, ..base.clone() };
        assert!(attention_plan(&schedule, &never, Some(v(3)), 5).iter().all(|&a| a == Some(v(3))));
        assert!(attention_plan(&schedule, &base, None, 5).iter().all(|a| a.is_none()));
        let always = SubjectProfile { orientation_error_prob: 1.0, orientation_error_rounds: 3, ..base };
        for seed in 0..20 {
            let plan = attention_plan(&schedule, &always, Some(v(3)), seed);
            let wrong = plan[0].unwrap();
            assert_ne!(wrong, v(3));
            for (a, st) in plan.iter().zip(&schedule.stimuli) {
                assert_eq!(*a, Some(if st.round_index < 3 { wrong } else { v(3) }));
            }
        }
    }

    #[test]
    fn lapse_chain_statistics() {
        let n = 200_000;
        let chain = lapse_chain(0.2, 0.9, n, 1);
        let frac = chain.iter().filter(|&&x| x).count() as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.02, "stationary fraction {frac}");
        let iid = lapse_chain(0.2, 0.0, n, 2);
        let frac = iid.iter().filter(|&&x| x).count() as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.01);
    }

    #[test]
    fn invalid_profiles_rejected() {
        let p = SubjectProfile::preset(Condition::Dual, 2).unwrap();
        assert!(SubjectProfile { lapse_prob: 1.5, ..p.clone() }.validate().is_err());
        assert!(SubjectProfile { noise_rms_uv: -1.0, ..p.clone() }.validate().is_err());
        assert!(SubjectProfile { p300_latency_mean_ms: 600.0, ..p.clone() }.validate().is_err());
        assert!(SubjectProfile::preset(Condition::Dual, 4).is_err());
        assert!(p.validate().is_ok());
    }
}
