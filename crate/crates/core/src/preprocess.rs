//! Epoch preprocessing: band-pass, notch, mastoid re-reference, baseline
//! removal, decimation to 100 Hz and the 100..500 ms feature window.
//!
//! Raw epochs are cut with extra context on both sides so the long FIR
//! filters see more signal than their own length; the context is trimmed
//! after filtering.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};
use crate::filter::{design_fir, FilterKind, FirFilter, DEFAULT_TAPS};
use crate::layout::{FRONTAL_EXCLUDED, REFERENCE_CHANNELS};
use crate::stim::StimulusSpec;
use crate::synth::ContinuousRecording;

pub const EPOCH_START_MS: i64 = -100;
pub const EPOCH_END_MS: i64 = 700;
/// Extra raw signal cut on each side of an epoch for filtering.
pub const FILTER_CONTEXT_MS: i64 = 600;
pub const FEATURE_START_MS: i64 = 100;
pub const FEATURE_END_MS: i64 = 500;
pub const DECIMATION: usize = 10;
pub const FEATURE_FS_HZ: f64 = 100.0;
pub const FEATURE_SAMPLES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
            Label::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            "unknown" => Ok(Label::Unknown),
            other => Err(BciError::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    /// Channels x samples, microvolts.
    pub data: Array2<f64>,
    pub channel_names: Arc<[String]>,
    /// Time of the first sample relative to stimulus onset.
    pub t0_ms: f64,
    pub fs_hz: f64,
    pub stimulus: StimulusSpec,
    pub label: Label,
}

impl Epoch {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    /// Index of the sample at `t_ms` (rounded), if inside the epoch.
    pub fn sample_index(&self, t_ms: f64) -> Option<usize> {
        let idx = ((t_ms - self.t0_ms) * self.fs_hz / 1000.0).round();
        (idx >= 0.0 && (idx as usize) < self.n_samples()).then_some(idx as usize)
    }

    pub fn time_ms(&self, idx: usize) -> f64 {
        self.t0_ms + idx as f64 * 1000.0 / self.fs_hz
    }

    fn with_data(&self, data: Array2<f64>, names: Arc<[String]>, t0_ms: f64, fs_hz: f64) -> Self {
        Self { data, channel_names: names, t0_ms, fs_hz, stimulus: self.stimulus, label: self.label }
    }

    /// Cut the raw epoch for event `k` of a recording, including filter
    /// context on both sides.
    pub fn cut(rec: &ContinuousRecording, k: usize, names: Arc<[String]>) -> Result<Self> {
        let ev = rec.events.get(k).ok_or_else(|| BciError::Data(format!("no event {k}")))?;
        let onset = ev.stimulus.onset_ms as i64;
        let start = onset + EPOCH_START_MS - FILTER_CONTEXT_MS;
        let end = onset + EPOCH_END_MS + FILTER_CONTEXT_MS;
        let view = rec
            .window(start, end)
            .ok_or_else(|| BciError::Data(format!("epoch {k} extends beyond the recording")))?;
        Ok(Self {
            data: view.to_owned(),
            channel_names: names,
            t0_ms: (EPOCH_START_MS - FILTER_CONTEXT_MS) as f64,
            fs_hz: rec.fs_hz,
            stimulus: ev.stimulus,
            label: if ev.is_target { Label::Target } else { Label::Nontarget },
        })
    }
}

fn mastoid_indices(epoch: &Epoch) -> Result<(usize, usize)> {
    let m1 = epoch.channel_index(REFERENCE_CHANNELS[0]);
    let m2 = epoch.channel_index(REFERENCE_CHANNELS[1]);
    match (m1, m2) {
        (Some(a), Some(b)) => Ok((a, b)),
        (None, _) => Err(BciError::MissingChannel(REFERENCE_CHANNELS[0].into())),
        (_, None) => Err(BciError::MissingChannel(REFERENCE_CHANNELS[1].into())),
    }
}

/// Subtract the mastoid mean from every channel, then drop the mastoids.
pub fn rereference(epoch: &Epoch) -> Result<Epoch> {
    let (m1, m2) = mastoid_indices(epoch)?;
    let reference = (&epoch.data.row(m1) + &epoch.data.row(m2)) * 0.5;
    let keep: Vec<usize> = (0..epoch.n_channels()).filter(|&c| c != m1 && c != m2).collect();
    let mut data = epoch.data.select(Axis(0), &keep);
    for mut row in data.rows_mut() {
        row -= &reference;
    }
    let names: Arc<[String]> = keep.iter().map(|&c| epoch.channel_names[c].clone()).collect();
    Ok(epoch.with_data(data, names, epoch.t0_ms, epoch.fs_hz))
}

/// Subtract each channel's mean over [-100, 0) ms.
pub fn baseline_correct(epoch: &Epoch) -> Epoch {
    let a = epoch.sample_index(EPOCH_START_MS as f64).unwrap_or(0);
    let b = epoch.sample_index(0.0).unwrap_or(epoch.n_samples());
    let mut out = epoch.clone();
    if b > a {
        for mut row in out.data.rows_mut() {
            let mean = row.slice(s![a..b]).mean().unwrap_or(0.0);
            row -= mean;
        }
    }
    out
}

/// Keep every `factor`-th sample starting with the first.
pub fn decimate(epoch: &Epoch, factor: usize) -> Result<Epoch> {
    if factor == 0 {
        return Err(BciError::InvalidParameter("decimation factor must be positive".into()));
    }
    let new_fs = epoch.fs_hz / factor as f64;
    if (new_fs - new_fs.round()).abs() > 1e-9 {
        return Err(BciError::InvalidParameter(format!(
            "decimating {} Hz by {factor} gives non-integer rate {new_fs:.3} Hz",
            epoch.fs_hz
        )));
    }
    let data = epoch.data.slice(s![.., ..;factor]).to_owned();
    Ok(epoch.with_data(data, epoch.channel_names.clone(), epoch.t0_ms, new_fs))
}

/// The 100..500 ms window at 100 Hz over the decoding channels (mastoids and
/// frontal block removed).
pub fn extract_feature_window(epoch: &Epoch) -> Result<Array2<f64>> {
    if (epoch.fs_hz - FEATURE_FS_HZ).abs() > 1e-9 {
        return Err(BciError::InvalidParameter(format!(
            "feature window needs {FEATURE_FS_HZ} Hz data, got {} Hz",
            epoch.fs_hz
        )));
    }
    let a = epoch
        .sample_index(FEATURE_START_MS as f64)
        .ok_or_else(|| BciError::Shape("epoch does not cover 100 ms".into()))?;
    if a + FEATURE_SAMPLES > epoch.n_samples() {
        return Err(BciError::Shape("epoch does not cover 500 ms".into()));
    }
    let keep: Vec<usize> = epoch
        .channel_names
        .iter()
        .enumerate()
        .filter(|(_, n)| !FRONTAL_EXCLUDED.contains(&n.as_str()) && !REFERENCE_CHANNELS.contains(&n.as_str()))
        .map(|(i, _)| i)
        .collect();
    Ok(epoch.data.slice(s![.., a..a + FEATURE_SAMPLES]).select(Axis(0), &keep))
}

fn trim_to_epoch(epoch: &Epoch) -> Result<Epoch> {
    let a = epoch
        .sample_index(EPOCH_START_MS as f64)
        .ok_or_else(|| BciError::Shape("epoch does not start by -100 ms".into()))?;
    let b = epoch
        .sample_index(EPOCH_END_MS as f64)
        .ok_or_else(|| BciError::Shape("epoch does not reach 700 ms".into()))?;
    let data = epoch.data.slice(s![.., a..=b]).to_owned();
    Ok(epoch.with_data(data, epoch.channel_names.clone(), EPOCH_START_MS as f64, epoch.fs_hz))
}

/// The designed filter pair, shared by calibration and online decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub bandpass: FirFilter,
    pub notch: FirFilter,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(DEFAULT_TAPS, 1000.0).expect("default filters are valid")
    }
}

impl Preprocessor {
    pub fn new(n_taps: usize, fs_hz: f64) -> Result<Self> {
        Ok(Self {
            bandpass: design_fir(FilterKind::EEG_BANDPASS, fs_hz, n_taps)?,
            notch: design_fir(FilterKind::LINE_NOTCH, fs_hz, n_taps)?,
        })
    }

    fn filter(&self, epoch: &Epoch) -> Result<Epoch> {
        if (epoch.fs_hz - self.bandpass.fs_hz()).abs() > 1e-9 {
            return Err(BciError::InvalidParameter(format!(
                "filters designed for {} Hz, epoch at {} Hz",
                self.bandpass.fs_hz(),
                epoch.fs_hz
            )));
        }
        let mut out = epoch.clone();
        self.bandpass.filter_rows(&mut out.data)?;
        self.notch.filter_rows(&mut out.data)?;
        Ok(out)
    }

    /// Band-pass, notch, trim context, re-reference, baseline, decimate.
    pub fn preprocess_epoch(&self, raw: &Epoch) -> Result<Epoch> {
        let filtered = trim_to_epoch(&self.filter(raw)?)?;
        let referenced = rereference(&filtered)?;
        decimate(&baseline_correct(&referenced), DECIMATION)
    }

    /// Chain for epochs whose rows are already linear combinations of
    /// re-referenced channels (see [`reref_projection`]): everything except
    /// the re-reference step.
    pub fn preprocess_projected(&self, raw: &Epoch) -> Result<Epoch> {
        let filtered = trim_to_epoch(&self.filter(raw)?)?;
        decimate(&baseline_correct(&filtered), DECIMATION)
    }
}

/// Fold the mastoid re-reference into a set of channel weights.
///
/// `weights` (k x targets.len()) combines re-referenced channels named in
/// `targets`. The returned k x raw_names.len() matrix gives the same
/// combination when applied to raw, unreferenced channels. Every stage of the
/// chain is linear and acts per channel, so projecting first and filtering
/// the k virtual channels equals filtering every channel and projecting
/// afterwards.
pub fn reref_projection(raw_names: &[String], targets: &[String], weights: &Array2<f64>) -> Result<Array2<f64>> {
    if weights.ncols() != targets.len() {
        return Err(BciError::Shape(format!(
            "weights have {} columns for {} channels",
            weights.ncols(),
            targets.len()
        )));
    }
    let find = |name: &str| {
        raw_names.iter().position(|n| n == name).ok_or_else(|| BciError::MissingChannel(name.to_string()))
    };
    let m1 = find(REFERENCE_CHANNELS[0])?;
    let m2 = find(REFERENCE_CHANNELS[1])?;
    let mut a = Array2::zeros((weights.nrows(), raw_names.len()));
    for (j, name) in targets.iter().enumerate() {
        let c = find(name)?;
        for r in 0..weights.nrows() {
            let w = weights[[r, j]];
            a[[r, c]] += w;
            a[[r, m1]] -= 0.5 * w;
            a[[r, m2]] -= 0.5 * w;
        }
    }
    Ok(a)
}

/// Apply a projection to a raw epoch, naming the output rows.
pub fn project_epoch(raw: &Epoch, projection: &Array2<f64>, names: Arc<[String]>) -> Result<Epoch> {
    if projection.ncols() != raw.n_channels() || projection.nrows() != names.len() {
        return Err(BciError::Shape("projection does not match epoch channels".into()));
    }
    let data = projection.dot(&raw.data);
    Ok(raw.with_data(data, names, raw.t0_ms, raw.fs_hz))
}
