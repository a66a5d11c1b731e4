//! External epoch container: a directory with `manifest.json` and a raw
//! little-endian f64 data file (epochs x channels x samples, microvolts).
//!
//! Ingestion checks the montage and sampling rate against the layout so that
//! recorded data can be fed to the same calibration path as synthetic data.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::classifier::CalibrationEpoch;
use crate::error::{BciError, Result};
use crate::layout::ChannelLayout;
use crate::pipeline::{Pipeline, RunSeeds};
use crate::preprocess::{extract_feature_window, Epoch, Label, Preprocessor, EPOCH_END_MS, EPOCH_START_MS, FILTER_CONTEXT_MS};
use crate::stim::{StimulusSpec, VibratorId};
use crate::synth::{attention_plan, RunSynthesizer, SubjectProfile};

pub const CONTAINER_FORMAT: &str = "tbci-epochs/1";
pub const CONTAINER_MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "data.f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMeta {
    pub run: usize,
    pub round: u32,
    pub vibrator: VibratorId,
    pub onset_ms: u64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerManifest {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub fs_hz: f64,
    /// Time of the first sample relative to stimulus onset.
    pub t0_ms: f64,
    pub n_samples: usize,
    pub channels: Vec<String>,
    pub epochs: Vec<EpochMeta>,
}

/// Validated epochs with channels in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub channel_names: Arc<[String]>,
    pub fs_hz: f64,
    pub epochs: Vec<Epoch>,
    pub runs: Vec<usize>,
}

impl EpochSet {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Preprocess into labelled feature windows over the decoding channels.
    pub fn to_calibration_epochs(&self, preprocessor: &Preprocessor) -> Result<Vec<CalibrationEpoch>> {
        self.epochs
            .iter()
            .zip(&self.runs)
            .map(|(e, &run)| {
                let is_target = match e.label {
                    Label::Target => true,
                    Label::Nontarget => false,
                    Label::Unknown => {
                        return Err(BciError::Data("calibration needs labelled epochs".into()));
                    }
                };
                let pre = preprocessor.preprocess_epoch(e)?;
                Ok(CalibrationEpoch {
                    run,
                    round: e.stimulus.round_index as usize,
                    vibrator: e.stimulus.vibrator,
                    is_target,
                    window: extract_feature_window(&pre)?,
                })
            })
            .collect()
    }
}

/// Read and validate a container against `layout`.
pub fn ingest_epochs(dir: &Path, layout: &ChannelLayout) -> Result<EpochSet> {
    let text = fs::read_to_string(dir.join(CONTAINER_MANIFEST))
        .map_err(|e| BciError::Data(format!("cannot read {}: {e}", dir.join(CONTAINER_MANIFEST).display())))?;
    let m: ContainerManifest =
        serde_json::from_str(&text).map_err(|e| BciError::Data(format!("epoch manifest: {e}")))?;
    if m.format != CONTAINER_FORMAT {
        return Err(BciError::Data(format!("unsupported epoch container format {:?}", m.format)));
    }
    if (m.fs_hz - layout.fs_hz).abs() > 1e-9 {
        return Err(BciError::Data(format!("sampling rate {} Hz, layout expects {} Hz", m.fs_hz, layout.fs_hz)));
    }
    let mut seen = HashSet::new();
    for name in &m.channels {
        if layout.index_of(name).is_none() {
            return Err(BciError::Data(format!("channel {name:?} is not in the layout")));
        }
        if !seen.insert(name.as_str()) {
            return Err(BciError::Data(format!("channel {name:?} appears twice")));
        }
    }
    if let Some(missing) = layout.names().iter().find(|n| !seen.contains(n.as_str())) {
        return Err(BciError::MissingChannel(missing.clone()));
    }
    let need_start = (EPOCH_START_MS - FILTER_CONTEXT_MS) as f64;
    let need_end = (EPOCH_END_MS + FILTER_CONTEXT_MS) as f64;
    let end = m.t0_ms + (m.n_samples as f64 - 1.0) * 1000.0 / m.fs_hz;
    if m.t0_ms > need_start + 1e-9 || end < need_end - 1e-9 {
        return Err(BciError::Data(format!(
            "epochs span {}..{end} ms, need at least {need_start}..{need_end} ms",
            m.t0_ms
        )));
    }
    let bytes = fs::read(dir.join(DATA_FILE))
        .map_err(|e| BciError::Data(format!("cannot read {}: {e}", dir.join(DATA_FILE).display())))?;
    let n_ch = m.channels.len();
    let per_epoch = n_ch * m.n_samples;
    if bytes.len() != 8 * per_epoch * m.epochs.len() {
        return Err(BciError::Data(format!(
            "data file has {} bytes, manifest implies {}",
            bytes.len(),
            8 * per_epoch * m.epochs.len()
        )));
    }
    let order: Vec<usize> =
        layout.names().iter().map(|n| m.channels.iter().position(|c| c == n).expect("checked above")).collect();
    let mut epochs = Vec::with_capacity(m.epochs.len());
    let mut runs = Vec::with_capacity(m.epochs.len());
    for (i, meta) in m.epochs.iter().enumerate() {
        let base = i * per_epoch;
        let value = |ch: usize, s: usize| {
            let o = 8 * (base + ch * m.n_samples + s);
            f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
        };
        let data = Array2::from_shape_fn((n_ch, m.n_samples), |(r, s)| value(order[r], s));
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BciError::Data(format!("epoch {i} contains non-finite samples")));
        }
        epochs.push(Epoch {
            data,
            channel_names: layout.names().clone(),
            t0_ms: m.t0_ms,
            fs_hz: m.fs_hz,
            stimulus: StimulusSpec {
                vibrator: meta.vibrator,
                onset_ms: meta.onset_ms,
                duration_ms: crate::stim::BURST_MS,
                round_index: meta.round,
            },
            label: meta.label,
        });
        runs.push(meta.run);
    }
    Ok(EpochSet { channel_names: layout.names().clone(), fs_hz: m.fs_hz, epochs, runs })
}

/// Write epochs (all sharing channels, rate and time base) as a container.
pub fn export_epochs(dir: &Path, epochs: &[Epoch], runs: &[usize], config_hash: Option<&str>) -> Result<()> {
    let first = epochs.first().ok_or_else(|| BciError::InvalidParameter("no epochs to export".into()))?;
    if runs.len() != epochs.len() {
        return Err(BciError::Shape("one run index per epoch".into()));
    }
    let mut data = Vec::with_capacity(8 * first.data.len() * epochs.len());
    for e in epochs {
        if e.channel_names != first.channel_names || e.data.dim() != first.data.dim() || e.t0_ms != first.t0_ms {
            return Err(BciError::Shape("exported epochs must share channels and time base".into()));
        }
        for v in e.data.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ContainerManifest {
        format: CONTAINER_FORMAT.into(),
        config_hash: config_hash.map(str::to_string),
        fs_hz: first.fs_hz,
        t0_ms: first.t0_ms,
        n_samples: first.n_samples(),
        channels: first.channel_names.to_vec(),
        epochs: epochs
            .iter()
            .zip(runs)
            .map(|(e, &run)| EpochMeta {
                run,
                round: e.stimulus.round_index,
                vibrator: e.stimulus.vibrator,
                onset_ms: e.stimulus.onset_ms,
                label: e.label,
            })
            .collect(),
    };
    write_atomic(&dir.join(DATA_FILE), &data)?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join(CONTAINER_MANIFEST), text.as_bytes())
}

/// Raw full-montage epochs of one synthetic attended run.
pub fn synthetic_run_epochs(
    pipeline: &Pipeline,
    profile: &SubjectProfile,
    target: VibratorId,
    run_seed: u64,
) -> Result<Vec<Epoch>> {
    let schedule = pipeline.schedule(target, run_seed)?;
    let subject = RunSeeds::from_run(run_seed).subject;
    let plan = attention_plan(&schedule, profile, Some(target), subject);
    let mut synth = RunSynthesizer::new(&schedule, profile, &pipeline.layout, None, subject)?;
    for (k, &a) in plan.iter().enumerate() {
        synth.place(k, a)?;
    }
    let names = pipeline.layout.names().clone();
    (0..schedule.stimuli.len())
        .map(|k| {
            let stimulus = schedule.stimuli[k];
            Ok(Epoch {
                data: synth.epoch_data(k, EPOCH_START_MS - FILTER_CONTEXT_MS, EPOCH_END_MS + FILTER_CONTEXT_MS)?,
                channel_names: names.clone(),
                t0_ms: (EPOCH_START_MS - FILTER_CONTEXT_MS) as f64,
                fs_hz: pipeline.layout.fs_hz,
                stimulus,
                label: if stimulus.vibrator == target { Label::Target } else { Label::Nontarget },
            })
        })
        .collect()
}
