//! Experiment configuration (TOML) and its content hash.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are errors. The hash covers everything that influences
//! results; the output directory is excluded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::CalibrationOptions;
use crate::error::{BciError, Result};
use crate::filter::DEFAULT_TAPS;
use crate::pipeline::PipelineSettings;
use crate::robot::{script_by_name, TaskScript};
use crate::stim::DEFAULT_ROUNDS;
use crate::synth::{Condition, SubjectProfile};

pub const SCHEMA_VERSION: u32 = 1;
pub const INTER_RUN_PAUSE_MS: u64 = 7000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub n_rounds: usize,
    pub trials_per_vibrator: usize,
    pub calibration_runs_per_target: usize,
    pub continuous_runs_per_vibrator: usize,
    pub inter_run_pause_ms: u64,
    pub n_taps: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            n_rounds: DEFAULT_ROUNDS,
            trials_per_vibrator: 8,
            calibration_runs_per_target: 3,
            continuous_runs_per_vibrator: 4,
            inter_run_pause_ms: INTER_RUN_PAUSE_MS,
            n_taps: DEFAULT_TAPS,
        }
    }
}

/// Optional replacements for preset profile fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p300_amp_mean_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p300_amp_sd_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p300_latency_mean_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p300_latency_sd_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p300_width_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lapse_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lapse_persistence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation_error_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation_error_rounds: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_rms_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_amp_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_amp_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exogenous_amp_uv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topography_scale_rad: Option<f64>,
}

impl ProfileOverrides {
    pub fn apply(&self, p: &mut SubjectProfile) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(
            p300_amp_mean_uv,
            p300_amp_sd_uv,
            p300_latency_mean_ms,
            p300_latency_sd_ms,
            p300_width_ms,
            lapse_prob,
            lapse_persistence,
            orientation_error_prob,
            orientation_error_rounds,
            noise_rms_uv,
            alpha_amp_uv,
            line_amp_uv,
            exogenous_amp_uv,
            topography_scale_rad
        );
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalConfig {
    pub script: String,
    /// Cycle count for `dual_arm_cycle`.
    pub cycles: u32,
    /// Online runs allowed before the task is abandoned.
    pub max_runs: usize,
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        Self { script: "straw_in_cup".into(), cycles: 2, max_runs: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub days: Vec<u8>,
    pub conditions: Vec<Condition>,
    pub protocol: Protocol,
    pub decoder: CalibrationOptions,
    /// Applied to every preset.
    pub profile: ProfileOverrides,
    /// Applied after `profile`, per condition.
    pub condition_profile: BTreeMap<Condition, ProfileOverrides>,
    pub functional: FunctionalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            days: vec![1, 2, 3],
            conditions: Condition::BOTH.to_vec(),
            protocol: Protocol::default(),
            decoder: CalibrationOptions::default(),
            profile: ProfileOverrides::default(),
            condition_profile: BTreeMap::new(),
            functional: FunctionalConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BciError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BciError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BciError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.days.is_empty() || self.days.iter().any(|d| !(1..=3).contains(d)) {
            return bad(format!("days must be a non-empty subset of 1..=3, got {:?}", self.days));
        }
        if has_duplicates(&self.days) {
            return bad("days contain duplicates".into());
        }
        if self.conditions.is_empty() || has_duplicates(&self.conditions) {
            return bad("conditions must be non-empty and distinct".into());
        }
        let p = &self.protocol;
        if !(crate::decoder::FIRST_DECISION_ROUND..=200).contains(&p.n_rounds) {
            return bad(format!("protocol.n_rounds must be in 4..=200, got {}", p.n_rounds));
        }
        if p.trials_per_vibrator == 0 || p.calibration_runs_per_target == 0 {
            return bad("trial and calibration run counts must be positive".into());
        }
        if p.n_taps < 3 || p.n_taps % 2 == 0 {
            return bad(format!("protocol.n_taps must be odd and >= 3, got {}", p.n_taps));
        }
        let d = &self.decoder;
        if d.n_filters == 0 || d.n_filters > 44 {
            return bad(format!("decoder.n_filters must be in 1..=44, got {}", d.n_filters));
        }
        if !(d.c.is_finite() && d.c > 0.0) {
            return bad(format!("decoder.c must be positive, got {}", d.c));
        }
        if self.functional.max_runs == 0 {
            return bad("functional.max_runs must be positive".into());
        }
        self.script()?;
        for &c in &self.conditions {
            for &day in &self.days {
                self.profile_for(c, day)?;
            }
        }
        Ok(())
    }

    /// Preset profile with overrides applied and validated.
    pub fn profile_for(&self, condition: Condition, day: u8) -> Result<SubjectProfile> {
        let mut p = SubjectProfile::preset(condition, day)?;
        self.profile.apply(&mut p);
        if let Some(o) = self.condition_profile.get(&condition) {
            o.apply(&mut p);
        }
        p.validate().map_err(|e| BciError::Config(format!("profile {condition} day {day}: {e}")))?;
        Ok(p)
    }

    pub fn script(&self) -> Result<TaskScript> {
        script_by_name(&self.functional.script, self.functional.cycles)
            .ok_or_else(|| BciError::Config(format!("unknown functional script {:?}", self.functional.script)))
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            n_rounds: self.protocol.n_rounds,
            n_taps: self.protocol.n_taps,
            calibration_runs_per_target: self.protocol.calibration_runs_per_target,
            decoder: self.decoder.clone(),
        }
    }

    /// SHA-256 (hex) of the canonical JSON form without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// First 12 hex digits of [`Self::hash`], for display.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.protocol.n_rounds, 20);
        assert_eq!(c.protocol.trials_per_vibrator * 4, 32);
        assert_eq!(c.protocol.inter_run_pause_ms, 7000);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = ExperimentConfig { seed: 42, days: vec![3], ..Default::default() };
        c.profile.noise_rms_uv = Some(2.5);
        c.condition_profile.insert(Condition::Dual, ProfileOverrides { lapse_prob: Some(0.3), ..Default::default() });
        let text = c.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut moved = c.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), c.hash());
        let mut other = c.clone();
        other.seed = 43;
        assert_ne!(other.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn overrides_reach_profiles() {
        let text = "seed = 5\n[profile]\nnoise_rms_uv = 4.0\n[condition_profile.dual]\nlapse_prob = 0.5\n";
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        let s = c.profile_for(Condition::Single, 3).unwrap();
        let d = c.profile_for(Condition::Dual, 3).unwrap();
        assert_eq!((s.noise_rms_uv, d.noise_rms_uv), (4.0, 4.0));
        assert_eq!(d.lapse_prob, 0.5);
        assert_eq!(s.lapse_prob, SubjectProfile::preset(Condition::Single, 3).unwrap().lapse_prob);
        let partial = ExperimentConfig::from_toml_str("[decoder]\nc = 0.5\n").unwrap();
        assert_eq!(partial.decoder.n_filters, 5);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "schema_version = 2",
            "days = [4]",
            "days = [1, 1]",
            "conditions = []",
            "bogus = 1",
            "[protocol]\nn_rounds = 3",
            "[protocol]\nn_taps = 1200",
            "[decoder]\nc = -1.0",
            "[decoder]\nn_filters = 0",
            "[profile]\nlapse_prob = 2.0",
            "[functional]\nscript = \"juggling\"",
            "seed = \"x\"",
        ] {
            let e = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(e, BciError::Config(_)), "{text}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
    }
}
