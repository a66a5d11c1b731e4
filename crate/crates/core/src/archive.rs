//! Session archives: every artifact of a set of runs, keyed by relative path.
//!
//! An archive is rendered in memory as a sorted map of files, so replay can
//! re-execute the recorded entries and compare bytes. Each file carries the
//! config hash (a header comment for text, a field for JSON, the meta block
//! for model files). `manifest.json` lists the entries that were run and the
//! SHA-256 of every other file; it is written last.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{BciError, Result};
use crate::model_file::{encode_model, model_summary};
use crate::pipeline::TrialRecord;
use crate::report::{reports_to_csv, SessionReport};
use crate::session::{
    CalibrationOutput, ConditionResult, ContinuousOutput, ContinuousReport, DayResult, FunctionalReport, OnlineOutput,
    SessionRunner,
};
use crate::synth::Condition;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const FORMAT: &str = "tbci-archive/1";

/// One unit of work recorded in an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchiveEntry {
    Calibration { condition: Condition, day: u8 },
    Condition { condition: Condition, day: u8 },
    Online { condition: Condition, day: u8 },
    Continuous { condition: Condition, day: u8 },
    Day { day: u8 },
    Functional { condition: Condition, day: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub entries: Vec<ArchiveEntry>,
    /// Path to SHA-256 hex, manifest excluded.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub config_hash: String,
    pub entries: Vec<ArchiveEntry>,
    pub files: BTreeMap<String, Vec<u8>>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cond_dir(condition: Condition, day: u8) -> String {
    format!("day{day}/{condition}")
}

impl Archive {
    pub fn new(config: &ExperimentConfig) -> Self {
        let hash = config.hash();
        let mut a = Self { config_hash: hash, entries: Vec::new(), files: BTreeMap::new() };
        a.text(CONFIG_FILE, &config.to_toml_string());
        a
    }

    /// Add a text file with a `# config_hash=` header line.
    pub fn text(&mut self, path: &str, body: &str) {
        let content = format!("# config_hash={}\n{body}", self.config_hash);
        self.files.insert(path.to_string(), content.into_bytes());
    }

    /// Add a JSON document; the value must already carry the hash.
    pub fn json<T: Serialize>(&mut self, path: &str, value: &T) {
        let mut s = serde_json::to_string_pretty(value).expect("archive value serializes");
        s.push('\n');
        self.files.insert(path.to_string(), s.into_bytes());
    }

    fn records(&mut self, path: &str, records: &[TrialRecord]) {
        let mut schedules = String::new();
        let mut traces = String::new();
        for (i, r) in records.iter().enumerate() {
            schedules.push_str(&format!("## run {}\n{}", i + 1, r.schedule.to_text()));
            traces.push_str(&format!("## run {}\n{}", i + 1, r.outcome.to_trace_text()));
        }
        self.text(&format!("{path}_schedules.txt"), &schedules);
        self.text(&format!("{path}_traces.txt"), &traces);
    }

    pub fn add_calibration(&mut self, dir: &str, cal: &CalibrationOutput) {
        self.json(&format!("{dir}/calibration.json"), &cal.summary);
        let mut schedules = String::new();
        for (i, s) in cal.data.schedules.iter().enumerate() {
            schedules.push_str(&format!("## run {}\n{}", i + 1, s.to_text()));
        }
        self.text(&format!("{dir}/calibration_schedules.txt"), &schedules);
        self.files.insert(format!("{dir}/model.bin"), encode_model(&cal.model));
        self.text(&format!("{dir}/model.txt"), &model_summary(&cal.model));
    }

    pub fn add_condition(&mut self, result: &ConditionResult) {
        let dir = cond_dir(result.report.condition, result.report.day);
        self.add_calibration(&dir, &result.calibration);
        self.records(&format!("{dir}/online"), &result.online.records);
        self.records(&format!("{dir}/continuous"), &result.continuous.records);
        self.json(&format!("{dir}/report.json"), &result.report);
        self.text(&format!("{dir}/report.csv"), &reports_to_csv(std::slice::from_ref(&result.report)));
    }

    /// Calibration and cued session only.
    pub fn add_online(&mut self, cal: &CalibrationOutput, online: &OnlineOutput, report: &SessionReport) {
        let dir = cond_dir(report.condition, report.day);
        self.add_calibration(&dir, cal);
        self.records(&format!("{dir}/online"), &online.records);
        self.json(&format!("{dir}/online_report.json"), report);
    }

    /// Calibration and continuous block only.
    pub fn add_continuous(&mut self, cal: &CalibrationOutput, block: &ContinuousOutput, summary: &ContinuousReport) {
        let dir = cond_dir(summary.condition, summary.day);
        self.add_calibration(&dir, cal);
        self.records(&format!("{dir}/continuous"), &block.records);
        self.json(&format!("{dir}/continuous_report.json"), summary);
    }

    pub fn add_day(&mut self, day: &DayResult) {
        for c in &day.conditions {
            self.add_condition(c);
        }
        let report = day.report();
        self.json(&format!("day{}/day_report.json", day.day), &report);
        self.text(&format!("day{}/reports.csv", day.day), &reports_to_csv(&report.sessions));
    }

    pub fn add_functional(&mut self, report: &FunctionalReport) {
        self.json(&format!("{}/functional.json", cond_dir(report.condition, report.day)), report);
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            schema_version: SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            entries: self.entries.clone(),
            files: self.files.iter().map(|(p, b)| (p.clone(), sha_hex(b))).collect(),
        }
    }

    /// Every file including the manifest.
    pub fn rendered(&self) -> BTreeMap<String, Vec<u8>> {
        let mut out = self.files.clone();
        let mut m = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        m.push('\n');
        out.insert(MANIFEST.to_string(), m.into_bytes());
        out
    }

    /// Write atomically (temp file then rename), manifest last. Refuses to
    /// write over an archive made with a different configuration.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let existing = dir.join(MANIFEST);
        if existing.exists() {
            let m = read_manifest(dir)?;
            if m.config_hash != self.config_hash {
                return Err(BciError::Data(format!(
                    "{} holds an archive for config {} (this run is {}); mixed-config archives are rejected",
                    dir.display(),
                    &m.config_hash[..12.min(m.config_hash.len())],
                    &self.config_hash[..12]
                )));
            }
        }
        let rendered = self.rendered();
        for (path, bytes) in rendered.iter().filter(|(p, _)| p.as_str() != MANIFEST) {
            write_atomic(&dir.join(path), bytes)?;
        }
        write_atomic(&dir.join(MANIFEST), &rendered[MANIFEST])
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| BciError::Data(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| BciError::Data(format!("manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(BciError::Data(format!("unsupported archive format {:?}", m.format)));
    }
    Ok(m)
}

/// Read an archive from disk, checking checksums, that every file carries
/// the manifest's config hash, and that the stored config hashes to it.
pub fn load_archive(dir: &Path) -> Result<(ExperimentConfig, Archive)> {
    let manifest = read_manifest(dir)?;
    let mut files = BTreeMap::new();
    for (path, digest) in &manifest.files {
        let full: PathBuf = dir.join(path);
        let bytes = fs::read(&full).map_err(|e| BciError::Data(format!("cannot read {}: {e}", full.display())))?;
        if &sha_hex(&bytes) != digest {
            return Err(BciError::Data(format!("{path}: checksum mismatch")));
        }
        if !bytes.windows(manifest.config_hash.len()).any(|w| w == manifest.config_hash.as_bytes()) {
            return Err(BciError::Data(format!("{path} does not carry config hash {}; mixed-config archive", manifest.config_hash)));
        }
        files.insert(path.clone(), bytes);
    }
    let text = files
        .get(CONFIG_FILE)
        .ok_or_else(|| BciError::Data("archive lacks config.toml".into()))
        .and_then(|b| String::from_utf8(b.clone()).map_err(|_| BciError::Data("config.toml is not UTF-8".into())))?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    if config.hash() != manifest.config_hash {
        return Err(BciError::Data("stored config does not match the manifest hash".into()));
    }
    Ok((config, Archive { config_hash: manifest.config_hash, entries: manifest.entries, files }))
}

/// Add `archive` to the one in `dir` (or start it) and write the union.
/// Entries keep their order, so replay regenerates the same files.
pub fn append(dir: &Path, archive: &Archive) -> Result<Archive> {
    let merged = if dir.join(MANIFEST).exists() {
        let (_, mut existing) = load_archive(dir)?;
        if existing.config_hash != archive.config_hash {
            return Err(BciError::Data(format!(
                "{} holds an archive for config {} (this run is {}); mixed-config archives are rejected",
                dir.display(),
                &existing.config_hash[..12],
                &archive.config_hash[..12]
            )));
        }
        existing.entries.extend(archive.entries.iter().copied());
        existing.files.extend(archive.files.iter().map(|(p, b)| (p.clone(), b.clone())));
        existing
    } else {
        archive.clone()
    };
    merged.write(dir)?;
    Ok(merged)
}

/// Run the given entries and collect their artifacts.
pub fn execute(runner: &SessionRunner, entries: &[ArchiveEntry]) -> Result<Archive> {
    let mut archive = Archive::new(&runner.config);
    for &entry in entries {
        match entry {
            ArchiveEntry::Calibration { condition, day } => {
                let cal = runner.run_calibration(condition, day)?;
                archive.add_calibration(&cond_dir(condition, day), &cal);
            }
            ArchiveEntry::Condition { condition, day } => archive.add_condition(&runner.run_condition(condition, day)?),
            ArchiveEntry::Online { condition, day } => {
                let (cal, online, report) = runner.run_online_session(condition, day)?;
                archive.add_online(&cal, &online, &report);
            }
            ArchiveEntry::Continuous { condition, day } => {
                let (cal, block, summary) = runner.run_continuous_session(condition, day)?;
                archive.add_continuous(&cal, &block, &summary);
            }
            ArchiveEntry::Day { day } => archive.add_day(&runner.run_day(day)?),
            ArchiveEntry::Functional { condition, day } => {
                let cal = runner.run_calibration(condition, day)?;
                let decoder = runner.pipeline.online_decoder(&cal.model)?;
                archive.add_functional(&runner.run_functional(condition, day, &decoder)?);
            }
        }
        archive.entries.push(entry);
    }
    Ok(archive)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub files_compared: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty() && self.extra.is_empty()
    }
}

/// Compare two rendered file sets.
pub fn compare(recorded: &BTreeMap<String, Vec<u8>>, replayed: &BTreeMap<String, Vec<u8>>) -> ReplayOutcome {
    let mut out = ReplayOutcome { files_compared: 0, mismatched: Vec::new(), missing: Vec::new(), extra: Vec::new() };
    for (path, bytes) in recorded {
        match replayed.get(path) {
            Some(b) => {
                out.files_compared += 1;
                if b != bytes {
                    out.mismatched.push(path.clone());
                }
            }
            None => out.missing.push(path.clone()),
        }
    }
    out.extra = replayed.keys().filter(|p| !recorded.contains_key(*p)).cloned().collect();
    out
}

/// Re-execute an archive's entries from its stored config and compare every
/// file byte for byte.
pub fn replay(dir: &Path) -> Result<(Archive, ReplayOutcome)> {
    let (config, recorded) = load_archive(dir)?;
    let runner = SessionRunner::new(config)?;
    let replayed = execute(&runner, &recorded.entries)?;
    let mut rendered = recorded.files.clone();
    rendered.insert(MANIFEST.to_string(), fs::read(dir.join(MANIFEST))?);
    let outcome = compare(&rendered, &replayed.rendered());
    Ok((replayed, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig { seed: 3, days: vec![2], ..Default::default() };
        c.protocol.calibration_runs_per_target = 1;
        c.protocol.trials_per_vibrator = 1;
        c.protocol.continuous_runs_per_vibrator = 1;
        c.protocol.n_taps = 301;
        c
    }

    #[test]
    fn every_file_carries_the_hash() {
        let runner = SessionRunner::new(tiny()).unwrap();
        let a = execute(&runner, &[ArchiveEntry::Condition { condition: Condition::Dual, day: 2 }]).unwrap();
        for (path, bytes) in a.rendered() {
            assert!(
                bytes.windows(a.config_hash.len()).any(|w| w == a.config_hash.as_bytes()),
                "{path} lacks the hash"
            );
        }
        assert!(a.files.contains_key("day2/dual/model.bin"));
        assert!(a.files.contains_key("day2/dual/online_traces.txt"));
    }

    #[test]
    fn write_load_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let runner = SessionRunner::new(tiny()).unwrap();
        let a = execute(&runner, &[ArchiveEntry::Calibration { condition: Condition::Single, day: 2 }]).unwrap();
        a.write(dir.path()).unwrap();
        let (cfg, loaded) = load_archive(dir.path()).unwrap();
        assert_eq!(cfg, tiny());
        assert_eq!(loaded.files, a.files);
        let (_, outcome) = replay(dir.path()).unwrap();
        assert!(outcome.identical(), "{outcome:?}");
        assert!(outcome.files_compared >= 5);
        let leftovers: Vec<_> = walk(dir.path()).into_iter().filter(|p| p.ends_with(".tmp")).collect();
        assert!(leftovers.is_empty());
    }

    fn walk(dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p.display().to_string());
            }
        }
        out
    }

    #[test]
    fn mixed_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Archive::new(&tiny());
        a.write(dir.path()).unwrap();
        let other = Archive::new(&ExperimentConfig { seed: 99, ..tiny() });
        assert!(matches!(other.write(dir.path()), Err(BciError::Data(_))));

        // a foreign file smuggled into the manifest
        let mut m = read_manifest(dir.path()).unwrap();
        let foreign = b"# config_hash=0000\n".to_vec();
        fs::write(dir.path().join("stray.txt"), &foreign).unwrap();
        m.files.insert("stray.txt".into(), sha_hex(&foreign));
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let e = load_archive(dir.path()).unwrap_err();
        assert!(e.to_string().contains("mixed-config"), "{e}");
    }

    #[test]
    fn appended_entries_replay_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let runner = SessionRunner::new(tiny()).unwrap();
        let single = ArchiveEntry::Online { condition: Condition::Single, day: 2 };
        let dual = ArchiveEntry::Continuous { condition: Condition::Dual, day: 2 };
        append(dir.path(), &execute(&runner, &[single]).unwrap()).unwrap();
        let merged = append(dir.path(), &execute(&runner, &[dual]).unwrap()).unwrap();
        assert_eq!(merged.entries, vec![single, dual]);
        assert!(merged.files.contains_key("day2/single/online_report.json"));
        assert!(merged.files.contains_key("day2/dual/continuous_report.json"));
        let (_, outcome) = replay(dir.path()).unwrap();
        assert!(outcome.identical(), "{outcome:?}");

        let other = SessionRunner::new(ExperimentConfig { seed: 4, ..tiny() }).unwrap();
        let e = append(dir.path(), &Archive::new(&other.config)).unwrap_err();
        assert!(e.to_string().contains("mixed-config"), "{e}");
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        Archive::new(&tiny()).write(dir.path()).unwrap();
        let p = dir.path().join(CONFIG_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("# edited\n");
        fs::write(&p, text).unwrap();
        assert!(load_archive(dir.path()).unwrap_err().to_string().contains("checksum"));
    }
}
