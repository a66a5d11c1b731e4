//! Python module `tactile_bci`.
//!
//! Configurations go in and out as TOML text and reports come back as JSON
//! text, so the Python side needs nothing beyond `json`.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tactile_bci::archive;
use tactile_bci::config::ExperimentConfig;
use tactile_bci::session::SessionRunner;
use tactile_bci::{build_run_schedule, BciError, Condition, VibratorId};

fn to_py(e: BciError) -> PyErr {
    match e {
        BciError::Io(e) => PyIOError::new_err(e.to_string()),
        BciError::Data(_) | BciError::NotPositiveDefinite { .. } | BciError::SingleClass => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(toml: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(toml).map_err(to_py)
}

fn runner(toml: &str) -> PyResult<SessionRunner> {
    SessionRunner::new(parse_config(toml)?).map_err(to_py)
}

fn condition(name: &str) -> PyResult<Condition> {
    name.parse().map_err(to_py)
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// The effective configuration for `toml`, with defaults filled in.
#[pyfunction]
#[pyo3(signature = (toml = ""))]
fn effective_config(toml: &str) -> PyResult<String> {
    Ok(parse_config(toml)?.to_toml_string())
}

#[pyfunction]
#[pyo3(signature = (toml = ""))]
fn config_hash(toml: &str) -> PyResult<String> {
    Ok(parse_config(toml)?.hash())
}

/// Stimulus schedule of one run as `(round, vibrator, onset_ms)` tuples,
/// rounds zero-based and vibrators 1..4.
#[pyfunction]
fn schedule(target: u8, n_rounds: usize, seed: u64) -> PyResult<Vec<(u32, u8, u64)>> {
    let target = VibratorId::new(target).map_err(to_py)?;
    let s = build_run_schedule(target, n_rounds, seed).map_err(to_py)?;
    Ok(s.stimuli.iter().map(|st| (st.round_index, st.vibrator.get(), st.onset_ms)).collect())
}

/// Calibrate and run the cued online trials; returns the session report as JSON.
#[pyfunction]
#[pyo3(signature = (toml, condition_name = "single", day = 3))]
fn run_online(py: Python<'_>, toml: &str, condition_name: &str, day: u8) -> PyResult<String> {
    let (runner, cond) = (runner(toml)?, condition(condition_name)?);
    let (_, _, report) = py.detach(|| runner.run_online_session(cond, day)).map_err(to_py)?;
    json(&report)
}

/// Calibrate and run the continuous block; returns its summary as JSON.
#[pyfunction]
#[pyo3(signature = (toml, condition_name = "single", day = 3))]
fn run_continuous(py: Python<'_>, toml: &str, condition_name: &str, day: u8) -> PyResult<String> {
    let (runner, cond) = (runner(toml)?, condition(condition_name)?);
    let (_, _, report) = py.detach(|| runner.run_continuous_session(cond, day)).map_err(to_py)?;
    json(&report)
}

/// Run `entries` (`"online"`, `"continuous"` or `"calibration"`, paired with
/// condition and day) and add them to the archive in `out_dir`.
#[pyfunction]
fn archive_runs(py: Python<'_>, toml: &str, out_dir: &str, entries: Vec<(String, String, u8)>) -> PyResult<usize> {
    let runner = runner(toml)?;
    let mut list = Vec::with_capacity(entries.len());
    for (kind, cond, day) in &entries {
        let (condition, day) = (condition(cond)?, *day);
        list.push(match kind.as_str() {
            "online" => archive::ArchiveEntry::Online { condition, day },
            "continuous" => archive::ArchiveEntry::Continuous { condition, day },
            "calibration" => archive::ArchiveEntry::Calibration { condition, day },
            other => return Err(PyValueError::new_err(format!("unknown entry kind {other:?}"))),
        });
    }
    let merged = py
        .detach(|| archive::execute(&runner, &list).and_then(|a| archive::append(Path::new(out_dir), &a)))
        .map_err(to_py)?;
    Ok(merged.files.len())
}

/// Re-run an archive and compare it byte for byte.
/// Returns `(identical, files_compared, differing_paths)`.
#[pyfunction]
fn replay_archive(py: Python<'_>, dir: &str) -> PyResult<(bool, usize, Vec<String>)> {
    let (_, out) = py.detach(|| archive::replay(Path::new(dir))).map_err(to_py)?;
    let mut differing = out.mismatched.clone();
    differing.extend(out.missing.iter().cloned());
    differing.extend(out.extra.iter().cloned());
    Ok((out.identical(), out.files_compared, differing))
}

#[pymodule(name = "tactile_bci")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run_online, m)?)?;
    m.add_function(wrap_pyfunction!(run_continuous, m)?)?;
    m.add_function(wrap_pyfunction!(archive_runs, m)?)?;
    m.add_function(wrap_pyfunction!(replay_archive, m)?)?;
    Ok(())
}
