use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3\ndays = [2]\n\n[protocol]\ncalibration_runs_per_target = 1\ntrials_per_vibrator = 1\n\
continuous_runs_per_vibrator = 1\nn_taps = 301\n";

fn tbci(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbci")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn archive_commands_append_and_replay() {
    let dir = setup();
    let d = dir.path();
    let o = tbci(d, &["--config", "tiny.toml", "online", "--out", "arch"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("single day 2: success"));
    let o = tbci(d, &["--config", "tiny.toml", "continuous", "--condition", "dual", "--out", "arch"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("continuous dual day 2"));

    let o = tbci(d, &["replay", "arch"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("replay identical"));

    let o = tbci(d, &["--json", "report", "arch"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["n_trials"], 4);

    // a different seed may not write into the same archive
    let o = tbci(d, &["--config", "tiny.toml", "--seed", "4", "calibrate", "--out", "arch"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mixed-config"));

    // a changed byte makes the archive unreadable
    let p = d.join("arch/day2/single/online_report.json");
    let text = fs::read_to_string(&p).unwrap().replacen("\"n_trials\": 4", "\"n_trials\": 5", 1);
    fs::write(&p, text).unwrap();
    assert_eq!(code(&tbci(d, &["replay", "arch"])), 3);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&tbci(d, &["--days", "7", "config"])), 2);
    assert_eq!(code(&tbci(d, &["--filters", "0", "config"])), 2);
    assert_eq!(code(&tbci(d, &["frobnicate"])), 2);
    fs::write(d.join("bad.toml"), "seed = \"one\"\n").unwrap();
    assert_eq!(code(&tbci(d, &["--config", "bad.toml", "config"])), 2);
    fs::write(d.join("unknown.toml"), "sed = 1\n").unwrap();
    assert_eq!(code(&tbci(d, &["--config", "unknown.toml", "config"])), 2);
    assert_eq!(code(&tbci(d, &["--config", "tiny.toml", "calibrate", "--day", "3"])), 2);
    assert_eq!(code(&tbci(d, &["replay", "missing"])), 3);
    assert_eq!(code(&tbci(d, &["ingest", "missing"])), 3);
    fs::write(d.join("log.jsonl"), "{\"kind\":\n").unwrap();
    assert_eq!(code(&tbci(d, &["replay", "--events", "log.jsonl"])), 3);

    let o = tbci(d, &["--config", "tiny.toml", "--seed", "11", "config"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with("# config_hash="));
    assert!(out.contains("seed = 11"));
}
