//! `tbci`: run the simulated protocol, inspect and replay archives, and
//! serve live sessions.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tactile_bci::archive::{self, Archive, ArchiveEntry};
use tactile_bci::classifier::{calibrate, ThresholdMode};
use tactile_bci::config::ExperimentConfig;
use tactile_bci::container::ingest_epochs;
use tactile_bci::error::{BciError, Result};
use tactile_bci::model_file::model_summary;
use tactile_bci::report::{reports_to_csv, SessionReport};
use tactile_bci::session::{ContinuousReport, DayReport, FunctionalReport, SessionRunner};
use tactile_bci::synth::Condition;
use tactile_bci_gateway::replay::{parse_event_log, replay_events};
use tactile_bci_gateway::server;
use tactile_bci_gateway::{Gateway, GatewayOptions};

#[derive(Parser)]
#[command(name = "tbci", version, about = "Tactile P300 BCI simulator")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print results as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the configuration file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated days, e.g. 1,3.
    #[arg(long, global = true, value_delimiter = ',')]
    days: Option<Vec<u8>>,
    #[arg(long, global = true, value_delimiter = ',')]
    conditions: Option<Vec<Condition>>,
    /// Rounds per run.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Cued online runs per vibrator.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Spatial filters.
    #[arg(long, global = true)]
    filters: Option<usize>,
    /// SVM regularization.
    #[arg(long, global = true)]
    c: Option<f64>,
    #[arg(long, global = true)]
    threshold: Option<Threshold>,
    /// Functional-task script.
    #[arg(long, global = true)]
    script: Option<String>,
    /// Archive directory; results are appended to an existing archive.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Threshold {
    Zero,
    BalancedCv,
}

#[derive(Args, Clone, Copy)]
struct Target {
    /// Defaults to the first configured condition.
    #[arg(long)]
    condition: Option<Condition>,
    /// Defaults to the latest configured day.
    #[arg(long)]
    day: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a decoder.
    Calibrate(Target),
    /// Calibrate, then run the cued online session.
    Online(Target),
    /// Calibrate, then run the continuous-decoding block.
    Continuous(Target),
    /// Calibrate, then drive the robot script.
    Functional(Target),
    /// Full day(s): both conditions in counterbalanced order.
    Day {
        /// Defaults to every configured day.
        #[arg(long)]
        day: Option<u8>,
    },
    /// Re-execute an archive and compare it byte for byte, or check a live
    /// event log against batch decoding.
    Replay {
        #[arg(required_unless_present = "events")]
        archive: Option<PathBuf>,
        /// Gateway event log (one JSON event per line).
        #[arg(long, conflicts_with = "archive")]
        events: Option<PathBuf>,
    },
    /// Summarize the reports in an archive, or run the ERP variability sweep.
    Report {
        #[arg(required_unless_present = "sweep")]
        archive: Option<PathBuf>,
        #[arg(long, conflicts_with = "archive")]
        sweep: bool,
        #[arg(long, default_value_t = 8)]
        points: usize,
        #[arg(long, default_value_t = 16)]
        runs: usize,
    },
    /// Serve live sessions over WebSocket at /session.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: SocketAddr,
        /// Multiplier on the 400 ms stimulus period; 0 is unpaced.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
    },
    /// Validate an epoch container, optionally training a decoder on it.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        calibrate: bool,
    },
    /// Print the effective configuration and its hash.
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = &a.days {
        c.days = v.clone();
    }
    if let Some(v) = &a.conditions {
        c.conditions = v.clone();
    }
    if let Some(v) = a.rounds {
        c.protocol.n_rounds = v;
    }
    if let Some(v) = a.trials {
        c.protocol.trials_per_vibrator = v;
    }
    if let Some(v) = a.filters {
        c.decoder.n_filters = v;
    }
    if let Some(v) = a.c {
        c.decoder.c = v;
    }
    if let Some(t) = a.threshold {
        c.decoder.threshold = match t {
            Threshold::Zero => ThresholdMode::Zero,
            Threshold::BalancedCv => ThresholdMode::BalancedCv,
        };
    }
    if let Some(v) = &a.script {
        c.functional.script = v.clone();
    }
    if let Some(v) = &a.out {
        c.output_dir = Some(v.clone());
    }
    c.validate()?;
    Ok(c)
}

fn resolve(runner: &SessionRunner, t: Target) -> Result<(Condition, u8)> {
    let cfg = &runner.config;
    let condition = t.condition.unwrap_or(cfg.conditions[0]);
    let day = t.day.unwrap_or_else(|| *cfg.days.iter().max().expect("validated"));
    if !cfg.days.contains(&day) {
        return Err(BciError::Config(format!("day {day} is not in the configured days {:?}", cfg.days)));
    }
    Ok((condition, day))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

/// Execute entries, print them, and append to the archive if asked.
fn execute(runner: &SessionRunner, entries: &[ArchiveEntry], json: bool) -> Result<()> {
    // fail before the work, not after
    if let Some(dir) = runner.config.output_dir.as_deref().filter(|d| d.join(archive::MANIFEST).exists()) {
        let m = archive::read_manifest(dir)?;
        if m.config_hash != runner.hash {
            return Err(BciError::Data(format!(
                "{} holds an archive for another configuration; mixed-config archives are rejected",
                dir.display()
            )));
        }
    }
    let archive = archive::execute(runner, entries)?;
    for entry in entries {
        print_entry(&archive, entry, json)?;
    }
    if let Some(dir) = &runner.config.output_dir {
        let merged = archive::append(dir, &archive)?;
        eprintln!("archive {}: {} entries, {} files", dir.display(), merged.entries.len(), merged.files.len() + 1);
    }
    Ok(())
}

fn file<'a>(archive: &'a Archive, path: &str) -> Result<&'a str> {
    let bytes = archive.files.get(path).ok_or_else(|| BciError::Data(format!("archive lacks {path}")))?;
    std::str::from_utf8(bytes).map_err(|_| BciError::Data(format!("{path} is not UTF-8")))
}

fn parse<T: serde::de::DeserializeOwned>(archive: &Archive, path: &str) -> Result<T> {
    serde_json::from_str(file(archive, path)?).map_err(|e| BciError::Data(format!("{path}: {e}")))
}

fn print_entry(archive: &Archive, entry: &ArchiveEntry, json: bool) -> Result<()> {
    match *entry {
        ArchiveEntry::Calibration { condition, day } => {
            let dir = format!("day{day}/{condition}");
            let summary: serde_json::Value = parse(archive, &format!("{dir}/calibration.json"))?;
            if json {
                print_json(&summary);
            } else {
                println!("calibration {condition} day {day}");
                print!("{}", file(archive, &format!("{dir}/model.txt"))?.lines().skip(1).fold(String::new(), |s, l| s + "  " + l + "\n"));
            }
        }
        ArchiveEntry::Condition { condition, day } => {
            let r: SessionReport = parse(archive, &format!("day{day}/{condition}/report.json"))?;
            if json { print_json(&r) } else { print!("{}", session_text(&r)) }
        }
        ArchiveEntry::Online { condition, day } => {
            let r: SessionReport = parse(archive, &format!("day{day}/{condition}/online_report.json"))?;
            if json { print_json(&r) } else { print!("{}", session_text(&r)) }
        }
        ArchiveEntry::Continuous { condition, day } => {
            let r: ContinuousReport = parse(archive, &format!("day{day}/{condition}/continuous_report.json"))?;
            if json {
                print_json(&r)
            } else {
                let s = &r.summary;
                println!(
                    "continuous {condition} day {day}: {} runs, {} windows, ACC {:.1}%, FPR {:.1}%, longest sustained {}",
                    s.runs, s.windows, s.acc_pct, s.fpr_pct, s.longest_sustained
                );
            }
        }
        ArchiveEntry::Day { day } => {
            let r: DayReport = parse(archive, &format!("day{day}/day_report.json"))?;
            if json {
                print_json(&r);
            } else {
                let order: Vec<_> = r.order.iter().map(|c| c.as_str()).collect();
                println!("day {day} (order: {})", order.join(", "));
                for s in &r.sessions {
                    print!("{}", session_text(s));
                }
            }
        }
        ArchiveEntry::Functional { condition, day } => {
            let r: FunctionalReport = parse(archive, &format!("day{day}/{condition}/functional.json"))?;
            if json { print_json(&r) } else { print!("{}", functional_text(&r)) }
        }
    }
    Ok(())
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or("-".into(), |v| format!("{v:.digits$}"))
}

fn session_text(r: &SessionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} day {}: success {:.1}% ({}/{}), attempts {} ± {}, non-target {}, exhausted {}",
        r.condition,
        r.day,
        r.success_rate_pct,
        r.successes,
        r.n_trials,
        opt(r.attempts_mean, 2),
        opt(r.attempts_sd, 2),
        r.failures_nontarget,
        r.failures_exhausted
    );
    if let Some(c) = &r.continuous {
        let _ = writeln!(s, "  continuous: ACC {:.1}%, FPR {:.1}% over {} windows", c.acc_pct, c.fpr_pct, c.windows);
    }
    if !r.erp.is_empty() {
        let n = r.erp.len() as f64;
        let amp = r.erp.iter().map(|m| m.peak_amp_uv).sum::<f64>() / n;
        let lat = r.erp.iter().map(|m| m.peak_latency_ms).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "  P300 at Cz: {amp:.2} µV, {lat:.0} ms; CV amplitude {}, latency {}",
            opt(r.amplitude_cv.as_ref().map(|c| c.value), 3),
            opt(r.latency_cv.as_ref().map(|c| c.value), 3)
        );
    }
    let red: Vec<_> = r.reduction.iter().map(|x| format!("k={} {:.1}%", x.k, 100.0 * x.success_rate)).collect();
    let _ = writeln!(s, "  candidates: {}", red.join(", "));
    let _ = writeln!(s, "  online clock {:.1} min", r.online_clock_ms as f64 / 60_000.0);
    s
}

fn functional_text(r: &FunctionalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "functional {} ({} day {}): goal {}, {} runs, {} commands, {} rejected, clock {:.1} min",
        r.script,
        r.condition,
        r.day,
        if r.goal_reached { "reached" } else { "not reached" },
        r.steps.len(),
        r.commands_issued,
        r.commands_rejected,
        r.clock_ms as f64 / 60_000.0
    );
    for st in &r.steps {
        let decoded = st.decoded.map_or("-".into(), |v| v.to_string());
        let note = match (&st.rejection, st.accepted) {
            (Some(rj), _) => format!("rejected: {}", rj.reason),
            (None, true) => "accepted".into(),
            (None, false) => "no command".into(),
        };
        let _ = writeln!(s, "  run {:>2}: intended {} decoded {decoded} after {} attempts, {note}", st.run + 1, st.intended, st.attempts);
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Calibrate(t) | Command::Online(t) | Command::Continuous(t) | Command::Functional(t) => {
            let runner = SessionRunner::new(load_config(&cli.config)?)?;
            let (condition, day) = resolve(&runner, t)?;
            let entry = match cli.command {
                Command::Calibrate(_) => ArchiveEntry::Calibration { condition, day },
                Command::Online(_) => ArchiveEntry::Online { condition, day },
                Command::Continuous(_) => ArchiveEntry::Continuous { condition, day },
                _ => ArchiveEntry::Functional { condition, day },
            };
            execute(&runner, &[entry], json)
        }
        Command::Day { day } => {
            let runner = SessionRunner::new(load_config(&cli.config)?)?;
            let days = match day {
                Some(d) if !runner.config.days.contains(&d) => {
                    return Err(BciError::Config(format!("day {d} is not in the configured days {:?}", runner.config.days)))
                }
                Some(d) => vec![d],
                None => runner.config.days.clone(),
            };
            let entries: Vec<_> = days.into_iter().map(|day| ArchiveEntry::Day { day }).collect();
            execute(&runner, &entries, json)
        }
        Command::Replay { archive, events } => match (archive, events) {
            (Some(dir), _) => replay_archive(&dir, json),
            (None, Some(log)) => replay_log(&load_config(&cli.config)?, &log, json),
            (None, None) => unreachable!("clap requires one"),
        },
        Command::Report { archive, sweep, points, runs } => {
            if sweep {
                let runner = SessionRunner::new(load_config(&cli.config)?)?;
                let r = runner.erp_sweep(points, runs)?;
                if json {
                    print_json(&r);
                } else {
                    println!("fraction  amp_uv  latency_cv  amplitude_cv");
                    for p in &r.points {
                        println!("{:>8.3}  {:>6.2}  {:>10.4}  {:>12.4}", p.fraction, p.amp_mean_uv, p.latency_cv, p.amplitude_cv);
                    }
                    let c = &r.correlation;
                    println!("amplitude vs latency CV: r = {:.3}, R² = {:.3}, p = {:.2e} (n = {})", c.r, c.r_squared, c.p_value, c.n);
                }
                return Ok(());
            }
            report(&archive.expect("clap requires one"), json)
        }
        Command::Serve { addr, pace } => {
            let gateway = Arc::new(Gateway::new(load_config(&cli.config)?, GatewayOptions { pace, ..Default::default() })?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = server::bind(addr)
                    .await
                    .map_err(|e| BciError::Data(format!("cannot listen on {addr}: {e}")))?;
                eprintln!("serving ws://{}{}", listener.local_addr()?, server::SESSION_PATH);
                server::serve(listener, gateway).await?;
                Ok(())
            })
        }
        Command::Ingest { dir, calibrate: train } => {
            let runner = SessionRunner::new(load_config(&cli.config)?)?;
            let set = ingest_epochs(&dir, &runner.pipeline.layout)?;
            let targets = set.epochs.iter().filter(|e| e.label == tactile_bci::preprocess::Label::Target).count();
            println!("{}: {} epochs ({} targets), {} channels at {} Hz", dir.display(), set.len(), targets, set.channel_names.len(), set.fs_hz);
            if train {
                let epochs = set.to_calibration_epochs(&runner.pipeline.preprocessor)?;
                let (model, _) = calibrate(&epochs, runner.pipeline.decoding_channels(), &runner.config.decoder, &runner.hash)?;
                print!("{}", model_summary(&model));
            }
            Ok(())
        }
        Command::Config => {
            let c = load_config(&cli.config)?;
            println!("# config_hash={}", c.hash());
            print!("{}", c.to_toml_string());
            Ok(())
        }
    }
}

fn replay_archive(dir: &Path, json: bool) -> Result<()> {
    let (_, outcome) = archive::replay(dir)?;
    if json {
        print_json(&serde_json::json!({
            "identical": outcome.identical(),
            "files_compared": outcome.files_compared,
            "mismatched": outcome.mismatched,
            "missing": outcome.missing,
            "extra": outcome.extra,
        }));
    } else {
        println!("{} files compared", outcome.files_compared);
        for (label, list) in [("differs", &outcome.mismatched), ("missing from replay", &outcome.missing), ("not in archive", &outcome.extra)] {
            for p in list {
                println!("  {label}: {p}");
            }
        }
    }
    if outcome.identical() {
        println!("replay identical");
        Ok(())
    } else {
        Err(BciError::Data("replay differs from the archive".into()))
    }
}

fn replay_log(config: &ExperimentConfig, log: &Path, json: bool) -> Result<()> {
    let text = std::fs::read_to_string(log).map_err(|e| BciError::Data(format!("cannot read {}: {e}", log.display())))?;
    let events = parse_event_log(&text)?;
    let gateway = Gateway::new(config.clone(), GatewayOptions::default())?;
    if let Some(h) = events.iter().find_map(|e| match &e.event {
        tactile_bci_gateway::ServerEvent::Hello(h) => Some(h.config_hash.clone()),
        _ => None,
    }) {
        if h != gateway.runner.hash {
            return Err(BciError::Data(format!("event log was recorded with config {} (given {})", &h[..12], &gateway.runner.hash[..12])));
        }
    }
    let runs = replay_events(&gateway, &events)?;
    let mismatched: Vec<u64> = runs.iter().filter(|r| !r.matches()).map(|r| r.run).collect();
    if json {
        print_json(&serde_json::json!({ "runs": runs.len(), "mismatched_runs": mismatched }));
    } else {
        for r in &runs {
            println!(
                "run {}: {} decisions, {}",
                r.run,
                r.live.len(),
                match r.first_mismatch {
                    None => "identical".to_string(),
                    Some(i) => format!("differs at decision {}", i + 1),
                }
            );
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(BciError::Data(format!("{} of {} runs differ", mismatched.len(), runs.len())))
    }
}

fn report(dir: &Path, json: bool) -> Result<()> {
    let (_, archive) = archive::load_archive(dir)?;
    let mut sessions = Vec::new();
    for (path, _) in archive.files.iter().filter(|(p, _)| p.ends_with("report.json") && !p.ends_with("day_report.json")) {
        if path.ends_with("continuous_report.json") {
            continue;
        }
        sessions.push(parse::<SessionReport>(&archive, path)?);
    }
    if json {
        print_json(&sessions);
        return Ok(());
    }
    if sessions.is_empty() {
        println!("no session reports in {}", dir.display());
    }
    for s in &sessions {
        print!("{}", session_text(s));
    }
    for (path, _) in archive.files.iter().filter(|(p, _)| p.ends_with("functional.json")) {
        print!("{}", functional_text(&parse(&archive, path)?));
    }
    if !sessions.is_empty() {
        print!("\n{}", reports_to_csv(&sessions));
    }
    Ok(())
}
