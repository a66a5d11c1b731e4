//! Full default protocol under a wall-clock budget, then a byte-exact replay
//! of the archive it produced. Set TBCI_TIME_SLACK to scale the budget on
//! slow machines.

use std::time::{Duration, Instant};

use tactile_bci::archive::{execute, load_archive, replay, ArchiveEntry};
use tactile_bci::config::ExperimentConfig;
use tactile_bci::session::{DayReport, SessionRunner};
use tactile_bci::synth::Condition;

const BUDGET: Duration = Duration::from_secs(300);

fn slack() -> f64 {
    std::env::var("TBCI_TIME_SLACK").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0)
}

#[test]
fn three_day_protocol_within_budget_and_replays() {
    let config = ExperimentConfig::default();
    let runner = SessionRunner::new(config.clone()).unwrap();
    let entries: Vec<_> = config.days.iter().map(|&day| ArchiveEntry::Day { day }).collect();

    let t = Instant::now();
    let archive = execute(&runner, &entries).unwrap();
    let elapsed = t.elapsed();
    eprintln!("3-day protocol: {elapsed:?}");
    assert!(elapsed.as_secs_f64() < BUDGET.as_secs_f64() * slack(), "took {elapsed:?}");

    for day in 1..=3u8 {
        let bytes = &archive.files[&format!("day{day}/day_report.json")];
        let report: DayReport = serde_json::from_slice(bytes).unwrap();
        assert_eq!(report.config_hash, runner.hash);
        assert_eq!(report.sessions.len(), 2);
        for c in Condition::BOTH {
            let s = report.sessions.iter().find(|s| s.condition == c).unwrap();
            assert_eq!(s.n_trials, 32);
            assert!(report.success_rate(c).is_some());
            assert_eq!(s.continuous.as_ref().unwrap().runs, 16);
            assert_eq!(s.erp.len(), 32);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    archive.write(dir.path()).unwrap();
    let (cfg, loaded) = load_archive(dir.path()).unwrap();
    assert_eq!(cfg, config);
    assert_eq!(loaded.entries, entries);

    let (_, outcome) = replay(dir.path()).unwrap();
    assert!(outcome.identical(), "{outcome:?}");
    assert_eq!(outcome.files_compared, archive.rendered().len());
}
