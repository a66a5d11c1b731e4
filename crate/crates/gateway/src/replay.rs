//! Replay a recorded event log through the batch pipeline.
//!
//! The log holds everything needed: each run's cue event names the target,
//! condition, day and run seed, and every stimulus event records what was
//! attended. Live decisions must equal the batch decisions over the same
//! attention (a prefix of them for runs that stopped at a detection).

use std::collections::BTreeMap;

use tactile_bci::decoder::RunOutcome;
use tactile_bci::error::{BciError, Result};
use tactile_bci::live::replay_attention;
use tactile_bci::stim::VibratorId;

use crate::protocol::*;
use crate::session::Gateway;

/// One envelope per line; blank lines are skipped.
pub fn parse_event_log(text: &str) -> Result<Vec<Envelope>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| BciError::Data(format!("event log line {}: {e}", i + 1))))
        .collect()
}

pub fn event_log_text(events: &[Envelope]) -> String {
    events.iter().map(|e| e.to_json() + "\n").collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReplay {
    pub run: u64,
    pub mode: RunKind,
    pub target: VibratorId,
    pub live: Vec<DecisionEvent>,
    pub batch: RunOutcome,
    /// Index of the first live decision that differs from the batch one.
    pub first_mismatch: Option<usize>,
}

impl RunReplay {
    pub fn matches(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

#[derive(Default)]
struct LoggedRun {
    target: Option<VibratorId>,
    info: Option<RunInfo>,
    attention: Vec<Option<VibratorId>>,
    decisions: Vec<DecisionEvent>,
    ended: bool,
}

/// Replay every completed run in `events`, which must come from one session.
pub fn replay_events(gateway: &Gateway, events: &[Envelope]) -> Result<Vec<RunReplay>> {
    let mut runs: BTreeMap<u64, LoggedRun> = BTreeMap::new();
    let mut session: Option<&str> = None;
    let mut last_seq = 0;
    for env in events {
        match session {
            None => session = Some(&env.session),
            Some(s) if s != env.session => {
                return Err(BciError::Data(format!("event log mixes sessions {s} and {}", env.session)))
            }
            _ => {}
        }
        if env.seq <= last_seq {
            return Err(BciError::Data(format!("sequence number {} after {last_seq}", env.seq)));
        }
        last_seq = env.seq;
        match &env.event {
            ServerEvent::Feedback(f) if f.phase == FeedbackPhase::Cue => {
                let r = runs.entry(f.run).or_default();
                r.target = Some(f.vibrator);
                r.info = f.info.clone();
            }
            ServerEvent::Stimulus(s) => {
                let r = runs.entry(s.run).or_default();
                if s.index != r.attention.len() {
                    return Err(BciError::Data(format!("run {}: stimulus {} out of order", s.run, s.index)));
                }
                r.attention.push(s.attended);
            }
            ServerEvent::Decision(d) => runs.entry(d.run).or_default().decisions.push(d.clone()),
            ServerEvent::RunEnd(e) => runs.entry(e.run).or_default().ended = true,
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (run, logged) in runs.into_iter().filter(|(_, r)| r.ended) {
        let (Some(target), Some(info)) = (logged.target, logged.info) else {
            return Err(BciError::Data(format!("run {run} has no cue event")));
        };
        let profile = gateway.config().profile_for(info.condition, info.day)?;
        let decoder = gateway.decoder(info.condition, info.day)?;
        let batch = replay_attention(
            &gateway.runner.pipeline,
            &decoder,
            &profile,
            target,
            info.run_seed,
            &logged.attention,
        )?;
        let first_mismatch = compare(&logged.decisions, &batch, info.mode);
        out.push(RunReplay { run, mode: info.mode, target, live: logged.decisions, batch, first_mismatch });
    }
    Ok(out)
}

fn compare(live: &[DecisionEvent], batch: &RunOutcome, mode: RunKind) -> Option<usize> {
    for (i, d) in live.iter().enumerate() {
        let Some(b) = batch.decisions.get(i) else {
            return Some(i);
        };
        let same = d.round == b.round_index + 1
            && d.attempt as usize == i + 1
            && d.detected == b.detected
            && d.positive == b.positive
            && d.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Some(i);
        }
    }
    let expected = match mode {
        RunKind::Continuous => batch.decisions.len(),
        RunKind::Online | RunKind::Functional => batch.online_decisions().len(),
    };
    (live.len() != expected).then_some(live.len().min(expected))
}
