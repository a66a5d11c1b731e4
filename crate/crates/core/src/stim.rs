//! Vibrotactile oddball scheduling.
//!
//! A run is a sequence of rounds; each round activates every vibrator exactly
//! once in pseudorandom order. Bursts last 200 ms and are followed by a 200 ms
//! gap, so a round spans 1600 ms and onsets advance in 400 ms steps.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BciError, Result};

pub const N_VIBRATORS: usize = 4;
pub const BURST_MS: u32 = 200;
pub const ISI_MS: u32 = 200;
pub const STIMULUS_PERIOD_MS: u64 = (BURST_MS + ISI_MS) as u64;
pub const ROUND_MS: u64 = STIMULUS_PERIOD_MS * N_VIBRATORS as u64;
/// Rounds per run (80 stimuli, 20 of them on the target).
pub const DEFAULT_ROUNDS: usize = 20;

/// One of the four tactile vibrators; each maps to one command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct VibratorId(u8);

impl VibratorId {
    pub const ALL: [VibratorId; N_VIBRATORS] =
        [VibratorId(1), VibratorId(2), VibratorId(3), VibratorId(4)];

    pub fn new(index: u8) -> Result<Self> {
        if (1..=N_VIBRATORS as u8).contains(&index) {
            Ok(VibratorId(index))
        } else {
            Err(BciError::InvalidVibrator(index))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based slot, handy for `[T; 4]` tables.
    pub fn slot(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_slot(slot: usize) -> Self {
        assert!(slot < N_VIBRATORS, "vibrator slot {slot} out of range");
        VibratorId(slot as u8 + 1)
    }
}

impl TryFrom<u8> for VibratorId {
    type Error = BciError;
    fn try_from(value: u8) -> Result<Self> {
        VibratorId::new(value)
    }
}

impl From<VibratorId> for u8 {
    fn from(v: VibratorId) -> u8 {
        v.0
    }
}

impl fmt::Display for VibratorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for VibratorId {
    type Err = BciError;
    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| BciError::InvalidParameter(format!("not a vibrator id: {s:?}")))?;
        VibratorId::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub vibrator: VibratorId,
    pub onset_ms: u64,
    pub duration_ms: u32,
    pub round_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulationSchedule {
    pub rounds: Vec<[VibratorId; N_VIBRATORS]>,
    pub stimuli: Vec<StimulusSpec>,
    pub target: VibratorId,
    pub seed: u64,
}

/// Draw one round: a uniform permutation of the four vibrators.
///
/// With `previous_last` set, permutations starting with that vibrator are
/// redrawn so the same site never fires twice in a row across a boundary.
pub fn build_round<R: Rng + ?Sized>(
    rng: &mut R,
    previous_last: Option<VibratorId>,
) -> [VibratorId; N_VIBRATORS] {
    let mut round = VibratorId::ALL;
    loop {
        round.shuffle(rng);
        if previous_last != Some(round[0]) {
            return round;
        }
    }
}

/// Options for [`build_run_schedule_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Forbid back-to-back repeats across round boundaries.
    pub no_boundary_repeat: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { no_boundary_repeat: true }
    }
}

pub fn build_run_schedule(target: VibratorId, n_rounds: usize, seed: u64) -> Result<StimulationSchedule> {
    build_run_schedule_with(target, n_rounds, seed, ScheduleOptions::default())
}

pub fn build_run_schedule_with(
    target: VibratorId,
    n_rounds: usize,
    seed: u64,
    options: ScheduleOptions,
) -> Result<StimulationSchedule> {
    if n_rounds == 0 {
        return Err(BciError::InvalidParameter("n_rounds must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut stimuli = Vec::with_capacity(n_rounds * N_VIBRATORS);
    let mut last = None;
    for round_index in 0..n_rounds {
        let guard = if options.no_boundary_repeat { last } else { None };
        let round = build_round(&mut rng, guard);
        let round_start = ROUND_MS * round_index as u64;
        for (k, &vibrator) in round.iter().enumerate() {
            stimuli.push(StimulusSpec {
                vibrator,
                onset_ms: round_start + STIMULUS_PERIOD_MS * k as u64,
                duration_ms: BURST_MS,
                round_index: round_index as u32,
            });
        }
        last = Some(round[N_VIBRATORS - 1]);
        rounds.push(round);
    }
    Ok(StimulationSchedule { rounds, stimuli, target, seed })
}

impl StimulationSchedule {
    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn duration_ms(&self) -> u64 {
        ROUND_MS * self.rounds.len() as u64
    }

    pub fn last_onset_ms(&self) -> u64 {
        self.stimuli.last().map_or(0, |s| s.onset_ms)
    }

    pub fn is_target(&self, stimulus: &StimulusSpec) -> bool {
        stimulus.vibrator == self.target
    }

    pub fn target_count(&self) -> usize {
        self.stimuli.iter().filter(|s| self.is_target(s)).count()
    }

    /// Line-oriented text form: `round,onset_ms,vibrator,is_target`.
    ///
    /// A leading `#` comment records target and seed so the schedule can be
    /// rebuilt exactly; extra comment lines (such as a config hash) may be
    /// prepended by callers.
    pub fn to_text(&self) -> String {
        let mut out = format!("# target={} seed={}\n", self.target, self.seed);
        for s in &self.stimuli {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.round_index,
                s.onset_ms,
                s.vibrator,
                u8::from(self.is_target(s))
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = 0u64;
        let mut target: Option<VibratorId> = None;
        let mut stimuli = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split_whitespace() {
                    if let Some(v) = field.strip_prefix("seed=") {
                        seed = v.parse().map_err(|_| data_err(lineno, "bad seed"))?;
                    } else if let Some(v) = field.strip_prefix("target=") {
                        target = Some(v.parse()?);
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(data_err(lineno, "expected 4 comma-separated fields"));
            }
            let round_index: u32 = fields[0].parse().map_err(|_| data_err(lineno, "bad round"))?;
            let onset_ms: u64 = fields[1].parse().map_err(|_| data_err(lineno, "bad onset"))?;
            let vibrator: VibratorId = fields[2].parse()?;
            let is_target = match fields[3] {
                "1" => true,
                "0" => false,
                _ => return Err(data_err(lineno, "is_target must be 0 or 1")),
            };
            match (is_target, target) {
                (true, None) => target = Some(vibrator),
                (true, Some(t)) if t != vibrator => {
                    return Err(data_err(lineno, "conflicting target vibrators"))
                }
                (false, Some(t)) if t == vibrator => {
                    return Err(data_err(lineno, "target vibrator flagged as non-target"))
                }
                _ => {}
            }
            stimuli.push(StimulusSpec { vibrator, onset_ms, duration_ms: BURST_MS, round_index });
        }
        let target = target.ok_or_else(|| BciError::Data("schedule has no target".into()))?;
        let rounds = group_rounds(&stimuli)?;
        Ok(StimulationSchedule { rounds, stimuli, target, seed })
    }
}

fn data_err(lineno: usize, msg: &str) -> BciError {
    BciError::Data(format!("schedule line {}: {msg}", lineno + 1))
}

fn group_rounds(stimuli: &[StimulusSpec]) -> Result<Vec<[VibratorId; N_VIBRATORS]>> {
    if stimuli.len() % N_VIBRATORS != 0 {
        return Err(BciError::Data("stimulus count is not a multiple of 4".into()));
    }
    stimuli
        .chunks(N_VIBRATORS)
        .enumerate()
        .map(|(r, chunk)| {
            let mut round = [VibratorId(1); N_VIBRATORS];
            let mut seen = [false; N_VIBRATORS];
            for (k, s) in chunk.iter().enumerate() {
                let expected = ROUND_MS * r as u64 + STIMULUS_PERIOD_MS * k as u64;
                if s.round_index as usize != r || s.onset_ms != expected {
                    return Err(BciError::Data(format!("stimulus {} breaks the 400 ms grid", r * 4 + k)));
                }
                if std::mem::replace(&mut seen[s.vibrator.slot()], true) {
                    return Err(BciError::Data(format!("round {r} repeats vibrator {}", s.vibrator)));
                }
                round[k] = s.vibrator;
            }
            Ok(round)
        })
        .collect()
}
