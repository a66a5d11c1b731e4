//! Synchronous per-connection session: client frames and pacer ticks in,
//! protocol events out. No I/O happens here.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tactile_bci::config::ExperimentConfig;
use tactile_bci::decoder::{DecodeDecision, FIRST_DECISION_ROUND};
use tactile_bci::error::{BciError, Result};
use tactile_bci::live::{LiveEvent, LiveRun, RunMode, DECODE_LAG};
use tactile_bci::pipeline::OnlineDecoder;
use tactile_bci::robot::{apply_command, plan_from, TaskScript, WorldState};
use tactile_bci::seeds::{derive, tag};
use tactile_bci::session::SessionRunner;
use tactile_bci::stim::{VibratorId, ROUND_MS, STIMULUS_PERIOD_MS};
use tactile_bci::synth::Condition;

use crate::protocol::*;

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayOptions {
    /// Multiplier on the 400 ms stimulus period; 0 runs unpaced.
    pub pace: f64,
    pub heartbeat: Duration,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self { pace: 1.0, heartbeat: DEFAULT_HEARTBEAT }
    }
}

impl GatewayOptions {
    pub fn stimulus_period(&self) -> Duration {
        Duration::from_secs_f64(STIMULUS_PERIOD_MS as f64 / 1000.0 * self.pace.max(0.0))
    }
}

/// State shared by every session of one server: the configuration and the
/// calibrated decoders, which are pure functions of it.
pub struct Gateway {
    pub runner: SessionRunner,
    pub options: GatewayOptions,
    decoders: Mutex<HashMap<(Condition, u8), Arc<OnlineDecoder>>>,
}

impl Gateway {
    pub fn new(config: ExperimentConfig, options: GatewayOptions) -> Result<Self> {
        if !(options.pace.is_finite() && options.pace >= 0.0) {
            return Err(BciError::Config(format!("pace must be finite and >= 0, got {}", options.pace)));
        }
        Ok(Self { runner: SessionRunner::new(config)?, options, decoders: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.runner.config
    }

    /// Use an existing decoder instead of calibrating on first use.
    pub fn insert_decoder(&self, condition: Condition, day: u8, decoder: OnlineDecoder) {
        self.decoders.lock().unwrap().insert((condition, day), Arc::new(decoder));
    }

    /// Decoder for a condition and day, calibrating it on first request.
    pub fn decoder(&self, condition: Condition, day: u8) -> Result<Arc<OnlineDecoder>> {
        if let Some(d) = self.decoders.lock().unwrap().get(&(condition, day)) {
            return Ok(d.clone());
        }
        tracing::info!(%condition, day, "calibrating decoder");
        let cal = self.runner.run_calibration(condition, day)?;
        let decoder = Arc::new(self.runner.pipeline.online_decoder(&cal.model)?);
        Ok(self.decoders.lock().unwrap().entry((condition, day)).or_insert(decoder).clone())
    }

    pub fn default_condition(&self) -> Condition {
        self.config().conditions[0]
    }

    pub fn default_day(&self) -> u8 {
        *self.config().days.iter().max().expect("validated non-empty")
    }

    /// Seed of the `run`-th run of a session when the client gives none.
    pub fn run_seed(&self, run: u64) -> u64 {
        derive(self.config().seed, &[tag::LIVE, run])
    }
}

struct ActiveRun {
    run: u64,
    mode: RunKind,
    target: VibratorId,
    live: LiveRun,
    decoder: Arc<OnlineDecoder>,
}

pub struct GatewaySession {
    gateway: Arc<Gateway>,
    id: String,
    seq: u64,
    trace: bool,
    attention: Option<VibratorId>,
    runs: u64,
    active: Option<ActiveRun>,
    script: TaskScript,
    world: WorldState,
}

impl GatewaySession {
    pub fn new(gateway: Arc<Gateway>, id: impl Into<String>) -> Result<Self> {
        let script = gateway.config().script()?;
        let world = script.initial;
        Ok(Self { gateway, id: id.into(), seq: 0, trace: false, attention: None, runs: 0, active: None, script, world })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_running(&self) -> bool {
        self.active.is_some()
    }

    pub fn attention(&self) -> Option<VibratorId> {
        self.attention
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    fn envelope(&mut self, event: ServerEvent) -> Envelope {
        self.seq += 1;
        Envelope { v: PROTOCOL_VERSION, session: self.id.clone(), seq: self.seq, event }
    }

    fn error(&mut self, code: ErrorCode, message: impl Into<String>, reply_to: Option<u64>) -> Vec<Envelope> {
        vec![self.envelope(ServerEvent::Error(ErrorEvent { code, message: message.into(), reply_to }))]
    }

    /// A binary frame: rejected, the session carries on.
    pub fn handle_binary(&mut self) -> Vec<Envelope> {
        self.error(ErrorCode::BinaryFrame, "binary frames are not accepted; send JSON text", None)
    }

    pub fn handle_text(&mut self, text: &str) -> Vec<Envelope> {
        let frame = match parse_client_frame(text) {
            Ok(f) => f,
            Err(e) => {
                tracing::debug!(session = %self.id, code = ?e.code, "rejected frame");
                return vec![self.envelope(ServerEvent::Error(e.into()))];
            }
        };
        match frame.message {
            ClientMessage::Hello(h) => {
                self.trace = h.trace;
                let ack = self.hello_ack();
                vec![self.envelope(ServerEvent::Hello(ack))]
            }
            ClientMessage::SetAttention(a) => match a.vibrator.map(VibratorId::new).transpose() {
                Ok(v) => {
                    self.attention = v;
                    if let Some(active) = &mut self.active {
                        active.live.set_attention(v);
                    }
                    Vec::new()
                }
                Err(e) => self.error(ErrorCode::InvalidVibrator, e.to_string(), frame.seq),
            },
            ClientMessage::StartRun(s) => self.start_run(s, frame.seq),
        }
    }

    fn hello_ack(&self) -> HelloAck {
        let cfg = self.gateway.config();
        let n_rounds = cfg.protocol.n_rounds;
        HelloAck {
            protocol_version: PROTOCOL_VERSION,
            schema_version: cfg.schema_version,
            config_hash: self.gateway.runner.hash.clone(),
            seed: cfg.seed,
            days: cfg.days.clone(),
            conditions: cfg.conditions.clone(),
            n_rounds,
            stimulus_period_ms: STIMULUS_PERIOD_MS,
            round_ms: ROUND_MS,
            first_decision_round: FIRST_DECISION_ROUND as u32,
            max_decisions: (n_rounds + 1 - FIRST_DECISION_ROUND) as u32,
            decode_lag: DECODE_LAG,
            pace: self.gateway.options.pace,
            heartbeat_ms: self.gateway.options.heartbeat.as_millis() as u64,
            trace: self.trace,
            functional_script: self.script.name.clone(),
        }
    }

    fn start_run(&mut self, s: StartRun, reply_to: Option<u64>) -> Vec<Envelope> {
        if let Some(a) = &self.active {
            return self.error(ErrorCode::RunInProgress, format!("run {} is still in progress", a.run), reply_to);
        }
        let condition = s.condition.unwrap_or_else(|| self.gateway.default_condition());
        let day = s.day.unwrap_or_else(|| self.gateway.default_day());
        let mut events = Vec::new();
        if s.mode == RunKind::Functional && self.script.goal_reached(&self.world) {
            self.world = self.script.initial;
        }
        let target = match s.target.map(VibratorId::new).transpose() {
            Err(e) => return self.error(ErrorCode::InvalidVibrator, e.to_string(), reply_to),
            Ok(Some(t)) => t,
            Ok(None) if s.mode == RunKind::Functional => match plan_from(&self.script, &self.world) {
                Some(plan) => plan[0],
                None => return self.error(ErrorCode::Internal, "functional script has no path to its goal", reply_to),
            },
            Ok(None) => return self.error(ErrorCode::InvalidPayload, "start_run needs a target", reply_to),
        };
        let prepared = (|| {
            let profile = self.gateway.config().profile_for(condition, day)?;
            let decoder = self.gateway.decoder(condition, day)?;
            Ok::<_, BciError>((profile, decoder))
        })();
        let (profile, decoder) = match prepared {
            Ok(p) => p,
            Err(e) => return self.error(ErrorCode::InvalidPayload, e.to_string(), reply_to),
        };
        let run = self.runs;
        let run_seed = s.seed.unwrap_or_else(|| self.gateway.run_seed(run));
        let mode = if s.mode == RunKind::Continuous { RunMode::Continuous } else { RunMode::Online };
        let live = match LiveRun::new(&self.gateway.runner.pipeline, &profile, target, run_seed, mode, self.attention) {
            Ok(l) => l,
            Err(e) => return self.error(ErrorCode::Internal, e.to_string(), reply_to),
        };
        self.runs += 1;
        let info = RunInfo { mode: s.mode, condition, day, run_seed, n_stimuli: live.schedule().stimuli.len() };
        events.push(self.envelope(ServerEvent::Feedback(FeedbackEvent {
            run,
            phase: FeedbackPhase::Cue,
            vibrator: target,
            correct: None,
            info: Some(info),
        })));
        if s.mode == RunKind::Functional {
            let snapshot = self.arm_state(Some(run), None, true, None);
            events.push(self.envelope(snapshot));
        }
        tracing::debug!(session = %self.id, run, %target, ?mode, "run started");
        self.active = Some(ActiveRun { run, mode: s.mode, target, live, decoder });
        events
    }

    fn arm_state(
        &self,
        run: Option<u64>,
        command: Option<VibratorId>,
        accepted: bool,
        rejection: Option<tactile_bci::robot::Rejection>,
    ) -> ServerEvent {
        ServerEvent::ArmState(ArmStateEvent {
            run,
            script: self.script.name.clone(),
            command,
            accepted,
            rejection,
            world: self.world,
            goal_reached: self.script.goal_reached(&self.world),
            next_command: plan_from(&self.script, &self.world).and_then(|p| p.first().copied()),
        })
    }

    /// Place the next stimulus of the active run. Nothing happens when idle.
    pub fn tick(&mut self) -> Vec<Envelope> {
        let Some(mut active) = self.active.take() else {
            return Vec::new();
        };
        let stepped = active.live.step(&self.gateway.runner.pipeline, &active.decoder);
        let live_events = match stepped {
            Ok(ev) => ev,
            Err(e) => return self.error(ErrorCode::Internal, format!("run {} aborted: {e}", active.run), None),
        };
        let mut out = Vec::new();
        let mut stimulus = None;
        let mut traces = Vec::new();
        let mut rest = Vec::new();
        for ev in live_events {
            match ev {
                LiveEvent::Stimulus { index, round, vibrator, onset_ms, attended } => {
                    stimulus = Some(StimulusEvent {
                        run: active.run,
                        index,
                        round: round + 1,
                        vibrator,
                        onset_ms,
                        attended,
                        traces: Vec::new(),
                    });
                }
                LiveEvent::Trace { start_ms, fs_hz, cz_uv } => {
                    if self.trace {
                        traces.push(TraceSegment { start_ms, fs_hz, cz_uv });
                    }
                }
                other => rest.push(other),
            }
        }
        if let Some(mut st) = stimulus {
            st.traces = traces;
            out.push(self.envelope(ServerEvent::Stimulus(st)));
        }
        let mut finished = false;
        for ev in rest {
            match ev {
                LiveEvent::Decision { attempt, decision } => {
                    out.push(self.envelope(ServerEvent::Decision(decision_event(active.run, attempt, &decision))));
                    if let Some(v) = decision.detected {
                        out.push(self.envelope(ServerEvent::Feedback(FeedbackEvent {
                            run: active.run,
                            phase: FeedbackPhase::Detected,
                            vibrator: v,
                            correct: Some(v == active.target),
                            info: None,
                        })));
                    }
                }
                LiveEvent::RunEnd { outcome } => {
                    finished = true;
                    if active.mode == RunKind::Functional {
                        let decoded = outcome.online_decisions().last().and_then(|d| d.detected);
                        if let Some(cmd) = decoded {
                            let ev = match apply_command(&self.world, &self.script, cmd) {
                                Ok(next) => {
                                    self.world = next;
                                    self.arm_state(Some(active.run), Some(cmd), true, None)
                                }
                                Err(r) => self.arm_state(Some(active.run), Some(cmd), false, Some(r)),
                            };
                            out.push(self.envelope(ev));
                        }
                    }
                    let detections = outcome.decisions.iter().filter(|d| d.detected.is_some()).count();
                    let false_positives =
                        outcome.decisions.iter().filter(|d| d.detected.is_some_and(|v| v != active.target)).count();
                    let end = RunEndEvent {
                        run: active.run,
                        target: active.target,
                        result: outcome.result,
                        attempts: outcome.attempts,
                        n_decisions: outcome.decisions.len(),
                        detections,
                        false_positives,
                    };
                    out.push(self.envelope(ServerEvent::RunEnd(end)));
                }
                LiveEvent::Stimulus { .. } | LiveEvent::Trace { .. } => unreachable!("split above"),
            }
        }
        if !finished {
            self.active = Some(active);
        }
        out
    }

    /// Tick until the active run ends.
    pub fn run_to_end(&mut self) -> Vec<Envelope> {
        let mut out = Vec::new();
        while self.is_running() {
            out.extend(self.tick());
        }
        out
    }
}

fn decision_event(run: u64, attempt: u32, d: &DecodeDecision) -> DecisionEvent {
    DecisionEvent {
        run,
        attempt,
        round: d.round_index + 1,
        scores: d.scores,
        positive: d.positive,
        detected: d.detected,
    }
}
