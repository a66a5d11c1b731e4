//! JSON message schema spoken over `/session`.
//!
//! Every frame is a JSON object with a `kind` and a `payload`. Server frames
//! also carry the protocol version, the session id and a sequence number that
//! strictly increases within a session.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tactile_bci::decoder::OutcomeKind;
use tactile_bci::robot::{Rejection, WorldState};
use tactile_bci::stim::VibratorId;
use tactile_bci::synth::Condition;

pub const PROTOCOL_VERSION: u32 = 1;

pub const CLIENT_KINDS: [&str; 3] = ["hello", "start_run", "set_attention"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hello {
    pub client: Option<String>,
    /// Attach the 100 Hz Cz display trace to stimulus events.
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Cued run that stops at the first detection.
    #[default]
    Online,
    /// Every decision round is reported; the run always lasts all rounds.
    Continuous,
    /// Online run whose decoded command drives the robot script.
    Functional,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartRun {
    pub mode: RunKind,
    /// Cued vibrator. Functional runs default to the next planned command.
    pub target: Option<u8>,
    pub condition: Option<Condition>,
    pub day: Option<u8>,
    /// Run seed; derived from the config seed and run index when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetAttention {
    /// `null` is rest: nothing attended.
    pub vibrator: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Hello(Hello),
    StartRun(StartRun),
    SetAttention(SetAttention),
}

/// A parsed client frame. `seq` is optional and only echoed in errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientFrame {
    pub seq: Option<u64>,
    pub message: ClientMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownKind,
    InvalidPayload,
    UnsupportedVersion,
    InvalidVibrator,
    RunInProgress,
    BinaryFrame,
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameError {
    pub code: ErrorCode,
    pub message: String,
    pub seq: Option<u64>,
}

impl FrameError {
    fn new(code: ErrorCode, message: impl Into<String>, seq: Option<u64>) -> Self {
        Self { code, message: message.into(), seq }
    }
}

/// Parse one text frame. Errors keep the client's `seq` when it could be read.
pub fn parse_client_frame(text: &str) -> Result<ClientFrame, FrameError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| FrameError::new(ErrorCode::Malformed, format!("not valid JSON: {e}"), None))?;
    let Value::Object(mut obj) = value else {
        return Err(FrameError::new(ErrorCode::Malformed, "frame must be a JSON object", None));
    };
    let seq = obj.get("seq").and_then(Value::as_u64);
    let err = |code, msg: String| FrameError::new(code, msg, seq);
    if let Some(v) = obj.get("v") {
        if v.as_u64() != Some(PROTOCOL_VERSION as u64) {
            return Err(err(ErrorCode::UnsupportedVersion, format!("protocol version {v} unsupported (server speaks {PROTOCOL_VERSION})")));
        }
    }
    let kind = match obj.get("kind") {
        Some(Value::String(k)) => k.clone(),
        Some(_) => return Err(err(ErrorCode::Malformed, "kind must be a string".into())),
        None => return Err(err(ErrorCode::Malformed, "missing kind".into())),
    };
    let payload = match obj.remove("payload") {
        None | Some(Value::Null) => Value::Object(Default::default()),
        Some(p) => p,
    };
    fn body<T: serde::de::DeserializeOwned>(kind: &str, p: Value, seq: Option<u64>) -> Result<T, FrameError> {
        serde_json::from_value(p).map_err(|e| FrameError::new(ErrorCode::InvalidPayload, format!("{kind}: {e}"), seq))
    }
    let message = match kind.as_str() {
        "hello" => ClientMessage::Hello(body(&kind, payload, seq)?),
        "start_run" => ClientMessage::StartRun(body(&kind, payload, seq)?),
        "set_attention" => ClientMessage::SetAttention(body(&kind, payload, seq)?),
        other => {
            return Err(err(
                ErrorCode::UnknownKind,
                format!("unknown kind {other:?}; clients may send {}", CLIENT_KINDS.join(", ")),
            ))
        }
    };
    Ok(ClientFrame { seq, message })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    pub protocol_version: u32,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub days: Vec<u8>,
    pub conditions: Vec<Condition>,
    pub n_rounds: usize,
    pub stimulus_period_ms: u64,
    pub round_ms: u64,
    /// One-based round of the first decision.
    pub first_decision_round: u32,
    pub max_decisions: u32,
    /// Stimuli between a stimulus and the decoding of its epoch.
    pub decode_lag: usize,
    pub pace: f64,
    pub heartbeat_ms: u64,
    pub trace: bool,
    pub functional_script: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSegment {
    pub start_ms: u64,
    pub fs_hz: f64,
    pub cz_uv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub run: u64,
    /// Position in the run's schedule.
    pub index: usize,
    /// One-based round.
    pub round: u32,
    pub vibrator: VibratorId,
    pub onset_ms: u64,
    pub attended: Option<VibratorId>,
    /// Display traces of epochs that became final with this stimulus.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<TraceSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub run: u64,
    /// One-based decision count; the first decision is attempt 1.
    pub attempt: u32,
    /// One-based round the decision closes.
    pub round: u32,
    pub scores: [f64; 4],
    pub positive: [bool; 4],
    pub detected: Option<VibratorId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackPhase {
    /// Run start: show the cue.
    Cue,
    /// A vibrator was detected: light its marker.
    Detected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub mode: RunKind,
    pub condition: Condition,
    pub day: u8,
    pub run_seed: u64,
    pub n_stimuli: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub run: u64,
    pub phase: FeedbackPhase,
    /// Cue target, or the detected vibrator.
    pub vibrator: VibratorId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<RunInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStateEvent {
    pub run: Option<u64>,
    pub script: String,
    pub command: Option<VibratorId>,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
    pub world: WorldState,
    pub goal_reached: bool,
    /// First command of a shortest plan to the goal.
    pub next_command: Option<VibratorId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEndEvent {
    pub run: u64,
    pub target: VibratorId,
    pub result: OutcomeKind,
    pub attempts: u32,
    pub n_decisions: usize,
    /// Decisions that detected some vibrator.
    pub detections: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<u64>,
}

impl From<FrameError> for ErrorEvent {
    fn from(e: FrameError) -> Self {
        Self { code: e.code, message: e.message, reply_to: e.seq }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ServerEvent {
    Hello(HelloAck),
    Stimulus(StimulusEvent),
    Decision(DecisionEvent),
    Feedback(FeedbackEvent),
    ArmState(ArmStateEvent),
    RunEnd(RunEndEvent),
    Error(ErrorEvent),
}

impl ServerEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerEvent::Hello(_) => "hello",
            ServerEvent::Stimulus(_) => "stimulus",
            ServerEvent::Decision(_) => "decision",
            ServerEvent::Feedback(_) => "feedback",
            ServerEvent::ArmState(_) => "arm_state",
            ServerEvent::RunEnd(_) => "run_end",
            ServerEvent::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub event: ServerEvent,
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_frames_parse() {
        let f = parse_client_frame(r#"{"kind":"start_run","seq":3,"payload":{"target":2}}"#).unwrap();
        assert_eq!(f.seq, Some(3));
        assert_eq!(f.message, ClientMessage::StartRun(StartRun { target: Some(2), ..Default::default() }));
        let f = parse_client_frame(r#"{"kind":"hello"}"#).unwrap();
        assert_eq!(f.message, ClientMessage::Hello(Hello::default()));
        let f = parse_client_frame(r#"{"kind":"set_attention","payload":{"vibrator":null}}"#).unwrap();
        assert_eq!(f.message, ClientMessage::SetAttention(SetAttention { vibrator: None }));
    }

    #[test]
    fn bad_frames_are_classified() {
        let code = |t: &str| parse_client_frame(t).unwrap_err().code;
        assert_eq!(code("{not json"), ErrorCode::Malformed);
        assert_eq!(code("[1,2]"), ErrorCode::Malformed);
        assert_eq!(code(r#"{"payload":{}}"#), ErrorCode::Malformed);
        assert_eq!(code(r#"{"kind":"dance"}"#), ErrorCode::UnknownKind);
        assert_eq!(code(r#"{"kind":"stimulus"}"#), ErrorCode::UnknownKind);
        assert_eq!(code(r#"{"kind":"start_run","payload":{"mode":"sprint"}}"#), ErrorCode::InvalidPayload);
        assert_eq!(code(r#"{"kind":"hello","v":9}"#), ErrorCode::UnsupportedVersion);
        let e = parse_client_frame(r#"{"kind":"dance","seq":41}"#).unwrap_err();
        assert_eq!(e.seq, Some(41));
    }

    #[test]
    fn envelope_is_flat() {
        let env = Envelope {
            v: PROTOCOL_VERSION,
            session: "s1".into(),
            seq: 7,
            event: ServerEvent::Error(ErrorEvent { code: ErrorCode::UnknownKind, message: "x".into(), reply_to: None }),
        };
        let v: Value = serde_json::from_str(&env.to_json()).unwrap();
        assert_eq!(v["kind"], "error");
        assert_eq!(v["seq"], 7);
        assert_eq!(v["payload"]["code"], "unknown_kind");
        let back: Envelope = serde_json::from_str(&env.to_json()).unwrap();
        assert_eq!(back, env);
    }
}
