//! Live operator gateway: a JSON-over-WebSocket endpoint at `/session`.
//!
//! One connection is one session. The console picks what the synthetic
//! subject attends (`set_attention`) and starts runs; the session streams
//! stimuli at the 400 ms cadence, decisions from the fourth round on,
//! feedback markers, arm state for functional runs and run ends.

pub mod protocol;
pub mod replay;
pub mod server;
pub mod session;

pub use protocol::{Envelope, ServerEvent, PROTOCOL_VERSION};
pub use session::{Gateway, GatewayOptions, GatewaySession};
