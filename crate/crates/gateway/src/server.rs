//! WebSocket endpoint. Each connection gets its own session, driven on a
//! dedicated thread that owns the wall-clock pacer; the async side only
//! moves frames between the socket and the session's queues.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};

use crate::protocol::Envelope;
use crate::session::{Gateway, GatewaySession};

pub const SESSION_PATH: &str = "/session";

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

enum Input {
    Text(String),
    Binary,
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().route(SESSION_PATH, get(upgrade)).with_state(gateway)
}

/// Bind `addr`. Fails if the port is taken.
pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, gateway: Arc<Gateway>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "gateway listening");
    axum::serve(listener, router(gateway)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(gateway): State<Arc<Gateway>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, gateway))
}

async fn connection(socket: WebSocket, gateway: Arc<Gateway>) {
    let id = format!("s{}", NEXT_SESSION.fetch_add(1, Ordering::Relaxed));
    let session = match GatewaySession::new(gateway.clone(), id.clone()) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!(%e, "cannot open session");
            return;
        }
    };
    tracing::info!(session = %id, "connected");
    let (mut sink, mut stream) = socket.split();
    let (in_tx, in_rx) = mpsc::channel::<Input>();
    let (out_tx, mut out_rx) = unbounded_channel::<Envelope>();
    let period = gateway.options.stimulus_period();
    let driver = std::thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || drive(session, in_rx, out_tx, period))
        .expect("spawn session thread");

    let mut heartbeat = tokio::time::interval(gateway.options.heartbeat);
    heartbeat.tick().await;
    loop {
        tokio::select! {
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(t))) => {
                    if in_tx.send(Input::Text(t.to_string())).is_err() { break; }
                }
                Some(Ok(Message::Binary(_))) => {
                    if in_tx.send(Input::Binary).is_err() { break; }
                }
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => {}
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
            },
            ev = out_rx.recv() => match ev {
                Some(ev) => {
                    if sink.send(Message::Text(ev.to_json().into())).await.is_err() { break; }
                }
                None => break,
            },
            _ = heartbeat.tick() => {
                if sink.send(Message::Ping(Vec::new().into())).await.is_err() { break; }
            }
        }
    }
    drop(in_tx);
    let _ = tokio::task::spawn_blocking(move || driver.join()).await;
    tracing::info!(session = %id, "disconnected");
}

/// Session loop: frames are handled in arrival order; while a run is active
/// a stimulus is placed every `period`, on a fixed grid so delays do not
/// accumulate.
fn drive(
    mut session: GatewaySession,
    rx: mpsc::Receiver<Input>,
    tx: UnboundedSender<Envelope>,
    period: std::time::Duration,
) {
    let mut next_tick: Option<Instant> = None;
    loop {
        let input = match next_tick {
            Some(at) => rx.recv_timeout(at.saturating_duration_since(Instant::now())),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        let events = match input {
            Ok(Input::Text(t)) => {
                let events = session.handle_text(&t);
                if next_tick.is_none() && session.is_running() {
                    next_tick = Some(Instant::now());
                }
                events
            }
            Ok(Input::Binary) => session.handle_binary(),
            Err(RecvTimeoutError::Timeout) => {
                let events = session.tick();
                next_tick = match (session.is_running(), next_tick) {
                    (true, Some(at)) => Some(at + period),
                    _ => None,
                };
                events
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        for ev in events {
            if tx.send(ev).is_err() {
                return;
            }
        }
    }
}
