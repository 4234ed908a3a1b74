//! Network front of the orchestrator.
//!
//! Services, controllers and clients connect over TCP (length-prefixed
//! frames) or websocket (one envelope per text frame) and speak the same
//! envelopes either way.

use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tracing::{debug, warn};

use super::{Orchestrator, OrchestratorError, WatchEvent, WatchFilter};
use crate::protocol::{Envelope, MsgType, ParticipantId, TrialParams};
use crate::transport::{spawn_stream_link, spawn_ws_link, Link};

/// Accepts framed TCP sessions until the listener fails.
pub async fn serve_tcp(orch: Orchestrator, listener: TcpListener) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        stream.set_nodelay(true)?;
        debug!("tcp session from {peer}");
        tokio::spawn(handle_session(orch.clone(), spawn_stream_link(stream)));
    }
}

/// Accepts websocket sessions until the listener fails.
pub async fn serve_ws(orch: Orchestrator, listener: TcpListener) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let orch = orch.clone();
        tokio::spawn(async move {
            match tokio_tungstenite::accept_async(stream).await {
                Ok(ws) => handle_session(orch, spawn_ws_link(ws)).await,
                Err(e) => debug!("websocket handshake from {peer} failed: {e}"),
            }
        });
    }
}

fn reply(msg_type: MsgType, trial_id: &str, payload: Value) -> Envelope {
    Envelope::new(msg_type, trial_id, 0, ParticipantId::orchestrator(), payload)
}

fn error(trial_id: &str, code: &str, extra: Value) -> Envelope {
    let mut payload = json!({"code": code});
    if let (Value::Object(p), Value::Object(e)) = (&mut payload, extra) {
        p.extend(e);
    }
    reply(MsgType::Error, trial_id, payload)
}

#[derive(Deserialize)]
struct Registration {
    class_name: String,
    implementation: String,
    endpoint: String,
}

/// Envelope sent to watchers for one state change. The `ended` transition
/// is followed by a `trial_ended` envelope carrying the summary.
pub fn watch_envelopes(ev: &WatchEvent) -> Vec<Envelope> {
    let mut out = vec![reply(
        MsgType::TrialState,
        &ev.trial_id,
        json!({"state": ev.state.state, "reason": ev.state.reason}),
    )];
    if let Some(s) = &ev.summary {
        out.push(reply(
            MsgType::TrialEnded,
            &ev.trial_id,
            json!({
                "reason": s.reason,
                "total_ticks": s.total_ticks,
                "totals": s.totals,
                "implementations": s.implementations,
                "log_path": s.log_path,
            }),
        ));
    }
    out
}

/// Serves one session until it closes or is handed to a trial.
pub async fn handle_session(orch: Orchestrator, mut link: Link) {
    let registry = Arc::clone(orch.registry());
    while let Some(msg) = link.recv().await {
        let tid = msg.trial_id.clone();
        match msg.msg_type {
            MsgType::RegisterService => match serde_json::from_value::<Registration>(msg.payload.clone()) {
                Ok(r) => match registry.register(&r.class_name, &r.implementation, &r.endpoint) {
                    Ok(()) => {
                        let ms = registry.liveness_window().as_millis() as u64;
                        link.send(reply(MsgType::RegisterAck, "", json!({"liveness_window_ms": ms})));
                    }
                    Err(e) => {
                        link.send(error("", "registration_refused", json!({"message": e.to_string()})));
                    }
                },
                Err(e) => {
                    link.send(error("", "invalid_registration", json!({"message": e.to_string()})));
                }
            },
            MsgType::Heartbeat => match serde_json::from_value::<Registration>(msg.payload.clone()) {
                Ok(r) => {
                    if let Err(e) = registry.register(&r.class_name, &r.implementation, &r.endpoint) {
                        warn!("heartbeat refused: {e}");
                    }
                }
                Err(_) => {
                    link.send(reply(MsgType::Heartbeat, "", json!({})));
                }
            },
            MsgType::StartTrial => {
                let params = match TrialParams::from_value(&msg.payload) {
                    Ok(p) => p,
                    Err(e) => {
                        link.send(error(&tid, "invalid_params", json!({"path": e.path, "message": e.reason})));
                        continue;
                    }
                };
                match orch.start_trial(params) {
                    Ok(id) => {
                        link.send(reply(MsgType::StartTrial, &id, json!({"trial_id": id})));
                    }
                    Err(OrchestratorError::InvalidParams(e)) => {
                        link.send(error(&tid, "invalid_params", json!({"path": e.path, "message": e.reason})));
                    }
                    Err(e) => {
                        link.send(error(&tid, "rejected", json!({"message": e.to_string()})));
                    }
                }
            }
            MsgType::EndTrial => {
                let reason = msg.payload.get("reason").and_then(Value::as_str).unwrap_or("client_requested");
                match orch.terminate_trial(&tid, reason) {
                    Ok(()) => {
                        link.send(reply(MsgType::EndTrial, &tid, json!({"ok": true})));
                    }
                    Err(_) => {
                        link.send(error(&tid, "not_found", json!({})));
                    }
                }
            }
            MsgType::TrialState => {
                let watch = msg.payload.get("watch").and_then(Value::as_str);
                let filter = match watch {
                    Some("*") => WatchFilter::All,
                    Some(id) => WatchFilter::Trial(id.to_string()),
                    None => WatchFilter::Trial(tid.clone()),
                };
                if let WatchFilter::Trial(id) = &filter {
                    let Some(state) = orch.trial_state(id) else {
                        link.send(error(id, "not_found", json!({})));
                        continue;
                    };
                    if watch.is_none() {
                        // Plain query.
                        link.send(reply(MsgType::TrialState, id, json!({"state": state.state, "reason": state.reason})));
                        continue;
                    }
                }
                let mut events = orch.watch_trials(filter);
                let tx = link.tx.clone();
                tokio::spawn(async move {
                    while let Some(ev) = events.recv().await {
                        for env in watch_envelopes(&ev) {
                            if tx.send(env).is_err() {
                                return;
                            }
                        }
                    }
                });
            }
            MsgType::JoinTrial => {
                let Some(actor_name) = msg.payload.get("actor_name").and_then(Value::as_str).map(str::to_string)
                else {
                    link.send(error(&tid, "invalid_join", json!({"path": "actor_name"})));
                    continue;
                };
                match orch.join_trial(&tid, &actor_name, link).await {
                    Ok(()) => return,
                    Err((e, back)) => {
                        link = back;
                        link.send(reply(MsgType::JoinAck, &tid, json!({"ok": false, "error": e.code()})));
                    }
                }
            }
            other => {
                link.send(error(&tid, "unexpected", json!({"msg_type": other})));
            }
        }
    }
}
