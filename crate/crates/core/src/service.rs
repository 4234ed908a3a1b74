//! Hosting environment and actor implementations behind sessions.
//!
//! The orchestrator dials an endpoint and drives a session over the
//! resulting [`Link`]:
//!
//! * environment: `start_trial` → (`reward`|`message`)* `observation_set`;
//!   then per tick `action` → (`reward`|`message`)* `observation_set`;
//!   finally `end_trial` → `trial_ended`.
//! * actor: `start_trial` → `join_ack`; per tick `observation_set` →
//!   (`reward`|`message`)* `action`; aggregated `reward` and `message`
//!   envelopes may arrive at any time; `trial_ended` closes the session.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tracing::{debug, warn};

use crate::orchestrator::rewards::AggregatedReward;
use crate::protocol::{Envelope, MsgType, ParticipantId, ParticipantKind, Reward};
use crate::registry::ENVIRONMENT_CLASS;
use crate::transport::{dial_tcp, link_pair, spawn_stream_link, Link};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("bad setup: {0}")]
    Setup(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("model error: {0}")]
    Model(String),
}

#[derive(Debug, Error)]
pub enum DialError {
    #[error("no local service at `{0}`")]
    UnknownLocal(String),
    #[error("cannot reach `{endpoint}`: {source}")]
    Unreachable { endpoint: String, source: std::io::Error },
}

// ---------------------------------------------------------------------------
// Setup payloads
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorInfo {
    pub name: String,
    pub class_name: String,
}

/// `start_trial` payload sent to an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSetup {
    pub trial_id: String,
    pub seed: u64,
    pub max_tick: u64,
    pub env_config: Value,
    pub actors: Vec<ActorInfo>,
}

/// `start_trial` payload sent to a service actor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorSetup {
    pub trial_id: String,
    pub actor_name: String,
    pub class_name: String,
    pub implementation: String,
    pub seed: u64,
    pub env_config: Value,
}

/// Message routed between participants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutMessage {
    pub to: ParticipantId,
    pub payload: Value,
}

/// What an environment produces at start and after each step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvOutput {
    pub observations: BTreeMap<String, Value>,
    pub rewards: Vec<Reward>,
    pub messages: Vec<OutMessage>,
    pub terminal: bool,
}

// ---------------------------------------------------------------------------
// Implementation traits
// ---------------------------------------------------------------------------

pub trait Environment: Send {
    /// Initial observations for tick 0.
    fn start(&mut self, setup: &EnvSetup) -> Result<EnvOutput, ServiceError>;

    /// Applies the actions of `tick`; observations returned are for `tick + 1`.
    fn step(&mut self, tick: u64, actions: &BTreeMap<String, Value>) -> Result<EnvOutput, ServiceError>;

    fn on_message(&mut self, _from: &ParticipantId, _payload: &Value) {}

    fn end(&mut self, _reason: &str) {}
}

pub trait EnvironmentFactory: Send + Sync {
    fn create(&self) -> Box<dyn Environment>;
}

/// Per-call context for actors: current tick plus an outbox for rewards and
/// messages addressed to other participants.
#[derive(Debug)]
pub struct ActorContext {
    pub tick: u64,
    pub actor_name: String,
    outbox: Vec<(MsgType, Value)>,
}

impl ActorContext {
    pub fn new(tick: u64, actor_name: impl Into<String>) -> Self {
        Self { tick, actor_name: actor_name.into(), outbox: Vec::new() }
    }

    pub fn send_reward(&mut self, target_actor: &str, target_tick: u64, value: f64, confidence: f64) {
        let r = Reward {
            value,
            confidence,
            source: ParticipantId::actor(self.actor_name.clone()),
            target_actor: target_actor.to_string(),
            target_tick,
        };
        if let Ok(v) = crate::protocol::to_payload(&r) {
            self.outbox.push((MsgType::Reward, v));
        }
    }

    pub fn send_message(&mut self, to: ParticipantId, payload: Value) {
        self.outbox.push((MsgType::Message, json!({"to": to, "payload": payload})));
    }

    fn drain(&mut self) -> Vec<(MsgType, Value)> {
        std::mem::take(&mut self.outbox)
    }
}

pub trait Actor: Send {
    fn act(&mut self, ctx: &mut ActorContext, observation: &Value) -> Result<Value, ServiceError>;

    fn on_reward(&mut self, _reward: &AggregatedReward) {}

    fn on_message(&mut self, _ctx: &mut ActorContext, _from: &ParticipantId, _payload: &Value) {}

    /// Observation of the terminal state; no action is expected.
    fn on_final_observation(&mut self, _tick: u64, _observation: &Value) {}

    fn end(&mut self, _reason: &str) {}
}

pub trait ActorFactory: Send + Sync {
    fn create(&self, setup: &ActorSetup) -> Result<Box<dyn Actor>, ServiceError>;
}

#[derive(Clone)]
pub enum ServiceImpl {
    Environment(Arc<dyn EnvironmentFactory>),
    Actor(Arc<dyn ActorFactory>),
}

// ---------------------------------------------------------------------------
// Session handlers
// ---------------------------------------------------------------------------

/// Serves one environment session until the trial ends or the link drops.
pub async fn serve_environment(mut link: Link, factory: Arc<dyn EnvironmentFactory>) {
    let me = ParticipantId::environment();
    let mut env = factory.create();
    let mut trial_id = String::new();
    while let Some(msg) = link.recv().await {
        match msg.msg_type {
            MsgType::StartTrial => {
                let Ok(setup) = msg.parse::<EnvSetup>() else {
                    send_error(&link, &msg.trial_id, &me, "bad_setup", "unparseable environment setup");
                    return;
                };
                trial_id = setup.trial_id.clone();
                match env.start(&setup) {
                    Ok(out) => {
                        send_env_update(&link, &trial_id, 0, 0, &me, &out);
                    }
                    Err(e) => {
                        send_error(&link, &trial_id, &me, "setup_failed", &e.to_string());
                        return;
                    }
                }
            }
            MsgType::Action => {
                let actions: BTreeMap<String, Value> = msg
                    .payload
                    .get("actions")
                    .and_then(|a| serde_json::from_value(a.clone()).ok())
                    .unwrap_or_default();
                match env.step(msg.tick_id, &actions) {
                    Ok(out) => {
                        send_env_update(&link, &trial_id, msg.tick_id, msg.tick_id + 1, &me, &out);
                    }
                    Err(e) => {
                        warn!("environment step failed: {e}");
                        return;
                    }
                }
            }
            MsgType::Message => {
                let payload = msg.payload.get("payload").cloned().unwrap_or(Value::Null);
                env.on_message(&msg.sender, &payload);
            }
            MsgType::EndTrial => {
                let reason = msg.payload.get("reason").and_then(Value::as_str).unwrap_or("ended");
                env.end(reason);
                link.send(Envelope::new(MsgType::TrialEnded, trial_id.clone(), msg.tick_id, me.clone(), json!({})));
                return;
            }
            other => debug!("environment ignoring {other}"),
        }
    }
}

/// Rewards and messages are stamped with the tick whose actions produced
/// them; the closing `observation_set` carries `obs_tick`.
fn send_env_update(link: &Link, trial_id: &str, tick: u64, obs_tick: u64, me: &ParticipantId, out: &EnvOutput) -> bool {
    for r in &out.rewards {
        match Envelope::with_payload(MsgType::Reward, trial_id, tick, me.clone(), r) {
            Ok(env) => {
                link.send(env);
            }
            Err(e) => warn!("environment produced an unencodable reward: {e}"),
        }
    }
    for m in &out.messages {
        link.send(Envelope::new(MsgType::Message, trial_id, tick, me.clone(), json!({"to": m.to, "payload": m.payload})));
    }
    let obs = json!({"observations": out.observations, "terminal": out.terminal});
    link.send(Envelope::new(MsgType::ObservationSet, trial_id, obs_tick, me.clone(), obs))
}

fn send_error(link: &Link, trial_id: &str, me: &ParticipantId, code: &str, message: &str) {
    link.send(Envelope::new(MsgType::Error, trial_id, 0, me.clone(), json!({"code": code, "message": message})));
}

/// Serves one actor session until the trial ends or the link drops.
pub async fn serve_actor(mut link: Link, factory: Arc<dyn ActorFactory>) {
    let Some(first) = link.recv().await else { return };
    if first.msg_type != MsgType::StartTrial {
        return;
    }
    let Ok(setup) = first.parse::<ActorSetup>() else {
        send_error(&link, &first.trial_id, &ParticipantId::actor("unknown"), "bad_setup", "unparseable actor setup");
        return;
    };
    let me = ParticipantId::new(
        if setup.class_name == "observer" { ParticipantKind::Observer } else { ParticipantKind::Actor },
        setup.actor_name.clone(),
    );
    let trial_id = setup.trial_id.clone();
    let mut actor = match factory.create(&setup) {
        Ok(a) => a,
        Err(e) => {
            send_error(&link, &trial_id, &me, "setup_failed", &e.to_string());
            return;
        }
    };
    link.send(Envelope::new(MsgType::JoinAck, trial_id.clone(), 0, me.clone(), json!({"ok": true})));

    let flush = |link: &Link, ctx: &mut ActorContext| {
        for (t, payload) in ctx.drain() {
            link.send(Envelope::new(t, trial_id.clone(), ctx.tick, me.clone(), payload));
        }
    };

    while let Some(msg) = link.recv().await {
        match msg.msg_type {
            MsgType::ObservationSet => {
                let obs = msg.payload.get("observation").cloned().unwrap_or(Value::Null);
                if msg.payload.get("final").and_then(Value::as_bool).unwrap_or(false) {
                    actor.on_final_observation(msg.tick_id, &obs);
                    continue;
                }
                let mut ctx = ActorContext::new(msg.tick_id, setup.actor_name.clone());
                match actor.act(&mut ctx, &obs) {
                    Ok(action) => {
                        flush(&link, &mut ctx);
                        link.send(Envelope::new(MsgType::Action, trial_id.clone(), msg.tick_id, me.clone(), json!({"action": action})));
                    }
                    Err(e) => {
                        flush(&link, &mut ctx);
                        warn!("actor {} failed to act: {e}", setup.actor_name);
                    }
                }
            }
            MsgType::Reward => {
                if let Ok(agg) = msg.parse::<AggregatedReward>() {
                    actor.on_reward(&agg);
                }
            }
            MsgType::Message => {
                let mut ctx = ActorContext::new(msg.tick_id, setup.actor_name.clone());
                let from = msg
                    .payload
                    .get("from")
                    .and_then(|f| serde_json::from_value(f.clone()).ok())
                    .unwrap_or_else(|| msg.sender.clone());
                let payload = msg.payload.get("payload").cloned().unwrap_or(Value::Null);
                actor.on_message(&mut ctx, &from, &payload);
                flush(&link, &mut ctx);
            }
            MsgType::TrialEnded => {
                let reason = msg.payload.get("reason").and_then(Value::as_str).unwrap_or("ended");
                actor.end(reason);
                return;
            }
            _ => {}
        }
    }
    actor.end("disconnected");
}

pub fn spawn_session(link: Link, service: ServiceImpl) {
    match service {
        ServiceImpl::Environment(f) => {
            tokio::spawn(serve_environment(link, f));
        }
        ServiceImpl::Actor(f) => {
            tokio::spawn(serve_actor(link, f));
        }
    }
}

// ---------------------------------------------------------------------------
// Dialing
// ---------------------------------------------------------------------------

/// Opens sessions to endpoints: `local://name` for in-process services,
/// anything else as `host:port` over TCP.
#[derive(Default)]
pub struct Connector {
    local: RwLock<HashMap<String, ServiceImpl>>,
    dial_timeout: Option<Duration>,
}

impl Connector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dial_timeout(timeout: Duration) -> Self {
        Self { local: RwLock::default(), dial_timeout: Some(timeout) }
    }

    /// Makes a service reachable at `local://<name>`; returns that endpoint.
    pub fn add_local(&self, name: &str, service: ServiceImpl) -> String {
        let endpoint = format!("local://{name}");
        self.local.write().unwrap().insert(endpoint.clone(), service);
        endpoint
    }

    pub fn remove_local(&self, endpoint: &str) {
        self.local.write().unwrap().remove(endpoint);
    }

    pub async fn dial(&self, endpoint: &str) -> Result<Link, DialError> {
        if endpoint.starts_with("local://") {
            let service = self
                .local
                .read()
                .unwrap()
                .get(endpoint)
                .cloned()
                .ok_or_else(|| DialError::UnknownLocal(endpoint.to_string()))?;
            let (ours, theirs) = link_pair();
            spawn_session(theirs, service);
            return Ok(ours);
        }
        let unreachable = |source| DialError::Unreachable { endpoint: endpoint.to_string(), source };
        let fut = dial_tcp(endpoint.to_string());
        match self.dial_timeout {
            Some(t) => tokio::time::timeout(t, fut)
                .await
                .map_err(|_| unreachable(std::io::ErrorKind::TimedOut.into()))?
                .map_err(unreachable),
            None => fut.await.map_err(unreachable),
        }
    }
}

/// Accepts TCP sessions for one implementation until the listener fails.
pub async fn serve_tcp(listener: TcpListener, service: ServiceImpl) -> std::io::Result<()> {
    loop {
        let (stream, _) = listener.accept().await?;
        stream.set_nodelay(true)?;
        spawn_session(spawn_stream_link(stream), service.clone());
    }
}

/// Registers an implementation with an orchestrator and keeps refreshing
/// the registration at `interval` until the connection drops.
pub async fn register_and_heartbeat(
    orchestrator: &str,
    class_name: &str,
    implementation: &str,
    endpoint: &str,
    interval: Duration,
) -> Result<(), String> {
    let mut link = dial_tcp(orchestrator).await.map_err(|e| e.to_string())?;
    let me = ParticipantId::new(
        if class_name == ENVIRONMENT_CLASS { ParticipantKind::Environment } else { ParticipantKind::Actor },
        implementation,
    );
    let payload = json!({"class_name": class_name, "implementation": implementation, "endpoint": endpoint});
    link.send(Envelope::new(MsgType::RegisterService, "", 0, me.clone(), payload.clone()));
    match link.recv().await {
        Some(ack) if ack.msg_type == MsgType::RegisterAck => {}
        Some(other) => return Err(format!("registration refused: {}", other.payload)),
        None => return Err("orchestrator closed the connection".into()),
    }
    loop {
        tokio::time::sleep(interval).await;
        if !link.send(Envelope::new(MsgType::Heartbeat, "", 0, me.clone(), payload.clone())) {
            return Ok(());
        }
    }
}
