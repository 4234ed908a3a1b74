//! One trial's lifecycle and tick loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::time::{sleep_until, Instant};
use tracing::{debug, info, warn};

use super::rewards::{totals_by_actor, RewardLedger};
use super::{Control, JoinError, Orchestrator, TrialSummary};
use crate::datalog::{log_path, LogError, LogFooter, LogHeader, LogPart, LogWriter, LoggedAction, LoggedMessage, TickSample};
use crate::protocol::{
    actor_class, to_payload, validate_against_schema, ActorClass, ActorSlot, Envelope, MsgType, ParticipantId,
    ParticipantKind, Reward, SchemaRef, TrialParams, TrialPhase, TrialState,
};
use crate::service::{ActorInfo, ActorSetup, EnvSetup};
use crate::transport::Link;

/// How long a closing environment gets to acknowledge `end_trial`.
const END_GRACE: Duration = Duration::from_secs(2);

#[derive(Clone, Debug, PartialEq, Eq)]
enum Source {
    Env,
    Actor(String),
}

struct Inbound {
    from: Source,
    /// `None` once the session has closed.
    msg: Option<Envelope>,
}

struct ActorSession {
    slot: ActorSlot,
    class: ActorClass,
    id: ParticipantId,
    tx: Option<UnboundedSender<Envelope>>,
}

impl ActorSession {
    fn send(&self, env: Envelope) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(env);
        }
    }
}

/// Reward as submitted by a participant; `source` is filled in by the
/// orchestrator from the session identity.
#[derive(Deserialize)]
struct RewardIn {
    value: f64,
    confidence: f64,
    target_actor: String,
    target_tick: u64,
}

#[derive(Deserialize)]
struct MessageIn {
    to: ParticipantId,
    #[serde(default)]
    payload: Value,
}

struct Trial {
    orch: Orchestrator,
    id: String,
    params: TrialParams,
    control: UnboundedReceiver<Control>,
    inbox_tx: UnboundedSender<Inbound>,
    inbox: UnboundedReceiver<Inbound>,
    env_tx: Option<UnboundedSender<Envelope>>,
    env_lost: bool,
    actors: BTreeMap<String, ActorSession>,
    ledger: RewardLedger,
    log: Option<LogWriter<BufWriter<File>>>,
    log_degraded: bool,
    tick: u64,
    /// Record of the tick in progress.
    sample: TickSample,
    /// Observations for the current tick, keyed by actor.
    observations: BTreeMap<String, Value>,
    awaiting: BTreeSet<String>,
    received: BTreeMap<String, Value>,
    next_obs: Option<Envelope>,
    env_terminal: bool,
    terminate: Option<String>,
}

pub(crate) async fn run(orch: Orchestrator, params: TrialParams, control: UnboundedReceiver<Control>) {
    let (inbox_tx, inbox) = mpsc::unbounded_channel();
    let id = params.trial_id.clone();
    let mut trial = Trial {
        orch,
        sample: TickSample::new(id.clone(), 0),
        id,
        params,
        control,
        inbox_tx,
        inbox,
        env_tx: None,
        env_lost: false,
        actors: BTreeMap::new(),
        ledger: RewardLedger::new(),
        log: None,
        log_degraded: false,
        tick: 0,
        observations: BTreeMap::new(),
        awaiting: BTreeSet::new(),
        received: BTreeMap::new(),
        next_obs: None,
        env_terminal: false,
        terminate: None,
    };
    trial.lifecycle().await;
}

impl Trial {
    fn set_state(&self, phase: TrialPhase, reason: Option<&str>, summary: Option<TrialSummary>) {
        let state = match reason {
            Some(r) => TrialState::with_reason(phase, r),
            None => TrialState::new(phase),
        };
        self.orch.transition(&self.id, state, summary);
    }

    async fn lifecycle(&mut self) {
        self.set_state(TrialPhase::Initializing, None, None);
        let failure = match tokio::time::timeout(self.orch.config().setup_timeout, self.setup()).await {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e),
            Err(_) => Some("setup timed out".to_string()),
        };
        if let Some(detail) = failure {
            warn!(trial = %self.id, "setup failed: {detail}");
            self.close_sessions("setup_failed").await;
            let summary = self.summary("setup_failed");
            self.set_state(TrialPhase::Ended, Some("setup_failed"), Some(summary));
            return;
        }
        self.open_log();

        let mut reason = None;
        if self.params.has_clients() {
            self.set_state(TrialPhase::WaitingForClients, None, None);
            reason = self.wait_for_clients().await;
        }
        let reason = match reason {
            Some(r) => r,
            None => {
                self.set_state(TrialPhase::Running, None, None);
                loop {
                    if let Some(r) = self.step().await {
                        break r;
                    }
                }
            }
        };
        self.set_state(TrialPhase::Terminating, Some(&reason), None);
        self.finish(&reason).await;
    }

    // -----------------------------------------------------------------------
    // Setup
    // -----------------------------------------------------------------------

    fn attach(&self, from: Source, link: Link) -> UnboundedSender<Envelope> {
        let Link { tx, mut rx } = link;
        let inbox = self.inbox_tx.clone();
        tokio::spawn(async move {
            while let Some(msg) = rx.recv().await {
                if inbox.send(Inbound { from: from.clone(), msg: Some(msg) }).is_err() {
                    return;
                }
            }
            let _ = inbox.send(Inbound { from, msg: None });
        });
        tx
    }

    fn envelope(&self, msg_type: MsgType, payload: Value) -> Envelope {
        Envelope::new(msg_type, self.id.clone(), self.tick, ParticipantId::orchestrator(), payload)
    }

    async fn setup(&mut self) -> Result<(), String> {
        self.params = self.orch.registry().pre_trial_hook(&self.params).map_err(|e| e.to_string())?;

        for slot in &self.params.actor_slots {
            let class = actor_class(&slot.class_name).ok_or_else(|| format!("unknown class {}", slot.class_name))?;
            let kind = if class.acts { ParticipantKind::Actor } else { ParticipantKind::Observer };
            let id = ParticipantId::new(kind, slot.actor_name.clone());
            self.actors.insert(slot.actor_name.clone(), ActorSession { slot: slot.clone(), class, id, tx: None });
        }

        // Environment first: its initial observations are tick 0.
        let endpoint = self.params.env_endpoint.clone().expect("resolved by the hook");
        let mut link = self.orch.connector().dial(&endpoint).await.map_err(|e| e.to_string())?;
        let setup = EnvSetup {
            trial_id: self.id.clone(),
            seed: self.params.seed,
            max_tick: self.params.max_tick,
            env_config: self.params.env_config.clone(),
            actors: self
                .params
                .actor_slots
                .iter()
                .map(|s| ActorInfo { name: s.actor_name.clone(), class_name: s.class_name.clone() })
                .collect(),
        };
        let start = Envelope::with_payload(MsgType::StartTrial, self.id.clone(), 0, ParticipantId::orchestrator(), &setup)
            .map_err(|e| e.to_string())?;
        link.send(start);
        let mut early = Vec::new();
        loop {
            let msg = link.recv().await.ok_or("environment closed during setup")?;
            match msg.msg_type {
                MsgType::ObservationSet => {
                    self.take_observations(&msg);
                    break;
                }
                MsgType::Error => return Err(format!("environment refused: {}", msg.payload)),
                MsgType::Reward | MsgType::Message => early.push(msg),
                other => debug!("ignoring {other} during environment setup"),
            }
        }
        self.env_tx = Some(self.attach(Source::Env, link));
        // Anything the environment said before tick 0 is handled as tick-0 traffic.
        for msg in early {
            let _ = self.inbox_tx.send(Inbound { from: Source::Env, msg: Some(msg) });
        }

        let services: Vec<ActorSlot> = self.params.actor_slots.iter().filter(|s| !s.is_client).cloned().collect();
        for slot in services {
            let endpoint = slot.endpoint.clone().expect("resolved by the hook");
            let mut link = self.orch.connector().dial(&endpoint).await.map_err(|e| e.to_string())?;
            let setup = ActorSetup {
                trial_id: self.id.clone(),
                actor_name: slot.actor_name.clone(),
                class_name: slot.class_name.clone(),
                implementation: slot.implementation.clone(),
                seed: self.params.seed,
                env_config: self.params.env_config.clone(),
            };
            let start = Envelope::with_payload(MsgType::StartTrial, self.id.clone(), 0, ParticipantId::orchestrator(), &setup)
                .map_err(|e| e.to_string())?;
            link.send(start);
            match link.recv().await {
                Some(ack) if ack.msg_type == MsgType::JoinAck && ack.payload.get("ok") == Some(&Value::Bool(true)) => {}
                Some(other) => return Err(format!("actor {} refused: {}", slot.actor_name, other.payload)),
                None => return Err(format!("actor {} closed during setup", slot.actor_name)),
            }
            let tx = self.attach(Source::Actor(slot.actor_name.clone()), link);
            self.actors.get_mut(&slot.actor_name).expect("slot").tx = Some(tx);
        }
        Ok(())
    }

    fn open_log(&mut self) {
        let Some(dir) = self.orch.config().log_dir.clone() else { return };
        let started_at_ms = if self.orch.config().reproducible {
            0
        } else {
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
        };
        let mut schemas: BTreeSet<SchemaRef> = BTreeSet::new();
        for s in self.actors.values() {
            schemas.insert(s.class.observation_schema.clone());
            schemas.insert(s.class.action_schema.clone());
        }
        let header = LogHeader { params: self.params.clone(), schemas: schemas.into_iter().collect(), started_at_ms };
        let opened = LogWriter::create(&dir, &self.id).and_then(|mut w| w.append(&LogPart::Header(header)).map(|_| w));
        match opened {
            Ok(w) => self.log = Some(w),
            Err(e) => self.degrade_log(e),
        }
    }

    fn degrade_log(&mut self, e: LogError) {
        warn!(trial = %self.id, "datalog disabled: {e}");
        self.log = None;
        self.log_degraded = true;
    }

    fn append_log(&mut self, part: LogPart) {
        if let Some(w) = self.log.as_mut() {
            if let Err(e) = w.append(&part) {
                self.degrade_log(e);
            }
        }
    }

    // -----------------------------------------------------------------------
    // Clients and control
    // -----------------------------------------------------------------------

    fn waiting_on_clients(&self) -> bool {
        self.actors.values().any(|s| s.slot.is_client && s.tx.is_none())
    }

    async fn wait_for_clients(&mut self) -> Option<String> {
        let deadline = Instant::now() + self.orch.config().join_timeout;
        while self.waiting_on_clients() {
            tokio::select! {
                ctl = self.control.recv() => self.handle_control(ctl),
                Some(inb) = self.inbox.recv() => self.handle_inbound(inb),
                _ = sleep_until(deadline) => return Some("client_join_timeout".into()),
            }
            if self.env_lost {
                return Some("env_disconnected".into());
            }
            if let Some(r) = self.terminate.take() {
                return Some(r);
            }
        }
        None
    }

    fn handle_control(&mut self, ctl: Option<Control>) {
        match ctl {
            Some(Control::Terminate(reason)) => {
                self.terminate.get_or_insert(reason);
            }
            Some(Control::Join { actor_name, link, reply }) => {
                let _ = reply.send(self.accept_join(&actor_name, link));
            }
            None => {
                self.terminate.get_or_insert_with(|| "client_requested".into());
            }
        }
    }

    fn accept_join(&mut self, actor_name: &str, link: Link) -> Result<(), (JoinError, Link)> {
        let Some(session) = self.actors.get(actor_name) else {
            return Err((JoinError::UnknownSlot(actor_name.to_string()), link));
        };
        if !session.slot.is_client {
            return Err((JoinError::NotClient(actor_name.to_string()), link));
        }
        if session.tx.is_some() {
            return Err((JoinError::SlotTaken(actor_name.to_string()), link));
        }
        let ack = json!({
            "ok": true,
            "actor_name": actor_name,
            "class_name": session.class.class_name,
            "max_tick": self.params.max_tick,
            "retro_window": self.params.retro_window,
        });
        link.send(self.envelope(MsgType::JoinAck, ack));
        let tx = self.attach(Source::Actor(actor_name.to_string()), link);
        self.actors.get_mut(actor_name).expect("slot").tx = Some(tx);
        info!(trial = %self.id, actor = actor_name, "client joined");
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Tick loop
    // -----------------------------------------------------------------------

    fn take_observations(&mut self, msg: &Envelope) {
        self.observations = msg
            .payload
            .get("observations")
            .and_then(|o| serde_json::from_value(o.clone()).ok())
            .unwrap_or_default();
        self.env_terminal = msg.payload.get("terminal").and_then(Value::as_bool).unwrap_or(false);
    }

    /// Runs one tick; returns the end reason once the trial must stop.
    async fn step(&mut self) -> Option<String> {
        if let Some(r) = self.terminate.take() {
            return Some(r);
        }
        let t = self.tick;

        // (1) fan out, each actor seeing only its own observation
        self.awaiting.clear();
        self.received.clear();
        for (name, s) in &self.actors {
            let Some(obs) = self.observations.get(name) else { continue };
            if let Err(v) = validate_against_schema(obs, &s.class.observation_schema) {
                warn!(trial = %self.id, actor = %name, "environment observation rejected: {v}");
                continue;
            }
            self.sample.observations.insert(name.clone(), obs.clone());
            if s.tx.is_none() {
                continue;
            }
            s.send(Envelope::new(
                MsgType::ObservationSet,
                self.id.clone(),
                t,
                ParticipantId::orchestrator(),
                json!({"observation": obs}),
            ));
            if s.class.acts {
                self.awaiting.insert(name.clone());
            }
        }

        // (2) collect until everyone answered or the deadline passed
        let deadline = Instant::now() + Duration::from_millis(self.params.action_timeout_ms);
        while !self.awaiting.is_empty() && !self.env_lost && self.terminate.is_none() {
            tokio::select! {
                Some(inb) = self.inbox.recv() => self.handle_inbound(inb),
                ctl = self.control.recv() => self.handle_control(ctl),
                _ = sleep_until(deadline) => break,
            }
        }
        if self.env_lost {
            return Some("env_disconnected".into());
        }
        let mut actions = BTreeMap::new();
        for (name, s) in &self.actors {
            if !s.class.acts {
                continue;
            }
            let (action, defaulted) = match self.received.remove(name) {
                Some(a) => (a, false),
                None => (s.class.default_action.clone(), true),
            };
            self.sample.actions.insert(name.clone(), LoggedAction { action: action.clone(), defaulted });
            actions.insert(name.clone(), action);
        }

        // (3) hand actions to the environment and wait for tick t+1
        self.send_env(MsgType::Action, json!({"actions": actions}));
        self.next_obs = None;
        // A pending termination only waits a bounded time on a stalled environment.
        let mut give_up: Option<Instant> = None;
        while self.next_obs.is_none() {
            if give_up.is_none() && self.terminate.is_some() {
                give_up = Some(Instant::now() + END_GRACE);
            }
            let stall = async {
                match give_up {
                    Some(d) => sleep_until(d).await,
                    None => std::future::pending().await,
                }
            };
            tokio::select! {
                Some(inb) = self.inbox.recv() => self.handle_inbound(inb),
                ctl = self.control.recv() => self.handle_control(ctl),
                _ = stall => return self.terminate.take(),
            }
            if self.env_lost {
                return Some("env_disconnected".into());
            }
        }
        let obs = self.next_obs.take().expect("loop exit");
        self.take_observations(&obs);

        // (5) log, (6) advance, (7) stop conditions
        let sample = std::mem::replace(&mut self.sample, TickSample::new(self.id.clone(), t + 1));
        self.append_log(LogPart::Sample(sample));
        self.tick = t + 1;
        if let Some(r) = self.terminate.take() {
            return Some(r);
        }
        if self.tick >= self.params.max_tick {
            return Some("max_tick".into());
        }
        if self.env_terminal {
            return Some("env_terminal".into());
        }
        None
    }

    fn send_env(&self, msg_type: MsgType, payload: Value) {
        if let Some(tx) = &self.env_tx {
            let _ = tx.send(self.envelope(msg_type, payload));
        }
    }

    fn sender_id(&self, from: &Source) -> ParticipantId {
        match from {
            Source::Env => ParticipantId::environment(),
            Source::Actor(n) => self.actors[n].id.clone(),
        }
    }

    fn reply(&self, to: &Source, env: Envelope) {
        match to {
            Source::Env => {
                if let Some(tx) = &self.env_tx {
                    let _ = tx.send(env);
                }
            }
            Source::Actor(n) => self.actors[n].send(env),
        }
    }

    fn reply_error(&self, to: &Source, code: &str, detail: Value) {
        let mut payload = json!({"code": code});
        if let (Value::Object(p), Value::Object(d)) = (&mut payload, detail) {
            p.extend(d);
        }
        self.reply(to, self.envelope(MsgType::Error, payload));
    }

    // (4) routing
    fn handle_inbound(&mut self, inb: Inbound) {
        let Inbound { from, msg } = inb;
        let Some(msg) = msg else {
            match &from {
                Source::Env => {
                    warn!(trial = %self.id, "environment session lost");
                    self.env_lost = true;
                    self.env_tx = None;
                }
                Source::Actor(n) => {
                    info!(trial = %self.id, actor = %n, "actor session lost; defaults from now on");
                    if let Some(s) = self.actors.get_mut(n) {
                        s.tx = None;
                    }
                    self.awaiting.remove(n);
                }
            }
            return;
        };
        match (&from, msg.msg_type) {
            (Source::Actor(n), MsgType::Action) => {
                if msg.tick_id != self.tick || !self.awaiting.contains(n) {
                    debug!(trial = %self.id, actor = %n, tick = msg.tick_id, "stale action dropped");
                    return;
                }
                self.awaiting.remove(n);
                let action = msg.payload.get("action").cloned().unwrap_or(Value::Null);
                match validate_against_schema(&action, &self.actors[n].class.action_schema) {
                    Ok(()) => {
                        self.received.insert(n.clone(), action);
                    }
                    Err(v) => {
                        let path = match &v {
                            crate::protocol::SchemaViolation::Field(p) => p.clone(),
                            other => other.to_string(),
                        };
                        self.reply_error(&from, "schema_violation", json!({"path": path}));
                    }
                }
            }
            (_, MsgType::Reward) => self.route_reward(&from, &msg),
            (_, MsgType::Message) => self.route_message(&from, &msg),
            (Source::Env, MsgType::ObservationSet) => self.next_obs = Some(msg),
            (Source::Env, MsgType::Error) => warn!(trial = %self.id, "environment error: {}", msg.payload),
            (Source::Actor(_), MsgType::EndTrial) => {
                self.terminate.get_or_insert_with(|| "client_requested".into());
            }
            (_, other) => debug!(trial = %self.id, "ignoring {other} from {:?}", from),
        }
    }

    fn route_reward(&mut self, from: &Source, msg: &Envelope) {
        let incoming: RewardIn = match serde_json::from_value(msg.payload.clone()) {
            Ok(r) => r,
            Err(e) => return self.reply_error(from, "invalid_reward", json!({"message": e.to_string()})),
        };
        let reward = Reward {
            value: incoming.value,
            confidence: incoming.confidence,
            source: self.sender_id(from),
            target_actor: incoming.target_actor,
            target_tick: incoming.target_tick,
        };
        if let Err(field) = reward.validate() {
            return self.reply_error(from, "invalid_reward", json!({"path": field}));
        }
        if !self.actors.contains_key(&reward.target_actor) {
            return self.reply_error(from, "unknown_recipient", json!({"to": reward.target_actor}));
        }
        if reward.target_tick > self.tick {
            return self.reply_error(from, "future_target_tick", json!({"target_tick": reward.target_tick}));
        }
        if self.tick - reward.target_tick > self.params.retro_window {
            warn!(
                trial = %self.id,
                "retro window exceeded: reward for tick {} received at tick {}",
                reward.target_tick,
                self.tick
            );
            return self.reply_error(
                from,
                "retro_window_exceeded",
                json!({"target_tick": reward.target_tick, "retro_window": self.params.retro_window}),
            );
        }
        let agg = self.ledger.add(reward.clone());
        let target = reward.target_actor.clone();
        self.sample.rewards_received.push(reward);
        if let Ok(payload) = to_payload(&agg) {
            self.actors[&target].send(self.envelope(MsgType::Reward, payload));
        }
    }

    fn route_message(&mut self, from: &Source, msg: &Envelope) {
        let incoming: MessageIn = match serde_json::from_value(msg.payload.clone()) {
            Ok(m) => m,
            Err(e) => return self.reply_error(from, "invalid_message", json!({"message": e.to_string()})),
        };
        let sender = self.sender_id(from);
        let to = incoming.to;
        let deliver = json!({"from": sender, "to": to, "payload": incoming.payload});
        let env = Envelope::new(MsgType::Message, self.id.clone(), self.tick, sender.clone(), deliver);
        if to.kind == ParticipantKind::Environment {
            self.reply(&Source::Env, env);
        } else if to.is_broadcast() {
            for (name, s) in &self.actors {
                if Source::Actor(name.clone()) != *from {
                    s.send(env.clone());
                }
            }
        } else if let Some(s) = self.actors.get(&to.name) {
            s.send(env);
        } else {
            return self.reply_error(from, "unknown_recipient", json!({"to": to}));
        }
        self.sample.messages.push(LoggedMessage { from: sender, to, payload: incoming.payload });
    }

    // -----------------------------------------------------------------------
    // Teardown
    // -----------------------------------------------------------------------

    async fn close_sessions(&mut self, reason: &str) {
        if self.env_tx.is_some() {
            self.send_env(MsgType::EndTrial, json!({"reason": reason}));
            let grace = Instant::now() + END_GRACE;
            loop {
                tokio::select! {
                    Some(inb) = self.inbox.recv() => {
                        if inb.from == Source::Env
                            && inb.msg.as_ref().is_none_or(|m| m.msg_type == MsgType::TrialEnded)
                        {
                            break;
                        }
                    }
                    _ = sleep_until(grace) => break,
                }
            }
            self.env_tx = None;
        }
        let ended = self.envelope(MsgType::TrialEnded, json!({"reason": reason}));
        // Hosted actors close their link once `end` returns; waiting for that
        // lets a learner finish its update before the trial reports Ended.
        let mut closing: BTreeSet<String> = BTreeSet::new();
        for (name, s) in self.actors.iter_mut() {
            if s.tx.is_some() && !s.slot.is_client {
                closing.insert(name.clone());
            }
            s.send(ended.clone());
            s.tx = None;
        }
        let grace = Instant::now() + END_GRACE;
        while !closing.is_empty() {
            tokio::select! {
                Some(inb) = self.inbox.recv() => {
                    if let (Source::Actor(n), None) = (&inb.from, &inb.msg) {
                        closing.remove(n);
                    }
                }
                _ = sleep_until(grace) => break,
            }
        }
    }

    async fn finish(&mut self, reason: &str) {
        for (name, s) in &self.actors {
            if let Some(obs) = self.observations.get(name) {
                s.send(self.envelope(MsgType::ObservationSet, json!({"observation": obs, "final": true})));
            }
        }
        self.close_sessions(reason).await;
        let footer = LogFooter { end_reason: reason.to_string(), total_ticks: self.tick, aggregates: self.ledger.table() };
        self.append_log(LogPart::Footer(footer));
        let summary = self.summary(reason);
        if summary.total_ticks > 0 {
            self.orch.metrics().record_trial(&self.id, &summary);
        }
        self.set_state(TrialPhase::Ended, Some(reason), Some(summary));
    }

    fn summary(&self, reason: &str) -> TrialSummary {
        let mut totals = totals_by_actor(&self.ledger.table());
        let mut implementations = BTreeMap::new();
        for slot in &self.params.actor_slots {
            implementations.insert(slot.actor_name.clone(), slot.implementation.clone());
            if self.actors.get(&slot.actor_name).is_none_or(|s| s.class.acts) {
                totals.entry(slot.actor_name.clone()).or_insert(0.0);
            }
        }
        let log_path = match (&self.orch.config().log_dir, self.log_degraded) {
            (Some(dir), false) if self.log.is_some() => Some(log_path(dir, &self.id)),
            _ => None,
        };
        TrialSummary {
            reason: reason.to_string(),
            total_ticks: self.tick,
            totals,
            implementations,
            log_path,
            log_degraded: self.log_degraded,
        }
    }
}
