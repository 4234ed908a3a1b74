#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use serde_json::json;
use trialworks::arena::ENV_IMPLEMENTATION;
use trialworks::builtin::{local_orchestrator, Builtins, PLAYER_CLASS};
use trialworks::orchestrator::{Orchestrator, OrchestratorConfig};
use trialworks::protocol::{ActorSlot, TrialParams};

/// A 1v1 arena trial between two built-in players.
pub fn duel(a: &str, b: &str, max_tick: u64, seed: u64) -> TrialParams {
    let mut p = TrialParams::new(
        ENV_IMPLEMENTATION,
        vec![ActorSlot::service("p0", PLAYER_CLASS, a), ActorSlot::service("p1", PLAYER_CLASS, b)],
        max_tick,
    );
    p.env_config = json!({"teams": [1, 1]});
    p.seed = seed;
    p
}

pub fn orchestrator(log_dir: Option<&Path>) -> (Orchestrator, Builtins) {
    local_orchestrator(OrchestratorConfig {
        log_dir: log_dir.map(Path::to_path_buf),
        reproducible: true,
        ..OrchestratorConfig::default()
    })
}

pub fn quick_joins(log_dir: Option<&Path>, join_timeout: Duration) -> (Orchestrator, Builtins) {
    local_orchestrator(OrchestratorConfig {
        log_dir: log_dir.map(Path::to_path_buf),
        join_timeout,
        reproducible: true,
        ..OrchestratorConfig::default()
    })
}

use serde_json::Value;
use trialworks::orchestrator::server::handle_session;
use trialworks::orchestrator::WatchFilter;
use trialworks::protocol::{Envelope, MsgType, ParticipantId, TrialPhase};
use trialworks::transport::{link_pair, Link};

pub const PATIENCE: Duration = Duration::from_secs(20);

pub async fn wait_for(orch: &Orchestrator, trial_id: &str, phase: TrialPhase) {
    let mut events = orch.watch_trials(WatchFilter::Trial(trial_id.to_string()));
    let reached = async {
        while let Some(ev) = events.recv().await {
            if ev.state.state == phase {
                return;
            }
            assert!(!ev.state.is_ended(), "trial ended before {phase}: {:?}", ev.state);
        }
    };
    tokio::time::timeout(PATIENCE, reached).await.expect("phase not reached");
}

pub async fn wait_ended(orch: &Orchestrator, trial_id: &str) -> trialworks::orchestrator::TrialSummary {
    let mut events = orch.watch_trials(WatchFilter::Trial(trial_id.to_string()));
    let ended = async {
        while let Some(ev) = events.recv().await {
            if let Some(s) = ev.summary {
                return s;
            }
        }
        panic!("watch closed");
    };
    tokio::time::timeout(PATIENCE, ended).await.expect("trial did not end")
}

/// A scripted client actor speaking the wire protocol through a session.
pub struct Client {
    pub link: Link,
    pub trial_id: String,
    pub name: String,
    me: ParticipantId,
}

impl Client {
    /// Joins over `link`, which must already reach a session handler.
    pub async fn join_over(mut link: Link, trial_id: &str, name: &str) -> Result<Client, Value> {
        let me = ParticipantId::actor(name);
        link.send(Envelope::new(MsgType::JoinTrial, trial_id, 0, me.clone(), serde_json::json!({"actor_name": name})));
        let ack = tokio::time::timeout(PATIENCE, link.recv()).await.expect("no join ack").expect("session closed");
        assert_eq!(ack.msg_type, MsgType::JoinAck, "{ack:?}");
        if ack.payload["ok"] != Value::Bool(true) {
            return Err(ack.payload);
        }
        Ok(Client { link, trial_id: trial_id.to_string(), name: name.to_string(), me })
    }

    pub async fn join(orch: &Orchestrator, trial_id: &str, name: &str) -> Client {
        Self::try_join(orch, trial_id, name).await.expect("join refused")
    }

    pub async fn try_join(orch: &Orchestrator, trial_id: &str, name: &str) -> Result<Client, Value> {
        let (ours, theirs) = link_pair();
        tokio::spawn(handle_session(orch.clone(), theirs));
        Self::join_over(ours, trial_id, name).await
    }

    /// Next envelope; `None` once the session closed.
    pub async fn recv(&mut self) -> Option<Envelope> {
        tokio::time::timeout(PATIENCE, self.link.recv()).await.expect("client starved")
    }

    /// Skips envelopes until one matches.
    pub async fn until(&mut self, pick: impl Fn(&Envelope) -> bool) -> Envelope {
        loop {
            let m = self.recv().await.expect("session closed while waiting");
            if pick(&m) {
                return m;
            }
        }
    }

    pub async fn observation(&mut self) -> Envelope {
        self.until(|m| m.msg_type == MsgType::ObservationSet).await
    }

    fn send(&self, msg_type: MsgType, tick: u64, payload: Value) {
        self.link.send(Envelope::new(msg_type, self.trial_id.clone(), tick, self.me.clone(), payload));
    }

    pub fn act(&self, tick: u64, action: Value) {
        self.send(MsgType::Action, tick, serde_json::json!({"action": action}));
    }

    pub fn reward(&self, tick: u64, target: &str, target_tick: u64, value: f64, confidence: f64) {
        let payload = serde_json::json!({
            "value": value, "confidence": confidence, "target_actor": target, "target_tick": target_tick,
        });
        self.send(MsgType::Reward, tick, payload);
    }

    pub fn message(&self, tick: u64, to: ParticipantId, payload: Value) {
        self.send(MsgType::Message, tick, serde_json::json!({"to": to, "payload": payload}));
    }

    pub fn end_trial(&self) {
        self.send(MsgType::EndTrial, 0, serde_json::json!({}));
    }
}

pub fn idle() -> Value {
    serde_json::json!({"fire": false, "strafe": 0.0, "forward": 0.0, "rotate": 0.0})
}

/// 1v1 where `p1` is a client-driven player.
pub fn duel_with_client(opponent: &str, max_tick: u64) -> TrialParams {
    let mut p = duel(opponent, "unused", max_tick, 3);
    p.actor_slots[1] = trialworks::protocol::ActorSlot::client("p1", PLAYER_CLASS);
    p
}
