//! Controller side of the orchestrator protocol.

use std::collections::{BTreeMap, VecDeque};

use serde::Deserialize;
use serde_json::{json, Value};

use super::CliError;
use crate::orchestrator::server::handle_session;
use crate::orchestrator::Orchestrator;
use crate::protocol::{to_payload, Envelope, MsgType, ParticipantId, TrialParams, TrialPhase};
use crate::transport::{dial_tcp, link_pair, Link};

/// Contents of a `trial_ended` envelope sent to watchers.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct EndedReport {
    pub reason: String,
    pub total_ticks: u64,
    pub totals: BTreeMap<String, f64>,
    pub implementations: BTreeMap<String, String>,
    #[serde(default)]
    pub log_path: Option<String>,
}

/// A state change as seen by a watcher.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    State { trial_id: String, state: TrialPhase, reason: Option<String> },
    Ended { trial_id: String, report: EndedReport },
}

pub struct Controller {
    link: Link,
    me: ParticipantId,
    /// Envelopes that arrived while waiting for a reply.
    backlog: VecDeque<Envelope>,
}

impl Controller {
    pub async fn connect(addr: &str) -> Result<Self, CliError> {
        let link = dial_tcp(addr).await.map_err(|e| CliError::Connect(format!("{addr}: {e}")))?;
        Ok(Self::over(link))
    }

    /// Talks to an orchestrator in the same process, through the same
    /// session handler remote controllers get.
    pub fn in_process(orch: &Orchestrator) -> Self {
        let (ours, theirs) = link_pair();
        tokio::spawn(handle_session(orch.clone(), theirs));
        Self::over(ours)
    }

    pub fn over(link: Link) -> Self {
        Self { link, me: ParticipantId::controller("tw"), backlog: VecDeque::new() }
    }

    fn send(&self, msg_type: MsgType, trial_id: &str, payload: Value) -> Result<(), CliError> {
        let env = Envelope::new(msg_type, trial_id, 0, self.me.clone(), payload);
        if self.link.send(env) {
            Ok(())
        } else {
            Err(CliError::Connect("orchestrator closed the connection".into()))
        }
    }

    /// Waits for the first envelope accepted by `pick`, parking the rest.
    async fn await_reply(&mut self, pick: impl Fn(&Envelope) -> bool) -> Result<Envelope, CliError> {
        loop {
            let msg = self
                .link
                .recv()
                .await
                .ok_or_else(|| CliError::Connect("orchestrator closed the connection".into()))?;
            if pick(&msg) {
                return Ok(msg);
            }
            self.backlog.push_back(msg);
        }
    }

    pub async fn start(&mut self, params: &TrialParams) -> Result<String, CliError> {
        let payload = to_payload(params).map_err(|e| CliError::Other(e.to_string()))?;
        self.send(MsgType::StartTrial, &params.trial_id, payload)?;
        let reply = self
            .await_reply(|m| m.msg_type == MsgType::StartTrial || is_error(m, &["invalid_params", "rejected"]))
            .await?;
        if reply.msg_type == MsgType::Error {
            let path = reply.payload["path"].as_str().unwrap_or("$").to_string();
            let reason = reply.payload["message"].as_str().unwrap_or("rejected").to_string();
            return Err(CliError::InvalidConfig { path, reason });
        }
        Ok(reply.trial_id)
    }

    pub async fn terminate(&mut self, trial_id: &str) -> Result<(), CliError> {
        self.send(MsgType::EndTrial, trial_id, json!({"reason": "client_requested"}))?;
        let id = trial_id.to_string();
        let reply = self
            .await_reply(move |m| m.trial_id == id && (m.msg_type == MsgType::EndTrial || is_error(m, &["not_found"])))
            .await?;
        if reply.msg_type == MsgType::Error {
            return Err(CliError::UnknownTrial(trial_id.to_string()));
        }
        Ok(())
    }

    /// Subscribes to `"*"` or one trial id. Unknown ids fail.
    pub async fn watch(&mut self, target: &str) -> Result<(), CliError> {
        self.send(MsgType::TrialState, "", json!({"watch": target}))?;
        if target == "*" {
            return Ok(());
        }
        // The first event for the trial (or an error) tells whether it exists.
        let id = target.to_string();
        let first = self
            .await_reply(move |m| m.trial_id == id && (m.msg_type == MsgType::TrialState || is_error(m, &["not_found"])))
            .await?;
        if first.msg_type == MsgType::Error {
            return Err(CliError::UnknownTrial(target.to_string()));
        }
        self.backlog.push_front(first);
        Ok(())
    }

    /// Next watch event, skipping anything else.
    pub async fn next_event(&mut self) -> Result<Event, CliError> {
        loop {
            let msg = match self.backlog.pop_front() {
                Some(m) => m,
                None => self
                    .link
                    .recv()
                    .await
                    .ok_or_else(|| CliError::Connect("orchestrator closed the connection".into()))?,
            };
            if let Some(ev) = to_event(&msg) {
                return Ok(ev);
            }
        }
    }
}

fn is_error(m: &Envelope, codes: &[&str]) -> bool {
    m.msg_type == MsgType::Error && m.payload["code"].as_str().is_some_and(|c| codes.contains(&c))
}

fn to_event(msg: &Envelope) -> Option<Event> {
    match msg.msg_type {
        MsgType::TrialState => {
            let state: TrialPhase = serde_json::from_value(msg.payload["state"].clone()).ok()?;
            let reason = msg.payload["reason"].as_str().map(str::to_string);
            Some(Event::State { trial_id: msg.trial_id.clone(), state, reason })
        }
        MsgType::TrialEnded => {
            let report: EndedReport = serde_json::from_value(msg.payload.clone()).ok()?;
            Some(Event::Ended { trial_id: msg.trial_id.clone(), report })
        }
        _ => None,
    }
}
