//! Typed messages, trial configuration and the wire format spoken by every
//! participant.
//!
//! Everything that crosses a process boundary is an [`Envelope`]. Envelopes
//! are framed with [`encode_frame`] / [`decode_frame`]; observation and action
//! payloads are checked with [`validate_against_schema`].

mod finite;
mod frame;
mod schema;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use finite::{finite_f64, finite_vec};
pub use frame::{decode_frame, decode_text, encode_frame, encode_text, DecodeError, FRAME_PREFIX_LEN};
pub use schema::{
    actor_class, actor_classes, schema_for, validate_against_schema, SchemaViolation,
    ARENA_ACTION_V1, ARENA_OBS_V1, ARENA_WORLD_V1,
};

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("non-finite number in payload: {0}")]
    NonFinite(String),
    #[error("payload serialization failed: {0}")]
    Serialize(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
}

// ---------------------------------------------------------------------------
// Message types
// ---------------------------------------------------------------------------

/// Closed set of envelope types.
///
/// The first fourteen are exchanged over sessions; the last four only appear
/// in files (trial logs and model checkpoints) that reuse the frame format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    RegisterService,
    RegisterAck,
    StartTrial,
    TrialState,
    JoinTrial,
    JoinAck,
    ObservationSet,
    Action,
    Reward,
    Message,
    EndTrial,
    TrialEnded,
    Heartbeat,
    Error,
    LogHeader,
    TickSample,
    LogFooter,
    ModelCheckpoint,
}

impl MsgType {
    pub const ALL: [MsgType; 18] = [
        MsgType::RegisterService,
        MsgType::RegisterAck,
        MsgType::StartTrial,
        MsgType::TrialState,
        MsgType::JoinTrial,
        MsgType::JoinAck,
        MsgType::ObservationSet,
        MsgType::Action,
        MsgType::Reward,
        MsgType::Message,
        MsgType::EndTrial,
        MsgType::TrialEnded,
        MsgType::Heartbeat,
        MsgType::Error,
        MsgType::LogHeader,
        MsgType::TickSample,
        MsgType::LogFooter,
        MsgType::ModelCheckpoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::RegisterService => "register_service",
            MsgType::RegisterAck => "register_ack",
            MsgType::StartTrial => "start_trial",
            MsgType::TrialState => "trial_state",
            MsgType::JoinTrial => "join_trial",
            MsgType::JoinAck => "join_ack",
            MsgType::ObservationSet => "observation_set",
            MsgType::Action => "action",
            MsgType::Reward => "reward",
            MsgType::Message => "message",
            MsgType::EndTrial => "end_trial",
            MsgType::TrialEnded => "trial_ended",
            MsgType::Heartbeat => "heartbeat",
            MsgType::Error => "error",
            MsgType::LogHeader => "log_header",
            MsgType::TickSample => "tick_sample",
            MsgType::LogFooter => "log_footer",
            MsgType::ModelCheckpoint => "model_checkpoint",
        }
    }

    /// True for types that may travel over a live session.
    pub fn is_wire(self) -> bool {
        !matches!(
            self,
            MsgType::LogHeader | MsgType::TickSample | MsgType::LogFooter | MsgType::ModelCheckpoint
        )
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl Serialize for MsgType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MsgType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|s| serde::de::Error::custom(format!("unknown msg_type {s}")))
    }
}

// ---------------------------------------------------------------------------
// Participants
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantKind {
    Environment,
    Actor,
    Controller,
    Observer,
    Orchestrator,
}

/// Identity of a trial participant. `name` is unique within a trial.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParticipantId {
    pub kind: ParticipantKind,
    pub name: String,
}

impl ParticipantId {
    pub fn new(kind: ParticipantKind, name: impl Into<String>) -> Self {
        Self { kind, name: name.into() }
    }

    pub fn environment() -> Self {
        Self::new(ParticipantKind::Environment, "env")
    }

    pub fn actor(name: impl Into<String>) -> Self {
        Self::new(ParticipantKind::Actor, name)
    }

    pub fn controller(name: impl Into<String>) -> Self {
        Self::new(ParticipantKind::Controller, name)
    }

    pub fn orchestrator() -> Self {
        Self::new(ParticipantKind::Orchestrator, "orchestrator")
    }

    /// Broadcast address for every actor of a trial.
    pub fn all_actors() -> Self {
        Self::new(ParticipantKind::Actor, "*")
    }

    pub fn is_broadcast(&self) -> bool {
        self.name == "*"
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParticipantKind::Environment => "environment",
            ParticipantKind::Actor => "actor",
            ParticipantKind::Controller => "controller",
            ParticipantKind::Observer => "observer",
            ParticipantKind::Orchestrator => "orchestrator",
        };
        write!(f, "{kind}:{}", self.name)
    }
}

// ---------------------------------------------------------------------------
// Envelope
// ---------------------------------------------------------------------------

/// The universal wire message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub trial_id: String,
    pub tick_id: u64,
    pub sender: ParticipantId,
    pub payload: Value,
}

impl Envelope {
    pub fn new(
        msg_type: MsgType,
        trial_id: impl Into<String>,
        tick_id: u64,
        sender: ParticipantId,
        payload: Value,
    ) -> Self {
        Self { msg_type, trial_id: trial_id.into(), tick_id, sender, payload }
    }

    /// Builds an envelope from a typed payload, rejecting non-finite numbers.
    pub fn with_payload<T: Serialize>(
        msg_type: MsgType,
        trial_id: impl Into<String>,
        tick_id: u64,
        sender: ParticipantId,
        payload: &T,
    ) -> Result<Self, EncodeError> {
        Ok(Self::new(msg_type, trial_id, tick_id, sender, to_payload(payload)?))
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.sender.name.is_empty() {
            return Err(EncodeError::InvalidEnvelope("sender name is empty".into()));
        }
        Ok(())
    }

    /// Deserializes the payload into a typed value.
    pub fn parse<T: serde::de::DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(&self.payload)
    }
}

/// Converts a typed payload into a structured value.
///
/// Float fields declared with [`finite_f64`] report non-finite values as
/// [`EncodeError::NonFinite`] instead of silently becoming `null`.
pub fn to_payload<T: Serialize>(payload: &T) -> Result<Value, EncodeError> {
    serde_json::to_value(payload).map_err(|e| {
        let msg = e.to_string();
        if msg.contains(finite::NON_FINITE_TAG) {
            EncodeError::NonFinite(msg)
        } else {
            EncodeError::Serialize(msg)
        }
    })
}

// ---------------------------------------------------------------------------
// Classes and schemas
// ---------------------------------------------------------------------------

/// Identifies one compiled-in field layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemaRef {
    pub schema_name: String,
    pub version: u32,
}

impl SchemaRef {
    pub fn new(schema_name: impl Into<String>, version: u32) -> Self {
        Self { schema_name: schema_name.into(), version }
    }
}

impl fmt::Display for SchemaRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/v{}", self.schema_name, self.version)
    }
}

/// The contract shared by all actors of a kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorClass {
    pub class_name: String,
    pub observation_schema: SchemaRef,
    pub action_schema: SchemaRef,
    /// Substituted when an actor misses the action deadline.
    pub default_action: Value,
    /// Observers receive observations but are never waited on for actions.
    pub acts: bool,
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// One piece of evaluative feedback, possibly aimed at a past tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    #[serde(serialize_with = "finite_f64")]
    pub value: f64,
    #[serde(serialize_with = "finite_f64")]
    pub confidence: f64,
    pub source: ParticipantId,
    pub target_actor: String,
    pub target_tick: u64,
}

impl Reward {
    pub fn validate(&self) -> Result<(), String> {
        if !self.value.is_finite() {
            return Err("value".into());
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err("confidence".into());
        }
        if self.target_actor.is_empty() {
            return Err("target_actor".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trial configuration
// ---------------------------------------------------------------------------

pub const DEFAULT_RETRO_WINDOW: u64 = 32;
pub const DEFAULT_ACTION_TIMEOUT_MS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorSlot {
    pub actor_name: String,
    pub class_name: String,
    pub implementation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub is_client: bool,
}

impl ActorSlot {
    pub fn service(
        actor_name: impl Into<String>,
        class_name: impl Into<String>,
        implementation: impl Into<String>,
    ) -> Self {
        Self {
            actor_name: actor_name.into(),
            class_name: class_name.into(),
            implementation: implementation.into(),
            endpoint: None,
            is_client: false,
        }
    }

    pub fn client(actor_name: impl Into<String>, class_name: impl Into<String>) -> Self {
        Self {
            actor_name: actor_name.into(),
            class_name: class_name.into(),
            implementation: "client".into(),
            endpoint: None,
            is_client: true,
        }
    }
}

/// Full configuration of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    #[serde(default)]
    pub trial_id: String,
    pub env_implementation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_endpoint: Option<String>,
    #[serde(default = "empty_object")]
    pub env_config: Value,
    pub actor_slots: Vec<ActorSlot>,
    pub max_tick: u64,
    #[serde(default = "default_retro_window")]
    pub retro_window: u64,
    #[serde(default = "default_action_timeout_ms")]
    pub action_timeout_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

fn default_retro_window() -> u64 {
    DEFAULT_RETRO_WINDOW
}

fn default_action_timeout_ms() -> u64 {
    DEFAULT_ACTION_TIMEOUT_MS
}

/// Static validation failure, naming the offending field path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid trial params at `{path}`: {reason}")]
pub struct ParamsError {
    pub path: String,
    pub reason: String,
}

impl ParamsError {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { path: path.into(), reason: reason.into() }
    }
}

impl TrialParams {
    pub fn new(env_implementation: impl Into<String>, actor_slots: Vec<ActorSlot>, max_tick: u64) -> Self {
        Self {
            trial_id: String::new(),
            env_implementation: env_implementation.into(),
            env_endpoint: None,
            env_config: empty_object(),
            actor_slots,
            max_tick,
            retro_window: DEFAULT_RETRO_WINDOW.min(max_tick),
            action_timeout_ms: DEFAULT_ACTION_TIMEOUT_MS,
            seed: 0,
        }
    }

    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self, ParamsError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| ParamsError::new("$", format!("not a valid document: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, ParamsError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ParamsError::new("$", "expected an object"))?;
        for key in ["env_implementation", "actor_slots", "max_tick"] {
            if !obj.contains_key(key) {
                return Err(ParamsError::new(key, "missing"));
            }
        }
        let mut params = Self::deserialize(value).map_err(|e| {
            // serde_json does not report field paths; find the first field that fails alone.
            let path = obj
                .iter()
                .find(|(k, v)| field_rejects(k, v))
                .map(|(k, _)| k.clone())
                .unwrap_or_else(|| "$".into());
            ParamsError::new(path, e.to_string())
        })?;
        // An omitted window defaults to 32 but never beyond the trial length.
        if !obj.contains_key("retro_window") {
            params.retro_window = params.retro_window.min(params.max_tick);
        }
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.env_implementation.is_empty() && self.env_endpoint.is_none() {
            return Err(ParamsError::new("env_implementation", "empty"));
        }
        if self.max_tick < 1 {
            return Err(ParamsError::new("max_tick", "must be at least 1"));
        }
        if self.retro_window > self.max_tick {
            return Err(ParamsError::new("retro_window", "must not exceed max_tick"));
        }
        if self.action_timeout_ms < 1 {
            return Err(ParamsError::new("action_timeout_ms", "must be positive"));
        }
        if self.actor_slots.is_empty() {
            return Err(ParamsError::new("actor_slots", "at least one slot required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, slot) in self.actor_slots.iter().enumerate() {
            let at = |f: &str| format!("actor_slots[{i}].{f}");
            if slot.actor_name.is_empty() || slot.actor_name == "*" {
                return Err(ParamsError::new(at("actor_name"), "invalid name"));
            }
            if !seen.insert(slot.actor_name.as_str()) {
                return Err(ParamsError::new(at("actor_name"), "duplicate name"));
            }
            if actor_class(&slot.class_name).is_none() {
                return Err(ParamsError::new(at("class_name"), "unknown actor class"));
            }
            if slot.is_client && slot.endpoint.is_some() {
                return Err(ParamsError::new(at("endpoint"), "client slots dial in"));
            }
            if !slot.is_client && slot.implementation.is_empty() && slot.endpoint.is_none() {
                return Err(ParamsError::new(at("implementation"), "empty"));
            }
        }
        Ok(())
    }

    pub fn slot(&self, actor_name: &str) -> Option<&ActorSlot> {
        self.actor_slots.iter().find(|s| s.actor_name == actor_name)
    }

    pub fn has_clients(&self) -> bool {
        self.actor_slots.iter().any(|s| s.is_client)
    }
}

fn field_rejects(key: &str, value: &Value) -> bool {
    match key {
        "trial_id" | "env_implementation" => !value.is_string(),
        "env_endpoint" => !(value.is_string() || value.is_null()),
        "max_tick" | "retro_window" | "action_timeout_ms" | "seed" => value.as_u64().is_none(),
        "actor_slots" => Vec::<ActorSlot>::deserialize(value).is_err(),
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Trial lifecycle
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    Pending,
    Initializing,
    WaitingForClients,
    Running,
    Terminating,
    Ended,
}

impl TrialPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialPhase::Pending => "pending",
            TrialPhase::Initializing => "initializing",
            TrialPhase::WaitingForClients => "waiting_for_clients",
            TrialPhase::Running => "running",
            TrialPhase::Terminating => "terminating",
            TrialPhase::Ended => "ended",
        }
    }

    /// Allowed lifecycle edges.
    ///
    /// `initializing -> ended` is the setup-failure exit; `initializing ->
    /// running` skips the client wait when no slot dials in.
    pub fn can_transition_to(self, next: TrialPhase) -> bool {
        use TrialPhase::*;
        matches!(
            (self, next),
            (Pending, Initializing)
                | (Initializing, WaitingForClients)
                | (Initializing, Running)
                | (Initializing, Ended)
                | (WaitingForClients, Running)
                | (WaitingForClients, Terminating)
                | (Running, Terminating)
                | (Terminating, Ended)
        )
    }
}

impl fmt::Display for TrialPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialState {
    pub state: TrialPhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl TrialState {
    pub fn new(state: TrialPhase) -> Self {
        Self { state, reason: None }
    }

    pub fn with_reason(state: TrialPhase, reason: impl Into<String>) -> Self {
        Self { state, reason: Some(reason.into()) }
    }

    pub fn is_ended(&self) -> bool {
        self.state == TrialPhase::Ended
    }
}
