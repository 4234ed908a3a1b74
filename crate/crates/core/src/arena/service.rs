//! The arena behind the environment session interface.

use std::collections::BTreeMap;

use serde_json::Value;

use super::{ArenaAction, ArenaConfig, ArenaState};
use crate::protocol::{ParticipantId, Reward};
use crate::service::{EnvOutput, EnvSetup, Environment, EnvironmentFactory, ServiceError};

pub const ENV_IMPLEMENTATION: &str = "quack_arena_v1";

/// One arena per trial. Actors of class `player` fill the teams in slot
/// order; `observer` actors receive the world state.
#[derive(Default)]
pub struct ArenaEnvironment {
    state: Option<ArenaState>,
    players: Vec<String>,
    observers: Vec<String>,
}

impl ArenaEnvironment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> Option<&ArenaState> {
        self.state.as_ref()
    }

    fn output(&self, rewards: Vec<Reward>, terminal: bool) -> EnvOutput {
        let st = self.state.as_ref().expect("started");
        let mut observations = BTreeMap::new();
        for (i, name) in self.players.iter().enumerate() {
            observations.insert(name.clone(), st.observation(i));
        }
        if !self.observers.is_empty() {
            let world = st.world();
            for name in &self.observers {
                observations.insert(name.clone(), world.clone());
            }
        }
        EnvOutput { observations, rewards, messages: Vec::new(), terminal }
    }
}

impl Environment for ArenaEnvironment {
    fn start(&mut self, setup: &EnvSetup) -> Result<EnvOutput, ServiceError> {
        self.players = setup.actors.iter().filter(|a| a.class_name == "player").map(|a| a.name.clone()).collect();
        self.observers = setup.actors.iter().filter(|a| a.class_name == "observer").map(|a| a.name.clone()).collect();
        let mut doc = match &setup.env_config {
            Value::Null => Value::Object(Default::default()),
            v => v.clone(),
        };
        // Without explicit teams every player fights alone.
        if let Value::Object(o) = &mut doc {
            if !o.contains_key("teams") {
                o.insert("teams".into(), serde_json::json!(vec![1; self.players.len()]));
            }
        }
        let config = ArenaConfig::from_env_config(&doc, setup.max_tick, setup.seed)
            .map_err(|e| ServiceError::Setup(e.to_string()))?;
        let state =
            ArenaState::with_names(config, self.players.clone()).map_err(|e| ServiceError::Setup(e.to_string()))?;
        self.state = Some(state);
        Ok(self.output(Vec::new(), false))
    }

    fn step(&mut self, tick: u64, actions: &BTreeMap<String, Value>) -> Result<EnvOutput, ServiceError> {
        let st = self.state.as_mut().ok_or_else(|| ServiceError::Input("step before start".into()))?;
        let parsed: Vec<ArenaAction> = self
            .players
            .iter()
            .map(|n| actions.get(n).and_then(ArenaAction::from_value).unwrap_or_default())
            .collect();
        let outcome = st.step(&parsed);
        let rewards = outcome
            .rewards
            .combined
            .iter()
            .map(|&(i, value)| Reward {
                value,
                confidence: 1.0,
                source: ParticipantId::environment(),
                target_actor: self.players[i].clone(),
                target_tick: tick,
            })
            .collect();
        Ok(self.output(rewards, outcome.terminal))
    }
}

pub struct ArenaFactory;

impl EnvironmentFactory for ArenaFactory {
    fn create(&self) -> Box<dyn Environment> {
        Box::new(ArenaEnvironment::new())
    }
}
