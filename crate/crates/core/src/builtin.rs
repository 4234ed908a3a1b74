//! The arena and the three players, hosted in-process.

use std::sync::Arc;
use std::time::Duration;

use crate::agents::{
    HeuristicFactory, Learner, RandomFactory, ReinforceFactory, HEURISTIC_V1, RANDOM_V1, REINFORCE_V1,
};
use crate::arena::{ArenaFactory, ENV_IMPLEMENTATION};
use crate::metrics::MetricsSink;
use crate::orchestrator::{Orchestrator, OrchestratorConfig};
use crate::registry::{Registry, ENVIRONMENT_CLASS};
use crate::service::{Connector, ServiceImpl};

pub const PLAYER_CLASS: &str = "player";

/// Handles on the built-in services.
#[derive(Clone)]
pub struct Builtins {
    /// Model shared by every `reinforce_v1` session.
    pub learner: Arc<Learner>,
}

/// Every built-in implementation with its class, as `(class, implementation, service)`.
pub fn services(learner: Arc<Learner>) -> Vec<(&'static str, &'static str, ServiceImpl)> {
    vec![
        (ENVIRONMENT_CLASS, ENV_IMPLEMENTATION, ServiceImpl::Environment(Arc::new(ArenaFactory))),
        (PLAYER_CLASS, RANDOM_V1, ServiceImpl::Actor(Arc::new(RandomFactory))),
        (PLAYER_CLASS, HEURISTIC_V1, ServiceImpl::Actor(Arc::new(HeuristicFactory))),
        (PLAYER_CLASS, REINFORCE_V1, ServiceImpl::Actor(Arc::new(ReinforceFactory { learner }))),
    ]
}

/// Makes the built-ins reachable at `local://<implementation>` and
/// registers them. Local registrations never expire.
pub fn install(connector: &Connector, registry: &Registry) -> Builtins {
    let learner = Arc::new(Learner::default());
    for (class, implementation, service) in services(Arc::clone(&learner)) {
        let endpoint = connector.add_local(implementation, service);
        registry.register_pinned(class, implementation, &endpoint).expect("fresh registry entry");
    }
    Builtins { learner }
}

/// An orchestrator with the built-ins installed.
pub fn local_orchestrator(config: OrchestratorConfig) -> (Orchestrator, Builtins) {
    let registry = Arc::new(Registry::default());
    let connector = Arc::new(Connector::with_dial_timeout(Duration::from_secs(5)));
    let builtins = install(&connector, &registry);
    let orch = Orchestrator::new(config, registry, connector, Arc::new(MetricsSink::default()));
    (orch, builtins)
}

/// Same, with a metrics threshold.
pub fn local_orchestrator_with_threshold(config: OrchestratorConfig, threshold: f64) -> (Orchestrator, Builtins) {
    let registry = Arc::new(Registry::default());
    let connector = Arc::new(Connector::with_dial_timeout(Duration::from_secs(5)));
    let builtins = install(&connector, &registry);
    let orch = Orchestrator::new(config, registry, connector, Arc::new(MetricsSink::new(threshold)));
    (orch, builtins)
}
