//! Service registration and the pre-trial hook that resolves implementation
//! names to endpoints.

use std::collections::BTreeMap;
use std::sync::RwLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::TrialParams;

pub const DEFAULT_LIVENESS_WINDOW: Duration = Duration::from_secs(10);

/// Class name under which environment implementations register.
pub const ENVIRONMENT_CLASS: &str = "environment";

/// Mixed into the trial seed so endpoint choice is decorrelated from the
/// environment's own use of the seed.
const HOOK_SALT: u64 = 0x5eed_c0f1_9a7e_b00c;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("endpoint `{0}` is not a valid address")]
    InvalidEndpoint(String),
    #[error("`{implementation}` at {endpoint} is already registered as class `{existing}`")]
    Conflict { implementation: String, endpoint: String, existing: String },
    /// No live record for the slot's implementation; carries the slot name.
    #[error("no live endpoint for slot `{0}`")]
    Resolution(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceRecord {
    pub class_name: String,
    pub implementation: String,
    pub endpoint: String,
    pub last_heartbeat: Instant,
    /// In-process services never miss a heartbeat.
    pub pinned: bool,
}

/// Accepts `host:port` or `local://name`.
pub fn is_valid_endpoint(endpoint: &str) -> bool {
    if let Some(name) = endpoint.strip_prefix("local://") {
        return !name.is_empty();
    }
    match endpoint.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && port.parse::<u16>().is_ok(),
        None => false,
    }
}

#[derive(Debug)]
pub struct Registry {
    records: RwLock<BTreeMap<(String, String), ServiceRecord>>,
    liveness: Duration,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(DEFAULT_LIVENESS_WINDOW)
    }
}

impl Registry {
    pub fn new(liveness: Duration) -> Self {
        Self { records: RwLock::new(BTreeMap::new()), liveness }
    }

    pub fn liveness_window(&self) -> Duration {
        self.liveness
    }

    pub fn register(&self, class_name: &str, implementation: &str, endpoint: &str) -> Result<(), RegistryError> {
        self.register_at(class_name, implementation, endpoint, Instant::now())
    }

    /// Inserts a record or refreshes its heartbeat.
    pub fn register_at(
        &self,
        class_name: &str,
        implementation: &str,
        endpoint: &str,
        now: Instant,
    ) -> Result<(), RegistryError> {
        if !is_valid_endpoint(endpoint) {
            return Err(RegistryError::InvalidEndpoint(endpoint.to_string()));
        }
        let mut records = self.records.write().unwrap();
        let key = (implementation.to_string(), endpoint.to_string());
        match records.get_mut(&key) {
            Some(rec) if rec.class_name != class_name => Err(RegistryError::Conflict {
                implementation: implementation.to_string(),
                endpoint: endpoint.to_string(),
                existing: rec.class_name.clone(),
            }),
            Some(rec) => {
                rec.last_heartbeat = rec.last_heartbeat.max(now);
                Ok(())
            }
            None => {
                records.insert(
                    key,
                    ServiceRecord {
                        class_name: class_name.to_string(),
                        implementation: implementation.to_string(),
                        endpoint: endpoint.to_string(),
                        last_heartbeat: now,
                        pinned: false,
                    },
                );
                Ok(())
            }
        }
    }

    /// Registers a record that is live regardless of heartbeats.
    pub fn register_pinned(&self, class_name: &str, implementation: &str, endpoint: &str) -> Result<(), RegistryError> {
        self.register(class_name, implementation, endpoint)?;
        let key = (implementation.to_string(), endpoint.to_string());
        if let Some(rec) = self.records.write().unwrap().get_mut(&key) {
            rec.pinned = true;
        }
        Ok(())
    }

    pub fn deregister(&self, implementation: &str, endpoint: &str) {
        self.records
            .write()
            .unwrap()
            .remove(&(implementation.to_string(), endpoint.to_string()));
    }

    /// Live endpoints for an implementation, in a stable order.
    pub fn candidates(&self, class_name: &str, implementation: &str, now: Instant) -> Vec<String> {
        let records = self.records.read().unwrap();
        live_candidates(&records, self.liveness, class_name, implementation, now)
    }

    pub fn records(&self) -> Vec<ServiceRecord> {
        self.records.read().unwrap().values().cloned().collect()
    }

    /// Drops every record whose heartbeat is older than the liveness window.
    pub fn expire(&self, now: Instant) -> usize {
        let mut records = self.records.write().unwrap();
        let before = records.len();
        records.retain(|_, r| is_live(r, self.liveness, now));
        before - records.len()
    }

    pub fn pre_trial_hook(&self, params: &TrialParams) -> Result<TrialParams, RegistryError> {
        self.pre_trial_hook_at(params, Instant::now())
    }

    /// Fills every non-client endpoint with a seeded uniform choice among the
    /// live records of the slot's implementation.
    ///
    /// Slots that already carry an endpoint keep it. The environment is
    /// resolved first, under the reserved class [`ENVIRONMENT_CLASS`].
    pub fn pre_trial_hook_at(&self, params: &TrialParams, now: Instant) -> Result<TrialParams, RegistryError> {
        // One consistent snapshot for the whole resolution.
        let snapshot = self.records.read().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ HOOK_SALT);
        let mut out = params.clone();

        if out.env_endpoint.is_none() {
            let c = live_candidates(&snapshot, self.liveness, ENVIRONMENT_CLASS, &out.env_implementation, now);
            out.env_endpoint = Some(pick(&c, &mut rng).ok_or_else(|| RegistryError::Resolution("environment".into()))?);
        }
        for slot in out.actor_slots.iter_mut().filter(|s| !s.is_client && s.endpoint.is_none()) {
            let c = live_candidates(&snapshot, self.liveness, &slot.class_name, &slot.implementation, now);
            slot.endpoint = Some(pick(&c, &mut rng).ok_or_else(|| RegistryError::Resolution(slot.actor_name.clone()))?);
        }
        Ok(out)
    }
}

fn is_live(rec: &ServiceRecord, liveness: Duration, now: Instant) -> bool {
    rec.pinned || now.saturating_duration_since(rec.last_heartbeat) <= liveness
}

fn live_candidates(
    records: &BTreeMap<(String, String), ServiceRecord>,
    liveness: Duration,
    class_name: &str,
    implementation: &str,
    now: Instant,
) -> Vec<String> {
    records
        .values()
        .filter(|r| r.implementation == implementation && r.class_name == class_name && is_live(r, liveness, now))
        .map(|r| r.endpoint.clone())
        .collect()
}

fn pick(candidates: &[String], rng: &mut ChaCha8Rng) -> Option<String> {
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ActorSlot;

    const A: &str = "10.0.0.1:7000";
    const B: &str = "10.0.0.2:7000";

    fn params(slots: Vec<ActorSlot>, seed: u64) -> TrialParams {
        let mut p = TrialParams::new("quack_arena_v1", slots, 100);
        p.env_endpoint = Some("local://arena".into());
        p.seed = seed;
        p
    }

    #[test]
    fn register_is_idempotent() {
        let reg = Registry::default();
        reg.register("player", "heuristic_v1", A).unwrap();
        reg.register("player", "heuristic_v1", A).unwrap();
        assert_eq!(reg.records().len(), 1);
    }

    #[test]
    fn class_conflict() {
        let reg = Registry::default();
        reg.register("player", "h", A).unwrap();
        assert!(matches!(reg.register("observer", "h", A), Err(RegistryError::Conflict { .. })));
    }

    #[test]
    fn bad_endpoint() {
        let reg = Registry::default();
        assert!(matches!(reg.register("player", "h", "nope"), Err(RegistryError::InvalidEndpoint(_))));
        assert!(matches!(reg.register("player", "h", "host:99999"), Err(RegistryError::InvalidEndpoint(_))));
        assert!(reg.register("player", "h", "local://h").is_ok());
    }

    #[test]
    fn two_endpoints_both_listed() {
        let reg = Registry::default();
        reg.register("player", "reinforce_v1", A).unwrap();
        reg.register("player", "reinforce_v1", B).unwrap();
        let mut c = reg.candidates("player", "reinforce_v1", Instant::now());
        c.sort();
        assert_eq!(c, vec![A.to_string(), B.to_string()]);
    }

    #[test]
    fn singleton_is_chosen() {
        let reg = Registry::default();
        reg.register("player", "heuristic_v1", A).unwrap();
        let p = reg
            .pre_trial_hook(&params(vec![ActorSlot::service("player_1", "player", "heuristic_v1")], 7))
            .unwrap();
        assert_eq!(p.actor_slots[0].endpoint.as_deref(), Some(A));
    }

    #[test]
    fn unregistered_implementation_names_slot() {
        let reg = Registry::default();
        reg.register("player", "heuristic_v1", A).unwrap();
        let err = reg
            .pre_trial_hook(&params(
                vec![
                    ActorSlot::service("player_1", "player", "heuristic_v1"),
                    ActorSlot::service("player_2", "player", "maddpg_v1"),
                ],
                1,
            ))
            .unwrap_err();
        assert_eq!(err, RegistryError::Resolution("player_2".into()));
    }

    #[test]
    fn environment_resolves_too() {
        let reg = Registry::default();
        reg.register(ENVIRONMENT_CLASS, "quack_arena_v1", "local://arena").unwrap();
        reg.register("player", "heuristic_v1", A).unwrap();
        let mut p = params(vec![ActorSlot::service("p", "player", "heuristic_v1")], 0);
        p.env_endpoint = None;
        assert_eq!(reg.pre_trial_hook(&p).unwrap().env_endpoint.as_deref(), Some("local://arena"));
        p.env_implementation = "other".into();
        assert_eq!(reg.pre_trial_hook(&p).unwrap_err(), RegistryError::Resolution("environment".into()));
    }

    #[test]
    fn client_slots_untouched() {
        let reg = Registry::default();
        let p = params(vec![ActorSlot::client("human", "player")], 3);
        let out = reg.pre_trial_hook(&p).unwrap();
        assert_eq!(out.actor_slots[0].endpoint, None);
    }

    #[test]
    fn expired_records_are_never_selected() {
        let reg = Registry::new(Duration::from_secs(10));
        let t0 = Instant::now();
        reg.register_at("player", "h", A, t0).unwrap();
        reg.register_at("player", "h", B, t0 + Duration::from_secs(15)).unwrap();
        let later = t0 + Duration::from_secs(20);
        for seed in 0..200 {
            let p = reg
                .pre_trial_hook_at(&params(vec![ActorSlot::service("p", "player", "h")], seed), later)
                .unwrap();
            assert_eq!(p.actor_slots[0].endpoint.as_deref(), Some(B));
        }
        assert_eq!(reg.expire(later), 1);
    }

    #[test]
    fn heartbeat_refresh_keeps_record_live() {
        let reg = Registry::new(Duration::from_secs(10));
        let t0 = Instant::now();
        reg.register_at("player", "h", A, t0).unwrap();
        reg.register_at("player", "h", A, t0 + Duration::from_secs(8)).unwrap();
        assert_eq!(reg.candidates("player", "h", t0 + Duration::from_secs(16)), vec![A.to_string()]);
    }

    #[test]
    fn resolution_is_deterministic() {
        let reg = Registry::default();
        for i in 0..5 {
            reg.register("player", "h", &format!("10.0.0.{i}:1")).unwrap();
        }
        let p = params(
            vec![ActorSlot::service("a", "player", "h"), ActorSlot::service("b", "player", "h")],
            99,
        );
        let now = Instant::now();
        assert_eq!(reg.pre_trial_hook_at(&p, now).unwrap(), reg.pre_trial_hook_at(&p, now).unwrap());
    }
}
