//! Player implementations: uniform random, scripted heuristic and a
//! REINFORCE learner. All three serve the `player` class and can be swapped
//! per slot.

pub mod policy;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub use policy::{
    features, normalized_returns, returns_to_go, softmax, EpisodeStep, FeatureScale, GridCell, ModelError,
    PolicyModel, FEATURES, GRID_CELLS,
};

use crate::arena::{to_local, ArenaAction, ArenaConfig};
use crate::orchestrator::rewards::AggregatedReward;
use crate::service::{Actor, ActorContext, ActorFactory, ActorSetup, ServiceError};

pub const RANDOM_V1: &str = "random_v1";
pub const HEURISTIC_V1: &str = "heuristic_v1";
pub const REINFORCE_V1: &str = "reinforce_v1";

/// Aim tolerance for firing, radians.
pub const FIRE_BEARING: f64 = 0.1;
/// Fraction of the FOV range inside which the heuristic stops advancing.
pub const CLOSE_RANGE: f64 = 0.3;
/// A ball passing closer than this many reaches counts as incoming.
pub const DODGE_MARGIN: f64 = 1.5;
/// Patrol cycle in ticks, of which the first `PATROL_SPIN` turn in place.
pub const PATROL_PERIOD: u64 = 160;
pub const PATROL_SPIN: u64 = 64;

/// FNV-1a, used to derive per-actor seeds from names.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn actor_seed(trial_seed: u64, actor_name: &str) -> u64 {
    trial_seed ^ name_hash(actor_name)
}

fn arena_config(setup: &ActorSetup) -> Result<ArenaConfig, ServiceError> {
    let mut doc = setup.env_config.clone();
    if let Value::Object(o) = &mut doc {
        // Team layout is irrelevant to a single player's view.
        o.remove("teams");
    }
    ArenaConfig::from_env_config(&doc, 1, 0).map_err(|e| ServiceError::Setup(e.to_string()))
}

// ---------------------------------------------------------------------------
// random_v1
// ---------------------------------------------------------------------------

pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn draw(&mut self) -> GridCell {
        GridCell::from_index(self.rng.random_range(0..GRID_CELLS))
    }
}

impl Actor for RandomAgent {
    fn act(&mut self, _ctx: &mut ActorContext, _obs: &Value) -> Result<Value, ServiceError> {
        Ok(self.draw().action().to_value())
    }
}

pub struct RandomFactory;

impl ActorFactory for RandomFactory {
    fn create(&self, setup: &ActorSetup) -> Result<Box<dyn Actor>, ServiceError> {
        Ok(Box::new(RandomAgent::new(actor_seed(setup.seed, &setup.actor_name))))
    }
}

// ---------------------------------------------------------------------------
// heuristic_v1
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct HeuristicAgent {
    pub arena_size: f64,
    pub fov_range: f64,
    pub turn_speed: f64,
    /// Centre distance at which a ball touches the player.
    pub reach: f64,
}

impl HeuristicAgent {
    pub fn new(config: &ArenaConfig) -> Self {
        Self {
            arena_size: config.arena_size,
            fov_range: config.fov_range,
            turn_speed: config.turn_speed,
            reach: config.player_radius + config.ball_radius,
        }
    }

    /// Turn toward the nearest living opponent, fire once aimed, close in
    /// from afar and sidestep up close; scan when nobody is in view.
    ///
    /// With nobody in view it patrols: a full turn in place, then a walk
    /// to the next quadrant centre, since turning in place from one spot
    /// never finds an opponent beyond view range. Any ball on course
    /// to hit overrides the strafe with a sidestep away from its path.
    pub fn decide(&self, obs: &Value) -> ArenaAction {
        let mut a = self.engage(obs);
        if let Some(side) = self.incoming(obs) {
            a.strafe = if side > 0.0 { -1.0 } else { 1.0 };
        }
        a
    }

    fn engage(&self, obs: &Value) -> ArenaAction {
        let empty = Vec::new();
        let seen = obs["visible_players"].as_array().unwrap_or(&empty);
        let target = seen
            .iter()
            .filter(|p| p["opponent"].as_bool() == Some(true) && p["alive"].as_bool() == Some(true))
            .map(|p| (p["x"].as_f64().unwrap_or(0.0), p["y"].as_f64().unwrap_or(0.0)))
            .min_by(|a, b| a.0.hypot(a.1).total_cmp(&b.0.hypot(b.1)));
        let Some((x, y)) = target else {
            return self.patrol(obs);
        };
        let bearing = y.atan2(x);
        let range = x.hypot(y);
        let close = range <= CLOSE_RANGE * self.fov_range;
        // Alternate the dodge direction every 16 ticks.
        let tick = obs["tick_id"].as_u64().unwrap_or(0);
        let dodge = if (tick / 16) % 2 == 0 { 1.0 } else { -1.0 };
        ArenaAction {
            fire: bearing.abs() < FIRE_BEARING,
            strafe: if close { dodge } else { 0.0 },
            forward: if close { 0.0 } else { 1.0 },
            rotate: (bearing / self.turn_speed).clamp(-1.0, 1.0),
        }
    }

    /// Lateral miss distance of the soonest ball on course to hit, if any.
    fn incoming(&self, obs: &Value) -> Option<f64> {
        let empty = Vec::new();
        let balls = obs["visible_projectiles"].as_array().unwrap_or(&empty);
        let num = |b: &Value, k: &str| b[k].as_f64().unwrap_or(0.0);
        balls
            .iter()
            .filter_map(|b| {
                let (x, y, vx, vy) = (num(b, "x"), num(b, "y"), num(b, "vx"), num(b, "vy"));
                let v2 = vx * vx + vy * vy;
                if v2 == 0.0 {
                    return None;
                }
                // Closest approach to our centre, if still ahead.
                let t = -(x * vx + y * vy) / v2;
                let (cx, cy) = (x + vx * t, y + vy * t);
                (t > 0.0 && cx.hypot(cy) < DODGE_MARGIN * self.reach).then_some((t, cy))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, side)| side)
    }

    /// Spin in place for a full turn, then walk to the next quadrant centre.
    fn patrol(&self, obs: &Value) -> ArenaAction {
        let tick = obs["tick_id"].as_u64().unwrap_or(0);
        let spin = ArenaAction { rotate: 1.0, ..Default::default() };
        if tick % PATROL_PERIOD < PATROL_SPIN {
            return spin;
        }
        let me = &obs["self"];
        let (q, h) = (self.arena_size / 4.0, 3.0 * self.arena_size / 4.0);
        let (wx, wy) = [(q, q), (h, q), (h, h), (q, h)][((tick / PATROL_PERIOD) % 4) as usize];
        let (dx, dy) = (wx - me["x"].as_f64().unwrap_or(wx), wy - me["y"].as_f64().unwrap_or(wy));
        if dx.hypot(dy) <= CLOSE_RANGE * self.fov_range {
            return spin;
        }
        let (lx, ly) = to_local(dx, dy, me["theta"].as_f64().unwrap_or(0.0));
        let bearing = ly.atan2(lx);
        ArenaAction {
            forward: if bearing.abs() < FRAC_PI_2 { 1.0 } else { 0.0 },
            rotate: (bearing / self.turn_speed).clamp(-1.0, 1.0),
            ..Default::default()
        }
    }
}

impl Actor for HeuristicAgent {
    fn act(&mut self, _ctx: &mut ActorContext, obs: &Value) -> Result<Value, ServiceError> {
        Ok(self.decide(obs).to_value())
    }
}

pub struct HeuristicFactory;

impl ActorFactory for HeuristicFactory {
    fn create(&self, setup: &ActorSetup) -> Result<Box<dyn Actor>, ServiceError> {
        Ok(Box::new(HeuristicAgent::new(&arena_config(setup)?)))
    }
}

// ---------------------------------------------------------------------------
// reinforce_v1
// ---------------------------------------------------------------------------

/// A policy shared by every session of one learner. Acting takes a read
/// lock; an update swaps the weights under the write lock, so a decision
/// sees either the old or the new model.
#[derive(Debug, Default)]
pub struct Learner {
    model: RwLock<PolicyModel>,
    updates: AtomicU64,
    frozen: std::sync::atomic::AtomicBool,
}

impl Learner {
    pub fn new(model: PolicyModel) -> Self {
        Self { model: RwLock::new(model), ..Default::default() }
    }

    pub fn snapshot(&self) -> PolicyModel {
        self.model.read().unwrap().clone()
    }

    pub fn updates(&self) -> u64 {
        self.updates.load(Ordering::SeqCst)
    }

    /// Stops learning; sessions keep acting with the current weights.
    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::SeqCst);
    }

    pub fn sample<R: Rng>(&self, phi: &[f64; FEATURES], rng: &mut R) -> Result<(usize, f64), ModelError> {
        self.model.read().unwrap().sample(phi, rng)
    }

    pub fn update(&self, episode: &[EpisodeStep]) -> Result<(), ModelError> {
        if episode.is_empty() || self.frozen.load(Ordering::SeqCst) {
            return Ok(());
        }
        let mut next = self.snapshot();
        next.update(episode)?;
        *self.model.write().unwrap() = next;
        self.updates.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

/// One trial's worth of a learner session.
pub struct ReinforceAgent {
    learner: Arc<Learner>,
    scale: FeatureScale,
    rng: ChaCha8Rng,
    /// Decisions taken while alive, keyed by tick.
    decisions: BTreeMap<u64, ([f64; FEATURES], usize, f64)>,
    /// Latest aggregated reward per target tick.
    rewards: BTreeMap<u64, f64>,
    name: String,
}

impl ReinforceAgent {
    pub fn new(learner: Arc<Learner>, scale: FeatureScale, seed: u64, name: impl Into<String>) -> Self {
        Self {
            learner,
            scale,
            rng: ChaCha8Rng::seed_from_u64(seed),
            decisions: BTreeMap::new(),
            rewards: BTreeMap::new(),
            name: name.into(),
        }
    }

    /// The episode collected so far, rewards attached to the decision ticks.
    pub fn episode(&self) -> Vec<EpisodeStep> {
        self.decisions
            .iter()
            .map(|(t, (phi, cell, lp))| EpisodeStep {
                features: *phi,
                cell: *cell,
                log_prob: *lp,
                reward: self.rewards.get(t).copied().unwrap_or(0.0),
            })
            .collect()
    }
}

impl Actor for ReinforceAgent {
    fn act(&mut self, ctx: &mut ActorContext, obs: &Value) -> Result<Value, ServiceError> {
        let phi = features(obs, self.scale);
        let (cell, lp) = self.learner.sample(&phi, &mut self.rng).map_err(|e| ServiceError::Model(e.to_string()))?;
        if obs["self"]["alive"].as_bool() == Some(true) {
            self.decisions.insert(ctx.tick, (phi, cell, lp));
        }
        Ok(GridCell::from_index(cell).action().to_value())
    }

    fn on_reward(&mut self, reward: &AggregatedReward) {
        self.rewards.insert(reward.target_tick, reward.value);
    }

    fn end(&mut self, reason: &str) {
        if let Err(e) = self.learner.update(&self.episode()) {
            tracing::warn!(actor = %self.name, "update after `{reason}` failed: {e}");
        }
        self.decisions.clear();
        self.rewards.clear();
    }
}

pub struct ReinforceFactory {
    pub learner: Arc<Learner>,
}

impl ActorFactory for ReinforceFactory {
    fn create(&self, setup: &ActorSetup) -> Result<Box<dyn Actor>, ServiceError> {
        let cfg = arena_config(setup)?;
        let scale = FeatureScale { arena_size: cfg.arena_size, fov_range: cfg.fov_range };
        Ok(Box::new(ReinforceAgent::new(
            Arc::clone(&self.learner),
            scale,
            actor_seed(setup.seed, &setup.actor_name),
            setup.actor_name.clone(),
        )))
    }
}

#[cfg(test)]
mod tests;
