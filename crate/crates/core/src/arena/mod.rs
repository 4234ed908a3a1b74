//! Quack Arena: a 2D team paintball duel.
//!
//! Coordinates follow screen convention: `x` right, `y` down, heading `θ`
//! measured from +x toward +y. A positive `rotate` therefore turns
//! clockwise on screen and a negative one anti-clockwise; a negative
//! `strafe` moves to the left of the heading.
//!
//! One step applies, in order: kinematics, firing, projectile flight with
//! continuous collision against the start-of-tick bodies, eliminations and
//! rewards. Every elimination of a tick is decided before any is applied,
//! so two players can take each other out on the same tick.

mod service;

pub use service::{ArenaEnvironment, ArenaFactory, ENV_IMPLEMENTATION};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const DEFAULT_ARENA_SIZE: f64 = 100.0;
pub const DEFAULT_MAX_TICK: u64 = 600;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArenaError {
    #[error("invalid arena config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("could not place {0} players without overlap")]
    Placement(usize),
}

fn config_err(field: &str, reason: &str) -> ArenaError {
    ArenaError::Config { field: field.into(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub arena_size: f64,
    pub teams: Vec<usize>,
    pub player_radius: f64,
    pub ball_radius: f64,
    pub shot_velocity: f64,
    pub shot_cooldown: u32,
    pub move_speed: f64,
    pub turn_speed: f64,
    pub fov_half_angle: f64,
    pub fov_range: f64,
    pub max_tick: u64,
    pub seed: u64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self::for_size(DEFAULT_ARENA_SIZE)
    }
}

impl ArenaConfig {
    /// Defaults scaled to an arena of side `s`.
    pub fn for_size(s: f64) -> Self {
        Self {
            arena_size: s,
            teams: vec![1, 1],
            player_radius: 2.0 * s / DEFAULT_ARENA_SIZE,
            ball_radius: 0.5 * s / DEFAULT_ARENA_SIZE,
            shot_velocity: s / 60.0,
            shot_cooldown: 10,
            move_speed: s / 200.0,
            turn_speed: 0.1,
            fov_half_angle: PI / 3.0,
            fov_range: s / 2.0,
            max_tick: DEFAULT_MAX_TICK,
            seed: 0,
        }
    }

    /// Builds a config from `env_config`, field by field over the defaults
    /// for its arena size. `max_tick` and `seed` come from the trial unless
    /// the document overrides them.
    pub fn from_env_config(doc: &Value, max_tick: u64, seed: u64) -> Result<Self, ArenaError> {
        let empty = Map::new();
        let obj = match doc {
            Value::Object(o) => o,
            Value::Null => &empty,
            _ => return Err(config_err("$", "expected an object")),
        };
        let size = match obj.get("arena_size") {
            Some(v) => v.as_f64().ok_or_else(|| config_err("arena_size", "expected a number"))?,
            None => DEFAULT_ARENA_SIZE,
        };
        let mut base = serde_json::to_value(Self::for_size(size)).expect("plain struct");
        base["max_tick"] = json!(max_tick);
        base["seed"] = json!(seed);
        for (k, v) in obj {
            if base.get(k).is_none() {
                return Err(config_err(k, "unknown field"));
            }
            base[k.as_str()] = v.clone();
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| {
            let field = obj.keys().find(|k| {
                let mut probe = serde_json::to_value(Self::for_size(size)).expect("plain struct");
                probe[k.as_str()] = obj[k.as_str()].clone();
                serde_json::from_value::<Self>(probe).is_err()
            });
            config_err(field.map_or("$", |s| s.as_str()), &e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ArenaError> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_err(name, "must be positive"))
            }
        };
        positive(self.arena_size, "arena_size")?;
        positive(self.player_radius, "player_radius")?;
        positive(self.ball_radius, "ball_radius")?;
        positive(self.shot_velocity, "shot_velocity")?;
        positive(self.move_speed, "move_speed")?;
        positive(self.turn_speed, "turn_speed")?;
        positive(self.fov_range, "fov_range")?;
        if self.arena_size <= 4.0 * self.player_radius {
            return Err(config_err("arena_size", "must exceed 4 player radii"));
        }
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= PI) {
            return Err(config_err("fov_half_angle", "must lie in (0, π]"));
        }
        if self.shot_cooldown < 1 {
            return Err(config_err("shot_cooldown", "must be at least 1"));
        }
        if self.max_tick < 1 {
            return Err(config_err("max_tick", "must be at least 1"));
        }
        if self.teams.iter().sum::<usize>() < 2 {
            return Err(config_err("teams", "need at least two players"));
        }
        if self.teams.contains(&0) {
            return Err(config_err("teams", "empty team"));
        }
        Ok(())
    }

    pub fn player_count(&self) -> usize {
        self.teams.iter().sum()
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π.
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Expresses world offset `(dx, dy)` in a frame whose +x axis points along `theta`.
pub fn to_local(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Rotates a local vector back into the world frame.
pub fn to_world(lx: f64, ly: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (lx * c - ly * s, lx * s + ly * c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArenaAction {
    pub fire: bool,
    pub strafe: f64,
    pub forward: f64,
    pub rotate: f64,
}

impl ArenaAction {
    /// Parses an `arena_action` value, clamping the axes into `[−1, 1]`.
    pub fn from_value(v: &Value) -> Option<Self> {
        let a: Self = serde_json::from_value(v.clone()).ok()?;
        let clamp = |x: f64| if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 };
        Some(Self { fire: a.fire, strafe: clamp(a.strafe), forward: clamp(a.forward), rotate: clamp(a.rotate) })
    }

    pub fn to_value(&self) -> Value {
        json!({"fire": self.fire, "strafe": self.strafe, "forward": self.forward, "rotate": self.rotate})
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlayerState {
    pub id: usize,
    pub name: String,
    pub team: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// Displacement applied on the last tick.
    pub vx: f64,
    pub vy: f64,
    pub alive: bool,
    pub cooldown: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projectile {
    pub owner: usize,
    pub team: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Elimination {
    pub victim: usize,
    pub shooter: usize,
}

/// Per-player reward bookkeeping for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRewards {
    /// Players that paid the time penalty.
    pub time_penalized: Vec<usize>,
    pub eliminations: Vec<Elimination>,
    /// Combined reward per player, in player order; only players that were
    /// alive at the start of the tick or scored appear.
    pub combined: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub rewards: StepRewards,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArenaState {
    pub config: ArenaConfig,
    pub players: Vec<PlayerState>,
    pub projectiles: Vec<Projectile>,
    /// Completed steps.
    pub steps: u64,
    /// Opponents per team at trial start.
    opponents: Vec<usize>,
}

impl ArenaState {
    /// Places players with default names `p0`, `p1`, …
    pub fn new(config: ArenaConfig) -> Result<Self, ArenaError> {
        let names = (0..config.player_count()).map(|i| format!("p{i}")).collect();
        Self::with_names(config, names)
    }

    pub fn with_names(config: ArenaConfig, names: Vec<String>) -> Result<Self, ArenaError> {
        config.validate()?;
        let n = config.player_count();
        if names.len() != n {
            return Err(config_err("teams", &format!("team sizes need {n} players, got {}", names.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (lo, hi) = (config.player_radius, config.arena_size - config.player_radius);
        let min_d2 = (4.0 * config.player_radius).powi(2);
        let mut players: Vec<PlayerState> = Vec::with_capacity(n);
        let teams = config.teams.iter().enumerate().flat_map(|(t, &k)| std::iter::repeat_n(t, k));
        for (id, (team, name)) in teams.zip(names).enumerate() {
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let x = rng.random_range(lo..=hi);
                let y = rng.random_range(lo..=hi);
                if players.iter().all(|p| (p.x - x).powi(2) + (p.y - y).powi(2) >= min_d2) {
                    placed = Some((x, y));
                    break;
                }
            }
            let (x, y) = placed.ok_or(ArenaError::Placement(n))?;
            let theta = rng.random_range(-PI..PI);
            players.push(PlayerState { id, name, team, x, y, theta, vx: 0.0, vy: 0.0, alive: true, cooldown: 0 });
        }
        let opponents = (0..config.teams.len()).map(|t| n - config.teams[t]).collect();
        Ok(Self { config, players, projectiles: Vec::new(), steps: 0, opponents })
    }

    pub fn opponents_of(&self, player: usize) -> usize {
        self.opponents[self.players[player].team]
    }

    pub fn alive_teams(&self) -> usize {
        let mut teams: Vec<usize> = self.players.iter().filter(|p| p.alive).map(|p| p.team).collect();
        teams.sort_unstable();
        teams.dedup();
        teams.len()
    }

    pub fn is_terminal(&self) -> bool {
        self.alive_teams() <= 1 || self.steps >= self.config.max_tick
    }

    pub fn time_penalty(&self) -> f64 {
        -1.0 / self.config.max_tick as f64
    }

    /// Advances one tick. `actions[i]` drives player `i`; dead players'
    /// actions are ignored.
    pub fn step(&mut self, actions: &[ArenaAction]) -> StepOutcome {
        let c = self.config.clone();
        let start: Vec<(f64, f64, bool)> = self.players.iter().map(|p| (p.x, p.y, p.alive)).collect();
        let none = ArenaAction::default();

        // Kinematics. Translation uses the heading held at the start of the tick.
        for p in self.players.iter_mut() {
            p.vx = 0.0;
            p.vy = 0.0;
            if !p.alive {
                continue;
            }
            let a = actions.get(p.id).unwrap_or(&none);
            let (dx, dy) = to_world(a.forward * c.move_speed, a.strafe * c.move_speed, p.theta);
            let nx = (p.x + dx).clamp(c.player_radius, c.arena_size - c.player_radius);
            let ny = (p.y + dy).clamp(c.player_radius, c.arena_size - c.player_radius);
            p.vx = nx - p.x;
            p.vy = ny - p.y;
            p.x = nx;
            p.y = ny;
        }

        // Firing from the start-of-tick pose.
        for (i, p) in self.players.iter_mut().enumerate() {
            if !p.alive {
                continue;
            }
            p.cooldown = p.cooldown.saturating_sub(1);
            let a = actions.get(i).unwrap_or(&none);
            if a.fire && p.cooldown == 0 {
                let (hx, hy) = (p.theta.cos(), p.theta.sin());
                let muzzle = c.player_radius + c.ball_radius;
                self.projectiles.push(Projectile {
                    owner: i,
                    team: p.team,
                    x: start[i].0 + hx * muzzle,
                    y: start[i].1 + hy * muzzle,
                    vx: c.shot_velocity * hx + p.vx,
                    vy: c.shot_velocity * hy + p.vy,
                });
                p.cooldown = c.shot_cooldown;
            }
        }

        // Rotation takes effect after the shot.
        for p in self.players.iter_mut().filter(|p| p.alive) {
            let a = actions.get(p.id).unwrap_or(&none);
            p.theta = wrap_angle(p.theta + a.rotate * c.turn_speed);
        }

        // Flight: first contact along each segment, against start-of-tick bodies.
        let reach = c.player_radius + c.ball_radius;
        let mut hits: Vec<(f64, usize, usize)> = Vec::new();
        for (k, b) in self.projectiles.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (j, &(px, py, alive)) in start.iter().enumerate() {
                if !alive || self.players[j].team == b.team {
                    continue;
                }
                if let Some(s) = segment_circle(b.x, b.y, b.vx, b.vy, px, py, reach) {
                    if best.is_none_or(|(bs, _)| s < bs) {
                        best = Some((s, j));
                    }
                }
            }
            if let Some((s, j)) = best {
                hits.push((s, k, j));
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut eliminations = Vec::new();
        let mut spent = vec![false; self.projectiles.len()];
        for &(_, k, j) in &hits {
            spent[k] = true;
            if self.players[j].alive {
                self.players[j].alive = false;
                eliminations.push(Elimination { victim: j, shooter: self.projectiles[k].owner });
            }
        }
        let s = c.arena_size;
        let mut k = 0;
        self.projectiles.retain_mut(|b| {
            let keep = !spent[k];
            k += 1;
            b.x += b.vx;
            b.y += b.vy;
            keep && (0.0..=s).contains(&b.x) && (0.0..=s).contains(&b.y)
        });

        self.steps += 1;
        let rewards = self.rewards(&start, eliminations);
        StepOutcome { rewards, terminal: self.is_terminal() }
    }

    fn rewards(&self, start: &[(f64, f64, bool)], eliminations: Vec<Elimination>) -> StepRewards {
        let penalty = self.time_penalty();
        let mut kills = vec![0usize; self.players.len()];
        for e in &eliminations {
            kills[e.shooter] += 1;
        }
        let mut out = StepRewards { eliminations, ..Default::default() };
        for (i, p) in self.players.iter().enumerate() {
            let was_alive = start[i].2;
            if !was_alive && kills[i] == 0 {
                continue;
            }
            let mut r = 0.0;
            if was_alive && p.alive {
                r += penalty;
                out.time_penalized.push(i);
            }
            if was_alive && !p.alive {
                r += -1.0;
            }
            if kills[i] > 0 {
                r += kills[i] as f64 / self.opponents_of(i) as f64;
            }
            out.combined.push((i, r));
        }
        out
    }

    /// Players and projectiles `player` can see, in its own frame.
    pub fn visible_from(&self, player: usize) -> (Vec<Value>, Vec<Value>) {
        let me = &self.players[player];
        if !me.alive {
            return (Vec::new(), Vec::new());
        }
        let c = &self.config;
        let sees = |dx: f64, dy: f64| {
            let (lx, ly) = to_local(dx, dy, me.theta);
            let d = lx.hypot(ly);
            let visible = d <= c.fov_range && ly.atan2(lx).abs() <= c.fov_half_angle;
            visible.then_some((lx, ly))
        };
        let mut players = Vec::new();
        for (j, o) in self.players.iter().enumerate() {
            if j == player {
                continue;
            }
            if let Some((lx, ly)) = sees(o.x - me.x, o.y - me.y) {
                players.push(json!({
                    "x": lx,
                    "y": ly,
                    "theta": wrap_angle(o.theta - me.theta),
                    "opponent": o.team != me.team,
                    "alive": o.alive,
                }));
            }
        }
        let mut projectiles = Vec::new();
        for b in &self.projectiles {
            if let Some((lx, ly)) = sees(b.x - me.x, b.y - me.y) {
                let (lvx, lvy) = to_local(b.vx - me.vx, b.vy - me.vy, me.theta);
                projectiles.push(json!({"x": lx, "y": ly, "vx": lvx, "vy": lvy}));
            }
        }
        (players, projectiles)
    }

    /// `arena_obs` v1 for one player.
    pub fn observation(&self, player: usize) -> Value {
        let me = &self.players[player];
        let (players, projectiles) = self.visible_from(player);
        json!({
            "self": {"x": me.x, "y": me.y, "theta": me.theta, "alive": me.alive},
            "visible_players": players,
            "visible_projectiles": projectiles,
            "tick_id": self.steps,
        })
    }

    /// `arena_world` v1: the full state, for observers.
    pub fn world(&self) -> Value {
        json!({
            "arena_size": self.config.arena_size,
            "players": self.players.iter().map(|p| json!({
                "name": p.name, "team": p.team, "x": p.x, "y": p.y, "theta": p.theta, "alive": p.alive,
            })).collect::<Vec<_>>(),
            "projectiles": self.projectiles.iter().map(|b| json!({
                "owner": self.players[b.owner].name, "team": b.team, "x": b.x, "y": b.y, "vx": b.vx, "vy": b.vy,
            })).collect::<Vec<_>>(),
            "tick_id": self.steps,
        })
    }
}

/// Smallest `s ∈ [0, 1]` with `|p + s·v − c| ≤ r`, if any.
pub fn segment_circle(px: f64, py: f64, vx: f64, vy: f64, cx: f64, cy: f64, r: f64) -> Option<f64> {
    let (fx, fy) = (px - cx, py - cy);
    let cc = fx * fx + fy * fy - r * r;
    if cc <= 0.0 {
        return Some(0.0);
    }
    let a = vx * vx + vy * vy;
    if a == 0.0 {
        return None;
    }
    let b = 2.0 * (fx * vx + fy * vy);
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = (-b - disc.sqrt()) / (2.0 * a);
    (0.0..=1.0).contains(&s).then_some(s)
}
