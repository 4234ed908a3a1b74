//! Linear softmax policy over the discrete action grid, trained with REINFORCE.

use std::f64::consts::PI;

use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::arena::ArenaAction;
use crate::protocol::{Envelope, MsgType, ParticipantId};

pub const GRID_CELLS: usize = 54;
pub const FEATURES: usize = 16;
pub const SCORE_CLAMP: f64 = 30.0;
pub const DEFAULT_GAMMA: f64 = 0.99;
/// Episodes run ~600 steps and the gradient is summed, so the step stays small.
pub const DEFAULT_LR: f64 = 0.003;
const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite score for cell {0}")]
    NonFiniteScore(usize),
    #[error("non-finite feature {0}")]
    NonFiniteFeature(usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

// ---------------------------------------------------------------------------
// Action grid
// ---------------------------------------------------------------------------

/// One cell of {fire} × {strafe} × {forward} × {rotate}, axes in {−1, 0, 1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridCell {
    pub fire: bool,
    pub strafe: i8,
    pub forward: i8,
    pub rotate: i8,
}

impl GridCell {
    /// Row-major index, fire slowest.
    pub fn index(self) -> usize {
        let ax = |v: i8| (v + 1) as usize;
        usize::from(self.fire) * 27 + ax(self.strafe) * 9 + ax(self.forward) * 3 + ax(self.rotate)
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < GRID_CELLS, "cell {i} out of range");
        let ax = |v: usize| v as i8 - 1;
        Self { fire: i >= 27, strafe: ax((i % 27) / 9), forward: ax((i % 9) / 3), rotate: ax(i % 3) }
    }

    pub fn action(self) -> ArenaAction {
        ArenaAction {
            fire: self.fire,
            strafe: self.strafe as f64,
            forward: self.forward as f64,
            rotate: self.rotate as f64,
        }
    }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Normalization constants taken from the arena config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureScale {
    pub arena_size: f64,
    pub fov_range: f64,
}

fn num(v: &Value, key: &str) -> f64 {
    v.get(key).and_then(Value::as_f64).unwrap_or(0.0)
}

fn nearest<'a>(items: impl Iterator<Item = &'a Value>) -> Option<&'a Value> {
    items.min_by(|a, b| {
        let da = num(a, "x").hypot(num(a, "y"));
        let db = num(b, "x").hypot(num(b, "y"));
        da.total_cmp(&db)
    })
}

/// Fixed-length feature vector for an `arena_obs` observation.
///
/// Layout: bias, x/S, y/S, cos θ, sin θ, alive, then the nearest living
/// opponent (present, range, bearing, |bearing|, cos and sin of its
/// relative heading), then the nearest projectile (present, range,
/// bearing, |bearing|). Ranges are divided by the FOV range and bearings
/// by π. Absent entities read as range = FOV range, bearing 0, flag 0.
pub fn features(obs: &Value, scale: FeatureScale) -> [f64; FEATURES] {
    let me = &obs["self"];
    let theta = num(me, "theta");
    let alive = me.get("alive").and_then(Value::as_bool).unwrap_or(false);
    let mut f = [0.0; FEATURES];
    f[0] = 1.0;
    f[1] = num(me, "x") / scale.arena_size;
    f[2] = num(me, "y") / scale.arena_size;
    f[3] = theta.cos();
    f[4] = theta.sin();
    f[5] = f64::from(u8::from(alive));

    let empty = Vec::new();
    let players = obs["visible_players"].as_array().unwrap_or(&empty);
    let opp = nearest(players.iter().filter(|p| {
        p.get("opponent").and_then(Value::as_bool).unwrap_or(false)
            && p.get("alive").and_then(Value::as_bool).unwrap_or(false)
    }));
    f[7] = 1.0;
    if let Some(o) = opp {
        let (x, y) = (num(o, "x"), num(o, "y"));
        let b = y.atan2(x) / PI;
        f[6] = 1.0;
        f[7] = x.hypot(y) / scale.fov_range;
        f[8] = b;
        f[9] = b.abs();
        f[10] = num(o, "theta").cos();
        f[11] = num(o, "theta").sin();
    }

    let projectiles = obs["visible_projectiles"].as_array().unwrap_or(&empty);
    f[13] = 1.0;
    if let Some(p) = nearest(projectiles.iter()) {
        let (x, y) = (num(p, "x"), num(p, "y"));
        let b = y.atan2(x) / PI;
        f[12] = 1.0;
        f[13] = x.hypot(y) / scale.fov_range;
        f[14] = b;
        f[15] = b.abs();
    }
    f
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    /// Row-major `GRID_CELLS × FEATURES`.
    pub weights: Vec<f64>,
    pub lr: f64,
    pub gamma: f64,
}

impl Default for PolicyModel {
    fn default() -> Self {
        Self::new(DEFAULT_LR, DEFAULT_GAMMA)
    }
}

/// One decision of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub features: [f64; FEATURES],
    pub cell: usize,
    pub log_prob: f64,
    pub reward: f64,
}

impl PolicyModel {
    pub fn new(lr: f64, gamma: f64) -> Self {
        Self { weights: vec![0.0; GRID_CELLS * FEATURES], lr, gamma }
    }

    /// Clamped linear scores.
    pub fn scores(&self, phi: &[f64; FEATURES]) -> Result<[f64; GRID_CELLS], ModelError> {
        if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature(i));
        }
        let mut s = [0.0; GRID_CELLS];
        for (a, out) in s.iter_mut().enumerate() {
            let row = &self.weights[a * FEATURES..(a + 1) * FEATURES];
            let z: f64 = row.iter().zip(phi).map(|(w, x)| w * x).sum();
            if z.is_nan() {
                return Err(ModelError::NonFiniteScore(a));
            }
            *out = z.clamp(-SCORE_CLAMP, SCORE_CLAMP);
        }
        Ok(s)
    }

    pub fn probabilities(&self, phi: &[f64; FEATURES]) -> Result<[f64; GRID_CELLS], ModelError> {
        Ok(softmax(&self.scores(phi)?))
    }

    /// Samples a cell; returns it with its log-probability.
    pub fn sample<R: Rng>(&self, phi: &[f64; FEATURES], rng: &mut R) -> Result<(usize, f64), ModelError> {
        let p = self.probabilities(phi)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = GRID_CELLS - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                cell = i;
                break;
            }
        }
        Ok((cell, p[cell].ln()))
    }

    pub fn log_prob(&self, phi: &[f64; FEATURES], cell: usize) -> Result<f64, ModelError> {
        Ok(self.probabilities(phi)?[cell].ln())
    }

    /// ∇_W log π(cell | φ) = (onehot(cell) − π) ⊗ φ.
    ///
    /// Exact away from the clamp; rows whose score is clamped contribute
    /// no gradient through their own weights.
    pub fn grad_log_prob(&self, phi: &[f64; FEATURES], cell: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.raw_scores(phi);
        let p = self.probabilities(phi)?;
        let mut g = vec![0.0; GRID_CELLS * FEATURES];
        for a in 0..GRID_CELLS {
            if raw[a].abs() > SCORE_CLAMP {
                continue;
            }
            let coef = f64::from(u8::from(a == cell)) - p[a];
            for (k, x) in phi.iter().enumerate() {
                g[a * FEATURES + k] = coef * x;
            }
        }
        Ok(g)
    }

    fn raw_scores(&self, phi: &[f64; FEATURES]) -> [f64; GRID_CELLS] {
        let mut s = [0.0; GRID_CELLS];
        for (a, out) in s.iter_mut().enumerate() {
            *out = self.weights[a * FEATURES..(a + 1) * FEATURES].iter().zip(phi).map(|(w, x)| w * x).sum();
        }
        s
    }

    /// One REINFORCE step over a completed episode; empty episodes are a no-op.
    pub fn update(&mut self, episode: &[EpisodeStep]) -> Result<(), ModelError> {
        if episode.is_empty() {
            return Ok(());
        }
        let rewards: Vec<f64> = episode.iter().map(|s| s.reward).collect();
        let g = normalized_returns(&returns_to_go(&rewards, self.gamma));
        let mut delta = vec![0.0; self.weights.len()];
        for (step, gt) in episode.iter().zip(&g) {
            if *gt == 0.0 {
                continue;
            }
            let grad = self.grad_log_prob(&step.features, step.cell)?;
            for (d, gr) in delta.iter_mut().zip(&grad) {
                *d += gt * gr;
            }
        }
        for (w, d) in self.weights.iter_mut().zip(&delta) {
            *w += self.lr * d;
        }
        Ok(())
    }

    // -- checkpoints ---------------------------------------------------------

    /// Named flat arrays: `weights`, `lr`, `gamma`.
    pub fn to_checkpoint(&self, name: &str) -> Envelope {
        let arrays = json!([
            {"name": "weights", "shape": [GRID_CELLS, FEATURES], "values": self.weights},
            {"name": "lr", "shape": [1], "values": [self.lr]},
            {"name": "gamma", "shape": [1], "values": [self.gamma]},
        ]);
        Envelope::new(MsgType::ModelCheckpoint, "", 0, ParticipantId::actor(name), json!({"arrays": arrays}))
    }

    pub fn from_checkpoint(env: &Envelope) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if env.msg_type != MsgType::ModelCheckpoint {
            return Err(bad("not a model_checkpoint frame"));
        }
        let arrays = env.payload["arrays"].as_array().ok_or_else(|| bad("missing arrays"))?;
        let get = |name: &str| -> Result<Vec<f64>, ModelError> {
            let a = arrays.iter().find(|a| a["name"] == name).ok_or_else(|| bad(&format!("missing `{name}`")))?;
            a["values"]
                .as_array()
                .ok_or_else(|| bad(&format!("`{name}` has no values")))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| bad(&format!("`{name}` holds a non-number"))))
                .collect()
        };
        let weights = get("weights")?;
        if weights.len() != GRID_CELLS * FEATURES {
            return Err(bad("weights have the wrong size"));
        }
        let scalar = |name: &str| get(name)?.first().copied().ok_or_else(|| bad(&format!("`{name}` is empty")));
        Ok(Self { weights, lr: scalar("lr")?, gamma: scalar("gamma")? })
    }

    pub fn save(&self, path: &std::path::Path, name: &str) -> std::io::Result<()> {
        let frame = crate::protocol::encode_frame(&self.to_checkpoint(name))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        std::fs::write(path, frame)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let (env, _) = crate::protocol::decode_frame(&bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&env)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64; GRID_CELLS]) -> [f64; GRID_CELLS] {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; GRID_CELLS];
    let mut z = 0.0;
    for (o, s) in p.iter_mut().zip(scores) {
        *o = (s - m).exp();
        z += *o;
    }
    for o in p.iter_mut() {
        *o /= z;
    }
    p
}

/// `G_t = Σ_{k≥t} γ^{k−t} r_k`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Zero mean, unit variance for episodes of two or more steps.
pub fn normalized_returns(g: &[f64]) -> Vec<f64> {
    if g.len() < 2 {
        return g.to_vec();
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.max(VAR_FLOOR).sqrt();
    g.iter().map(|x| (x - mean) / sd).collect()
}
