use super::*;
use crate::arena::{ArenaState, ENV_IMPLEMENTATION};
use crate::protocol::{actor_class, validate_against_schema};
use proptest::prelude::*;
use rand::Rng;
use serde_json::json;
use std::f64::consts::PI;

fn scale() -> FeatureScale {
    FeatureScale { arena_size: 100.0, fov_range: 50.0 }
}

fn obs_with(players: Value, projectiles: Value) -> Value {
    json!({
        "self": {"x": 50.0, "y": 50.0, "theta": 0.0, "alive": true},
        "visible_players": players,
        "visible_projectiles": projectiles,
        "tick_id": 3,
    })
}

fn setup(name: &str) -> ActorSetup {
    ActorSetup {
        trial_id: "t".into(),
        actor_name: name.into(),
        class_name: "player".into(),
        implementation: RANDOM_V1.into(),
        seed: 11,
        env_config: json!({}),
    }
}

#[test]
fn grid_is_a_bijection() {
    let mut seen = std::collections::HashSet::new();
    for i in 0..GRID_CELLS {
        let c = GridCell::from_index(i);
        assert_eq!(c.index(), i);
        assert!(seen.insert(c));
    }
    assert_eq!(GridCell { fire: false, strafe: -1, forward: -1, rotate: -1 }.index(), 0);
    assert_eq!(GridCell { fire: true, strafe: 1, forward: 1, rotate: 1 }.index(), 53);
    assert_eq!(GridCell { fire: false, strafe: 0, forward: 0, rotate: 1 }.index(), 14);
}

#[test]
fn random_is_reproducible_and_valid() {
    let schema = actor_class("player").unwrap().action_schema;
    let mut a = RandomAgent::new(5);
    let mut b = RandomAgent::new(5);
    for _ in 0..200 {
        let (x, y) = (a.draw(), b.draw());
        assert_eq!(x, y);
        validate_against_schema(&x.action().to_value(), &schema).unwrap();
    }
}

#[test]
fn random_is_uniform_over_cells() {
    let mut agent = RandomAgent::new(2024);
    let mut counts = [0usize; GRID_CELLS];
    for _ in 0..54_000 {
        counts[agent.draw().index()] += 1;
    }
    // binomial(54000, 1/54): sd ≈ 31, so ±120 is close to 4 sd
    for (i, c) in counts.iter().enumerate() {
        assert!((880..=1120).contains(c), "cell {i} drew {c}");
    }
}

#[test]
fn heuristic_fires_at_target_ahead() {
    let h = HeuristicAgent::new(&ArenaConfig::default());
    let obs = obs_with(json!([{"x": 20.0, "y": 0.0, "theta": 0.0, "opponent": true, "alive": true}]), json!([]));
    let a = h.decide(&obs);
    assert!(a.fire);
    assert_eq!(a.rotate, 0.0);
    assert_eq!(a.forward, 1.0);
}

#[test]
fn heuristic_scans_when_alone() {
    let h = HeuristicAgent::new(&ArenaConfig::default());
    let a = h.decide(&obs_with(json!([]), json!([])));
    assert_eq!(a, ArenaAction { rotate: 1.0, ..Default::default() });
    // dead or friendly players do not count as targets
    let obs = obs_with(
        json!([
            {"x": 20.0, "y": 0.0, "theta": 0.0, "opponent": false, "alive": true},
            {"x": 10.0, "y": 0.0, "theta": 0.0, "opponent": true, "alive": false},
        ]),
        json!([]),
    );
    assert_eq!(h.decide(&obs).rotate, 1.0);
}

#[test]
fn heuristic_turns_toward_negative_bearing() {
    let cfg = ArenaConfig::default();
    let mut st = ArenaState::new(cfg.clone()).unwrap();
    st.players[0].x = 50.0;
    st.players[0].y = 50.0;
    st.players[0].theta = 0.0;
    // 20 units away at bearing −π/4
    st.players[1].x = 50.0 + 20.0 * (PI / 4.0).cos();
    st.players[1].y = 50.0 - 20.0 * (PI / 4.0).sin();
    let obs = st.observation(0);
    let seen = &obs["visible_players"][0];
    let bearing = seen["y"].as_f64().unwrap().atan2(seen["x"].as_f64().unwrap());
    assert!((bearing + PI / 4.0).abs() < 1e-12);
    let a = HeuristicAgent::new(&cfg).decide(&obs);
    assert!(a.rotate < 0.0);
    assert!(!a.fire);
}

#[test]
fn heuristic_dodges_up_close() {
    let h = HeuristicAgent::new(&ArenaConfig::default());
    let obs = obs_with(json!([{"x": 10.0, "y": 0.0, "theta": PI, "opponent": true, "alive": true}]), json!([]));
    let a = h.decide(&obs);
    assert_eq!(a.forward, 0.0);
    assert_eq!(a.strafe.abs(), 1.0);
}

#[test]
fn features_encode_absent_entities() {
    let f = features(&obs_with(json!([]), json!([])), scale());
    assert_eq!(f[0], 1.0);
    assert_eq!((f[6], f[7], f[8], f[9]), (0.0, 1.0, 0.0, 0.0));
    assert_eq!((f[12], f[13], f[14], f[15]), (0.0, 1.0, 0.0, 0.0));
    assert_eq!(f[5], 1.0);
}

#[test]
fn features_pick_nearest_opponent() {
    let obs = obs_with(
        json!([
            {"x": 0.0, "y": 30.0, "theta": 0.0, "opponent": true, "alive": true},
            {"x": 10.0, "y": 0.0, "theta": PI / 2.0, "opponent": true, "alive": true},
        ]),
        json!([{"x": 0.0, "y": -5.0, "vx": 1.0, "vy": 0.0}]),
    );
    let f = features(&obs, scale());
    assert_eq!((f[6], f[7], f[8]), (1.0, 0.2, 0.0));
    assert!((f[11] - 1.0).abs() < 1e-12);
    assert_eq!((f[12], f[13], f[14], f[15]), (1.0, 0.1, -0.5, 0.5));
}

#[test]
fn zero_model_is_uniform() {
    let m = PolicyModel::default();
    let phi = features(&obs_with(json!([]), json!([])), scale());
    let p = m.probabilities(&phi).unwrap();
    for pi in p {
        assert!((pi - 1.0 / 54.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, lp) = m.sample(&phi, &mut rng).unwrap();
    assert!((lp + 54f64.ln()).abs() < 1e-12);
}

#[test]
fn huge_scores_are_clamped() {
    let mut m = PolicyModel::default();
    m.weights[0] = 1e300;
    let mut phi = [0.0; FEATURES];
    phi[0] = 1.0;
    let s = m.scores(&phi).unwrap();
    assert_eq!(s[0], 30.0);
    let p = m.probabilities(&phi).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    m.weights[0] = f64::NAN;
    assert_eq!(m.scores(&phi), Err(ModelError::NonFiniteScore(0)));
    phi[3] = f64::INFINITY;
    assert_eq!(m.scores(&phi), Err(ModelError::NonFiniteFeature(3)));
}

#[test]
fn zero_rewards_leave_weights() {
    let mut m = PolicyModel::default();
    m.weights.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
    let before = m.clone();
    let ep: Vec<EpisodeStep> = (0..5)
        .map(|t| EpisodeStep { features: [0.5; FEATURES], cell: t * 7, log_prob: 0.0, reward: 0.0 })
        .collect();
    m.update(&ep).unwrap();
    assert_eq!(m, before);
    m.update(&[]).unwrap();
    assert_eq!(m, before);
}

#[test]
fn gamma_zero_returns_are_rewards() {
    let r = [0.5, -1.0, 2.0, 0.25];
    assert_eq!(returns_to_go(&r, 0.0), r.to_vec());
    assert_eq!(returns_to_go(&[1.0, 1.0], 0.5), vec![1.5, 1.0]);
}

#[test]
fn normalized_returns_are_standardized() {
    let g = normalized_returns(&[1.0, 2.0, 3.0, 4.0]);
    let mean: f64 = g.iter().sum::<f64>() / 4.0;
    let var: f64 = g.iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    assert_eq!(normalized_returns(&[3.0]), vec![3.0]);
}

#[test]
fn single_step_update_matches_closed_form() {
    let mut m = PolicyModel::new(0.01, 0.99);
    m.weights.iter_mut().enumerate().for_each(|(i, w)| *w = ((i * 7919) % 101) as f64 / 500.0 - 0.1);
    let phi: [f64; FEATURES] = std::array::from_fn(|k| (k as f64 * 0.3).cos());
    let cell = 31;
    let reward = 0.75;
    let p = m.probabilities(&phi).unwrap();
    let before = m.weights.clone();
    m.update(&[EpisodeStep { features: phi, cell, log_prob: p[cell].ln(), reward }]).unwrap();
    for a in 0..GRID_CELLS {
        for k in 0..FEATURES {
            let onehot = if a == cell { 1.0 } else { 0.0 };
            let want = before[a * FEATURES + k] + 0.01 * reward * (onehot - p[a]) * phi[k];
            assert!((m.weights[a * FEATURES + k] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut m = PolicyModel::new(0.02, 0.9);
    m.weights.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 1e-3 - 0.4);
    let env = m.to_checkpoint("learner");
    assert_eq!(PolicyModel::from_checkpoint(&env).unwrap(), m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path, "learner").unwrap();
    assert_eq!(PolicyModel::load(&path).unwrap(), m);
    std::fs::write(&path, b"junk").unwrap();
    assert!(PolicyModel::load(&path).is_err());
}

#[test]
fn learner_freezes() {
    let learner = Learner::default();
    learner.set_frozen(true);
    let ep = [EpisodeStep { features: [1.0; FEATURES], cell: 0, log_prob: 0.0, reward: 1.0 }];
    learner.update(&ep).unwrap();
    assert_eq!(learner.updates(), 0);
    learner.set_frozen(false);
    learner.update(&ep).unwrap();
    assert_eq!(learner.updates(), 1);
    assert_ne!(learner.snapshot(), PolicyModel::default());
}

#[test]
fn reinforce_agent_attaches_rewards_by_tick() {
    let learner = Arc::new(Learner::default());
    let mut agent = ReinforceAgent::new(learner.clone(), scale(), 3, "a");
    let obs = obs_with(json!([]), json!([]));
    for t in 0..3 {
        let mut ctx = ActorContext::new(t, "a");
        agent.act(&mut ctx, &obs).unwrap();
    }
    let agg = |t: u64, v: f64| AggregatedReward {
        actor: "a".into(),
        target_tick: t,
        value: v,
        total_confidence: 1.0,
        sources: vec![],
    };
    agent.on_reward(&agg(1, 0.5));
    agent.on_reward(&agg(1, 0.25));
    let ep = agent.episode();
    assert_eq!(ep.iter().map(|s| s.reward).collect::<Vec<_>>(), vec![0.0, 0.25, 0.0]);
    agent.end("max_tick");
    assert_eq!(learner.updates(), 1);
}

#[test]
fn factories_honour_env_config() {
    let mut s = setup("p");
    s.env_config = json!({"arena_size": 200.0, "teams": [2, 2]});
    assert!(HeuristicFactory.create(&s).is_ok());
    s.env_config = json!({"arena_size": "big"});
    assert!(HeuristicFactory.create(&s).is_err());
    assert_eq!(ENV_IMPLEMENTATION, "quack_arena_v1");
}

#[test]
fn seeds_differ_per_actor() {
    assert_ne!(actor_seed(1, "a"), actor_seed(1, "b"));
    assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

/// Central finite difference of `log π(cell|φ)` in every weight.
fn numeric_grad(m: &PolicyModel, phi: &[f64; FEATURES], cell: usize) -> Vec<f64> {
    let h = 1e-5;
    let mut g = vec![0.0; m.weights.len()];
    let mut probe = m.clone();
    for i in 0..m.weights.len() {
        let w = m.weights[i];
        probe.weights[i] = w + h;
        let up = probe.log_prob(phi, cell).unwrap();
        probe.weights[i] = w - h;
        let down = probe.log_prob(phi, cell).unwrap();
        probe.weights[i] = w;
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let mut m = PolicyModel::default();
        m.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let phi: [f64; FEATURES] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let cell = rng.random_range(0..GRID_CELLS);
        let a = m.grad_log_prob(&phi, cell).unwrap();
        let n = numeric_grad(&m, &phi, cell);
        let max_diff = a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max abs diff {max_diff}");
    }
}

// ---------------------------------------------------------------------------
// Swap compatibility
// ---------------------------------------------------------------------------

fn finite() -> impl Strategy<Value = f64> {
    -1e3f64..1e3
}

fn angle() -> impl Strategy<Value = f64> {
    -PI..PI
}

prop_compose! {
    fn seen_player()(x in finite(), y in finite(), th in angle(), opp in any::<bool>(), alive in any::<bool>()) -> Value {
        json!({"x": x, "y": y, "theta": th, "opponent": opp, "alive": alive})
    }
}

prop_compose! {
    fn seen_projectile()(x in finite(), y in finite(), vx in finite(), vy in finite()) -> Value {
        json!({"x": x, "y": y, "vx": vx, "vy": vy})
    }
}

prop_compose! {
    fn observation()(
        x in finite(), y in finite(), th in angle(), alive in any::<bool>(),
        players in prop::collection::vec(seen_player(), 0..5),
        projectiles in prop::collection::vec(seen_projectile(), 0..5),
        tick in 0u64..10_000,
    ) -> Value {
        json!({
            "self": {"x": x, "y": y, "theta": th, "alive": alive},
            "visible_players": players,
            "visible_projectiles": projectiles,
            "tick_id": tick,
        })
    }
}

proptest! {
    #[test]
    fn every_implementation_accepts_any_valid_observation(obs in observation(), seed in any::<u64>()) {
        let class = actor_class("player").unwrap();
        prop_assert!(validate_against_schema(&obs, &class.observation_schema).is_ok());
        let learner = Arc::new(Learner::default());
        let mut s = setup("p");
        s.seed = seed;
        let mut agents: Vec<Box<dyn Actor>> = vec![
            RandomFactory.create(&s).unwrap(),
            HeuristicFactory.create(&s).unwrap(),
            ReinforceFactory { learner }.create(&s).unwrap(),
        ];
        for agent in agents.iter_mut() {
            let mut ctx = ActorContext::new(0, "p");
            let action = agent.act(&mut ctx, &obs).unwrap();
            prop_assert!(validate_against_schema(&action, &class.action_schema).is_ok(), "{action}");
        }
        let f = features(&obs, scale());
        prop_assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn policy_is_a_distribution(ws in prop::collection::vec(-50.0f64..50.0, GRID_CELLS * FEATURES), obs in observation()) {
        let m = PolicyModel { weights: ws, ..Default::default() };
        let p = m.probabilities(&features(&obs, scale())).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }
}
