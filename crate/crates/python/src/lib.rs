//! Python bindings: wire frames, reward aggregation, local duels and log
//! replay. Structured values cross the boundary as JSON text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde_json::{json, Value};

use trialworks::arena::ENV_IMPLEMENTATION;
use trialworks::builtin::{local_orchestrator, PLAYER_CLASS};
use trialworks::cli::{open_log, replay_totals};
use trialworks::orchestrator::rewards::aggregate;
use trialworks::orchestrator::OrchestratorConfig;
use trialworks::protocol::{decode_frame, encode_frame, ActorSlot, Envelope, ParticipantId, Reward, TrialParams};

/// Frames an envelope given as JSON text.
pub fn frame_from_json(text: &str) -> Result<Vec<u8>, String> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| e.to_string())?;
    encode_frame(&env).map_err(|e| e.to_string())
}

/// Decodes one frame to canonical JSON text and the bytes it used.
pub fn frame_to_json(bytes: &[u8]) -> Result<(String, usize), String> {
    let (env, used) = decode_frame(bytes).map_err(|e| e.to_string())?;
    let text = serde_json::to_string(&env).map_err(|e| e.to_string())?;
    Ok((text, used))
}

/// Confidence-weighted mean of `(value, confidence)` pairs and the total confidence.
pub fn weighted(pairs: &[(f64, f64)]) -> Result<(f64, f64), String> {
    let rewards: Vec<Reward> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(value, confidence))| Reward {
            value,
            confidence,
            source: ParticipantId::actor(format!("s{i}")),
            target_actor: "a".into(),
            target_tick: 0,
        })
        .collect();
    for r in &rewards {
        r.validate().map_err(|field| format!("invalid reward {field}"))?;
    }
    let agg = aggregate("a", 0, &rewards).ok_or("no rewards")?;
    Ok((agg.value, agg.total_confidence))
}

/// One-on-one arena trial between two built-in implementations.
pub fn duel(a: &str, b: &str, max_tick: u64, seed: u64, log_dir: Option<PathBuf>) -> Result<Value, String> {
    let mut params = TrialParams::new(
        ENV_IMPLEMENTATION,
        vec![ActorSlot::service("p0", PLAYER_CLASS, a), ActorSlot::service("p1", PLAYER_CLASS, b)],
        max_tick,
    );
    params.env_config = json!({"teams": [1, 1]});
    params.seed = seed;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let config = OrchestratorConfig { log_dir, reproducible: true, ..OrchestratorConfig::default() };
        let (orch, _builtins) = local_orchestrator(config);
        let (id, s) = orch.run_trial(params).await.map_err(|e| e.to_string())?;
        Ok(json!({
            "trial_id": id,
            "reason": s.reason,
            "total_ticks": s.total_ticks,
            "totals": s.totals,
            "implementations": s.implementations,
            "log_path": s.log_path.map(|p| p.to_string_lossy().into_owned()),
        }))
    })
}

pub fn log_totals(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let replay = open_log(path).map_err(|e| e.to_string())?;
    Ok(replay_totals(&replay))
}

#[pyfunction]
fn encode(py: Python<'_>, envelope_json: &str) -> PyResult<Py<PyBytes>> {
    let bytes = frame_from_json(envelope_json).map_err(PyValueError::new_err)?;
    Ok(PyBytes::new(py, &bytes).unbind())
}

#[pyfunction]
fn decode(frame: &[u8]) -> PyResult<(String, usize)> {
    frame_to_json(frame).map_err(PyValueError::new_err)
}

#[pyfunction]
fn aggregate_rewards(pairs: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    weighted(&pairs).map_err(PyValueError::new_err)
}

/// Returns the trial summary as JSON text.
#[pyfunction]
#[pyo3(signature = (a, b, max_tick=600, seed=0, log_dir=None))]
fn run_duel(py: Python<'_>, a: String, b: String, max_tick: u64, seed: u64, log_dir: Option<PathBuf>) -> PyResult<String> {
    let summary = py.detach(|| duel(&a, &b, max_tick, seed, log_dir)).map_err(PyRuntimeError::new_err)?;
    Ok(summary.to_string())
}

#[pyfunction]
fn replay_log(path: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    log_totals(&path).map_err(PyValueError::new_err)
}

#[pymodule]
fn trialworks_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(run_duel, m)?)?;
    m.add_function(wrap_pyfunction!(replay_log, m)?)?;
    Ok(())
}
