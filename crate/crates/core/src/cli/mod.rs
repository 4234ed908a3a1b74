//! The `tw` controller: start, watch and terminate trials, run headless
//! campaigns, replay logs and print metrics.
//!
//! Every command writes its report to a caller-supplied sink and returns a
//! [`CliError`] whose [`CliError::exit_code`] is the process status.

pub mod client;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

pub use client::{Controller, EndedReport, Event};

use crate::datalog::{Replay, ReplayError};
use crate::metrics::{MetricsRow, MetricsSink};
use crate::orchestrator::rewards::totals_by_actor;
use crate::protocol::{TrialParams, TrialPhase};

pub const DEFAULT_ORCHESTRATOR: &str = "127.0.0.1:9000";
pub const DEFAULT_METRICS: &str = "127.0.0.1:9002";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot reach orchestrator: {0}")]
    Connect(String),
    #[error("invalid config at {path}: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error("trial {0} failed setup")]
    SetupFailed(String),
    #[error("unknown trial {0}")]
    UnknownTrial(String),
    #[error("corrupt log at offset {offset}: {detail}")]
    CorruptLog { offset: u64, detail: String },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Connect(_) => 2,
            CliError::InvalidConfig { .. } => 3,
            CliError::SetupFailed(_) => 4,
            CliError::UnknownTrial(_) => 5,
            CliError::CorruptLog { .. } => 6,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Reads and validates a trial config file.
pub fn load_params(path: &Path) -> Result<TrialParams, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    TrialParams::from_json(&text).map_err(|e| CliError::InvalidConfig { path: e.path.clone(), reason: e.reason.clone() })
}

pub async fn cmd_start(ctl: &mut Controller, params: &TrialParams, out: &mut (dyn Write + Send)) -> Result<String, CliError> {
    let id = ctl.start(params).await?;
    writeln!(out, "{id}")?;
    Ok(id)
}

pub async fn cmd_terminate(ctl: &mut Controller, trial_id: &str, out: &mut (dyn Write + Send)) -> Result<String, CliError> {
    ctl.watch(trial_id).await?;
    ctl.terminate(trial_id).await?;
    loop {
        if let Event::State { trial_id: id, state: TrialPhase::Ended, reason } = ctl.next_event().await? {
            if id == trial_id {
                let reason = reason.unwrap_or_default();
                writeln!(out, "{id} ended {reason}")?;
                return Ok(reason);
            }
        }
    }
}

/// What `watch` follows.
#[derive(Clone, Debug, PartialEq)]
pub enum WatchTarget {
    Trial(String),
    /// Every trial; returns once everything seen has ended and at least
    /// `expect` trials ended while watching.
    All { expect: usize },
}

fn reason_or_dash(reason: &Option<String>) -> &str {
    reason.as_deref().unwrap_or("-")
}

pub async fn cmd_watch(ctl: &mut Controller, target: &WatchTarget, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let (sub, expect) = match target {
        WatchTarget::Trial(id) => (id.as_str(), 1),
        WatchTarget::All { expect } => ("*", (*expect).max(1)),
    };
    ctl.watch(sub).await?;
    let mut live = BTreeSet::new();
    let mut ended = 0;
    loop {
        if let Event::State { trial_id, state, reason } = ctl.next_event().await? {
            // One write per line keeps lines whole.
            let line = format!("{trial_id} {state} {}\n", reason_or_dash(&reason));
            out.write_all(line.as_bytes())?;
            if state == TrialPhase::Ended {
                live.remove(&trial_id);
                ended += 1;
            } else {
                live.insert(trial_id);
            }
            if live.is_empty() && ended >= expect {
                return Ok(());
            }
        }
    }
}

pub fn open_log(path: &Path) -> Result<Replay, CliError> {
    let replay = Replay::open(path).map_err(|e| match e {
        ReplayError::Corrupt { offset, detail } => CliError::CorruptLog { offset, detail },
        other => CliError::CorruptLog { offset: 0, detail: other.to_string() },
    })?;
    if replay.header.is_none() {
        return Err(CliError::CorruptLog { offset: 0, detail: "no header".into() });
    }
    Ok(replay)
}

/// Per-actor totals as the replay reconstructs them.
pub fn replay_totals(replay: &Replay) -> BTreeMap<String, f64> {
    totals_by_actor(&replay.aggregate_table())
}

pub fn cmd_replay_summary(path: &Path, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let replay = open_log(path)?;
    let header = replay.header.as_ref().expect("checked by open_log");
    writeln!(out, "trial {}", header.params.trial_id)?;
    match &replay.footer {
        Some(f) => {
            writeln!(out, "ticks {}", f.total_ticks)?;
            writeln!(out, "end_reason {}", f.end_reason)?;
        }
        None => {
            writeln!(out, "ticks {}", replay.samples.len())?;
            writeln!(out, "end_reason - (truncated)")?;
        }
    }
    let mut totals = replay_totals(&replay);
    for slot in &header.params.actor_slots {
        totals.entry(slot.actor_name.clone()).or_insert(0.0);
    }
    for (actor, total) in totals {
        writeln!(out, "total {actor} {total}")?;
    }
    Ok(())
}

pub fn cmd_replay_rewards(path: &Path, actor: &str, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let replay = open_log(path)?;
    for agg in replay.aggregate_table().iter().filter(|a| a.actor == actor) {
        writeln!(out, "{} {} {}", agg.target_tick, agg.value, agg.total_confidence)?;
    }
    Ok(())
}

/// Fetches the orchestrator's metrics table over HTTP.
pub async fn cmd_metrics(addr: &str, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let mut stream = tokio::net::TcpStream::connect(addr).await.map_err(|e| CliError::Connect(format!("{addr}: {e}")))?;
    let request = format!("GET /metrics HTTP/1.0\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).await?;
    let mut response = String::new();
    stream.read_to_string(&mut response).await?;
    let (head, body) = response.split_once("\r\n\r\n").unwrap_or((&response, ""));
    if !head.starts_with("HTTP/1.1 200") && !head.starts_with("HTTP/1.0 200") {
        return Err(CliError::Other(format!("metrics endpoint answered: {}", head.lines().next().unwrap_or(""))));
    }
    out.write_all(body.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CampaignSpec {
    pub params: TrialParams,
    pub parallel: usize,
    pub trials: usize,
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub index: usize,
    pub trial_id: String,
    pub seed: u64,
    pub report: EndedReport,
}

#[derive(Debug)]
pub struct CampaignReport {
    /// In trial-index order.
    pub outcomes: Vec<TrialOutcome>,
    pub rows: Vec<MetricsRow>,
    /// Per-implementation totals in trial-index order.
    pub histories: BTreeMap<String, Vec<f64>>,
    /// Most trials seen in a non-ended state at once.
    pub max_in_flight: usize,
}

/// Keeps `parallel` trials in flight until `trials` have ended.
///
/// Totals are recorded in trial-index order whatever order trials finish
/// in, so reruns with the same seeds produce the same table.
pub async fn run_campaign(
    ctl: &mut Controller,
    spec: &CampaignSpec,
    metrics: &MetricsSink,
    out: &mut (dyn Write + Send),
) -> Result<CampaignReport, CliError> {
    if spec.parallel == 0 || spec.trials == 0 {
        return Err(CliError::Other("--parallel and --trials must be at least 1".into()));
    }
    ctl.watch("*").await?;

    let mut ours: HashMap<String, usize> = HashMap::new();
    let mut live: BTreeSet<String> = BTreeSet::new();
    let mut finished: BTreeMap<usize, TrialOutcome> = BTreeMap::new();
    let mut in_flight = 0;
    let mut next = 0;
    let mut recorded = 0;
    let mut max_in_flight = 0;
    let mut outcomes = Vec::with_capacity(spec.trials);

    while outcomes.len() < spec.trials {
        while in_flight < spec.parallel && next < spec.trials {
            let mut params = spec.params.clone();
            params.trial_id = String::new();
            params.seed = spec.base_seed.wrapping_add(next as u64);
            let id = ctl.start(&params).await?;
            ours.insert(id, next);
            in_flight += 1;
            next += 1;
        }
        match ctl.next_event().await? {
            Event::State { trial_id, state, .. } if ours.contains_key(&trial_id) => {
                if state == TrialPhase::Ended {
                    live.remove(&trial_id);
                } else {
                    live.insert(trial_id);
                    max_in_flight = max_in_flight.max(live.len());
                }
            }
            Event::Ended { trial_id, report } => {
                let Some(&index) = ours.get(&trial_id) else { continue };
                if report.reason == "setup_failed" {
                    return Err(CliError::SetupFailed(trial_id));
                }
                in_flight -= 1;
                let seed = spec.base_seed.wrapping_add(index as u64);
                writeln!(out, "{trial_id} seed={seed} {} ticks={}", report.reason, report.total_ticks)?;
                finished.insert(index, TrialOutcome { index, trial_id, seed, report });
                while let Some(done) = finished.remove(&recorded) {
                    record(metrics, &done);
                    outcomes.push(done);
                    recorded += 1;
                }
            }
            Event::State { .. } => {}
        }
    }

    let rows = metrics.rows();
    let histories = rows
        .iter()
        .filter_map(|r| metrics.history(&r.implementation).map(|h| (r.implementation.clone(), h.totals().to_vec())))
        .collect();
    out.write_all(crate::metrics::render_rows(&rows).as_bytes())?;
    Ok(CampaignReport { outcomes, rows, histories, max_in_flight })
}

/// Per implementation, the mean of its actors' totals.
fn record(metrics: &MetricsSink, outcome: &TrialOutcome) {
    let mut by_impl: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (actor, total) in &outcome.report.totals {
        if let Some(imp) = outcome.report.implementations.get(actor) {
            by_impl.entry(imp.as_str()).or_default().push(*total);
        }
    }
    for (imp, totals) in by_impl {
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        if let Err(e) = metrics.record_trial_total(imp, mean) {
            tracing::warn!("not recording {imp} for {}: {e}", outcome.trial_id);
        }
    }
}
