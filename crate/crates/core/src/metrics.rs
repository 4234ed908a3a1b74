//! Reward history per actor implementation and the training criterion.
//!
//! An implementation counts as trained once the mean of its last ten
//! per-trial totals is strictly above the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::net::TcpListener;

use crate::orchestrator::rewards::exact_sum;
use crate::orchestrator::TrialSummary;

pub const WINDOW: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("total for `{0}` is not finite")]
    NonFinite(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardHistory {
    pub implementation: String,
    totals: Vec<f64>,
    pub window: usize,
    pub threshold: f64,
}

impl RewardHistory {
    pub fn new(implementation: impl Into<String>, threshold: f64) -> Self {
        Self { implementation: implementation.into(), totals: Vec::new(), window: WINDOW, threshold }
    }

    pub fn record(&mut self, total: f64) -> Result<(), MetricsError> {
        if !total.is_finite() {
            return Err(MetricsError::NonFinite(self.implementation.clone()));
        }
        self.totals.push(total);
        Ok(())
    }

    pub fn totals(&self) -> &[f64] {
        &self.totals
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Mean of the window ending at entry `end` (exclusive).
    pub fn moving_average_at(&self, end: usize) -> Option<f64> {
        if end < self.window || end > self.totals.len() {
            return None;
        }
        Some(exact_sum(self.totals[end - self.window..end].iter().copied()) / self.window as f64)
    }

    /// Latest moving average; `None` until a full window exists.
    pub fn moving_average(&self) -> Option<f64> {
        self.moving_average_at(self.totals.len())
    }

    /// Every defined moving average, oldest first.
    pub fn moving_averages(&self) -> Vec<f64> {
        (self.window..=self.totals.len()).filter_map(|e| self.moving_average_at(e)).collect()
    }

    pub fn is_trained(&self) -> bool {
        self.moving_average().is_some_and(|ma| ma > self.threshold)
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub implementation: String,
    pub trials: usize,
    pub last_total: Option<f64>,
    pub moving_average: Option<f64>,
    pub trained: bool,
}

/// The shared sink. Appends are serialized; reads take snapshots.
#[derive(Debug)]
pub struct MetricsSink {
    threshold: f64,
    inner: Mutex<SinkState>,
}

#[derive(Debug, Default)]
struct SinkState {
    histories: BTreeMap<String, RewardHistory>,
    per_trial: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Default for MetricsSink {
    fn default() -> Self {
        Self::new(DEFAULT_THRESHOLD)
    }
}

impl MetricsSink {
    pub fn new(threshold: f64) -> Self {
        Self { threshold, inner: Mutex::new(SinkState::default()) }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn record_trial_total(&self, implementation: &str, total: f64) -> Result<(), MetricsError> {
        let mut st = self.inner.lock().unwrap();
        st.histories
            .entry(implementation.to_string())
            .or_insert_with(|| RewardHistory::new(implementation, self.threshold))
            .record(total)
    }

    /// Records an ended trial: one entry per implementation, the mean total
    /// of that implementation's actors in the trial.
    pub fn record_trial(&self, trial_id: &str, summary: &TrialSummary) {
        let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (actor, total) in &summary.totals {
            let imp = summary.implementations.get(actor).map(String::as_str).unwrap_or("unknown");
            grouped.entry(imp).or_default().push(*total);
        }
        let mut recorded = BTreeMap::new();
        for (imp, totals) in grouped {
            let mean = exact_sum(totals.iter().copied()) / totals.len() as f64;
            if self.record_trial_total(imp, mean).is_ok() {
                recorded.insert(imp.to_string(), mean);
            }
        }
        self.inner.lock().unwrap().per_trial.insert(trial_id.to_string(), recorded);
    }

    pub fn history(&self, implementation: &str) -> Option<RewardHistory> {
        self.inner.lock().unwrap().histories.get(implementation).cloned()
    }

    pub fn is_trained(&self, implementation: &str) -> bool {
        self.history(implementation).is_some_and(|h| h.is_trained())
    }

    /// Per-implementation totals recorded for one trial.
    pub fn trial_totals(&self, trial_id: &str) -> Option<BTreeMap<String, f64>> {
        self.inner.lock().unwrap().per_trial.get(trial_id).cloned()
    }

    pub fn rows(&self) -> Vec<MetricsRow> {
        let st = self.inner.lock().unwrap();
        st.histories
            .values()
            .map(|h| MetricsRow {
                implementation: h.implementation.clone(),
                trials: h.len(),
                last_total: h.totals().last().copied(),
                moving_average: h.moving_average(),
                trained: h.is_trained(),
            })
            .collect()
    }

    /// Plain-text table, one line per implementation.
    pub fn render(&self) -> String {
        render_rows(&self.rows())
    }
}

pub fn render_rows(rows: &[MetricsRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = format!("{:<20} {:>7} {:>11} {:>11} {}\n", "implementation", "trials", "last_total", "ma10", "trained");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>7} {:>11} {:>11} {}",
            r.implementation,
            r.trials,
            fmt(r.last_total),
            fmt(r.moving_average),
            r.trained
        );
    }
    out
}

/// Parses a table produced by [`render_rows`].
pub fn parse_rows(text: &str) -> Vec<MetricsRow> {
    let num = |s: &str| if s == "-" { None } else { s.parse().ok() };
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return None;
            }
            Some(MetricsRow {
                implementation: f[0].to_string(),
                trials: f[1].parse().ok()?,
                last_total: num(f[2]),
                moving_average: num(f[3]),
                trained: f[4] == "true",
            })
        })
        .collect()
}

pub fn router(sink: Arc<MetricsSink>) -> Router {
    Router::new()
        .route("/metrics", get(|State(sink): State<Arc<MetricsSink>>| async move { sink.render() }))
        .with_state(sink)
}

/// Serves `GET /metrics` until the listener fails.
pub async fn serve_metrics(sink: Arc<MetricsSink>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(sink)).await
}
