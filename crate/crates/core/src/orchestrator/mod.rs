//! Runs trials.
//!
//! Each trial is one task driving a lock-step tick loop (see `trial`). The
//! [`Orchestrator`] handle owns the book of trials and their watchers; the
//! only state shared across trials is the registry and the metrics sink.

pub mod rewards;
pub mod server;
mod trial;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::sync::oneshot;

use crate::metrics::MetricsSink;
use crate::protocol::{ParamsError, TrialParams, TrialPhase, TrialState};
use crate::registry::Registry;
use crate::service::Connector;
use crate::transport::Link;

pub const DEFAULT_JOIN_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_SETUP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Debug)]
pub struct OrchestratorConfig {
    /// Directory for `<trial_id>.twlog` files; no logs when unset.
    pub log_dir: Option<PathBuf>,
    pub join_timeout: Duration,
    pub setup_timeout: Duration,
    /// Omit wall-clock data from logs so identical runs produce identical bytes.
    pub reproducible: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            log_dir: None,
            join_timeout: DEFAULT_JOIN_TIMEOUT,
            setup_timeout: DEFAULT_SETUP_TIMEOUT,
            reproducible: false,
        }
    }
}

impl OrchestratorConfig {
    /// Reads `TW_LOG_DIR` and `TW_JOIN_TIMEOUT_MS`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(dir) = std::env::var("TW_LOG_DIR") {
            if !dir.is_empty() {
                c.log_dir = Some(dir.into());
            }
        }
        if let Some(ms) = std::env::var("TW_JOIN_TIMEOUT_MS").ok().and_then(|v| v.parse().ok()) {
            c.join_timeout = Duration::from_millis(ms);
        }
        c
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error(transparent)]
    InvalidParams(#[from] ParamsError),
    #[error("trial `{0}` not found")]
    NotFound(String),
    #[error("trial `{0}` already exists")]
    DuplicateTrial(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JoinError {
    #[error("trial not found")]
    NotFound,
    #[error("no slot named `{0}`")]
    UnknownSlot(String),
    #[error("slot `{0}` is not a client slot")]
    NotClient(String),
    #[error("slot `{0}` is already taken")]
    SlotTaken(String),
    #[error("trial is not accepting clients")]
    NotAccepting,
}

impl JoinError {
    pub fn code(&self) -> &'static str {
        match self {
            JoinError::NotFound => "not_found",
            JoinError::UnknownSlot(_) => "unknown_slot",
            JoinError::NotClient(_) => "not_client",
            JoinError::SlotTaken(_) => "slot_taken",
            JoinError::NotAccepting => "not_accepting",
        }
    }
}

/// Outcome of an ended trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub reason: String,
    pub total_ticks: u64,
    /// Sum of aggregated rewards per actor.
    pub totals: BTreeMap<String, f64>,
    /// Implementation behind each actor slot.
    pub implementations: BTreeMap<String, String>,
    pub log_path: Option<PathBuf>,
    pub log_degraded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WatchEvent {
    pub trial_id: String,
    pub state: TrialState,
    /// Present on the `ended` transition.
    pub summary: Option<TrialSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WatchFilter {
    All,
    Trial(String),
}

impl WatchFilter {
    fn matches(&self, trial_id: &str) -> bool {
        match self {
            WatchFilter::All => true,
            WatchFilter::Trial(id) => id == trial_id,
        }
    }
}

pub(crate) type JoinReply = oneshot::Sender<Result<(), (JoinError, Link)>>;

pub(crate) enum Control {
    Terminate(String),
    Join { actor_name: String, link: Link, reply: JoinReply },
}

struct TrialEntry {
    state: TrialState,
    summary: Option<TrialSummary>,
    control: UnboundedSender<Control>,
}

struct Watcher {
    filter: WatchFilter,
    tx: UnboundedSender<WatchEvent>,
}

#[derive(Default)]
struct Book {
    trials: HashMap<String, TrialEntry>,
    order: Vec<String>,
    watchers: Vec<Watcher>,
    next_id: u64,
}

pub(crate) struct Shared {
    config: OrchestratorConfig,
    registry: Arc<Registry>,
    connector: Arc<Connector>,
    metrics: Arc<MetricsSink>,
    book: Mutex<Book>,
}

/// Cheap-to-clone handle on a running orchestrator.
#[derive(Clone)]
pub struct Orchestrator {
    shared: Arc<Shared>,
}

impl Orchestrator {
    pub fn new(
        config: OrchestratorConfig,
        registry: Arc<Registry>,
        connector: Arc<Connector>,
        metrics: Arc<MetricsSink>,
    ) -> Self {
        Self {
            shared: Arc::new(Shared { config, registry, connector, metrics, book: Mutex::new(Book::default()) }),
        }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.shared.config
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.shared.registry
    }

    pub fn connector(&self) -> &Arc<Connector> {
        &self.shared.connector
    }

    pub fn metrics(&self) -> &Arc<MetricsSink> {
        &self.shared.metrics
    }

    /// Reserves a fresh trial id.
    pub fn allocate_id(&self) -> String {
        let mut book = self.shared.book.lock().unwrap();
        loop {
            book.next_id += 1;
            let id = format!("trial-{:06}", book.next_id);
            if !book.trials.contains_key(&id) {
                return id;
            }
        }
    }

    /// Validates `params`, registers the trial as `pending` and spawns its
    /// loop. Must be called from within a tokio runtime.
    pub fn start_trial(&self, mut params: TrialParams) -> Result<String, OrchestratorError> {
        params.validate()?;
        if params.trial_id.is_empty() {
            params.trial_id = self.allocate_id();
        }
        let id = params.trial_id.clone();
        let (tx, rx) = mpsc::unbounded_channel();
        {
            let mut book = self.shared.book.lock().unwrap();
            if book.trials.contains_key(&id) {
                return Err(OrchestratorError::DuplicateTrial(id));
            }
            let state = TrialState::new(TrialPhase::Pending);
            book.trials.insert(id.clone(), TrialEntry { state: state.clone(), summary: None, control: tx });
            book.order.push(id.clone());
            broadcast(&mut book, &WatchEvent { trial_id: id.clone(), state, summary: None });
        }
        tokio::spawn(trial::run(self.clone(), params, rx));
        Ok(id)
    }

    /// Asks a trial to end. Ending an ended or unknown trial is `NotFound`;
    /// repeating the request while the trial is still winding down is a no-op.
    pub fn terminate_trial(&self, trial_id: &str, reason: &str) -> Result<(), OrchestratorError> {
        let book = self.shared.book.lock().unwrap();
        match book.trials.get(trial_id) {
            Some(e) if !e.state.is_ended() => {
                let _ = e.control.send(Control::Terminate(reason.to_string()));
                Ok(())
            }
            _ => Err(OrchestratorError::NotFound(trial_id.to_string())),
        }
    }

    /// Current state of every matching trial, then each later transition.
    pub fn watch_trials(&self, filter: WatchFilter) -> UnboundedReceiver<WatchEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut book = self.shared.book.lock().unwrap();
        for id in book.order.iter().filter(|id| filter.matches(id)) {
            let e = &book.trials[id];
            let _ = tx.send(WatchEvent { trial_id: id.clone(), state: e.state.clone(), summary: e.summary.clone() });
        }
        book.watchers.push(Watcher { filter, tx });
        rx
    }

    pub fn trial_state(&self, trial_id: &str) -> Option<TrialState> {
        self.shared.book.lock().unwrap().trials.get(trial_id).map(|e| e.state.clone())
    }

    pub fn trial_summary(&self, trial_id: &str) -> Option<TrialSummary> {
        self.shared.book.lock().unwrap().trials.get(trial_id).and_then(|e| e.summary.clone())
    }

    pub fn trial_ids(&self) -> Vec<String> {
        self.shared.book.lock().unwrap().order.clone()
    }

    /// Hands a client session to the trial that owns `actor_name`. On
    /// refusal the link is returned so the caller can report the error.
    pub async fn join_trial(&self, trial_id: &str, actor_name: &str, link: Link) -> Result<(), (JoinError, Link)> {
        let control = {
            let book = self.shared.book.lock().unwrap();
            match book.trials.get(trial_id) {
                Some(e) if !e.state.is_ended() => e.control.clone(),
                _ => return Err((JoinError::NotFound, link)),
            }
        };
        let (reply, wait) = oneshot::channel();
        if let Err(mpsc::error::SendError(Control::Join { link, .. })) =
            control.send(Control::Join { actor_name: actor_name.to_string(), link, reply })
        {
            return Err((JoinError::NotFound, link));
        }
        match wait.await {
            Ok(r) => r,
            // The trial ended while the request was queued; the link went with it.
            Err(_) => Err((JoinError::NotFound, crate::transport::link_pair().0)),
        }
    }

    /// Starts a trial and waits for it to end.
    pub async fn run_trial(&self, mut params: TrialParams) -> Result<(String, TrialSummary), OrchestratorError> {
        params.validate()?;
        if params.trial_id.is_empty() {
            params.trial_id = self.allocate_id();
        }
        let mut events = self.watch_trials(WatchFilter::Trial(params.trial_id.clone()));
        let id = self.start_trial(params)?;
        while let Some(ev) = events.recv().await {
            if let Some(summary) = ev.summary {
                return Ok((id, summary));
            }
        }
        unreachable!("watch stream closed before the trial ended")
    }

    pub(crate) fn transition(&self, trial_id: &str, state: TrialState, summary: Option<TrialSummary>) {
        let mut book = self.shared.book.lock().unwrap();
        let Some(entry) = book.trials.get_mut(trial_id) else { return };
        debug_assert!(
            entry.state.state.can_transition_to(state.state),
            "illegal transition {} -> {}",
            entry.state.state,
            state.state
        );
        entry.state = state.clone();
        entry.summary = summary.clone();
        broadcast(&mut book, &WatchEvent { trial_id: trial_id.to_string(), state, summary });
    }
}

fn broadcast(book: &mut Book, ev: &WatchEvent) {
    book.watchers
        .retain(|w| !w.filter.matches(&ev.trial_id) || w.tx.send(ev.clone()).is_ok());
}
