//! Append-only trial logs and their replay.
//!
//! A log is the frame stream of `protocol` written to `<trial_id>.twlog`:
//! one `log_header`, one `tick_sample` per tick in order, and a closing
//! `log_footer`. Rewards are stored at the tick they were received and
//! re-attached to their target tick on replay.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::orchestrator::rewards::{AggregatedReward, RewardLedger};
use crate::protocol::{
    decode_frame, encode_frame, DecodeError, Envelope, MsgType, ParticipantId, Reward, SchemaRef, TrialParams,
};

pub const LOG_EXTENSION: &str = "twlog";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log part out of order: {0}")]
    Order(String),
    #[error("log i/o failed: {0}")]
    Io(#[from] io::Error),
    #[error("log encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt log frame at byte {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
    #[error("footer aggregate table disagrees with the logged rewards")]
    FooterMismatch,
    #[error("log i/o failed: {0}")]
    Io(#[from] io::Error),
    #[error("log holds no transitions")]
    EmptyLog,
    #[error("batch size must be at least 1")]
    BadBatchSize,
}

// ---------------------------------------------------------------------------
// Record parts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub params: TrialParams,
    pub schemas: Vec<SchemaRef>,
    /// Wall-clock start in ms since the epoch; 0 when the orchestrator runs
    /// in reproducible mode.
    pub started_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedAction {
    pub action: Value,
    pub defaulted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedMessage {
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub payload: Value,
}

/// Everything that happened during one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub trial_id: String,
    pub tick_id: u64,
    pub observations: BTreeMap<String, Value>,
    pub actions: BTreeMap<String, LoggedAction>,
    /// Raw rewards received this tick, each keeping its own target tick.
    pub rewards_received: Vec<Reward>,
    pub messages: Vec<LoggedMessage>,
}

impl TickSample {
    pub fn new(trial_id: impl Into<String>, tick_id: u64) -> Self {
        Self {
            trial_id: trial_id.into(),
            tick_id,
            observations: BTreeMap::new(),
            actions: BTreeMap::new(),
            rewards_received: Vec::new(),
            messages: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogFooter {
    pub end_reason: String,
    pub total_ticks: u64,
    pub aggregates: Vec<AggregatedReward>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogPart {
    Header(LogHeader),
    Sample(TickSample),
    Footer(LogFooter),
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    Header,
    Sample(u64),
    Done,
}

pub fn log_path(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("{trial_id}.{LOG_EXTENSION}"))
}

/// Single writer for one trial's log.
pub struct LogWriter<W: Write> {
    out: W,
    trial_id: String,
    expect: Expect,
}

impl LogWriter<BufWriter<File>> {
    pub fn create(dir: &Path, trial_id: &str) -> Result<Self, LogError> {
        std::fs::create_dir_all(dir)?;
        let file = File::create(log_path(dir, trial_id))?;
        Ok(Self::new(BufWriter::new(file), trial_id))
    }
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W, trial_id: &str) -> Self {
        Self { out, trial_id: trial_id.to_string(), expect: Expect::Header }
    }

    pub fn append(&mut self, part: &LogPart) -> Result<(), LogError> {
        let (msg_type, tick, payload, next) = match (part, self.expect) {
            (LogPart::Header(h), Expect::Header) => (MsgType::LogHeader, 0, to_value(h)?, Expect::Sample(0)),
            (LogPart::Sample(s), Expect::Sample(want)) if s.tick_id == want => {
                (MsgType::TickSample, s.tick_id, to_value(s)?, Expect::Sample(want + 1))
            }
            (LogPart::Sample(s), Expect::Sample(want)) => {
                return Err(LogError::Order(format!("sample for tick {} where tick {want} was expected", s.tick_id)))
            }
            (LogPart::Footer(f), Expect::Sample(n)) => (MsgType::LogFooter, n, to_value(f)?, Expect::Done),
            (p, e) => return Err(LogError::Order(format!("{} not allowed when expecting {e:?}", part_name(p)))),
        };
        let env = Envelope::new(msg_type, self.trial_id.clone(), tick, ParticipantId::orchestrator(), payload);
        let frame = encode_frame(&env).map_err(|e| LogError::Encode(e.to_string()))?;
        self.out.write_all(&frame)?;
        self.expect = next;
        if next == Expect::Done {
            self.out.flush()?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn part_name(p: &LogPart) -> &'static str {
    match p {
        LogPart::Header(_) => "header",
        LogPart::Sample(_) => "sample",
        LogPart::Footer(_) => "footer",
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, LogError> {
    crate::protocol::to_payload(v).map_err(|e| LogError::Encode(e.to_string()))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// A sample together with every aggregated reward that targets its tick.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayedSample {
    pub sample: TickSample,
    pub aggregated: Vec<AggregatedReward>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReplayItem {
    Sample(ReplayedSample),
    /// The log ended without a footer.
    Truncated,
}

/// A decoded trial log.
#[derive(Clone, Debug)]
pub struct Replay {
    pub header: Option<LogHeader>,
    pub samples: Vec<TickSample>,
    pub footer: Option<LogFooter>,
    ledger: RewardLedger,
}

impl Replay {
    pub fn open(path: &Path) -> Result<Self, ReplayError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        let mut header = None;
        let mut samples: Vec<TickSample> = Vec::new();
        let mut footer = None;
        let mut offset = 0usize;
        while offset < bytes.len() {
            let corrupt = |detail: String| ReplayError::Corrupt { offset: offset as u64, detail };
            let (env, used) = match decode_frame(&bytes[offset..]) {
                Ok(ok) => ok,
                // A partial trailing frame is a crash artifact, not corruption.
                Err(DecodeError::NeedMoreBytes { .. }) => break,
                Err(e) => return Err(corrupt(e.to_string())),
            };
            if footer.is_some() {
                return Err(corrupt("frame after footer".into()));
            }
            match (env.msg_type, header.is_some()) {
                (MsgType::LogHeader, false) => {
                    header = Some(env.parse::<LogHeader>().map_err(|e| corrupt(e.to_string()))?);
                }
                (MsgType::TickSample, true) => {
                    let s: TickSample = env.parse().map_err(|e| corrupt(e.to_string()))?;
                    if s.tick_id != samples.len() as u64 {
                        return Err(corrupt(format!("tick {} out of sequence", s.tick_id)));
                    }
                    samples.push(s);
                }
                (MsgType::LogFooter, true) => {
                    footer = Some(env.parse::<LogFooter>().map_err(|e| corrupt(e.to_string()))?);
                }
                (t, _) => return Err(corrupt(format!("unexpected {t} frame"))),
            }
            offset += used;
        }

        let mut ledger = RewardLedger::new();
        for r in samples.iter().flat_map(|s| s.rewards_received.iter()) {
            ledger.add(r.clone());
        }
        if let Some(f) = &footer {
            if f.aggregates != ledger.table() || f.total_ticks != samples.len() as u64 {
                return Err(ReplayError::FooterMismatch);
            }
        }
        Ok(Self { header, samples, footer, ledger })
    }

    pub fn is_truncated(&self) -> bool {
        self.footer.is_none()
    }

    /// Aggregated reward for `(actor, tick)`, including rewards received later.
    pub fn aggregated(&self, actor: &str, tick: u64) -> Option<AggregatedReward> {
        self.ledger.get(actor, tick)
    }

    /// The recomputed aggregate table, ordered by actor then tick.
    pub fn aggregate_table(&self) -> Vec<AggregatedReward> {
        self.ledger.table()
    }

    /// Samples in tick order, then a `Truncated` marker if the footer is missing.
    pub fn iter(&self) -> impl Iterator<Item = ReplayItem> + '_ {
        let table = self.ledger.table();
        let mut by_tick: BTreeMap<u64, Vec<AggregatedReward>> = BTreeMap::new();
        for a in table {
            by_tick.entry(a.target_tick).or_default().push(a);
        }
        self.samples
            .iter()
            .map(move |s| {
                ReplayItem::Sample(ReplayedSample {
                    sample: s.clone(),
                    aggregated: by_tick.remove(&s.tick_id).unwrap_or_default(),
                })
            })
            .chain(self.is_truncated().then_some(ReplayItem::Truncated))
    }

    /// Every `(actor, tick)` transition that carries an action.
    pub fn transitions(&self) -> Vec<Transition> {
        let mut out = Vec::new();
        for s in &self.samples {
            for (actor, act) in &s.actions {
                let Some(obs) = s.observations.get(actor) else { continue };
                out.push(Transition {
                    actor: actor.clone(),
                    tick: s.tick_id,
                    observation: obs.clone(),
                    action: act.action.clone(),
                    reward: self.aggregated(actor, s.tick_id).map_or(0.0, |a| a.value),
                });
            }
        }
        out
    }
}

/// One `(observation, action, aggregated reward)` triple from a log.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub actor: String,
    pub tick: u64,
    pub observation: Value,
    pub action: Value,
    /// Aggregated reward targeting this tick, 0 when none arrived.
    pub reward: f64,
}

pub fn replay(path: &Path) -> Result<Replay, ReplayError> {
    Replay::open(path)
}

/// Uniform sample with replacement over all transitions of a log.
pub fn sample_batch(path: &Path, batch_size: usize, rng_seed: u64) -> Result<Vec<Transition>, ReplayError> {
    let replay = Replay::open(path)?;
    sample_transitions(&replay.transitions(), batch_size, rng_seed)
}

pub fn sample_transitions(all: &[Transition], batch_size: usize, rng_seed: u64) -> Result<Vec<Transition>, ReplayError> {
    if batch_size == 0 {
        return Err(ReplayError::BadBatchSize);
    }
    if all.is_empty() {
        return Err(ReplayError::EmptyLog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..batch_size).map(|_| all[rng.random_range(0..all.len())].clone()).collect())
}
