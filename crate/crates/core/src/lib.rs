//! Trialworks: an orchestration platform for human-in-the-loop learning
//! trials, with a team paintball arena and three player implementations.
//!
//! Participants exchange [`protocol::Envelope`]s through an
//! [`orchestrator::Orchestrator`], which runs each trial as a lock-step
//! loop, aggregates rewards from many sources (possibly aimed at past
//! ticks) and writes everything to a [`datalog`].

pub mod agents;
pub mod arena;
pub mod builtin;
pub mod cli;
pub mod datalog;
pub mod metrics;
pub mod orchestrator;
pub mod protocol;
pub mod registry;
pub mod service;
pub mod transport;
