//! Deadlock-free collective-communication runtime, simulated in-process.
//!
//! Ranks are threads, lanes are sub-threads of a rank, connectors are bounded
//! slice rings between ring neighbors. Each rank runs a restartable daemon
//! that executes collectives in submission-queue order with decentralized
//! spin-budget preemption, so mis-ordered or resource-starved workloads that
//! deadlock a run-to-completion scheduler still finish.

pub mod buffer;
pub mod config;
pub mod connector;
pub mod daemon;
pub mod error;
pub mod events;
pub mod primitive;
pub mod queues;
pub mod registry;
pub mod ring;
pub mod runtime;
pub mod stickiness;
pub mod values;
