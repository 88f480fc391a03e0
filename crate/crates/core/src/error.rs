use thiserror::Error;

/// Errors surfaced by registration and geometry planning.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("invalid collective meta: {0}")]
    InvalidMeta(String),
    #[error("registry full: limit of {0} collectives reached")]
    RegistryFull(usize),
}

/// Errors surfaced by the connector fabric.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("connector already wired for collective {collective} lane {lane} edge {from}->{to}")]
    AlreadyWired {
        collective: u32,
        lane: u32,
        from: u32,
        to: u32,
    },
}

/// Errors surfaced by the submission path.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("submission queue full")]
    Full,
    #[error("submission after the exiting entry was pushed")]
    SubmitAfterExit,
    #[error("collective {0} already has an outstanding submission")]
    DuplicateSubmission(u32),
    #[error("collective {0} is not registered")]
    UnknownCollective(u32),
    #[error("run aborted")]
    Aborted,
}

/// A dynamic context that stepped outside its plan. Indicates an
/// implementation bug; the lane aborts when it sees this.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("corrupt context for collective {collective}: {detail}")]
pub struct CorruptContext {
    pub collective: u32,
    pub detail: String,
}

/// Host-side synchronization gave up waiting.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("watchdog timeout after {0:?}")]
pub struct WatchdogTimeout(pub std::time::Duration);
