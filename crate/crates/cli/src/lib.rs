//! Process-level wiring: config and key files, the TCP transport, the node
//! daemon and the network client.

pub mod config;
pub mod files;
pub mod keys;
pub mod net_client;
pub mod node;
pub mod wire;

use thiserror::Error;

/// Process exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: u8 = 0;
    /// I/O or network failure, or anything not covered below.
    pub const ERROR: u8 = 1;
    /// Bad command line (reported by the argument parser).
    pub const USAGE: u8 = 2;
    /// Config, key or data file invalid, including `N < 3f + 1`.
    pub const CONFIG: u8 = 3;
    /// Node key does not match the configured index, or index out of range.
    pub const KEY_MISMATCH: u8 = 4;
    /// Discovery file tampered with or signed by an untrusted key.
    pub const DISCOVERY: u8 = 5;
    /// A certificate did not verify.
    pub const VERIFY_FAILED: u8 = 6;
    /// The op was refused or no proxy produced an answer in time.
    pub const NOT_CERTIFIED: u8 = 7;
    /// The op was ordered and failed; the failure certificate verified.
    pub const CERTIFIED_FAILURE: u8 = 8;
    /// Output files exist and `--force` was not given.
    pub const EXISTS: u8 = 9;
    /// A runtime invariant check failed.
    pub const INVARIANT: u8 = 10;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    KeyMismatch(String),
    #[error("{0}")]
    Discovery(String),
    #[error("{0}")]
    VerifyFailed(String),
    #[error("{0}")]
    NotCertified(String),
    #[error("{0}")]
    CertifiedFailure(String),
    #[error("{0}")]
    Exists(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => exit::ERROR,
            CliError::Config(_) => exit::CONFIG,
            CliError::KeyMismatch(_) => exit::KEY_MISMATCH,
            CliError::Discovery(_) => exit::DISCOVERY,
            CliError::VerifyFailed(_) => exit::VERIFY_FAILED,
            CliError::NotCertified(_) => exit::NOT_CERTIFIED,
            CliError::CertifiedFailure(_) => exit::CERTIFIED_FAILURE,
            CliError::Exists(_) => exit::EXISTS,
            CliError::Invariant(_) => exit::INVARIANT,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
