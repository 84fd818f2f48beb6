//! Desk-scale reinforcement learning for duplex simultaneous translation.
//!
//! The crate builds a complete training and evaluation loop around a
//! synthetic chunked-stream environment: a source stream arrives as
//! fixed-size token chunks, and a small stochastic policy decides at every
//! chunk whether to keep listening or to emit translation tokens. Training
//! uses PPO with GAE advantages, per-batch reward normalization, an adaptive
//! KL penalty toward a frozen reference policy, and a two-stage schedule
//! that first optimizes per-chunk rewards and then adds sequence-level ones.
//!
//! Modules:
//! - [`stream_env`]: episode generation, reference trajectories, observations
//! - [`rewards`]: per-chunk and sequence-level verifiable rewards
//! - [`policy`]: compact differentiable policy/value model with hand-written
//!   backpropagation
//! - [`trainer`]: rollouts, GAE, clipped PPO updates, adaptive KL, stages
//! - [`metrics`]: AL / LAAL / FLAL latency metrics, indicator scoring, the
//!   speech-validity gate, and emission-log evaluation
//! - [`oracles`]: independent brute-force reference implementations used by
//!   tests and the `verify` command
//! - [`ablate`]: reward-hacking and stage-scheduling comparison suites
//! - [`cli`]: command implementations behind the `duplexsi` binary

pub mod ablate;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod oracles;
pub mod policy;
pub mod report;
pub mod rewards;
pub mod stream_env;
pub mod trainer;

use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// configuration and parse errors exit with 2, everything else with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
