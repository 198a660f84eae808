//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An operation received data violating its input contract.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was invoked on a client of the wrong role.
    #[error("role error: {0}")]
    Role(String),

    /// Model aggregation failed; names the offending client.
    #[error("aggregation error (client {client}): {message}")]
    Aggregation { client: usize, message: String },

    /// A message payload contained registered raw-sample bytes.
    #[error("privacy violation (sender {sender}): {message}")]
    Privacy { sender: usize, message: String },

    /// Checkpoint or payload encoding problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A failure while running an experiment or federation round.
    #[error("runtime error: {0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
