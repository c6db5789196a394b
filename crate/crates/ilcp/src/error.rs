//! Crate-wide error type.

use crate::trace::{CellId, UeId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate measurement row at t={t} ue={ue} cell={cell}")]
    DuplicateStep { t: u64, ue: UeId, cell: CellId },
    #[error("serving-cell invariant violated at t={t} ue={ue}: {msg}")]
    ServingViolation { t: u64, ue: UeId, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("time index {t} outside trace range [{lo}, {hi}]")]
    TimeOutOfRange { t: u64, lo: u64, hi: u64 },
    #[error("UE {0} has no visible cells")]
    NoVisibleCells(UeId),
    #[error("latent payload has {got} bytes, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("corrupt latent payload: non-finite value in slot {slot}")]
    CorruptPayload { slot: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
