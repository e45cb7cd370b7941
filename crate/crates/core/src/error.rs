use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("record {record}: {message}")]
    Format { record: usize, message: String },

    #[error("record {record}: checksum mismatch (expected {expected:08x}, found {found:08x})")]
    Checksum {
        record: usize,
        expected: u32,
        found: u32,
    },

    #[error("record {record}: blob too short (need {needed} bytes at offset {offset}, blob has {available})")]
    Truncated {
        record: usize,
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
