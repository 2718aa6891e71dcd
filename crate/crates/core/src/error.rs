// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("series length {len} is not a positive multiple of the segment count {segments}")]
    SegmentMismatch { len: usize, segments: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("the index is empty")]
    EmptyIndex,

    #[error("rank {rank} out of range for a subtree with {total} nodes")]
    RankOutOfRange { rank: usize, total: usize },

    #[error("malformed dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid fault spec `{spec}`: {reason}")]
    FaultSpec { spec: String, reason: String },

    #[error("unknown baseline `{0}` (expected doall-split, fi-based or cas-based)")]
    UnknownBaseline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
