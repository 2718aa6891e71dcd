// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Lock-free in-memory iSAX index for exact 1-nearest-neighbor search over
//! fixed-length data series under Euclidean distance.
//!
//! Building and querying run as a pipeline of phases (summarization, tree
//! population, pruning, refinement), each spread over worker threads by the
//! [`refresh`] scheme: threads claim parts through a shared counter, mark
//! them done, and then scan for parts left unfinished by slow or crashed
//! threads and complete those too. No phase waits on a lock or barrier, so
//! a run finishes as long as one worker keeps going.
//!
//! ```
//! use fresh::{Index, IndexOptions, SeriesConfig};
//! use fresh::harness::generate_dataset;
//!
//! let data = generate_dataset(1000, 64, 7).unwrap();
//! let opts = IndexOptions {
//!     series: SeriesConfig::new(64, 8, 8).unwrap(),
//!     leaf_size: 100,
//!     threads: 2,
//!     ..IndexOptions::default()
//! };
//! let index = Index::build(&opts, &data.values).unwrap();
//! let answer = index.search(data.series(42)).unwrap();
//! assert_eq!((answer.id, answer.distance), (42, 0.0));
//! ```

pub mod append;
pub mod engine;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod query;
pub mod refresh;
pub mod series;
pub mod tree;

pub use engine::{crash_thread, execute, Execution, Index, IndexOptions, PhaseTimes, RunStats, ThreadCrash};
pub use error::{Error, Result};
pub use query::{Answer, Bsf, BsfUpdate, Query, Searcher};
pub use refresh::{BackoffConfig, Checkpoint, Hook, Mode, Phase, RefreshPlan, Role, Site, Worker};
pub use series::{
    check_normalization, compute_isax, compute_paa, euclidean_distance_sq, mindist_sq, Breakpoints, IsaxWord, Paa,
    SaxKey, SeriesConfig,
};
pub use tree::{find_node, total_nodes, Forest, InsertOutcome, Node, SummaryPair};
