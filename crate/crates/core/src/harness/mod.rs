// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Benchmark support: datasets, fault injection, baselines and the
//! verification oracle.

pub mod baseline;
pub mod bench;
pub mod dataset;
pub mod fault;

pub use baseline::{run_baseline, BaselineKind, BaselineRun};
pub use bench::{
    brute_force_nn, distance_matches, run_benchmark, BenchOutcome, DataSource, MetricsReport, Mismatch, QuerySource,
    RunConfig, VERIFY_TOLERANCE,
};
pub use dataset::{generate_dataset, generate_queries, make_queries, Dataset, QueryKind};
pub use fault::{Fault, FaultKind, FaultPlan};
