// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Shared fixtures for the criterion benchmarks.

use fresh::harness::{generate_dataset, generate_queries, Dataset};
use fresh::{IndexOptions, SeriesConfig};

pub const SERIES_LEN: usize = 256;

/// Random-walk dataset plus noisy queries drawn from it.
pub fn workload(series: usize, queries: usize, sigma: f64, seed: u64) -> (Dataset, Dataset) {
    let data = generate_dataset(series, SERIES_LEN, seed).expect("dataset");
    let q = generate_queries(&data, queries, sigma, seed + 1).expect("queries");
    (data, q)
}

/// Desk-scale index options with the given thread count.
pub fn options(threads: usize) -> IndexOptions {
    IndexOptions {
        series: SeriesConfig::new(SERIES_LEN, 8, 8).expect("valid config"),
        leaf_size: 2000,
        threads,
        ..IndexOptions::default()
    }
}
