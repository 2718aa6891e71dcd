// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! End-to-end benchmark runs with optional oracle verification.
//!
//! A run writes two CSV files into its output directory:
//!
//! * `metrics.csv`, one row per run, appended to if it already exists.
//!   Columns, in order: `mode, series, n, segments, leaf_size, max_bits,
//!   threads, queries, query_kind, sigma, faults, summarization_s, tree_s,
//!   query_s, total_s, help_summarization, help_tree, help_query,
//!   multiplicity, buffer_multiplicity, crashed_threads, verified,
//!   mismatches`.
//! * `answers.csv` with `query_id, series_id, distance`.
//!
//! Generated datasets and query sets are saved next to them as
//! `dataset.bin` and `queries.bin`.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::engine::{execute, IndexOptions, RunStats};
use crate::error::{Error, Result};
use crate::harness::baseline::{run_baseline, BaselineKind};
use crate::harness::dataset::{generate_dataset, make_queries, Dataset, QueryKind};
use crate::harness::fault::{Fault, FaultPlan};
use crate::query::Answer;
use crate::series::{check_normalization, distance_sq};

/// Relative distance tolerance of verification.
pub const VERIFY_TOLERANCE: f64 = 1e-4;

/// Nearest series to `query` by linear scan, as `(index, distance)`.
/// Ties go to the lowest index. `None` for an empty dataset.
pub fn brute_force_nn(data: &[f32], n: usize, query: &[f32]) -> Option<(usize, f64)> {
    assert_eq!(query.len(), n, "query length");
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in data.chunks_exact(n).enumerate() {
        let d = distance_sq(s, query);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, d)| (i, d.sqrt()))
}

/// Whether `got` is within the verification tolerance of `want`.
pub fn distance_matches(got: f64, want: f64) -> bool {
    (got - want).abs() <= VERIFY_TOLERANCE * want.max(f64::MIN_POSITIVE)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File { path: PathBuf, raw: bool },
    Generate { count: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum QuerySource {
    #[default]
    None,
    /// Read with the same `raw` setting as the dataset.
    File(PathBuf),
    Generate {
        count: usize,
        sigma: f64,
        kind: QueryKind,
    },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub index: IndexOptions,
    pub data: DataSource,
    pub queries: QuerySource,
    pub seed: u64,
    pub faults: Vec<Fault>,
    pub baseline: Option<BaselineKind>,
    pub verify: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(index: IndexOptions, data: DataSource) -> Self {
        RunConfig {
            index,
            data,
            queries: QuerySource::None,
            seed: 0,
            faults: Vec::new(),
            baseline: None,
            verify: false,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.index.validate()?;
        if let QuerySource::Generate { sigma, .. } = self.queries {
            if !(0.0..=1.0).contains(&sigma) {
                return Err(Error::config(format!("noise sigma {sigma} is outside [0, 1]")));
            }
        }
        if let Some(f) = self.faults.iter().find(|f| f.thread >= self.index.threads) {
            return Err(Error::config(format!(
                "fault {f} names a thread outside 0..{}",
                self.index.threads
            )));
        }
        if self.baseline.is_some() && self.queries != QuerySource::None {
            return Err(Error::config("baseline runs cover summarization only; drop the query options"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub series: usize,
    pub n: usize,
    pub segments: usize,
    pub leaf_size: usize,
    pub max_bits: u8,
    pub threads: usize,
    pub queries: usize,
    pub query_kind: String,
    pub sigma: Option<f64>,
    pub faults: String,
    pub summarization_s: f64,
    pub tree_s: f64,
    pub query_s: f64,
    pub total_s: f64,
    pub help_summarization: u64,
    pub help_tree: u64,
    pub help_query: u64,
    pub multiplicity: f64,
    pub buffer_multiplicity: f64,
    pub crashed_threads: usize,
    pub verified: Option<bool>,
    pub mismatches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub query: usize,
    pub expected: (usize, f64),
    pub got: Answer,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "query {}: expected series {} at {:.9}, got series {} at {:.9}",
            self.query, self.expected.0, self.expected.1, self.got.id, self.got.distance
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub metrics: MetricsReport,
    pub stats: RunStats,
    pub answers: Vec<Answer>,
    pub mismatches: Vec<Mismatch>,
    /// Input series that do not look z-normalized.
    pub unnormalized: usize,
}

fn load(path: &Path, raw: bool, n: usize) -> Result<Dataset> {
    if raw {
        Dataset::read_raw(path, n)
    } else {
        Dataset::read(path, Some(n))
    }
}

fn write_metrics(path: &Path, m: &MetricsReport) -> Result<()> {
    let fresh = fs::metadata(path).map_or(true, |md| md.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(m)?;
    w.flush()?;
    Ok(())
}

fn write_answers(path: &Path, answers: &[Answer]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "series_id", "distance"])?;
    for (i, a) in answers.iter().enumerate() {
        w.serialize((i, a.id, a.distance))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one configured benchmark and writes its outputs.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let n = cfg.index.series.len;
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
    }
    let save = |name: &str, d: &Dataset| -> Result<()> {
        match &cfg.out {
            Some(out) => d.write(&out.join(name)),
            None => Ok(()),
        }
    };
    let data = match &cfg.data {
        DataSource::File { path, raw } => load(path, *raw, n)?,
        DataSource::Generate { count } => {
            let d = generate_dataset(*count, n, cfg.seed)?;
            save("dataset.bin", &d)?;
            d
        }
    };
    let unnormalized = data.iter().filter(|s| check_normalization(s).is_some()).count();
    let (queries, kind, sigma) = match &cfg.queries {
        QuerySource::None => (Dataset { n, values: Vec::new() }, "none", None),
        QuerySource::File(path) => {
            let raw = matches!(cfg.data, DataSource::File { raw: true, .. });
            (load(path, raw, n)?, "file", None)
        }
        QuerySource::Generate { count, sigma, kind } => {
            let q = make_queries(*kind, &data, *count, *sigma, cfg.seed.wrapping_add(1))?;
            save("queries.bin", &q)?;
            let sigma = (*kind == QueryKind::Noisy).then_some(*sigma);
            (q, kind.name(), sigma)
        }
    };
    let plan = FaultPlan::new(cfg.faults.clone());
    let (mode, stats, answers) = match cfg.baseline {
        Some(kind) => {
            let run = run_baseline(kind, &cfg.index, &data.values, plan.as_hook())?;
            (kind.name(), run.stats, Vec::new())
        }
        None => {
            let run = execute(&cfg.index, &data.values, &queries.values, plan.as_hook())?;
            ("fresh", run.stats, run.answers)
        }
    };
    let mut mismatches = Vec::new();
    if cfg.verify {
        for (i, (a, q)) in answers.iter().zip(queries.iter()).enumerate() {
            let expected = brute_force_nn(&data.values, n, q).ok_or(Error::EmptyIndex)?;
            if !distance_matches(a.distance, expected.1) {
                mismatches.push(Mismatch {
                    query: i,
                    expected,
                    got: *a,
                });
            }
        }
    }
    let t = stats.times;
    let metrics = MetricsReport {
        mode: mode.to_string(),
        series: data.count(),
        n,
        segments: cfg.index.series.segments,
        leaf_size: cfg.index.leaf_size,
        max_bits: cfg.index.series.max_bits,
        threads: cfg.index.threads,
        queries: answers.len(),
        query_kind: kind.to_string(),
        sigma,
        faults: plan.to_string(),
        summarization_s: t.summarization.as_secs_f64(),
        tree_s: t.tree.as_secs_f64(),
        query_s: t.query.as_secs_f64(),
        total_s: t.total().as_secs_f64(),
        help_summarization: stats.helped[0],
        help_tree: stats.helped[1],
        help_query: stats.helped[2],
        multiplicity: stats.multiplicity(),
        buffer_multiplicity: stats.buffer_multiplicity(),
        crashed_threads: stats.crashed_threads,
        verified: cfg.verify.then_some(mismatches.is_empty()),
        mismatches: mismatches.len(),
    };
    if let Some(out) = &cfg.out {
        write_metrics(&out.join("metrics.csv"), &metrics)?;
        if cfg.baseline.is_none() {
            write_answers(&out.join("answers.csv"), &answers)?;
        }
    }
    Ok(BenchOutcome {
        metrics,
        stats,
        answers,
        mismatches,
        unnormalized,
    })
}
