// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! `fresh`: build an index, answer queries, inject faults and check the
//! answers against a linear scan.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use fresh::harness::{run_benchmark, BaselineKind, DataSource, Fault, QueryKind, QuerySource, RunConfig};
use fresh::{IndexOptions, SeriesConfig};

#[derive(Debug, Parser)]
#[command(name = "fresh", version, about = "Lock-free data series index benchmark")]
struct Args {
    /// Dataset file (FRSH header unless --raw).
    #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
    dataset: Option<PathBuf>,

    /// Treat dataset and query files as headerless little-endian f32.
    #[arg(long)]
    raw: bool,

    /// Generate this many random-walk series instead of reading a file.
    #[arg(long, value_name = "COUNT")]
    generate: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Query file.
    #[arg(long, conflicts_with = "gen_queries")]
    queries: Option<PathBuf>,

    /// Generate this many queries.
    #[arg(long, value_name = "COUNT")]
    gen_queries: Option<usize>,

    /// Noise level of generated noisy queries.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,

    /// Kind of generated queries: noisy or walk.
    #[arg(long, default_value = "noisy")]
    query_kind: QueryKind,

    /// Series length.
    #[arg(long, default_value_t = 256)]
    n: usize,

    #[arg(long, default_value_t = 8)]
    segments: usize,

    #[arg(long, default_value_t = 2000)]
    leaf_size: usize,

    #[arg(long, default_value_t = 8)]
    max_bits: u8,

    #[arg(long, default_value_t = 8)]
    threads: usize,

    /// Check every answer against a linear scan; exit 1 on any mismatch.
    #[arg(long)]
    verify: bool,

    /// Fault such as t3:query:0.5:crash or t1:tree:0.2:delay=100ms.
    #[arg(long = "fault", value_name = "SPEC")]
    faults: Vec<Fault>,

    /// Run only summarization with a flat baseline:
    /// doall-split, fi-based or cas-based.
    #[arg(long)]
    baseline: Option<BaselineKind>,

    /// Output directory for metrics.csv and answers.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Args {
    fn config(&self) -> Result<RunConfig> {
        let series = SeriesConfig::new(self.n, self.segments, self.max_bits)?;
        let index = IndexOptions {
            series,
            leaf_size: self.leaf_size,
            threads: self.threads,
            ..IndexOptions::default()
        };
        let data = match (&self.dataset, self.generate) {
            (Some(path), _) => DataSource::File {
                path: path.clone(),
                raw: self.raw,
            },
            (None, Some(count)) => DataSource::Generate { count },
            (None, None) => bail!("one of --dataset or --generate is required"),
        };
        let queries = match (&self.queries, self.gen_queries) {
            (Some(path), _) => QuerySource::File(path.clone()),
            (None, Some(count)) => QuerySource::Generate {
                count,
                sigma: self.sigma,
                kind: self.query_kind,
            },
            (None, None) => QuerySource::None,
        };
        Ok(RunConfig {
            queries,
            seed: self.seed,
            faults: self.faults.clone(),
            baseline: self.baseline,
            verify: self.verify,
            out: self.out.clone(),
            ..RunConfig::new(index, data)
        })
    }
}

fn run(args: &Args) -> Result<bool> {
    let cfg = args.config()?;
    let out = run_benchmark(&cfg).context("benchmark failed")?;
    if out.unnormalized > 0 {
        eprintln!(
            "warning: {} series do not look z-normalized; pruning assumes normalized input",
            out.unnormalized
        );
    }
    let m = &out.metrics;
    println!(
        "{} series={} threads={} queries={} summarization={:.3}s tree={:.3}s query={:.3}s total={:.3}s",
        m.mode, m.series, m.threads, m.queries, m.summarization_s, m.tree_s, m.query_s, m.total_s
    );
    println!(
        "helped summarization={} tree={} query={} multiplicity={:.4} crashed={}",
        m.help_summarization, m.help_tree, m.help_query, m.multiplicity, m.crashed_threads
    );
    if cfg.verify {
        for mm in &out.mismatches {
            eprintln!("mismatch: {mm}");
        }
        println!(
            "verify: {} of {} answers match the linear scan",
            m.queries - out.mismatches.len(),
            m.queries
        );
    }
    Ok(out.mismatches.is_empty())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
