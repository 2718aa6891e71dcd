// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Multi-threaded driver: summarization, tree population and query
//! answering on `N` worker threads with no barriers between phases.
//!
//! Every worker runs every phase; a phase is complete as soon as any worker
//! returns from it, and the phase times reported are the gaps between those
//! first completions. A fault hook may stop a worker for good by unwinding
//! with [`ThreadCrash`]; the run succeeds as long as one worker survives.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use once_cell::race::OnceBox;

use crate::error::{Error, Result};
use crate::pipeline::{
    bc_traverse, finalize_traverse, tp_traverse, RawDataStore, SummarizationBuffers, TreePopulation,
    DEFAULT_TP_CHUNK,
};
use crate::query::{Answer, Query, Searcher};
use crate::refresh::{BackoffConfig, Hook, Phase, Worker};
use crate::series::{Breakpoints, SeriesConfig};
use crate::tree::Forest;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexOptions {
    pub series: SeriesConfig,
    /// Leaf capacity `M`.
    pub leaf_size: usize,
    /// Worker threads `N`.
    pub threads: usize,
    pub backoff: BackoffConfig,
    /// Buffer entries per population chunk.
    pub tp_chunk: usize,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            series: SeriesConfig {
                len: 256,
                segments: 8,
                max_bits: 8,
            },
            leaf_size: 2000,
            threads: 8,
            backoff: BackoffConfig::default(),
            tp_chunk: DEFAULT_TP_CHUNK,
        }
    }
}

impl IndexOptions {
    pub fn validate(&self) -> Result<()> {
        self.series.validate()?;
        if self.threads == 0 {
            return Err(Error::config("thread count must be at least 1"));
        }
        if self.leaf_size == 0 {
            return Err(Error::config("leaf size must be at least 1"));
        }
        if self.tp_chunk == 0 {
            return Err(Error::config("population chunk must hold at least 1 entry"));
        }
        Ok(())
    }
}

/// Unwind payload that stops a worker thread permanently.
#[derive(Debug)]
pub struct ThreadCrash;

/// Stops the calling worker; it takes no further steps in the run.
pub fn crash_thread() -> ! {
    resume_unwind(Box::new(ThreadCrash))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub summarization: Duration,
    pub tree: Duration,
    pub query: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.summarization + self.tree + self.query
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub times: PhaseTimes,
    /// Parts helped per phase: summarization, tree, query.
    pub helped: [u64; 3],
    pub buffer_entries: usize,
    pub buffer_distinct: usize,
    pub tree_pairs: usize,
    pub tree_distinct: usize,
    pub crashed_threads: usize,
}

impl RunStats {
    /// Stored tree pairs per distinct series; 1.0 means no duplicates.
    pub fn multiplicity(&self) -> f64 {
        ratio(self.tree_pairs, self.tree_distinct)
    }

    /// Summarization buffer entries per distinct series.
    pub fn buffer_multiplicity(&self) -> f64 {
        ratio(self.buffer_entries, self.buffer_distinct)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

const PHASES: [Phase; 3] = [Phase::Summarization, Phase::Tree, Phase::Query];

/// First-completion instants of each phase, in nanoseconds from the start.
pub(crate) struct Marks {
    start: Instant,
    done: [AtomicU64; 3],
}

impl Marks {
    pub(crate) fn new() -> Self {
        Marks {
            start: Instant::now(),
            done: std::array::from_fn(|_| AtomicU64::new(u64::MAX)),
        }
    }

    pub(crate) fn finish(&self, phase: usize) {
        let ns = self.start.elapsed().as_nanos() as u64;
        self.done[phase].fetch_min(ns, Ordering::AcqRel);
    }

    /// Gaps between consecutive completions; unfinished phases count zero.
    pub(crate) fn times(&self) -> PhaseTimes {
        let mut last = 0;
        let mut out = [Duration::ZERO; 3];
        for (i, slot) in out.iter_mut().enumerate() {
            let t = self.done[i].load(Ordering::Acquire);
            if t != u64::MAX {
                *slot = Duration::from_nanos(t.saturating_sub(last));
                last = t;
            }
        }
        PhaseTimes {
            summarization: out[0],
            tree: out[1],
            query: out[2],
        }
    }
}

pub(crate) struct WorkersOutcome {
    pub(crate) helped: [u64; 3],
    pub(crate) crashed: usize,
}

pub(crate) fn run_workers<F>(opts: &IndexOptions, hook: Option<&dyn Hook>, body: F) -> Result<WorkersOutcome>
where
    F: Fn(&mut Worker<'_>) + Sync,
{
    let n = opts.threads;
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|t| {
                let body = &body;
                s.spawn(move || {
                    catch_unwind(AssertUnwindSafe(|| {
                        let mut w = Worker::new(t, n).with_hook(hook).with_backoff(opts.backoff);
                        body(&mut w);
                        PHASES.map(|p| w.counters(p).helped)
                    }))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
    });
    let mut out = WorkersOutcome {
        helped: [0; 3],
        crashed: 0,
    };
    for r in results {
        match r {
            Ok(helped) => {
                for (acc, h) in out.helped.iter_mut().zip(helped) {
                    *acc += h;
                }
            }
            Err(payload) if payload.is::<ThreadCrash>() => out.crashed += 1,
            Err(payload) => resume_unwind(payload),
        }
    }
    if out.crashed == n {
        return Err(Error::config("every worker thread crashed"));
    }
    Ok(out)
}

/// A built index over borrowed series data.
pub struct Index<'d> {
    opts: IndexOptions,
    data: &'d [f32],
    table: Breakpoints,
    buffers: SummarizationBuffers,
    forest: Forest,
    next_epoch: AtomicU64,
}

/// Result of a combined build-and-query run.
pub struct Execution<'d> {
    pub index: Index<'d>,
    pub answers: Vec<Answer>,
    pub stats: RunStats,
}

fn check_queries(opts: &IndexOptions, queries: &[f32]) -> Result<usize> {
    if queries.len() % opts.series.len != 0 {
        return Err(Error::LengthMismatch {
            left: queries.len() % opts.series.len,
            right: opts.series.len,
        });
    }
    Ok(queries.len() / opts.series.len)
}

/// Query phase body shared by [`execute`] and [`Index::search_batch`].
struct QueryBatch<'a> {
    forest: &'a Forest,
    data: &'a [f32],
    table: &'a Breakpoints,
    queries: &'a [f32],
    count: usize,
    epoch_base: u64,
    searcher: OnceBox<Searcher<'a>>,
    states: Box<[OnceBox<Query<'a>>]>,
}

impl<'a> QueryBatch<'a> {
    fn new(index_parts: (&'a Forest, &'a [f32], &'a Breakpoints), queries: &'a [f32], count: usize, epoch_base: u64) -> Self {
        let (forest, data, table) = index_parts;
        QueryBatch {
            forest,
            data,
            table,
            queries,
            count,
            epoch_base,
            searcher: OnceBox::new(),
            states: (0..count).map(|_| OnceBox::new()).collect(),
        }
    }

    fn searcher(&self) -> &Searcher<'a> {
        self.searcher
            .get_or_init(|| Box::new(Searcher::new(self.forest, self.data, self.table)))
    }

    fn run(&self, w: &mut Worker<'_>) {
        let searcher = self.searcher();
        if searcher.is_empty() {
            return;
        }
        let n = self.forest.config().len;
        for i in 0..self.count {
            let span = 1.0 / self.count as f64;
            w.set_span(i as f64 * span, (i + 1) as f64 * span);
            let q = self.states[i].get_or_init(|| {
                let series = &self.queries[i * n..(i + 1) * n];
                Box::new(
                    searcher
                        .query(series, self.epoch_base + i as u64)
                        .expect("queries validated before the run"),
                )
            });
            searcher.run(q, w);
        }
    }

    fn answers(&self) -> Result<Vec<Answer>> {
        let searcher = self.searcher();
        if self.count > 0 && searcher.is_empty() {
            return Err(Error::EmptyIndex);
        }
        self.states
            .iter()
            .map(|s| searcher.answer(s.get().expect("every query ran")))
            .collect()
    }
}

/// Builds an index over `data` and answers `queries` (concatenated series)
/// on one set of worker threads.
pub fn execute<'d>(
    opts: &IndexOptions,
    data: &'d [f32],
    queries: &[f32],
    hook: Option<&dyn Hook>,
) -> Result<Execution<'d>> {
    opts.validate()?;
    let count = check_queries(opts, queries)?;
    let cfg = opts.series;
    let table = Breakpoints::new();
    let store = RawDataStore::new(data, cfg, opts.threads)?;
    let buffers = SummarizationBuffers::new(&cfg, opts.threads, store.count());
    let forest = Forest::new(cfg, opts.leaf_size, opts.threads)?;
    let pop = TreePopulation::new(cfg.root_count(), store.count(), opts.tp_chunk);
    let marks = Marks::new();
    let (answers, outcome) = {
        let batch = QueryBatch::new((&forest, data, &table), queries, count, 1);
        let outcome = run_workers(opts, hook, |w| {
            w.enter_phase(Phase::Summarization);
            bc_traverse(&store, &buffers, &table, w);
            marks.finish(0);
            w.enter_phase(Phase::Tree);
            w.set_span(0.0, 0.9);
            tp_traverse(&buffers, &forest, &pop, w);
            w.set_span(0.9, 1.0);
            finalize_traverse(&forest, &pop, w);
            marks.finish(1);
            if count > 0 {
                w.enter_phase(Phase::Query);
                batch.run(w);
                marks.finish(2);
            }
        })?;
        (batch.answers()?, outcome)
    };
    let index = Index {
        opts: *opts,
        data,
        table,
        buffers,
        forest,
        next_epoch: AtomicU64::new(count as u64 + 1),
    };
    let mut stats = index.content_stats();
    stats.times = marks.times();
    stats.helped = outcome.helped;
    stats.crashed_threads = outcome.crashed;
    Ok(Execution {
        index,
        answers,
        stats,
    })
}

impl<'d> Index<'d> {
    pub fn build(opts: &IndexOptions, data: &'d [f32]) -> Result<Self> {
        Ok(execute(opts, data, &[], None)?.index)
    }

    pub fn options(&self) -> &IndexOptions {
        &self.opts
    }

    pub fn data(&self) -> &'d [f32] {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.opts.series.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn buffers(&self) -> &SummarizationBuffers {
        &self.buffers
    }

    pub fn breakpoints(&self) -> &Breakpoints {
        &self.table
    }

    /// Single-threaded query access.
    pub fn searcher(&self) -> Searcher<'_> {
        Searcher::new(&self.forest, self.data, &self.table)
    }

    /// Buffer and tree duplicate counts.
    pub fn content_stats(&self) -> RunStats {
        let (buffer_entries, buffer_distinct) = self.buffers.multiplicity();
        let (tree_pairs, tree_distinct) = self.forest.multiplicity();
        RunStats {
            buffer_entries,
            buffer_distinct,
            tree_pairs,
            tree_distinct,
            ..RunStats::default()
        }
    }

    pub fn search(&self, query: &[f32]) -> Result<Answer> {
        let (answers, _) = self.search_batch(query, None)?;
        Ok(answers[0])
    }

    /// Answers concatenated `queries` on the configured number of threads.
    pub fn search_batch(&self, queries: &[f32], hook: Option<&dyn Hook>) -> Result<(Vec<Answer>, RunStats)> {
        let count = check_queries(&self.opts, queries)?;
        let base = self.next_epoch.fetch_add(count as u64, Ordering::Relaxed);
        let batch = QueryBatch::new((&self.forest, self.data, &self.table), queries, count, base);
        let marks = Marks::new();
        let outcome = run_workers(&self.opts, hook, |w| {
            w.enter_phase(Phase::Query);
            batch.run(w);
            marks.finish(2);
        })?;
        let answers = batch.answers()?;
        let times = marks.times();
        let stats = RunStats {
            times: PhaseTimes {
                query: times.query,
                ..PhaseTimes::default()
            },
            helped: outcome.helped,
            crashed_threads: outcome.crashed,
            ..self.content_stats()
        };
        Ok((answers, stats))
    }
}
