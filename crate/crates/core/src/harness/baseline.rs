// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Flat lock-free summarizers used as comparison points.
//!
//! All three keep one done flag per series and finish with a scan that
//! processes any series still not done, so a crashed thread never loses
//! work. They differ in how series are handed out first:
//!
//! * `doall-split`: thread `t` owns the `t`-th of `N` equal contiguous
//!   ranges, then scans circularly from the end of its range.
//! * `fi-based`: one shared fetch-and-increment counter.
//! * `cas-based`: each thread walks all series from its own offset and
//!   claims each one with a compare-and-swap on a per-series claim flag.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::engine::{run_workers, IndexOptions, Marks, RunStats};
use crate::error::{Error, Result};
use crate::pipeline::{buffer_creation, RawDataStore, SummarizationBuffers};
use crate::refresh::{Hook, Phase, Site, Worker};
use crate::series::Breakpoints;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    DoAllSplit,
    FiBased,
    CasBased,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::DoAllSplit, BaselineKind::FiBased, BaselineKind::CasBased];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::DoAllSplit => "doall-split",
            BaselineKind::FiBased => "fi-based",
            BaselineKind::CasBased => "cas-based",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownBaseline(s.to_string()))
    }
}

/// Shared flags of one baseline run.
pub struct BaselineState {
    kind: BaselineKind,
    done: Box<[AtomicBool]>,
    claimed: Box<[AtomicBool]>,
    next: AtomicUsize,
}

impl BaselineState {
    pub fn new(kind: BaselineKind, count: usize) -> Self {
        let flags = |n: usize| (0..n).map(|_| AtomicBool::new(false)).collect();
        BaselineState {
            kind,
            done: flags(count),
            claimed: flags(if kind == BaselineKind::CasBased { count } else { 0 }),
            next: AtomicUsize::new(0),
        }
    }

    pub fn all_done(&self) -> bool {
        self.done.iter().all(|d| d.load(Ordering::Acquire))
    }

    /// Runs the calling thread's share, then helps until every series is done.
    pub fn run(
        &self,
        store: &RawDataStore<'_>,
        buffers: &SummarizationBuffers,
        table: &Breakpoints,
        w: &mut Worker<'_>,
    ) {
        let count = self.done.len();
        let (t, n) = (w.id(), w.threads());
        let mut owned = 0u64;
        let mut own = |i: usize, f: f64, w: &mut Worker<'_>| {
            w.set_fraction(f);
            w.checkpoint(Site::AfterAcquire, i);
            buffer_creation(store, buffers, table, i, t);
            w.checkpoint(Site::BeforeDone, i);
            self.done[i].store(true, Ordering::Release);
            owned += 1;
        };
        let scan_from = match self.kind {
            BaselineKind::DoAllSplit => {
                let per = count.div_ceil(n);
                let (lo, hi) = ((t * per).min(count), ((t + 1) * per).min(count));
                for i in lo..hi {
                    own(i, (i - lo) as f64 / (hi - lo) as f64, w);
                }
                hi
            }
            BaselineKind::FiBased => {
                loop {
                    let i = self.next.fetch_add(1, Ordering::AcqRel);
                    if i >= count {
                        break;
                    }
                    own(i, i as f64 / count as f64, w);
                }
                0
            }
            BaselineKind::CasBased => {
                let start = t * count / n;
                for j in 0..count {
                    let i = (start + j) % count;
                    if self.claimed[i]
                        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                        .is_ok()
                    {
                        own(i, j as f64 / count as f64, w);
                    }
                }
                0
            }
        };
        w.set_fraction(1.0);
        w.checkpoint(Site::HelpScan, usize::MAX);
        let mut helped = 0u64;
        for j in 0..count {
            let i = (scan_from + j) % count;
            if !self.done[i].load(Ordering::Acquire) {
                w.checkpoint(Site::HelpStart, i);
                buffer_creation(store, buffers, table, i, t);
                self.done[i].store(true, Ordering::Release);
                helped += 1;
            }
        }
        w.record_parts(owned, helped);
    }
}

/// Summarization-only run of a baseline.
pub struct BaselineRun {
    pub buffers: SummarizationBuffers,
    pub stats: RunStats,
}

pub fn run_baseline(
    kind: BaselineKind,
    opts: &IndexOptions,
    data: &[f32],
    hook: Option<&dyn Hook>,
) -> Result<BaselineRun> {
    opts.validate()?;
    let table = Breakpoints::new();
    let store = RawDataStore::new(data, opts.series, opts.threads)?;
    let buffers = SummarizationBuffers::new(&opts.series, opts.threads, store.count());
    let state = BaselineState::new(kind, store.count());
    let marks = Marks::new();
    let outcome = run_workers(opts, hook, |w| {
        w.enter_phase(Phase::Summarization);
        state.run(&store, &buffers, &table, w);
        marks.finish(0);
    })?;
    let (buffer_entries, buffer_distinct) = buffers.multiplicity();
    let stats = RunStats {
        times: marks.times(),
        helped: outcome.helped,
        buffer_entries,
        buffer_distinct,
        crashed_threads: outcome.crashed,
        ..RunStats::default()
    };
    Ok(BaselineRun { buffers, stats })
}
