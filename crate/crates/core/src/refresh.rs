// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Lock-free processing of a partitioned workload.
//!
//! A [`RefreshPlan`] splits a workload into `k` parts. Threads acquire parts
//! through a fetch-and-increment counter and process them in *expeditive*
//! mode, then scan the done flags and *help* every part still unfinished:
//! after a short backoff they raise the part's helping flag and process it in
//! *standard* mode. When [`refresh_run`] returns, every part is done, so the
//! next stage can start without a barrier.
//!
//! Processors may call [`refresh_run`] again from inside a part on a child
//! plan, passing their own [`PartCtx`] as parent. A nested part is standard
//! as soon as any enclosing part is, so a helper never runs nested work
//! expeditively and an owner notices helpers that arrived at an outer level.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

/// Maximum nesting of plans inside one phase.
pub const MAX_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Synchronization-light path; valid only while no helper touches the part.
    Expeditive,
    /// Helper-tolerant path.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Owner,
    Helper,
}

pub struct RefreshPlan {
    done: Box<[AtomicBool]>,
    help: Box<[AtomicBool]>,
    next: AtomicUsize,
    limit: AtomicUsize,
    hint_ns: AtomicU64,
}

impl RefreshPlan {
    pub fn new(parts: usize) -> Self {
        RefreshPlan {
            done: (0..parts).map(|_| AtomicBool::new(false)).collect(),
            help: (0..parts).map(|_| AtomicBool::new(false)).collect(),
            next: AtomicUsize::new(0),
            limit: AtomicUsize::new(parts),
            hint_ns: AtomicU64::new(0),
        }
    }

    /// A plan whose parts at or beyond `present` are absent and count as done.
    pub fn with_present(parts: usize, present: usize) -> Self {
        let plan = Self::new(parts);
        plan.limit.store(present.min(parts), Ordering::Relaxed);
        plan
    }

    pub fn parts(&self) -> usize {
        self.done.len()
    }

    /// Parts below the limit are live; the rest count as done.
    pub fn limit(&self) -> usize {
        self.limit.load(Ordering::Acquire)
    }

    /// Declares every part from `at` onwards finished without processing.
    pub fn truncate(&self, at: usize) {
        self.limit.fetch_min(at, Ordering::AcqRel);
    }

    #[inline]
    pub fn is_done(&self, part: usize) -> bool {
        part >= self.limit() || self.done[part].load(Ordering::Acquire)
    }

    pub fn all_done(&self) -> bool {
        (0..self.parts()).all(|i| self.is_done(i))
    }

    #[inline]
    pub fn is_helped(&self, part: usize) -> bool {
        self.help[part].load(Ordering::SeqCst)
    }

    pub fn done_flags(&self) -> Vec<bool> {
        (0..self.parts()).map(|i| self.is_done(i)).collect()
    }

    pub fn help_flags(&self) -> Vec<bool> {
        (0..self.parts()).map(|i| self.is_helped(i)).collect()
    }

    fn mark_done(&self, part: usize) {
        self.done[part].store(true, Ordering::Release);
    }

    fn raise_help(&self, part: usize) {
        // SeqCst pairs with owners that write shared state and then read the
        // flag: either the owner sees the flag or the helper sees the write.
        self.help[part].store(true, Ordering::SeqCst);
    }

    fn fraction(&self, ticket: usize) -> f64 {
        if self.parts() == 0 {
            1.0
        } else {
            ticket as f64 / self.parts() as f64
        }
    }
}

impl std::fmt::Debug for RefreshPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RefreshPlan")
            .field("parts", &self.parts())
            .field("limit", &self.limit())
            .field("next", &self.next.load(Ordering::Relaxed))
            .finish()
    }
}

/// Fetch-and-increment acquisition; each index is handed out at most once.
pub fn acquire_part(plan: &RefreshPlan) -> Option<usize> {
    let limit = plan.limit();
    if plan.next.load(Ordering::Relaxed) >= limit {
        return None;
    }
    let ticket = plan.next.fetch_add(1, Ordering::AcqRel);
    (ticket < plan.limit()).then_some(ticket)
}

pub fn mode_for(plan: &RefreshPlan, part: usize) -> Mode {
    if plan.is_helped(part) {
        Mode::Standard
    } else {
        Mode::Expeditive
    }
}

/// What a processor sees of the part it is working on.
pub struct PartCtx<'p> {
    plan: &'p RefreshPlan,
    part: usize,
    role: Role,
    standard: Cell<bool>,
    parent: Option<&'p PartCtx<'p>>,
}

impl<'p> PartCtx<'p> {
    fn new(
        plan: &'p RefreshPlan,
        part: usize,
        role: Role,
        parent: Option<&'p PartCtx<'p>>,
    ) -> Self {
        PartCtx {
            plan,
            part,
            role,
            standard: Cell::new(role == Role::Helper),
            parent,
        }
    }

    pub fn part(&self) -> usize {
        self.part
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn plan(&self) -> &'p RefreshPlan {
        self.plan
    }

    /// Current mode. Sticky: once standard, always standard for this part.
    pub fn mode(&self) -> Mode {
        if self.standard.get() {
            return Mode::Standard;
        }
        let helped = self.plan.is_helped(self.part)
            || self.parent.is_some_and(|p| p.mode() == Mode::Standard);
        if helped {
            self.standard.set(true);
            Mode::Standard
        } else {
            Mode::Expeditive
        }
    }

    /// True once some thread has finished this part; processing may stop.
    #[inline]
    pub fn is_done(&self) -> bool {
        self.plan.is_done(self.part)
    }
}

pub trait PartProcessor: Sync {
    fn process(&self, ctx: &PartCtx<'_>, worker: &mut Worker<'_>);
}

impl<F> PartProcessor for F
where
    F: Fn(&PartCtx<'_>, &mut Worker<'_>) + Sync,
{
    fn process(&self, ctx: &PartCtx<'_>, worker: &mut Worker<'_>) {
        self(ctx, worker)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackoffConfig {
    /// Multiplier applied to the running average part time.
    pub beta: f64,
    pub max: Duration,
    /// Weight of the newest sample in the running average.
    pub weight: f64,
    /// Estimate used before a thread has timed any part at a level.
    pub initial: Duration,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            beta: 1.0,
            max: Duration::from_millis(100),
            weight: 0.25,
            initial: Duration::from_micros(50),
        }
    }
}

/// Per-thread running average of part processing time at one plan level.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackoffEstimator {
    avg_ns: f64,
    samples: u64,
}

impl BackoffEstimator {
    pub fn record(&mut self, elapsed: Duration, weight: f64) {
        let ns = elapsed.as_nanos() as f64;
        self.avg_ns = if self.samples == 0 {
            ns
        } else {
            (1.0 - weight) * self.avg_ns + weight * ns
        };
        self.samples += 1;
    }

    pub fn average(&self) -> Option<Duration> {
        (self.samples > 0).then(|| Duration::from_nanos(self.avg_ns as u64))
    }

    pub fn wait_duration(&self, cfg: &BackoffConfig, hint: Option<Duration>) -> Duration {
        let base = self.average().or(hint).unwrap_or(cfg.initial);
        base.mul_f64(cfg.beta.max(0.0)).min(cfg.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Summarization,
    Tree,
    Query,
    Other,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Summarization => "summarization",
            Phase::Tree => "tree",
            Phase::Query => "query",
            Phase::Other => "other",
        }
    }

    fn slot(self) -> usize {
        match self {
            Phase::Summarization => 0,
            Phase::Tree => 1,
            Phase::Query => 2,
            Phase::Other => 3,
        }
    }
}

/// Named places where hooks run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    AfterAcquire,
    /// Called by processors between units of work inside a part.
    MidProcess,
    BeforeDone,
    /// Start of the scan for unfinished parts.
    HelpScan,
    /// After raising a part's helping flag, before processing it.
    HelpStart,
    /// Tree insert: slot claimed, pair not yet written.
    SlotClaimed,
    /// Tree split: replacement built, not yet installed.
    BeforeInstall,
}

#[derive(Clone, Copy, Debug)]
pub struct Checkpoint {
    pub thread: usize,
    pub phase: Phase,
    pub site: Site,
    pub depth: usize,
    pub part: usize,
    /// Estimated progress through the current phase, in `[0, 1]`.
    pub progress: f64,
}

/// Test and fault-injection hook. Runs on the thread that reached the site.
pub trait Hook: Sync {
    fn checkpoint(&self, cp: &Checkpoint);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    pub owned: u64,
    pub helped: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunReport {
    pub owned: usize,
    pub helped: Vec<usize>,
}

/// Thread-local state threaded through every plan level.
pub struct Worker<'h> {
    id: usize,
    threads: usize,
    hook: Option<&'h dyn Hook>,
    backoff_cfg: BackoffConfig,
    backoff: [BackoffEstimator; MAX_DEPTH],
    depth: usize,
    phase: Phase,
    span: (f64, f64),
    progress: f64,
    counters: [PhaseCounters; 4],
}

impl<'h> Worker<'h> {
    pub fn new(id: usize, threads: usize) -> Self {
        assert!(id < threads, "worker id {id} out of range for {threads} threads");
        Worker {
            id,
            threads,
            hook: None,
            backoff_cfg: BackoffConfig::default(),
            backoff: [BackoffEstimator::default(); MAX_DEPTH],
            depth: 0,
            phase: Phase::Other,
            span: (0.0, 1.0),
            progress: 0.0,
            counters: [PhaseCounters::default(); 4],
        }
    }

    pub fn with_hook(mut self, hook: Option<&'h dyn Hook>) -> Self {
        self.hook = hook;
        self
    }

    pub fn with_backoff(mut self, cfg: BackoffConfig) -> Self {
        self.backoff_cfg = cfg;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Starts a phase; top-level acquisitions map onto `[lo, hi]` of it.
    pub fn enter_phase(&mut self, phase: Phase) {
        if phase != self.phase {
            self.backoff = [BackoffEstimator::default(); MAX_DEPTH];
        }
        self.phase = phase;
        self.set_span(0.0, 1.0);
    }

    pub fn span(&self) -> (f64, f64) {
        self.span
    }

    pub fn set_span(&mut self, lo: f64, hi: f64) {
        self.span = (lo, hi);
        self.progress = lo;
    }

    pub fn counters(&self, phase: Phase) -> PhaseCounters {
        self.counters[phase.slot()]
    }

    /// Adds parts processed outside [`refresh_run`] to the current phase.
    pub fn record_parts(&mut self, owned: u64, helped: u64) {
        let slot = self.phase.slot();
        self.counters[slot].owned += owned;
        self.counters[slot].helped += helped;
    }

    #[inline]
    pub fn checkpoint(&self, site: Site, part: usize) {
        if let Some(hook) = self.hook {
            hook.checkpoint(&Checkpoint {
                thread: self.id,
                phase: self.phase,
                site,
                depth: self.depth.saturating_sub(1),
                part,
                progress: self.progress,
            });
        }
    }

    /// Sets progress to fraction `f` of the current span. Refresh runs do
    /// this on their own; other work-distribution schemes call it directly.
    pub fn set_fraction(&mut self, f: f64) {
        let (lo, hi) = self.span;
        self.progress = lo + (hi - lo) * f.clamp(0.0, 1.0);
    }

    fn backoff_wait(&self, depth: usize, plan: &RefreshPlan, part: usize) {
        let hint = match plan.hint_ns.load(Ordering::Relaxed) {
            0 => None,
            ns => Some(Duration::from_nanos(ns)),
        };
        let wait = self.backoff[depth].wait_duration(&self.backoff_cfg, hint);
        if wait.is_zero() {
            return;
        }
        let deadline = Instant::now() + wait;
        while !plan.is_done(part) && Instant::now() < deadline {
            std::thread::yield_now();
        }
    }
}

/// Processes the whole plan from the calling thread's point of view: own
/// acquisitions first, then helping. Returns once every part is done.
pub fn refresh_run<P: PartProcessor + ?Sized>(
    plan: &RefreshPlan,
    proc: &P,
    worker: &mut Worker<'_>,
    parent: Option<&PartCtx<'_>>,
) -> RunReport {
    let depth = worker.depth;
    assert!(depth < MAX_DEPTH, "refresh plans nested deeper than {MAX_DEPTH}");
    worker.depth += 1;
    let mut report = RunReport::default();
    while let Some(part) = acquire_part(plan) {
        if depth == 0 {
            worker.set_fraction(plan.fraction(part));
        }
        worker.checkpoint(Site::AfterAcquire, part);
        let start = Instant::now();
        let ctx = PartCtx::new(plan, part, Role::Owner, parent);
        proc.process(&ctx, worker);
        worker.checkpoint(Site::BeforeDone, part);
        plan.mark_done(part);
        let weight = worker.backoff_cfg.weight;
        worker.backoff[depth].record(start.elapsed(), weight);
        if let Some(avg) = worker.backoff[depth].average() {
            plan.hint_ns.store(avg.as_nanos().max(1) as u64, Ordering::Relaxed);
        }
        report.owned += 1;
    }
    report.helped = help_scan(plan, proc, worker, depth);
    worker.depth -= 1;
    let slot = worker.phase.slot();
    worker.counters[slot].owned += report.owned as u64;
    worker.counters[slot].helped += report.helped.len() as u64;
    report
}

/// The scan-and-help half of [`refresh_run`], for a caller that has already
/// exhausted acquisition.
pub fn help_phase<P: PartProcessor + ?Sized>(
    plan: &RefreshPlan,
    proc: &P,
    worker: &mut Worker<'_>,
) -> Vec<usize> {
    let depth = worker.depth;
    assert!(depth < MAX_DEPTH);
    worker.depth += 1;
    let helped = help_scan(plan, proc, worker, depth);
    worker.depth -= 1;
    worker.counters[worker.phase.slot()].helped += helped.len() as u64;
    helped
}

fn help_scan<P: PartProcessor + ?Sized>(
    plan: &RefreshPlan,
    proc: &P,
    worker: &mut Worker<'_>,
    depth: usize,
) -> Vec<usize> {
    if depth == 0 {
        worker.set_fraction(1.0);
    }
    worker.checkpoint(Site::HelpScan, usize::MAX);
    let mut helped = Vec::new();
    let mut part = 0;
    while part < plan.limit() {
        if !plan.is_done(part) {
            worker.backoff_wait(depth, plan, part);
            if !plan.is_done(part) {
                plan.raise_help(part);
                worker.checkpoint(Site::HelpStart, part);
                let ctx = PartCtx::new(plan, part, Role::Helper, None);
                proc.process(&ctx, worker);
                plan.mark_done(part);
                helped.push(part);
            }
        }
        part += 1;
    }
    helped
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;
    use std::sync::{Condvar, Mutex};

    fn counting(plan_parts: usize) -> Vec<AtomicU32> {
        (0..plan_parts).map(|_| AtomicU32::new(0)).collect()
    }

    /// One-shot gate for suspending a thread at a checkpoint.
    #[derive(Default)]
    struct Gate {
        open: Mutex<bool>,
        cv: Condvar,
    }

    impl Gate {
        fn wait(&self) {
            let mut open = self.open.lock().unwrap();
            while !*open {
                open = self.cv.wait(open).unwrap();
            }
        }
        fn open(&self) {
            *self.open.lock().unwrap() = true;
            self.cv.notify_all();
        }
    }

    #[test]
    fn acquire_is_monotone_and_exhausts() {
        let plan = RefreshPlan::new(3);
        assert_eq!(acquire_part(&plan), Some(0));
        assert_eq!(acquire_part(&plan), Some(1));
        assert_eq!(acquire_part(&plan), Some(2));
        assert_eq!(acquire_part(&plan), None);
        assert_eq!(acquire_part(&plan), None);
    }

    #[test]
    fn concurrent_acquire_is_unique() {
        let plan = RefreshPlan::new(10_000);
        let seen: Vec<Vec<usize>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    s.spawn(|| {
                        let mut got = Vec::new();
                        while let Some(i) = acquire_part(&plan) {
                            got.push(i);
                        }
                        got
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut all: Vec<usize> = seen.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10_000).collect::<Vec<_>>());
    }

    #[test]
    fn fresh_plan_is_expeditive_everywhere() {
        let plan = RefreshPlan::new(4);
        assert!((0..4).all(|i| mode_for(&plan, i) == Mode::Expeditive));
        plan.raise_help(2);
        assert_eq!(mode_for(&plan, 2), Mode::Standard);
        assert_eq!(mode_for(&plan, 1), Mode::Expeditive);
    }

    #[test]
    fn solo_run_processes_everything_expeditively() {
        let plan = RefreshPlan::new(4);
        let modes = Mutex::new(Vec::new());
        let proc = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| {
            modes.lock().unwrap().push((ctx.part(), ctx.mode()));
        };
        let mut worker = Worker::new(0, 1);
        let report = refresh_run(&plan, &proc, &mut worker, None);
        assert_eq!(report.owned, 4);
        assert!(report.helped.is_empty());
        assert!(plan.all_done());
        assert!(modes
            .lock()
            .unwrap()
            .iter()
            .all(|&(_, m)| m == Mode::Expeditive));
    }

    #[test]
    fn help_phase_on_finished_plan_helps_nothing() {
        let plan = RefreshPlan::new(5);
        let mut worker = Worker::new(0, 1);
        let proc = |_: &PartCtx<'_>, _: &mut Worker<'_>| {};
        refresh_run(&plan, &proc, &mut worker, None);
        let helped = help_phase(&plan, &proc, &mut worker);
        assert!(helped.is_empty());
    }

    #[test]
    fn truncated_parts_count_as_done() {
        let plan = RefreshPlan::new(10);
        plan.truncate(4);
        let runs = counting(10);
        let proc = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| {
            runs[ctx.part()].fetch_add(1, Ordering::Relaxed);
        };
        let mut worker = Worker::new(0, 1);
        let report = refresh_run(&plan, &proc, &mut worker, None);
        assert_eq!(report.owned, 4);
        assert!(plan.all_done());
        assert!(runs[4..].iter().all(|c| c.load(Ordering::Relaxed) == 0));
    }

    #[test]
    fn nested_parts_see_outer_help_flags() {
        let outer = RefreshPlan::new(2);
        let inner: Vec<RefreshPlan> = (0..2).map(|_| RefreshPlan::new(3)).collect();
        let seen = Mutex::new(Vec::new());
        let leaf = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| {
            seen.lock().unwrap().push(ctx.mode());
        };
        let proc = |ctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            if ctx.part() == 1 {
                ctx.plan().raise_help(1);
            }
            refresh_run(&inner[ctx.part()], &leaf, w, Some(ctx));
        };
        let mut worker = Worker::new(0, 1);
        refresh_run(&outer, &proc, &mut worker, None);
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.len(), 6);
        assert!(seen[..3].iter().all(|&m| m == Mode::Expeditive));
        assert!(seen[3..].iter().all(|&m| m == Mode::Standard));
    }

    /// Thread A stalls right after acquiring part 2; thread B must finish the
    /// whole plan on its own, helping part 2 in standard mode.
    #[test]
    fn stalled_owner_is_helped() {
        struct StallAfterAcquire {
            gate: Gate,
        }
        impl Hook for StallAfterAcquire {
            fn checkpoint(&self, cp: &Checkpoint) {
                if cp.thread == 0 && cp.site == Site::AfterAcquire && cp.part == 2 {
                    self.gate.wait();
                }
            }
        }
        let hook = StallAfterAcquire {
            gate: Gate::default(),
        };
        let plan = RefreshPlan::new(4);
        let runs = counting(4);
        let helper_modes = Mutex::new(Vec::new());
        let proc = |ctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            runs[ctx.part()].fetch_add(1, Ordering::SeqCst);
            if w.id() == 1 {
                helper_modes.lock().unwrap().push((ctx.part(), ctx.role(), ctx.mode()));
            }
        };
        let b_report = std::thread::scope(|s| {
            let a = s.spawn(|| {
                let mut w = Worker::new(0, 2).with_hook(Some(&hook));
                // A grabs parts 0, 1 and 2 before B starts.
                let mut owned = Vec::new();
                for _ in 0..3 {
                    owned.push(acquire_part(&plan).unwrap());
                }
                for &p in &owned[..2] {
                    let ctx = PartCtx::new(&plan, p, Role::Owner, None);
                    proc.process(&ctx, &mut w);
                    plan.mark_done(p);
                }
                w.depth = 1;
                w.checkpoint(Site::AfterAcquire, 2);
                // resumed after B returned
                let ctx = PartCtx::new(&plan, 2, Role::Owner, None);
                assert!(ctx.is_done());
                assert_eq!(ctx.mode(), Mode::Standard);
            });
            let report = s
                .spawn(|| {
                    let mut w = Worker::new(1, 2).with_backoff(BackoffConfig {
                        initial: Duration::from_millis(1),
                        ..BackoffConfig::default()
                    });
                    while plan.next.load(Ordering::SeqCst) < 3 {
                        std::thread::yield_now();
                    }
                    refresh_run(&plan, &proc, &mut w, None)
                })
                .join()
                .unwrap();
            assert!(plan.all_done(), "B returned with unfinished parts");
            hook.gate.open();
            a.join().unwrap();
            report
        });
        assert_eq!(b_report.owned, 1);
        assert_eq!(b_report.helped, vec![2]);
        assert!(plan.is_helped(2));
        let modes = helper_modes.into_inner().unwrap();
        assert!(modes.contains(&(2, Role::Helper, Mode::Standard)));
        assert!(runs.iter().all(|c| c.load(Ordering::SeqCst) >= 1));
    }

    /// The owner is paused mid-part, a helper raises the flag, and every
    /// write the owner makes after resuming is on the standard path.
    #[test]
    fn owner_switches_to_standard_after_flag_flips() {
        struct Script {
            owner_paused: Gate,
            resume_owner: Gate,
        }
        impl Hook for Script {
            fn checkpoint(&self, cp: &Checkpoint) {
                match (cp.thread, cp.site) {
                    (0, Site::MidProcess) if cp.part == 1 => {
                        self.owner_paused.open();
                        self.resume_owner.wait();
                    }
                    (1, Site::HelpStart) => self.resume_owner.open(),
                    _ => {}
                }
            }
        }
        let script = Script {
            owner_paused: Gate::default(),
            resume_owner: Gate::default(),
        };
        let plan = RefreshPlan::new(1);
        let writes = Mutex::new(Vec::new());
        let proc = |ctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            for step in 0..4 {
                if ctx.role() == Role::Helper && ctx.is_done() {
                    return;
                }
                let mode = ctx.mode();
                writes.lock().unwrap().push((w.id(), step, mode));
                w.checkpoint(Site::MidProcess, step);
            }
        };
        std::thread::scope(|s| {
            s.spawn(|| {
                let mut w = Worker::new(0, 2).with_hook(Some(&script));
                refresh_run(&plan, &proc, &mut w, None);
            });
            s.spawn(|| {
                script.owner_paused.wait();
                let mut w = Worker::new(1, 2)
                    .with_hook(Some(&script))
                    .with_backoff(BackoffConfig {
                        beta: 0.0,
                        ..BackoffConfig::default()
                    });
                help_phase(&plan, &proc, &mut w);
            });
        });
        let writes = writes.into_inner().unwrap();
        let owner: Vec<_> = writes.iter().filter(|w| w.0 == 0).collect();
        // steps 0 and 1 ran before the flag flipped; everything after is standard
        assert_eq!(owner[0].2, Mode::Expeditive);
        assert_eq!(owner[1].2, Mode::Expeditive);
        assert!(owner[2..].iter().all(|w| w.2 == Mode::Standard));
        assert!(writes.iter().filter(|w| w.0 == 1).all(|w| w.2 == Mode::Standard));
        assert!(plan.all_done());
    }

    /// The owner finishes while the would-be helper is backing off, so the
    /// helper skips the part.
    #[test]
    fn backoff_avoids_helping_a_finishing_owner() {
        let plan = RefreshPlan::new(1);
        let runs = counting(1);
        let started = Gate::default();
        let proc = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| {
            runs[ctx.part()].fetch_add(1, Ordering::SeqCst);
            started.open();
            std::thread::sleep(Duration::from_millis(5));
        };
        let helped = std::thread::scope(|s| {
            s.spawn(|| {
                let mut w = Worker::new(0, 2);
                refresh_run(&plan, &proc, &mut w, None);
            });
            s.spawn(|| {
                started.wait();
                let mut w = Worker::new(1, 2).with_backoff(BackoffConfig {
                    initial: Duration::from_millis(2000),
                    ..BackoffConfig::default()
                });
                refresh_run(&plan, &proc, &mut w, None).helped
            })
            .join()
            .unwrap()
        });
        assert!(helped.is_empty());
        assert_eq!(runs[0].load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_estimator_average_and_clamp() {
        let cfg = BackoffConfig::default();
        let mut est = BackoffEstimator::default();
        assert_eq!(est.wait_duration(&cfg, None), cfg.initial);
        assert_eq!(
            est.wait_duration(&cfg, Some(Duration::from_micros(7))),
            Duration::from_micros(7)
        );
        est.record(Duration::from_micros(100), 0.25);
        est.record(Duration::from_micros(200), 0.25);
        assert_eq!(est.average(), Some(Duration::from_micros(125)));
        est.record(Duration::from_secs(10), 0.25);
        assert_eq!(est.wait_duration(&cfg, None), cfg.max);
    }
}
