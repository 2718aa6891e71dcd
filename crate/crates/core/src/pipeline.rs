// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Index construction: summarization into per-thread buffers, then tree
//! population from those buffers.
//!
//! Summarization runs three nested refresh levels over the raw series,
//! shaped `[chunks][groups][elements]`. Each processed series is summarized
//! and appended to the buffer of its root word, in the calling thread's own
//! slot. Population runs one refresh part per buffer, each split into
//! fixed-size chunks of buffer entries, and inserts every entry into the
//! subtree of that buffer. A final pass seals the subtrees and fixes up
//! their node counts.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};

use once_cell::race::OnceBox;

use crate::append::AppendArray;
use crate::error::{Error, Result};
use crate::refresh::{refresh_run, Mode, PartCtx, RefreshPlan, RunReport, Site, Worker};
use crate::series::{paa_unchecked, sax_key, Breakpoints, SeriesConfig};
use crate::tree::{Forest, SummaryPair, MAX_SERIES_ID};

/// Groups per chunk in the summarization layout.
pub const GROUPS_PER_CHUNK: usize = 16;

/// Buffer entries per population chunk.
pub const DEFAULT_TP_CHUNK: usize = 256;

/// Read-only raw series plus the done and help flags of summarization.
pub struct RawDataStore<'d> {
    data: &'d [f32],
    cfg: SeriesConfig,
    count: usize,
    groups: usize,
    per_group: usize,
    chunk_plan: RefreshPlan,
    group_plans: Box<[RefreshPlan]>,
    element_plans: Box<[RefreshPlan]>,
}

impl<'d> RawDataStore<'d> {
    /// Default shape: `4N` chunks of 16 groups each.
    pub fn new(data: &'d [f32], cfg: SeriesConfig, threads: usize) -> Result<Self> {
        Self::with_shape(data, cfg, 4 * threads.max(1), GROUPS_PER_CHUNK)
    }

    pub fn with_shape(data: &'d [f32], cfg: SeriesConfig, chunks: usize, groups: usize) -> Result<Self> {
        cfg.validate()?;
        if data.len() % cfg.len != 0 {
            return Err(Error::config(format!(
                "{} values do not form whole series of length {}",
                data.len(),
                cfg.len
            )));
        }
        if chunks == 0 || groups == 0 {
            return Err(Error::config("chunk and group counts must be positive"));
        }
        let count = data.len() / cfg.len;
        if count > MAX_SERIES_ID as usize + 1 {
            return Err(Error::config(format!("{count} series exceed the id range")));
        }
        let per_group = count.div_ceil(chunks * groups).max(1);
        let per_chunk = groups * per_group;
        let present = |base: usize, span: usize, unit: usize| -> usize {
            count.saturating_sub(base).min(span).div_ceil(unit)
        };
        let chunk_plan = RefreshPlan::with_present(chunks, present(0, chunks * per_chunk, per_chunk));
        let group_plans = (0..chunks)
            .map(|c| RefreshPlan::with_present(groups, present(c * per_chunk, per_chunk, per_group)))
            .collect();
        let element_plans = (0..chunks * groups)
            .map(|cg| RefreshPlan::with_present(per_group, present(cg * per_group, per_group, 1)))
            .collect();
        Ok(RawDataStore {
            data,
            cfg,
            count,
            groups,
            per_group,
            chunk_plan,
            group_plans,
            element_plans,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn config(&self) -> &SeriesConfig {
        &self.cfg
    }

    pub fn data(&self) -> &'d [f32] {
        self.data
    }

    pub fn series(&self, id: usize) -> &'d [f32] {
        &self.data[id * self.cfg.len..(id + 1) * self.cfg.len]
    }

    /// `(chunks, groups per chunk, elements per group)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.chunk_plan.parts(), self.groups, self.per_group)
    }

    pub fn chunk_plan(&self) -> &RefreshPlan {
        &self.chunk_plan
    }

    pub fn group_plan(&self, chunk: usize) -> &RefreshPlan {
        &self.group_plans[chunk]
    }

    pub fn element_plan(&self, chunk: usize, group: usize) -> &RefreshPlan {
        &self.element_plans[chunk * self.groups + group]
    }

    /// True once every element-level done flag is set.
    pub fn all_elements_done(&self) -> bool {
        self.element_plans.iter().all(RefreshPlan::all_done)
    }
}

/// `2^w` buffers, each with one append-only slot per thread.
pub struct SummarizationBuffers {
    threads: usize,
    slot_capacity: usize,
    slots: Box<[OnceBox<AppendArray<SummaryPair>>]>,
}

impl SummarizationBuffers {
    /// Slots start at `2 * total / (threads * 2^w)` entries and grow by
    /// doubling.
    pub fn new(cfg: &SeriesConfig, threads: usize, total: usize) -> Self {
        let buffers = cfg.root_count();
        SummarizationBuffers {
            threads,
            slot_capacity: (2 * total / (threads * buffers)).max(1),
            slots: (0..buffers * threads).map(|_| OnceBox::new()).collect(),
        }
    }

    pub fn buffer_count(&self) -> usize {
        self.slots.len() / self.threads
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Appends to `thread`'s slot of `buffer`. Only that thread may call this.
    pub fn push(&self, buffer: usize, thread: usize, pair: SummaryPair) {
        let slot = self.slots[buffer * self.threads + thread]
            .get_or_init(|| Box::new(AppendArray::with_capacity(self.slot_capacity)));
        slot.push(pair);
    }

    pub fn slot(&self, buffer: usize, thread: usize) -> Option<&AppendArray<SummaryPair>> {
        self.slots[buffer * self.threads + thread].get()
    }

    /// Entries of one buffer, slot by slot.
    pub fn pairs(&self, buffer: usize) -> Vec<SummaryPair> {
        (0..self.threads)
            .filter_map(|t| self.slot(buffer, t))
            .flat_map(|s| s.iter())
            .collect()
    }

    pub fn len(&self, buffer: usize) -> usize {
        (0..self.threads)
            .filter_map(|t| self.slot(buffer, t))
            .map(|s| s.iter().count())
            .sum()
    }

    pub fn total_entries(&self) -> usize {
        (0..self.buffer_count()).map(|b| self.len(b)).sum()
    }

    /// Distinct `(buffer, pair)` entries.
    pub fn distinct_pairs(&self) -> HashSet<(usize, SummaryPair)> {
        (0..self.buffer_count())
            .flat_map(|b| self.pairs(b).into_iter().map(move |p| (b, p)))
            .collect()
    }

    /// Entries divided by distinct series, as `(entries, distinct)`.
    pub fn multiplicity(&self) -> (usize, usize) {
        let mut distinct = HashSet::new();
        let mut entries = 0;
        for b in 0..self.buffer_count() {
            for p in self.pairs(b) {
                entries += 1;
                distinct.insert(p.id);
            }
        }
        (entries, distinct.len())
    }
}

/// Summarizes one series into its buffer, in the caller's slot.
pub fn buffer_creation(
    store: &RawDataStore<'_>,
    buffers: &SummarizationBuffers,
    table: &Breakpoints,
    id: usize,
    thread: usize,
) -> (usize, SummaryPair) {
    let cfg = store.config();
    let paa = paa_unchecked(store.series(id), cfg.segments);
    let sax = sax_key(&paa, table, cfg.max_bits);
    let pair = SummaryPair { sax, id: id as u32 };
    let buffer = sax.root_index(cfg.segments, cfg.max_bits);
    buffers.push(buffer, thread, pair);
    (buffer, pair)
}

/// Summarization over chunks, then groups, then single series.
pub fn bc_traverse(
    store: &RawDataStore<'_>,
    buffers: &SummarizationBuffers,
    table: &Breakpoints,
    worker: &mut Worker<'_>,
) -> RunReport {
    let (_, groups, per_group) = store.shape();
    let chunk = |cctx: &PartCtx<'_>, w: &mut Worker<'_>| {
        let c = cctx.part();
        let group = |gctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            let g = gctx.part();
            let base = (c * groups + g) * per_group;
            let element = |ectx: &PartCtx<'_>, w: &mut Worker<'_>| {
                buffer_creation(store, buffers, table, base + ectx.part(), w.id());
            };
            refresh_run(store.element_plan(c, g), &element, w, Some(gctx));
        };
        refresh_run(store.group_plan(c), &group, w, Some(cctx));
    };
    refresh_run(store.chunk_plan(), &chunk, worker, None)
}

/// Chunking of one buffer, fixed the first time any thread needs it.
struct BufferLayout {
    /// Prefix sums of slot lengths; `offsets[t]..offsets[t + 1]` is slot `t`.
    offsets: Vec<usize>,
    chunk_len: usize,
    plan: RefreshPlan,
}

impl BufferLayout {
    fn new(buffers: &SummarizationBuffers, buffer: usize, chunk_len: usize) -> Self {
        let mut offsets = vec![0];
        for t in 0..buffers.threads() {
            let len = buffers.slot(buffer, t).map_or(0, AppendArray::claimed);
            offsets.push(offsets[t] + len);
        }
        let total = *offsets.last().expect("non-empty");
        BufferLayout {
            offsets,
            chunk_len,
            plan: RefreshPlan::new(total.div_ceil(chunk_len)),
        }
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&o| o <= index) - 1;
        (t, index - self.offsets[t])
    }
}

/// Shared state of tree population.
pub struct TreePopulation {
    plan: RefreshPlan,
    layouts: Box<[OnceBox<BufferLayout>]>,
    inserted: Box<[AtomicBool]>,
    chunk_len: usize,
    finalize_plan: RefreshPlan,
}

impl TreePopulation {
    pub fn new(buffer_count: usize, series: usize, chunk_len: usize) -> Self {
        TreePopulation {
            plan: RefreshPlan::new(buffer_count),
            layouts: (0..buffer_count).map(|_| OnceBox::new()).collect(),
            inserted: (0..series).map(|_| AtomicBool::new(false)).collect(),
            chunk_len: chunk_len.max(1),
            finalize_plan: RefreshPlan::new(buffer_count),
        }
    }

    pub fn plan(&self) -> &RefreshPlan {
        &self.plan
    }

    pub fn finalize_plan(&self) -> &RefreshPlan {
        &self.finalize_plan
    }

    pub fn is_inserted(&self, id: u32) -> bool {
        self.inserted[id as usize].load(Ordering::Acquire)
    }
}

/// Inserts every buffered pair into its subtree. Pairs already inserted by
/// another pass (duplicates from summarization helping, or a chunk being
/// helped) are skipped.
pub fn tp_traverse(
    buffers: &SummarizationBuffers,
    forest: &Forest,
    pop: &TreePopulation,
    worker: &mut Worker<'_>,
) -> RunReport {
    let buffer = |bctx: &PartCtx<'_>, w: &mut Worker<'_>| {
        let b = bctx.part();
        let layout = pop.layouts[b].get_or_init(|| Box::new(BufferLayout::new(buffers, b, pop.chunk_len)));
        let chunk = |cctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            let start = cctx.part() * layout.chunk_len;
            let end = (start + layout.chunk_len).min(*layout.offsets.last().expect("non-empty"));
            let helped = || cctx.mode() == Mode::Standard;
            for index in start..end {
                if cctx.is_done() {
                    return;
                }
                let (t, offset) = layout.locate(index);
                let Some(pair) = buffers.slot(b, t).and_then(|s| s.get(offset)) else {
                    continue;
                };
                if pop.is_inserted(pair.id) {
                    continue;
                }
                forest.insert_with(&pair, cctx.mode(), w, &helped);
                pop.inserted[pair.id as usize].store(true, Ordering::Release);
                w.checkpoint(Site::MidProcess, index);
            }
        };
        refresh_run(&layout.plan, &chunk, w, Some(bctx));
    };
    refresh_run(&pop.plan, &buffer, worker, None)
}

/// Seals every subtree and fixes up its node counts.
pub fn finalize_traverse(forest: &Forest, pop: &TreePopulation, worker: &mut Worker<'_>) -> RunReport {
    let part = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| forest.finalize_subtree(ctx.part());
    refresh_run(&pop.finalize_plan, &part, worker, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refresh::{Checkpoint, Hook};
    use crate::series::{compute_isax, compute_paa, root_buffer_index};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Condvar, Mutex};

    fn random_data(count: usize, len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count * len).map(|_| rng.random_range(-2.0f32..2.0)).collect()
    }

    /// Root buffer of each series, computed through the public word API.
    fn oracle_buffers(data: &[f32], cfg: &SeriesConfig) -> Vec<usize> {
        let table = Breakpoints::new();
        data.chunks(cfg.len)
            .map(|s| {
                let paa = compute_paa(s, cfg.segments).unwrap();
                let word = compute_isax(&paa, &vec![1; cfg.segments], &table).unwrap();
                root_buffer_index(&word)
            })
            .collect()
    }

    #[test]
    fn shape_marks_trailing_slots_absent() {
        let cfg = SeriesConfig::new(8, 2, 4).unwrap();
        let data = random_data(1000, 8, 1);
        let store = RawDataStore::new(&data, cfg, 2).unwrap();
        assert_eq!(store.shape(), (8, 16, 8));
        // 1000 = 7 full chunks of 128 + 104 => chunk 7 has 13 groups
        assert_eq!(store.chunk_plan().limit(), 8);
        assert_eq!(store.group_plan(7).limit(), 13);
        assert_eq!(store.element_plan(7, 12).limit(), 8);
        assert_eq!(store.group_plan(7).parts(), 16);
    }

    #[test]
    fn empty_store_is_all_done() {
        let cfg = SeriesConfig::new(8, 2, 4).unwrap();
        let store = RawDataStore::new(&[], cfg, 4).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 4, 0);
        let mut w = Worker::new(0, 4);
        let report = bc_traverse(&store, &buffers, &Breakpoints::new(), &mut w);
        assert_eq!(report.owned, 0);
        assert!(store.chunk_plan().all_done());
        assert_eq!(buffers.total_entries(), 0);
    }

    #[test]
    fn single_thread_summarization_matches_grouping_oracle() {
        let cfg = SeriesConfig::new(16, 4, 8).unwrap();
        let data = random_data(1000, 16, 2);
        let store = RawDataStore::new(&data, cfg, 1).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 1, 1000);
        let mut w = Worker::new(0, 1);
        bc_traverse(&store, &buffers, &Breakpoints::new(), &mut w);
        assert!(store.all_elements_done());
        let oracle = oracle_buffers(&data, &cfg);
        for b in 0..buffers.buffer_count() {
            let mut got: Vec<u32> = buffers.pairs(b).iter().map(|p| p.id).collect();
            got.sort_unstable();
            let want: Vec<u32> = (0..1000u32).filter(|&i| oracle[i as usize] == b).collect();
            assert_eq!(got, want, "buffer {b}");
        }
        assert_eq!(buffers.multiplicity(), (1000, 1000));
    }

    #[test]
    fn worked_example_routes_to_buffer_five() {
        // PAA (0.2, -0.8, 1.5) at 2 bits is 10 00 11
        let cfg = SeriesConfig::new(3, 3, 2).unwrap();
        let data = [0.2f32, -0.8, 1.5];
        let store = RawDataStore::new(&data, cfg, 1).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 1, 1);
        let (buffer, pair) = buffer_creation(&store, &buffers, &Breakpoints::new(), 0, 0);
        assert_eq!(buffer, 5);
        assert_eq!(pair.sax.word(3, 2).to_string(), "10 00 11");
        assert_eq!(buffers.pairs(5), vec![pair]);
    }

    #[test]
    fn very_negative_series_lands_in_buffer_zero() {
        let cfg = SeriesConfig::new(8, 4, 8).unwrap();
        let data = [-5.0f32; 8];
        let store = RawDataStore::new(&data, cfg, 1).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 1, 1);
        let (buffer, _) = buffer_creation(&store, &buffers, &Breakpoints::new(), 0, 0);
        assert_eq!(buffer, 0);
    }

    struct Gate {
        open: Mutex<bool>,
        cv: Condvar,
    }

    /// Parks thread 0 at its first mid-group acquisition until released.
    struct ParkOnce {
        gate: Gate,
        parked: AtomicBool,
    }

    impl Hook for ParkOnce {
        fn checkpoint(&self, cp: &Checkpoint) {
            if cp.thread == 0 && cp.depth == 2 && cp.part == 3 && !self.parked.swap(true, Ordering::SeqCst) {
                let mut open = self.gate.open.lock().unwrap();
                while !*open {
                    open = self.gate.cv.wait(open).unwrap();
                }
            }
        }
    }

    #[test]
    fn suspended_summarizer_is_covered_by_the_others() {
        let cfg = SeriesConfig::new(16, 4, 8).unwrap();
        let data = random_data(3000, 16, 3);
        let store = RawDataStore::new(&data, cfg, 4).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 4, 3000);
        let table = Breakpoints::new();
        let hook = ParkOnce {
            gate: Gate {
                open: Mutex::new(false),
                cv: Condvar::new(),
            },
            parked: AtomicBool::new(false),
        };
        std::thread::scope(|s| {
            let parked = s.spawn(|| {
                let mut w = Worker::new(0, 4).with_hook(Some(&hook));
                bc_traverse(&store, &buffers, &table, &mut w);
            });
            let others: Vec<_> = (1..4)
                .map(|t| {
                    let (store, buffers, table) = (&store, &buffers, &table);
                    s.spawn(move || {
                        let mut w = Worker::new(t, 4);
                        bc_traverse(store, buffers, table, &mut w);
                    })
                })
                .collect();
            for h in others {
                h.join().unwrap();
            }
            // thread 0 is still parked here
            assert!(store.all_elements_done());
            let ids: HashSet<u32> = (0..buffers.buffer_count())
                .flat_map(|b| buffers.pairs(b))
                .map(|p| p.id)
                .collect();
            assert_eq!(ids.len(), 3000);
            *hook.gate.open.lock().unwrap() = true;
            hook.gate.cv.notify_all();
            parked.join().unwrap();
        });
        assert!(hook.parked.load(Ordering::SeqCst));
    }

    #[test]
    fn population_inserts_every_buffered_pair() {
        let cfg = SeriesConfig::new(16, 4, 6).unwrap();
        let data = random_data(5000, 16, 4);
        let store = RawDataStore::new(&data, cfg, 4).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 4, 5000);
        let table = Breakpoints::new();
        let forest = Forest::new(cfg, 20, 4).unwrap();
        let pop = TreePopulation::new(buffers.buffer_count(), 5000, 32);
        std::thread::scope(|s| {
            for t in 0..4 {
                let (store, buffers, table, forest, pop) = (&store, &buffers, &table, &forest, &pop);
                s.spawn(move || {
                    let mut w = Worker::new(t, 4);
                    bc_traverse(store, buffers, table, &mut w);
                    tp_traverse(buffers, forest, pop, &mut w);
                    finalize_traverse(forest, pop, &mut w);
                });
            }
        });
        forest.check().unwrap();
        for b in 0..buffers.buffer_count() {
            for p in buffers.pairs(b) {
                assert!(forest.contains(&p), "series {} missing", p.id);
                assert_eq!(forest.root_index(&p.sax), b);
            }
        }
        assert_eq!(forest.multiplicity(), (5000, 5000));
    }

    #[test]
    fn single_buffer_population_fills_one_subtree() {
        let cfg = SeriesConfig::new(4, 2, 4).unwrap();
        // every series has PAA (1.0, 1.0) or so: root word 11
        let data: Vec<f32> = (0..50).flat_map(|i| [1.0 + i as f32 * 0.01; 4]).collect();
        let store = RawDataStore::new(&data, cfg, 1).unwrap();
        let buffers = SummarizationBuffers::new(&cfg, 1, 50);
        let table = Breakpoints::new();
        let forest = Forest::new(cfg, 8, 1).unwrap();
        let pop = TreePopulation::new(4, 50, 16);
        let mut w = Worker::new(0, 1);
        bc_traverse(&store, &buffers, &table, &mut w);
        tp_traverse(&buffers, &forest, &pop, &mut w);
        finalize_traverse(&forest, &pop, &mut w);
        assert_eq!(buffers.len(3), 50);
        assert!((0..3).all(|r| forest.root(r).is_none()));
        let mut ids: Vec<u32> = forest.pairs().iter().map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert_eq!(w.counters(crate::refresh::Phase::Other).helped, 0);
    }
}
