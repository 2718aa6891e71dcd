// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Exact 1-NN answering over a finalized forest.
//!
//! A query runs four refresh stages, each finished by every participating
//! thread before it moves on:
//!
//! 1. initial answer: real distances to the leaf the query's own key routes
//!    to;
//! 2. pruning: one part per subtree, nested parts per inorder node rank;
//!    leaves whose lower bound beats the best-so-far are appended round-robin
//!    to `N` candidate queues;
//! 3. sorting: each queue gets a shared view sorted by bound;
//! 4. refinement: queues are walked in bound order, pruning the rest of a
//!    queue at the first bound no better than the best-so-far, and computing
//!    real distances for series whose own bound passes.
//!
//! The best-so-far is one atomic word holding the squared distance (as
//! `f32`, rounded up) above the series id, so a compare-and-swap minimum
//! updates both together and ties resolve to the lower id.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use once_cell::race::OnceBox;

use crate::append::AppendArray;
use crate::error::{Error, Result};
use crate::refresh::{refresh_run, PartCtx, RefreshPlan, Worker};
use crate::series::{distance_sq, distance_sq_bounded, paa_unchecked, sax_key, Breakpoints, QueryBounds, SaxKey};
use crate::tree::{find_node, inorder, total_nodes, Forest, Node};

const EMPTY_BSF: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsfUpdate {
    Accepted,
    Superseded,
}

/// Best-so-far squared distance and the series that achieved it.
#[derive(Debug)]
pub struct Bsf(AtomicU64);

impl Default for Bsf {
    fn default() -> Self {
        Bsf(AtomicU64::new(EMPTY_BSF))
    }
}

fn pack(distance_sq: f64, id: u32) -> u64 {
    let mut d = distance_sq as f32;
    if (d as f64) < distance_sq {
        d = d.next_up();
    }
    ((d.to_bits() as u64) << 32) | id as u64
}

impl Bsf {
    /// Current value; `+inf` before any update.
    pub fn distance_sq(&self) -> f64 {
        match self.0.load(Ordering::Acquire) {
            EMPTY_BSF => f64::INFINITY,
            w => f32::from_bits((w >> 32) as u32) as f64,
        }
    }

    pub fn id(&self) -> Option<u32> {
        match self.0.load(Ordering::Acquire) {
            EMPTY_BSF => None,
            w => Some(w as u32),
        }
    }

    /// Compare-and-swap minimum.
    pub fn update(&self, distance_sq: f64, id: u32) -> BsfUpdate {
        debug_assert!(distance_sq >= 0.0);
        let new = pack(distance_sq, id);
        let mut cur = self.0.load(Ordering::Acquire);
        loop {
            if new >= cur {
                return BsfUpdate::Superseded;
            }
            match self
                .0
                .compare_exchange_weak(cur, new, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return BsfUpdate::Accepted,
                Err(seen) => cur = seen,
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Candidate<'f> {
    pub leaf: &'f Node,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Answer {
    pub id: u32,
    pub distance: f64,
}

/// Per-query shared state. Lives until the whole batch is done, so a
/// delayed thread finishing stale work never touches freed memory.
pub struct Query<'f> {
    series: Vec<f32>,
    key: SaxKey,
    bounds: QueryBounds,
    epoch: u64,
    bsf: Bsf,
    initial: RefreshPlan,
    prune: RefreshPlan,
    ranks: Box<[OnceBox<RefreshPlan>]>,
    cursor: AtomicUsize,
    queues: Box<[AppendArray<Candidate<'f>>]>,
    sort: RefreshPlan,
    sorted: Box<[OnceBox<Vec<Candidate<'f>>>]>,
    refine: RefreshPlan,
    entries: Box<[OnceBox<RefreshPlan>]>,
    distances: AtomicUsize,
}

impl<'f> Query<'f> {
    pub fn bsf(&self) -> &Bsf {
        &self.bsf
    }

    pub fn series(&self) -> &[f32] {
        &self.series
    }

    pub fn queue(&self, i: usize) -> &AppendArray<Candidate<'f>> {
        &self.queues[i]
    }

    pub fn queue_count(&self) -> usize {
        self.queues.len()
    }

    pub fn sorted(&self, i: usize) -> Option<&[Candidate<'f>]> {
        self.sorted[i].get().map(|v| v.as_slice())
    }

    /// Real distances computed during refinement.
    pub fn refinement_distances(&self) -> usize {
        self.distances.load(Ordering::Relaxed)
    }
}

/// Read-only view of a built index used to answer queries.
pub struct Searcher<'f> {
    forest: &'f Forest,
    data: &'f [f32],
    table: &'f Breakpoints,
    fallback: Option<&'f Node>,
}

impl<'f> Searcher<'f> {
    /// `forest` must be finalized and `data` must hold the indexed series.
    pub fn new(forest: &'f Forest, data: &'f [f32], table: &'f Breakpoints) -> Self {
        let fallback = (0..forest.root_count())
            .filter_map(|r| forest.root(r))
            .flat_map(inorder)
            .find(|n| n.is_leaf() && n.pairs().next().is_some());
        Searcher {
            forest,
            data,
            table,
            fallback,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fallback.is_none()
    }

    fn stored(&self, id: u32) -> &'f [f32] {
        let n = self.forest.config().len;
        &self.data[id as usize * n..(id as usize + 1) * n]
    }

    /// Shared state for one query. `epoch` must be unique and non-zero
    /// among the queries run against this forest.
    pub fn query(&self, series: &[f32], epoch: u64) -> Result<Query<'f>> {
        let cfg = *self.forest.config();
        if series.len() != cfg.len {
            return Err(Error::LengthMismatch {
                left: series.len(),
                right: cfg.len,
            });
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        assert!(epoch > 0, "epoch 0 marks unvisited nodes");
        let paa = paa_unchecked(series, cfg.segments);
        let roots = self.forest.root_count();
        let queues = self.forest.threads();
        Ok(Query {
            series: series.to_vec(),
            key: sax_key(&paa, self.table, cfg.max_bits),
            bounds: QueryBounds::new(paa, &cfg, self.table),
            epoch,
            bsf: Bsf::default(),
            initial: RefreshPlan::new(1),
            prune: RefreshPlan::new(roots),
            ranks: (0..roots).map(|_| OnceBox::new()).collect(),
            cursor: AtomicUsize::new(0),
            queues: (0..queues).map(|_| AppendArray::with_capacity(64)).collect(),
            sort: RefreshPlan::new(queues),
            sorted: (0..queues).map(|_| OnceBox::new()).collect(),
            refine: RefreshPlan::new(queues),
            entries: (0..queues).map(|_| OnceBox::new()).collect(),
            distances: AtomicUsize::new(0),
        })
    }

    /// All four stages, mapped onto the worker's current progress span.
    pub fn run(&self, q: &Query<'f>, worker: &mut Worker<'_>) {
        let (lo, hi) = worker.span();
        let at = |f: f64| lo + (hi - lo) * f;
        worker.set_span(at(0.0), at(0.1));
        self.initial_bsf(q, worker);
        worker.set_span(at(0.1), at(0.5));
        self.ps_traverse(q, worker);
        worker.set_span(at(0.5), at(0.6));
        self.rs_sort(q, worker);
        worker.set_span(at(0.6), at(1.0));
        self.rs_traverse(q, worker);
        worker.set_span(lo, hi);
    }

    pub fn initial_bsf(&self, q: &Query<'f>, worker: &mut Worker<'_>) {
        let part = |_: &PartCtx<'_>, _: &mut Worker<'_>| {
            let leaf = self
                .forest
                .leaf_for(&q.key)
                .filter(|n| n.pairs().next().is_some())
                .or(self.fallback);
            for pair in leaf.into_iter().flat_map(Node::pairs) {
                q.bsf.update(distance_sq(self.stored(pair.id), &q.series), pair.id);
            }
        };
        refresh_run(&q.initial, &part, worker, None);
    }

    pub fn ps_traverse(&self, q: &Query<'f>, worker: &mut Worker<'_>) {
        let subtree = |ctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            let Some(root) = self.forest.root(ctx.part()) else {
                return;
            };
            let plan = q.ranks[ctx.part()].get_or_init(|| Box::new(RefreshPlan::new(total_nodes(Some(root)))));
            let visit = |nctx: &PartCtx<'_>, _: &mut Worker<'_>| {
                let node = find_node(root, nctx.part()).expect("rank below subtree total");
                if !node.is_leaf() || node.pairs().next().is_none() {
                    return;
                }
                let bound = q.bounds.word_mindist_sq(node.word(), self.table);
                if bound < q.bsf.distance_sq() && node.prune_mark.load(Ordering::Acquire) < q.epoch {
                    let i = q.cursor.fetch_add(1, Ordering::Relaxed) % q.queues.len();
                    q.queues[i].push(Candidate { leaf: node, bound });
                    node.prune_mark.fetch_max(q.epoch, Ordering::AcqRel);
                }
            };
            refresh_run(plan, &visit, w, Some(ctx));
        };
        refresh_run(&q.prune, &subtree, worker, None);
    }

    pub fn rs_sort(&self, q: &Query<'f>, worker: &mut Worker<'_>) {
        let part = |ctx: &PartCtx<'_>, _: &mut Worker<'_>| {
            q.sorted[ctx.part()].get_or_init(|| {
                let mut v: Vec<Candidate<'f>> = q.queues[ctx.part()].iter().collect();
                v.sort_by(|a, b| a.bound.total_cmp(&b.bound));
                Box::new(v)
            });
        };
        refresh_run(&q.sort, &part, worker, None);
    }

    pub fn rs_traverse(&self, q: &Query<'f>, worker: &mut Worker<'_>) {
        let queue = |ctx: &PartCtx<'_>, w: &mut Worker<'_>| {
            let sorted = q.sorted[ctx.part()].get().expect("queues are sorted before refinement");
            let plan = q.entries[ctx.part()].get_or_init(|| Box::new(RefreshPlan::new(sorted.len())));
            let entry = |ectx: &PartCtx<'_>, _: &mut Worker<'_>| {
                let j = ectx.part();
                let c = sorted[j];
                if c.bound >= q.bsf.distance_sq() {
                    // ascending bounds: nothing later in this queue can win
                    plan.truncate(j);
                    return;
                }
                if c.leaf.refine_mark.load(Ordering::Acquire) >= q.epoch {
                    return;
                }
                for pair in c.leaf.pairs() {
                    if ectx.is_done() {
                        return;
                    }
                    let limit = q.bsf.distance_sq();
                    if q.bounds.key_mindist_sq(&pair.sax) >= limit {
                        continue;
                    }
                    q.distances.fetch_add(1, Ordering::Relaxed);
                    let d = distance_sq_bounded(self.stored(pair.id), &q.series, limit);
                    if d < limit {
                        q.bsf.update(d, pair.id);
                    }
                }
                c.leaf.refine_mark.fetch_max(q.epoch, Ordering::AcqRel);
            };
            refresh_run(plan, &entry, w, Some(ctx));
        };
        refresh_run(&q.refine, &queue, worker, None);
    }

    /// The answer once all stages are done: the winning series and its
    /// exact distance.
    pub fn answer(&self, q: &Query<'f>) -> Result<Answer> {
        let id = q.bsf.id().ok_or(Error::EmptyIndex)?;
        Ok(Answer {
            id,
            distance: distance_sq(self.stored(id), &q.series).sqrt(),
        })
    }

    /// Runs one query on the calling thread alone.
    pub fn answer_query(&self, series: &[f32], epoch: u64) -> Result<Answer> {
        let q = self.query(series, epoch)?;
        let mut w = Worker::new(0, self.forest.threads());
        self.run(&q, &mut w);
        self.answer(&q)
    }
}
