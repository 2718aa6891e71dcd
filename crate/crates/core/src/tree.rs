// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Lock-free forest of leaf-oriented iSAX trees with fat leaves.
//!
//! There is one subtree per root word (`2^w` of them). Leaves hold up to `M`
//! summary pairs in a slot array; a position is claimed with
//! fetch-and-increment on the leaf's element counter and written by its
//! claimer alone. A full leaf is replaced by a freshly built subtree with a
//! single compare-and-swap on the parent link.
//!
//! Splitting and inserting synchronize through the leaf's `helpers_exist`
//! flag. A splitter raises it before reading the slots; an inserter writes
//! its slot and then reads it. Both accesses are sequentially consistent, so
//! either the splitter's snapshot contains the pair or the inserter sees the
//! flag and checks the replacement itself, inserting again if the pair is
//! missing. Standard-mode inserters also publish the pair in the leaf's
//! announce array before claiming a slot, so a writer stalled between claim
//! and write is still carried into the replacement.
//!
//! Standard-mode inserts remove duplicates: a writer that finds other live
//! copies of its series in the leaf keeps only the lowest-positioned copy.
//!
//! Replaced leaves are retired and freed with the forest. Once population is
//! over, [`Forest::finalize_subtree`] seals every link (late split attempts
//! fail) and computes the left-subtree node counts used by [`find_node`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ptr;
use std::sync::atomic::{fence, AtomicBool, AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::refresh::{Mode, Site, Worker};
use crate::series::{IsaxWord, SaxKey, SeriesConfig};

/// An iSAX key at full resolution plus the series it summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SummaryPair {
    pub sax: SaxKey,
    pub id: u32,
}

/// Largest series id a slot can hold.
pub const MAX_SERIES_ID: u32 = u32::MAX - 2;

const EMPTY: u32 = 0;
const TOMB: u32 = u32::MAX;
const SEAL: usize = 1;

fn sax_halves(sax: &SaxKey) -> (u64, u64) {
    let v = u128::from_le_bytes(sax.0);
    (v as u64, (v >> 64) as u64)
}

fn sax_join(lo: u64, hi: u64) -> SaxKey {
    SaxKey((((hi as u128) << 64) | lo as u128).to_le_bytes())
}

#[derive(Default)]
struct Slot {
    tag: AtomicU32,
    sax: [AtomicU64; 2],
}

impl Slot {
    fn write(&self, pair: &SummaryPair) {
        let (lo, hi) = sax_halves(&pair.sax);
        self.sax[0].store(lo, Ordering::Relaxed);
        self.sax[1].store(hi, Ordering::Relaxed);
        self.tag.store(pair.id + 1, Ordering::SeqCst);
    }

    fn read(&self) -> Option<SummaryPair> {
        match self.tag.load(Ordering::SeqCst) {
            EMPTY | TOMB => None,
            tag => Some(SummaryPair {
                sax: sax_join(
                    self.sax[0].load(Ordering::Relaxed),
                    self.sax[1].load(Ordering::Relaxed),
                ),
                id: tag - 1,
            }),
        }
    }

    fn holds(&self, id: u32) -> bool {
        self.tag.load(Ordering::SeqCst) == id + 1
    }

    fn tombstone(&self, id: u32) {
        let _ = self
            .tag
            .compare_exchange(id + 1, TOMB, Ordering::SeqCst, Ordering::Relaxed);
    }
}

/// One thread's pending standard-mode insert, guarded by a sequence lock.
/// Readers never wait: a torn read is skipped, which is safe because the
/// owner publishes before claiming a slot and clears only after finishing.
#[derive(Default)]
struct Announce {
    seq: AtomicU64,
    tag: AtomicU32,
    sax: [AtomicU64; 2],
}

impl Announce {
    fn set(&self, tag: u32, sax: &SaxKey) {
        let s = self.seq.load(Ordering::Relaxed);
        self.seq.store(s + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        let (lo, hi) = sax_halves(sax);
        self.tag.store(tag, Ordering::Relaxed);
        self.sax[0].store(lo, Ordering::Relaxed);
        self.sax[1].store(hi, Ordering::Relaxed);
        self.seq.store(s + 2, Ordering::Release);
    }

    fn publish(&self, pair: &SummaryPair) {
        self.set(pair.id + 1, &pair.sax);
    }

    fn clear(&self) {
        if self.tag.load(Ordering::Relaxed) != EMPTY {
            self.set(EMPTY, &SaxKey::default());
        }
    }

    fn read(&self) -> Option<SummaryPair> {
        let s1 = self.seq.load(Ordering::Acquire);
        if s1 & 1 == 1 {
            return None;
        }
        let tag = self.tag.load(Ordering::Relaxed);
        let lo = self.sax[0].load(Ordering::Relaxed);
        let hi = self.sax[1].load(Ordering::Relaxed);
        fence(Ordering::Acquire);
        if self.seq.load(Ordering::Relaxed) != s1 || tag == EMPTY {
            return None;
        }
        Some(SummaryPair {
            sax: sax_join(lo, hi),
            id: tag - 1,
        })
    }
}

/// A block of slots; leaves at maximum cardinality chain further extents.
struct Extent {
    slots: Box<[Slot]>,
    elements: AtomicUsize,
    next: AtomicPtr<Extent>,
}

impl Extent {
    fn new(cap: usize) -> Self {
        Extent {
            slots: (0..cap).map(|_| Slot::default()).collect(),
            elements: AtomicUsize::new(0),
            next: AtomicPtr::new(ptr::null_mut()),
        }
    }

    fn cap(&self) -> usize {
        self.slots.len()
    }

    fn filled(&self) -> usize {
        self.elements.load(Ordering::Acquire).min(self.cap())
    }

    fn claim(&self) -> Option<usize> {
        if self.elements.load(Ordering::Relaxed) >= self.cap() {
            return None;
        }
        let pos = self.elements.fetch_add(1, Ordering::AcqRel);
        (pos < self.cap()).then_some(pos)
    }

    fn next(&self) -> Option<&Extent> {
        let p = self.next.load(Ordering::Acquire);
        // SAFETY: extents are only freed when the owning leaf is dropped.
        (!p.is_null()).then(|| unsafe { &*p })
    }

    fn next_or_grow(&self) -> &Extent {
        if let Some(next) = self.next() {
            return next;
        }
        let fresh = Box::into_raw(Box::new(Extent::new(self.cap() * 2)));
        match self
            .next
            .compare_exchange(ptr::null_mut(), fresh, Ordering::AcqRel, Ordering::Acquire)
        {
            // SAFETY: just installed; lives as long as this extent.
            Ok(_) => unsafe { &*fresh },
            Err(winner) => {
                // SAFETY: `fresh` was never shared.
                unsafe { drop(Box::from_raw(fresh)) };
                // SAFETY: as above for the winner.
                unsafe { &*winner }
            }
        }
    }
}

impl Drop for Extent {
    fn drop(&mut self) {
        let mut p = std::mem::replace(self.next.get_mut(), ptr::null_mut());
        while !p.is_null() {
            // SAFETY: each extent in the chain was created by Box::into_raw
            // and is owned by its predecessor.
            let mut next = unsafe { Box::from_raw(p) };
            p = std::mem::replace(next.next.get_mut(), ptr::null_mut());
        }
    }
}

pub struct Leaf {
    base: Extent,
    announce: Box<[Announce]>,
    helpers_exist: AtomicBool,
    max_card: bool,
}

impl Leaf {
    fn extents(&self) -> impl Iterator<Item = &Extent> {
        std::iter::successors(Some(&self.base), |e| e.next())
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.extents().flat_map(|e| e.slots[..e.filled()].iter())
    }

    /// Live pairs, in slot order.
    pub fn pairs(&self) -> impl Iterator<Item = SummaryPair> + '_ {
        self.slots().filter_map(Slot::read)
    }

    pub fn len(&self) -> usize {
        self.pairs().count()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs().next().is_none()
    }

    /// Slot capacity before overflow extents.
    pub fn capacity(&self) -> usize {
        self.base.cap()
    }

    pub fn is_max_cardinality(&self) -> bool {
        self.max_card
    }

    fn holds(&self, id: u32) -> bool {
        self.slots().any(|s| s.holds(id))
    }

    fn splitting(&self) -> bool {
        self.helpers_exist.load(Ordering::SeqCst)
    }

    /// Keeps the lowest live copy of `id` and tombstones the others. Returns
    /// false if the caller's own copy went and the leaf is now being split,
    /// in which case presence has to be re-established in the replacement.
    fn dedupe(&self, own: *const Slot, id: u32) -> bool {
        let copies: Vec<&Slot> = self.slots().filter(|s| s.holds(id)).collect();
        let Some(&lowest) = copies.first() else {
            // own copy already tombstoned by a lower writer
            return !self.splitting();
        };
        for &s in &copies[1..] {
            s.tombstone(id);
        }
        ptr::eq(lowest, own) || !self.splitting()
    }

    /// Live slot contents plus announced pairs, one entry per series.
    fn snapshot(&self) -> Vec<SummaryPair> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.base.cap());
        for pair in self.pairs().chain(self.announce.iter().filter_map(Announce::read)) {
            if seen.insert(pair.id) {
                out.push(pair);
            }
        }
        out
    }
}

struct Link(AtomicPtr<Node>);

impl Link {
    fn new(p: *mut Node) -> Self {
        Link(AtomicPtr::new(p))
    }

    /// Target with the seal bit stripped, and whether the link is sealed.
    fn load(&self) -> (*mut Node, bool) {
        let p = self.0.load(Ordering::Acquire);
        (p.map_addr(|a| a & !SEAL), p.addr() & SEAL != 0)
    }

    fn replace(&self, current: *mut Node, new: *mut Node) -> bool {
        self.0
            .compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    fn seal(&self) -> *mut Node {
        loop {
            let p = self.0.load(Ordering::Acquire);
            if p.addr() & SEAL != 0 {
                return p.map_addr(|a| a & !SEAL);
            }
            if self.replace(p, p.map_addr(|a| a | SEAL)) {
                return p;
            }
        }
    }

    fn target(&self) -> Option<&Node> {
        let (p, _) = self.load();
        // SAFETY: nodes reachable from a link live until the forest drops.
        (!p.is_null()).then(|| unsafe { &*p })
    }
}

enum Body {
    Internal { segment: usize, children: [Link; 2] },
    Leaf(Leaf),
}

pub struct Node {
    word: IsaxWord,
    cnt: AtomicUsize,
    pub(crate) prune_mark: AtomicU64,
    pub(crate) refine_mark: AtomicU64,
    retired_next: AtomicPtr<Node>,
    body: Body,
}

impl Node {
    fn alloc(word: IsaxWord, body: Body) -> *mut Node {
        Box::into_raw(Box::new(Node {
            word,
            cnt: AtomicUsize::new(0),
            prune_mark: AtomicU64::new(0),
            refine_mark: AtomicU64::new(0),
            retired_next: AtomicPtr::new(ptr::null_mut()),
            body,
        }))
    }

    fn leaf(word: IsaxWord, pairs: &[SummaryPair], cap: usize, max_card: bool, threads: usize) -> *mut Node {
        let base = Extent::new(cap.max(pairs.len()).max(1));
        for (slot, pair) in base.slots.iter().zip(pairs) {
            slot.write(pair);
        }
        base.elements.store(pairs.len(), Ordering::Relaxed);
        Node::alloc(
            word,
            Body::Leaf(Leaf {
                base,
                announce: (0..threads).map(|_| Announce::default()).collect(),
                helpers_exist: AtomicBool::new(false),
                max_card,
            }),
        )
    }

    pub fn word(&self) -> &IsaxWord {
        &self.word
    }

    /// Nodes in the left subtree; valid after finalization.
    pub fn cnt(&self) -> usize {
        self.cnt.load(Ordering::Acquire)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.body, Body::Leaf(_))
    }

    pub fn as_leaf(&self) -> Option<&Leaf> {
        match &self.body {
            Body::Leaf(leaf) => Some(leaf),
            Body::Internal { .. } => None,
        }
    }

    /// Split segment and the two children of an internal node.
    pub fn children(&self) -> Option<(usize, &Node, &Node)> {
        match &self.body {
            Body::Internal { segment, children } => Some((
                *segment,
                children[0].target().expect("internal child"),
                children[1].target().expect("internal child"),
            )),
            Body::Leaf(_) => None,
        }
    }

    /// Live pairs of a leaf; nothing for internal nodes.
    pub fn pairs(&self) -> impl Iterator<Item = SummaryPair> + '_ {
        self.as_leaf().into_iter().flat_map(Leaf::pairs)
    }
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("word", &self.word)
            .field("leaf", &self.is_leaf())
            .field("cnt", &self.cnt())
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Written into a leaf slot by this call.
    Inserted,
    /// Found already present (carried by a split or inserted by a helper).
    AlreadyPresent,
    /// The subtree was sealed; population is over and the pair is already
    /// in the tree.
    Sealed,
}

enum Located<'a> {
    Leaf(&'a Link, &'a Node),
    Sealed,
}

pub struct Forest {
    cfg: SeriesConfig,
    leaf_size: usize,
    threads: usize,
    roots: Box<[Link]>,
    retired: AtomicPtr<Node>,
}

// Nodes are shared through atomics only; see the module docs.
unsafe impl Send for Forest {}
unsafe impl Sync for Forest {}

impl Forest {
    pub fn new(cfg: SeriesConfig, leaf_size: usize, threads: usize) -> Result<Self> {
        cfg.validate()?;
        if leaf_size == 0 {
            return Err(Error::config("leaf size must be at least 1"));
        }
        if threads == 0 {
            return Err(Error::config("thread count must be at least 1"));
        }
        Ok(Forest {
            cfg,
            leaf_size,
            threads,
            roots: (0..cfg.root_count()).map(|_| Link::new(ptr::null_mut())).collect(),
            retired: AtomicPtr::new(ptr::null_mut()),
        })
    }

    pub fn config(&self) -> &SeriesConfig {
        &self.cfg
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn root_count(&self) -> usize {
        self.roots.len()
    }

    pub fn root(&self, index: usize) -> Option<&Node> {
        self.roots[index].target()
    }

    pub fn root_index(&self, sax: &SaxKey) -> usize {
        sax.root_index(self.cfg.segments, self.cfg.max_bits)
    }

    fn child_bit(&self, sax: &SaxKey, segment: usize, parent: &IsaxWord) -> usize {
        let bits = parent.bits()[segment] + 1;
        (sax.symbol_at(segment, bits, self.cfg.max_bits) & 1) as usize
    }

    /// Follows links from `link` down to the leaf covering `sax`.
    fn locate<'a>(&'a self, mut link: &'a Link, root: Option<usize>, sax: &SaxKey) -> Located<'a> {
        loop {
            let (p, sealed) = link.load();
            if sealed {
                return Located::Sealed;
            }
            if p.is_null() {
                let r = root.expect("only root links start empty");
                let fresh = self.new_leaf(IsaxWord::root(r, self.cfg.segments), &[]);
                if !link.replace(ptr::null_mut(), fresh) {
                    // SAFETY: never shared.
                    unsafe { free_subtree(fresh) };
                }
                continue;
            }
            // SAFETY: reachable nodes live until the forest drops.
            let node = unsafe { &*p };
            match &node.body {
                Body::Leaf(_) => return Located::Leaf(link, node),
                Body::Internal { segment, children } => {
                    link = &children[self.child_bit(sax, *segment, &node.word)];
                }
            }
        }
    }

    fn new_leaf(&self, word: IsaxWord, pairs: &[SummaryPair]) -> *mut Node {
        let max_card = word.is_max_cardinality(self.cfg.max_bits);
        Node::leaf(word, pairs, self.leaf_size, max_card, self.threads)
    }

    /// Inserts without a surrounding refresh part; standard mode removes
    /// duplicates left by concurrent inserts of the same series.
    pub fn insert(&self, pair: &SummaryPair, mode: Mode, worker: &mut Worker<'_>) -> InsertOutcome {
        self.insert_with(pair, mode, worker, &|| false)
    }

    /// As [`Forest::insert`]; `helped` is consulted after an expeditive write
    /// and, when it reports helpers, the write is deduplicated as in standard
    /// mode.
    pub fn insert_with(
        &self,
        pair: &SummaryPair,
        mut mode: Mode,
        worker: &mut Worker<'_>,
        helped: &dyn Fn() -> bool,
    ) -> InsertOutcome {
        assert!(pair.id <= MAX_SERIES_ID, "series id {} out of range", pair.id);
        let r = self.root_index(&pair.sax);
        let mut start = &self.roots[r];
        loop {
            let (link, node) = match self.locate(start, Some(r), &pair.sax) {
                Located::Sealed => return InsertOutcome::Sealed,
                Located::Leaf(link, node) => (link, node),
            };
            let leaf = node.as_leaf().expect("located a leaf");
            if leaf.max_card {
                return self.insert_unsplittable(leaf, pair, mode, worker, helped);
            }
            let announce = &leaf.announce[worker.id()];
            if mode == Mode::Standard {
                if leaf.holds(pair.id) && !leaf.splitting() {
                    return InsertOutcome::AlreadyPresent;
                }
                announce.publish(pair);
            }
            if let Some(pos) = leaf.base.claim() {
                worker.checkpoint(Site::SlotClaimed, pos);
                let slot = &leaf.base.slots[pos];
                slot.write(pair);
                if !leaf.splitting() {
                    let dedupe = mode == Mode::Standard || helped();
                    if !dedupe || leaf.dedupe(slot, pair.id) {
                        announce.clear();
                        return InsertOutcome::Inserted;
                    }
                }
            }
            let current = self.split_leaf(link, node, worker);
            announce.clear();
            let Some(current) = current else {
                return InsertOutcome::Sealed;
            };
            if self.subtree_holds(current, pair) {
                return InsertOutcome::AlreadyPresent;
            }
            mode = Mode::Standard;
            start = link;
        }
    }

    fn insert_unsplittable(
        &self,
        leaf: &Leaf,
        pair: &SummaryPair,
        mode: Mode,
        worker: &mut Worker<'_>,
        helped: &dyn Fn() -> bool,
    ) -> InsertOutcome {
        if mode == Mode::Standard && leaf.holds(pair.id) {
            return InsertOutcome::AlreadyPresent;
        }
        let mut ext = &leaf.base;
        let slot = loop {
            if let Some(pos) = ext.claim() {
                worker.checkpoint(Site::SlotClaimed, pos);
                break &ext.slots[pos];
            }
            ext = ext.next_or_grow();
        };
        slot.write(pair);
        if mode == Mode::Standard || helped() {
            leaf.dedupe(slot, pair.id);
        }
        InsertOutcome::Inserted
    }

    /// Replaces a full leaf behind `link`. Returns the link's target
    /// afterwards, or `None` once the link is sealed.
    fn split_leaf<'a>(&'a self, link: &'a Link, node: &'a Node, worker: &mut Worker<'_>) -> Option<&'a Node> {
        let (current, sealed) = link.load();
        if sealed {
            return None;
        }
        let old = node as *const Node as *mut Node;
        if current != old {
            return link.target();
        }
        let leaf = node.as_leaf().expect("split target is a leaf");
        leaf.helpers_exist.store(true, Ordering::SeqCst);
        let pairs = leaf.snapshot();
        let replacement = self.build(node.word, pairs, true);
        worker.checkpoint(Site::BeforeInstall, 0);
        if link.replace(old, replacement) {
            self.retire(old);
        } else {
            // SAFETY: the replacement was never published.
            unsafe { free_subtree(replacement) };
        }
        match link.load() {
            (_, true) => None,
            _ => link.target(),
        }
    }

    /// Builds a subtree for `pairs` under `word`. The top level always
    /// splits; a child that receives every pair and is full splits again.
    fn build(&self, word: IsaxWord, pairs: Vec<SummaryPair>, force: bool) -> *mut Node {
        let max_card = word.is_max_cardinality(self.cfg.max_bits);
        if max_card || (!force && pairs.len() <= self.leaf_size) {
            return self.new_leaf(word, &pairs);
        }
        let segment = word
            .split_segment(self.cfg.max_bits)
            .expect("word below maximum cardinality");
        let (right, left): (Vec<_>, Vec<_>) = pairs
            .into_iter()
            .partition(|p| self.child_bit(&p.sax, segment, &word) == 1);
        let force_left = right.is_empty() && left.len() >= self.leaf_size;
        let force_right = left.is_empty() && right.len() >= self.leaf_size;
        let l = self.build(word.refine(segment, 0), left, force_left);
        let r = self.build(word.refine(segment, 1), right, force_right);
        Node::alloc(
            word,
            Body::Internal {
                segment,
                children: [Link::new(l), Link::new(r)],
            },
        )
    }

    fn retire(&self, node: *mut Node) {
        // SAFETY: `node` was just unlinked and stays allocated until drop.
        let n = unsafe { &*node };
        let mut head = self.retired.load(Ordering::Relaxed);
        loop {
            n.retired_next.store(head, Ordering::Relaxed);
            match self
                .retired
                .compare_exchange_weak(head, node, Ordering::Release, Ordering::Relaxed)
            {
                Ok(_) => return,
                Err(h) => head = h,
            }
        }
    }

    fn covering_leaf<'a>(&'a self, mut node: &'a Node, sax: &SaxKey) -> &'a Node {
        while let Body::Internal { segment, children } = &node.body {
            node = children[self.child_bit(sax, *segment, &node.word)]
                .target()
                .expect("internal child");
        }
        node
    }

    fn subtree_holds(&self, node: &Node, pair: &SummaryPair) -> bool {
        let leaf = self.covering_leaf(node, &pair.sax);
        leaf.as_leaf().is_some_and(|l| l.holds(pair.id))
    }

    /// Whether the pair is stored in the leaf its key routes to.
    pub fn contains(&self, pair: &SummaryPair) -> bool {
        self.root(self.root_index(&pair.sax))
            .is_some_and(|root| self.subtree_holds(root, pair))
    }

    /// The leaf a key routes to, if its subtree exists.
    pub fn leaf_for(&self, sax: &SaxKey) -> Option<&Node> {
        self.root(self.root_index(sax))
            .map(|root| self.covering_leaf(root, sax))
    }

    /// Seals every link of one subtree and computes its node counts.
    /// Idempotent; concurrent calls agree because sealing freezes the shape.
    pub fn finalize_subtree(&self, root: usize) {
        seal_links(&self.roots[root]);
        if let Some(node) = self.root(root) {
            count_nodes(node);
        }
    }

    pub fn finalize(&self) {
        for r in 0..self.root_count() {
            self.finalize_subtree(r);
        }
    }

    /// All live pairs, subtree by subtree, leaves in order.
    pub fn pairs(&self) -> Vec<SummaryPair> {
        let mut out = Vec::new();
        for r in 0..self.root_count() {
            if let Some(root) = self.root(r) {
                for_each_node(root, &mut |n| out.extend(n.pairs()));
            }
        }
        out
    }

    /// Stored pairs divided by distinct series; 1.0 when nothing is
    /// duplicated, NaN for an empty forest.
    pub fn multiplicity(&self) -> (usize, usize) {
        let pairs = self.pairs();
        let distinct: HashSet<u32> = pairs.iter().map(|p| p.id).collect();
        (pairs.len(), distinct.len())
    }

    pub fn is_empty(&self) -> bool {
        (0..self.root_count()).all(|r| self.root(r).is_none_or(|n| {
            let mut empty = true;
            for_each_node(n, &mut |m| empty &= m.pairs().next().is_none());
            empty
        }))
    }

    /// Preorder text dump of one subtree: key, then `leaf used/cap` or the
    /// split segment.
    pub fn dump(&self, root: usize) -> String {
        let mut out = String::new();
        if let Some(node) = self.root(root) {
            dump_node(node, 0, &mut out);
        }
        out
    }

    /// Checks shape invariants of a quiescent, finalized forest.
    pub fn check(&self) -> std::result::Result<(), String> {
        for r in 0..self.root_count() {
            let Some(root) = self.root(r) else { continue };
            if root.word != IsaxWord::root(r, self.cfg.segments) {
                return Err(format!("subtree {r} has root key {}", root.word));
            }
            self.check_node(root)?;
        }
        Ok(())
    }

    fn check_node(&self, node: &Node) -> std::result::Result<usize, String> {
        match &node.body {
            Body::Leaf(leaf) => {
                for pair in leaf.pairs() {
                    if !node.word.covers(&pair.sax, self.cfg.max_bits) {
                        return Err(format!("series {} stored under {}", pair.id, node.word));
                    }
                }
                if !leaf.max_card && leaf.len() > self.leaf_size {
                    return Err(format!("leaf {} holds {} > {}", node.word, leaf.len(), self.leaf_size));
                }
                if node.cnt() != 0 {
                    return Err(format!("leaf {} has cnt {}", node.word, node.cnt()));
                }
                Ok(1)
            }
            Body::Internal { segment, .. } => {
                let (_, left, right) = node.children().expect("internal");
                for (bit, child) in [left, right].into_iter().enumerate() {
                    if child.word != node.word.refine(*segment, bit as u8) {
                        return Err(format!("child {} of {} does not refine it", child.word, node.word));
                    }
                }
                let l = self.check_node(left)?;
                let r = self.check_node(right)?;
                if node.cnt() != l {
                    return Err(format!("cnt of {} is {}, left subtree has {l}", node.word, node.cnt()));
                }
                Ok(1 + l + r)
            }
        }
    }
}

impl Drop for Forest {
    fn drop(&mut self) {
        for link in self.roots.iter() {
            let (p, _) = link.load();
            // SAFETY: the forest exclusively owns every reachable node.
            unsafe { free_subtree(p) };
        }
        let mut p = *self.retired.get_mut();
        while !p.is_null() {
            // SAFETY: retired leaves are unreachable and owned by the stack.
            let node = unsafe { Box::from_raw(p) };
            p = node.retired_next.load(Ordering::Relaxed);
        }
    }
}

unsafe fn free_subtree(p: *mut Node) {
    if p.is_null() {
        return;
    }
    let node = unsafe { Box::from_raw(p) };
    if let Body::Internal { children, .. } = &node.body {
        for c in children {
            let (child, _) = c.load();
            unsafe { free_subtree(child) };
        }
    }
}

fn seal_links(link: &Link) {
    let p = link.seal();
    if p.is_null() {
        return;
    }
    // SAFETY: reachable nodes live until the forest drops.
    if let Body::Internal { children, .. } = unsafe { &(*p).body } {
        for c in children {
            seal_links(c);
        }
    }
}

fn count_nodes(node: &Node) -> usize {
    match node.children() {
        None => {
            node.cnt.store(0, Ordering::Release);
            1
        }
        Some((_, left, right)) => {
            let l = count_nodes(left);
            let r = count_nodes(right);
            node.cnt.store(l, Ordering::Release);
            1 + l + r
        }
    }
}

fn for_each_node<'a>(node: &'a Node, f: &mut dyn FnMut(&'a Node)) {
    if let Some((_, left, right)) = node.children() {
        for_each_node(left, f);
        f(node);
        for_each_node(right, f);
    } else {
        f(node);
    }
}

fn dump_node(node: &Node, depth: usize, out: &mut String) {
    let indent = "  ".repeat(depth);
    match &node.body {
        Body::Leaf(leaf) => {
            let _ = writeln!(
                out,
                "{indent}[{}] leaf {}/{}{}",
                node.word,
                leaf.len(),
                leaf.capacity(),
                if leaf.max_card { " max" } else { "" }
            );
        }
        Body::Internal { segment, .. } => {
            let _ = writeln!(out, "{indent}[{}] split {segment}", node.word);
            let (_, left, right) = node.children().expect("internal");
            dump_node(left, depth + 1, out);
            dump_node(right, depth + 1, out);
        }
    }
}

/// Nodes in a finalized subtree, summing `cnt + 1` down the rightmost path.
pub fn total_nodes(root: Option<&Node>) -> usize {
    let mut total = 0;
    let mut node = root;
    while let Some(n) = node {
        total += n.cnt() + 1;
        node = n.children().map(|(_, _, right)| right);
    }
    total
}

/// The node at 0-based inorder `rank` of a finalized subtree.
pub fn find_node(root: &Node, rank: usize) -> Result<&Node> {
    let total = total_nodes(Some(root));
    if rank >= total {
        return Err(Error::RankOutOfRange { rank, total });
    }
    let mut node = root;
    let mut i = rank;
    loop {
        let c = node.cnt();
        match (i.cmp(&c), node.children()) {
            (std::cmp::Ordering::Equal, _) => return Ok(node),
            (std::cmp::Ordering::Less, Some((_, left, _))) => node = left,
            (std::cmp::Ordering::Greater, Some((_, _, right))) => {
                i -= c + 1;
                node = right;
            }
            (_, None) => unreachable!("rank checked against the total"),
        }
    }
}

/// Inorder walk, for callers that want every node.
pub fn inorder(root: &Node) -> Vec<&Node> {
    let mut out = Vec::new();
    for_each_node(root, &mut |n| out.push(n));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{sax_key, Breakpoints, Paa};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(segments: usize, max_bits: u8) -> SeriesConfig {
        SeriesConfig::new(segments * 4, segments, max_bits).unwrap()
    }

    fn pair_from_symbols(symbols: &[u8], id: u32) -> SummaryPair {
        let mut key = [0u8; 16];
        key[..symbols.len()].copy_from_slice(symbols);
        SummaryPair { sax: SaxKey(key), id }
    }

    fn random_pairs(cfg: &SeriesConfig, count: usize, seed: u64) -> Vec<SummaryPair> {
        let table = Breakpoints::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|id| {
                let means: Vec<f64> = (0..cfg.segments).map(|_| rng.random_range(-2.5..2.5)).collect();
                SummaryPair {
                    sax: sax_key(&Paa::from_means(&means), &table, cfg.max_bits),
                    id: id as u32,
                }
            })
            .collect()
    }

    #[test]
    fn first_insert_lands_in_slot_zero() {
        let f = Forest::new(cfg(2, 4), 4, 1).unwrap();
        let mut w = Worker::new(0, 1);
        let p = pair_from_symbols(&[12, 3], 7);
        assert_eq!(f.insert(&p, Mode::Expeditive, &mut w), InsertOutcome::Inserted);
        let root = f.root(f.root_index(&p.sax)).unwrap();
        let leaf = root.as_leaf().unwrap();
        assert_eq!(leaf.base.elements.load(Ordering::Relaxed), 1);
        assert_eq!(leaf.base.slots[0].read(), Some(p));
    }

    #[test]
    fn balanced_split() {
        // w=1, root "1": symbols 8..16 at 4 bits; split on the second bit
        let f = Forest::new(cfg(1, 4), 4, 1).unwrap();
        let mut w = Worker::new(0, 1);
        for (id, s) in [8u8, 9, 12, 13, 10].into_iter().enumerate() {
            f.insert(&pair_from_symbols(&[s], id as u32), Mode::Expeditive, &mut w);
        }
        f.finalize();
        f.check().unwrap();
        assert_eq!(f.dump(1), "[1] split 0\n  [10] leaf 3/4\n  [11] leaf 2/4\n");
        let root = f.root(1).unwrap();
        assert_eq!(root.cnt(), 1);
        assert_eq!(total_nodes(Some(root)), 3);
    }

    #[test]
    fn identical_split_bits_split_repeatedly() {
        let f = Forest::new(cfg(1, 4), 2, 1).unwrap();
        let mut w = Worker::new(0, 1);
        // 1000, 1001, 1000: same first three bits
        for (id, s) in [8u8, 9, 8].into_iter().enumerate() {
            f.insert(&pair_from_symbols(&[s], id as u32), Mode::Expeditive, &mut w);
        }
        f.finalize();
        f.check().unwrap();
        assert_eq!(
            f.dump(1),
            "[1] split 0\n  [10] split 0\n    [100] split 0\n      [1000] leaf 2/2 max\n      [1001] leaf 1/2 max\n    [101] leaf 0/2\n  [11] leaf 0/2\n"
        );
    }

    #[test]
    fn max_cardinality_leaf_overflows() {
        let f = Forest::new(cfg(1, 2), 2, 1).unwrap();
        let mut w = Worker::new(0, 1);
        for id in 0..9 {
            f.insert(&pair_from_symbols(&[3], id), Mode::Expeditive, &mut w);
        }
        f.finalize();
        f.check().unwrap();
        let leaf = f.leaf_for(&pair_from_symbols(&[3], 0).sax).unwrap();
        assert_eq!(leaf.as_leaf().unwrap().len(), 9);
        assert!(leaf.as_leaf().unwrap().is_max_cardinality());
    }

    #[test]
    fn empty_and_single_node_totals() {
        let f = Forest::new(cfg(2, 3), 4, 1).unwrap();
        assert_eq!(total_nodes(f.root(0)), 0);
        let mut w = Worker::new(0, 1);
        let p = pair_from_symbols(&[1, 1], 0);
        f.insert(&p, Mode::Expeditive, &mut w);
        f.finalize();
        let root = f.root(0).unwrap();
        assert_eq!(total_nodes(Some(root)), 1);
        assert!(std::ptr::eq(find_node(root, 0).unwrap(), root));
        assert!(matches!(find_node(root, 1), Err(Error::RankOutOfRange { rank: 1, total: 1 })));
    }

    #[test]
    fn find_node_matches_inorder_walk() {
        let cfg = cfg(4, 6);
        let f = Forest::new(cfg, 3, 1).unwrap();
        let mut w = Worker::new(0, 1);
        for p in random_pairs(&cfg, 4000, 3) {
            f.insert(&p, Mode::Expeditive, &mut w);
        }
        f.finalize();
        f.check().unwrap();
        let mut checked = 0;
        for r in 0..f.root_count() {
            let Some(root) = f.root(r) else { continue };
            let walk = inorder(root);
            assert_eq!(total_nodes(Some(root)), walk.len());
            for (i, expected) in walk.iter().enumerate() {
                assert!(std::ptr::eq(find_node(root, i).unwrap(), *expected));
            }
            checked += walk.len();
        }
        assert!(checked > 1000, "only {checked} nodes");
    }

    #[test]
    fn standard_insert_of_present_pair_is_a_no_op() {
        let f = Forest::new(cfg(2, 4), 8, 1).unwrap();
        let mut w = Worker::new(0, 1);
        let p = pair_from_symbols(&[3, 12], 5);
        f.insert(&p, Mode::Expeditive, &mut w);
        assert_eq!(f.insert(&p, Mode::Standard, &mut w), InsertOutcome::AlreadyPresent);
        assert_eq!(f.multiplicity(), (1, 1));
    }

    #[test]
    fn sealed_forest_rejects_inserts() {
        let f = Forest::new(cfg(2, 4), 8, 1).unwrap();
        let mut w = Worker::new(0, 1);
        f.finalize();
        let p = pair_from_symbols(&[3, 12], 5);
        assert_eq!(f.insert(&p, Mode::Expeditive, &mut w), InsertOutcome::Sealed);
    }

    #[test]
    fn concurrent_inserts_into_one_leaf() {
        let m = 64;
        let f = Forest::new(cfg(1, 8), m, 8).unwrap();
        let pairs: Vec<_> = (0..m as u32).map(|id| pair_from_symbols(&[200], id)).collect();
        std::thread::scope(|s| {
            for t in 0..8 {
                let (f, pairs) = (&f, &pairs);
                s.spawn(move || {
                    let mut w = Worker::new(t, 8);
                    for p in pairs.iter().skip(t).step_by(8) {
                        f.insert(p, Mode::Standard, &mut w);
                    }
                });
            }
        });
        let root = f.root(1).unwrap();
        assert!(root.is_leaf(), "exactly M pairs must fit without a split");
        let mut ids: Vec<u32> = root.pairs().map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..m as u32).collect::<Vec<_>>());
    }

    #[test]
    fn concurrent_random_inserts_are_all_findable() {
        let cfg = cfg(3, 5);
        let f = Forest::new(cfg, 4, 4).unwrap();
        let pairs = random_pairs(&cfg, 6000, 9);
        std::thread::scope(|s| {
            for t in 0..4 {
                let (f, pairs) = (&f, &pairs);
                s.spawn(move || {
                    let mut w = Worker::new(t, 4);
                    let mode = if t % 2 == 0 { Mode::Standard } else { Mode::Expeditive };
                    for p in pairs.iter().skip(t).step_by(4) {
                        f.insert(p, mode, &mut w);
                    }
                });
            }
        });
        f.finalize();
        f.check().unwrap();
        assert!(pairs.iter().all(|p| f.contains(p)));
        assert_eq!(f.multiplicity(), (6000, 6000));
    }

    #[test]
    fn duplicate_standard_inserts_collapse_to_one_copy() {
        let cfg = cfg(2, 4);
        let f = Forest::new(cfg, 8, 4).unwrap();
        let pairs = random_pairs(&cfg, 500, 1);
        std::thread::scope(|s| {
            for t in 0..4 {
                let (f, pairs) = (&f, &pairs);
                s.spawn(move || {
                    let mut w = Worker::new(t, 4);
                    for p in pairs {
                        f.insert(p, Mode::Standard, &mut w);
                    }
                });
            }
        });
        f.finalize();
        f.check().unwrap();
        assert_eq!(f.multiplicity(), (500, 500));
    }
}
