// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Append-only array with stable entry addresses.
//!
//! Storage is a ladder of segments of doubling size, so growing never moves
//! published entries and readers can scan concurrently with writers. A slot
//! index is claimed with fetch-and-increment; each entry carries its own
//! ready flag, published with release ordering after the value is written.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicUsize, Ordering};

const LADDER: usize = 40;

struct Entry<T> {
    ready: AtomicBool,
    value: UnsafeCell<MaybeUninit<T>>,
}

pub struct AppendArray<T: Copy> {
    base_log: u32,
    tail: AtomicUsize,
    segments: [AtomicPtr<Entry<T>>; LADDER],
}

// Entries are written once by the thread that claimed them and read only
// after their ready flag is observed.
unsafe impl<T: Copy + Send> Send for AppendArray<T> {}
unsafe impl<T: Copy + Send> Sync for AppendArray<T> {}

impl<T: Copy> AppendArray<T> {
    /// `initial` is rounded up to a power of two and sizes the first segment.
    pub fn with_capacity(initial: usize) -> Self {
        let base_log = initial.max(1).next_power_of_two().trailing_zeros();
        AppendArray {
            base_log,
            tail: AtomicUsize::new(0),
            segments: std::array::from_fn(|_| AtomicPtr::new(ptr::null_mut())),
        }
    }

    #[inline]
    fn locate(&self, index: usize) -> (usize, usize) {
        let j = index + (1usize << self.base_log);
        let top = usize::BITS - 1 - j.leading_zeros();
        let seg = (top - self.base_log) as usize;
        (seg, j - (1usize << top))
    }

    fn segment_len(&self, seg: usize) -> usize {
        1usize << (self.base_log as usize + seg)
    }

    fn segment(&self, seg: usize) -> *mut Entry<T> {
        let cur = self.segments[seg].load(Ordering::Acquire);
        if !cur.is_null() {
            return cur;
        }
        let len = self.segment_len(seg);
        let fresh: Box<[Entry<T>]> = (0..len)
            .map(|_| Entry {
                ready: AtomicBool::new(false),
                value: UnsafeCell::new(MaybeUninit::uninit()),
            })
            .collect();
        let raw = Box::into_raw(fresh) as *mut Entry<T>;
        match self.segments[seg].compare_exchange(
            ptr::null_mut(),
            raw,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => raw,
            Err(winner) => {
                // SAFETY: `raw` came from Box::into_raw above and was never shared.
                unsafe { drop(Box::from_raw(ptr::slice_from_raw_parts_mut(raw, len))) };
                winner
            }
        }
    }

    /// Appends `value` and returns its index.
    pub fn push(&self, value: T) -> usize {
        let index = self.tail.fetch_add(1, Ordering::AcqRel);
        let (seg, off) = self.locate(index);
        assert!(seg < LADDER, "append array overflow");
        let base = self.segment(seg);
        // SAFETY: `off` is in bounds for segment `seg`, and index `index` was
        // claimed exclusively by this call.
        unsafe {
            let entry = &*base.add(off);
            (*entry.value.get()).write(value);
            entry.ready.store(true, Ordering::Release);
        }
        index
    }

    /// Number of claimed indices, including ones still being written.
    pub fn claimed(&self) -> usize {
        self.tail.load(Ordering::Acquire)
    }

    pub fn get(&self, index: usize) -> Option<T> {
        if index >= self.claimed() {
            return None;
        }
        let (seg, off) = self.locate(index);
        let base = self.segments[seg].load(Ordering::Acquire);
        if base.is_null() {
            return None;
        }
        // SAFETY: in bounds; the value is read only after its ready flag.
        unsafe {
            let entry = &*base.add(off);
            if entry.ready.load(Ordering::Acquire) {
                Some((*entry.value.get()).assume_init())
            } else {
                None
            }
        }
    }

    /// Published entries among the first `limit` indices, in index order.
    pub fn ready_prefix(&self, limit: usize) -> impl Iterator<Item = T> + '_ {
        (0..limit.min(self.claimed())).filter_map(move |i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.ready_prefix(usize::MAX)
    }
}

impl<T: Copy> Drop for AppendArray<T> {
    fn drop(&mut self) {
        for seg in 0..LADDER {
            let raw = *self.segments[seg].get_mut();
            if !raw.is_null() {
                let len = self.segment_len(seg);
                // SAFETY: installed from a Box<[Entry<T>]> of exactly `len` entries.
                unsafe { drop(Box::from_raw(ptr::slice_from_raw_parts_mut(raw, len))) };
            }
        }
    }
}

impl<T: Copy + std::fmt::Debug> std::fmt::Debug for AppendArray<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}
