// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use fresh::harness::{generate_dataset, generate_queries, Fault, FaultKind, FaultPlan};
use fresh::{
    crash_thread, execute, Checkpoint, Forest, Hook, IndexOptions, Mode, Phase, SaxKey, SeriesConfig, Site,
    SummaryPair, ThreadCrash, Worker,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default)]
struct Latch {
    state: Mutex<(bool, bool)>,
    cv: Condvar,
}

impl Latch {
    fn signal_stalled(&self) {
        self.state.lock().unwrap().0 = true;
        self.cv.notify_all();
    }

    fn wait_stalled(&self) {
        let mut s = self.state.lock().unwrap();
        while !s.0 {
            s = self.cv.wait(s).unwrap();
        }
    }

    fn release(&self) {
        self.state.lock().unwrap().1 = true;
        self.cv.notify_all();
    }

    fn wait_release(&self) {
        let mut s = self.state.lock().unwrap();
        while !s.1 {
            s = self.cv.wait(s).unwrap();
        }
    }
}

/// Stops thread 0 at its first claimed slot until released.
struct StallFirst(Latch);

impl Hook for StallFirst {
    fn checkpoint(&self, cp: &Checkpoint) {
        if cp.thread == 0 && cp.site == Site::SlotClaimed {
            self.0.signal_stalled();
            self.0.wait_release();
        }
    }
}

fn cfg() -> SeriesConfig {
    SeriesConfig::new(16, 2, 4).unwrap()
}

fn pair(id: u32, a: u8, b: u8) -> SummaryPair {
    let mut sax = SaxKey::default();
    sax.0[0] = a;
    sax.0[1] = b;
    SummaryPair { sax, id }
}

/// Pairs in root subtree 0b11 that spread over several splits.
fn fillers(count: u32) -> Vec<SummaryPair> {
    (0..count).map(|i| pair(100 + i, 8 + (i % 8) as u8, 8 + (i / 8 % 8) as u8)).collect()
}

#[test]
fn stalled_standard_writer_survives_a_split() {
    let forest = Forest::new(cfg(), 4, 2).unwrap();
    let hook = StallFirst(Latch::default());
    let stalled = pair(1, 12, 12);
    let others = fillers(40);
    std::thread::scope(|s| {
        s.spawn(|| {
            let mut w = Worker::new(0, 2).with_hook(Some(&hook));
            forest.insert(&stalled, Mode::Standard, &mut w);
        });
        hook.0.wait_stalled();
        let mut w = Worker::new(1, 2);
        for p in &others {
            forest.insert(p, Mode::Expeditive, &mut w);
        }
        hook.0.release();
    });
    forest.finalize();
    forest.check().unwrap();
    assert!(forest.contains(&stalled));
    assert!(others.iter().all(|p| forest.contains(p)));
    assert_eq!(forest.multiplicity(), (41, 41));
}

#[test]
fn stalled_expeditive_writer_survives_a_split() {
    let forest = Forest::new(cfg(), 4, 2).unwrap();
    let hook = StallFirst(Latch::default());
    let stalled = pair(1, 12, 12);
    let others = fillers(40);
    std::thread::scope(|s| {
        s.spawn(|| {
            let mut w = Worker::new(0, 2).with_hook(Some(&hook));
            forest.insert(&stalled, Mode::Expeditive, &mut w);
        });
        hook.0.wait_stalled();
        let mut w = Worker::new(1, 2);
        for p in &others {
            forest.insert(p, Mode::Expeditive, &mut w);
        }
        hook.0.release();
    });
    forest.finalize();
    forest.check().unwrap();
    assert!(forest.contains(&stalled));
    assert_eq!(forest.multiplicity(), (41, 41));
}

struct CrashAtClaim;

impl Hook for CrashAtClaim {
    fn checkpoint(&self, cp: &Checkpoint) {
        if cp.thread == 0 && cp.site == Site::SlotClaimed {
            crash_thread();
        }
    }
}

#[test]
fn writer_crashed_after_claiming_leaves_a_usable_tree() {
    let forest = Forest::new(cfg(), 4, 2).unwrap();
    let lost = pair(1, 12, 12);
    let r = catch_unwind(AssertUnwindSafe(|| {
        let mut w = Worker::new(0, 2).with_hook(Some(&CrashAtClaim));
        forest.insert(&lost, Mode::Expeditive, &mut w);
    }));
    assert!(r.unwrap_err().is::<ThreadCrash>());
    let mut w = Worker::new(1, 2);
    let others = fillers(30);
    for p in &others {
        forest.insert(p, Mode::Expeditive, &mut w);
    }
    assert!(!forest.contains(&lost));
    forest.insert(&lost, Mode::Standard, &mut w);
    forest.insert(&lost, Mode::Standard, &mut w);
    forest.finalize();
    forest.check().unwrap();
    assert!(forest.contains(&lost));
    assert_eq!(forest.multiplicity(), (31, 31));
}

#[test]
fn random_fault_plans_keep_answers_exact() {
    let n = 64;
    let data = generate_dataset(6000, n, 31).unwrap();
    let queries = generate_queries(&data, 12, 0.1, 32).unwrap();
    let expected: Vec<f64> = queries
        .iter()
        .map(|q| {
            data.iter()
                .map(|s| s.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    let phases = [Phase::Summarization, Phase::Tree, Phase::Query];
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let threads = rng.random_range(2..=6);
        let mut faults = Vec::new();
        for thread in 0..threads - 1 {
            let kind = match rng.random_range(0..3) {
                0 => continue,
                1 => FaultKind::Crash,
                _ => FaultKind::Delay(Duration::from_millis(rng.random_range(1..20))),
            };
            faults.push(Fault {
                thread,
                phase: phases[rng.random_range(0..3)],
                at: rng.random_range(0.0..=1.0),
                kind,
            });
        }
        let plan = FaultPlan::new(faults);
        let opts = IndexOptions {
            series: SeriesConfig::new(n, 8, 8).unwrap(),
            leaf_size: rng.random_range(5..200),
            threads,
            tp_chunk: rng.random_range(1..64),
            ..IndexOptions::default()
        };
        let run = execute(&opts, &data.values, &queries.values, plan.as_hook()).unwrap();
        for (a, want) in run.answers.iter().zip(&expected) {
            assert!((a.distance - want).abs() <= 1e-4 * want, "seed {seed} plan {plan}");
        }
        assert_eq!(run.stats.tree_distinct, 6000, "seed {seed}");
        assert!(run.stats.multiplicity() < 2.0);
        run.index.forest().check().unwrap();
    }
}
