// SPDX-License-Identifier: Apache-2.0
// SPDX-FileCopyrightText: Copyright The fresh-index Authors

//! Scheduled thread faults, delivered through refresh checkpoints.
//!
//! A fault is written `t<thread>:<phase>:<progress>:<kind>`, for example
//! `t3:query:0.5:crash` or `t1:tree:0.2:delay=100ms`. Phases are
//! `summarization` (or `bc`), `tree` (or `tp`) and `query`. A fault fires
//! once, at the first checkpoint its thread reaches in that phase with
//! progress at or past the trigger point.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::crash_thread;
use crate::error::{Error, Result};
use crate::refresh::{Checkpoint, Hook, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    /// Sleep, then carry on.
    Delay(Duration),
    /// Stop permanently.
    Crash,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub thread: usize,
    pub phase: Phase,
    /// Trigger point in `[0, 1]` of the phase.
    pub at: f64,
    pub kind: FaultKind,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Summarization => "summarization",
        Phase::Tree => "tree",
        Phase::Query => "query",
        Phase::Other => "other",
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}:{}:{}:", self.thread, phase_name(self.phase), self.at)?;
        match self.kind {
            FaultKind::Crash => f.write_str("crash"),
            FaultKind::Delay(d) => write!(f, "delay={}", humantime::format_duration(d)),
        }
    }
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::FaultSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = spec.split(':').collect();
        let [thread, phase, at, kind] = fields[..] else {
            return Err(bad("expected t<thread>:<phase>:<progress>:<kind>"));
        };
        let thread = thread
            .strip_prefix('t')
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("thread must look like t3"))?;
        let phase = match phase {
            "summarization" | "bc" => Phase::Summarization,
            "tree" | "tp" => Phase::Tree,
            "query" => Phase::Query,
            _ => return Err(bad("phase must be summarization, tree or query")),
        };
        let at: f64 = at.parse().map_err(|_| bad("progress must be a number"))?;
        if !(0.0..=1.0).contains(&at) {
            return Err(bad("progress must lie in [0, 1]"));
        }
        let kind = if kind == "crash" {
            FaultKind::Crash
        } else if let Some(d) = kind.strip_prefix("delay=") {
            FaultKind::Delay(humantime::parse_duration(d).map_err(|e| bad(&format!("bad delay: {e}")))?)
        } else {
            return Err(bad("kind must be crash or delay=<duration>"));
        };
        Ok(Fault { thread, phase, at, kind })
    }
}

/// A set of faults acting as a checkpoint hook.
#[derive(Debug, Default)]
pub struct FaultPlan {
    faults: Vec<Fault>,
    fired: Box<[AtomicBool]>,
}

impl FaultPlan {
    pub fn new(faults: Vec<Fault>) -> Self {
        let fired = faults.iter().map(|_| AtomicBool::new(false)).collect();
        FaultPlan { faults, fired }
    }

    /// Crashes `crashes` distinct threads out of `threads`, each at a
    /// uniformly random phase and progress point.
    pub fn random_crashes(threads: usize, crashes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = [Phase::Summarization, Phase::Tree, Phase::Query];
        let faults = sample(&mut rng, threads, crashes.min(threads))
            .into_iter()
            .map(|thread| Fault {
                thread,
                phase: phases[rng.random_range(0..3)],
                at: rng.random_range(0.0..1.0),
                kind: FaultKind::Crash,
            })
            .collect();
        FaultPlan::new(faults)
    }

    pub fn faults(&self) -> &[Fault] {
        &self.faults
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    /// Faults that have gone off so far.
    pub fn fired(&self) -> usize {
        self.fired.iter().filter(|f| f.load(Ordering::Relaxed)).count()
    }

    /// The hook to hand to a run, or `None` for an empty plan.
    pub fn as_hook(&self) -> Option<&dyn Hook> {
        if self.is_empty() {
            None
        } else {
            Some(self)
        }
    }
}

impl Hook for FaultPlan {
    fn checkpoint(&self, cp: &Checkpoint) {
        for (fault, fired) in self.faults.iter().zip(self.fired.iter()) {
            if fault.thread != cp.thread || fault.phase != cp.phase || cp.progress < fault.at {
                continue;
            }
            if fired.swap(true, Ordering::AcqRel) {
                continue;
            }
            match fault.kind {
                FaultKind::Delay(d) => std::thread::sleep(d),
                FaultKind::Crash => crash_thread(),
            }
        }
    }
}

impl fmt::Display for FaultPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, fault) in self.faults.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{fault}")?;
        }
        Ok(())
    }
}
