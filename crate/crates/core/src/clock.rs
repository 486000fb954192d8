//! Time and identifier sources. Both are injectable so that runs with a
//! fixed clock and seed are reproducible byte for byte.

use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};

use crate::model::{fnv1a, slug};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Generates `<slug>-<hex8>` identifiers from a seed and a counter.
#[derive(Debug)]
pub struct IdGen {
    seed: u64,
    counter: AtomicU64,
}

impl IdGen {
    pub fn new(seed: u64) -> Self {
        Self::resume(seed, 0)
    }

    /// Continues a sequence persisted by an earlier process.
    pub fn resume(seed: u64, counter: u64) -> Self {
        IdGen {
            seed,
            counter: AtomicU64::new(counter),
        }
    }

    pub fn next(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(&n.to_le_bytes());
        bytes.extend_from_slice(prefix.as_bytes());
        format!("{}-{:08x}", slug(prefix), fnv1a(&bytes) as u32)
    }

    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
