//! Forward-pass counters.

use core::sync::atomic::{AtomicU64, Ordering};

/// A shareable, monotone counter of policy forward passes (or other
/// operations). Functions that run the policy take one of these so callers
/// can attribute the cost.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bump(&self) {
        self.add(1);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}
