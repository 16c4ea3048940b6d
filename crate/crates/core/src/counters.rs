//! Process-wide operation counters backing the cost contracts.
//!
//! The responsibility updates increment the counters by the exact number of
//! `exp` evaluations they perform (L per sparse update, K per dense update).
//! Two views exist: a process-global relaxed atomic (per-lap totals in the
//! training trace, summed across worker threads) and a thread-local mirror
//! for exact single-threaded measurements that must not observe other
//! threads' work.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

static EXP_CALLS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD_EXP_CALLS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add_exp_calls(n: u64) {
    EXP_CALLS.fetch_add(n, Ordering::Relaxed);
    THREAD_EXP_CALLS.with(|c| c.set(c.get() + n));
}

/// Total exp evaluations across all threads since process start (or the last
/// reset).
pub fn exp_calls() -> u64 {
    EXP_CALLS.load(Ordering::Relaxed)
}

pub fn reset_exp_calls() {
    EXP_CALLS.store(0, Ordering::Relaxed);
}

/// Exp evaluations performed by the calling thread only.
pub fn thread_exp_calls() -> u64 {
    THREAD_EXP_CALLS.with(|c| c.get())
}
