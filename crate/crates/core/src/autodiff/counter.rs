//! Thread-local multiply-accumulate instrumentation.
//!
//! Forward matrix products and attention products add `2 * m * k * n`
//! floating point operations here. Backward passes are not counted.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    FLOPS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    FLOPS.with(Cell::get)
}

/// Returns the count accumulated so far and resets it.
pub fn take() -> u64 {
    FLOPS.with(|c| c.replace(0))
}

pub(crate) fn add_matmul(m: usize, k: usize, n: usize) {
    FLOPS.with(|c| c.set(c.get() + 2 * (m * k * n) as u64));
}
