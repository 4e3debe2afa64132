//! Live tensor-storage accounting for the current thread.
//!
//! Counts the f32 payload bytes of every tensor alive on this thread and keeps
//! a high-water mark that callers can reset around a region of interest.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

const BYTES: usize = std::mem::size_of::<f32>();

pub(crate) fn acquire(elems: usize) {
    LIVE.with(|live| {
        let now = live.get() + elems * BYTES;
        live.set(now);
        PEAK.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(crate) fn release(elems: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(elems * BYTES)));
}

pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}
