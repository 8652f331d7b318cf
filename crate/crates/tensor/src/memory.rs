//! Activation byte counter.
//!
//! Every value recorded on a [`Tape`](crate::Tape) is charged to a
//! thread-local counter when pushed and released when the tape is dropped.
//! The high-water mark is what training reports as `peak_bytes`.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn charge(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tapes on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live byte count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}
