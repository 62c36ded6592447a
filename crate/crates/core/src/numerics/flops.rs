//! Structural FLOP accounting.
//!
//! Convention: one multiply-accumulate is two FLOPs, every other
//! elementwise arithmetic or activation is one FLOP per output element.
//! Only forward evaluation is counted. The counter is thread-local, so
//! concurrent work on other threads never leaks into a measurement.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Resets this thread's cumulative count to zero.
pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Cumulative FLOPs on this thread since the last [`reset`].
pub fn report() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the FLOPs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = report();
    let out = f();
    (out, report().wrapping_sub(before))
}

pub(crate) fn note_bytes(tape_bytes: usize) {
    PEAK_BYTES.with(|c| c.set(c.get().max(tape_bytes)));
}

/// Largest value storage held by any single tape on this thread since the
/// last [`reset_peak_bytes`]; an allocation high-water estimate.
pub fn peak_bytes() -> usize {
    PEAK_BYTES.with(|c| c.get())
}

pub fn reset_peak_bytes() {
    PEAK_BYTES.with(|c| c.set(0));
}

pub(crate) fn affine(rows: usize, inner: usize, cols: usize, bias: bool) -> u64 {
    let macs = (rows * inner * cols) as u64;
    2 * macs + if bias { (rows * cols) as u64 } else { 0 }
}
