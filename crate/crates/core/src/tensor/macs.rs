//! Multiply-accumulate counting for the conv/linear kernels.
//!
//! Only convolution and matrix-multiply MACs are counted (elementwise ops
//! and the ensemble aggregation sum are excluded), so an encoder of size s
//! records exactly s times the single-member count.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn add(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + n));
        }
    });
}

/// Run `f` with MAC counting enabled on this thread, returning its result and
/// the number of multiply-accumulates recorded.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    MAC_COUNTER.with(|c| {
        let prev = c.replace(Some(0));
        let out = f();
        let counted = c.replace(prev).unwrap_or(0);
        if let (Some(outer), Some(inner)) = (prev, Some(counted)) {
            // nested scopes attribute work to the outer counter too
            c.set(Some(outer + inner));
        }
        (out, counted)
    })
}

/// Whether a counter is active on this thread (used by tests).
pub fn macs_recorded() -> bool {
    MAC_COUNTER.with(|c| c.get().is_some())
}
