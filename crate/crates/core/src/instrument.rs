//! Per-thread counters used to assert that inference evaluates no loss heads
//! and builds no auxiliary targets.

use std::cell::Cell;

thread_local! {
    static LOSS_EVALS: Cell<u64> = const { Cell::new(0) };
    static AUX_TARGETS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counters {
    pub loss_evals: u64,
    pub aux_targets: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        loss_evals: LOSS_EVALS.with(Cell::get),
        aux_targets: AUX_TARGETS.with(Cell::get),
    }
}

pub(crate) fn count_loss() {
    LOSS_EVALS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_aux_targets() {
    AUX_TARGETS.with(|c| c.set(c.get() + 1));
}
