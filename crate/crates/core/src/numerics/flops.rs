//! Multiply counter used to audit analytic cost formulas.
//!
//! Contraction ops (matmul, fused attention, SSM scan) report the number of
//! scalar multiply-accumulates they perform in the forward pass. Counting is
//! off unless a [`Counter`] is alive on the current thread; counts are keyed
//! by the innermost active [`scope`] label.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COUNTS: RefCell<Option<BTreeMap<&'static str, u64>>> = const { RefCell::new(None) };
    static SCOPE: RefCell<Vec<&'static str>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn record(macs: u64) {
    COUNTS.with(|c| {
        if let Some(map) = c.borrow_mut().as_mut() {
            let label = SCOPE.with(|s| s.borrow().last().copied().unwrap_or("unscoped"));
            *map.entry(label).or_insert(0) += macs;
        }
    });
}

/// Enables counting for its lifetime.
pub struct Counter {
    _private: (),
}

impl Counter {
    pub fn start() -> Self {
        COUNTS.with(|c| *c.borrow_mut() = Some(BTreeMap::new()));
        Self { _private: () }
    }

    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        COUNTS.with(|c| c.borrow().clone().unwrap_or_default())
    }
}

impl Drop for Counter {
    fn drop(&mut self) {
        COUNTS.with(|c| *c.borrow_mut() = None);
    }
}

pub struct ScopeGuard {
    _private: (),
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPE.with(|s| {
            s.borrow_mut().pop();
        });
    }
}

pub fn scope(label: &'static str) -> ScopeGuard {
    SCOPE.with(|s| s.borrow_mut().push(label));
    ScopeGuard { _private: () }
}
