//! Thread-local instrumentation of arithmetic performed by a forward pass.
//!
//! Recording is off unless a [`Recording`] is alive on the current thread, so
//! the hot path pays one thread-local flag read per matrix product.

use std::cell::RefCell;

use crate::autograd::Real;

/// How one recorded operation is billed.
#[derive(Debug, Clone, PartialEq)]
pub enum OpEvent {
    /// A (possibly batched) matrix product `groups × (m×k)·(k×n)`.
    ///
    /// `left_count` / `right_count` hold the element sum of an operand when
    /// every entry is a non-negative integer (spike or spike-count matrix), in
    /// which case the product reduces to that many row/column additions.
    MatMul {
        scope: String,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        left_count: Option<u64>,
        right_count: Option<u64>,
    },
    /// Index-mask aggregation: `adds` accumulate-only ops on the sparse path;
    /// `dense_macs` is the cost of the equivalent dense adjacency product.
    Aggregate {
        scope: String,
        adds: u64,
        dense_macs: u64,
    },
    /// LIF membrane updates: one update per neuron per sub-step.
    Neurons {
        scope: String,
        updates: u64,
        spikes: u64,
    },
}

impl OpEvent {
    pub fn scope(&self) -> &str {
        match self {
            OpEvent::MatMul { scope, .. }
            | OpEvent::Aggregate { scope, .. }
            | OpEvent::Neurons { scope, .. } => scope,
        }
    }
}

#[derive(Default)]
struct State {
    depth: usize,
    scopes: Vec<String>,
    events: Vec<OpEvent>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// Guard that captures events until [`Recording::finish`] is called.
pub struct Recording {
    start: usize,
    done: bool,
}

impl Recording {
    pub fn start() -> Self {
        let start = STATE.with(|s| {
            let mut s = s.borrow_mut();
            s.depth += 1;
            s.events.len()
        });
        Recording { start, done: false }
    }

    pub fn finish(mut self) -> Vec<OpEvent> {
        self.done = true;
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            s.depth -= 1;
            let events = s.events.split_off(self.start);
            if s.depth == 0 {
                s.events.clear();
            }
            events
        })
    }
}

impl Drop for Recording {
    fn drop(&mut self) {
        if !self.done {
            STATE.with(|s| {
                let mut s = s.borrow_mut();
                s.depth -= 1;
                s.events.truncate(self.start);
            });
        }
    }
}

/// Labels events recorded while the guard lives.
pub struct Scope(());

impl Drop for Scope {
    fn drop(&mut self) {
        STATE.with(|s| {
            s.borrow_mut().scopes.pop();
        });
    }
}

pub fn scope(label: &str) -> Scope {
    STATE.with(|s| s.borrow_mut().scopes.push(label.to_string()));
    Scope(())
}

pub fn is_active() -> bool {
    STATE.with(|s| s.borrow().depth > 0)
}

fn current_scope(s: &State) -> String {
    s.scopes.last().cloned().unwrap_or_default()
}

fn push(make: impl FnOnce(String) -> OpEvent) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth > 0 {
            let scope = current_scope(&s);
            s.events.push(make(scope));
        }
    });
}

/// Sum of the entries if all are non-negative integers.
fn count_sum<T: Real>(values: &[T]) -> Option<u64> {
    let mut total = 0u64;
    for &v in values {
        if v < T::zero() || v.fract() != T::zero() {
            return None;
        }
        total += v.to_f64_lossy() as u64;
    }
    Some(total)
}

pub(crate) fn record_matmul<T: Real>(groups: usize, m: usize, k: usize, n: usize, a: &[T], b: &[T]) {
    if !is_active() {
        return;
    }
    let left_count = count_sum(a);
    let right_count = if left_count.is_some() { None } else { count_sum(b) };
    push(|scope| OpEvent::MatMul {
        scope,
        groups,
        m,
        k,
        n,
        left_count,
        right_count,
    });
}

pub(crate) fn record_aggregate(adds: u64, dense_macs: u64) {
    push(|scope| OpEvent::Aggregate {
        scope,
        adds,
        dense_macs,
    });
}

pub(crate) fn record_neurons(updates: u64, spikes: u64) {
    push(|scope| OpEvent::Neurons {
        scope,
        updates,
        spikes,
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_recorded_without_guard() {
        record_neurons(3, 1);
        let rec = Recording::start();
        assert!(rec.finish().is_empty());
    }

    #[test]
    fn scopes_label_events() {
        let rec = Recording::start();
        {
            let _s = scope("hop1");
            record_neurons(4, 2);
        }
        record_aggregate(7, 64);
        let events = rec.finish();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].scope(), "hop1");
        assert_eq!(events[1].scope(), "");
    }

    #[test]
    fn integer_operands_are_counted() {
        assert_eq!(count_sum(&[0.0f32, 1.0, 2.0]), Some(3));
        assert_eq!(count_sum(&[0.5f32]), None);
        assert_eq!(count_sum(&[-1.0f32]), None);
    }
}
