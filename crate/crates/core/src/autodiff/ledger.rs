//! Live-activation accounting.
//!
//! Every graph node charges the ledger for the scalars it saves for its
//! backward rule (see the policy table in [`super::ops`]) and releases the
//! charge when the buffers are freed, either progressively during backward
//! or when the node is dropped. The ledger is the artifact's stand-in for
//! training memory: peak counts inside a scope are what the profiling and
//! memory-ordering claims are measured against.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// One `+`/`-` accounting entry, recorded only when event capture is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub tag: &'static str,
    pub delta: i64,
}

#[derive(Debug)]
struct ScopeFrame {
    id: u64,
    label: String,
    entry_live: u64,
    peak: u64,
}

#[derive(Debug, Default)]
struct LedgerInner {
    live: u64,
    peak: u64,
    capture_events: bool,
    events: Vec<LedgerEvent>,
    scopes: Vec<ScopeFrame>,
    next_scope_id: u64,
}

/// Handle returned by [`Ledger::open_scope`]; consumed on close.
#[derive(Debug)]
pub struct ScopeHandle {
    id: u64,
}

/// Shared counter of live saved-activation scalars.
///
/// Cloning the handle shares the underlying counter; all nodes built from
/// the same parameter set charge the same ledger.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    inner: Arc<Mutex<LedgerInner>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record `scalars` newly saved activation values.
    pub fn charge(&self, tag: &'static str, scalars: usize) {
        if scalars == 0 {
            return;
        }
        let mut inner = self.inner.lock().unwrap();
        inner.live += scalars as u64;
        let live = inner.live;
        inner.peak = inner.peak.max(live);
        for frame in &mut inner.scopes {
            frame.peak = frame.peak.max(live);
        }
        if inner.capture_events {
            inner.events.push(LedgerEvent {
                tag,
                delta: scalars as i64,
            });
        }
    }

    /// Record `scalars` saved activation values being freed.
    pub fn release(&self, tag: &'static str, scalars: usize) {
        if scalars == 0 {
            return;
        }
        let mut inner = self.inner.lock().unwrap();
        debug_assert!(
            inner.live >= scalars as u64,
            "ledger release of {scalars} below zero (live {})",
            inner.live
        );
        inner.live = inner.live.saturating_sub(scalars as u64);
        if inner.capture_events {
            inner.events.push(LedgerEvent {
                tag,
                delta: -(scalars as i64),
            });
        }
    }

    pub fn live(&self) -> u64 {
        self.inner.lock().unwrap().live
    }

    /// All-time peak since the ledger was created.
    pub fn peak(&self) -> u64 {
        self.inner.lock().unwrap().peak
    }

    /// Open a measurement scope. Scopes nest and must close LIFO.
    pub fn open_scope(&self, label: &str) -> ScopeHandle {
        let mut inner = self.inner.lock().unwrap();
        inner.next_scope_id += 1;
        let id = inner.next_scope_id;
        let entry_live = inner.live;
        inner.scopes.push(ScopeFrame {
            id,
            label: label.to_owned(),
            entry_live,
            // An empty scope peaks at the live count on entry.
            peak: entry_live,
        });
        ScopeHandle { id }
    }

    /// Close a scope and return the peak live count observed inside it.
    pub fn close_scope(&self, handle: ScopeHandle) -> Result<u64> {
        let mut inner = self.inner.lock().unwrap();
        match inner.scopes.last() {
            Some(top) if top.id == handle.id => {
                let frame = inner.scopes.pop().unwrap();
                Ok(frame.peak)
            }
            Some(top) => Err(Error::Scope(format!(
                "scope {} closed while inner scope '{}' is still open",
                handle.id, top.label
            ))),
            None => Err(Error::Scope(format!(
                "scope {} was never opened (stack is empty)",
                handle.id
            ))),
        }
    }

    /// Live count when the given open scope was entered.
    pub fn scope_entry_live(&self, handle: &ScopeHandle) -> Result<u64> {
        let inner = self.inner.lock().unwrap();
        inner
            .scopes
            .iter()
            .find(|f| f.id == handle.id)
            .map(|f| f.entry_live)
            .ok_or_else(|| Error::Scope(format!("scope {} is not open", handle.id)))
    }

    /// Turn per-event logging on or off. Off by default: long training runs
    /// would otherwise accumulate millions of entries.
    pub fn set_capture_events(&self, on: bool) {
        self.inner.lock().unwrap().capture_events = on;
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.inner.lock().unwrap().events.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charge_release_tracks_live_and_peak() {
        let ledger = Ledger::new();
        ledger.set_capture_events(true);
        ledger.charge("a", 10);
        ledger.charge("b", 5);
        assert_eq!(ledger.live(), 15);
        ledger.release("a", 10);
        assert_eq!(ledger.live(), 5);
        assert_eq!(ledger.peak(), 15);
        let sum: i64 = ledger.events().iter().map(|e| e.delta).sum();
        assert_eq!(sum, ledger.live() as i64);
    }

    #[test]
    fn empty_scope_peaks_at_entry_live() {
        let ledger = Ledger::new();
        ledger.charge("pre", 7);
        let scope = ledger.open_scope("empty");
        let peak = ledger.close_scope(scope).unwrap();
        assert_eq!(peak, 7);
    }

    #[test]
    fn nested_scope_peak_bounded_by_outer() {
        let ledger = Ledger::new();
        let outer = ledger.open_scope("outer");
        ledger.charge("x", 4);
        let inner = ledger.open_scope("inner");
        ledger.charge("y", 3);
        ledger.release("y", 3);
        let inner_peak = ledger.close_scope(inner).unwrap();
        ledger.charge("z", 10);
        ledger.release("z", 10);
        ledger.release("x", 4);
        let outer_peak = ledger.close_scope(outer).unwrap();
        assert_eq!(inner_peak, 7);
        assert_eq!(outer_peak, 14);
        assert!(inner_peak <= outer_peak);
    }

    #[test]
    fn closing_out_of_order_fails() {
        let ledger = Ledger::new();
        let outer = ledger.open_scope("outer");
        let _inner = ledger.open_scope("inner");
        assert!(ledger.close_scope(outer).is_err());
    }

    #[test]
    fn closing_unopened_scope_fails() {
        let ledger = Ledger::new();
        let bogus = ScopeHandle { id: 42 };
        assert!(ledger.close_scope(bogus).is_err());
    }
}
