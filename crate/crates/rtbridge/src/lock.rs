//! The boundary lock: process-wide mutual exclusion held exactly while a
//! thread executes native-side code.
//!
//! Reentrant for the owning thread (native → managed → native call chains
//! need it). Fully released around managed callbacks and inside
//! allow-threads windows, so other threads may enter native code during
//! those. Fairness is not guaranteed, only eventual acquisition.
//!
//! Guards are scoped to the acquiring thread and are not transferable.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread::ThreadId;

use parking_lot::{Condvar, Mutex};

use crate::fatal_invariant;

thread_local! {
    /// Depth of managed callbacks on this thread, across all locks. Used by
    /// the GIL-freeness instrumentation in the managed entry points.
    static CALLBACK_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// True while the current thread runs inside a managed callback window.
pub fn in_managed_callback() -> bool {
    CALLBACK_DEPTH.with(|d| d.get() > 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockEventKind {
    Acquired,
    Released,
    CallbackBegin,
    CallbackEnd,
    AllowBegin,
    AllowEnd,
}

/// One entry of the recorded event trace. `seq` is a global order; `thread`
/// is a dense per-lock thread key assigned at first contact.
#[derive(Debug, Clone, Copy)]
pub struct LockEvent {
    pub seq: u64,
    pub thread: u64,
    pub kind: LockEventKind,
}

#[derive(Debug, Default)]
struct TraceState {
    enabled: bool,
    seq: u64,
    events: Vec<LockEvent>,
}

#[derive(Debug, Default)]
struct LockState {
    owner: Option<ThreadId>,
    depth: usize,
    /// Saved reentrancy depths per thread for open allow-threads windows,
    /// innermost last.
    allow_saved: BTreeMap<u64, Vec<usize>>,
}

/// Counters exported to the CLI report. Acquisitions count 0→1 ownership
/// transitions; reentries count nested enters by the owner.
#[derive(Debug, Default)]
pub struct LockStats {
    pub acquisitions: AtomicU64,
    pub contentions: AtomicU64,
    pub reentries: AtomicU64,
    pub callbacks: AtomicU64,
    pub allow_windows: AtomicU64,
}

#[derive(Debug)]
pub struct BoundaryLock {
    state: Mutex<LockState>,
    cv: Condvar,
    pub stats: LockStats,
    trace: Mutex<TraceState>,
    thread_keys: Mutex<(HashMap<ThreadId, u64>, u64)>,
}

impl Default for BoundaryLock {
    fn default() -> Self {
        Self::new()
    }
}

impl BoundaryLock {
    pub fn new() -> Self {
        BoundaryLock {
            state: Mutex::new(LockState::default()),
            cv: Condvar::new(),
            stats: LockStats::default(),
            trace: Mutex::new(TraceState::default()),
            thread_keys: Mutex::new((HashMap::new(), 0)),
        }
    }

    /// Dense key for the current thread, assigned at first contact.
    pub fn thread_key(&self) -> u64 {
        let id = std::thread::current().id();
        let mut keys = self.thread_keys.lock();
        if let Some(&k) = keys.0.get(&id) {
            return k;
        }
        let k = keys.1;
        keys.1 += 1;
        keys.0.insert(id, k);
        k
    }

    fn record(&self, kind: LockEventKind) {
        let mut t = self.trace.lock();
        if !t.enabled {
            return;
        }
        let seq = t.seq;
        t.seq += 1;
        let thread = self.thread_key();
        t.events.push(LockEvent { seq, thread, kind });
    }

    /// Starts recording lock events (used by tests and stress scenarios).
    pub fn enable_trace(&self) {
        self.trace.lock().enabled = true;
    }

    pub fn take_trace(&self) -> Vec<LockEvent> {
        std::mem::take(&mut self.trace.lock().events)
    }

    /// Blocks until the lock is owned by the current thread, reentering if
    /// it already is. The returned guard releases one level on drop.
    pub fn enter_native(&self) -> NativeGuard<'_> {
        let me = std::thread::current().id();
        let mut st = self.state.lock();
        if st.owner == Some(me) {
            st.depth += 1;
            self.stats.reentries.fetch_add(1, Ordering::Relaxed);
            return NativeGuard {
                lock: self,
                _not_send: PhantomData,
            };
        }
        if st.owner.is_some() {
            self.stats.contentions.fetch_add(1, Ordering::Relaxed);
            while st.owner.is_some() {
                self.cv.wait(&mut st);
            }
        }
        st.owner = Some(me);
        st.depth = 1;
        self.stats.acquisitions.fetch_add(1, Ordering::Relaxed);
        // Recorded under the state mutex so the trace order matches the
        // ownership order exactly.
        self.record(LockEventKind::Acquired);
        drop(st);
        NativeGuard {
            lock: self,
            _not_send: PhantomData,
        }
    }

    fn exit_native(&self) {
        let me = std::thread::current().id();
        let mut st = self.state.lock();
        if st.owner != Some(me) || st.depth == 0 {
            fatal_invariant!("native exit without ownership");
        }
        st.depth -= 1;
        if st.depth == 0 {
            st.owner = None;
            self.record(LockEventKind::Released);
            drop(st);
            self.cv.notify_all();
        }
    }

    pub fn is_owned_by_current(&self) -> bool {
        self.state.lock().owner == Some(std::thread::current().id())
    }

    pub fn current_depth(&self) -> usize {
        let st = self.state.lock();
        if st.owner == Some(std::thread::current().id()) {
            st.depth
        } else {
            0
        }
    }

    /// Fully releases the lock (saving the reentrancy depth), runs `f`, and
    /// reacquires with the depth restored before returning — also on panic.
    pub fn callback_to_managed<R>(&self, f: impl FnOnce() -> R) -> R {
        let me = std::thread::current().id();
        let saved = {
            let mut st = self.state.lock();
            if st.owner != Some(me) {
                fatal_invariant!("managed callback without lock ownership");
            }
            let saved = st.depth;
            st.owner = None;
            st.depth = 0;
            self.record(LockEventKind::CallbackBegin);
            self.record(LockEventKind::Released);
            saved
        };
        self.cv.notify_all();
        self.stats.callbacks.fetch_add(1, Ordering::Relaxed);

        CALLBACK_DEPTH.with(|d| d.set(d.get() + 1));
        let _restore = RestoreOnDrop {
            lock: self,
            depth: saved,
            end_event: LockEventKind::CallbackEnd,
        };
        f()
        // _restore reacquires here, panicking or not, and pops the
        // callback depth.
    }

    /// Opens an allow-threads window: requires ownership, saves the depth
    /// and releases the lock until the matching [`BoundaryLock::allow_threads_end`].
    pub fn allow_threads_begin(&self) {
        let me = std::thread::current().id();
        let key = self.thread_key();
        {
            let mut st = self.state.lock();
            if st.owner != Some(me) {
                fatal_invariant!("allow-threads begin without lock ownership");
            }
            let saved = st.depth;
            st.allow_saved.entry(key).or_default().push(saved);
            st.owner = None;
            st.depth = 0;
            self.record(LockEventKind::AllowBegin);
            self.record(LockEventKind::Released);
        }
        self.cv.notify_all();
        self.stats.allow_windows.fetch_add(1, Ordering::Relaxed);
    }

    /// Closes the innermost allow-threads window opened by this thread,
    /// reacquiring and restoring the saved depth. Unmatched end is fatal.
    pub fn allow_threads_end(&self) {
        let me = std::thread::current().id();
        let key = self.thread_key();
        let mut st = self.state.lock();
        let saved = match st.allow_saved.get_mut(&key).and_then(|v| v.pop()) {
            Some(s) => s,
            None => fatal_invariant!("unmatched allow-threads end"),
        };
        while st.owner.is_some() {
            self.cv.wait(&mut st);
        }
        st.owner = Some(me);
        st.depth = saved;
        self.stats.acquisitions.fetch_add(1, Ordering::Relaxed);
        self.record(LockEventKind::Acquired);
        self.record(LockEventKind::AllowEnd);
    }

    /// Scoped allow-threads convenience.
    pub fn allow_threads<R>(&self, f: impl FnOnce() -> R) -> R {
        self.allow_threads_begin();
        let out = f();
        self.allow_threads_end();
        out
    }

    fn reacquire(&self, depth: usize) {
        let me = std::thread::current().id();
        let mut st = self.state.lock();
        while st.owner.is_some() {
            self.cv.wait(&mut st);
        }
        st.owner = Some(me);
        st.depth = depth;
        self.stats.acquisitions.fetch_add(1, Ordering::Relaxed);
        self.record(LockEventKind::Acquired);
    }
}

/// Scoped hold of one reentrancy level. Not transferable between threads.
pub struct NativeGuard<'a> {
    lock: &'a BoundaryLock,
    _not_send: PhantomData<*const ()>,
}

impl Drop for NativeGuard<'_> {
    fn drop(&mut self) {
        self.lock.exit_native();
    }
}

struct RestoreOnDrop<'a> {
    lock: &'a BoundaryLock,
    depth: usize,
    end_event: LockEventKind,
}

impl Drop for RestoreOnDrop<'_> {
    fn drop(&mut self) {
        CALLBACK_DEPTH.with(|d| d.set(d.get() - 1));
        self.lock.reacquire(self.depth);
        self.lock.record(self.end_event);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn single_thread_enter_exit() {
        let lock = BoundaryLock::new();
        assert!(!lock.is_owned_by_current());
        {
            let _g = lock.enter_native();
            assert!(lock.is_owned_by_current());
            assert_eq!(lock.current_depth(), 1);
        }
        assert!(!lock.is_owned_by_current());
    }

    #[test]
    fn reentrancy_counts_depth() {
        let lock = BoundaryLock::new();
        let _g1 = lock.enter_native();
        {
            let _g2 = lock.enter_native();
            assert_eq!(lock.current_depth(), 2);
        }
        assert_eq!(lock.current_depth(), 1);
        assert_eq!(lock.stats.acquisitions.load(Ordering::Relaxed), 1);
        assert_eq!(lock.stats.reentries.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn callback_releases_and_restores_depth() {
        let lock = BoundaryLock::new();
        let _g1 = lock.enter_native();
        let _g2 = lock.enter_native();
        assert_eq!(lock.current_depth(), 2);
        lock.callback_to_managed(|| {
            assert!(!lock.is_owned_by_current());
            assert!(in_managed_callback());
        });
        assert!(!in_managed_callback());
        assert_eq!(lock.current_depth(), 2);
    }

    #[test]
    fn callback_reacquires_on_panic() {
        let lock = BoundaryLock::new();
        let g = lock.enter_native();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            lock.callback_to_managed(|| panic!("boom"))
        }));
        assert!(out.is_err());
        assert_eq!(lock.current_depth(), 1);
        drop(g);
    }

    #[test]
    fn other_thread_enters_during_callback() {
        let lock = Arc::new(BoundaryLock::new());
        lock.enable_trace();
        let l2 = Arc::clone(&lock);
        let g = lock.enter_native();
        lock.callback_to_managed(move || {
            let t = std::thread::spawn(move || {
                let _g = l2.enter_native();
            });
            t.join().unwrap();
        });
        drop(g);
        let trace = lock.take_trace();
        // The spawned thread's acquisition happens strictly inside the
        // callback window.
        let cb_begin = trace
            .iter()
            .position(|e| e.kind == LockEventKind::CallbackBegin)
            .unwrap();
        let cb_end = trace
            .iter()
            .position(|e| e.kind == LockEventKind::CallbackEnd)
            .unwrap();
        let other = trace
            .iter()
            .position(|e| e.kind == LockEventKind::Acquired && e.thread != trace[cb_begin].thread)
            .unwrap();
        assert!(cb_begin < other && other < cb_end);
    }

    #[test]
    fn allow_threads_window_admits_other_thread() {
        let lock = Arc::new(BoundaryLock::new());
        let l2 = Arc::clone(&lock);
        let g = lock.enter_native();
        lock.allow_threads_begin();
        let t = std::thread::spawn(move || {
            let _g = l2.enter_native();
            true
        });
        assert!(t.join().unwrap());
        lock.allow_threads_end();
        assert_eq!(lock.current_depth(), 1);
        drop(g);
    }

    #[test]
    #[should_panic(expected = "invariant violation")]
    fn unmatched_allow_end_is_fatal() {
        let lock = BoundaryLock::new();
        let _g = lock.enter_native();
        lock.allow_threads_end();
    }

    #[test]
    fn mutual_exclusion_under_stress() {
        let lock = Arc::new(BoundaryLock::new());
        let counter = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let mut handles = Vec::new();
        for _ in 0..4 {
            let lock = Arc::clone(&lock);
            let counter = Arc::clone(&counter);
            handles.push(std::thread::spawn(move || {
                for _ in 0..200 {
                    let _g = lock.enter_native();
                    // Deliberately racy read-modify-write: only the lock
                    // makes it safe.
                    let v = counter.load(Ordering::Relaxed);
                    std::thread::yield_now();
                    counter.store(v + 1, Ordering::Relaxed);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(counter.load(Ordering::Relaxed), 800);
    }
}
