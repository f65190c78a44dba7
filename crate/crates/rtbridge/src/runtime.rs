//! The top-level runtime: one boundary lock, one object world, one
//! finalization queue. Public operations acquire the boundary lock
//! (reentrantly) and take short scoped access to the world; the queue is
//! pollable without any lock.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::arena::{DEFAULT_CAPACITY, NativeRef};
use crate::error::Result;
use crate::ext::{demo_extension, parse_extension_text, ExtensionModuleDef};
use crate::gcbridge::RefreshReport;
use crate::lock::{in_managed_callback, BoundaryLock, NativeGuard};
use crate::managed::{CollectReport, FinalizationQueue, MPayload, ManagedHandle};
use crate::world::World;

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub arena_capacity: u64,
    /// Register the built-in demo extension at startup.
    pub register_demo: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            arena_capacity: DEFAULT_CAPACITY,
            register_demo: true,
        }
    }
}

struct PollerHandle {
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

struct RuntimeInner {
    lock: BoundaryLock,
    world: Mutex<World>,
    queue: Arc<FinalizationQueue>,
    poller: Mutex<Option<PollerHandle>>,
}

/// A bridge runtime instance. Cheap to clone; clones share the same world.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<RuntimeInner>,
}

impl Default for Runtime {
    fn default() -> Self {
        Self::new()
    }
}

impl Runtime {
    pub fn new() -> Self {
        Self::with_config(RuntimeConfig::default())
    }

    pub fn with_config(config: RuntimeConfig) -> Self {
        let queue = Arc::new(FinalizationQueue::new());
        let world = World::new(config.arena_capacity, Arc::clone(&queue));
        let rt = Runtime {
            inner: Arc::new(RuntimeInner {
                lock: BoundaryLock::new(),
                world: Mutex::new(world),
                queue,
                poller: Mutex::new(None),
            }),
        };
        if config.register_demo {
            rt.register_extension(demo_extension())
                .expect("demo extension registers");
        }
        rt
    }

    /// The boundary lock (GIL analog) of this runtime instance.
    pub fn lock(&self) -> &BoundaryLock {
        &self.inner.lock
    }

    /// Enters native code: blocks until this thread holds the boundary
    /// lock. The world may only be touched while a guard is live.
    pub fn enter_native(&self) -> NativeGuard<'_> {
        self.inner.lock.enter_native()
    }

    /// Runs `f` on the world under the boundary lock.
    pub fn with_world<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        let _guard = self.inner.lock.enter_native();
        let mut world = self.inner.world.lock();
        f(&mut world)
    }

    // ---- conversions ----

    pub fn to_managed(&self, r: Option<NativeRef>) -> Result<Option<ManagedHandle>> {
        self.with_world(|w| w.to_managed(r))
    }

    pub fn to_native(&self, h: Option<ManagedHandle>) -> Result<Option<NativeRef>> {
        self.with_world(|w| w.to_native(h))
    }

    // ---- managed-side entry points ----

    pub fn find_attr(&self, h: ManagedHandle, name: &str) -> Result<Option<ManagedHandle>> {
        // GIL-freeness instrumentation: inside a managed callback the
        // caller must have released the lock.
        if in_managed_callback() {
            debug_assert!(
                !self.inner.lock.is_owned_by_current(),
                "boundary lock held while executing managed code in a callback"
            );
        }
        self.with_world(|w| w.find_attr(h, name))
    }

    pub fn call_object(&self, callee: ManagedHandle, args: ManagedHandle) -> Result<ManagedHandle> {
        if in_managed_callback() {
            debug_assert!(
                !self.inner.lock.is_owned_by_current(),
                "boundary lock held while executing managed code in a callback"
            );
        }
        self.with_world(|w| w.call_object(callee, args))
    }

    /// Convenience: builds the argument tuple from a slice of handles.
    pub fn call_with(&self, callee: ManagedHandle, args: &[ManagedHandle]) -> Result<ManagedHandle> {
        self.with_world(|w| {
            let tuple = w.managed.new_object(MPayload::Tuple(args.to_vec()));
            w.call_object(callee, tuple)
        })
    }

    pub fn set_attr(&self, h: ManagedHandle, name: &str, value: ManagedHandle) -> Result<()> {
        self.with_world(|w| w.set_attr(h, name, value))
    }

    pub fn str_of(&self, h: ManagedHandle) -> Result<String> {
        self.with_world(|w| w.str_of(h))
    }

    pub fn repr_of(&self, h: ManagedHandle) -> Result<String> {
        self.with_world(|w| w.repr_of(h))
    }

    // ---- managed constructors ----

    pub fn managed_int(&self, v: i64) -> ManagedHandle {
        self.with_world(|w| w.managed.new_object(MPayload::Int(v)))
    }

    pub fn managed_float(&self, v: f64) -> ManagedHandle {
        self.with_world(|w| w.managed.new_object(MPayload::Float(v)))
    }

    pub fn managed_str(&self, s: &str) -> ManagedHandle {
        self.with_world(|w| w.managed.new_object(MPayload::Str(s.as_bytes().to_vec())))
    }

    pub fn managed_list(&self, items: Vec<ManagedHandle>) -> ManagedHandle {
        self.with_world(|w| {
            w.managed
                .new_object(MPayload::List(crate::managed::ListBackend::Local(items)))
        })
    }

    pub fn managed_tuple(&self, items: Vec<ManagedHandle>) -> ManagedHandle {
        self.with_world(|w| w.managed.new_object(MPayload::Tuple(items)))
    }

    pub fn root(&self, h: ManagedHandle) {
        self.with_world(|w| w.managed.root(h));
    }

    pub fn unroot(&self, h: ManagedHandle) {
        self.with_world(|w| w.managed.unroot(h));
    }

    // ---- GC ----

    pub fn gc_collect(&self) -> CollectReport {
        self.with_world(|w| w.gc_collect())
    }

    pub fn gc_refresh(&self, scope: Option<&[NativeRef]>) -> RefreshReport {
        self.with_world(|w| w.refresh_connectivity(scope))
    }

    pub fn ensure_gc_head(&self, r: NativeRef) -> ManagedHandle {
        self.with_world(|w| w.ensure_gc_head(r))
    }

    /// FIFO dequeue from the reference queue; safe without the boundary
    /// lock.
    pub fn poll_finalizable(&self) -> Option<ManagedHandle> {
        self.inner.queue.poll()
    }

    pub fn on_finalized(&self, h: ManagedHandle) {
        self.with_world(|w| w.on_finalized(h))
    }

    pub fn drain_finalizables(&self) -> usize {
        self.with_world(|w| w.drain_finalizables())
    }

    pub fn gc_full(&self) -> (usize, usize) {
        self.with_world(|w| w.gc_full())
    }

    /// (dynamic native live count, natives reachable from managed roots).
    /// Equal after a full GC when nothing leaks.
    pub fn leak_audit(&self) -> (usize, usize) {
        self.with_world(|w| (w.native.live_count(), w.reachable_native_set().len()))
    }

    // ---- extensions ----

    pub fn register_extension(&self, def: ExtensionModuleDef) -> Result<ManagedHandle> {
        self.with_world(|w| w.register_extension(def))
    }

    pub fn register_extension_text(&self, text: &str) -> Result<ManagedHandle> {
        let def = parse_extension_text(text)?;
        self.register_extension(def)
    }

    pub fn import_module(&self, name: &str) -> Result<ManagedHandle> {
        self.with_world(|w| w.import_module(name))
    }

    /// (module name, function count, type count) per registered extension.
    pub fn list_extensions(&self) -> Vec<(String, usize, usize)> {
        self.with_world(|w| {
            w.extensions
                .names()
                .map(|n| {
                    let ext = w.extensions.get(n).expect("listed extension");
                    (n.to_string(), ext.def.functions.len(), ext.def.types.len())
                })
                .collect()
        })
    }

    // ---- stats ----

    /// Merged counter snapshot: world counters, lock stats, queue totals.
    pub fn stats_snapshot(&self) -> BTreeMap<String, u64> {
        let mut out = self.with_world(|w| w.snapshot());
        let stats = &self.inner.lock.stats;
        out.insert(
            "lock_acquisitions".into(),
            stats.acquisitions.load(Ordering::Relaxed),
        );
        out.insert(
            "lock_contentions".into(),
            stats.contentions.load(Ordering::Relaxed),
        );
        out.insert(
            "lock_reentries".into(),
            stats.reentries.load(Ordering::Relaxed),
        );
        out.insert(
            "lock_callbacks".into(),
            stats.callbacks.load(Ordering::Relaxed),
        );
        out.insert(
            "lock_allow_windows".into(),
            stats.allow_windows.load(Ordering::Relaxed),
        );
        out.insert("gc_queue_len".into(), self.inner.queue.len() as u64);
        out
    }

    // ---- daemon poller (optional; pull-based draining is the default) ----

    /// Spawns a daemon thread that polls the reference queue and finalizes
    /// handles at the given cadence. Cadence is a liveness knob, not a
    /// correctness parameter.
    pub fn start_poller(&self, interval: Duration) {
        let mut slot = self.inner.poller.lock();
        if slot.is_some() {
            return;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let rt = self.clone();
        let join = std::thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                while let Some(h) = rt.inner.queue.poll() {
                    rt.with_world(|w| w.on_finalized(h));
                }
                std::thread::sleep(interval);
            }
        });
        *slot = Some(PollerHandle {
            stop,
            join: Some(join),
        });
    }

    pub fn stop_poller(&self) {
        let handle = self.inner.poller.lock().take();
        if let Some(mut handle) = handle {
            handle.stop.store(true, Ordering::Relaxed);
            if let Some(join) = handle.join.take() {
                let _ = join.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_extension_is_preregistered() {
        let rt = Runtime::new();
        let demo = rt.import_module("demo").unwrap();
        let demo2 = rt.import_module("demo").unwrap();
        assert_eq!(demo, demo2);
        assert!(rt.import_module("missing").is_err());
    }

    #[test]
    fn call_crosses_boundary_once() {
        let rt = Runtime::new();
        let demo = rt.import_module("demo").unwrap();
        let add = rt.find_attr(demo, "add_ints").unwrap().unwrap();
        let before = rt.lock().stats.acquisitions.load(Ordering::Relaxed);
        let a = rt.managed_int(3);
        let b = rt.managed_int(4);
        let result = rt.call_with(add, &[a, b]).unwrap();
        let after = rt.lock().stats.acquisitions.load(Ordering::Relaxed);
        assert_eq!(rt.str_of(result).unwrap(), "7");
        // One enter per public operation; the call itself is exactly one.
        assert_eq!(after - before, 3);
    }

    #[test]
    fn poller_drains_queue() {
        let rt = Runtime::new();
        let r = rt.with_world(|w| w.native.new_int(9).unwrap());
        let _twin = rt.to_managed(Some(r)).unwrap().unwrap();
        rt.with_world(|w| w.native.decref(r));
        rt.start_poller(Duration::from_millis(1));
        rt.gc_collect();
        for _ in 0..500 {
            if rt.with_world(|w| !w.native.is_live(r)) {
                break;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        rt.stop_poller();
        assert!(rt.with_world(|w| !w.native.is_live(r)));
    }
}
