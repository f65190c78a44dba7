//! The combined object world: both heaps plus the bridge tables.
//!
//! A [`World`] is everything the boundary lock protects. The runtime layer
//! wraps it in a mutex and hands out short scoped access; operations that
//! span modules (conversions, attribute delegation, GC bridging) are
//! implemented as `impl World` blocks in their home modules.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::arena::NativeRef;
use crate::bridge::{HandleTable, StaticTypeRegistry};
use crate::error::{BridgeError, Result};
use crate::ext::ExtensionRegistry;
use crate::fatal_invariant;
use crate::managed::{FinalizationQueue, ManagedHandle, ManagedHeap};
use crate::native::{NativeWorld, SingletonKind};

/// Monotonic operation counters, emitted as sorted `key=value` lines by the
/// CLI. Counts only; no timings.
#[derive(Debug, Default)]
pub struct Counters {
    pub conv_to_managed_hit: u64,
    pub conv_to_managed_init: u64,
    pub conv_to_native_hit: u64,
    pub conv_to_native_init: u64,
    pub gc_collects: u64,
    pub gc_reclaimed: u64,
    pub gc_enqueued: u64,
    pub gc_refreshes: u64,
    pub refresh_edges_added: u64,
    pub refresh_edges_removed: u64,
    pub native_lookups: u64,
    pub managed_reentries_during_native_lookup: u64,
}

#[derive(Debug)]
pub struct World {
    pub native: NativeWorld,
    pub managed: ManagedHeap,
    pub handles: HandleTable,
    pub statics: StaticTypeRegistry,
    pub extensions: ExtensionRegistry,
    pub stats: Counters,
    /// Snapshot counter bumped once per connectivity refresh.
    pub gc_generation: u64,
    /// Text of the last native-side lookup failure, for diagnostics.
    pub last_native_error: Option<String>,
    /// Recursion probe: depth of native generic attribute lookups in
    /// progress. Managed lookup entry points assert it is zero.
    pub(crate) native_lookup_depth: u32,
    pub queue: Arc<FinalizationQueue>,
}

impl World {
    pub fn new(arena_capacity: u64, queue: Arc<FinalizationQueue>) -> Self {
        let native = NativeWorld::new(arena_capacity);
        let mut world = World {
            native,
            managed: ManagedHeap::new(),
            handles: HandleTable::new(),
            statics: StaticTypeRegistry::new(),
            extensions: ExtensionRegistry::new(),
            stats: Counters::default(),
            gc_generation: 0,
            last_native_error: None,
            native_lookup_depth: 0,
            queue,
        };
        for kind in SingletonKind::ALL {
            world.managed.intern(kind);
        }
        for type_ref in world.native.builtins.all() {
            world
                .register_static_type(type_ref)
                .expect("builtin type registration");
        }
        world
    }

    /// Enters an isHeapType=false type into the static registry, creating
    /// its rooted managed wrapper. Each static type registers exactly once.
    pub fn register_static_type(&mut self, type_ref: NativeRef) -> Result<ManagedHandle> {
        let data = self.native.type_data(type_ref);
        if data.is_heap_type {
            fatal_invariant!("heap type {} in static registry", data.name);
        }
        let name = data.name.clone();
        if self.statics.by_name(&name).is_some() {
            return Err(BridgeError::Descriptor(format!(
                "static type '{name}' registered twice"
            )));
        }
        let h = self.managed.new_peer(type_ref, true);
        self.managed.root(h);
        self.statics.register(name, type_ref, h);
        Ok(h)
    }

    /// Counter snapshot merged with structure sizes, key-sorted.
    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        let s = &self.stats;
        let mut out = BTreeMap::new();
        out.insert("arena_allocs".into(), self.native.arena.total_allocs());
        out.insert("arena_live".into(), self.native.live_count() as u64);
        out.insert("aux_live".into(), self.native.arena.aux_live());
        out.insert("conv_to_managed_hit".into(), s.conv_to_managed_hit);
        out.insert("conv_to_managed_init".into(), s.conv_to_managed_init);
        out.insert("conv_to_native_hit".into(), s.conv_to_native_hit);
        out.insert("conv_to_native_init".into(), s.conv_to_native_init);
        out.insert("gc_collects".into(), s.gc_collects);
        out.insert("gc_enqueued".into(), s.gc_enqueued);
        out.insert("gc_reclaimed".into(), s.gc_reclaimed);
        out.insert("gc_refreshes".into(), s.gc_refreshes);
        out.insert("managed_live".into(), self.managed.live_count() as u64);
        out.insert("native_lookups".into(), s.native_lookups);
        out.insert("refresh_edges_added".into(), s.refresh_edges_added);
        out.insert("refresh_edges_removed".into(), s.refresh_edges_removed);
        let (enqueued, polled) = self.queue.counts();
        out.insert("gc_polled".into(), polled);
        debug_assert!(enqueued >= polled);
        out
    }
}
