//! Cross-runtime cycle collection.
//!
//! Native objects without a managed counterpart get minimal carrier objects
//! (GC heads) on the managed side; native connectivity is mirrored into the
//! stand-ins so the managed tracer marks and sweeps according to it.
//!
//! Update discipline: edge additions are mirrored eagerly at the mutation
//! site, removals take effect only at the next connectivity refresh. The
//! mirrored graph is therefore a supergraph of the true graph between
//! refreshes, and a mark-sweep over a supergraph reclaims a subset — an
//! outdated graph can only delay reclamation, never reclaim something
//! reachable.

use std::collections::{BTreeMap, BTreeSet};

use crate::arena::NativeRef;
use crate::fatal_invariant;
use crate::managed::{CollectReport, ListBackend, MPayload, ManagedHandle, ManagedHeap};
use crate::native::{NativeWorld, Payload};
use crate::world::World;

/// Aux-list tag under which an object's carrier handle is recorded.
pub const GC_AUX_TAG: u8 = 1;

/// The live managed stand-in for a native object: its twin (header peer) if
/// one exists, otherwise its GC-head carrier from the aux list. Handles of
/// swept-but-not-finalized objects do not count.
pub fn stand_in_of(
    native: &NativeWorld,
    heap: &ManagedHeap,
    r: NativeRef,
) -> Option<ManagedHandle> {
    if let Some(id) = native.peer_of(r) {
        let h = ManagedHandle(id);
        if heap.is_live(h) {
            return Some(h);
        }
    }
    if let Some(blob) = native.aux_get(r, GC_AUX_TAG) {
        let h = ManagedHandle(handle_from_blob(blob));
        if heap.is_live(h) {
            return Some(h);
        }
    }
    None
}

fn handle_from_blob(blob: &[u8]) -> u64 {
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&blob[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshReport {
    pub edges_added: usize,
    pub edges_removed: usize,
    pub generation: u64,
}

fn carries_mirror_edges(payload: &MPayload) -> bool {
    matches!(
        payload,
        MPayload::Peer
            | MPayload::PeerType
            | MPayload::GcHeadCarrier { .. }
            | MPayload::List(ListBackend::NativeView(_))
    )
}

fn multiset_diff(old: &[ManagedHandle], new: &[ManagedHandle]) -> (usize, usize) {
    let mut counts: BTreeMap<u64, i64> = BTreeMap::new();
    for h in new {
        *counts.entry(h.0).or_default() += 1;
    }
    for h in old {
        *counts.entry(h.0).or_default() -= 1;
    }
    let mut added = 0usize;
    let mut removed = 0usize;
    for (_, d) in counts {
        if d > 0 {
            added += d as usize;
        } else {
            removed += (-d) as usize;
        }
    }
    (added, removed)
}

impl World {
    pub fn stand_in(&self, r: NativeRef) -> Option<ManagedHandle> {
        stand_in_of(&self.native, &self.managed, r)
    }

    /// Idempotent: returns the existing stand-in (bridged objects carry
    /// finalization interest themselves), or creates a carrier, pins the
    /// target, records the carrier in the header aux list and mirrors the
    /// target's current connectivity transitively.
    pub fn ensure_gc_head(&mut self, r: NativeRef) -> ManagedHandle {
        if let Payload::Singleton(k) = self.native.object(r).payload {
            return self.managed.intern(k);
        }
        if self.native.object(r).immortal {
            return self
                .statics
                .by_ref(r)
                .unwrap_or_else(|| fatal_invariant!("static object {r} missing from registry"));
        }
        if let Some(h) = stand_in_of(&self.native, &self.managed, r) {
            return h;
        }
        let h = self.managed.new_carrier(r);
        self.native.incref(r); // pin owned by the carrier
        self.native.aux_set(r, GC_AUX_TAG, h.0.to_le_bytes().to_vec());
        let children = self.native.children_of(r);
        let mut edges = Vec::with_capacity(children.len());
        for c in children {
            if self.native.object(c).immortal {
                continue;
            }
            edges.push(self.ensure_gc_head(c));
        }
        self.managed.object_mut(h).mirrored_edges = edges;
        h
    }

    /// Eager-addition hook for native container writes: when the container
    /// has an edge-carrying stand-in, the new item gains a stand-in and the
    /// edge is appended immediately. Removals wait for the next refresh.
    pub(crate) fn gc_note_edge(&mut self, container: NativeRef, item: NativeRef) {
        if self.native.object(item).immortal {
            return;
        }
        let Some(sh) = stand_in_of(&self.native, &self.managed, container) else {
            return;
        };
        if !carries_mirror_edges(&self.managed.object(sh).payload) {
            return;
        }
        let ih = self.ensure_gc_head(item);
        self.managed.object_mut(sh).mirrored_edges.push(ih);
    }

    /// Recomputes mirrored connectivity for the scoped natives (default:
    /// every live native with a stand-in), replacing each object's edge
    /// list atomically. This is where stale removals take effect.
    pub fn refresh_connectivity(&mut self, scope: Option<&[NativeRef]>) -> RefreshReport {
        self.gc_generation += 1;
        let generation = self.gc_generation;
        let targets: Vec<NativeRef> = match scope {
            Some(s) => s.to_vec(),
            None => self
                .native
                .live_dynamic()
                .into_iter()
                .filter(|r| stand_in_of(&self.native, &self.managed, *r).is_some())
                .collect(),
        };
        let mut added = 0usize;
        let mut removed = 0usize;
        for r in targets {
            if !self.native.is_live(r) {
                continue;
            }
            let Some(sh) = stand_in_of(&self.native, &self.managed, r) else {
                continue;
            };
            if !carries_mirror_edges(&self.managed.object(sh).payload) {
                // Structural twins (immutable mirrors, delegation stubs)
                // mirror exactly by construction.
                continue;
            }
            let children = self.native.children_of(r);
            let mut new_edges = Vec::with_capacity(children.len());
            for c in children {
                if self.native.object(c).immortal {
                    continue;
                }
                new_edges.push(self.ensure_gc_head(c));
            }
            let old = std::mem::take(&mut self.managed.object_mut(sh).mirrored_edges);
            let (a, rm) = multiset_diff(&old, &new_edges);
            added += a;
            removed += rm;
            let obj = self.managed.object_mut(sh);
            obj.mirrored_edges = new_edges;
            obj.gc_generation = generation;
        }
        self.stats.gc_refreshes += 1;
        self.stats.refresh_edges_added += added as u64;
        self.stats.refresh_edges_removed += removed as u64;
        RefreshReport {
            edges_added: added,
            edges_removed: removed,
            generation,
        }
    }

    /// Runs the managed collector and books the results.
    pub fn gc_collect(&mut self) -> CollectReport {
        let report = self.managed.collect(&self.native, &self.handles, &self.queue);
        self.stats.gc_collects += 1;
        self.stats.gc_reclaimed += report.reclaimed_count as u64;
        self.stats.gc_enqueued += report.enqueued_finalizables as u64;
        report
    }

    /// Native-side cleanup for a handle dequeued from the reference queue:
    /// releases the pin, clears the header peer / GC aux tag, drops the
    /// handle-table entry. If the target then survives on internal refs
    /// with no live stand-in left, it is cycle trash: its outgoing refs are
    /// cleared so refcounting can reclaim the whole cycle.
    pub fn on_finalized(&mut self, h: ManagedHandle) {
        let Some(record) = self.queue.take_record(h) else {
            fatal_invariant!("double or unknown finalization of {h}")
        };
        debug_assert!(!self.managed.is_live(h), "finalizing a live object");
        let target = record
            .target
            .unwrap_or_else(|| fatal_invariant!("finalization record without target"));
        if !self.native.is_live(target) {
            fatal_invariant!("pinned native {target} died before finalization");
        }
        if record.is_carrier {
            let matches_tag = self
                .native
                .aux_get(target, GC_AUX_TAG)
                .map(|blob| handle_from_blob(blob) == h.0)
                .unwrap_or(false);
            if matches_tag {
                self.native.aux_remove(target, GC_AUX_TAG);
            }
        } else {
            self.handles.remove(h);
            if !self.native.object(target).immortal {
                let header = self.native.header_mut(target);
                if header.peer == h.0 {
                    header.peer = 0;
                }
            }
        }
        self.native.decref(target);
        if self.native.is_live(target)
            && stand_in_of(&self.native, &self.managed, target).is_none()
        {
            let dropped = self.native.clear_refs(target);
            for c in dropped {
                self.native.decref(c);
            }
        }
    }

    /// Pull-based queue drain: polls and finalizes until empty. Returns the
    /// number of finalized handles.
    pub fn drain_finalizables(&mut self) -> usize {
        let mut n = 0;
        while let Some(h) = self.queue.poll() {
            self.on_finalized(h);
            n += 1;
        }
        n
    }

    /// Refresh + collect + drain until a fixpoint; returns total reclaimed
    /// managed objects and total finalizations.
    pub fn gc_full(&mut self) -> (usize, usize) {
        let mut reclaimed = 0;
        let mut finalized = 0;
        for _ in 0..64 {
            self.refresh_connectivity(None);
            let report = self.gc_collect();
            let drained = self.drain_finalizables();
            reclaimed += report.reclaimed_count;
            finalized += drained;
            if report.reclaimed_count == 0 && drained == 0 {
                return (reclaimed, finalized);
            }
        }
        fatal_invariant!("gc_full did not reach a fixpoint")
    }

    /// Dynamic native objects reachable from the managed roots through the
    /// true combined graph (managed edges, bridge links, native payload
    /// refs). Used by the leak audit.
    pub fn reachable_native_set(&self) -> BTreeSet<u64> {
        let mut seen_m: BTreeSet<u64> = BTreeSet::new();
        let mut seen_n: BTreeSet<u64> = BTreeSet::new();
        let mut work_m: Vec<ManagedHandle> = self.managed.roots.iter().copied().collect();
        let mut work_n: Vec<NativeRef> = Vec::new();

        loop {
            while let Some(h) = work_m.pop() {
                if !self.managed.is_live(h) || !seen_m.insert(h.0) {
                    continue;
                }
                for e in self.managed.edges_of(&self.native, h) {
                    work_m.push(e);
                }
                let obj = self.managed.object(h);
                if let Some(r) = obj.native_peer {
                    work_n.push(r);
                }
                if let MPayload::GcHeadCarrier { target } = obj.payload {
                    work_n.push(target);
                }
                if let MPayload::List(ListBackend::NativeView(r)) = obj.payload {
                    work_n.push(r);
                }
                if let Some(r) = self.handles.get(h) {
                    work_n.push(r);
                }
            }
            if work_n.is_empty() {
                break;
            }
            while let Some(r) = work_n.pop() {
                if !self.native.is_live(r) || self.native.object(r).immortal {
                    continue;
                }
                if !seen_n.insert(r.addr()) {
                    continue;
                }
                self.native.visit_refs(r, |c| work_n.push(c));
                if let Some(id) = self.native.peer_of(r) {
                    work_m.push(ManagedHandle(id));
                }
            }
            if work_m.is_empty() {
                break;
            }
        }
        seen_n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::managed::FinalizationQueue;
    use std::sync::Arc;

    fn world() -> World {
        World::new(
            crate::arena::DEFAULT_CAPACITY,
            Arc::new(FinalizationQueue::new()),
        )
    }

    #[test]
    fn ensure_gc_head_is_idempotent() {
        let mut w = world();
        let r = w.native.new_int(5).unwrap();
        let h1 = w.ensure_gc_head(r);
        let h2 = w.ensure_gc_head(r);
        assert_eq!(h1, h2);
        assert_eq!(w.native.refcount(r), 2); // creator + one pin
    }

    #[test]
    fn bridged_object_gets_no_separate_head() {
        let mut w = world();
        let r = w.native.new_int(5).unwrap();
        let twin = w.to_managed(Some(r)).unwrap().unwrap();
        let head = w.ensure_gc_head(r);
        assert_eq!(head, twin);
        assert!(w.native.aux_get(r, GC_AUX_TAG).is_none());
    }

    #[test]
    fn ensure_closes_over_reachable_natives() {
        let mut w = world();
        let a = w.native.new_int(1).unwrap();
        let b = w.native.new_int(2).unwrap();
        let inner = w.native.new_tuple(vec![a, b]).unwrap();
        let outer = w.native.new_tuple(vec![inner]).unwrap();
        let h = w.ensure_gc_head(outer);
        let edges = &w.managed.object(h).mirrored_edges;
        assert_eq!(edges.len(), 1);
        let inner_head = edges[0];
        assert_eq!(w.managed.object(inner_head).mirrored_edges.len(), 2);
    }

    #[test]
    fn refresh_prunes_removed_edges() {
        let mut w = world();
        let list = w.native.new_list(vec![]).unwrap();
        let head = w.ensure_gc_head(list);
        let item = w.native.new_int(9).unwrap();
        w.native_list_append(list, item);
        assert_eq!(w.managed.object(head).mirrored_edges.len(), 1);
        w.native_list_pop(list).unwrap();
        // Removal is not reflected before the refresh.
        assert_eq!(w.managed.object(head).mirrored_edges.len(), 1);
        let report = w.refresh_connectivity(Some(&[list]));
        assert_eq!(report.edges_removed, 1);
        assert!(w.managed.object(head).mirrored_edges.is_empty());
    }

    #[test]
    fn finalize_releases_pin_and_header() {
        let mut w = world();
        let r = w.native.new_int(7).unwrap();
        let twin = w.to_managed(Some(r)).unwrap().unwrap();
        w.native.decref(r); // drop creator ref; pin remains
        assert!(w.native.is_live(r));
        let report = w.gc_collect();
        assert_eq!(report.enqueued_finalizables, 1);
        assert_eq!(w.drain_finalizables(), 1);
        assert!(!w.native.is_live(r));
        assert!(!w.handles.contains(twin));
    }

    #[test]
    fn finalize_of_natively_referenced_object_keeps_it_alive() {
        let mut w = world();
        let r = w.native.new_int(7).unwrap();
        let holder = w.native.new_tuple(vec![r]).unwrap();
        w.native.decref(r);
        let _twin = w.to_managed(Some(r)).unwrap().unwrap();
        w.gc_collect();
        w.drain_finalizables();
        assert!(w.native.is_live(r), "native ref from tuple keeps it alive");
        assert_eq!(w.native.refcount(r), 1);
        w.native.decref(holder);
    }

    #[test]
    #[should_panic(expected = "invariant violation")]
    fn double_finalization_is_fatal() {
        let mut w = world();
        let r = w.native.new_int(7).unwrap();
        let twin = w.to_managed(Some(r)).unwrap().unwrap();
        w.native.decref(r);
        w.gc_collect();
        let polled = w.queue.poll().unwrap();
        assert_eq!(polled, twin);
        w.on_finalized(polled);
        w.on_finalized(polled);
    }
}
