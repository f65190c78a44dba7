//! The simulated managed runtime: handle-addressed objects, a root set, a
//! mark-sweep tracing collector and the finalization reference queue.
//!
//! The collector is explicit (invoked by tests and the CLI, never
//! spontaneous) and is the single authority for bridged lifetimes: swept
//! objects that pin a native counterpart are enqueued on the reference
//! queue instead of being destroyed inline, and the queue drain performs
//! the native-side cleanup.
//!
//! The queue is the only cross-thread-safe structure in this module;
//! everything else is mutated under the boundary lock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use parking_lot::Mutex;

use crate::arena::NativeRef;
use crate::bridge::HandleTable;
use crate::fatal_invariant;
use crate::gcbridge::stand_in_of;
use crate::native::{NativeWorld, SingletonKind};

/// Handle of a managed object. Ids are unique for the lifetime of the
/// runtime and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ManagedHandle(pub u64);

impl std::fmt::Display for ManagedHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Managed built-in callables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinFunction {
    Identity,
    Len,
    ListAppend,
}

impl BuiltinFunction {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinFunction::Identity => "identity",
            BuiltinFunction::Len => "len",
            BuiltinFunction::ListAppend => "append",
        }
    }
}

/// Storage behind a managed list. A mirrored list swaps its local backend
/// for a view that reads and writes the native payload directly.
#[derive(Debug, Clone)]
pub enum ListBackend {
    Local(Vec<ManagedHandle>),
    NativeView(NativeRef),
}

#[derive(Debug, Clone)]
pub enum MPayload {
    Int(i64),
    Float(f64),
    Str(Vec<u8>),
    Tuple(Vec<ManagedHandle>),
    List(ListBackend),
    Dict(Vec<(ManagedHandle, ManagedHandle)>),
    Module { name: String },
    Function {
        builtin: BuiltinFunction,
        bound: Option<ManagedHandle>,
    },
    Peer,
    PeerType,
    GcHeadCarrier { target: NativeRef },
    Singleton(SingletonKind),
    Slice {
        start: ManagedHandle,
        stop: ManagedHandle,
        step: ManagedHandle,
    },
}

impl MPayload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            MPayload::Int(_) => "int",
            MPayload::Float(_) => "float",
            MPayload::Str(_) => "str",
            MPayload::Tuple(_) => "tuple",
            MPayload::List(_) => "list",
            MPayload::Dict(_) => "dict",
            MPayload::Module { .. } => "module",
            MPayload::Function { .. } => "function",
            MPayload::Peer => "peer",
            MPayload::PeerType => "peertype",
            MPayload::GcHeadCarrier { .. } => "gc-head",
            MPayload::Singleton(_) => "singleton",
            MPayload::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug)]
pub struct ManagedObject {
    pub payload: MPayload,
    pub attributes: BTreeMap<String, ManagedHandle>,
    /// Raw native address for Peer/PeerType objects.
    pub native_peer: Option<NativeRef>,
    /// Managed stand-ins for the native counterpart's outgoing references.
    /// Over-approximates between refreshes: additions are eager, removals
    /// wait for the next connectivity refresh.
    pub mirrored_edges: Vec<ManagedHandle>,
    /// Snapshot counter of the last connectivity refresh touching this
    /// object.
    pub gc_generation: u64,
}

impl ManagedObject {
    fn new(payload: MPayload) -> Self {
        ManagedObject {
            payload,
            attributes: BTreeMap::new(),
            native_peer: None,
            mirrored_edges: Vec::new(),
            gc_generation: 0,
        }
    }
}

/// What the queue hands to `onFinalized`: enough to perform native cleanup
/// after the managed object is already gone from the heap.
#[derive(Debug, Clone, Copy)]
pub struct FinalizationRecord {
    pub handle: ManagedHandle,
    pub target: Option<NativeRef>,
    pub is_carrier: bool,
}

#[derive(Debug, Default)]
struct QueueInner {
    fifo: VecDeque<ManagedHandle>,
    records: BTreeMap<u64, FinalizationRecord>,
    enqueued: u64,
    polled: u64,
}

/// FIFO reference queue for swept objects with finalization interest.
/// Thread-safe on its own; pollable without the boundary lock.
#[derive(Debug, Default)]
pub struct FinalizationQueue {
    inner: Mutex<QueueInner>,
}

impl FinalizationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn enqueue(&self, record: FinalizationRecord) {
        let mut q = self.inner.lock();
        q.fifo.push_back(record.handle);
        q.records.insert(record.handle.0, record);
        q.enqueued += 1;
    }

    /// FIFO dequeue of the next finalizable handle, if any.
    pub fn poll(&self) -> Option<ManagedHandle> {
        let mut q = self.inner.lock();
        let h = q.fifo.pop_front()?;
        q.polled += 1;
        Some(h)
    }

    /// Consumes the pending record for `h`; at most once per handle.
    pub fn take_record(&self, h: ManagedHandle) -> Option<FinalizationRecord> {
        self.inner.lock().records.remove(&h.0)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (enqueued, polled) totals since creation.
    pub fn counts(&self) -> (u64, u64) {
        let q = self.inner.lock();
        (q.enqueued, q.polled)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectReport {
    pub reclaimed_count: usize,
    pub enqueued_finalizables: usize,
}

/// The managed heap. Mark-sweep collection from the root set; no
/// generations, no increments.
#[derive(Debug)]
pub struct ManagedHeap {
    objects: BTreeMap<u64, ManagedObject>,
    next_id: u64,
    pub roots: BTreeSet<ManagedHandle>,
    interned: BTreeMap<SingletonKind, ManagedHandle>,
}

impl ManagedHeap {
    pub fn new() -> Self {
        ManagedHeap {
            objects: BTreeMap::new(),
            next_id: 1,
            roots: BTreeSet::new(),
            interned: BTreeMap::new(),
        }
    }

    pub fn new_object(&mut self, payload: MPayload) -> ManagedHandle {
        let h = ManagedHandle(self.next_id);
        self.next_id += 1;
        self.objects.insert(h.0, ManagedObject::new(payload));
        h
    }

    pub fn is_live(&self, h: ManagedHandle) -> bool {
        self.objects.contains_key(&h.0)
    }

    pub fn object(&self, h: ManagedHandle) -> &ManagedObject {
        self.objects
            .get(&h.0)
            .unwrap_or_else(|| fatal_invariant!("dead managed handle {h}"))
    }

    pub fn object_mut(&mut self, h: ManagedHandle) -> &mut ManagedObject {
        self.objects
            .get_mut(&h.0)
            .unwrap_or_else(|| fatal_invariant!("dead managed handle {h}"))
    }

    /// Interned singleton handle; at most one managed object per singleton
    /// identity. Interned handles are rooted for the runtime's lifetime.
    pub fn intern(&mut self, kind: SingletonKind) -> ManagedHandle {
        if let Some(&h) = self.interned.get(&kind) {
            return h;
        }
        let h = self.new_object(MPayload::Singleton(kind));
        self.interned.insert(kind, h);
        self.roots.insert(h);
        h
    }

    pub fn new_peer(&mut self, target: NativeRef, is_type: bool) -> ManagedHandle {
        let payload = if is_type {
            MPayload::PeerType
        } else {
            MPayload::Peer
        };
        let h = self.new_object(payload);
        self.object_mut(h).native_peer = Some(target);
        h
    }

    pub fn new_carrier(&mut self, target: NativeRef) -> ManagedHandle {
        self.new_object(MPayload::GcHeadCarrier { target })
    }

    pub fn root(&mut self, h: ManagedHandle) {
        self.roots.insert(h);
    }

    pub fn unroot(&mut self, h: ManagedHandle) {
        self.roots.remove(&h);
    }

    pub fn live_count(&self) -> usize {
        self.objects.len()
    }

    /// Live handles in id (creation) order.
    pub fn live_handles(&self) -> Vec<ManagedHandle> {
        self.objects.keys().map(|&id| ManagedHandle(id)).collect()
    }

    /// Outgoing managed edges of `h`: attribute values, payload references
    /// and mirrored native connectivity. Native-view list items contribute
    /// their managed stand-ins.
    pub fn edges_of(&self, native: &NativeWorld, h: ManagedHandle) -> Vec<ManagedHandle> {
        let obj = self.object(h);
        let mut out: Vec<ManagedHandle> = obj.attributes.values().copied().collect();
        match &obj.payload {
            MPayload::Tuple(items) => out.extend(items.iter().copied()),
            MPayload::List(ListBackend::Local(items)) => out.extend(items.iter().copied()),
            MPayload::List(ListBackend::NativeView(r)) => {
                if native.is_live(*r) {
                    native.visit_refs(*r, |item| {
                        if native.object(item).immortal {
                            return;
                        }
                        if let Some(sh) = stand_in_of(native, self, item) {
                            out.push(sh);
                        }
                    });
                }
            }
            MPayload::Dict(entries) => {
                for &(k, v) in entries {
                    out.push(k);
                    out.push(v);
                }
            }
            MPayload::Slice { start, stop, step } => {
                out.extend([*start, *stop, *step]);
            }
            MPayload::Function { bound, .. } => {
                if let Some(b) = bound {
                    out.push(*b);
                }
            }
            _ => {}
        }
        out.extend(obj.mirrored_edges.iter().copied());
        out
    }

    /// Mark from the root set, sweep the rest. Unmarked objects holding a
    /// native pin (any bridged twin or peer, per the handle table) or
    /// carrying a GC head are enqueued for finalization, not destroyed
    /// inline. Requires the boundary lock (asserted by the runtime layer).
    pub fn collect(
        &mut self,
        native: &NativeWorld,
        handles: &HandleTable,
        queue: &FinalizationQueue,
    ) -> CollectReport {
        let mut marked: BTreeSet<u64> = BTreeSet::new();
        let mut work: Vec<ManagedHandle> = self.roots.iter().copied().collect();
        while let Some(h) = work.pop() {
            if !self.is_live(h) || !marked.insert(h.0) {
                continue;
            }
            for e in self.edges_of(native, h) {
                if self.is_live(e) && !marked.contains(&e.0) {
                    work.push(e);
                }
            }
        }

        let doomed: Vec<u64> = self
            .objects
            .keys()
            .copied()
            .filter(|id| !marked.contains(id))
            .collect();
        let mut enqueued = 0;
        for id in &doomed {
            let h = ManagedHandle(*id);
            let obj = self.objects.remove(id).expect("doomed object present");
            let target = match obj.payload {
                MPayload::GcHeadCarrier { target } => Some((target, true)),
                _ => handles.get(h).map(|r| (r, false)),
            };
            if let Some((target, is_carrier)) = target {
                queue.enqueue(FinalizationRecord {
                    handle: h,
                    target: Some(target),
                    is_carrier,
                });
                enqueued += 1;
            }
        }
        CollectReport {
            reclaimed_count: doomed.len(),
            enqueued_finalizables: enqueued,
        }
    }
}

impl Default for ManagedHeap {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::DEFAULT_CAPACITY;

    fn parts() -> (ManagedHeap, NativeWorld, HandleTable, FinalizationQueue) {
        (
            ManagedHeap::new(),
            NativeWorld::new(DEFAULT_CAPACITY),
            HandleTable::new(),
            FinalizationQueue::new(),
        )
    }

    #[test]
    fn unrooted_int_is_reclaimed() {
        let (mut heap, native, handles, queue) = parts();
        heap.new_object(MPayload::Int(1));
        let report = heap.collect(&native, &handles, &queue);
        assert_eq!(report.reclaimed_count, 1);
        assert_eq!(report.enqueued_finalizables, 0);
    }

    #[test]
    fn rooted_chain_survives() {
        let (mut heap, native, handles, queue) = parts();
        let c = heap.new_object(MPayload::Int(3));
        let b = heap.new_object(MPayload::Tuple(vec![c]));
        let a = heap.new_object(MPayload::Tuple(vec![b]));
        heap.root(a);
        let report = heap.collect(&native, &handles, &queue);
        assert_eq!(report.reclaimed_count, 0);
        assert!(heap.is_live(a) && heap.is_live(b) && heap.is_live(c));
    }

    #[test]
    fn interning_returns_identical_handle() {
        let (mut heap, ..) = parts();
        let a = heap.intern(SingletonKind::None);
        let b = heap.intern(SingletonKind::None);
        assert_eq!(a, b);
    }

    #[test]
    fn interned_singletons_survive_collection() {
        let (mut heap, native, handles, queue) = parts();
        let n = heap.intern(SingletonKind::None);
        heap.collect(&native, &handles, &queue);
        assert!(heap.is_live(n));
    }

    #[test]
    fn finalizables_are_enqueued_in_sweep_order() {
        let (mut heap, mut native, handles, queue) = parts();
        let r1 = native.new_int(1).unwrap();
        let r2 = native.new_int(2).unwrap();
        let c1 = heap.new_carrier(r1);
        let c2 = heap.new_carrier(r2);
        let report = heap.collect(&native, &handles, &queue);
        assert_eq!(report.enqueued_finalizables, 2);
        assert_eq!(queue.poll(), Some(c1));
        assert_eq!(queue.poll(), Some(c2));
        assert_eq!(queue.poll(), None);
    }

    #[test]
    fn queue_conservation_counts() {
        let (mut heap, mut native, handles, queue) = parts();
        for i in 0..5 {
            let r = native.new_int(i).unwrap();
            heap.new_carrier(r);
        }
        heap.collect(&native, &handles, &queue);
        let (enq, polled) = queue.counts();
        assert_eq!(enq as usize, polled as usize + queue.len());
        queue.poll();
        queue.poll();
        let (enq, polled) = queue.counts();
        assert_eq!(enq as usize, polled as usize + queue.len());
    }

    #[test]
    fn poll_on_empty_is_none() {
        let queue = FinalizationQueue::new();
        assert_eq!(queue.poll(), None);
    }
}
