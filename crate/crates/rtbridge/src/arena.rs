//! The native address space.
//!
//! A flat byte region addressed by plain integers. Every dynamic allocation
//! reserves, from low to high address, a bridge header, an optional GC head
//! and the object body; the body address is what the rest of the runtime
//! passes around as [`NativeRef`]. Header location is pure offset
//! arithmetic, never a table lookup.
//!
//! Statically defined objects (singletons and non-heap type objects) live in
//! a reserved low segment with no prepended header, mirroring the fact that
//! their memory is not dynamically allocated; conversions special-case them
//! before any header arithmetic.

use std::collections::BTreeMap;

use crate::fatal_invariant;

/// Bytes reserved for the bridge header in front of every dynamic object.
/// Conceptual layout: peer handle (8) + 16-bit flags padded to 8 + aux list
/// head pointer (8).
pub const HEADER_SIZE: u64 = 24;

/// Bytes reserved for the cycle-tracking head when requested (two links).
pub const GC_HEAD_SIZE: u64 = 16;

/// First address of the static segment. Address 0 is the null reference and
/// is never handed out.
pub const STATIC_BASE: u64 = 0x40;

/// First address of the dynamic segment; also the static segment's limit.
pub const DYNAMIC_BASE: u64 = 0x10000;

/// Default arena capacity in bytes (dynamic segment end).
pub const DEFAULT_CAPACITY: u64 = 64 << 20;

const ALIGN: u64 = 8;

/// Address of a native object body. Never zero; zero is the null reference
/// and is modelled as `Option<NativeRef>` at API boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NativeRef(u64);

impl NativeRef {
    pub fn new(addr: u64) -> Self {
        assert!(addr != 0, "null is not a NativeRef");
        NativeRef(addr)
    }

    pub fn addr(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for NativeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Header flag bits, occupying exactly 16 bits. Exactly one strategy bit is
/// set once INITIALIZED is set; bits 6..16 stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeaderFlags(pub u16);

impl HeaderFlags {
    pub const DELEGATE: u16 = 1 << 0;
    pub const MIRROR: u16 = 1 << 1;
    pub const PEER: u16 = 1 << 2;
    pub const HAS_GC_HEAD: u16 = 1 << 3;
    pub const INITIALIZED: u16 = 1 << 4;
    pub const SYNC_ON_INIT_DONE: u16 = 1 << 5;

    pub fn contains(self, bit: u16) -> bool {
        self.0 & bit != 0
    }

    pub fn set(&mut self, bit: u16) {
        self.0 |= bit;
    }

    pub fn clear(&mut self, bit: u16) {
        self.0 &= !bit;
    }

    /// The strategy bit currently set, if any.
    pub fn strategy_bits(self) -> u16 {
        self.0 & (Self::DELEGATE | Self::MIRROR | Self::PEER)
    }
}

/// One entry of the header's aux list: a small integer tag and an opaque
/// blob, last write per tag wins.
#[derive(Debug, Clone)]
pub struct AuxEntry {
    pub tag: u8,
    pub blob: Vec<u8>,
}

/// The bookkeeping record prepended in memory before each dynamic object.
#[derive(Debug, Clone, Default)]
pub struct BridgeHeader {
    /// Managed counterpart handle, as a plain integer (0 = none).
    pub peer: u64,
    pub flags: HeaderFlags,
    pub aux: Vec<AuxEntry>,
}

/// Accounting record for one dynamic allocation.
#[derive(Debug, Clone, Copy)]
pub struct AllocationRecord {
    /// Lowest reserved address (= header address).
    pub base: u64,
    /// Object body address.
    pub body: u64,
    /// Total reserved bytes (header + optional GC head + body).
    pub size: u64,
    pub has_gc_head: bool,
}

/// Address-space bookkeeping: two bump pointers (static and dynamic
/// segments), the allocation log and the headers of live dynamic objects.
#[derive(Debug)]
pub struct Arena {
    static_next: u64,
    dynamic_next: u64,
    capacity_end: u64,
    /// Live dynamic allocations keyed by body address.
    allocations: BTreeMap<u64, AllocationRecord>,
    /// Headers of live dynamic objects keyed by header address.
    headers: BTreeMap<u64, BridgeHeader>,
    total_allocs: u64,
    /// Count of live aux blobs, for the aux-hygiene audit.
    aux_live: u64,
}

impl Arena {
    pub fn new(capacity: u64) -> Self {
        assert!(capacity > DYNAMIC_BASE, "capacity below dynamic base");
        Arena {
            static_next: STATIC_BASE,
            dynamic_next: DYNAMIC_BASE,
            capacity_end: capacity,
            allocations: BTreeMap::new(),
            headers: BTreeMap::new(),
            total_allocs: 0,
            aux_live: 0,
        }
    }

    fn align(n: u64) -> u64 {
        (n + ALIGN - 1) & !(ALIGN - 1)
    }

    /// Reserves header + optional GC head + body and returns the body
    /// address. The header starts zeroed except HAS_GC_HEAD. Fails whole
    /// (never a partial layout) when the segment is exhausted.
    pub fn alloc_dynamic(
        &mut self,
        body_size: u64,
        wants_gc_head: bool,
    ) -> Result<NativeRef, u64> {
        let body_size = Self::align(body_size.max(ALIGN));
        let gc = if wants_gc_head { GC_HEAD_SIZE } else { 0 };
        let total = HEADER_SIZE + gc + body_size;
        if self.dynamic_next + total > self.capacity_end {
            return Err(total);
        }
        let base = self.dynamic_next;
        self.dynamic_next += total;
        let body = base + HEADER_SIZE + gc;
        let mut flags = HeaderFlags::default();
        if wants_gc_head {
            flags.set(HeaderFlags::HAS_GC_HEAD);
        }
        self.headers.insert(
            base,
            BridgeHeader {
                peer: 0,
                flags,
                aux: Vec::new(),
            },
        );
        self.allocations.insert(
            body,
            AllocationRecord {
                base,
                body,
                size: total,
                has_gc_head: wants_gc_head,
            },
        );
        self.total_allocs += 1;
        Ok(NativeRef::new(body))
    }

    /// Reserves a headerless slot in the static segment.
    pub fn alloc_static(&mut self, body_size: u64) -> Result<NativeRef, u64> {
        let body_size = Self::align(body_size.max(ALIGN));
        if self.static_next + body_size > DYNAMIC_BASE {
            return Err(body_size);
        }
        let addr = self.static_next;
        self.static_next += body_size;
        Ok(NativeRef::new(addr))
    }

    pub fn is_static(&self, r: NativeRef) -> bool {
        r.addr() < DYNAMIC_BASE
    }

    /// Header address for a live dynamic object body: body minus the GC head
    /// (when reserved) minus the header, by arithmetic alone. The GC-head
    /// bit is read from the object side, like a type flag.
    pub fn header_addr(r: NativeRef, has_gc_head: bool) -> u64 {
        let gc = if has_gc_head { GC_HEAD_SIZE } else { 0 };
        r.addr() - gc - HEADER_SIZE
    }

    /// Inverse of [`Arena::header_addr`]; the GC-head bit comes from the
    /// header's own flags.
    pub fn body_addr(h: u64, flags: HeaderFlags) -> u64 {
        let gc = if flags.contains(HeaderFlags::HAS_GC_HEAD) {
            GC_HEAD_SIZE
        } else {
            0
        };
        h + HEADER_SIZE + gc
    }

    pub fn header_at(&self, h: u64) -> &BridgeHeader {
        self.headers
            .get(&h)
            .unwrap_or_else(|| fatal_invariant!("no live header at {h:#x}"))
    }

    pub fn header_at_mut(&mut self, h: u64) -> &mut BridgeHeader {
        self.headers
            .get_mut(&h)
            .unwrap_or_else(|| fatal_invariant!("no live header at {h:#x}"))
    }

    /// Releases one dynamic allocation, returning its header for aux
    /// cleanup accounting.
    pub fn free_dynamic(&mut self, r: NativeRef) -> BridgeHeader {
        let rec = self
            .allocations
            .remove(&r.addr())
            .unwrap_or_else(|| fatal_invariant!("free of unknown body {r}"));
        let header = self
            .headers
            .remove(&rec.base)
            .unwrap_or_else(|| fatal_invariant!("allocation {r} lost its header"));
        self.aux_live -= header.aux.len() as u64;
        header
    }

    pub fn record_of(&self, r: NativeRef) -> Option<&AllocationRecord> {
        self.allocations.get(&r.addr())
    }

    pub fn live_count(&self) -> usize {
        self.allocations.len()
    }

    pub fn total_allocs(&self) -> u64 {
        self.total_allocs
    }

    pub fn aux_live(&self) -> u64 {
        self.aux_live
    }

    pub(crate) fn note_aux_added(&mut self) {
        self.aux_live += 1;
    }

    pub(crate) fn note_aux_removed(&mut self) {
        self.aux_live -= 1;
    }

    /// Allocation log iteration in address order, for audits and oracles.
    pub fn allocations(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.allocations.values()
    }

    /// Live body addresses in address order.
    pub fn live_bodies(&self) -> Vec<NativeRef> {
        self.allocations.keys().map(|a| NativeRef::new(*a)).collect()
    }
}
