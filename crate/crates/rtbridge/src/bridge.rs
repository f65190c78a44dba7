//! Strategy selection, the two high-level conversion functions, delegation
//! stubs, mirror synchronization (including the list backend swap), and
//! peer attribute/call delegation.
//!
//! Conversion lookup order: null, singleton interning, static-type
//! registry, header peer, then strategy-directed initialization. Every
//! bridged pair holds exactly one pin incref on the native side, owned by
//! the managed twin and released at the twin's finalization.

use std::collections::BTreeMap;

use crate::arena::{HeaderFlags, NativeRef};
use crate::error::{BridgeError, Result};
use crate::ext::run_packed_call;
use crate::fatal_invariant;
use crate::managed::{BuiltinFunction, ListBackend, MPayload, ManagedHandle};
use crate::native::{CFunctionData, Payload};
use crate::world::World;

/// How a native type is presented to the managed runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Native object is a stub; all calls forward to the managed twin.
    Delegate,
    /// Payload genuinely lives natively; managed twin copies immutables
    /// once, lists share a swapped backend.
    Mirror,
    /// Managed wrapper holding a raw native address.
    Peer,
}

impl Strategy {
    fn flag_bit(self) -> u16 {
        match self {
            Strategy::Delegate => HeaderFlags::DELEGATE,
            Strategy::Mirror => HeaderFlags::MIRROR,
            Strategy::Peer => HeaderFlags::PEER,
        }
    }
}

/// Managed-to-native address map. The managed→native lookup direction goes
/// through this table only; the reverse lives in the bridge header.
#[derive(Debug, Default)]
pub struct HandleTable {
    map: BTreeMap<u64, NativeRef>,
}

impl HandleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, h: ManagedHandle, r: NativeRef) {
        self.map.insert(h.0, r);
    }

    pub fn get(&self, h: ManagedHandle) -> Option<NativeRef> {
        self.map.get(&h.0).copied()
    }

    pub fn remove(&mut self, h: ManagedHandle) -> Option<NativeRef> {
        self.map.remove(&h.0)
    }

    pub fn contains(&self, h: ManagedHandle) -> bool {
        self.map.contains_key(&h.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ManagedHandle, NativeRef)> + '_ {
        self.map.iter().map(|(&id, &r)| (ManagedHandle(id), r))
    }
}

/// Statically defined types: resolved by lookup table when converting
/// native→managed and by name the other way. Contains exactly the
/// isHeapType=false types.
#[derive(Debug, Default)]
pub struct StaticTypeRegistry {
    by_ref: BTreeMap<u64, ManagedHandle>,
    by_name: BTreeMap<String, NativeRef>,
}

impl StaticTypeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, r: NativeRef, h: ManagedHandle) {
        self.by_ref.insert(r.addr(), h);
        self.by_name.insert(name, r);
    }

    pub fn by_ref(&self, r: NativeRef) -> Option<ManagedHandle> {
        self.by_ref.get(&r.addr()).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<NativeRef> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl World {
    /// Strategy table: DELEGATE when a managed counterpart kind exists and
    /// the native API never touches the memory directly; MIRROR when a
    /// counterpart exists but direct-access macros rule stubs out; PEER
    /// when no counterpart exists.
    pub fn strategy_for(&self, type_ref: NativeRef) -> Strategy {
        let kind = self.native.type_data(type_ref).instance_kind;
        if kind.has_managed_counterpart() {
            if kind.direct_memory_access() {
                Strategy::Mirror
            } else {
                Strategy::Delegate
            }
        } else {
            Strategy::Peer
        }
    }

    fn register_pair(
        &mut self,
        h: ManagedHandle,
        r: NativeRef,
        strategy: Strategy,
        pin_transferred: bool,
    ) {
        {
            let header = self.native.header_mut(r);
            header.peer = h.0;
            header.flags.set(strategy.flag_bit());
            header.flags.set(HeaderFlags::INITIALIZED);
        }
        self.handles.insert(h, r);
        if !pin_transferred {
            // One pin incref, owned by the managed twin.
            self.native.incref(r);
        }
    }

    fn mark_sync_done(&mut self, r: NativeRef) {
        self.native
            .header_mut(r)
            .flags
            .set(HeaderFlags::SYNC_ON_INIT_DONE);
    }

    /// Whether this native object is an initialized delegation stub whose
    /// storage authority lives on the managed side.
    pub fn is_delegated(&self, r: NativeRef) -> bool {
        if self.native.object(r).immortal {
            return false;
        }
        let header = self.native.header(r);
        header.flags.contains(HeaderFlags::DELEGATE)
            && header.flags.contains(HeaderFlags::INITIALIZED)
            && header.peer != 0
            && self.managed.is_live(ManagedHandle(header.peer))
    }

    fn delegated_twin(&self, r: NativeRef) -> ManagedHandle {
        ManagedHandle(self.native.header(r).peer)
    }

    // ---- native -> managed ------------------------------------------------

    /// High-level conversion: lookup, then initialization on miss. Null
    /// converts to null; singletons intern; static types resolve via the
    /// registry.
    pub fn to_managed(&mut self, r: Option<NativeRef>) -> Result<Option<ManagedHandle>> {
        let Some(r) = r else { return Ok(None) };
        if let Payload::Singleton(k) = self.native.object(r).payload {
            self.stats.conv_to_managed_hit += 1;
            return Ok(Some(self.managed.intern(k)));
        }
        if self.native.object(r).immortal {
            let h = self
                .statics
                .by_ref(r)
                .unwrap_or_else(|| fatal_invariant!("static object {r} missing from registry"));
            self.stats.conv_to_managed_hit += 1;
            return Ok(Some(h));
        }
        if let Some(id) = self.native.peer_of(r) {
            let h = ManagedHandle(id);
            if self.managed.is_live(h) {
                self.stats.conv_to_managed_hit += 1;
                return Ok(Some(h));
            }
            // Twin swept but not yet finalized: re-initialize. The stale
            // finalization only clears the header if it still matches.
        }
        self.stats.conv_to_managed_init += 1;
        let strategy = self.strategy_for(self.native.type_of(r));
        let h = match strategy {
            Strategy::Delegate => self.init_delegate_twin(r)?,
            Strategy::Mirror => self.init_mirror_twin(r)?,
            Strategy::Peer => self.init_peer(r)?,
        };
        Ok(Some(h))
    }

    fn init_delegate_twin(&mut self, r: NativeRef) -> Result<ManagedHandle> {
        match self.native.object(r).payload.clone() {
            Payload::Dict(entries) => {
                let h = self.managed.new_object(MPayload::Dict(Vec::new()));
                self.register_pair(h, r, Strategy::Delegate, false);
                let mut pairs = Vec::with_capacity(entries.len());
                for (k, v) in &entries {
                    let mk = self.to_managed(Some(*k))?.expect("non-null key");
                    let mv = self.to_managed(Some(*v))?.expect("non-null value");
                    pairs.push((mk, mv));
                }
                match &mut self.managed.object_mut(h).payload {
                    MPayload::Dict(p) => *p = pairs,
                    _ => unreachable!(),
                }
                // Storage authority moves to the managed twin; the native
                // object becomes a stub.
                let dropped = self.native.clear_refs(r);
                for c in dropped {
                    self.native.decref(c);
                }
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::Module { name, entries } => {
                let h = self.managed.new_object(MPayload::Module { name });
                self.register_pair(h, r, Strategy::Delegate, false);
                for (key, v) in &entries {
                    let mv = self.to_managed(Some(*v))?.expect("non-null entry");
                    self.managed
                        .object_mut(h)
                        .attributes
                        .insert(key.clone(), mv);
                }
                let dropped = self.native.clear_refs(r);
                for c in dropped {
                    self.native.decref(c);
                }
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::Slice { start, stop, step } => {
                let shell = {
                    let none = self.managed.intern(crate::native::SingletonKind::None);
                    MPayload::Slice {
                        start: none,
                        stop: none,
                        step: none,
                    }
                };
                let h = self.managed.new_object(shell);
                self.register_pair(h, r, Strategy::Delegate, false);
                let ms = self.to_managed(Some(start))?.expect("slice start");
                let mt = self.to_managed(Some(stop))?.expect("slice stop");
                let mp = self.to_managed(Some(step))?.expect("slice step");
                self.managed.object_mut(h).payload = MPayload::Slice {
                    start: ms,
                    stop: mt,
                    step: mp,
                };
                // Slices are immutable; the native refs stay in place.
                self.mark_sync_done(r);
                Ok(h)
            }
            other => fatal_invariant!("delegate strategy on {} payload", other.kind().name()),
        }
    }

    fn init_mirror_twin(&mut self, r: NativeRef) -> Result<ManagedHandle> {
        match self.native.object(r).payload.clone() {
            Payload::Int(v) => {
                let h = self.managed.new_object(MPayload::Int(v));
                self.register_pair(h, r, Strategy::Mirror, false);
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::Float(v) => {
                let h = self.managed.new_object(MPayload::Float(v));
                self.register_pair(h, r, Strategy::Mirror, false);
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::Str(bytes) => {
                let h = self.managed.new_object(MPayload::Str(bytes));
                self.register_pair(h, r, Strategy::Mirror, false);
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::Tuple(items) => {
                // Shell first so self-referential structures resolve to the
                // twin instead of recursing forever.
                let h = self.managed.new_object(MPayload::Tuple(Vec::new()));
                self.register_pair(h, r, Strategy::Mirror, false);
                let mut converted = Vec::with_capacity(items.len());
                for item in &items {
                    converted.push(self.to_managed(Some(*item))?.expect("tuple item"));
                }
                match &mut self.managed.object_mut(h).payload {
                    MPayload::Tuple(p) => *p = converted,
                    _ => unreachable!(),
                }
                self.mark_sync_done(r);
                Ok(h)
            }
            Payload::List(items) => {
                // Backend swap: the managed list reads and writes the
                // native payload directly.
                let h = self
                    .managed
                    .new_object(MPayload::List(ListBackend::NativeView(r)));
                self.register_pair(h, r, Strategy::Mirror, false);
                let mut edges = Vec::new();
                for item in &items {
                    if self.native.object(*item).immortal {
                        continue;
                    }
                    edges.push(self.ensure_gc_head(*item));
                }
                self.managed.object_mut(h).mirrored_edges = edges;
                self.mark_sync_done(r);
                Ok(h)
            }
            other => fatal_invariant!("mirror strategy on {} payload", other.kind().name()),
        }
    }

    fn init_peer(&mut self, r: NativeRef) -> Result<ManagedHandle> {
        let is_type = matches!(self.native.object(r).payload, Payload::Type(_));
        let h = self.managed.new_peer(r, is_type);
        self.register_pair(h, r, Strategy::Peer, false);
        // Mirror the target's connectivity so the managed tracer can see
        // through the peer.
        let children = self.native.children_of(r);
        let mut edges = Vec::new();
        for c in children {
            if self.native.object(c).immortal {
                continue;
            }
            edges.push(self.ensure_gc_head(c));
        }
        self.managed.object_mut(h).mirrored_edges = edges;
        Ok(h)
    }

    // ---- managed -> native ------------------------------------------------

    /// Reverse conversion: peers return their raw address, table hits return
    /// the recorded ref, misses allocate a native counterpart. The returned
    /// ref is borrowed, kept alive by the twin's pin.
    pub fn to_native(&mut self, h: Option<ManagedHandle>) -> Result<Option<NativeRef>> {
        let Some(h) = h else { return Ok(None) };
        match &self.managed.object(h).payload {
            MPayload::Peer | MPayload::PeerType => {
                let r = self
                    .managed
                    .object(h)
                    .native_peer
                    .unwrap_or_else(|| fatal_invariant!("peer {h} without native address"));
                self.stats.conv_to_native_hit += 1;
                return Ok(Some(r));
            }
            MPayload::Singleton(k) => {
                let r = self.native.singletons.get(*k);
                self.stats.conv_to_native_hit += 1;
                return Ok(Some(r));
            }
            _ => {}
        }
        if let Some(r) = self.handles.get(h) {
            self.stats.conv_to_native_hit += 1;
            return Ok(Some(r));
        }
        self.stats.conv_to_native_init += 1;
        Ok(Some(self.init_native_counterpart(h)?))
    }

    fn init_native_counterpart(&mut self, h: ManagedHandle) -> Result<NativeRef> {
        let payload = match &self.managed.object(h).payload {
            MPayload::Int(v) => Some(Payload::Int(*v)),
            MPayload::Float(v) => Some(Payload::Float(*v)),
            MPayload::Str(b) => Some(Payload::Str(b.clone())),
            _ => None,
        };
        if let Some(payload) = payload {
            let type_ref = self.native.builtins.for_kind(payload.kind());
            let r = self.native.alloc(type_ref, payload, false)?;
            // The fresh refcount of 1 becomes the twin's pin.
            self.register_pair(h, r, Strategy::Mirror, true);
            self.mark_sync_done(r);
            return Ok(r);
        }

        match self.managed.object(h).payload.clone() {
            MPayload::Tuple(items) => {
                let r = self.native.new_tuple(Vec::new())?;
                self.register_pair(h, r, Strategy::Mirror, true);
                let mut native_items = Vec::with_capacity(items.len());
                for item in &items {
                    let ri = self
                        .to_native(Some(*item))?
                        .unwrap_or_else(|| fatal_invariant!("tuple item converted to null"));
                    self.native.incref(ri);
                    native_items.push(ri);
                }
                match &mut self.native.object_mut(r).payload {
                    Payload::Tuple(p) => *p = native_items,
                    _ => unreachable!(),
                }
                self.mark_sync_done(r);
                Ok(r)
            }
            MPayload::List(ListBackend::NativeView(r)) => {
                // Already backed by native storage but missing from the
                // table (cannot happen through public paths).
                fatal_invariant!("native-view list {h} missing table entry for {r}")
            }
            MPayload::List(ListBackend::Local(items)) => {
                let r = self.native.new_list(Vec::new())?;
                self.register_pair(h, r, Strategy::Mirror, true);
                let mut edges = Vec::new();
                for item in &items {
                    let ri = self
                        .to_native(Some(*item))?
                        .unwrap_or_else(|| fatal_invariant!("list item converted to null"));
                    self.native.incref(ri);
                    match &mut self.native.object_mut(r).payload {
                        Payload::List(p) => p.push(ri),
                        _ => unreachable!(),
                    }
                    if !self.native.object(ri).immortal {
                        edges.push(self.ensure_gc_head(ri));
                    }
                }
                // Swap the managed backend for the native view.
                let obj = self.managed.object_mut(h);
                obj.payload = MPayload::List(ListBackend::NativeView(r));
                obj.mirrored_edges = edges;
                self.mark_sync_done(r);
                Ok(r)
            }
            MPayload::Dict(_) => {
                // Delegation stub: storage stays managed.
                let r = self.native.new_dict()?;
                self.register_pair(h, r, Strategy::Delegate, true);
                self.mark_sync_done(r);
                Ok(r)
            }
            MPayload::Module { name } => {
                let r = self.native.new_module(&name)?;
                self.register_pair(h, r, Strategy::Delegate, true);
                self.mark_sync_done(r);
                Ok(r)
            }
            MPayload::Slice { start, stop, step } => {
                let rs = self.to_native(Some(start))?.expect("slice start");
                let rt = self.to_native(Some(stop))?.expect("slice stop");
                let rp = self.to_native(Some(step))?.expect("slice step");
                let r = self.native.new_slice(rs, rt, rp)?;
                self.register_pair(h, r, Strategy::Delegate, true);
                self.mark_sync_done(r);
                Ok(r)
            }
            MPayload::Function { .. } => Err(BridgeError::NoNativeCounterpart {
                kind: "function".into(),
            }),
            MPayload::GcHeadCarrier { .. } => Err(BridgeError::NoNativeCounterpart {
                kind: "gc-head".into(),
            }),
            MPayload::Peer | MPayload::PeerType | MPayload::Singleton(_) => unreachable!(),
            MPayload::Int(_) | MPayload::Float(_) | MPayload::Str(_) => unreachable!(),
        }
    }

    // ---- native generic attribute access -----------------------------------

    /// Generic native attribute lookup: instance dict (via the type's dict
    /// offset), then get-sets, then members by offset, then methods bound
    /// as callables. Returns an owned reference. Never re-enters the
    /// managed side for mirrored or peer objects.
    pub fn native_getattr(&mut self, r: NativeRef, name: &str) -> Result<Option<NativeRef>> {
        self.native_lookup_depth += 1;
        self.stats.native_lookups += 1;
        let out = self.native_getattr_inner(r, name);
        self.native_lookup_depth -= 1;
        out
    }

    fn native_getattr_inner(&mut self, r: NativeRef, name: &str) -> Result<Option<NativeRef>> {
        if name == "__class__" {
            let t = self.native.type_of(r);
            self.native.incref(t);
            return Ok(Some(t));
        }
        if let Payload::Module { .. } = self.native.object(r).payload {
            return Ok(self.native_module_get(r, name)?);
        }
        let type_ref = self.native.type_of(r);
        let t = self.native.type_data(type_ref).clone();
        if let Some(dict_offset) = t.dict_offset {
            debug_assert_eq!(dict_offset, 0, "instance dict lives at payload offset 0");
            if let Payload::Instance {
                dict: Some(dict), ..
            } = self.native.object(r).payload
            {
                if let Some(v) = self.native_dict_get_str(dict, name)? {
                    self.native.incref(v);
                    return Ok(Some(v));
                }
            }
        }
        if let Some(gs) = t.getsets.iter().find(|g| g.name == name) {
            let values = vec![crate::valuefmt::FormatValue::Obj(r)];
            let out = crate::ext::run_behavior_to_ref(self, &gs.getter, &values)
                .map_err(|e| BridgeError::AttributeAccess {
                    name: name.to_string(),
                    native: e.to_string(),
                })?;
            return Ok(Some(out));
        }
        if let Some(m) = t.members.iter().find(|m| m.name == name) {
            let Payload::Instance { ref fields, .. } = self.native.object(r).payload else {
                return Err(BridgeError::AttributeAccess {
                    name: name.to_string(),
                    native: "member access on non-instance".into(),
                });
            };
            if m.offset < 8 || (m.offset - 8) % 8 != 0 {
                fatal_invariant!("member offset {} outside field region", m.offset);
            }
            let idx = ((m.offset - 8) / 8) as usize;
            let Some(&value) = fields.get(idx) else {
                fatal_invariant!("member offset {} beyond payload extent", m.offset)
            };
            let out = self.native.new_int(value)?;
            return Ok(Some(out));
        }
        if let Some(m) = t.methods.iter().find(|m| m.name == name) {
            let bound = self.native.new_cfunction(CFunctionData {
                name: m.name.clone(),
                fmt: m.fmt.clone(),
                behavior: m.behavior.clone(),
                bound: Some(r),
            })?;
            return Ok(Some(bound));
        }
        Ok(None)
    }

    /// Native attribute write: instance dict only. Member and get-set
    /// writes through peers are unsupported.
    pub fn native_setattr(&mut self, r: NativeRef, name: &str, value: NativeRef) -> Result<()> {
        let type_ref = self.native.type_of(r);
        let dict_offset = self.native.type_data(type_ref).dict_offset;
        if let Payload::Module { .. } = self.native.object(r).payload {
            return self.native_module_set(r, name, value);
        }
        if dict_offset.is_some() {
            if let Payload::Instance {
                dict: Some(dict), ..
            } = self.native.object(r).payload
            {
                let key = self.native.new_str(name.as_bytes().to_vec())?;
                self.native_dict_set(dict, key, value)?;
                self.native.decref(key);
                return Ok(());
            }
        }
        Err(BridgeError::Type(format!(
            "'{}' object does not support attribute assignment",
            self.native.type_name_of(r)
        )))
    }

    // ---- native container operations (with eager GC edge hooks) -----------

    pub fn native_list_items(&self, list: NativeRef) -> Vec<NativeRef> {
        match &self.native.object(list).payload {
            Payload::List(items) => items.clone(),
            other => fatal_invariant!("list op on {} payload", other.kind().name()),
        }
    }

    pub fn native_list_append(&mut self, list: NativeRef, item: NativeRef) {
        self.native.incref(item);
        match &mut self.native.object_mut(list).payload {
            Payload::List(items) => items.push(item),
            other => fatal_invariant!("list op on {} payload", other.kind().name()),
        }
        self.gc_note_edge(list, item);
    }

    pub fn native_list_set(&mut self, list: NativeRef, index: usize, item: NativeRef) -> Result<()> {
        self.native.incref(item);
        let old = match &mut self.native.object_mut(list).payload {
            Payload::List(items) => {
                if index >= items.len() {
                    None
                } else {
                    Some(std::mem::replace(&mut items[index], item))
                }
            }
            other => fatal_invariant!("list op on {} payload", other.kind().name()),
        };
        let Some(old) = old else {
            self.native.decref(item);
            return Err(BridgeError::Type(format!(
                "list index {index} out of range"
            )));
        };
        self.native.decref(old);
        self.gc_note_edge(list, item);
        Ok(())
    }

    pub fn native_list_pop(&mut self, list: NativeRef) -> Result<()> {
        let popped = match &mut self.native.object_mut(list).payload {
            Payload::List(items) => items.pop(),
            other => fatal_invariant!("list op on {} payload", other.kind().name()),
        };
        let Some(popped) = popped else {
            return Err(BridgeError::Type("pop from empty list".into()));
        };
        // Mirror edge removal waits for the next connectivity refresh.
        self.native.decref(popped);
        Ok(())
    }

    /// Dict read by native key. Returns a borrowed ref. Delegation stubs
    /// read the managed twin's storage.
    pub fn native_dict_get(&mut self, dict: NativeRef, key: NativeRef) -> Result<Option<NativeRef>> {
        if self.is_delegated(dict) {
            let twin = self.delegated_twin(dict);
            let mk = self.to_managed(Some(key))?.expect("non-null key");
            let Some(mv) = self.managed_dict_get(twin, mk) else {
                return Ok(None);
            };
            return Ok(self.to_native(Some(mv))?);
        }
        let entries = match &self.native.object(dict).payload {
            Payload::Dict(entries) => entries.clone(),
            other => fatal_invariant!("dict op on {} payload", other.kind().name()),
        };
        for (k, v) in entries {
            if self.native.keys_equal(k, key) {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    fn native_dict_get_str(&mut self, dict: NativeRef, name: &str) -> Result<Option<NativeRef>> {
        if self.is_delegated(dict) {
            let twin = self.delegated_twin(dict);
            let found = self.managed_dict_get_str(twin, name);
            return Ok(self.to_native(found)?);
        }
        let entries = match &self.native.object(dict).payload {
            Payload::Dict(entries) => entries.clone(),
            other => fatal_invariant!("dict op on {} payload", other.kind().name()),
        };
        for (k, v) in entries {
            if let Payload::Str(b) = &self.native.object(k).payload {
                if b.as_slice() == name.as_bytes() {
                    return Ok(Some(v));
                }
            }
        }
        Ok(None)
    }

    /// Dict write; replaces by structural key equality. Delegation stubs
    /// write through to the managed twin.
    pub fn native_dict_set(&mut self, dict: NativeRef, key: NativeRef, value: NativeRef) -> Result<()> {
        if self.is_delegated(dict) {
            let twin = self.delegated_twin(dict);
            let mk = self.to_managed(Some(key))?.expect("non-null key");
            let mv = self.to_managed(Some(value))?.expect("non-null value");
            self.managed_dict_set(twin, mk, mv);
            return Ok(());
        }
        let existing = {
            let entries = match &self.native.object(dict).payload {
                Payload::Dict(entries) => entries.clone(),
                other => fatal_invariant!("dict op on {} payload", other.kind().name()),
            };
            entries
                .iter()
                .position(|(k, _)| self.native.keys_equal(*k, key))
        };
        self.native.incref(value);
        match existing {
            Some(i) => {
                let old = match &mut self.native.object_mut(dict).payload {
                    Payload::Dict(entries) => std::mem::replace(&mut entries[i].1, value),
                    _ => unreachable!(),
                };
                self.native.decref(old);
            }
            None => {
                self.native.incref(key);
                match &mut self.native.object_mut(dict).payload {
                    Payload::Dict(entries) => entries.push((key, value)),
                    _ => unreachable!(),
                }
                self.gc_note_edge(dict, key);
            }
        }
        self.gc_note_edge(dict, value);
        Ok(())
    }

    /// Module entry read; delegated modules read the managed attributes.
    pub fn native_module_get(&mut self, module: NativeRef, name: &str) -> Result<Option<NativeRef>> {
        if self.is_delegated(module) {
            let twin = self.delegated_twin(module);
            let found = self.managed.object(twin).attributes.get(name).copied();
            return Ok(self.to_native(found)?);
        }
        let entries = match &self.native.object(module).payload {
            Payload::Module { entries, .. } => entries.clone(),
            other => fatal_invariant!("module op on {} payload", other.kind().name()),
        };
        Ok(entries.into_iter().find(|(n, _)| n == name).map(|(_, v)| v))
    }

    pub fn native_module_set(&mut self, module: NativeRef, name: &str, value: NativeRef) -> Result<()> {
        if self.is_delegated(module) {
            let twin = self.delegated_twin(module);
            let mv = self.to_managed(Some(value))?.expect("non-null value");
            self.managed.object_mut(twin).attributes.insert(name.to_string(), mv);
            return Ok(());
        }
        self.native.incref(value);
        let old = match &mut self.native.object_mut(module).payload {
            Payload::Module { entries, .. } => {
                if let Some(slot) = entries.iter_mut().find(|(n, _)| n == name) {
                    Some(std::mem::replace(&mut slot.1, value))
                } else {
                    entries.push((name.to_string(), value));
                    None
                }
            }
            other => fatal_invariant!("module op on {} payload", other.kind().name()),
        };
        if let Some(old) = old {
            self.native.decref(old);
        }
        self.gc_note_edge(module, value);
        Ok(())
    }

    // ---- managed container operations --------------------------------------

    /// Structural key equality on the managed side, matching the native
    /// rule: by value for int/float/str/singletons, by identity otherwise.
    pub fn managed_keys_equal(&self, a: ManagedHandle, b: ManagedHandle) -> bool {
        if a == b {
            return true;
        }
        match (
            &self.managed.object(a).payload,
            &self.managed.object(b).payload,
        ) {
            (MPayload::Int(x), MPayload::Int(y)) => x == y,
            (MPayload::Float(x), MPayload::Float(y)) => x.to_bits() == y.to_bits(),
            (MPayload::Str(x), MPayload::Str(y)) => x == y,
            (MPayload::Singleton(x), MPayload::Singleton(y)) => x == y,
            _ => false,
        }
    }

    pub fn managed_dict_get(&self, h: ManagedHandle, key: ManagedHandle) -> Option<ManagedHandle> {
        let entries = match &self.managed.object(h).payload {
            MPayload::Dict(entries) => entries.clone(),
            other => fatal_invariant!("dict op on managed {}", other.kind_name()),
        };
        entries
            .iter()
            .find(|(k, _)| self.managed_keys_equal(*k, key))
            .map(|(_, v)| *v)
    }

    pub fn managed_dict_get_str(&self, h: ManagedHandle, name: &str) -> Option<ManagedHandle> {
        let entries = match &self.managed.object(h).payload {
            MPayload::Dict(entries) => entries.clone(),
            other => fatal_invariant!("dict op on managed {}", other.kind_name()),
        };
        entries.iter().find_map(|(k, v)| {
            match &self.managed.object(*k).payload {
                MPayload::Str(b) if b.as_slice() == name.as_bytes() => Some(*v),
                _ => None,
            }
        })
    }

    pub fn managed_dict_set(&mut self, h: ManagedHandle, key: ManagedHandle, value: ManagedHandle) {
        let existing = {
            let entries = match &self.managed.object(h).payload {
                MPayload::Dict(entries) => entries.clone(),
                other => fatal_invariant!("dict op on managed {}", other.kind_name()),
            };
            entries
                .iter()
                .position(|(k, _)| self.managed_keys_equal(*k, key))
        };
        match &mut self.managed.object_mut(h).payload {
            MPayload::Dict(entries) => match existing {
                Some(i) => entries[i].1 = value,
                None => entries.push((key, value)),
            },
            _ => unreachable!(),
        }
    }

    /// Element sequence of a managed list, through whichever backend it has.
    pub fn managed_list_items(&mut self, h: ManagedHandle) -> Result<Vec<ManagedHandle>> {
        let backend = match &self.managed.object(h).payload {
            MPayload::List(b) => b.clone(),
            other => {
                return Err(BridgeError::Type(format!(
                    "'{}' object is not a list",
                    other.kind_name()
                )))
            }
        };
        match backend {
            ListBackend::Local(items) => Ok(items),
            ListBackend::NativeView(r) => {
                let native_items = self.native_list_items(r);
                let mut out = Vec::with_capacity(native_items.len());
                for item in native_items {
                    out.push(self.to_managed(Some(item))?.expect("list item"));
                }
                Ok(out)
            }
        }
    }

    pub fn managed_list_append(&mut self, h: ManagedHandle, item: ManagedHandle) -> Result<()> {
        let backend = match &self.managed.object(h).payload {
            MPayload::List(b) => b.clone(),
            other => {
                return Err(BridgeError::Type(format!(
                    "'{}' object is not a list",
                    other.kind_name()
                )))
            }
        };
        match backend {
            ListBackend::Local(_) => {
                match &mut self.managed.object_mut(h).payload {
                    MPayload::List(ListBackend::Local(items)) => items.push(item),
                    _ => unreachable!(),
                }
                Ok(())
            }
            ListBackend::NativeView(r) => {
                let ri = self
                    .to_native(Some(item))?
                    .unwrap_or_else(|| fatal_invariant!("list item converted to null"));
                self.native_list_append(r, ri);
                Ok(())
            }
        }
    }

    pub fn managed_list_set(&mut self, h: ManagedHandle, index: usize, item: ManagedHandle) -> Result<()> {
        let backend = match &self.managed.object(h).payload {
            MPayload::List(b) => b.clone(),
            other => {
                return Err(BridgeError::Type(format!(
                    "'{}' object is not a list",
                    other.kind_name()
                )))
            }
        };
        match backend {
            ListBackend::Local(items) => {
                if index >= items.len() {
                    return Err(BridgeError::Type(format!(
                        "list index {index} out of range"
                    )));
                }
                match &mut self.managed.object_mut(h).payload {
                    MPayload::List(ListBackend::Local(items)) => items[index] = item,
                    _ => unreachable!(),
                }
                Ok(())
            }
            ListBackend::NativeView(r) => {
                let ri = self
                    .to_native(Some(item))?
                    .unwrap_or_else(|| fatal_invariant!("list item converted to null"));
                self.native_list_set(r, index, ri)
            }
        }
    }

    pub fn managed_list_pop(&mut self, h: ManagedHandle) -> Result<()> {
        let backend = match &self.managed.object(h).payload {
            MPayload::List(b) => b.clone(),
            other => {
                return Err(BridgeError::Type(format!(
                    "'{}' object is not a list",
                    other.kind_name()
                )))
            }
        };
        match backend {
            ListBackend::Local(items) => {
                if items.is_empty() {
                    return Err(BridgeError::Type("pop from empty list".into()));
                }
                match &mut self.managed.object_mut(h).payload {
                    MPayload::List(ListBackend::Local(items)) => {
                        items.pop();
                    }
                    _ => unreachable!(),
                }
                Ok(())
            }
            ListBackend::NativeView(r) => self.native_list_pop(r),
        }
    }

    // ---- managed attribute access, call, delegation -------------------------

    /// Backend for all managed attribute reads. Peers delegate across the
    /// boundary; everything else reads the attributes map, then kind
    /// built-ins.
    pub fn find_attr(&mut self, h: ManagedHandle, name: &str) -> Result<Option<ManagedHandle>> {
        if self.native_lookup_depth > 0 {
            // Fallback-detection probe: native generic lookup must never
            // recurse back into the managed side.
            self.stats.managed_reentries_during_native_lookup += 1;
            debug_assert!(false, "managed lookup re-entered during native lookup");
        }
        match self.managed.object(h).payload {
            MPayload::Peer | MPayload::PeerType => return self.peer_get_attr(h, name),
            _ => {}
        }
        if let Some(&v) = self.managed.object(h).attributes.get(name) {
            return Ok(Some(v));
        }
        if let (MPayload::List(_), "append") = (&self.managed.object(h).payload, name) {
            let f = self.managed.new_object(MPayload::Function {
                builtin: BuiltinFunction::ListAppend,
                bound: Some(h),
            });
            return Ok(Some(f));
        }
        Ok(None)
    }

    /// Peer attribute delegation: enters the native side, runs the generic
    /// native lookup, converts the result. A not-found records the native
    /// error text and yields absent.
    pub fn peer_get_attr(&mut self, peer: ManagedHandle, name: &str) -> Result<Option<ManagedHandle>> {
        let target = match self.managed.object(peer).payload {
            MPayload::Peer | MPayload::PeerType => self
                .managed
                .object(peer)
                .native_peer
                .unwrap_or_else(|| fatal_invariant!("peer {peer} without native address")),
            ref other => {
                return Err(BridgeError::Type(format!(
                    "peer_get_attr on managed '{}'",
                    other.kind_name()
                )))
            }
        };
        match self.native_getattr(target, name) {
            Ok(Some(owned)) => {
                let mh = self.to_managed(Some(owned))?.expect("non-null attribute");
                self.native.decref(owned);
                Ok(Some(mh))
            }
            Ok(None) => {
                self.last_native_error = Some(format!(
                    "'{}' object has no attribute '{}'",
                    self.native.type_name_of(target),
                    name
                ));
                Ok(None)
            }
            Err(e) => Err(BridgeError::AttributeAccess {
                name: name.to_string(),
                native: e.to_string(),
            }),
        }
    }

    /// Call dispatch: managed functions execute their built-in body, peers
    /// over native callables route through the boundary, type peers
    /// construct native instances.
    pub fn call_object(&mut self, callee: ManagedHandle, args: ManagedHandle) -> Result<ManagedHandle> {
        if self.native_lookup_depth > 0 {
            self.stats.managed_reentries_during_native_lookup += 1;
            debug_assert!(false, "managed call re-entered during native lookup");
        }
        let arg_items = match &self.managed.object(args).payload {
            MPayload::Tuple(items) => items.clone(),
            other => {
                return Err(BridgeError::Type(format!(
                    "call arguments must be a tuple, got '{}'",
                    other.kind_name()
                )))
            }
        };
        let callee_payload = match &self.managed.object(callee).payload {
            MPayload::Function { builtin, bound } => {
                let (builtin, bound) = (*builtin, *bound);
                return self.exec_builtin(builtin, bound, &arg_items);
            }
            MPayload::Peer => MPayload::Peer,
            MPayload::PeerType => MPayload::PeerType,
            other => return Err(BridgeError::NotCallable(other.kind_name().to_string())),
        };
        let target = self
            .managed
            .object(callee)
            .native_peer
            .unwrap_or_else(|| fatal_invariant!("peer {callee} without native address"));

        match callee_payload {
            MPayload::Peer => {
                let data = match &self.native.object(target).payload {
                    Payload::CFunction(d) => d.clone(),
                    other => {
                        return Err(BridgeError::NotCallable(format!(
                            "peer over native '{}'",
                            other.kind().name()
                        )))
                    }
                };
                let args_native = self
                    .to_native(Some(args))?
                    .unwrap_or_else(|| fatal_invariant!("argument tuple converted to null"));
                let result = self.invoke_cfunction_data(&data, args_native)?;
                let mh = self.to_managed(Some(result))?.expect("non-null result");
                self.native.decref(result);
                Ok(mh)
            }
            MPayload::PeerType => {
                let ctor = self
                    .native
                    .type_data(target)
                    .ctor
                    .clone()
                    .ok_or_else(|| {
                        BridgeError::NotCallable(format!(
                            "type '{}' has no constructor",
                            self.native.type_data(target).name
                        ))
                    })?;
                let type_name = self.native.type_data(target).name.clone();
                let args_native = self
                    .to_native(Some(args))?
                    .unwrap_or_else(|| fatal_invariant!("argument tuple converted to null"));
                let instance = run_packed_call(
                    self,
                    &type_name,
                    &ctor.fmt,
                    &ctor.behavior,
                    None,
                    args_native,
                )?;
                let mh = self.to_managed(Some(instance))?.expect("non-null instance");
                self.native.decref(instance);
                Ok(mh)
            }
            _ => unreachable!(),
        }
    }

    fn exec_builtin(
        &mut self,
        builtin: BuiltinFunction,
        bound: Option<ManagedHandle>,
        args: &[ManagedHandle],
    ) -> Result<ManagedHandle> {
        match builtin {
            BuiltinFunction::Identity => {
                let [v] = args else {
                    return Err(BridgeError::ArityMismatch {
                        expected: 1,
                        got: args.len(),
                    });
                };
                Ok(*v)
            }
            BuiltinFunction::Len => {
                let [v] = args else {
                    return Err(BridgeError::ArityMismatch {
                        expected: 1,
                        got: args.len(),
                    });
                };
                let n = match &self.managed.object(*v).payload {
                    MPayload::Str(b) => b.len(),
                    MPayload::Tuple(items) => items.len(),
                    MPayload::Dict(entries) => entries.len(),
                    MPayload::List(_) => self.managed_list_items(*v)?.len(),
                    other => {
                        return Err(BridgeError::Type(format!(
                            "object of type '{}' has no length",
                            other.kind_name()
                        )))
                    }
                };
                Ok(self.managed.new_object(MPayload::Int(n as i64)))
            }
            BuiltinFunction::ListAppend => {
                let list = bound.ok_or_else(|| BridgeError::Type("unbound append".into()))?;
                let [v] = args else {
                    return Err(BridgeError::ArityMismatch {
                        expected: 1,
                        got: args.len(),
                    });
                };
                self.managed_list_append(list, *v)?;
                Ok(self.managed.intern(crate::native::SingletonKind::None))
            }
        }
    }

    /// Managed attribute write. Peer writes delegate to the native side
    /// (instance dict only).
    pub fn set_attr(&mut self, h: ManagedHandle, name: &str, value: ManagedHandle) -> Result<()> {
        match self.managed.object(h).payload {
            MPayload::Peer => {
                let target = self
                    .managed
                    .object(h)
                    .native_peer
                    .unwrap_or_else(|| fatal_invariant!("peer {h} without native address"));
                let vr = self
                    .to_native(Some(value))?
                    .unwrap_or_else(|| fatal_invariant!("attribute value converted to null"));
                self.native_setattr(target, name, vr)
            }
            MPayload::PeerType => Err(BridgeError::Type(
                "attribute assignment through type peers is not supported".into(),
            )),
            _ => {
                self.managed
                    .object_mut(h)
                    .attributes
                    .insert(name.to_string(), value);
                Ok(())
            }
        }
    }

    pub(crate) fn invoke_cfunction_data(
        &mut self,
        data: &CFunctionData,
        args: NativeRef,
    ) -> Result<NativeRef> {
        run_packed_call(self, &data.name, &data.fmt, &data.behavior, data.bound, args)
    }
}
