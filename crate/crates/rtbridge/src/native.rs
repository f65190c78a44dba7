//! The simulated native runtime: refcounted objects with C-style payload
//! layouts, type descriptors, and the prepended bridge header.
//!
//! Objects live at arena addresses ([`NativeRef`]); payload contents are
//! kind-tagged. Containers own one reference per stored item: storing
//! increfs, removal and deallocation decref. Deallocation cascades with an
//! explicit worklist, so deep graphs cannot overflow the stack.

use std::collections::BTreeMap;

use crate::arena::{Arena, AuxEntry, BridgeHeader, NativeRef};
use crate::error::{BridgeError, Result};
use crate::fatal_invariant;

/// Payload kind tags, a representative subset of a real runtime's type zoo:
/// enough to exercise every bridging strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Int,
    Float,
    Str,
    Tuple,
    List,
    Dict,
    CFunction,
    Capsule,
    Instance,
    Type,
    Singleton,
    Module,
    Slice,
}

impl Kind {
    /// Whether the managed runtime features a counterpart kind.
    pub fn has_managed_counterpart(self) -> bool {
        !matches!(
            self,
            Kind::CFunction | Kind::Capsule | Kind::Instance | Kind::Type
        )
    }

    /// Whether the native API accesses this kind's memory directly
    /// (macro-style), which rules out delegation stubs.
    pub fn direct_memory_access(self) -> bool {
        matches!(
            self,
            Kind::Tuple | Kind::List | Kind::Str | Kind::Int | Kind::Float
        )
    }

    /// Container kinds reserve a cycle-tracking head at allocation.
    pub fn wants_gc_head(self) -> bool {
        matches!(
            self,
            Kind::Tuple | Kind::List | Kind::Dict | Kind::Instance | Kind::Module | Kind::Slice
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Int => "int",
            Kind::Float => "float",
            Kind::Str => "str",
            Kind::Tuple => "tuple",
            Kind::List => "list",
            Kind::Dict => "dict",
            Kind::CFunction => "cfunction",
            Kind::Capsule => "capsule",
            Kind::Instance => "instance",
            Kind::Type => "type",
            Kind::Singleton => "singleton",
            Kind::Module => "module",
            Kind::Slice => "slice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SingletonKind {
    None,
    True,
    False,
    NotImplemented,
    Ellipsis,
}

impl SingletonKind {
    pub const ALL: [SingletonKind; 5] = [
        SingletonKind::None,
        SingletonKind::True,
        SingletonKind::False,
        SingletonKind::NotImplemented,
        SingletonKind::Ellipsis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SingletonKind::None => "None",
            SingletonKind::True => "True",
            SingletonKind::False => "False",
            SingletonKind::NotImplemented => "NotImplemented",
            SingletonKind::Ellipsis => "Ellipsis",
        }
    }
}

/// Method slot in a type descriptor: name plus the extension behavior that
/// implements it. Looked up by generic attribute access and bound to the
/// receiver.
#[derive(Debug, Clone)]
pub struct MethodDef {
    pub name: String,
    pub fmt: String,
    pub behavior: String,
}

/// Get-set slot: computed attribute backed by a getter behavior.
#[derive(Debug, Clone)]
pub struct GetSetDef {
    pub name: String,
    pub getter: String,
}

/// Member slot: a raw field read at a byte offset into the instance payload.
/// Offset 0 is the instance dict ref; fields start at 8.
#[derive(Debug, Clone)]
pub struct MemberDef {
    pub name: String,
    pub offset: u32,
}

#[derive(Debug, Clone)]
pub struct CtorDef {
    pub fmt: String,
    pub behavior: String,
}

/// Type descriptor. `is_heap_type=false` descriptors are registered in the
/// static type registry exactly once, keyed by name.
#[derive(Debug, Clone)]
pub struct TypeData {
    pub name: String,
    pub is_heap_type: bool,
    pub instance_kind: Kind,
    pub methods: Vec<MethodDef>,
    pub getsets: Vec<GetSetDef>,
    pub members: Vec<MemberDef>,
    /// Byte offset of the instance dict ref within the payload, when
    /// instances carry one.
    pub dict_offset: Option<u32>,
    pub ctor: Option<CtorDef>,
    /// Number of raw integer field slots in instances of this type.
    pub field_slots: u32,
}

impl TypeData {
    pub fn plain(name: &str, instance_kind: Kind) -> Self {
        TypeData {
            name: name.to_string(),
            is_heap_type: false,
            instance_kind,
            methods: Vec::new(),
            getsets: Vec::new(),
            members: Vec::new(),
            dict_offset: None,
            ctor: None,
            field_slots: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CFunctionData {
    pub name: String,
    pub fmt: String,
    pub behavior: String,
    /// Receiver for bound methods; owned (one ref).
    pub bound: Option<NativeRef>,
}

/// Kind-tagged object payload.
#[derive(Debug, Clone)]
pub enum Payload {
    Int(i64),
    Float(f64),
    Str(Vec<u8>),
    /// Immutable after construction.
    Tuple(Vec<NativeRef>),
    List(Vec<NativeRef>),
    Dict(Vec<(NativeRef, NativeRef)>),
    CFunction(CFunctionData),
    Capsule(Vec<u8>),
    Instance {
        /// Cleared (None) only when cycle trash is broken.
        dict: Option<NativeRef>,
        fields: Vec<i64>,
    },
    Type(Box<TypeData>),
    Singleton(SingletonKind),
    Module {
        name: String,
        entries: Vec<(String, NativeRef)>,
    },
    Slice {
        start: NativeRef,
        stop: NativeRef,
        step: NativeRef,
    },
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Int(_) => Kind::Int,
            Payload::Float(_) => Kind::Float,
            Payload::Str(_) => Kind::Str,
            Payload::Tuple(_) => Kind::Tuple,
            Payload::List(_) => Kind::List,
            Payload::Dict(_) => Kind::Dict,
            Payload::CFunction(_) => Kind::CFunction,
            Payload::Capsule(_) => Kind::Capsule,
            Payload::Instance { .. } => Kind::Instance,
            Payload::Type(_) => Kind::Type,
            Payload::Singleton(_) => Kind::Singleton,
            Payload::Module { .. } => Kind::Module,
            Payload::Slice { .. } => Kind::Slice,
        }
    }

    /// Conceptual byte extent of the payload region, used for arena
    /// accounting. Kind-fixed except for instances, whose extent grows with
    /// their field slots.
    pub fn byte_extent(&self) -> u64 {
        match self {
            Payload::Int(_) | Payload::Float(_) | Payload::Singleton(_) => 8,
            Payload::Str(_) | Payload::Dict(_) | Payload::Capsule(_) | Payload::Tuple(_) => 16,
            Payload::List(_) | Payload::Module { .. } | Payload::Slice { .. } => 24,
            Payload::CFunction(_) => 32,
            Payload::Type(_) => 64,
            Payload::Instance { fields, .. } => 8 + 8 * fields.len() as u64,
        }
    }
}

/// Refcount + type ref header common to all objects'.
const OBJECT_BASE_SIZE: u64 = 16;

#[derive(Debug, Clone)]
pub struct NativeObject {
    pub refcount: u64,
    pub type_ref: NativeRef,
    /// Mirrors the allocation's GC-head reservation, readable from the
    /// object side (the way a type flag would be).
    pub has_gc_head: bool,
    /// Static-segment objects: never refcounted, never freed.
    pub immortal: bool,
    pub payload: Payload,
}

/// Addresses of the built-in static type objects.
#[derive(Debug, Clone)]
pub struct BuiltinTypes {
    pub int_t: NativeRef,
    pub float_t: NativeRef,
    pub str_t: NativeRef,
    pub tuple_t: NativeRef,
    pub list_t: NativeRef,
    pub dict_t: NativeRef,
    pub module_t: NativeRef,
    pub slice_t: NativeRef,
    pub cfunction_t: NativeRef,
    pub capsule_t: NativeRef,
    pub type_t: NativeRef,
    pub none_t: NativeRef,
    pub bool_t: NativeRef,
    pub notimplemented_t: NativeRef,
    pub ellipsis_t: NativeRef,
}

impl BuiltinTypes {
    pub fn all(&self) -> Vec<NativeRef> {
        vec![
            self.int_t,
            self.float_t,
            self.str_t,
            self.tuple_t,
            self.list_t,
            self.dict_t,
            self.module_t,
            self.slice_t,
            self.cfunction_t,
            self.capsule_t,
            self.type_t,
            self.none_t,
            self.bool_t,
            self.notimplemented_t,
            self.ellipsis_t,
        ]
    }

    pub fn for_kind(&self, kind: Kind) -> NativeRef {
        match kind {
            Kind::Int => self.int_t,
            Kind::Float => self.float_t,
            Kind::Str => self.str_t,
            Kind::Tuple => self.tuple_t,
            Kind::List => self.list_t,
            Kind::Dict => self.dict_t,
            Kind::Module => self.module_t,
            Kind::Slice => self.slice_t,
            Kind::CFunction => self.cfunction_t,
            Kind::Capsule => self.capsule_t,
            Kind::Type | Kind::Instance => self.type_t,
            Kind::Singleton => self.none_t,
        }
    }
}

/// Addresses of the interned native singletons.
#[derive(Debug, Clone)]
pub struct Singletons {
    pub none: NativeRef,
    pub true_: NativeRef,
    pub false_: NativeRef,
    pub not_implemented: NativeRef,
    pub ellipsis: NativeRef,
}

impl Singletons {
    pub fn get(&self, kind: SingletonKind) -> NativeRef {
        match kind {
            SingletonKind::None => self.none,
            SingletonKind::True => self.true_,
            SingletonKind::False => self.false_,
            SingletonKind::NotImplemented => self.not_implemented,
            SingletonKind::Ellipsis => self.ellipsis,
        }
    }
}

/// The native heap: arena accounting plus object contents keyed by body
/// address. Not internally synchronized; all mutation happens under the
/// boundary lock (asserted at the runtime layer).
#[derive(Debug)]
pub struct NativeWorld {
    pub arena: Arena,
    objects: BTreeMap<u64, NativeObject>,
    pub builtins: BuiltinTypes,
    pub singletons: Singletons,
}

impl NativeWorld {
    pub fn new(capacity: u64) -> Self {
        let mut arena = Arena::new(capacity);
        let mut objects = BTreeMap::new();

        let static_type = |arena: &mut Arena,
                               objects: &mut BTreeMap<u64, NativeObject>,
                               data: TypeData| {
            let payload = Payload::Type(Box::new(data));
            let size = OBJECT_BASE_SIZE + payload.byte_extent();
            let r = arena
                .alloc_static(size)
                .unwrap_or_else(|_| fatal_invariant!("static segment exhausted at init"));
            objects.insert(
                r.addr(),
                NativeObject {
                    refcount: 1,
                    type_ref: r, // patched to type_t below
                    has_gc_head: false,
                    immortal: true,
                    payload,
                },
            );
            r
        };

        let int_t = static_type(&mut arena, &mut objects, TypeData::plain("int", Kind::Int));
        let float_t = static_type(&mut arena, &mut objects, TypeData::plain("float", Kind::Float));
        let str_t = static_type(&mut arena, &mut objects, TypeData::plain("str", Kind::Str));
        let tuple_t = static_type(&mut arena, &mut objects, TypeData::plain("tuple", Kind::Tuple));
        let list_t = static_type(&mut arena, &mut objects, TypeData::plain("list", Kind::List));
        let dict_t = static_type(&mut arena, &mut objects, TypeData::plain("dict", Kind::Dict));
        let module_t = static_type(&mut arena, &mut objects, TypeData::plain("module", Kind::Module));
        let slice_t = static_type(&mut arena, &mut objects, TypeData::plain("slice", Kind::Slice));
        let cfunction_t = static_type(
            &mut arena,
            &mut objects,
            TypeData::plain("builtin_function_or_method", Kind::CFunction),
        );
        let capsule_t = static_type(&mut arena, &mut objects, TypeData::plain("capsule", Kind::Capsule));
        let type_t = static_type(&mut arena, &mut objects, TypeData::plain("type", Kind::Type));
        let none_t = static_type(&mut arena, &mut objects, TypeData::plain("NoneType", Kind::Singleton));
        let bool_t = static_type(&mut arena, &mut objects, TypeData::plain("bool", Kind::Singleton));
        let notimplemented_t = static_type(
            &mut arena,
            &mut objects,
            TypeData::plain("NotImplementedType", Kind::Singleton),
        );
        let ellipsis_t = static_type(&mut arena, &mut objects, TypeData::plain("ellipsis", Kind::Singleton));

        // Type objects are instances of "type".
        let type_addrs: Vec<u64> = objects.keys().copied().collect();
        for a in type_addrs {
            objects.get_mut(&a).unwrap().type_ref = type_t;
        }

        let static_singleton = |arena: &mut Arena,
                                    objects: &mut BTreeMap<u64, NativeObject>,
                                    kind: SingletonKind,
                                    type_ref: NativeRef| {
            let payload = Payload::Singleton(kind);
            let size = OBJECT_BASE_SIZE + payload.byte_extent();
            let r = arena
                .alloc_static(size)
                .unwrap_or_else(|_| fatal_invariant!("static segment exhausted at init"));
            objects.insert(
                r.addr(),
                NativeObject {
                    refcount: 1,
                    type_ref,
                    has_gc_head: false,
                    immortal: true,
                    payload,
                },
            );
            r
        };

        let none = static_singleton(&mut arena, &mut objects, SingletonKind::None, none_t);
        let true_ = static_singleton(&mut arena, &mut objects, SingletonKind::True, bool_t);
        let false_ = static_singleton(&mut arena, &mut objects, SingletonKind::False, bool_t);
        let not_implemented = static_singleton(
            &mut arena,
            &mut objects,
            SingletonKind::NotImplemented,
            notimplemented_t,
        );
        let ellipsis = static_singleton(&mut arena, &mut objects, SingletonKind::Ellipsis, ellipsis_t);

        NativeWorld {
            arena,
            objects,
            builtins: BuiltinTypes {
                int_t,
                float_t,
                str_t,
                tuple_t,
                list_t,
                dict_t,
                module_t,
                slice_t,
                cfunction_t,
                capsule_t,
                type_t,
                none_t,
                bool_t,
                notimplemented_t,
                ellipsis_t,
            },
            singletons: Singletons {
                none,
                true_,
                false_,
                not_implemented,
                ellipsis,
            },
        }
    }

    // ---- allocation -----------------------------------------------------

    /// Allocates an object body with its prepended header (and GC head when
    /// requested). Refcount starts at 1; header flags start cleared except
    /// HAS_GC_HEAD. Ownership of refs already inside `payload` transfers to
    /// the new object. The object owns one ref on its type (a no-op for the
    /// immortal builtin types, real for heap types).
    pub fn alloc(
        &mut self,
        type_ref: NativeRef,
        payload: Payload,
        wants_gc_head: bool,
    ) -> Result<NativeRef> {
        debug_assert!(
            matches!(self.object(type_ref).payload, Payload::Type(_)),
            "alloc type_ref must be a type object"
        );
        let size = OBJECT_BASE_SIZE + payload.byte_extent();
        let r = self
            .arena
            .alloc_dynamic(size, wants_gc_head)
            .map_err(|requested| BridgeError::AllocationFailure { requested })?;
        self.incref(type_ref);
        self.objects.insert(
            r.addr(),
            NativeObject {
                refcount: 1,
                type_ref,
                has_gc_head: wants_gc_head,
                immortal: false,
                payload,
            },
        );
        Ok(r)
    }

    /// Raw form of `alloc` taking a payload kind, with a default-initialized
    /// payload.
    pub fn alloc_kind(
        &mut self,
        type_ref: NativeRef,
        kind: Kind,
        wants_gc_head: bool,
    ) -> Result<NativeRef> {
        let payload = match kind {
            Kind::Int => Payload::Int(0),
            Kind::Float => Payload::Float(0.0),
            Kind::Str => Payload::Str(Vec::new()),
            Kind::Tuple => Payload::Tuple(Vec::new()),
            Kind::List => Payload::List(Vec::new()),
            Kind::Dict => Payload::Dict(Vec::new()),
            Kind::Capsule => Payload::Capsule(Vec::new()),
            Kind::Instance => Payload::Instance {
                dict: None,
                fields: Vec::new(),
            },
            Kind::Module => Payload::Module {
                name: String::new(),
                entries: Vec::new(),
            },
            Kind::CFunction => Payload::CFunction(CFunctionData {
                name: String::new(),
                fmt: String::new(),
                behavior: String::new(),
                bound: None,
            }),
            Kind::Slice => {
                let none = self.singletons.none;
                Payload::Slice {
                    start: none,
                    stop: none,
                    step: none,
                }
            }
            Kind::Type | Kind::Singleton => {
                return Err(BridgeError::Type(format!(
                    "kind {} is not dynamically allocatable via alloc_kind",
                    kind.name()
                )))
            }
        };
        self.alloc(type_ref, payload, wants_gc_head)
    }

    /// Allocates a statically defined (immortal, headerless) type object.
    pub fn alloc_static_type(&mut self, data: TypeData) -> Result<NativeRef> {
        debug_assert!(!data.is_heap_type);
        let payload = Payload::Type(Box::new(data));
        let size = OBJECT_BASE_SIZE + payload.byte_extent();
        let r = self
            .arena
            .alloc_static(size)
            .map_err(|requested| BridgeError::AllocationFailure { requested })?;
        self.objects.insert(
            r.addr(),
            NativeObject {
                refcount: 1,
                type_ref: self.builtins.type_t,
                has_gc_head: false,
                immortal: true,
                payload,
            },
        );
        Ok(r)
    }

    // ---- object access --------------------------------------------------

    pub fn is_live(&self, r: NativeRef) -> bool {
        self.objects.contains_key(&r.addr())
    }

    pub fn object(&self, r: NativeRef) -> &NativeObject {
        self.objects
            .get(&r.addr())
            .unwrap_or_else(|| fatal_invariant!("dead native ref {r}"))
    }

    pub fn object_mut(&mut self, r: NativeRef) -> &mut NativeObject {
        self.objects
            .get_mut(&r.addr())
            .unwrap_or_else(|| fatal_invariant!("dead native ref {r}"))
    }

    pub fn kind_of(&self, r: NativeRef) -> Kind {
        self.object(r).payload.kind()
    }

    pub fn type_of(&self, r: NativeRef) -> NativeRef {
        self.object(r).type_ref
    }

    pub fn type_data(&self, type_ref: NativeRef) -> &TypeData {
        match &self.object(type_ref).payload {
            Payload::Type(d) => d,
            other => fatal_invariant!("{type_ref} is not a type object ({})", other.kind().name()),
        }
    }

    pub fn type_name_of(&self, r: NativeRef) -> String {
        self.type_data(self.type_of(r)).name.clone()
    }

    // ---- header arithmetic ----------------------------------------------

    /// AS-header arithmetic: body address minus GC head (if reserved) minus
    /// header size. Only valid for dynamic objects.
    pub fn as_header(&self, r: NativeRef) -> u64 {
        let obj = self.object(r);
        debug_assert!(!obj.immortal, "static objects carry no bridge header");
        Arena::header_addr(r, obj.has_gc_head)
    }

    /// FROM-header arithmetic: header address plus header size plus GC head
    /// (if the header's flag says one is present).
    pub fn from_header(&self, h: u64) -> NativeRef {
        let flags = self.arena.header_at(h).flags;
        NativeRef::new(Arena::body_addr(h, flags))
    }

    pub fn header(&self, r: NativeRef) -> &BridgeHeader {
        self.arena.header_at(self.as_header(r))
    }

    pub fn header_mut(&mut self, r: NativeRef) -> &mut BridgeHeader {
        let h = self.as_header(r);
        self.arena.header_at_mut(h)
    }

    /// Managed counterpart handle recorded in the header, if any. Static
    /// objects have no header and report none.
    pub fn peer_of(&self, r: NativeRef) -> Option<u64> {
        if self.object(r).immortal {
            return None;
        }
        match self.header(r).peer {
            0 => None,
            h => Some(h),
        }
    }

    // ---- refcounting ----------------------------------------------------

    pub fn incref(&mut self, r: NativeRef) {
        let obj = self.object_mut(r);
        if obj.immortal {
            return;
        }
        obj.refcount += 1;
    }

    /// Drops one reference; reclaims the object (and cascades) when the
    /// count reaches zero. Decref below zero is a fatal invariant violation.
    pub fn decref(&mut self, r: NativeRef) {
        let obj = self.object_mut(r);
        if obj.immortal {
            return;
        }
        if obj.refcount == 0 {
            fatal_invariant!("decref below zero on {r}");
        }
        obj.refcount -= 1;
        if obj.refcount == 0 {
            self.dealloc_cascade(r);
        }
    }

    fn dealloc_cascade(&mut self, start: NativeRef) {
        let mut worklist = vec![start];
        while let Some(r) = worklist.pop() {
            let obj = self
                .objects
                .remove(&r.addr())
                .unwrap_or_else(|| fatal_invariant!("double free of {r}"));
            debug_assert_eq!(obj.refcount, 0);
            let header = self.arena.free_dynamic(r);
            if header.peer != 0 {
                fatal_invariant!("object {r} deallocated while its counterpart pin stands");
            }
            let mut children = Vec::new();
            collect_refs(&obj.payload, &mut |c| children.push(c));
            children.push(obj.type_ref);
            for c in children {
                let child = self.object_mut(c);
                if child.immortal {
                    continue;
                }
                if child.refcount == 0 {
                    fatal_invariant!("decref below zero on {c} during cascade");
                }
                child.refcount -= 1;
                if child.refcount == 0 {
                    worklist.push(c);
                }
            }
        }
    }

    pub fn refcount(&self, r: NativeRef) -> u64 {
        self.object(r).refcount
    }

    // ---- traversal --------------------------------------------------------

    /// Invokes the visitor exactly once per outgoing payload reference,
    /// multiplicity preserved, in payload order.
    pub fn visit_refs(&self, r: NativeRef, mut visitor: impl FnMut(NativeRef)) {
        collect_refs(&self.object(r).payload, &mut visitor);
    }

    pub fn children_of(&self, r: NativeRef) -> Vec<NativeRef> {
        let mut out = Vec::new();
        self.visit_refs(r, |c| out.push(c));
        out
    }

    /// Cycle breaker: drains the payload's outgoing refs and returns them;
    /// the caller owns the drops. The object stays allocated (possibly
    /// empty), exactly like a cleared container.
    pub fn clear_refs(&mut self, r: NativeRef) -> Vec<NativeRef> {
        let none = self.singletons.none;
        let obj = self.object_mut(r);
        let mut dropped = Vec::new();
        match &mut obj.payload {
            Payload::Tuple(items) | Payload::List(items) => dropped.append(items),
            Payload::Dict(entries) => {
                for (k, v) in entries.drain(..) {
                    dropped.push(k);
                    dropped.push(v);
                }
            }
            Payload::Instance { dict, .. } => {
                if let Some(d) = dict.take() {
                    dropped.push(d);
                }
            }
            Payload::Module { entries, .. } => {
                for (_, v) in entries.drain(..) {
                    dropped.push(v);
                }
            }
            Payload::Slice { start, stop, step } => {
                for slot in [start, stop, step] {
                    let old = std::mem::replace(slot, none);
                    if old != none {
                        dropped.push(old);
                    }
                }
            }
            Payload::CFunction(data) => {
                if let Some(b) = data.bound.take() {
                    dropped.push(b);
                }
            }
            _ => {}
        }
        dropped
    }

    // ---- aux list ---------------------------------------------------------

    /// Last write per tag wins.
    pub fn aux_set(&mut self, r: NativeRef, tag: u8, blob: Vec<u8>) {
        let h = self.as_header(r);
        let header = self.arena.header_at_mut(h);
        if let Some(entry) = header.aux.iter_mut().find(|e| e.tag == tag) {
            entry.blob = blob;
        } else {
            header.aux.push(AuxEntry { tag, blob });
            self.arena.note_aux_added();
        }
    }

    pub fn aux_get(&self, r: NativeRef, tag: u8) -> Option<&[u8]> {
        if self.object(r).immortal {
            return None;
        }
        self.header(r)
            .aux
            .iter()
            .find(|e| e.tag == tag)
            .map(|e| e.blob.as_slice())
    }

    pub fn aux_remove(&mut self, r: NativeRef, tag: u8) -> Option<Vec<u8>> {
        let h = self.as_header(r);
        let header = self.arena.header_at_mut(h);
        let idx = header.aux.iter().position(|e| e.tag == tag)?;
        let entry = header.aux.remove(idx);
        self.arena.note_aux_removed();
        Some(entry.blob)
    }

    // ---- constructors -----------------------------------------------------

    pub fn new_int(&mut self, v: i64) -> Result<NativeRef> {
        self.alloc(self.builtins.int_t, Payload::Int(v), false)
    }

    pub fn new_float(&mut self, v: f64) -> Result<NativeRef> {
        self.alloc(self.builtins.float_t, Payload::Float(v), false)
    }

    pub fn new_str(&mut self, bytes: impl Into<Vec<u8>>) -> Result<NativeRef> {
        self.alloc(self.builtins.str_t, Payload::Str(bytes.into()), false)
    }

    /// Items are increfed: the tuple owns one ref per slot.
    pub fn new_tuple(&mut self, items: Vec<NativeRef>) -> Result<NativeRef> {
        for &it in &items {
            self.incref(it);
        }
        self.alloc(self.builtins.tuple_t, Payload::Tuple(items), true)
    }

    pub fn new_list(&mut self, items: Vec<NativeRef>) -> Result<NativeRef> {
        for &it in &items {
            self.incref(it);
        }
        self.alloc(self.builtins.list_t, Payload::List(items), true)
    }

    pub fn new_dict(&mut self) -> Result<NativeRef> {
        self.alloc(self.builtins.dict_t, Payload::Dict(Vec::new()), true)
    }

    pub fn new_capsule(&mut self, blob: Vec<u8>) -> Result<NativeRef> {
        self.alloc(self.builtins.capsule_t, Payload::Capsule(blob), false)
    }

    pub fn new_cfunction(&mut self, data: CFunctionData) -> Result<NativeRef> {
        if let Some(b) = data.bound {
            self.incref(b);
        }
        self.alloc(self.builtins.cfunction_t, Payload::CFunction(data), false)
    }

    /// Fresh instance with its own empty dict. Takes the type ref of a
    /// custom type; field slots come from the descriptor.
    pub fn new_instance(&mut self, type_ref: NativeRef, fields: Vec<i64>) -> Result<NativeRef> {
        let slots = self.type_data(type_ref).field_slots as usize;
        debug_assert_eq!(fields.len(), slots, "field count must match descriptor");
        let dict = self.new_dict()?;
        self.alloc(
            type_ref,
            Payload::Instance {
                dict: Some(dict),
                fields,
            },
            true,
        )
    }

    pub fn new_module(&mut self, name: &str) -> Result<NativeRef> {
        self.alloc(
            self.builtins.module_t,
            Payload::Module {
                name: name.to_string(),
                entries: Vec::new(),
            },
            true,
        )
    }

    /// Parts are increfed.
    pub fn new_slice(
        &mut self,
        start: NativeRef,
        stop: NativeRef,
        step: NativeRef,
    ) -> Result<NativeRef> {
        for part in [start, stop, step] {
            self.incref(part);
        }
        self.alloc(
            self.builtins.slice_t,
            Payload::Slice { start, stop, step },
            true,
        )
    }

    pub fn new_heap_type(&mut self, mut data: TypeData) -> Result<NativeRef> {
        data.is_heap_type = true;
        self.alloc(self.builtins.type_t, Payload::Type(Box::new(data)), false)
    }

    // ---- value helpers ----------------------------------------------------

    /// Structural equality for dict keys: by value for int/float/str and
    /// singletons, by identity otherwise.
    pub fn keys_equal(&self, a: NativeRef, b: NativeRef) -> bool {
        if a == b {
            return true;
        }
        match (&self.object(a).payload, &self.object(b).payload) {
            (Payload::Int(x), Payload::Int(y)) => x == y,
            (Payload::Float(x), Payload::Float(y)) => x.to_bits() == y.to_bits(),
            (Payload::Str(x), Payload::Str(y)) => x == y,
            (Payload::Singleton(x), Payload::Singleton(y)) => x == y,
            _ => false,
        }
    }

    pub fn int_value(&self, r: NativeRef) -> Option<i64> {
        match self.object(r).payload {
            Payload::Int(v) => Some(v),
            _ => None,
        }
    }

    /// Live dynamic object addresses in address order.
    pub fn live_dynamic(&self) -> Vec<NativeRef> {
        self.arena.live_bodies()
    }

    pub fn live_count(&self) -> usize {
        self.arena.live_count()
    }
}

fn collect_refs(payload: &Payload, visitor: &mut dyn FnMut(NativeRef)) {
    match payload {
        Payload::Tuple(items) | Payload::List(items) => {
            for &it in items {
                visitor(it);
            }
        }
        Payload::Dict(entries) => {
            for &(k, v) in entries {
                visitor(k);
                visitor(v);
            }
        }
        Payload::Instance { dict, .. } => {
            if let Some(d) = dict {
                visitor(*d);
            }
        }
        Payload::Module { entries, .. } => {
            for (_, v) in entries {
                visitor(*v);
            }
        }
        Payload::Slice { start, stop, step } => {
            visitor(*start);
            visitor(*stop);
            visitor(*step);
        }
        Payload::CFunction(data) => {
            if let Some(b) = data.bound {
                visitor(b);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::HeaderFlags;

    fn world() -> NativeWorld {
        NativeWorld::new(crate::arena::DEFAULT_CAPACITY)
    }

    #[test]
    fn alloc_flag_mirrors_argument() {
        let mut w = world();
        let r = w.alloc_kind(w.builtins.int_t, Kind::Int, false).unwrap();
        assert!(!w.header(r).flags.contains(HeaderFlags::HAS_GC_HEAD));
        assert_eq!(w.refcount(r), 1);

        let t = w.alloc_kind(w.builtins.tuple_t, Kind::Tuple, true).unwrap();
        assert!(w.header(t).flags.contains(HeaderFlags::HAS_GC_HEAD));
        assert_eq!(w.from_header(w.as_header(t)), t);
    }

    #[test]
    fn decref_frees_and_releases_children() {
        let mut w = world();
        let a = w.new_int(1).unwrap();
        let b = w.new_int(2).unwrap();
        let t = w.new_tuple(vec![a, b]).unwrap();
        assert_eq!(w.refcount(a), 2);
        let live = w.live_count();
        // Drop creator refs on the items; the tuple keeps them alive.
        w.decref(a);
        w.decref(b);
        assert_eq!(w.live_count(), live);
        w.decref(t);
        assert_eq!(w.live_count(), live - 3);
    }

    #[test]
    fn tuple_decref_drops_item_counts_by_one() {
        let mut w = world();
        let a = w.new_int(1).unwrap();
        let b = w.new_int(2).unwrap();
        let t = w.new_tuple(vec![a, b]).unwrap();
        assert_eq!((w.refcount(a), w.refcount(b)), (2, 2));
        w.decref(t);
        assert_eq!((w.refcount(a), w.refcount(b)), (1, 1));
    }

    #[test]
    #[should_panic(expected = "invariant violation")]
    fn decref_below_zero_is_fatal() {
        let mut w = world();
        let a = w.new_int(1).unwrap();
        w.decref(a);
        // a is gone; a second decref must trip the dead-ref check.
        w.decref(a);
    }

    #[test]
    fn visit_refs_preserves_multiplicity() {
        let mut w = world();
        let a = w.new_int(1).unwrap();
        let b = w.new_int(2).unwrap();
        let t = w.new_tuple(vec![a, b, a]).unwrap();
        let mut seen = Vec::new();
        w.visit_refs(t, |r| seen.push(r));
        assert_eq!(seen, vec![a, b, a]);

        let leaf = w.new_int(3).unwrap();
        let mut n = 0;
        w.visit_refs(leaf, |_| n += 1);
        assert_eq!(n, 0);
    }

    #[test]
    fn aux_last_write_wins() {
        let mut w = world();
        let r = w.new_int(7).unwrap();
        assert_eq!(w.aux_get(r, 3), None);
        w.aux_set(r, 3, vec![1]);
        w.aux_set(r, 3, vec![2, 2]);
        assert_eq!(w.aux_get(r, 3), Some(&[2u8, 2][..]));
        assert_eq!(w.arena.aux_live(), 1);
        w.aux_remove(r, 3);
        assert_eq!(w.arena.aux_live(), 0);
    }

    #[test]
    fn aux_blobs_freed_with_object() {
        let mut w = world();
        let r = w.new_int(7).unwrap();
        w.aux_set(r, 1, vec![0xAA]);
        w.aux_set(r, 2, vec![0xBB]);
        assert_eq!(w.arena.aux_live(), 2);
        w.decref(r);
        assert_eq!(w.arena.aux_live(), 0);
    }

    #[test]
    fn singletons_are_immortal() {
        let mut w = world();
        let n = w.singletons.none;
        w.decref(n);
        w.decref(n);
        assert!(w.is_live(n));
        assert!(w.arena.is_static(n));
    }

    #[test]
    fn deep_chain_dealloc_does_not_recurse() {
        let mut w = world();
        let mut cur = w.new_int(0).unwrap();
        for _ in 0..20_000 {
            let t = w.new_tuple(vec![cur]).unwrap();
            w.decref(cur);
            cur = t;
        }
        w.decref(cur);
        assert_eq!(w.live_count(), 0);
    }
}
