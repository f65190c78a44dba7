//! Extension-module machinery: in-process registration of native modules
//! defining functions and custom (peer-strategy) types, and the import path
//! exposing them as managed modules.
//!
//! Extensions are descriptors, not shared libraries; their function bodies
//! come from a built-in behavior registry. Registration allocates the
//! native module, wraps functions as native callables, enters static types
//! into the registry, and immediately bridges + roots the managed module
//! stub so import is a cache hit.

use std::collections::BTreeMap;

use crate::arena::NativeRef;
use crate::error::{BridgeError, Result};
use crate::fatal_invariant;
use crate::managed::ManagedHandle;
use crate::native::{CFunctionData, CtorDef, GetSetDef, Kind, MemberDef, MethodDef, Payload, TypeData};
use crate::valuefmt::{build_value, parse_args, parse_format, FormatValue};
use crate::world::World;

#[derive(Debug, Clone)]
pub struct ExtensionFunctionDef {
    pub name: String,
    pub fmt: String,
    pub behavior: String,
}

#[derive(Debug, Clone)]
pub struct ExtensionTypeDef {
    pub name: String,
    pub is_heap_type: bool,
    pub members: Vec<(String, u32)>,
    pub getsets: Vec<(String, String)>,
    /// (name, fmt, behavior)
    pub methods: Vec<(String, String, String)>,
    /// (behavior, fmt)
    pub ctor: Option<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct ExtensionModuleDef {
    pub name: String,
    pub doc: String,
    pub functions: Vec<ExtensionFunctionDef>,
    pub types: Vec<ExtensionTypeDef>,
}

#[derive(Debug)]
pub struct RegisteredExtension {
    pub def: ExtensionModuleDef,
    pub native_module: NativeRef,
    pub managed_module: ManagedHandle,
    pub type_refs: Vec<(String, NativeRef)>,
}

#[derive(Debug, Default)]
pub struct ExtensionRegistry {
    map: BTreeMap<String, RegisteredExtension>,
}

impl ExtensionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&RegisteredExtension> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Finds a registered extension type by name across all modules.
    pub fn type_ref(&self, name: &str) -> Option<NativeRef> {
        self.map.values().find_map(|ext| {
            ext.type_refs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, r)| *r)
        })
    }
}

// ---- behavior registry -----------------------------------------------------

/// What a behavior hands back: either a flat sequence to pack through a
/// format string, or a ready native reference (owned).
pub enum BehaviorOutcome {
    Packed(String, Vec<FormatValue>),
    Ref(NativeRef),
}

pub type BehaviorFn = fn(&mut World, &[FormatValue]) -> Result<BehaviorOutcome>;

/// Built-in behavior lookup. Extension descriptors may only reference
/// behaviors that exist here.
pub fn behavior_lookup(name: &str) -> Option<BehaviorFn> {
    Some(match name {
        "identity" => bh_identity,
        "add_ints" => bh_add_ints,
        "concat" => bh_concat,
        "make_pair" => bh_make_pair,
        "make_list" => bh_make_list,
        "capsule_wrap" => bh_capsule_wrap,
        "capsule_peek" => bh_capsule_peek,
        "make_point" => bh_make_point,
        "point_sum" => bh_point_sum,
        "point_norm" => bh_point_norm,
        "make_blob" => bh_make_blob,
        _ => return None,
    })
}

fn expect_int(values: &[FormatValue], i: usize) -> Result<i64> {
    match values.get(i) {
        Some(FormatValue::Int(v)) => Ok(*v),
        other => Err(BridgeError::Type(format!(
            "behavior argument {i} must be an int, got {:?}",
            other.map(|v| v.kind_name())
        ))),
    }
}

fn expect_obj(values: &[FormatValue], i: usize) -> Result<NativeRef> {
    match values.get(i) {
        Some(FormatValue::Obj(r)) => Ok(*r),
        other => Err(BridgeError::Type(format!(
            "behavior argument {i} must be an object, got {:?}",
            other.map(|v| v.kind_name())
        ))),
    }
}

fn bh_identity(_w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let o = expect_obj(values, 0)?;
    Ok(BehaviorOutcome::Packed("O".into(), vec![FormatValue::Obj(o)]))
}

fn bh_add_ints(_w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let a = expect_int(values, 0)?;
    let b = expect_int(values, 1)?;
    Ok(BehaviorOutcome::Packed(
        "i".into(),
        vec![FormatValue::Int(a.wrapping_add(b))],
    ))
}

fn bh_concat(_w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let (a, b) = match (values.first(), values.get(1)) {
        (Some(FormatValue::Bytes(a)), Some(FormatValue::Bytes(b))) => (a.clone(), b),
        _ => return Err(BridgeError::Type("concat needs two strings".into())),
    };
    let mut joined = a;
    joined.extend_from_slice(b);
    Ok(BehaviorOutcome::Packed(
        "s".into(),
        vec![FormatValue::Bytes(joined)],
    ))
}

fn bh_make_pair(_w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let a = expect_obj(values, 0)?;
    let b = expect_obj(values, 1)?;
    Ok(BehaviorOutcome::Packed(
        "(OO)".into(),
        vec![FormatValue::Obj(a), FormatValue::Obj(b)],
    ))
}

fn bh_make_list(w: &mut World, _values: &[FormatValue]) -> Result<BehaviorOutcome> {
    Ok(BehaviorOutcome::Ref(w.native.new_list(Vec::new())?))
}

fn bh_capsule_wrap(w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let bytes = match values.first() {
        Some(FormatValue::Bytes(b)) => b.clone(),
        _ => return Err(BridgeError::Type("capsule_wrap needs a string".into())),
    };
    Ok(BehaviorOutcome::Ref(w.native.new_capsule(bytes)?))
}

fn bh_capsule_peek(w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let o = expect_obj(values, 0)?;
    match &w.native.object(o).payload {
        Payload::Capsule(bytes) => Ok(BehaviorOutcome::Packed(
            "s".into(),
            vec![FormatValue::Bytes(bytes.clone())],
        )),
        other => Err(BridgeError::Type(format!(
            "capsule_peek needs a capsule, got {}",
            other.kind().name()
        ))),
    }
}

fn bh_make_point(w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let x = expect_int(values, 0)?;
    let y = expect_int(values, 1)?;
    let point_t = w
        .statics
        .by_name("Point")
        .or_else(|| w.extensions.type_ref("Point"))
        .ok_or_else(|| BridgeError::Descriptor("Point type not registered".into()))?;
    Ok(BehaviorOutcome::Ref(w.native.new_instance(point_t, vec![x, y])?))
}

fn point_fields(w: &World, values: &[FormatValue]) -> Result<(i64, i64)> {
    let recv = expect_obj(values, 0)?;
    match &w.native.object(recv).payload {
        Payload::Instance { fields, .. } if fields.len() == 2 => Ok((fields[0], fields[1])),
        _ => Err(BridgeError::Type("receiver is not a Point".into())),
    }
}

fn bh_point_sum(w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let (x, y) = point_fields(w, values)?;
    Ok(BehaviorOutcome::Packed(
        "i".into(),
        vec![FormatValue::Int(x.wrapping_add(y))],
    ))
}

fn bh_point_norm(w: &mut World, values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let (x, y) = point_fields(w, values)?;
    let norm = ((x as f64) * (x as f64) + (y as f64) * (y as f64)).sqrt();
    Ok(BehaviorOutcome::Packed(
        "d".into(),
        vec![FormatValue::Real(norm)],
    ))
}

fn bh_make_blob(w: &mut World, _values: &[FormatValue]) -> Result<BehaviorOutcome> {
    let blob_t = w
        .extensions
        .type_ref("Blob")
        .ok_or_else(|| BridgeError::Descriptor("Blob type not registered".into()))?;
    Ok(BehaviorOutcome::Ref(w.native.new_instance(blob_t, vec![])?))
}

// ---- packed call plumbing ----------------------------------------------------

/// Unpack args per the format, run the behavior, pack the result. Returns
/// an owned reference. Marshalling errors carry the function name.
pub(crate) fn run_packed_call(
    world: &mut World,
    name: &str,
    fmt: &str,
    behavior: &str,
    bound: Option<NativeRef>,
    args: NativeRef,
) -> Result<NativeRef> {
    let wrap = |e: BridgeError| BridgeError::Call {
        function: name.to_string(),
        source: Box::new(e),
    };
    let spec = parse_format(fmt).map_err(wrap)?;
    let mut values = parse_args(world, &spec, args).map_err(wrap)?;
    if let Some(b) = bound {
        world.native.incref(b);
        values.insert(0, FormatValue::Obj(b));
    }
    let behavior_fn = behavior_lookup(behavior)
        .ok_or_else(|| BridgeError::Descriptor(format!("unknown behavior '{behavior}'")))?;
    let result = behavior_fn(world, &values).and_then(|outcome| match outcome {
        BehaviorOutcome::Ref(r) => Ok(r),
        BehaviorOutcome::Packed(out_fmt, out_values) => {
            let out_spec = parse_format(&out_fmt)?;
            build_value(world, &out_spec, &out_values)
        }
    });
    for v in values {
        if let FormatValue::Obj(r) = v {
            world.native.decref(r);
        }
    }
    result.map_err(wrap)
}

/// Runs a behavior with caller-provided values (get-set getters). The
/// caller keeps ownership of any object values; the result is owned.
pub(crate) fn run_behavior_to_ref(
    world: &mut World,
    behavior: &str,
    values: &[FormatValue],
) -> Result<NativeRef> {
    let behavior_fn = behavior_lookup(behavior)
        .ok_or_else(|| BridgeError::Descriptor(format!("unknown behavior '{behavior}'")))?;
    match behavior_fn(world, values)? {
        BehaviorOutcome::Ref(r) => Ok(r),
        BehaviorOutcome::Packed(fmt, out_values) => {
            let spec = parse_format(&fmt)?;
            build_value(world, &spec, &out_values)
        }
    }
}

// ---- registration & import ---------------------------------------------------

fn type_data_from_def(def: &ExtensionTypeDef) -> Result<TypeData> {
    let mut field_slots = 0u32;
    for (name, offset) in &def.members {
        if *offset < 8 || (*offset - 8) % 8 != 0 {
            return Err(BridgeError::Descriptor(format!(
                "member '{name}' offset {offset} must be 8-aligned and past the dict slot"
            )));
        }
        field_slots = field_slots.max((*offset - 8) / 8 + 1);
    }
    Ok(TypeData {
        name: def.name.clone(),
        is_heap_type: def.is_heap_type,
        instance_kind: Kind::Instance,
        methods: def
            .methods
            .iter()
            .map(|(n, f, b)| MethodDef {
                name: n.clone(),
                fmt: f.clone(),
                behavior: b.clone(),
            })
            .collect(),
        getsets: def
            .getsets
            .iter()
            .map(|(n, g)| GetSetDef {
                name: n.clone(),
                getter: g.clone(),
            })
            .collect(),
        members: def
            .members
            .iter()
            .map(|(n, o)| MemberDef {
                name: n.clone(),
                offset: *o,
            })
            .collect(),
        dict_offset: Some(0),
        ctor: def.ctor.as_ref().map(|(behavior, fmt)| CtorDef {
            fmt: fmt.clone(),
            behavior: behavior.clone(),
        }),
        field_slots,
    })
}

impl World {
    /// Registers an extension: allocates the native module, wraps functions
    /// as native callables, enters types into the registries, then bridges
    /// and roots the managed module stub.
    pub fn register_extension(&mut self, def: ExtensionModuleDef) -> Result<ManagedHandle> {
        if self.extensions.get(&def.name).is_some() {
            return Err(BridgeError::DuplicateModule(def.name.clone()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &def.functions {
            if !seen.insert(f.name.clone()) {
                return Err(BridgeError::Descriptor(format!(
                    "duplicate name '{}' in module '{}'",
                    f.name, def.name
                )));
            }
            if behavior_lookup(&f.behavior).is_none() {
                return Err(BridgeError::Descriptor(format!(
                    "function '{}' references unknown behavior '{}'",
                    f.name, f.behavior
                )));
            }
            parse_format(&f.fmt)?;
        }
        for t in &def.types {
            if !seen.insert(t.name.clone()) {
                return Err(BridgeError::Descriptor(format!(
                    "duplicate name '{}' in module '{}'",
                    t.name, def.name
                )));
            }
            for (_, _, behavior) in &t.methods {
                if behavior_lookup(behavior).is_none() {
                    return Err(BridgeError::Descriptor(format!(
                        "method behavior '{behavior}' unknown"
                    )));
                }
            }
            for (_, getter) in &t.getsets {
                if behavior_lookup(getter).is_none() {
                    return Err(BridgeError::Descriptor(format!(
                        "getter behavior '{getter}' unknown"
                    )));
                }
            }
            if let Some((behavior, fmt)) = &t.ctor {
                if behavior_lookup(behavior).is_none() {
                    return Err(BridgeError::Descriptor(format!(
                        "constructor behavior '{behavior}' unknown"
                    )));
                }
                parse_format(fmt)?;
            }
        }

        let module = self.native.new_module(&def.name)?;
        let doc = self.native.new_str(def.doc.as_bytes().to_vec())?;
        self.native_module_set(module, "__doc__", doc)?;
        self.native.decref(doc);
        let name_str = self.native.new_str(def.name.as_bytes().to_vec())?;
        self.native_module_set(module, "__name__", name_str)?;
        self.native.decref(name_str);

        for f in &def.functions {
            let cfn = self.native.new_cfunction(CFunctionData {
                name: f.name.clone(),
                fmt: f.fmt.clone(),
                behavior: f.behavior.clone(),
                bound: None,
            })?;
            self.native_module_set(module, &f.name, cfn)?;
            self.native.decref(cfn);
        }

        let mut type_refs = Vec::new();
        for t in &def.types {
            let data = type_data_from_def(t)?;
            let type_ref = if t.is_heap_type {
                self.native.new_heap_type(data)?
            } else {
                let r = self.native.alloc_static_type(data)?;
                self.register_static_type(r)?;
                r
            };
            self.native_module_set(module, &t.name, type_ref)?;
            if t.is_heap_type {
                self.native.decref(type_ref);
            }
            type_refs.push((t.name.clone(), type_ref));
        }

        // Bridge the module now; import becomes a cache hit and the stub
        // stays rooted for the runtime's lifetime.
        let managed_module = self
            .to_managed(Some(module))?
            .unwrap_or_else(|| fatal_invariant!("module converted to null"));
        self.managed.root(managed_module);
        self.native.decref(module); // creator ref; the twin pin remains

        self.extensions.map.insert(
            def.name.clone(),
            RegisteredExtension {
                def,
                native_module: module,
                managed_module,
                type_refs,
            },
        );
        Ok(managed_module)
    }

    /// Returns the managed module stub; repeated imports return the same
    /// handle.
    pub fn import_module(&mut self, name: &str) -> Result<ManagedHandle> {
        self.extensions
            .get(name)
            .map(|ext| ext.managed_module)
            .ok_or_else(|| BridgeError::UnknownModule(name.to_string()))
    }

    /// Calls a native callable with a native argument tuple; boundary lock
    /// is held by the caller (runtime layer).
    pub fn invoke_cfunction(&mut self, f: NativeRef, args: NativeRef) -> Result<NativeRef> {
        let data = match &self.native.object(f).payload {
            Payload::CFunction(d) => d.clone(),
            other => {
                return Err(BridgeError::NotCallable(format!(
                    "native '{}'",
                    other.kind().name()
                )))
            }
        };
        self.invoke_cfunction_data(&data, args)
    }
}

// ---- descriptor files ---------------------------------------------------------

/// Parses a line-oriented extension descriptor:
///
/// ```text
/// module <name>
/// doc <free text>
/// fn <name> <format|-> <behavior>
/// type <name> static|heap [member:<n>@<off>] [getset:<n>:<behavior>]
///      [method:<n>:<fmt|->:<behavior>] [ctor:<behavior>:<fmt|->]
/// ```
///
/// `-` stands for the empty format. `#` starts a comment.
pub fn parse_extension_text(text: &str) -> Result<ExtensionModuleDef> {
    let mut name: Option<String> = None;
    let mut doc = String::new();
    let mut functions = Vec::new();
    let mut types = Vec::new();

    let fmt_of = |token: &str| -> String {
        if token == "-" {
            String::new()
        } else {
            token.to_string()
        }
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let head = tokens.next().expect("non-empty line");
        let err = |reason: &str| BridgeError::Descriptor(format!("line {}: {}", lineno + 1, reason));
        match head {
            "module" => {
                let n = tokens.next().ok_or_else(|| err("module needs a name"))?;
                if name.is_some() {
                    return Err(err("duplicate module record"));
                }
                name = Some(n.to_string());
            }
            "doc" => {
                doc = line["doc".len()..].trim().to_string();
            }
            "fn" => {
                let n = tokens.next().ok_or_else(|| err("fn needs a name"))?;
                let fmt = tokens.next().ok_or_else(|| err("fn needs a format"))?;
                let behavior = tokens.next().ok_or_else(|| err("fn needs a behavior"))?;
                functions.push(ExtensionFunctionDef {
                    name: n.to_string(),
                    fmt: fmt_of(fmt),
                    behavior: behavior.to_string(),
                });
            }
            "type" => {
                let n = tokens.next().ok_or_else(|| err("type needs a name"))?;
                let storage = tokens.next().ok_or_else(|| err("type needs static|heap"))?;
                let is_heap_type = match storage {
                    "static" => false,
                    "heap" => true,
                    _ => return Err(err("type storage must be static or heap")),
                };
                let mut t = ExtensionTypeDef {
                    name: n.to_string(),
                    is_heap_type,
                    members: Vec::new(),
                    getsets: Vec::new(),
                    methods: Vec::new(),
                    ctor: None,
                };
                for token in tokens {
                    if let Some(rest) = token.strip_prefix("member:") {
                        let (mname, off) = rest
                            .split_once('@')
                            .ok_or_else(|| err("member needs name@offset"))?;
                        let off: u32 = off.parse().map_err(|_| err("bad member offset"))?;
                        t.members.push((mname.to_string(), off));
                    } else if let Some(rest) = token.strip_prefix("getset:") {
                        let (gname, getter) = rest
                            .split_once(':')
                            .ok_or_else(|| err("getset needs name:behavior"))?;
                        t.getsets.push((gname.to_string(), getter.to_string()));
                    } else if let Some(rest) = token.strip_prefix("method:") {
                        let mut parts = rest.splitn(3, ':');
                        let mname = parts.next().ok_or_else(|| err("method needs a name"))?;
                        let fmt = parts.next().ok_or_else(|| err("method needs a format"))?;
                        let behavior = parts.next().ok_or_else(|| err("method needs a behavior"))?;
                        t.methods
                            .push((mname.to_string(), fmt_of(fmt), behavior.to_string()));
                    } else if let Some(rest) = token.strip_prefix("ctor:") {
                        let (behavior, fmt) = rest
                            .split_once(':')
                            .ok_or_else(|| err("ctor needs behavior:format"))?;
                        t.ctor = Some((behavior.to_string(), fmt_of(fmt)));
                    } else {
                        return Err(err(&format!("unknown type attribute '{token}'")));
                    }
                }
                types.push(t);
            }
            other => return Err(err(&format!("unknown record '{other}'"))),
        }
    }
    Ok(ExtensionModuleDef {
        name: name.ok_or_else(|| BridgeError::Descriptor("missing module record".into()))?,
        doc,
        functions,
        types,
    })
}

/// The built-in demo extension, exercising every bridge path: plain
/// functions (delegation + marshalling), a static custom type with members,
/// a get-set and a method (peer paths), a heap type, and capsules.
pub fn demo_extension() -> ExtensionModuleDef {
    ExtensionModuleDef {
        name: "demo".into(),
        doc: "Demo extension with native functions and custom types.".into(),
        functions: vec![
            ExtensionFunctionDef {
                name: "identity".into(),
                fmt: "O".into(),
                behavior: "identity".into(),
            },
            ExtensionFunctionDef {
                name: "add_ints".into(),
                fmt: "ii".into(),
                behavior: "add_ints".into(),
            },
            ExtensionFunctionDef {
                name: "concat".into(),
                fmt: "ss".into(),
                behavior: "concat".into(),
            },
            ExtensionFunctionDef {
                name: "make_pair".into(),
                fmt: "OO".into(),
                behavior: "make_pair".into(),
            },
            ExtensionFunctionDef {
                name: "make_list".into(),
                fmt: String::new(),
                behavior: "make_list".into(),
            },
            ExtensionFunctionDef {
                name: "capsule_wrap".into(),
                fmt: "s".into(),
                behavior: "capsule_wrap".into(),
            },
            ExtensionFunctionDef {
                name: "capsule_peek".into(),
                fmt: "O".into(),
                behavior: "capsule_peek".into(),
            },
        ],
        types: vec![
            ExtensionTypeDef {
                name: "Point".into(),
                is_heap_type: false,
                members: vec![("x".into(), 8), ("y".into(), 16)],
                getsets: vec![("norm".into(), "point_norm".into())],
                methods: vec![("sum".into(), String::new(), "point_sum".into())],
                ctor: Some(("make_point".into(), "ii".into())),
            },
            ExtensionTypeDef {
                name: "Blob".into(),
                is_heap_type: true,
                members: vec![],
                getsets: vec![],
                methods: vec![],
                ctor: Some(("make_blob".into(), String::new())),
            },
        ],
    }
}
