//! Rendering of managed and native objects with a documented stable
//! grammar. Peer objects delegate to the native renderer; delegation stubs
//! render through their managed twin's storage. Self-referential containers
//! print `...` at the cycle point.

use std::collections::BTreeSet;

use crate::arena::NativeRef;
use crate::error::Result;
use crate::managed::{ListBackend, MPayload, ManagedHandle};
use crate::native::Payload;
use crate::world::World;

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v == v.trunc() && v.abs() < 1e16 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Byte-string repr: single quotes; escapes backslash, quote, newline, tab
/// and carriage return; other non-printable bytes as \xNN.
fn repr_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() + 2);
    out.push('\'');
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\'' => out.push_str("\\'"),
            b'\n' => out.push_str("\\n"),
            b'\t' => out.push_str("\\t"),
            b'\r' => out.push_str("\\r"),
            0x20..=0x7e => out.push(b as char),
            _ => out.push_str(&format!("\\x{b:02x}")),
        }
    }
    out.push('\'');
    out
}

struct Render<'w> {
    world: &'w World,
    seen_managed: BTreeSet<u64>,
    seen_native: BTreeSet<u64>,
    flagged: bool,
}

impl<'w> Render<'w> {
    fn new(world: &'w World) -> Self {
        Render {
            world,
            seen_managed: BTreeSet::new(),
            seen_native: BTreeSet::new(),
            flagged: false,
        }
    }

    fn managed(&mut self, h: ManagedHandle, as_str: bool) -> String {
        if !self.world.managed.is_live(h) {
            self.flagged = true;
            return format!("<invalid handle {h}>");
        }
        if !self.seen_managed.insert(h.0) {
            return "...".into();
        }
        let out = self.managed_inner(h, as_str);
        self.seen_managed.remove(&h.0);
        out
    }

    fn managed_inner(&mut self, h: ManagedHandle, as_str: bool) -> String {
        let obj = self.world.managed.object(h);
        match &obj.payload {
            MPayload::Int(v) => v.to_string(),
            MPayload::Float(v) => fmt_float(*v),
            MPayload::Str(b) => {
                if as_str {
                    String::from_utf8_lossy(b).into_owned()
                } else {
                    repr_bytes(b)
                }
            }
            MPayload::Tuple(items) => {
                let parts: Vec<String> = items.iter().map(|&i| self.managed(i, false)).collect();
                if parts.len() == 1 {
                    format!("({},)", parts[0])
                } else {
                    format!("({})", parts.join(", "))
                }
            }
            MPayload::List(ListBackend::Local(items)) => {
                let parts: Vec<String> = items.iter().map(|&i| self.managed(i, false)).collect();
                format!("[{}]", parts.join(", "))
            }
            MPayload::List(ListBackend::NativeView(r)) => self.native(*r, false),
            MPayload::Dict(entries) => {
                let parts: Vec<String> = entries
                    .iter()
                    .map(|&(k, v)| format!("{}: {}", self.managed(k, false), self.managed(v, false)))
                    .collect();
                format!("{{{}}}", parts.join(", "))
            }
            MPayload::Module { name } => format!("<module '{name}'>"),
            MPayload::Function { builtin, .. } => {
                format!("<built-in function {}>", builtin.name())
            }
            MPayload::Peer | MPayload::PeerType => {
                let target = obj.native_peer.expect("peer without address");
                self.native(target, as_str)
            }
            MPayload::GcHeadCarrier { target } => format!("<gc-head {target}>"),
            MPayload::Singleton(k) => k.name().to_string(),
            MPayload::Slice { start, stop, step } => format!(
                "slice({}, {}, {})",
                self.managed(*start, false),
                self.managed(*stop, false),
                self.managed(*step, false)
            ),
        }
    }

    fn native(&mut self, r: NativeRef, as_str: bool) -> String {
        if !self.world.native.is_live(r) {
            self.flagged = true;
            return format!("<invalid ref {r}>");
        }
        if !self.seen_native.insert(r.addr()) {
            return "...".into();
        }
        let out = self.native_inner(r, as_str);
        self.seen_native.remove(&r.addr());
        out
    }

    fn native_inner(&mut self, r: NativeRef, as_str: bool) -> String {
        let obj = self.world.native.object(r);
        match &obj.payload {
            Payload::Int(v) => v.to_string(),
            Payload::Float(v) => fmt_float(*v),
            Payload::Str(b) => {
                if as_str {
                    String::from_utf8_lossy(b).into_owned()
                } else {
                    repr_bytes(b)
                }
            }
            Payload::Tuple(items) => {
                let parts: Vec<String> = items.iter().map(|&i| self.native(i, false)).collect();
                if parts.len() == 1 {
                    format!("({},)", parts[0])
                } else {
                    format!("({})", parts.join(", "))
                }
            }
            Payload::List(items) => {
                let parts: Vec<String> = items.iter().map(|&i| self.native(i, false)).collect();
                format!("[{}]", parts.join(", "))
            }
            Payload::Dict(entries) => {
                if self.world.is_delegated(r) {
                    let twin = ManagedHandle(self.world.native.header(r).peer);
                    return self.managed(twin, false);
                }
                let parts: Vec<String> = entries
                    .iter()
                    .map(|&(k, v)| format!("{}: {}", self.native(k, false), self.native(v, false)))
                    .collect();
                format!("{{{}}}", parts.join(", "))
            }
            Payload::CFunction(data) => format!("<built-in function {}>", data.name),
            Payload::Capsule(_) => "<capsule object>".into(),
            Payload::Instance { .. } => {
                let type_name = self.world.native.type_name_of(r);
                format!("<{type_name} object at {r}>")
            }
            Payload::Type(data) => format!("<type '{}'>", data.name),
            Payload::Singleton(k) => k.name().to_string(),
            Payload::Module { name, .. } => format!("<module '{name}'>"),
            Payload::Slice { start, stop, step } => format!(
                "slice({}, {}, {})",
                self.native(*start, false),
                self.native(*stop, false),
                self.native(*step, false)
            ),
        }
    }
}

impl World {
    /// `str` rendering. Never fails; native render failures produce a
    /// diagnostic placeholder and record the error text.
    pub fn str_of(&mut self, h: ManagedHandle) -> Result<String> {
        let mut r = Render::new(self);
        let out = r.managed(h, true);
        let flagged = r.flagged;
        if flagged {
            self.last_native_error = Some(format!("render failure in {out}"));
        }
        Ok(out)
    }

    /// `repr` rendering; differs from `str` only for strings (quoted).
    pub fn repr_of(&mut self, h: ManagedHandle) -> Result<String> {
        let mut r = Render::new(self);
        let out = r.managed(h, false);
        let flagged = r.flagged;
        if flagged {
            self.last_native_error = Some(format!("render failure in {out}"));
        }
        Ok(out)
    }

    /// Native-side renderer, used by peers and directly by native code.
    pub fn native_repr(&self, r: NativeRef) -> String {
        let mut render = Render::new(self);
        render.native(r, false)
    }

    pub fn native_str(&self, r: NativeRef) -> String {
        let mut render = Render::new(self);
        render.native(r, true)
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
    fn scalar_grammar() {
        let mut w = world();
        let i = w.managed.new_object(MPayload::Int(5));
        assert_eq!(w.str_of(i).unwrap(), "5");
        let s = w.managed.new_object(MPayload::Str(b"a".to_vec()));
        assert_eq!(w.repr_of(s).unwrap(), "'a'");
        assert_eq!(w.str_of(s).unwrap(), "a");
        let f = w.managed.new_object(MPayload::Float(2.0));
        assert_eq!(w.str_of(f).unwrap(), "2.0");
        let g = w.managed.new_object(MPayload::Float(2.5));
        assert_eq!(w.str_of(g).unwrap(), "2.5");
    }

    #[test]
    fn containers_and_singletons() {
        let mut w = world();
        let a = w.managed.new_object(MPayload::Int(1));
        let b = w.managed.new_object(MPayload::Str(b"x".to_vec()));
        let t = w.managed.new_object(MPayload::Tuple(vec![a, b]));
        assert_eq!(w.repr_of(t).unwrap(), "(1, 'x')");
        let one = w.managed.new_object(MPayload::Tuple(vec![a]));
        assert_eq!(w.repr_of(one).unwrap(), "(1,)");
        let n = w.managed.intern(crate::native::SingletonKind::None);
        assert_eq!(w.str_of(n).unwrap(), "None");
    }

    #[test]
    fn native_tuple_repr_through_peer_path() {
        let mut w = world();
        let a = w.native.new_int(1).unwrap();
        let b = w.native.new_int(2).unwrap();
        let t = w.native.new_tuple(vec![a, b]).unwrap();
        assert_eq!(w.native_repr(t), "(1, 2)");
    }

    #[test]
    fn cycles_render_ellipsis() {
        let mut w = world();
        let list = w.native.new_list(vec![]).unwrap();
        w.native_list_append(list, list);
        assert_eq!(w.native_repr(list), "[...]");
    }

    #[test]
    fn escapes_in_repr() {
        let mut w = world();
        let s = w
            .managed
            .new_object(MPayload::Str(b"a'b\\c\nd\x01".to_vec()));
        assert_eq!(w.repr_of(s).unwrap(), "'a\\'b\\\\c\\nd\\x01'");
    }
}
