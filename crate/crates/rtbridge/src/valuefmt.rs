//! Format-string marshalling: packing flat value sequences into native
//! argument tuples and unpacking them back into typed slots.
//!
//! Grammar (bit-exact EBNF):
//!
//! ```text
//! format  = { unit } ;
//! unit    = "i" | "d" | "s" | "O" | group ;
//! group   = "(" { unit } ")" ;
//! ```
//!
//! `i` packs a 64-bit integer, `d` a 64-bit real, `s` a byte string, `O`
//! passes a native object through (increfed on both pack and unpack).
//! A format whose top level is exactly one unit builds that object bare —
//! no 1-tuple wrapping; multiple top-level units build a native tuple, and
//! every group builds a nested native tuple.
//!
//! Unpacking always takes the argument tuple: top-level units match the
//! tuple's items positionally, groups descend into nested tuples.

use crate::arena::NativeRef;
use crate::error::{BridgeError, Result};
use crate::native::Payload;
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Int,
    Real,
    Bytes,
    Obj,
    Group(Vec<Unit>),
}

impl Unit {
    fn arity(&self) -> usize {
        match self {
            Unit::Group(units) => units.iter().map(Unit::arity).sum(),
            _ => 1,
        }
    }

    fn expected_name(&self) -> &'static str {
        match self {
            Unit::Int => "int",
            Unit::Real => "float",
            Unit::Bytes => "str",
            Unit::Obj => "object",
            Unit::Group(_) => "tuple",
        }
    }
}

/// A parsed marshalling format string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    pub units: Vec<Unit>,
    pub source: String,
}

impl FormatSpec {
    /// Number of leaf units = length of the flat value sequence.
    pub fn arity(&self) -> usize {
        self.units.iter().map(Unit::arity).sum()
    }
}

/// One slot of the flat value sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum FormatValue {
    Int(i64),
    Real(f64),
    Bytes(Vec<u8>),
    Obj(NativeRef),
}

impl FormatValue {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FormatValue::Int(_) => "int",
            FormatValue::Real(_) => "float",
            FormatValue::Bytes(_) => "str",
            FormatValue::Obj(_) => "object",
        }
    }
}

/// Parses a format string, reporting the 0-based offset of the first
/// invalid character on error.
pub fn parse_format(text: &str) -> Result<FormatSpec> {
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    let units = parse_units(bytes, &mut pos, None)?;
    debug_assert_eq!(pos, bytes.len());
    Ok(FormatSpec {
        units,
        source: text.to_string(),
    })
}

fn parse_units(bytes: &[u8], pos: &mut usize, group_open: Option<usize>) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    while *pos < bytes.len() {
        let c = bytes[*pos];
        match c {
            b'i' => {
                units.push(Unit::Int);
                *pos += 1;
            }
            b'd' => {
                units.push(Unit::Real);
                *pos += 1;
            }
            b's' => {
                units.push(Unit::Bytes);
                *pos += 1;
            }
            b'O' => {
                units.push(Unit::Obj);
                *pos += 1;
            }
            b'(' => {
                let open = *pos;
                *pos += 1;
                let inner = parse_units(bytes, pos, Some(open))?;
                units.push(Unit::Group(inner));
            }
            b')' => {
                if group_open.is_some() {
                    *pos += 1;
                    return Ok(units);
                }
                return Err(BridgeError::FormatSyntax {
                    offset: *pos,
                    reason: "unmatched ')'".into(),
                });
            }
            other => {
                return Err(BridgeError::FormatSyntax {
                    offset: *pos,
                    reason: format!("unknown unit character '{}'", other as char),
                })
            }
        }
    }
    if let Some(open) = group_open {
        return Err(BridgeError::FormatSyntax {
            offset: open,
            reason: "unclosed '('".into(),
        });
    }
    Ok(units)
}

/// Packs `values` according to `spec`. A single top-level unit returns its
/// object bare; otherwise the result is a native tuple. `O` values are
/// increfed and embedded. The returned reference is owned by the caller.
pub fn build_value(world: &mut World, spec: &FormatSpec, values: &[FormatValue]) -> Result<NativeRef> {
    if values.len() != spec.arity() {
        return Err(BridgeError::ArityMismatch {
            expected: spec.arity(),
            got: values.len(),
        });
    }
    validate_kinds(&spec.units, values, &mut 0, &mut 0)?;
    let mut cursor = 0usize;
    let built = build_units(world, &spec.units, values, &mut cursor)?;
    debug_assert_eq!(cursor, values.len());
    if built.len() == 1 {
        return Ok(built.into_iter().next().expect("one item"));
    }
    let tuple = world.native.new_tuple(built.clone())?;
    for r in built {
        world.native.decref(r);
    }
    Ok(tuple)
}

/// Allocation-free kind check so mismatch errors never leave half-packed
/// temporaries behind.
fn validate_kinds(
    units: &[Unit],
    values: &[FormatValue],
    cursor: &mut usize,
    leaf_index: &mut usize,
) -> Result<()> {
    for unit in units {
        match unit {
            Unit::Group(inner) => validate_kinds(inner, values, cursor, leaf_index)?,
            leaf => {
                let value = &values[*cursor];
                *cursor += 1;
                let unit_idx = *leaf_index;
                *leaf_index += 1;
                let ok = matches!(
                    (leaf, value),
                    (Unit::Int, FormatValue::Int(_))
                        | (Unit::Real, FormatValue::Real(_))
                        | (Unit::Bytes, FormatValue::Bytes(_))
                        | (Unit::Obj, FormatValue::Obj(_))
                );
                if !ok {
                    return Err(BridgeError::KindMismatch {
                        unit: unit_idx,
                        expected: leaf.expected_name().into(),
                        got: value.kind_name().into(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn build_units(
    world: &mut World,
    units: &[Unit],
    values: &[FormatValue],
    cursor: &mut usize,
) -> Result<Vec<NativeRef>> {
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        match unit {
            Unit::Group(inner) => {
                let children = build_units(world, inner, values, cursor)?;
                let tuple = world.native.new_tuple(children.clone())?;
                for c in children {
                    world.native.decref(c);
                }
                out.push(tuple);
            }
            leaf => {
                let value = &values[*cursor];
                *cursor += 1;
                let built = match (leaf, value) {
                    (Unit::Int, FormatValue::Int(v)) => world.native.new_int(*v)?,
                    (Unit::Real, FormatValue::Real(v)) => world.native.new_float(*v)?,
                    (Unit::Bytes, FormatValue::Bytes(b)) => world.native.new_str(b.clone())?,
                    (Unit::Obj, FormatValue::Obj(r)) => {
                        world.native.incref(*r);
                        *r
                    }
                    _ => unreachable!("kinds validated before building"),
                };
                out.push(built);
            }
        }
    }
    Ok(out)
}

/// Unpacks a native argument tuple positionally, descending into groups.
/// `O` units yield the object with an incref owned by the caller.
pub fn parse_args(world: &mut World, spec: &FormatSpec, args: NativeRef) -> Result<Vec<FormatValue>> {
    let mut out = Vec::with_capacity(spec.arity());
    let mut leaf_index = 0usize;
    match parse_tuple_units(world, &spec.units, args, &mut leaf_index, &mut out) {
        Ok(()) => Ok(out),
        Err(e) => {
            for v in out {
                if let FormatValue::Obj(r) = v {
                    world.native.decref(r);
                }
            }
            Err(e)
        }
    }
}

fn parse_tuple_units(
    world: &mut World,
    units: &[Unit],
    tuple: NativeRef,
    leaf_index: &mut usize,
    out: &mut Vec<FormatValue>,
) -> Result<()> {
    let items = match &world.native.object(tuple).payload {
        Payload::Tuple(items) => items.clone(),
        other => {
            return Err(BridgeError::KindMismatch {
                unit: *leaf_index,
                expected: "tuple".into(),
                got: other.kind().name().into(),
            })
        }
    };
    if items.len() != units.len() {
        return Err(BridgeError::ArityMismatch {
            expected: units.len(),
            got: items.len(),
        });
    }
    for (unit, item) in units.iter().zip(items) {
        match unit {
            Unit::Group(inner) => {
                parse_tuple_units(world, inner, item, leaf_index, out)?;
            }
            leaf => {
                let unit_idx = *leaf_index;
                *leaf_index += 1;
                let value = match (leaf, &world.native.object(item).payload) {
                    (Unit::Int, Payload::Int(v)) => FormatValue::Int(*v),
                    (Unit::Real, Payload::Float(v)) => FormatValue::Real(*v),
                    (Unit::Bytes, Payload::Str(b)) => FormatValue::Bytes(b.clone()),
                    (Unit::Obj, _) => {
                        world.native.incref(item);
                        FormatValue::Obj(item)
                    }
                    (expected, got) => {
                        return Err(BridgeError::KindMismatch {
                            unit: unit_idx,
                            expected: expected.expected_name().into(),
                            got: got.kind().name().into(),
                        })
                    }
                };
                out.push(value);
            }
        }
    }
    Ok(())
}
