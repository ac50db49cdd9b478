//! Shared identifiers and the canonical value codec.
//!
//! Every argument, return value and field travels between the manager and
//! the hosts as a [`Value`] tree. The encoding is a tag-length-value format
//! with big-endian integers and bytewise-sorted map keys, so a given value
//! always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub const TAG_NULL: u8 = 0x00;
pub const TAG_BOOL: u8 = 0x01;
pub const TAG_INT64: u8 = 0x02;
pub const TAG_FLOAT64: u8 = 0x03;
pub const TAG_TEXT: u8 = 0x04;
pub const TAG_BYTES: u8 = 0x05;
pub const TAG_LIST: u8 = 0x06;
pub const TAG_MAP: u8 = 0x07;
pub const TAG_REF: u8 = 0x08;

/// Maximum container nesting accepted by the codec.
pub const DEFAULT_MAX_DEPTH: usize = 64;
/// Maximum encoded payload, 16 MiB.
pub const DEFAULT_MAX_PAYLOAD: usize = 16 * 1024 * 1024;

macro_rules! opaque_id {
    ($name:ident, $prefix:literal) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u128);

        impl $name {
            pub fn to_bytes(self) -> [u8; 16] {
                self.0.to_be_bytes()
            }

            pub fn from_bytes(b: [u8; 16]) -> Self {
                Self(u128::from_be_bytes(b))
            }

            pub fn to_hex(self) -> String {
                format!("{:032x}", self.0)
            }

            pub fn parse_hex(s: &str) -> Option<Self> {
                if s.len() != 32 {
                    return None;
                }
                u128::from_str_radix(s, 16).ok().map(Self)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "-{:x}"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

opaque_id!(CloudObjectId, "co");
opaque_id!(CloudHostId, "ch");

/// Allocates identifiers that are never reused for the lifetime of the
/// generator: a random 64-bit session prefix plus a monotonic counter.
#[derive(Debug)]
pub struct IdGenerator {
    prefix: u64,
    next: AtomicU64,
}

impl IdGenerator {
    pub fn new() -> Self {
        Self::with_prefix(rand::random())
    }

    pub fn with_prefix(prefix: u64) -> Self {
        Self {
            prefix,
            next: AtomicU64::new(1),
        }
    }

    pub fn next_raw(&self) -> u128 {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        ((self.prefix as u128) << 64) | n as u128
    }

    pub fn next_object(&self) -> CloudObjectId {
        CloudObjectId(self.next_raw())
    }

    pub fn next_host(&self) -> CloudHostId {
        CloudHostId(self.next_raw())
    }
}

impl Default for IdGenerator {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PassingMode {
    ByValue,
    ByReference,
}

impl PassingMode {
    pub fn code(self) -> u8 {
        match self {
            PassingMode::ByValue => 0,
            PassingMode::ByReference => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectState {
    Scheduling,
    Deployed,
    Migrating,
    Destroyed,
}

impl ObjectState {
    pub fn code(self) -> u8 {
        match self {
            ObjectState::Scheduling => 0,
            ObjectState::Deployed => 1,
            ObjectState::Migrating => 2,
            ObjectState::Destroyed => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ObjectState::Scheduling,
            1 => ObjectState::Deployed,
            2 => ObjectState::Migrating,
            3 => ObjectState::Destroyed,
            _ => return None,
        })
    }
}

/// Identity, class and residency of one cloud object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudObjectDescriptor {
    pub id: CloudObjectId,
    pub class_name: String,
    pub resident_on: Option<CloudHostId>,
    pub state: ObjectState,
}

impl CloudObjectDescriptor {
    pub fn scheduling(id: CloudObjectId, class_name: impl Into<String>) -> Self {
        Self {
            id,
            class_name: class_name.into(),
            resident_on: None,
            state: ObjectState::Scheduling,
        }
    }

    /// `resident_on` is set exactly when the object is deployed or migrating.
    pub fn is_consistent(&self) -> bool {
        matches!(self.state, ObjectState::Deployed | ObjectState::Migrating)
            == self.resident_on.is_some()
    }
}

/// The value union carried by invocations, fields and events.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int64(i64),
    Float64(f64),
    Text(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    Ref(CloudObjectId),
}

// Floats compare by bit pattern so that equality agrees with the encoding.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Null, Null) => true,
            (Bool(a), Bool(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (Float64(a), Float64(b)) => a.to_bits() == b.to_bits(),
            (Text(a), Text(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (List(a), List(b)) => a == b,
            (Map(a), Map(b)) => a == b,
            (Ref(a), Ref(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float64(v) => Some(*v),
            Value::Int64(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Int64(_) | Value::Float64(_))
    }

    /// True when a `Ref` occurs anywhere in the tree.
    pub fn contains_ref(&self) -> bool {
        match self {
            Value::Ref(_) => true,
            Value::List(items) => items.iter().any(Value::contains_ref),
            Value::Map(m) => m.values().any(Value::contains_ref),
            _ => false,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "Null",
            Value::Bool(_) => "Bool",
            Value::Int64(_) => "Int64",
            Value::Float64(_) => "Float64",
            Value::Text(_) => "Text",
            Value::Bytes(_) => "Bytes",
            Value::List(_) => "List",
            Value::Map(_) => "Map",
            Value::Ref(_) => "Ref",
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float64(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("value nesting exceeds depth limit {0}")]
    DepthExceeded(usize),
    #[error("encoded size exceeds limit of {0} bytes")]
    SizeExceeded(usize),
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecLimits {
    pub max_depth: usize,
    pub max_payload: usize,
}

impl Default for CodecLimits {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

pub fn encode_value(v: &Value) -> Result<Vec<u8>, CodecError> {
    encode_value_with(v, CodecLimits::default())
}

pub fn encode_value_with(v: &Value, limits: CodecLimits) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    write_value(&mut out, v, limits, 0)?;
    Ok(out)
}

/// Appends the encoding of `v` to `out`. Used by the wire layer to embed
/// values inside message payloads.
pub fn write_value(
    out: &mut Vec<u8>,
    v: &Value,
    limits: CodecLimits,
    depth: usize,
) -> Result<(), CodecError> {
    let check = |out: &Vec<u8>| {
        if out.len() > limits.max_payload {
            Err(CodecError::SizeExceeded(limits.max_payload))
        } else {
            Ok(())
        }
    };
    match v {
        Value::Null => out.push(TAG_NULL),
        Value::Bool(b) => {
            out.push(TAG_BOOL);
            out.push(*b as u8);
        }
        Value::Int64(i) => {
            out.push(TAG_INT64);
            out.extend_from_slice(&i.to_be_bytes());
        }
        Value::Float64(f) => {
            out.push(TAG_FLOAT64);
            out.extend_from_slice(&f.to_bits().to_be_bytes());
        }
        Value::Text(s) => {
            out.push(TAG_TEXT);
            write_len_prefixed(out, s.as_bytes(), limits)?;
        }
        Value::Bytes(b) => {
            out.push(TAG_BYTES);
            write_len_prefixed(out, b, limits)?;
        }
        Value::List(items) => {
            if depth + 1 > limits.max_depth {
                return Err(CodecError::DepthExceeded(limits.max_depth));
            }
            out.push(TAG_LIST);
            out.extend_from_slice(&count_u32(items.len(), limits)?.to_be_bytes());
            for item in items {
                write_value(out, item, limits, depth + 1)?;
            }
        }
        Value::Map(m) => {
            if depth + 1 > limits.max_depth {
                return Err(CodecError::DepthExceeded(limits.max_depth));
            }
            out.push(TAG_MAP);
            out.extend_from_slice(&count_u32(m.len(), limits)?.to_be_bytes());
            // BTreeMap<String, _> iterates in bytewise key order.
            for (k, item) in m {
                write_len_prefixed(out, k.as_bytes(), limits)?;
                write_value(out, item, limits, depth + 1)?;
            }
        }
        Value::Ref(id) => {
            out.push(TAG_REF);
            out.extend_from_slice(&id.to_bytes());
        }
    }
    check(out)
}

fn count_u32(n: usize, limits: CodecLimits) -> Result<u32, CodecError> {
    u32::try_from(n).map_err(|_| CodecError::SizeExceeded(limits.max_payload))
}

fn write_len_prefixed(out: &mut Vec<u8>, b: &[u8], limits: CodecLimits) -> Result<(), CodecError> {
    if b.len() > limits.max_payload {
        return Err(CodecError::SizeExceeded(limits.max_payload));
    }
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

pub fn decode_value(b: &[u8]) -> Result<Value, CodecError> {
    decode_value_with(b, CodecLimits::default())
}

pub fn decode_value_with(b: &[u8], limits: CodecLimits) -> Result<Value, CodecError> {
    if b.len() > limits.max_payload {
        return Err(CodecError::SizeExceeded(limits.max_payload));
    }
    let mut r = Reader::new(b);
    let v = r.value(limits, 0)?;
    r.finish()?;
    Ok(v)
}

/// Cursor over a byte slice; shared by the value and frame decoders.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(malformed(format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array16(&mut self) -> Result<[u8; 16], CodecError> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    pub fn array32(&mut self) -> Result<[u8; 32], CodecError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn len_prefixed(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let b = self.len_prefixed()?;
        String::from_utf8(b.to_vec()).map_err(|_| malformed("invalid UTF-8"))
    }

    pub fn value(&mut self, limits: CodecLimits, depth: usize) -> Result<Value, CodecError> {
        let tag = self.u8()?;
        Ok(match tag {
            TAG_NULL => Value::Null,
            TAG_BOOL => match self.u8()? {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(malformed(format!("bool byte {b:#04x}"))),
            },
            TAG_INT64 => Value::Int64(self.u64()? as i64),
            TAG_FLOAT64 => Value::Float64(f64::from_bits(self.u64()?)),
            TAG_TEXT => Value::Text(self.string()?),
            TAG_BYTES => Value::Bytes(self.len_prefixed()?.to_vec()),
            TAG_LIST => {
                if depth + 1 > limits.max_depth {
                    return Err(CodecError::DepthExceeded(limits.max_depth));
                }
                let n = self.u32()? as usize;
                // Every element takes at least one byte, so the declared
                // count can never legitimately exceed what is left.
                if n > self.remaining() {
                    return Err(malformed("list count exceeds input"));
                }
                // Values are much wider than their smallest encoding, so
                // grow on demand past a small reservation.
                let mut items = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    items.push(self.value(limits, depth + 1)?);
                }
                Value::List(items)
            }
            TAG_MAP => {
                if depth + 1 > limits.max_depth {
                    return Err(CodecError::DepthExceeded(limits.max_depth));
                }
                let n = self.u32()? as usize;
                if n > self.remaining() {
                    return Err(malformed("map count exceeds input"));
                }
                let mut m = BTreeMap::new();
                let mut prev: Option<String> = None;
                for _ in 0..n {
                    let k = self.string()?;
                    if let Some(p) = &prev {
                        if p.as_bytes() >= k.as_bytes() {
                            return Err(malformed("map keys not strictly ascending"));
                        }
                    }
                    let v = self.value(limits, depth + 1)?;
                    prev = Some(k.clone());
                    m.insert(k, v);
                }
                Value::Map(m)
            }
            TAG_REF => Value::Ref(CloudObjectId::from_bytes(self.array16()?)),
            other => return Err(malformed(format!("unknown tag {other:#04x}"))),
        })
    }
}

pub(crate) fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::MalformedEncoding(msg.into())
}
