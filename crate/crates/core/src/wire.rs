//! Framed request/response protocol between the manager and host daemons.
//!
//! ```text
//! u32 BE length | u8 msg_type | u64 BE request_id | payload (length bytes)
//! ```
//!
//! Responses (`Ok`/`Err`) echo the request id. `EventPush` frames are
//! one-way and carry no response.

use std::io::{ErrorKind, Read, Write};

use thiserror::Error;

use crate::events::{EventSource, MonitoringEvent};
use crate::value::{
    malformed, write_value, CloudHostId, CloudObjectDescriptor, CloudObjectId, CodecError,
    CodecLimits, ObjectState, Reader, Value, DEFAULT_MAX_PAYLOAD,
};

pub const HEADER_LEN: usize = 13;
pub const MAX_FRAME_PAYLOAD: usize = DEFAULT_MAX_PAYLOAD;
pub const PROTOCOL_VERSION: u16 = 1;

pub mod msg_type {
    pub const DEPLOY_CO: u8 = 0x01;
    pub const INVOKE_CO: u8 = 0x02;
    pub const GET_FIELD: u8 = 0x03;
    pub const SET_FIELD: u8 = 0x04;
    pub const DESTROY_CO: u8 = 0x05;
    pub const SNAPSHOT_CO: u8 = 0x06;
    pub const RESTORE_CO: u8 = 0x07;
    pub const ARTIFACT_FETCH: u8 = 0x08;
    pub const ARTIFACT_DATA: u8 = 0x09;
    pub const GLOBAL_GET: u8 = 0x0A;
    pub const GLOBAL_SET: u8 = 0x0B;
    pub const EVENT_PUSH: u8 = 0x0C;
    /// Connection handshake: protocol version and registry digest.
    pub const HELLO: u8 = 0x10;
    pub const OK: u8 = 0x7E;
    pub const ERR: u8 = 0x7F;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    UnknownClass,
    DuplicateCO,
    ConstructorFailed,
    UnknownCO,
    UnknownMethod,
    ArityMismatch,
    ModeMismatch,
    ApplicationError,
    UnknownField,
    NotQuiescent,
    SnapshotUnsupported,
    RegistryMismatch,
    UnknownDigest,
    VerificationFailed,
    SizeExceeded,
    Malformed,
    Unsupported,
    Internal,
    Other(u16),
}

impl ErrorCode {
    pub fn to_u16(self) -> u16 {
        use ErrorCode::*;
        match self {
            UnknownClass => 1,
            DuplicateCO => 2,
            ConstructorFailed => 3,
            UnknownCO => 4,
            UnknownMethod => 5,
            ArityMismatch => 6,
            ModeMismatch => 7,
            ApplicationError => 8,
            UnknownField => 9,
            NotQuiescent => 10,
            SnapshotUnsupported => 11,
            RegistryMismatch => 12,
            UnknownDigest => 13,
            VerificationFailed => 14,
            SizeExceeded => 15,
            Malformed => 16,
            Unsupported => 17,
            Internal => 18,
            Other(c) => c,
        }
    }

    pub fn from_u16(c: u16) -> Self {
        use ErrorCode::*;
        match c {
            1 => UnknownClass,
            2 => DuplicateCO,
            3 => ConstructorFailed,
            4 => UnknownCO,
            5 => UnknownMethod,
            6 => ArityMismatch,
            7 => ModeMismatch,
            8 => ApplicationError,
            9 => UnknownField,
            10 => NotQuiescent,
            11 => SnapshotUnsupported,
            12 => RegistryMismatch,
            13 => UnknownDigest,
            14 => VerificationFailed,
            15 => SizeExceeded,
            16 => Malformed,
            17 => Unsupported,
            18 => Internal,
            c => Other(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u16,
        registry_digest: [u8; 32],
    },
    DeployCO {
        descriptor: CloudObjectDescriptor,
        ctor_args: Vec<Value>,
    },
    InvokeCO {
        co_id: CloudObjectId,
        method: String,
        args: Vec<Value>,
    },
    GetField {
        co_id: CloudObjectId,
        field: String,
    },
    SetField {
        co_id: CloudObjectId,
        field: String,
        value: Value,
    },
    DestroyCO {
        co_id: CloudObjectId,
    },
    SnapshotCO {
        co_id: CloudObjectId,
    },
    RestoreCO {
        descriptor: CloudObjectDescriptor,
        state: Vec<u8>,
    },
    ArtifactFetch {
        digest: [u8; 32],
    },
    ArtifactData {
        digest: [u8; 32],
        payload: Vec<u8>,
    },
    GlobalGet {
        name: String,
    },
    GlobalSet {
        name: String,
        value: Value,
    },
    EventPush {
        event: MonitoringEvent,
    },
    Ok {
        value: Value,
    },
    Err {
        code: ErrorCode,
        detail: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello { .. } => HELLO,
            Message::DeployCO { .. } => DEPLOY_CO,
            Message::InvokeCO { .. } => INVOKE_CO,
            Message::GetField { .. } => GET_FIELD,
            Message::SetField { .. } => SET_FIELD,
            Message::DestroyCO { .. } => DESTROY_CO,
            Message::SnapshotCO { .. } => SNAPSHOT_CO,
            Message::RestoreCO { .. } => RESTORE_CO,
            Message::ArtifactFetch { .. } => ARTIFACT_FETCH,
            Message::ArtifactData { .. } => ARTIFACT_DATA,
            Message::GlobalGet { .. } => GLOBAL_GET,
            Message::GlobalSet { .. } => GLOBAL_SET,
            Message::EventPush { .. } => EVENT_PUSH,
            Message::Ok { .. } => OK,
            Message::Err { .. } => ERR,
        }
    }

    pub fn is_response(&self) -> bool {
        matches!(self, Message::Ok { .. } | Message::Err { .. })
    }

    pub fn ok(value: Value) -> Self {
        Message::Ok { value }
    }

    pub fn err(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::Err {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("frame payload exceeds {0} bytes")]
    SizeExceeded(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CodecError> for WireError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::SizeExceeded(n) => WireError::SizeExceeded(n),
            other => WireError::MalformedFrame(other.to_string()),
        }
    }
}

fn limits() -> CodecLimits {
    CodecLimits::default()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_descriptor(out: &mut Vec<u8>, d: &CloudObjectDescriptor) {
    out.extend_from_slice(&d.id.to_bytes());
    put_str(out, &d.class_name);
    match d.resident_on {
        Some(h) => {
            out.push(1);
            out.extend_from_slice(&h.to_bytes());
        }
        None => out.push(0),
    }
    out.push(d.state.code());
}

fn get_descriptor(r: &mut Reader<'_>) -> Result<CloudObjectDescriptor, CodecError> {
    let id = CloudObjectId::from_bytes(r.array16()?);
    let class_name = r.string()?;
    let resident_on = match r.u8()? {
        0 => None,
        1 => Some(CloudHostId::from_bytes(r.array16()?)),
        b => return Err(malformed(format!("residency flag {b}"))),
    };
    let state = ObjectState::from_code(r.u8()?).ok_or_else(|| malformed("object state"))?;
    Ok(CloudObjectDescriptor {
        id,
        class_name,
        resident_on,
        state,
    })
}

fn put_values(out: &mut Vec<u8>, vs: &[Value]) -> Result<(), CodecError> {
    // Argument lists travel as one encoded List value.
    write_value(out, &Value::List(vs.to_vec()), limits(), 0)
}

fn get_values(r: &mut Reader<'_>) -> Result<Vec<Value>, CodecError> {
    match r.value(limits(), 0)? {
        Value::List(items) => Ok(items),
        other => Err(malformed(format!("expected argument list, got {}", other.type_name()))),
    }
}

fn put_event(out: &mut Vec<u8>, e: &MonitoringEvent) -> Result<(), CodecError> {
    put_str(out, &e.event_type);
    out.extend_from_slice(&e.timestamp.to_be_bytes());
    match e.source {
        EventSource::Manager => out.push(0),
        EventSource::Host(h) => {
            out.push(1);
            out.extend_from_slice(&h.to_bytes());
        }
        EventSource::Object(o) => {
            out.push(2);
            out.extend_from_slice(&o.to_bytes());
        }
        EventSource::External => out.push(3),
    }
    write_value(out, &Value::Map(e.properties.clone()), limits(), 0)
}

fn get_event(r: &mut Reader<'_>) -> Result<MonitoringEvent, CodecError> {
    let event_type = r.string()?;
    let timestamp = r.u64()?;
    let source = match r.u8()? {
        0 => EventSource::Manager,
        1 => EventSource::Host(CloudHostId::from_bytes(r.array16()?)),
        2 => EventSource::Object(CloudObjectId::from_bytes(r.array16()?)),
        3 => EventSource::External,
        b => return Err(malformed(format!("event source kind {b}"))),
    };
    let properties = match r.value(limits(), 0)? {
        Value::Map(m) => m,
        other => return Err(malformed(format!("expected property map, got {}", other.type_name()))),
    };
    Ok(MonitoringEvent {
        event_type,
        timestamp,
        source,
        properties,
    })
}

/// Encodes only the payload part of `m`.
pub fn encode_payload(m: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    match m {
        Message::Hello {
            version,
            registry_digest,
        } => {
            out.extend_from_slice(&version.to_be_bytes());
            out.extend_from_slice(registry_digest);
        }
        Message::DeployCO {
            descriptor,
            ctor_args,
        } => {
            put_descriptor(&mut out, descriptor);
            put_values(&mut out, ctor_args)?;
        }
        Message::InvokeCO {
            co_id,
            method,
            args,
        } => {
            out.extend_from_slice(&co_id.to_bytes());
            put_str(&mut out, method);
            put_values(&mut out, args)?;
        }
        Message::GetField { co_id, field } => {
            out.extend_from_slice(&co_id.to_bytes());
            put_str(&mut out, field);
        }
        Message::SetField {
            co_id,
            field,
            value,
        } => {
            out.extend_from_slice(&co_id.to_bytes());
            put_str(&mut out, field);
            write_value(&mut out, value, limits(), 0)?;
        }
        Message::DestroyCO { co_id } | Message::SnapshotCO { co_id } => {
            out.extend_from_slice(&co_id.to_bytes());
        }
        Message::RestoreCO { descriptor, state } => {
            put_descriptor(&mut out, descriptor);
            put_bytes(&mut out, state);
        }
        Message::ArtifactFetch { digest } => out.extend_from_slice(digest),
        Message::ArtifactData { digest, payload } => {
            out.extend_from_slice(digest);
            out.extend_from_slice(payload);
        }
        Message::GlobalGet { name } => put_str(&mut out, name),
        Message::GlobalSet { name, value } => {
            put_str(&mut out, name);
            write_value(&mut out, value, limits(), 0)?;
        }
        Message::EventPush { event } => put_event(&mut out, event)?,
        Message::Ok { value } => write_value(&mut out, value, limits(), 0)?,
        Message::Err { code, detail } => {
            out.extend_from_slice(&code.to_u16().to_be_bytes());
            put_str(&mut out, detail);
        }
    }
    if out.len() > MAX_FRAME_PAYLOAD {
        return Err(WireError::SizeExceeded(MAX_FRAME_PAYLOAD));
    }
    Ok(out)
}

pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    use msg_type::*;
    let mut r = Reader::new(payload);
    let m = match msg_type {
        HELLO => Message::Hello {
            version: r.u16()?,
            registry_digest: r.array32()?,
        },
        DEPLOY_CO => Message::DeployCO {
            descriptor: get_descriptor(&mut r)?,
            ctor_args: get_values(&mut r)?,
        },
        INVOKE_CO => Message::InvokeCO {
            co_id: CloudObjectId::from_bytes(r.array16()?),
            method: r.string()?,
            args: get_values(&mut r)?,
        },
        GET_FIELD => Message::GetField {
            co_id: CloudObjectId::from_bytes(r.array16()?),
            field: r.string()?,
        },
        SET_FIELD => Message::SetField {
            co_id: CloudObjectId::from_bytes(r.array16()?),
            field: r.string()?,
            value: r.value(limits(), 0)?,
        },
        DESTROY_CO => Message::DestroyCO {
            co_id: CloudObjectId::from_bytes(r.array16()?),
        },
        SNAPSHOT_CO => Message::SnapshotCO {
            co_id: CloudObjectId::from_bytes(r.array16()?),
        },
        RESTORE_CO => Message::RestoreCO {
            descriptor: get_descriptor(&mut r)?,
            state: r.len_prefixed()?.to_vec(),
        },
        ARTIFACT_FETCH => Message::ArtifactFetch {
            digest: r.array32()?,
        },
        ARTIFACT_DATA => Message::ArtifactData {
            digest: r.array32()?,
            payload: r.rest().to_vec(),
        },
        GLOBAL_GET => Message::GlobalGet { name: r.string()? },
        GLOBAL_SET => Message::GlobalSet {
            name: r.string()?,
            value: r.value(limits(), 0)?,
        },
        EVENT_PUSH => Message::EventPush {
            event: get_event(&mut r)?,
        },
        OK => Message::Ok {
            value: r.value(limits(), 0)?,
        },
        ERR => Message::Err {
            code: ErrorCode::from_u16(r.u16()?),
            detail: r.string()?,
        },
        other => return Err(WireError::UnknownMsgType(other)),
    };
    r.finish()?;
    Ok(m)
}

pub fn encode_frame(m: &Message, request_id: u64) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(m)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(m.msg_type());
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Header {
    length: usize,
    msg_type: u8,
    request_id: u64,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, WireError> {
    let length = u32::from_be_bytes(h[0..4].try_into().unwrap()) as usize;
    if length > MAX_FRAME_PAYLOAD {
        return Err(WireError::MalformedFrame(format!(
            "declared length {length} exceeds cap {MAX_FRAME_PAYLOAD}"
        )));
    }
    Ok(Header {
        length,
        msg_type: h[4],
        request_id: u64::from_be_bytes(h[5..13].try_into().unwrap()),
    })
}

/// Decodes one frame from the front of `b`, returning the message, its
/// request id and the number of bytes consumed.
pub fn decode_frame(b: &[u8]) -> Result<(Message, u64, usize), WireError> {
    if b.len() < HEADER_LEN {
        return Err(WireError::ConnectionClosed);
    }
    let header = parse_header(b[..HEADER_LEN].try_into().unwrap())?;
    let end = HEADER_LEN + header.length;
    if b.len() < end {
        return Err(WireError::ConnectionClosed);
    }
    let m = decode_payload(header.msg_type, &b[HEADER_LEN..end])?;
    Ok((m, header.request_id, end))
}

/// Blocking read of exactly one frame. EOF before or inside a frame
/// yields `ConnectionClosed`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Message, u64), WireError> {
    let mut h = [0u8; HEADER_LEN];
    read_full(r, &mut h)?;
    let header = parse_header(&h)?;
    let mut payload = vec![0u8; header.length];
    read_full(r, &mut payload)?;
    Ok((decode_payload(header.msg_type, &payload)?, header.request_id))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(WireError::ConnectionClosed),
        Err(e) if matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe) => {
            Err(WireError::ConnectionClosed)
        }
        Err(e) => Err(WireError::Io(e)),
    }
}

pub fn write_frame<W: Write>(w: &mut W, m: &Message, request_id: u64) -> Result<(), WireError> {
    let bytes = encode_frame(m, request_id)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Incremental decoder for byte streams that arrive in arbitrary chunks.
///
/// Never buffers more than one header plus the declared payload length, so
/// memory is bounded by the frame cap regardless of input.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete frame, `None` if more bytes are needed.
    /// After an error the offending frame (or header) is discarded.
    pub fn next_frame(&mut self) -> Option<Result<(Message, u64), WireError>> {
        if self.buf.len() < HEADER_LEN {
            return None;
        }
        let header = match parse_header(self.buf[..HEADER_LEN].try_into().unwrap()) {
            Ok(h) => h,
            Err(e) => {
                self.buf.drain(..HEADER_LEN);
                return Some(Err(e));
            }
        };
        let end = HEADER_LEN + header.length;
        if self.buf.len() < end {
            return None;
        }
        let res = decode_payload(header.msg_type, &self.buf[HEADER_LEN..end]);
        self.buf.drain(..end);
        Some(res.map(|m| (m, header.request_id)))
    }

    /// Call at end of input: leftover bytes mean the peer closed mid-frame.
    pub fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::ConnectionClosed)
        }
    }
}
