//! Seeded generators for values, messages and events.

use std::collections::BTreeMap;

use elastikit::events::{kind, EventSource, MonitoringEvent};
use elastikit::value::{CloudHostId, CloudObjectDescriptor, CloudObjectId, ObjectState, Value};
use elastikit::wire::{ErrorCode, Message, PROTOCOL_VERSION};
use rand::rngs::StdRng;
use rand::Rng;

pub fn text(rng: &mut StdRng, max: usize) -> String {
    let len = rng.gen_range(0..=max);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => char::from_u32(rng.gen_range(0xA0..0x2FFF)).unwrap_or('x'),
            _ => rng.gen_range(b'a'..=b'z') as char,
        })
        .collect()
}

pub fn bytes(rng: &mut StdRng, max: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max);
    (0..len).map(|_| rng.gen()).collect()
}

pub fn float(rng: &mut StdRng) -> f64 {
    match rng.gen_range(0..8) {
        0 => f64::from_bits(rng.gen()),
        1 => [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::MIN_POSITIVE][rng.gen_range(0..5)],
        _ => rng.gen_range(-1e6..1e6),
    }
}

pub fn value(rng: &mut StdRng, depth: u32) -> Value {
    let leaf_only = depth == 0;
    match rng.gen_range(0..if leaf_only { 7 } else { 9 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => Value::Int64(rng.gen()),
        3 => Value::Float64(float(rng)),
        4 => Value::Text(text(rng, 12)),
        5 => Value::Bytes(bytes(rng, 24)),
        6 => Value::Ref(CloudObjectId(rng.gen())),
        7 => Value::List((0..rng.gen_range(0..5)).map(|_| value(rng, depth - 1)).collect()),
        _ => Value::Map(
            (0..rng.gen_range(0..5))
                .map(|_| (text(rng, 6), value(rng, depth - 1)))
                .collect(),
        ),
    }
}

pub fn descriptor(rng: &mut StdRng) -> CloudObjectDescriptor {
    let state = [
        ObjectState::Scheduling,
        ObjectState::Deployed,
        ObjectState::Migrating,
        ObjectState::Destroyed,
    ][rng.gen_range(0..4)];
    CloudObjectDescriptor {
        id: CloudObjectId(rng.gen()),
        class_name: text(rng, 10),
        resident_on: rng.gen_bool(0.5).then(|| CloudHostId(rng.gen())),
        state,
    }
}

pub fn event_type(rng: &mut StdRng) -> String {
    if rng.gen_bool(0.2) {
        format!("{}{}", kind::CUSTOM_PREFIX, text(rng, 8))
    } else {
        kind::CATALOG[rng.gen_range(0..kind::CATALOG.len())].to_string()
    }
}

pub fn event(rng: &mut StdRng) -> MonitoringEvent {
    let source = match rng.gen_range(0..4) {
        0 => EventSource::Manager,
        1 => EventSource::Host(CloudHostId(rng.gen())),
        2 => EventSource::Object(CloudObjectId(rng.gen())),
        _ => EventSource::External,
    };
    let mut e = MonitoringEvent::new(event_type(rng), source).at(rng.gen());
    let props: BTreeMap<String, Value> = (0..rng.gen_range(0..4))
        .map(|_| (text(rng, 6), value(rng, 2)))
        .collect();
    e.properties = props;
    e
}

pub fn error_code(rng: &mut StdRng) -> ErrorCode {
    let c = rng.gen_range(1..=19u16);
    if c == 19 {
        ErrorCode::Other(rng.gen_range(100..u16::MAX))
    } else {
        ErrorCode::from_u16(c)
    }
}

pub fn message(rng: &mut StdRng) -> Message {
    let args = |rng: &mut StdRng| (0..rng.gen_range(0..4)).map(|_| value(rng, 3)).collect();
    match rng.gen_range(0..15) {
        0 => Message::Hello {
            version: if rng.gen_bool(0.8) { PROTOCOL_VERSION } else { rng.gen() },
            registry_digest: rng.gen(),
        },
        1 => Message::DeployCO {
            descriptor: descriptor(rng),
            ctor_args: args(rng),
        },
        2 => Message::InvokeCO {
            co_id: CloudObjectId(rng.gen()),
            method: text(rng, 10),
            args: args(rng),
        },
        3 => Message::GetField {
            co_id: CloudObjectId(rng.gen()),
            field: text(rng, 8),
        },
        4 => Message::SetField {
            co_id: CloudObjectId(rng.gen()),
            field: text(rng, 8),
            value: value(rng, 3),
        },
        5 => Message::DestroyCO {
            co_id: CloudObjectId(rng.gen()),
        },
        6 => Message::SnapshotCO {
            co_id: CloudObjectId(rng.gen()),
        },
        7 => Message::RestoreCO {
            descriptor: descriptor(rng),
            state: bytes(rng, 64),
        },
        8 => Message::ArtifactFetch { digest: rng.gen() },
        9 => Message::ArtifactData {
            digest: rng.gen(),
            payload: bytes(rng, 256),
        },
        10 => Message::GlobalGet { name: text(rng, 8) },
        11 => Message::GlobalSet {
            name: text(rng, 8),
            value: value(rng, 3),
        },
        12 => Message::EventPush { event: event(rng) },
        13 => Message::Ok { value: value(rng, 4) },
        _ => Message::Err {
            code: error_code(rng),
            detail: text(rng, 20),
        },
    }
}
