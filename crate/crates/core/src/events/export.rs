//! Line-delimited JSON event log.
//!
//! One event per line with sorted keys:
//! `{"props":{...},"source":"host:<hex>","ts":123,"type":"HostOnline"}`.
//! `Bytes` and `Ref` values are written as `{"bytes":"<hex>"}` and
//! `{"ref":"<hex>"}`; non-finite floats become `null`.

use std::io::{BufRead, Write};

use serde_json::{json, Map, Number};
use thiserror::Error;

use super::{EventSource, MonitoringEvent};
use crate::value::{CloudObjectId, Value};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed log line {line}: {msg}")]
    MalformedLog { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Null => serde_json::Value::Null,
        Value::Bool(b) => json!(b),
        Value::Int64(i) => json!(i),
        Value::Float64(x) => Number::from_f64(*x).map_or(serde_json::Value::Null, serde_json::Value::Number),
        Value::Text(s) => json!(s),
        Value::Bytes(b) => json!({ "bytes": hex::encode(b) }),
        Value::List(items) => serde_json::Value::Array(items.iter().map(value_to_json).collect()),
        Value::Map(m) => serde_json::Value::Object(
            m.iter().map(|(k, v)| (k.clone(), value_to_json(v))).collect(),
        ),
        Value::Ref(id) => json!({ "ref": id.to_hex() }),
    }
}

pub fn value_from_json(j: &serde_json::Value) -> Value {
    match j {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(*b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) => Value::Int64(i),
            None => Value::Float64(n.as_f64().unwrap_or(f64::NAN)),
        },
        serde_json::Value::String(s) => Value::Text(s.clone()),
        serde_json::Value::Array(items) => Value::List(items.iter().map(value_from_json).collect()),
        serde_json::Value::Object(m) => {
            if m.len() == 1 {
                if let Some(serde_json::Value::String(h)) = m.get("bytes") {
                    if let Ok(b) = hex::decode(h) {
                        return Value::Bytes(b);
                    }
                }
                if let Some(serde_json::Value::String(h)) = m.get("ref") {
                    if let Some(id) = CloudObjectId::parse_hex(h) {
                        return Value::Ref(id);
                    }
                }
            }
            Value::Map(m.iter().map(|(k, v)| (k.clone(), value_from_json(v))).collect())
        }
    }
}

pub fn event_to_line(e: &MonitoringEvent) -> String {
    let mut obj = Map::new();
    obj.insert(
        "props".into(),
        serde_json::Value::Object(
            e.properties
                .iter()
                .map(|(k, v)| (k.clone(), value_to_json(v)))
                .collect(),
        ),
    );
    obj.insert("source".into(), json!(e.source.render()));
    obj.insert("ts".into(), json!(e.timestamp));
    obj.insert("type".into(), json!(e.event_type));
    serde_json::Value::Object(obj).to_string()
}

pub fn event_from_line(line: &str, lineno: usize) -> Result<MonitoringEvent, LogError> {
    let bad = |msg: &str| LogError::MalformedLog {
        line: lineno,
        msg: msg.to_string(),
    };
    let j: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
    let obj = j.as_object().ok_or_else(|| bad("not an object"))?;
    let ts = obj
        .get("ts")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing ts"))?;
    let event_type = obj
        .get("type")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing type"))?;
    let source = obj
        .get("source")
        .and_then(|v| v.as_str())
        .and_then(EventSource::parse)
        .ok_or_else(|| bad("missing or invalid source"))?;
    let props = match obj.get("props") {
        None => Default::default(),
        Some(serde_json::Value::Object(m)) => m
            .iter()
            .map(|(k, v)| (k.clone(), value_from_json(v)))
            .collect(),
        Some(_) => return Err(bad("props is not an object")),
    };
    Ok(MonitoringEvent {
        event_type: event_type.to_string(),
        timestamp: ts,
        source,
        properties: props,
    })
}

pub fn write_log<W: Write>(mut w: W, events: &[MonitoringEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{}", event_to_line(e))?;
    }
    w.flush()
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<MonitoringEvent>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(event_from_line(&line, i + 1)?);
    }
    Ok(out)
}
