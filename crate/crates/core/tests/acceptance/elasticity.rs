//! Threshold scaling under a scripted load spike, in virtual time.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;

use elastikit::events::export::write_log;
use elastikit::events::{kind, EventSource, MonitoringEvent};
use elastikit::fixtures::COUNTER;
use elastikit::manager::{CloudObjectHandle, Manager};
use elastikit::value::CloudHostId;

use crate::common;
use crate::ensure;

const BTU: u64 = 60_000;
const WINDOW: u64 = 10_000;
const QUOTA: usize = 4;

fn load(m: &Manager, h: &CloudObjectHandle, event_type: &str) {
    let host = m.resident_host(h).expect("resident");
    m.bus().publish(
        MonitoringEvent::new(event_type, EventSource::Object(h.id))
            .with("host", host.to_hex())
            .with("co_id", h.id.to_hex())
            .with("method", "work"),
    );
}

struct Outcome {
    events: Vec<MonitoringEvent>,
    peak_pool: usize,
    pinned: CloudHostId,
}

fn scenario() -> Result<Outcome, String> {
    let mut cfg = common::sim_config("threshold:0.8,0.2");
    cfg.max_hosts = QUOTA;
    cfg.billing_time_unit_ms = BTU;
    cfg.utilization_window_ms = WINDOW;
    let m = Manager::builder(cfg).build().map_err(|e| e.to_string())?;

    // Spike: every object runs a long execution; each new deployment sees
    // a fully busy pool and asks for another host.
    let mut objects = Vec::new();
    let mut peak_pool = 0;
    for _ in 0..6 {
        let h = m.deploy(COUNTER, vec![]).map_err(|e| e.to_string())?;
        load(&m, &h, kind::EXECUTION_STARTED);
        objects.push(h);
        // Two windows, so at least one closes entirely busy.
        m.advance_clock(2 * WINDOW).map_err(|e| e.to_string())?;
        peak_pool = peak_pool.max(m.pool().len());
    }

    // Load removed. One object stays on the first host; the rest go away.
    for h in &objects {
        load(&m, h, kind::EXECUTION_FINISHED);
    }
    let pinned = m.resident_host(&objects[0]).expect("resident");
    for h in &objects {
        if m.resident_host(h) != Some(pinned) {
            m.destroy(h).map_err(|e| e.to_string())?;
        }
    }
    m.advance_clock(5 * BTU).map_err(|e| e.to_string())?;
    let events = m.bus().events();
    drop(m);
    Ok(Outcome {
        events,
        peak_pool,
        pinned,
    })
}

fn trace_ok(path: &std::path::Path, order: &str) -> Result<bool, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_elastikit"))
        .arg("trace")
        .arg(path)
        .arg("--assert-order")
        .arg(order)
        .arg("--per-host")
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    Ok(status.success())
}

pub fn run() -> Result<String, String> {
    let a = scenario()?;
    let b = scenario()?;
    let shape = |o: &Outcome| -> Vec<(String, u64)> {
        o.events.iter().map(|e| (e.event_type.clone(), e.timestamp)).collect()
    };
    ensure!(shape(&a) == shape(&b), "two runs of the scenario produced different traces");

    let ev = &a.events;
    let of = |t: &'static str| ev.iter().filter(move |e| e.event_type == t);
    let requested: BTreeMap<CloudHostId, u64> = of(kind::HOST_PROVISION_REQUESTED)
        .map(|e| (e.host().unwrap(), e.timestamp))
        .collect();
    ensure!(requested.len() == QUOTA, "provisioned {} hosts, expected {QUOTA}", requested.len());
    ensure!(a.peak_pool == QUOTA, "pool peaked at {}, expected {QUOTA}", a.peak_pool);

    // Every termination is on a billing boundary of its host, and no host
    // holding an object is terminated.
    let mut residents: BTreeMap<CloudHostId, BTreeSet<String>> = BTreeMap::new();
    let mut terminated = BTreeSet::new();
    let co = |e: &MonitoringEvent| e.prop("co_id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    for e in ev {
        match e.event_type.as_str() {
            kind::OBJECT_DEPLOYED => {
                residents.entry(e.host().unwrap()).or_default().insert(co(e));
            }
            kind::OBJECT_DESTROYED => {
                residents.entry(e.host().unwrap()).or_default().remove(&co(e));
            }
            kind::HOST_TERMINATED => {
                let h = e.host().unwrap();
                let since = e.timestamp - requested[&h];
                ensure!(
                    since > 0 && since.is_multiple_of(BTU),
                    "host {h} terminated at {} ms, {since} ms after provisioning",
                    e.timestamp
                );
                let held = residents.get(&h).map_or(0, BTreeSet::len);
                ensure!(held == 0, "host {h} terminated while holding {held} object(s)");
                terminated.insert(h);
            }
            _ => {}
        }
    }
    ensure!(!terminated.contains(&a.pinned), "the host holding an object was terminated");
    ensure!(
        terminated.len() == QUOTA - 1,
        "{} idle hosts terminated, expected {}",
        terminated.len(),
        QUOTA - 1
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("elasticity.log");
    write_log(std::fs::File::create(&path).map_err(|e| e.to_string())?, ev).map_err(|e| e.to_string())?;
    ensure!(
        trace_ok(&path, "HostProvisionRequested,HostOnline")?,
        "trace --assert-order HostProvisionRequested,HostOnline failed"
    );
    ensure!(
        trace_ok(&path, "HostOnline,ObjectDeployedEvent")?,
        "trace --assert-order HostOnline,ObjectDeployedEvent failed"
    );
    ensure!(
        !trace_ok(&path, "HostTerminatedEvent,HostProvisionRequested")?,
        "trace accepted a reversed order"
    );
    let ends: Vec<u64> = of(kind::HOST_TERMINATED).map(|e| e.timestamp).collect();
    Ok(format!(
        "{QUOTA} hosts provisioned, {} terminated at boundaries {ends:?}, deterministic over 2 runs",
        terminated.len()
    ))
}
