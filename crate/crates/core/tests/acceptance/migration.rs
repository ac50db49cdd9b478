//! Stateful objects keep their observable behaviour across migration, and
//! a migration to a dead host leaves the source serving.

use elastikit::fixtures::{ACCUMULATOR, COUNTER, KV_STORE, TEST_MASTER};
use elastikit::manager::{CloudObjectHandle, Manager, ManagerError};
use elastikit::value::{encode_value, Value};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::common::{self, gen};
use crate::ensure;

const OBJECTS: usize = 50;
const CLASSES: &[&str] = &[COUNTER, KV_STORE, ACCUMULATOR, TEST_MASTER];

/// Every getter and read-only method of the object, encoded.
fn observe(m: &Manager, h: &CloudObjectHandle) -> Result<Vec<u8>, String> {
    let call = |method: &str, args: Vec<Value>| m.invoke(h, method, args).map_err(|e| e.to_string());
    let field = |f: &str| m.get_field(h, f).map_err(|e| e.to_string());
    let mut seen = Vec::new();
    match h.class_name.as_str() {
        COUNTER => {
            seen.push(call("get", vec![])?);
            seen.push(field("count")?);
            seen.push(field("label")?);
        }
        KV_STORE => {
            seen.push(call("len", vec![])?);
            let keys = call("keys", vec![])?;
            if let Value::List(ks) = &keys {
                for k in ks {
                    seen.push(call("get", vec![k.clone()])?);
                }
            }
            seen.push(keys);
            seen.push(field("name")?);
        }
        ACCUMULATOR => {
            seen.push(call("sum", vec![])?);
            seen.push(call("mean", vec![])?);
            seen.push(call("history", vec![])?);
            seen.push(field("scale")?);
        }
        _ => {
            seen.push(call("results", vec![])?);
            seen.push(field("completed")?);
        }
    }
    encode_value(&Value::List(seen)).map_err(|e| e.to_string())
}

/// A by-value argument: anything but an object reference.
fn plain(rng: &mut StdRng) -> Value {
    match rng.gen_range(0..4) {
        0 => Value::Int64(rng.gen()),
        1 => Value::Float64(gen::float(rng)),
        2 => Value::text(gen::text(rng, 8)),
        _ => Value::List((0..rng.gen_range(0..4)).map(|_| Value::Int64(rng.gen_range(-9..9))).collect()),
    }
}

fn mutate(m: &Manager, h: &CloudObjectHandle, rng: &mut StdRng) -> Result<(), String> {
    let r = match h.class_name.as_str() {
        COUNTER => match rng.gen_range(0..3) {
            0 => m.invoke(h, "add", vec![Value::Int64(rng.gen_range(-100..100))]),
            1 => m.set_field(h, "label", Value::text(gen::text(rng, 6))).map(|_| Value::Null),
            _ => m.set_field(h, "count", Value::Int64(rng.gen())).map(|_| Value::Null),
        },
        KV_STORE => match rng.gen_range(0..4) {
            0 | 1 => m.invoke(h, "put", vec![Value::text(gen::text(rng, 3)), plain(rng)]),
            2 => m.invoke(h, "remove", vec![Value::text(gen::text(rng, 3))]),
            _ => m.set_field(h, "name", Value::text(gen::text(rng, 6))).map(|_| Value::Null),
        },
        ACCUMULATOR => match rng.gen_range(0..3) {
            0 => m.set_field(h, "scale", Value::Float64(rng.gen_range(0.1..3.0))).map(|_| Value::Null),
            _ => m.invoke(h, "push", vec![Value::Float64(gen::float(rng))]),
        },
        _ => m.invoke(h, "record", vec![plain(rng)]),
    };
    match r {
        Ok(_) | Err(ManagerError::Application(_)) => Ok(()),
        Err(e) => Err(format!("mutating {}: {e}", h.class_name)),
    }
}

pub fn run() -> Result<String, String> {
    let m = common::local_manager("roundrobin:3");
    let mut rng = StdRng::seed_from_u64(4);

    // Each object has a twin that never moves; both see the same calls.
    let mut pairs = Vec::new();
    for i in 0..OBJECTS {
        let class = CLASSES[i % CLASSES.len()];
        let args = if class == ACCUMULATOR { vec![Value::Float64(1.0)] } else { vec![] };
        let a = m.deploy(class, args.clone()).map_err(|e| e.to_string())?;
        let b = m.deploy(class, args).map_err(|e| e.to_string())?;
        pairs.push((a, b));
    }
    let hosts = m.pool().hosts.iter().map(|h| h.id).collect::<Vec<_>>();
    ensure!(hosts.len() == 3, "expected 3 hosts, got {}", hosts.len());

    let step = |rng: &mut StdRng, pairs: &[(CloudObjectHandle, CloudObjectHandle)]| -> Result<(), String> {
        for (a, b) in pairs {
            for _ in 0..rng.gen_range(1..6) {
                let seed: u64 = rng.gen();
                mutate(&m, a, &mut StdRng::seed_from_u64(seed))?;
                mutate(&m, b, &mut StdRng::seed_from_u64(seed))?;
            }
        }
        Ok(())
    };
    step(&mut rng, &pairs)?;

    let mut moved = 0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        let before = observe(&m, a)?;
        ensure!(before == observe(&m, b)?, "object {i} and its twin diverged before migration");
        let src = m.resident_host(a).unwrap();
        let dest = *hosts.iter().filter(|h| **h != src).nth(rng.gen_range(0..2)).unwrap();
        m.migrate(a, dest).map_err(|e| format!("migrating object {i}: {e}"))?;
        ensure!(m.resident_host(a) == Some(dest), "object {i} not resident on its destination");
        let after = observe(&m, a)?;
        ensure!(after == before, "object {i} ({}) observed differently after migration", a.class_name);
        moved += 1;
    }
    step(&mut rng, &pairs)?;
    for (i, (a, b)) in pairs.iter().enumerate() {
        ensure!(observe(&m, a)? == observe(&m, b)?, "object {i} diverged from its twin after migration");
    }

    // Dead destination: the migration fails and the source keeps serving.
    let dead = m.provision_host().map_err(|e| e.to_string())?;
    m.kill_host(dead).map_err(|e| e.to_string())?;
    let (a, _) = &pairs[0];
    let src = m.resident_host(a).unwrap();
    let before = observe(&m, a)?;
    match m.migrate(a, dead) {
        Err(ManagerError::DestUnreachable(h)) if h == dead => {}
        other => return Err(format!("migration to a killed host returned {other:?}")),
    }
    ensure!(m.resident_host(a) == Some(src), "failed migration moved the object");
    ensure!(observe(&m, a)? == before, "source answers differently after failed migration");
    mutate(&m, a, &mut rng)?;

    m.shutdown();
    Ok(format!("{moved} objects migrated with identical observations; dead-destination migration refused, source intact"))
}
