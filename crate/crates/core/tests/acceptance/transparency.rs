//! Generated programs run against plain in-process objects and through
//! manager and hostd must produce byte-identical outputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use elastikit::artifacts::Digest;
use elastikit::fixtures::{
    default_registry, ACCUMULATOR, COUNTER, DIRECTORY, FAULTY, GLOBAL_USER, KV_STORE, TEST_WORKER,
};
use elastikit::manager::{CloudObjectHandle, Manager, ManagerError};
use elastikit::registry::{check_mode, AppError, ClassRegistry, ClassSpec, CloudObject, ObjectContext};
use elastikit::value::{encode_value, CloudObjectId, Value};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::common::{self, gen};
use crate::ensure;

const PROGRAMS: usize = 200;
const CLASSES: &[&str] = &[COUNTER, KV_STORE, ACCUMULATOR, FAULTY, GLOBAL_USER, DIRECTORY, TEST_WORKER];

#[derive(Debug, Clone)]
enum Arg {
    Val(Value),
    Slot(usize),
}

#[derive(Debug, Clone)]
enum Op {
    Deploy(&'static str, Vec<Value>),
    Invoke(usize, String, Vec<Arg>),
    Get(usize, String),
    Set(usize, String, Value),
    Destroy(usize),
}

type Outcome = Result<Value, (String, String)>;

fn encode_outcome(o: Outcome) -> Value {
    let mut m = BTreeMap::new();
    match o {
        Ok(v) => {
            m.insert("ok".to_string(), v);
        }
        Err((code, detail)) => {
            m.insert("err".to_string(), Value::Text(code));
            m.insert("detail".to_string(), Value::Text(detail));
        }
    }
    Value::Map(m)
}

fn small_int(rng: &mut StdRng) -> Value {
    Value::Int64(rng.gen_range(-50..50))
}

fn key(rng: &mut StdRng) -> Value {
    Value::text(["a", "b", "c", "d"][rng.gen_range(0..4)])
}

fn gen_program(rng: &mut StdRng, prog: usize) -> Vec<Op> {
    let mut slots: Vec<&'static str> = Vec::new();
    let mut ops = Vec::new();
    let global = |rng: &mut StdRng| Value::text(format!("p{prog}.g{}", rng.gen_range(0..3)));
    for _ in 0..rng.gen_range(8..30) {
        if slots.is_empty() || rng.gen_bool(0.15) {
            let class = CLASSES[rng.gen_range(0..CLASSES.len())];
            let args = match class {
                COUNTER if rng.gen_bool(0.5) => vec![small_int(rng)],
                ACCUMULATOR => match rng.gen_range(0..4) {
                    0 => vec![Value::Int64(rng.gen_range(1..4))],
                    1 => vec![Value::text("huge")],
                    _ => vec![Value::Float64(rng.gen_range(0.5..2.0))],
                },
                _ => vec![],
            };
            slots.push(class);
            ops.push(Op::Deploy(class, args));
            continue;
        }
        let s = rng.gen_range(0..slots.len());
        let v = |rng: &mut StdRng| Arg::Val(gen::value(rng, 2));
        let op = match (slots[s], rng.gen_range(0..10)) {
            (_, 0) => Op::Invoke(s, "no_such_method".into(), vec![]),
            (_, 1) if rng.gen_bool(0.3) => Op::Destroy(s),
            (_, 1) => Op::Get(s, "no_such_field".into()),
            (COUNTER, 2..=4) => Op::Invoke(s, "add".into(), vec![Arg::Val(small_int(rng))]),
            (COUNTER, 5) => Op::Invoke(s, ["get", "reset"][rng.gen_range(0..2)].into(), vec![]),
            (COUNTER, 6) => Op::Invoke(s, "add".into(), vec![v(rng)]),
            (COUNTER, 7) => Op::Get(s, ["count", "label"][rng.gen_range(0..2)].into()),
            (COUNTER, _) => Op::Set(
                s,
                ["count", "label"][rng.gen_range(0..2)].into(),
                [small_int(rng), Value::text(gen::text(rng, 5))][rng.gen_range(0..2)].clone(),
            ),
            (KV_STORE, 2..=4) => Op::Invoke(s, "put".into(), vec![Arg::Val(key(rng)), v(rng)]),
            (KV_STORE, 5) => Op::Invoke(s, ["get", "remove"][rng.gen_range(0..2)].into(), vec![Arg::Val(key(rng))]),
            (KV_STORE, 6) => Op::Invoke(s, ["len", "keys"][rng.gen_range(0..2)].into(), vec![]),
            (KV_STORE, 7) => Op::Get(s, "name".into()),
            (KV_STORE, _) => Op::Set(s, "name".into(), gen::value(rng, 1)),
            (ACCUMULATOR, 2..=4) => Op::Invoke(
                s,
                "push".into(),
                vec![Arg::Val(if rng.gen_bool(0.5) { small_int(rng) } else { Value::Float64(rng.gen_range(-9.0..9.0)) })],
            ),
            (ACCUMULATOR, 5 | 6) => Op::Invoke(s, ["sum", "mean", "history"][rng.gen_range(0..3)].into(), vec![]),
            (ACCUMULATOR, 7) => Op::Get(s, "scale".into()),
            (ACCUMULATOR, _) => Op::Set(s, "scale".into(), [small_int(rng), Value::Float64(1.5), Value::Null][rng.gen_range(0..3)].clone()),
            (FAULTY, 2..=4) => Op::Invoke(s, "fail".into(), vec![Arg::Val(Value::text(gen::text(rng, 8)))]),
            (FAULTY, 5 | 6) => Op::Invoke(s, "echo".into(), vec![v(rng)]),
            (FAULTY, 7) => Op::Get(s, "calls".into()),
            (FAULTY, _) => Op::Set(s, "calls".into(), small_int(rng)),
            (GLOBAL_USER, 2 | 3) => Op::Invoke(s, "write".into(), vec![Arg::Val(global(rng)), v(rng)]),
            (GLOBAL_USER, 4 | 5) => Op::Invoke(s, "read".into(), vec![Arg::Val(global(rng))]),
            (GLOBAL_USER, 6 | 7) => Op::Invoke(s, "incr".into(), vec![Arg::Val(global(rng))]),
            (GLOBAL_USER, _) => Op::Invoke(s, "emit".into(), vec![Arg::Val(Value::text("custom.note")), v(rng)]),
            (DIRECTORY, 2..=5) => Op::Invoke(s, "register".into(), vec![Arg::Slot(rng.gen_range(0..slots.len()))]),
            (DIRECTORY, 6 | 7) => Op::Invoke(s, "lookup".into(), vec![Arg::Val(Value::Int64(rng.gen_range(0..4)))]),
            (DIRECTORY, 8) => Op::Invoke(s, "register".into(), vec![v(rng)]),
            (DIRECTORY, _) => Op::Invoke(s, "size".into(), vec![]),
            (TEST_WORKER, 2..=6) => Op::Invoke(s, "run_task".into(), vec![Arg::Val(Value::Int64(rng.gen_range(0..22)))]),
            (TEST_WORKER, 7) => Op::Get(s, "tasks_done".into()),
            (TEST_WORKER, _) => Op::Set(s, "tasks_done".into(), small_int(rng)),
            (other, _) => unreachable!("no generator for {other}"),
        };
        ops.push(op);
    }
    ops
}

// --- reference: plain objects in this process -----------------------------

struct LocalCtx<'a> {
    globals: &'a mut HashMap<String, Value>,
}

impl ObjectContext for LocalCtx<'_> {
    fn global_get(&mut self, name: &str) -> Result<Value, AppError> {
        Ok(self.globals.get(name).cloned().unwrap_or(Value::Null))
    }

    fn global_set(&mut self, name: &str, value: Value) -> Result<(), AppError> {
        self.globals.insert(name.to_string(), value);
        Ok(())
    }

    fn artifact(&mut self, digest: &Digest) -> Result<Arc<Vec<u8>>, AppError> {
        Err(AppError::new(format!("unknown digest {digest}")))
    }

    fn emit(&mut self, _: &str, _: BTreeMap<String, Value>) {}
}

fn rejected(code: elastikit::wire::ErrorCode) -> (String, String) {
    (format!("{code:?}"), String::new())
}

fn app(e: AppError) -> (String, String) {
    ("ApplicationError".into(), e.0)
}

fn run_local(registry: &ClassRegistry, ops: &[Op]) -> Vec<u8> {
    let mut objs: Vec<Option<(Arc<ClassSpec>, Box<dyn CloudObject>)>> = Vec::new();
    let mut globals = HashMap::new();
    let mut out = Vec::new();
    let gone = || Err(("ObjectDestroyed".to_string(), String::new()));
    for op in ops {
        let outcome: Outcome = match op {
            Op::Deploy(class, args) => {
                let spec = registry.get(class).expect("fixture class").clone();
                let r = match spec.check_ctor(args) {
                    Err(r) => Err(rejected(r.code)),
                    Ok(()) => match (spec.factory)(args.clone()) {
                        Ok(obj) => {
                            objs.push(Some((spec, obj)));
                            out.push(encode_outcome(Ok(Value::Null)));
                            continue;
                        }
                        Err(e) => Err(("ConstructorFailed".into(), e.0)),
                    },
                };
                objs.push(None);
                r
            }
            Op::Invoke(s, method, args) => match &mut objs[*s] {
                None => gone(),
                Some((spec, obj)) => {
                    let args: Vec<Value> = args
                        .iter()
                        .map(|a| match a {
                            Arg::Val(v) => v.clone(),
                            Arg::Slot(t) => Value::Ref(CloudObjectId(*t as u128)),
                        })
                        .collect();
                    match spec.check_invoke(method, &args) {
                        Err(r) => Err(rejected(r.code)),
                        Ok(m) => {
                            let m = m.clone();
                            match obj.invoke(method, args, &mut LocalCtx { globals: &mut globals }) {
                                Err(e) => Err(app(e)),
                                Ok(v) => match spec.check_return(&m, &v) {
                                    Err(r) => Err(rejected(r.code)),
                                    Ok(()) => Ok(v),
                                },
                            }
                        }
                    }
                }
            },
            Op::Get(s, field) => match &objs[*s] {
                None => gone(),
                Some((spec, obj)) => match spec.check_field(field) {
                    Err(r) => Err(rejected(r.code)),
                    Ok(_) => obj
                        .get_field(field)
                        .ok_or_else(|| rejected(elastikit::wire::ErrorCode::UnknownField)),
                },
            },
            Op::Set(s, field, v) => match &mut objs[*s] {
                None => gone(),
                Some((spec, obj)) => match spec.check_field(field) {
                    Err(r) => Err(rejected(r.code)),
                    Ok(f) if !check_mode(f.mode, v) => Err(rejected(elastikit::wire::ErrorCode::ModeMismatch)),
                    Ok(_) => obj.set_field(field, v.clone()).map(|_| Value::Null).map_err(app),
                },
            },
            Op::Destroy(s) => match objs[*s].take() {
                None => gone(),
                Some(_) => Ok(Value::Null),
            },
        };
        out.push(encode_outcome(outcome));
    }
    encode_value(&Value::List(out)).expect("outputs encode")
}

// --- through manager and hostd --------------------------------------------

fn normalize(v: Value, slots: &HashMap<CloudObjectId, usize>) -> Value {
    match v {
        Value::Ref(id) => Value::Ref(slots.get(&id).map_or(id, |s| CloudObjectId(*s as u128))),
        Value::List(xs) => Value::List(xs.into_iter().map(|x| normalize(x, slots)).collect()),
        Value::Map(m) => Value::Map(m.into_iter().map(|(k, x)| (k, normalize(x, slots))).collect()),
        other => other,
    }
}

fn remote(e: ManagerError) -> (String, String) {
    match e {
        ManagerError::Application(d) => ("ApplicationError".into(), d),
        ManagerError::DeployFailed(elastikit::wire::ErrorCode::ConstructorFailed, d) => ("ConstructorFailed".into(), d),
        ManagerError::DeployFailed(code, _) | ManagerError::Remote(code, _) => rejected(code),
        ManagerError::ObjectDestroyed(_) => ("ObjectDestroyed".into(), String::new()),
        other => panic!("infrastructure failure: {other}"),
    }
}

fn run_remote(m: &Manager, ops: &[Op]) -> Vec<u8> {
    let mut handles: Vec<Option<CloudObjectHandle>> = Vec::new();
    let mut ids: Vec<CloudObjectId> = Vec::new();
    let mut slots = HashMap::new();
    let mut out = Vec::new();
    let gone = || Err(("ObjectDestroyed".to_string(), String::new()));
    for op in ops {
        let outcome: Outcome = match op {
            Op::Deploy(class, args) => {
                let r = m.deploy(class, args.clone());
                let id = match &r {
                    Ok(h) => h.id,
                    // A placeholder that still maps back to this slot.
                    Err(_) => CloudObjectId(u128::MAX - handles.len() as u128),
                };
                slots.insert(id, handles.len());
                ids.push(id);
                let outcome = r.as_ref().map(|_| Value::Null).map_err(|e| remote(e.clone()));
                handles.push(r.ok());
                outcome
            }
            Op::Invoke(s, method, args) => match &handles[*s] {
                None => gone(),
                Some(h) => {
                    let args = args
                        .iter()
                        .map(|a| match a {
                            Arg::Val(v) => v.clone(),
                            Arg::Slot(t) => Value::Ref(ids[*t]),
                        })
                        .collect();
                    m.invoke(h, method, args).map_err(remote)
                }
            },
            Op::Get(s, field) => match &handles[*s] {
                None => gone(),
                Some(h) => m.get_field(h, field).map_err(remote),
            },
            Op::Set(s, field, v) => match &handles[*s] {
                None => gone(),
                Some(h) => m.set_field(h, field, v.clone()).map(|_| Value::Null).map_err(remote),
            },
            Op::Destroy(s) => match handles[*s].take() {
                None => gone(),
                Some(h) => m.destroy(&h).map(|_| Value::Null).map_err(remote),
            },
        };
        out.push(encode_outcome(outcome.map(|v| normalize(v, &slots))));
    }
    for h in handles.into_iter().flatten() {
        let _ = m.destroy(&h);
    }
    encode_value(&Value::List(out)).expect("outputs encode")
}

pub fn run() -> Result<String, String> {
    let registry = default_registry();
    let managers: Vec<Manager> = (1..=3)
        .map(|k| common::local_manager(&format!("roundrobin:{k}")))
        .collect();
    let mut rng = StdRng::seed_from_u64(1);
    let mut ops_total = 0;
    for p in 0..PROGRAMS {
        let ops = gen_program(&mut rng, p);
        ops_total += ops.len();
        let local = run_local(&registry, &ops);
        let remote = run_remote(&managers[p % 3], &ops);
        if local != remote {
            let first = local.iter().zip(&remote).position(|(a, b)| a != b).unwrap_or(local.len().min(remote.len()));
            return Err(format!(
                "program {p} on {} host(s) diverged at output byte {first}; ops: {ops:?}",
                p % 3 + 1
            ));
        }
    }
    let hosts: Vec<usize> = managers.iter().map(|m| m.pool().len()).collect();
    for m in &managers {
        m.shutdown();
    }
    ensure!(hosts == vec![1, 2, 3], "expected pools of 1, 2 and 3 hosts, got {hosts:?}");
    Ok(format!("{PROGRAMS} programs, {ops_total} operations, byte-identical on 1, 2 and 3 hosts"))
}
