//! Built-in classes shipped with every host daemon.
//!
//! `TestMaster` and `TestWorker` make up the testing-as-a-service demo; the
//! rest are small stateful classes used by examples and tests.

use std::collections::BTreeMap;

use crate::artifacts::Digest;
use crate::registry::{AppError, ClassRegistry, ClassSpec, CloudObject, ObjectContext};
use crate::value::{decode_value, encode_value, PassingMode::*, Value};

pub const COUNTER: &str = "Counter";
pub const KV_STORE: &str = "KvStore";
pub const ACCUMULATOR: &str = "Accumulator";
pub const FAULTY: &str = "Faulty";
pub const SLEEPER: &str = "Sleeper";
pub const GLOBAL_USER: &str = "GlobalUser";
pub const DIRECTORY: &str = "Directory";
pub const TEST_WORKER: &str = "TestWorker";
pub const TEST_MASTER: &str = "TestMaster";

/// Highest Fibonacci index a worker accepts.
pub const MAX_FIB_INDEX: i64 = 40;

pub fn default_registry() -> ClassRegistry {
    ClassRegistry::new()
        .with(counter_class())
        .with(kv_class())
        .with(accumulator_class())
        .with(faulty_class())
        .with(sleeper_class())
        .with(global_user_class())
        .with(directory_class())
        .with(worker_class())
        .with(master_class())
}

/// Naive recursive Fibonacci, the demo's CPU-bound work unit.
pub fn fib(n: u32) -> u64 {
    if n < 2 {
        n as u64
    } else {
        fib(n - 1) + fib(n - 2)
    }
}

fn int_arg(args: &[Value], i: usize) -> Result<i64, AppError> {
    args.get(i)
        .and_then(Value::as_i64)
        .ok_or_else(|| AppError::new(format!("argument {i} must be Int64")))
}

fn float_arg(args: &[Value], i: usize) -> Result<f64, AppError> {
    args.get(i)
        .and_then(Value::as_f64)
        .ok_or_else(|| AppError::new(format!("argument {i} must be numeric")))
}

fn text_arg(args: &[Value], i: usize) -> Result<String, AppError> {
    args.get(i)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| AppError::new(format!("argument {i} must be Text")))
}

fn unknown(method: &str) -> AppError {
    AppError::new(format!("no such method {method}"))
}

fn map_state(entries: Vec<(&str, Value)>) -> Vec<u8> {
    let m: BTreeMap<String, Value> = entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    encode_value(&Value::Map(m)).expect("state encodes")
}

fn read_state(bytes: &[u8]) -> Result<BTreeMap<String, Value>, AppError> {
    match decode_value(bytes).map_err(|e| AppError::new(e.to_string()))? {
        Value::Map(m) => Ok(m),
        _ => Err(AppError::new("state is not a map")),
    }
}

fn state_field<'a>(m: &'a BTreeMap<String, Value>, k: &str) -> Result<&'a Value, AppError> {
    m.get(k).ok_or_else(|| AppError::new(format!("state lacks {k}")))
}

// --- Counter ---------------------------------------------------------------

#[derive(Debug, Default)]
struct Counter {
    count: i64,
    label: String,
}

impl CloudObject for Counter {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "add" => {
                self.count = self.count.wrapping_add(int_arg(&args, 0)?);
                Ok(Value::Int64(self.count))
            }
            "get" => Ok(Value::Int64(self.count)),
            "reset" => {
                self.count = 0;
                Ok(Value::Null)
            }
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        match field {
            "count" => Some(Value::Int64(self.count)),
            "label" => Some(Value::Text(self.label.clone())),
            _ => None,
        }
    }

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError> {
        match (field, value) {
            ("count", Value::Int64(v)) => self.count = v,
            ("label", Value::Text(s)) => self.label = s,
            (f, v) => return Err(AppError::new(format!("cannot set {f} to {}", v.type_name()))),
        }
        Ok(())
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(map_state(vec![
            ("count", Value::Int64(self.count)),
            ("label", Value::Text(self.label.clone())),
        ]))
    }
}

fn counter_class() -> ClassSpec {
    ClassSpec::builder(COUNTER)
        .method("add", &[ByValue], ByValue)
        .method("get", &[], ByValue)
        .method("reset", &[], ByValue)
        .field("count", ByValue)
        .field("label", ByValue)
        .restore(|b| {
            let m = read_state(b)?;
            Ok(Box::new(Counter {
                count: state_field(&m, "count")?.as_i64().unwrap_or(0),
                label: state_field(&m, "label")?.as_str().unwrap_or("").to_string(),
            }))
        })
        .build(|args| {
            let count = match args.first() {
                None => 0,
                Some(v) => v.as_i64().ok_or_else(|| AppError::new("Counter start must be Int64"))?,
            };
            Ok(Box::new(Counter {
                count,
                label: String::new(),
            }))
        })
}

// --- KvStore ---------------------------------------------------------------

#[derive(Debug, Default)]
struct KvStore {
    name: String,
    entries: BTreeMap<String, Value>,
}

impl CloudObject for KvStore {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "put" => {
                let k = text_arg(&args, 0)?;
                let v = args.into_iter().nth(1).unwrap_or(Value::Null);
                Ok(self.entries.insert(k, v).unwrap_or(Value::Null))
            }
            "get" => Ok(self.entries.get(&text_arg(&args, 0)?).cloned().unwrap_or(Value::Null)),
            "remove" => Ok(self.entries.remove(&text_arg(&args, 0)?).unwrap_or(Value::Null)),
            "len" => Ok(Value::Int64(self.entries.len() as i64)),
            "keys" => Ok(Value::List(self.entries.keys().cloned().map(Value::Text).collect())),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        (field == "name").then(|| Value::Text(self.name.clone()))
    }

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError> {
        match (field, value) {
            ("name", Value::Text(s)) => {
                self.name = s;
                Ok(())
            }
            (f, v) => Err(AppError::new(format!("cannot set {f} to {}", v.type_name()))),
        }
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(map_state(vec![
            ("name", Value::Text(self.name.clone())),
            ("entries", Value::Map(self.entries.clone())),
        ]))
    }
}

fn kv_class() -> ClassSpec {
    ClassSpec::builder(KV_STORE)
        .ctor(&[])
        .method("put", &[ByValue, ByValue], ByValue)
        .method("get", &[ByValue], ByValue)
        .method("remove", &[ByValue], ByValue)
        .method("len", &[], ByValue)
        .method("keys", &[], ByValue)
        .field("name", ByValue)
        .restore(|b| {
            let m = read_state(b)?;
            let entries = match state_field(&m, "entries")? {
                Value::Map(e) => e.clone(),
                _ => return Err(AppError::new("entries is not a map")),
            };
            Ok(Box::new(KvStore {
                name: state_field(&m, "name")?.as_str().unwrap_or("").to_string(),
                entries,
            }))
        })
        .build(|_| Ok(Box::<KvStore>::default()))
}

// --- Accumulator -----------------------------------------------------------

#[derive(Debug)]
struct Accumulator {
    scale: f64,
    items: Vec<f64>,
}

impl CloudObject for Accumulator {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "push" => {
                self.items.push(float_arg(&args, 0)? * self.scale);
                Ok(Value::Int64(self.items.len() as i64))
            }
            "sum" => Ok(Value::Float64(self.items.iter().sum())),
            "mean" => Ok(if self.items.is_empty() {
                Value::Null
            } else {
                Value::Float64(self.items.iter().sum::<f64>() / self.items.len() as f64)
            }),
            "history" => Ok(Value::List(self.items.iter().copied().map(Value::Float64).collect())),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        (field == "scale").then_some(Value::Float64(self.scale))
    }

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError> {
        match (field, value.as_f64()) {
            ("scale", Some(s)) => {
                self.scale = s;
                Ok(())
            }
            (f, _) => Err(AppError::new(format!("cannot set {f} to {}", value.type_name()))),
        }
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(map_state(vec![
            ("scale", Value::Float64(self.scale)),
            ("items", Value::List(self.items.iter().copied().map(Value::Float64).collect())),
        ]))
    }
}

fn accumulator_class() -> ClassSpec {
    ClassSpec::builder(ACCUMULATOR)
        .ctor(&[ByValue])
        .method("push", &[ByValue], ByValue)
        .method("sum", &[], ByValue)
        .method("mean", &[], ByValue)
        .method("history", &[], ByValue)
        .field("scale", ByValue)
        .restore(|b| {
            let m = read_state(b)?;
            let items = match state_field(&m, "items")? {
                Value::List(l) => l.iter().filter_map(Value::as_f64).collect(),
                _ => return Err(AppError::new("items is not a list")),
            };
            Ok(Box::new(Accumulator {
                scale: state_field(&m, "scale")?.as_f64().unwrap_or(1.0),
                items,
            }))
        })
        .build(|args| {
            Ok(Box::new(Accumulator {
                scale: float_arg(&args, 0)?,
                items: Vec::new(),
            }))
        })
}

// --- Faulty ----------------------------------------------------------------

/// Always fails `fail`; has no snapshot support.
#[derive(Debug, Default)]
struct Faulty {
    calls: i64,
}

impl CloudObject for Faulty {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        self.calls += 1;
        match method {
            "fail" => Err(AppError::new(text_arg(&args, 0)?)),
            "echo" => Ok(args.into_iter().next().unwrap_or(Value::Null)),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        (field == "calls").then_some(Value::Int64(self.calls))
    }

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError> {
        match (field, value) {
            ("calls", Value::Int64(c)) => {
                self.calls = c;
                Ok(())
            }
            (f, v) => Err(AppError::new(format!("cannot set {f} to {}", v.type_name()))),
        }
    }
}

fn faulty_class() -> ClassSpec {
    ClassSpec::builder(FAULTY)
        .ctor(&[])
        .method("fail", &[ByValue], ByValue)
        .method("echo", &[ByValue], ByValue)
        .field("calls", ByValue)
        .build(|_| Ok(Box::<Faulty>::default()))
}

// --- Sleeper ---------------------------------------------------------------

#[derive(Debug, Default)]
struct Sleeper {
    slept_ms: i64,
}

impl CloudObject for Sleeper {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "sleep" => {
                let ms = int_arg(&args, 0)?.clamp(0, 60_000);
                std::thread::sleep(std::time::Duration::from_millis(ms as u64));
                self.slept_ms += ms;
                Ok(Value::Int64(self.slept_ms))
            }
            "total" => Ok(Value::Int64(self.slept_ms)),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, _: &str) -> Option<Value> {
        None
    }

    fn set_field(&mut self, field: &str, _: Value) -> Result<(), AppError> {
        Err(AppError::new(format!("no field {field}")))
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(self.slept_ms.to_be_bytes().to_vec())
    }
}

fn sleeper_class() -> ClassSpec {
    ClassSpec::builder(SLEEPER)
        .ctor(&[])
        .method("sleep", &[ByValue], ByValue)
        .method("total", &[], ByValue)
        .restore(|b| {
            let arr: [u8; 8] = b.try_into().map_err(|_| AppError::new("bad sleeper state"))?;
            Ok(Box::new(Sleeper {
                slept_ms: i64::from_be_bytes(arr),
            }))
        })
        .build(|_| Ok(Box::<Sleeper>::default()))
}

// --- GlobalUser ------------------------------------------------------------

/// Reads and writes manager-held globals.
#[derive(Debug, Default)]
struct GlobalUser;

impl CloudObject for GlobalUser {
    fn invoke(&mut self, method: &str, args: Vec<Value>, ctx: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "read" => ctx.global_get(&text_arg(&args, 0)?),
            "write" => {
                let name = text_arg(&args, 0)?;
                ctx.global_set(&name, args.into_iter().nth(1).unwrap_or(Value::Null))?;
                Ok(Value::Null)
            }
            // Not atomic: another writer may interleave between get and set.
            "incr" => {
                let name = text_arg(&args, 0)?;
                let cur = ctx.global_get(&name)?.as_i64().unwrap_or(0);
                ctx.global_set(&name, Value::Int64(cur + 1))?;
                Ok(Value::Int64(cur + 1))
            }
            "emit" => {
                let kind = text_arg(&args, 0)?;
                let mut props = BTreeMap::new();
                props.insert("value".to_string(), args.into_iter().nth(1).unwrap_or(Value::Null));
                ctx.emit(&kind, props);
                Ok(Value::Null)
            }
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, _: &str) -> Option<Value> {
        None
    }

    fn set_field(&mut self, field: &str, _: Value) -> Result<(), AppError> {
        Err(AppError::new(format!("no field {field}")))
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(Vec::new())
    }
}

fn global_user_class() -> ClassSpec {
    ClassSpec::builder(GLOBAL_USER)
        .ctor(&[])
        .method("read", &[ByValue], ByValue)
        .method("write", &[ByValue, ByValue], ByValue)
        .method("incr", &[ByValue], ByValue)
        .method("emit", &[ByValue, ByValue], ByValue)
        .restore(|_| Ok(Box::new(GlobalUser)))
        .build(|_| Ok(Box::new(GlobalUser)))
}

// --- Directory -------------------------------------------------------------

/// Holds references to other cloud objects.
#[derive(Debug, Default)]
struct Directory {
    entries: Vec<Value>,
}

impl CloudObject for Directory {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "register" => {
                self.entries.push(args.into_iter().next().unwrap_or(Value::Null));
                Ok(Value::Int64(self.entries.len() as i64 - 1))
            }
            "lookup" => {
                let i = int_arg(&args, 0)?;
                usize::try_from(i)
                    .ok()
                    .and_then(|i| self.entries.get(i))
                    .cloned()
                    .ok_or_else(|| AppError::new(format!("no entry {i}")))
            }
            "size" => Ok(Value::Int64(self.entries.len() as i64)),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, _: &str) -> Option<Value> {
        None
    }

    fn set_field(&mut self, field: &str, _: Value) -> Result<(), AppError> {
        Err(AppError::new(format!("no field {field}")))
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        encode_value(&Value::List(self.entries.clone())).ok()
    }
}

fn directory_class() -> ClassSpec {
    ClassSpec::builder(DIRECTORY)
        .ctor(&[])
        .method("register", &[ByReference], ByValue)
        .method("lookup", &[ByValue], ByReference)
        .method("size", &[], ByValue)
        .restore(|b| match decode_value(b).map_err(|e| AppError::new(e.to_string()))? {
            Value::List(entries) => Ok(Box::new(Directory { entries })),
            _ => Err(AppError::new("bad directory state")),
        })
        .build(|_| Ok(Box::<Directory>::default()))
}

// --- TestWorker ------------------------------------------------------------

/// Executes test tasks: each task computes `fib(n)` naively.
#[derive(Debug, Default)]
struct TestWorker {
    tasks_done: i64,
}

impl TestWorker {
    fn run(&mut self, n: i64) -> Result<u64, AppError> {
        if !(1..=MAX_FIB_INDEX).contains(&n) {
            return Err(AppError::new(format!("fib index {n} outside [1, {MAX_FIB_INDEX}]")));
        }
        self.tasks_done += 1;
        Ok(fib(n as u32))
    }
}

impl CloudObject for TestWorker {
    fn invoke(&mut self, method: &str, args: Vec<Value>, ctx: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "run_task" => Ok(Value::Int64(self.run(int_arg(&args, 0)?)? as i64)),
            // Script artifacts are whitespace-separated Fibonacci indices.
            "run_script" => {
                let digest = match args.first() {
                    Some(Value::Bytes(b)) => Digest(
                        b.as_slice()
                            .try_into()
                            .map_err(|_| AppError::new("digest must be 32 bytes"))?,
                    ),
                    _ => return Err(AppError::new("argument 0 must be a digest")),
                };
                let script = ctx.artifact(&digest)?;
                let text = std::str::from_utf8(&script).map_err(|_| AppError::new("script is not UTF-8"))?;
                let mut out = Vec::new();
                for tok in text.split_whitespace() {
                    let n: i64 = tok.parse().map_err(|_| AppError::new(format!("bad index '{tok}'")))?;
                    out.push(Value::Int64(self.run(n)? as i64));
                }
                Ok(Value::List(out))
            }
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        (field == "tasks_done").then_some(Value::Int64(self.tasks_done))
    }

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError> {
        match (field, value) {
            ("tasks_done", Value::Int64(v)) => {
                self.tasks_done = v;
                Ok(())
            }
            (f, v) => Err(AppError::new(format!("cannot set {f} to {}", v.type_name()))),
        }
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        Some(self.tasks_done.to_be_bytes().to_vec())
    }
}

fn worker_class() -> ClassSpec {
    ClassSpec::builder(TEST_WORKER)
        .ctor(&[])
        .method("run_task", &[ByValue], ByValue)
        .method("run_script", &[ByValue], ByValue)
        .field("tasks_done", ByValue)
        .restore(|b| {
            let arr: [u8; 8] = b.try_into().map_err(|_| AppError::new("bad worker state"))?;
            Ok(Box::new(TestWorker {
                tasks_done: i64::from_be_bytes(arr),
            }))
        })
        .build(|_| Ok(Box::<TestWorker>::default()))
}

// --- TestMaster ------------------------------------------------------------

/// Splits test suites into per-worker assignments and collects results.
///
/// Tasks are numbered across all suites and dealt round-robin, so worker
/// loads differ by at most one task.
#[derive(Debug, Default)]
struct TestMaster {
    results: Vec<Value>,
}

fn suite_entry(v: &Value) -> Result<(String, i64, i64), AppError> {
    let Value::Map(m) = v else {
        return Err(AppError::new("suite must be a map"));
    };
    let id = m
        .get("suite_id")
        .and_then(Value::as_str)
        .ok_or_else(|| AppError::new("suite_id missing"))?;
    let tasks = m
        .get("tasks")
        .and_then(Value::as_i64)
        .ok_or_else(|| AppError::new("tasks missing"))?;
    let n = m
        .get("n")
        .and_then(Value::as_i64)
        .ok_or_else(|| AppError::new("n missing"))?;
    if tasks < 1 {
        return Err(AppError::new(format!("suite {id}: tasks must be >= 1")));
    }
    if !(1..=MAX_FIB_INDEX).contains(&n) {
        return Err(AppError::new(format!("suite {id}: n outside [1, {MAX_FIB_INDEX}]")));
    }
    Ok((id.to_string(), tasks, n))
}

impl CloudObject for TestMaster {
    fn invoke(&mut self, method: &str, args: Vec<Value>, _: &mut dyn ObjectContext) -> Result<Value, AppError> {
        match method {
            "plan" => {
                let Some(Value::List(suites)) = args.first() else {
                    return Err(AppError::new("argument 0 must be a list of suites"));
                };
                let workers = int_arg(&args, 1)?;
                if workers < 1 {
                    return Err(AppError::new("need at least one worker"));
                }
                let mut plan = vec![Vec::new(); workers as usize];
                let mut k = 0usize;
                for s in suites {
                    let (id, tasks, n) = suite_entry(s)?;
                    for t in 0..tasks {
                        let mut task = BTreeMap::new();
                        task.insert("suite_id".to_string(), Value::Text(id.clone()));
                        task.insert("task".to_string(), Value::Int64(t));
                        task.insert("n".to_string(), Value::Int64(n));
                        plan[k % workers as usize].push(Value::Map(task));
                        k += 1;
                    }
                }
                Ok(Value::List(plan.into_iter().map(Value::List).collect()))
            }
            "record" => {
                self.results.push(args.into_iter().next().unwrap_or(Value::Null));
                Ok(Value::Int64(self.results.len() as i64))
            }
            "results" => Ok(Value::List(self.results.clone())),
            _ => Err(unknown(method)),
        }
    }

    fn get_field(&self, field: &str) -> Option<Value> {
        (field == "completed").then_some(Value::Int64(self.results.len() as i64))
    }

    fn set_field(&mut self, field: &str, _: Value) -> Result<(), AppError> {
        Err(AppError::new(format!("{field} is read-only")))
    }

    fn snapshot(&self) -> Option<Vec<u8>> {
        encode_value(&Value::List(self.results.clone())).ok()
    }
}

fn master_class() -> ClassSpec {
    ClassSpec::builder(TEST_MASTER)
        .ctor(&[])
        .method("plan", &[ByValue, ByValue], ByValue)
        .method("record", &[ByValue], ByValue)
        .method("results", &[], ByValue)
        .field("completed", ByValue)
        .restore(|b| match decode_value(b).map_err(|e| AppError::new(e.to_string()))? {
            Value::List(results) => Ok(Box::new(TestMaster { results })),
            _ => Err(AppError::new("bad master state")),
        })
        .build(|_| Ok(Box::<TestMaster>::default()))
}
