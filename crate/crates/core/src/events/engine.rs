use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::RwLock;

use thiserror::Error;

use super::statement::{Aggregate, MonitoringMetric, StatementError, ValueType, Window};
use super::{kind, MonitoringEvent};
use crate::value::{CloudHostId, CloudObjectId, Value};

/// Name under which the built-in pool utilization metric is published.
pub const UTILIZATION_METRIC: &str = "host.utilization";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("metric '{0}' already registered")]
    DuplicateMetric(String),
    #[error(transparent)]
    InvalidStatement(#[from] StatementError),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReading {
    pub value: Value,
    pub updated_at: u64,
}

/// Latest value per metric. Written by the engine, read by policies.
#[derive(Debug, Default)]
pub struct MonitoringRepository {
    rows: RwLock<HashMap<String, Option<MetricReading>>>,
}

/// Owned copy of the repository handed to policies.
pub type RepositorySnapshot = BTreeMap<String, Option<MetricReading>>;

impl MonitoringRepository {
    pub fn new() -> Self {
        Self::default()
    }

    fn create(&self, name: &str) {
        self.rows.write().unwrap().insert(name.to_string(), None);
    }

    fn write(&self, name: &str, value: Value, at: u64) {
        let mut rows = self.rows.write().unwrap();
        let row = rows.entry(name.to_string()).or_insert(None);
        if row.as_ref().is_none_or(|r| r.updated_at <= at) {
            *row = Some(MetricReading {
                value,
                updated_at: at,
            });
        }
    }

    pub fn query(&self, name: &str) -> Result<Option<MetricReading>, MetricError> {
        self.rows
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| MetricError::UnknownMetric(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.rows.read().unwrap().contains_key(name)
    }

    pub fn snapshot(&self) -> RepositorySnapshot {
        self.rows
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// One value written by the engine, in emission order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricOutput {
    pub metric: String,
    pub value: Value,
    pub at: u64,
}

#[derive(Debug, Clone, Copy)]
enum Num {
    I(i64),
    F(f64),
}

#[derive(Debug)]
enum WindowState {
    Batch { start: u64, items: Vec<Num>, count: i64 },
    Sliding { items: VecDeque<(u64, Num)> },
}

#[derive(Debug)]
struct MetricState {
    metric: MonitoringMetric,
    registered_at: u64,
    window: WindowState,
    skipped: u64,
}

impl MetricState {
    fn extract(&self, e: &MonitoringEvent) -> Option<Num> {
        if self.metric.statement.aggregate == Aggregate::Count {
            return Some(Num::I(1));
        }
        match (self.metric.value_type, e.prop(&self.metric.statement.property)?) {
            (ValueType::Int64, Value::Int64(i)) => Some(Num::I(*i)),
            (ValueType::Float64, Value::Int64(i)) => Some(Num::F(*i as f64)),
            (ValueType::Float64, Value::Float64(x)) => Some(Num::F(*x)),
            _ => None,
        }
    }

    fn aggregate<'a>(&self, items: impl Iterator<Item = &'a Num>, count: i64) -> Value {
        let agg = self.metric.statement.aggregate;
        let vt = self.metric.value_type;
        if agg == Aggregate::Count {
            return Value::Int64(count);
        }
        match vt {
            ValueType::Int64 => {
                let ints = items.map(|n| match n {
                    Num::I(i) => *i,
                    Num::F(x) => *x as i64,
                });
                match agg {
                    Aggregate::Sum => Value::Int64(ints.fold(0i64, |a, b| a.wrapping_add(b))),
                    Aggregate::Min => ints.min().map_or(Value::Null, Value::Int64),
                    Aggregate::Max => ints.max().map_or(Value::Null, Value::Int64),
                    Aggregate::Avg | Aggregate::Count => unreachable!("rejected at registration"),
                }
            }
            ValueType::Float64 => {
                let floats: Vec<f64> = items
                    .map(|n| match n {
                        Num::I(i) => *i as f64,
                        Num::F(x) => *x,
                    })
                    .collect();
                match agg {
                    Aggregate::Sum => Value::Float64(floats.iter().fold(0.0, |a, b| a + b)),
                    Aggregate::Avg if floats.is_empty() => Value::Null,
                    Aggregate::Avg => {
                        Value::Float64(floats.iter().fold(0.0, |a, b| a + b) / floats.len() as f64)
                    }
                    Aggregate::Min => floats.into_iter().reduce(f64::min).map_or(Value::Null, Value::Float64),
                    Aggregate::Max => floats.into_iter().reduce(f64::max).map_or(Value::Null, Value::Float64),
                    Aggregate::Count => unreachable!(),
                }
            }
        }
    }
}

/// Built-in metric: mean busy ratio of online hosts per time window,
/// derived from `ExecutionStarted`/`ExecutionFinished` pairs.
///
/// A host's busy time in a window is the union length of its execution
/// intervals clipped to the window (executions on one host run on distinct
/// lanes, so overlapping intervals are summed, then capped at 1.0).
#[derive(Debug)]
pub struct UtilizationTracker {
    window_ms: u64,
    start: u64,
    online: BTreeSet<CloudHostId>,
    busy: HashMap<CloudHostId, u64>,
    open: HashMap<(CloudHostId, CloudObjectId), u64>,
}

impl UtilizationTracker {
    pub fn new(window_ms: u64, start: u64) -> Self {
        assert!(window_ms > 0);
        Self {
            window_ms,
            start,
            online: BTreeSet::new(),
            busy: HashMap::new(),
            open: HashMap::new(),
        }
    }

    pub fn window_ms(&self) -> u64 {
        self.window_ms
    }

    fn observe(&mut self, e: &MonitoringEvent) {
        let Some(host) = e.host() else { return };
        match e.event_type.as_str() {
            kind::HOST_ONLINE => {
                self.online.insert(host);
            }
            kind::HOST_OFFLINE | kind::HOST_TERMINATED => {
                self.online.remove(&host);
                self.open.retain(|(h, _), _| *h != host);
            }
            kind::EXECUTION_STARTED => {
                if let Some(co) = e.object() {
                    self.open.insert((host, co), e.timestamp);
                }
            }
            kind::EXECUTION_FINISHED | kind::EXECUTION_FAILED => {
                let began = e
                    .object()
                    .and_then(|co| self.open.remove(&(host, co)))
                    .or_else(|| {
                        let d = e.prop("duration")?.as_f64()?.max(0.0) as u64;
                        Some(e.timestamp.saturating_sub(d))
                    });
                if let Some(began) = began {
                    let from = began.max(self.start);
                    *self.busy.entry(host).or_default() += e.timestamp.saturating_sub(from);
                }
            }
            _ => {}
        }
    }

    fn close_windows(&mut self, now: u64, out: &mut dyn FnMut(Value, u64)) {
        while self.start + self.window_ms <= now {
            let end = self.start + self.window_ms;
            for ((h, _), began) in &self.open {
                *self.busy.entry(*h).or_default() += end - (*began).max(self.start);
            }
            let util = if self.online.is_empty() {
                0.0
            } else {
                self.online
                    .iter()
                    .map(|h| {
                        let b = self.busy.get(h).copied().unwrap_or(0);
                        (b as f64 / self.window_ms as f64).min(1.0)
                    })
                    .sum::<f64>()
                    / self.online.len() as f64
            };
            out(Value::Float64(util), end);
            self.busy.clear();
            self.start = end;
        }
    }
}

/// Evaluates registered metrics against the event stream.
///
/// Time-batch windows are aligned to the metric's registration time and
/// close when the engine clock reaches their end; the half-open range
/// `[start, end)` is aggregated. Sliding windows re-aggregate `(now - d, now]`
/// on every matching event.
#[derive(Debug)]
pub struct MetricEngine {
    repo: std::sync::Arc<MonitoringRepository>,
    metrics: Vec<MetricState>,
    utilization: Option<UtilizationTracker>,
    outputs: Option<Vec<MetricOutput>>,
    now: u64,
}

impl MetricEngine {
    pub fn new(repo: std::sync::Arc<MonitoringRepository>) -> Self {
        Self {
            repo,
            metrics: Vec::new(),
            utilization: None,
            outputs: None,
            now: 0,
        }
    }

    /// Keeps every written value, in order, for inspection.
    pub fn record_outputs(mut self) -> Self {
        self.outputs = Some(Vec::new());
        self
    }

    pub fn take_outputs(&mut self) -> Vec<MetricOutput> {
        self.outputs.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn repository(&self) -> &std::sync::Arc<MonitoringRepository> {
        &self.repo
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn register(&mut self, metric: MonitoringMetric, now: u64) -> Result<(), MetricError> {
        metric.validate()?;
        if self.repo.contains(&metric.name) {
            return Err(MetricError::DuplicateMetric(metric.name));
        }
        let window = match metric.statement.window {
            Window::TimeBatch(_) => WindowState::Batch {
                start: now,
                items: Vec::new(),
                count: 0,
            },
            Window::Sliding(_) => WindowState::Sliding {
                items: VecDeque::new(),
            },
        };
        self.repo.create(&metric.name);
        self.metrics.push(MetricState {
            metric,
            registered_at: now,
            window,
            skipped: 0,
        });
        self.now = self.now.max(now);
        Ok(())
    }

    pub fn enable_utilization(&mut self, window_ms: u64, now: u64) -> Result<(), MetricError> {
        if self.repo.contains(UTILIZATION_METRIC) {
            return Err(MetricError::DuplicateMetric(UTILIZATION_METRIC.to_string()));
        }
        self.repo.create(UTILIZATION_METRIC);
        self.utilization = Some(UtilizationTracker::new(window_ms, now));
        Ok(())
    }

    /// Number of matching events whose property was missing or non-numeric.
    pub fn skipped(&self, name: &str) -> Option<u64> {
        self.metrics
            .iter()
            .find(|m| m.metric.name == name)
            .map(|m| m.skipped)
    }

    fn write(
        repo: &MonitoringRepository,
        outputs: &mut Option<Vec<MetricOutput>>,
        name: &str,
        value: Value,
        at: u64,
    ) {
        if let Some(o) = outputs.as_mut() {
            o.push(MetricOutput {
                metric: name.to_string(),
                value: value.clone(),
                at,
            });
        }
        repo.write(name, value, at);
    }

    /// Closes every time-batch window that ends at or before `now`.
    pub fn advance_to(&mut self, now: u64) {
        if now < self.now {
            return;
        }
        self.now = now;
        let repo = &self.repo;
        let outputs = &mut self.outputs;
        for st in &mut self.metrics {
            let d = st.metric.statement.window.duration();
            let mut closed = Vec::new();
            if let WindowState::Batch { start, items, count } = &mut st.window {
                while *start + d <= now {
                    closed.push((std::mem::take(items), *count, *start + d));
                    *count = 0;
                    *start += d;
                }
            }
            for (items, count, end) in closed {
                let v = st.aggregate(items.iter(), count);
                Self::write(repo, outputs, &st.metric.name, v, end);
            }
        }
        if let Some(u) = self.utilization.as_mut() {
            u.close_windows(now, &mut |v, at| {
                Self::write(repo, outputs, UTILIZATION_METRIC, v, at)
            });
        }
    }

    pub fn on_event(&mut self, e: &MonitoringEvent) {
        self.advance_to(e.timestamp);
        let now = self.now;
        if let Some(u) = self.utilization.as_mut() {
            u.observe(e);
        }
        let repo = &self.repo;
        let outputs = &mut self.outputs;
        for st in &mut self.metrics {
            if e.timestamp < st.registered_at || !st.metric.statement.matches(e) {
                continue;
            }
            let Some(num) = st.extract(e) else {
                st.skipped += 1;
                continue;
            };
            let d = st.metric.statement.window.duration();
            match &mut st.window {
                WindowState::Batch { items, count, .. } => {
                    items.push(num);
                    *count += 1;
                }
                WindowState::Sliding { items } => {
                    items.push_back((e.timestamp, num));
                    let cutoff = now.saturating_sub(d);
                    while items.front().is_some_and(|(t, _)| now >= d && *t <= cutoff) {
                        items.pop_front();
                    }
                    let count = items.len() as i64;
                    let snapshot: Vec<Num> = items.iter().map(|(_, n)| *n).collect();
                    let v = st.aggregate(snapshot.iter(), count);
                    Self::write(repo, outputs, &st.metric.name, v, now);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{parse_statement, EventSource};
    use std::sync::Arc;

    fn engine() -> MetricEngine {
        MetricEngine::new(Arc::new(MonitoringRepository::new())).record_outputs()
    }

    fn ev(t: &str, ts: u64, d: impl Into<Value>) -> MonitoringEvent {
        MonitoringEvent::new(t, EventSource::External)
            .with("duration", d)
            .at(ts)
    }

    fn metric(name: &str, vt: ValueType, text: &str) -> MonitoringMetric {
        MonitoringMetric::new(name, vt, parse_statement(text).unwrap())
    }

    #[test]
    fn time_batch_average() {
        let mut e = engine();
        e.register(
            metric(
                "AvgEngineSetupTime",
                ValueType::Float64,
                "SELECT avg(duration) FROM custom.EngineSetupEvent WINDOW time_batch(10000)",
            ),
            0,
        )
        .unwrap();
        assert_eq!(e.repository().query("AvgEngineSetupTime").unwrap(), None);
        for (ts, d) in [(100, 2), (5000, 4), (9999, 6)] {
            e.on_event(&ev("custom.EngineSetupEvent", ts, d as i64));
        }
        assert_eq!(e.repository().query("AvgEngineSetupTime").unwrap(), None);
        e.advance_to(10_000);
        let r = e.repository().query("AvgEngineSetupTime").unwrap().unwrap();
        assert_eq!(r.value, Value::Float64(4.0));
        assert_eq!(r.updated_at, 10_000);
    }

    #[test]
    fn empty_windows() {
        let mut e = engine();
        e.register(metric("c", ValueType::Int64, "SELECT count(*) FROM A WINDOW time_batch(10)"), 0)
            .unwrap();
        e.register(metric("s", ValueType::Float64, "SELECT sum(x) FROM A WINDOW time_batch(10)"), 0)
            .unwrap();
        e.register(metric("m", ValueType::Int64, "SELECT min(x) FROM A WINDOW time_batch(10)"), 0)
            .unwrap();
        e.advance_to(10);
        assert_eq!(e.repository().query("c").unwrap().unwrap().value, Value::Int64(0));
        assert_eq!(e.repository().query("s").unwrap().unwrap().value, Value::Float64(0.0));
        assert_eq!(e.repository().query("m").unwrap().unwrap().value, Value::Null);
    }

    #[test]
    fn boundary_event_belongs_to_next_window() {
        let mut e = engine();
        e.register(metric("c", ValueType::Int64, "SELECT count(*) FROM A WINDOW time_batch(10)"), 0)
            .unwrap();
        e.on_event(&ev("A", 10, 1i64));
        let outs = e.take_outputs();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].value, Value::Int64(0));
        e.advance_to(20);
        assert_eq!(e.take_outputs()[0].value, Value::Int64(1));
    }

    #[test]
    fn sliding_window_excludes_old_events() {
        let mut e = engine();
        e.register(metric("s", ValueType::Int64, "SELECT sum(duration) FROM A WINDOW sliding(100)"), 0)
            .unwrap();
        e.on_event(&ev("A", 0, 1i64));
        e.on_event(&ev("A", 50, 2i64));
        e.on_event(&ev("A", 100, 4i64));
        let vals: Vec<_> = e.take_outputs().into_iter().map(|o| o.value).collect();
        assert_eq!(vals, vec![Value::Int64(1), Value::Int64(3), Value::Int64(6)]);
    }

    #[test]
    fn non_numeric_properties_are_skipped() {
        let mut e = engine();
        e.register(metric("s", ValueType::Int64, "SELECT max(duration) FROM A WINDOW time_batch(10)"), 0)
            .unwrap();
        e.on_event(&ev("A", 1, "slow"));
        e.on_event(&ev("A", 2, 1.5));
        e.on_event(&ev("A", 3, 7i64));
        assert_eq!(e.skipped("s"), Some(2));
        e.advance_to(10);
        assert_eq!(e.repository().query("s").unwrap().unwrap().value, Value::Int64(7));
    }

    #[test]
    fn registration_errors() {
        let mut e = engine();
        let m = metric("x", ValueType::Int64, "SELECT count(*) FROM A WINDOW time_batch(10)");
        e.register(m.clone(), 0).unwrap();
        assert_eq!(e.register(m, 0), Err(MetricError::DuplicateMetric("x".into())));
        let bad = metric("y", ValueType::Int64, "SELECT avg(d) FROM A WINDOW time_batch(10)");
        assert!(matches!(e.register(bad, 0), Err(MetricError::InvalidStatement(_))));
        assert!(matches!(
            e.repository().query("nope"),
            Err(MetricError::UnknownMetric(_))
        ));
    }

    #[test]
    fn utilization_from_execution_pairs() {
        let mut e = engine();
        e.enable_utilization(1000, 0).unwrap();
        let h1 = CloudHostId(1);
        let h2 = CloudHostId(2);
        let co = CloudObjectId(9);
        let on = |h: CloudHostId| MonitoringEvent::new(kind::HOST_ONLINE, EventSource::Host(h));
        e.on_event(&on(h1).at(0));
        e.on_event(&on(h2).at(0));
        let started = MonitoringEvent::new(kind::EXECUTION_STARTED, EventSource::Object(co))
            .with("host", h1.to_hex())
            .at(200);
        let finished = MonitoringEvent::new(kind::EXECUTION_FINISHED, EventSource::Object(co))
            .with("host", h1.to_hex())
            .with("duration", 1600i64)
            .at(1800);
        e.on_event(&started);
        e.advance_to(1000);
        // h1 busy 800/1000, h2 idle
        let r = e.repository().query(UTILIZATION_METRIC).unwrap().unwrap();
        assert_eq!(r.value, Value::Float64(0.4));
        e.on_event(&finished);
        e.advance_to(2000);
        let r = e.repository().query(UTILIZATION_METRIC).unwrap().unwrap();
        assert_eq!(r.value, Value::Float64(0.4));
    }

    #[test]
    fn utilization_from_finished_only() {
        let mut e = engine();
        e.enable_utilization(1000, 0).unwrap();
        let h = CloudHostId(3);
        e.on_event(&MonitoringEvent::new(kind::HOST_ONLINE, EventSource::Host(h)).at(0));
        e.on_event(
            &MonitoringEvent::new(kind::EXECUTION_FINISHED, EventSource::Host(h))
                .with("duration", 900i64)
                .at(950),
        );
        e.advance_to(1000);
        assert_eq!(
            e.repository().query(UTILIZATION_METRIC).unwrap().unwrap().value,
            Value::Float64(0.9)
        );
    }
}
