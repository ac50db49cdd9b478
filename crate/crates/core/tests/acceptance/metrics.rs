//! Engine output against a brute-force re-aggregation of each log.

use elastikit::events::replay::replay_metric;
use elastikit::events::{parse_statement, EventSource, MonitoringEvent, MonitoringMetric, ValueType};
use elastikit::value::Value;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::ensure;

const LOGS: usize = 500;
const TYPES: &[&str] = &["custom.A", "custom.B", "ExecutionFinished"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Agg {
    Count,
    Sum,
    Min,
    Max,
    Avg,
}

#[derive(Debug, Clone)]
enum Cond {
    Level(&'static str, i64),
    Zone(&'static str, &'static str),
}

#[derive(Debug, Clone)]
struct Case {
    agg: Agg,
    vt: ValueType,
    event_type: &'static str,
    batch: bool,
    d: u64,
    cond: Option<Cond>,
}

impl Case {
    fn text(&self) -> String {
        let agg = match self.agg {
            Agg::Count => "count(*)",
            Agg::Sum => "sum(duration)",
            Agg::Min => "min(duration)",
            Agg::Max => "max(duration)",
            Agg::Avg => "avg(duration)",
        };
        let win = if self.batch { "time_batch" } else { "sliding" };
        let mut s = format!("SELECT {agg} FROM {} WINDOW {win}({})", self.event_type, self.d);
        match &self.cond {
            Some(Cond::Level(op, v)) => s += &format!(" WHERE level {op} {v}"),
            Some(Cond::Zone(op, z)) => s += &format!(" WHERE zone {op} '{z}'"),
            None => {}
        }
        s
    }

    fn matches(&self, e: &MonitoringEvent) -> bool {
        if e.event_type != self.event_type {
            return false;
        }
        match &self.cond {
            None => true,
            Some(Cond::Level(op, lit)) => match e.prop("level") {
                Some(Value::Int64(v)) => cmp(op, v.cmp(lit)),
                _ => false,
            },
            Some(Cond::Zone(op, lit)) => match e.prop("zone") {
                Some(Value::Text(z)) => cmp(op, z.as_str().cmp(lit)),
                _ => false,
            },
        }
    }

    /// The number this event contributes, if any.
    fn extract(&self, e: &MonitoringEvent) -> Option<f64> {
        if self.agg == Agg::Count {
            return Some(1.0);
        }
        match (self.vt, e.prop("duration")?) {
            (_, Value::Int64(i)) => Some(*i as f64),
            (ValueType::Float64, Value::Float64(x)) => Some(*x),
            _ => None,
        }
    }

    fn aggregate(&self, xs: &[f64]) -> Value {
        let int = self.vt == ValueType::Int64;
        let num = |x: f64| if int { Value::Int64(x as i64) } else { Value::Float64(x) };
        match self.agg {
            Agg::Count => Value::Int64(xs.len() as i64),
            Agg::Sum => num(xs.iter().sum()),
            Agg::Avg if xs.is_empty() => Value::Null,
            Agg::Avg => Value::Float64(xs.iter().sum::<f64>() / xs.len() as f64),
            Agg::Min => xs.iter().copied().reduce(f64::min).map_or(Value::Null, num),
            Agg::Max => xs.iter().copied().reduce(f64::max).map_or(Value::Null, num),
        }
    }

    /// Every value the metric should produce, by definition.
    fn expected(&self, log: &[MonitoringEvent], reg: u64, until: u64) -> Vec<(Value, u64)> {
        let contributing: Vec<(usize, u64, f64)> = log
            .iter()
            .enumerate()
            .filter(|(_, e)| e.timestamp >= reg && self.matches(e))
            .filter_map(|(i, e)| Some((i, e.timestamp, self.extract(e)?)))
            .collect();
        let mut out = Vec::new();
        if self.batch {
            let mut start = reg;
            while start + self.d <= until {
                let end = start + self.d;
                let xs: Vec<f64> = contributing
                    .iter()
                    .filter(|(_, t, _)| (start..end).contains(t))
                    .map(|c| c.2)
                    .collect();
                out.push((self.aggregate(&xs), end));
                start = end;
            }
        } else {
            for &(i, t, _) in &contributing {
                let xs: Vec<f64> = contributing
                    .iter()
                    .filter(|(j, tj, _)| *j <= i && (t < self.d || *tj > t - self.d))
                    .map(|c| c.2)
                    .collect();
                out.push((self.aggregate(&xs), t));
            }
        }
        out
    }
}

fn cmp(op: &str, o: std::cmp::Ordering) -> bool {
    use std::cmp::Ordering::*;
    match op {
        "==" => o == Equal,
        "!=" => o != Equal,
        "<" => o == Less,
        "<=" => o != Greater,
        ">" => o == Greater,
        _ => o != Less,
    }
}

fn random_case(rng: &mut StdRng) -> Case {
    let agg = [Agg::Count, Agg::Sum, Agg::Min, Agg::Max, Agg::Avg][rng.gen_range(0..5)];
    let vt = match agg {
        Agg::Count => ValueType::Int64,
        Agg::Avg => ValueType::Float64,
        _ if rng.gen_bool(0.5) => ValueType::Int64,
        _ => ValueType::Float64,
    };
    let ops = ["==", "!=", "<", "<=", ">", ">="];
    let cond = match rng.gen_range(0..4) {
        0 => Some(Cond::Level(ops[rng.gen_range(0..6)], rng.gen_range(0..10))),
        1 => Some(Cond::Zone(ops[rng.gen_range(0..6)], ["x", "y", "z"][rng.gen_range(0..3)])),
        _ => None,
    };
    Case {
        agg,
        vt,
        event_type: TYPES[rng.gen_range(0..TYPES.len())],
        batch: rng.gen_bool(0.5),
        d: rng.gen_range(1..5000),
        cond,
    }
}

fn random_log(rng: &mut StdRng) -> Vec<MonitoringEvent> {
    let n = rng.gen_range(0..200);
    let mut ts = 0u64;
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.8) {
                ts += rng.gen_range(0..400);
            }
            let mut e = MonitoringEvent::new(TYPES[rng.gen_range(0..TYPES.len())], EventSource::External).at(ts);
            match rng.gen_range(0..10) {
                0 => {}
                1 => e = e.with("duration", "slow"),
                2..=4 => e = e.with("duration", rng.gen_range(-1000.0..1000.0)),
                _ => e = e.with("duration", rng.gen_range(-1000i64..1000)),
            }
            if rng.gen_bool(0.9) {
                e = e.with("level", rng.gen_range(0i64..10));
            }
            if rng.gen_bool(0.9) {
                e = e.with("zone", ["x", "y", "z"][rng.gen_range(0..3)]);
            }
            e
        })
        .collect()
}

fn same(vt: ValueType, got: &Value, want: &Value) -> bool {
    match (vt, got, want) {
        (ValueType::Float64, Value::Float64(a), Value::Float64(b)) => {
            a == b || (a - b).abs() <= 1e-9 * b.abs().max(f64::MIN_POSITIVE)
        }
        _ => got == want,
    }
}

fn check(case: &Case, log: &[MonitoringEvent], reg: u64, until: u64, label: &str) -> Result<usize, String> {
    let metric = MonitoringMetric::new(
        "m",
        case.vt,
        parse_statement(&case.text()).map_err(|e| format!("{label}: '{}' did not parse: {e}", case.text()))?,
    );
    let got = replay_metric(&metric, log, reg, until).map_err(|e| format!("{label}: {e}"))?;
    let want = case.expected(log, reg, until);
    ensure!(
        got.len() == want.len(),
        "{label}: '{}' produced {} values, expected {}",
        case.text(),
        got.len(),
        want.len()
    );
    for (k, (g, (w, at))) in got.iter().zip(&want).enumerate() {
        ensure!(
            g.at == *at && same(case.vt, &g.value, w),
            "{label}: '{}' output {k}: got {:?}@{}, expected {w:?}@{at}",
            case.text(),
            g.value,
            g.at
        );
    }
    Ok(got.len())
}

/// Average setup time over 10 s batches, checked against hand-computed
/// windows.
fn engine_setup_fixture() -> Result<(), String> {
    let metric = MonitoringMetric::parse(
        "AvgEngineSetupTime",
        ValueType::Float64,
        "SELECT avg(duration) FROM custom.EngineSetupEvent WINDOW time_batch(10000)",
    )
    .map_err(|e| e.to_string())?;
    let ev = |ts: u64, d: i64| {
        MonitoringEvent::new("custom.EngineSetupEvent", EventSource::External)
            .with("duration", d)
            .at(ts)
    };
    let log = [ev(100, 2), ev(5000, 4), ev(9999, 6), ev(25_000, 10), ev(29_999, 20)];
    let got: Vec<(Value, u64)> = replay_metric(&metric, &log, 0, 30_000)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|o| (o.value, o.at))
        .collect();
    let want = vec![
        (Value::Float64(4.0), 10_000),
        (Value::Null, 20_000),
        (Value::Float64(15.0), 30_000),
    ];
    ensure!(got == want, "AvgEngineSetupTime fixture: got {got:?}, expected {want:?}");
    Ok(())
}

pub fn run() -> Result<String, String> {
    engine_setup_fixture()?;
    let mut rng = StdRng::seed_from_u64(2);
    let mut outputs = 0;
    for i in 0..LOGS {
        let log = random_log(&mut rng);
        let reg = rng.gen_range(0..2000);
        let until = log.last().map_or(0, |e| e.timestamp).max(reg) + rng.gen_range(0..10_000);
        for j in 0..3 {
            let case = random_case(&mut rng);
            outputs += check(&case, &log, reg, until, &format!("log {i} statement {j}"))?;
        }
    }
    Ok(format!("{LOGS} logs x 3 statements, {outputs} outputs matched; AvgEngineSetupTime fixture matched"))
}
