//! Command-line surface: the testing-as-a-service demo, the overhead
//! benchmark and event-trace tooling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::config::{BackendKind, ManagerConfig};
use crate::events::export::{event_to_line, read_log, write_log};
use crate::events::{EventSource, MonitoringEvent};
use crate::fixtures::{fib, MAX_FIB_INDEX, TEST_MASTER, TEST_WORKER};
use crate::manager::{CloudObjectHandle, Manager, ManagerError};
use crate::value::{CloudHostId, Value};

pub const BILLING_EVENT: &str = "custom.billing";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("suites line {line}: {reason}")]
    BadSuite { line: usize, reason: String },
    #[error("{0}")]
    Manager(#[from] ManagerError),
    #[error("{0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Log(#[from] crate::events::export::LogError),
    #[error("bad report: {0}")]
    Report(String),
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

// --- suites ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSuiteSpec {
    pub suite_id: String,
    pub tasks: u32,
    pub n: u32,
}

impl TestSuiteSpec {
    pub fn new(suite_id: impl Into<String>, tasks: u32, n: u32) -> Self {
        Self {
            suite_id: suite_id.into(),
            tasks,
            n,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.tasks < 1 {
            return Err(format!("suite {}: tasks must be at least 1", self.suite_id));
        }
        if !(1..=MAX_FIB_INDEX as u32).contains(&self.n) {
            return Err(format!("suite {}: n must be in [1, {MAX_FIB_INDEX}]", self.suite_id));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("suite_id".to_string(), Value::text(&self.suite_id));
        m.insert("tasks".to_string(), Value::Int64(self.tasks as i64));
        m.insert("n".to_string(), Value::Int64(self.n as i64));
        Value::Map(m)
    }

    pub fn total_tasks(suites: &[Self]) -> usize {
        suites.iter().map(|s| s.tasks as usize).sum()
    }
}

/// Parses a suites file: one `{"suite_id", "tasks", "n"}` object per line.
pub fn parse_suites(text: &str) -> Result<Vec<TestSuiteSpec>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| CliError::BadSuite { line: i + 1, reason };
        let j: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let suite_id = j
            .get("suite_id")
            .and_then(|v| v.as_str().map(str::to_string).or_else(|| v.as_i64().map(|n| n.to_string())))
            .ok_or_else(|| bad("suite_id missing".into()))?;
        let int = |k: &str| {
            j.get(k)
                .and_then(serde_json::Value::as_u64)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| bad(format!("{k} must be a non-negative integer")))
        };
        let spec = TestSuiteSpec {
            suite_id,
            tasks: int("tasks")?,
            n: int("n")?,
        };
        spec.validate().map_err(bad)?;
        out.push(spec);
    }
    Ok(out)
}

/// Desk-scale bench workload: 8 identical parallelizable suites.
pub fn default_bench_suites() -> Vec<TestSuiteSpec> {
    (0..8).map(|i| TestSuiteSpec::new(format!("suite-{i}"), 4, 27)).collect()
}

// --- demo ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task: u32,
    pub n: u32,
    pub outcome: Result<i64, String>,
    pub worker: usize,
    pub host: Option<CloudHostId>,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite_id: String,
    pub tasks: Vec<TaskResult>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.tasks.iter().all(|t| t.outcome.is_ok())
    }

    /// Tasks handled by each worker, indexed by worker.
    pub fn worker_counts(&self, workers: usize) -> Vec<usize> {
        let mut c = vec![0; workers];
        for t in &self.tasks {
            c[t.worker] += 1;
        }
        c
    }

    pub fn to_json(&self, workers: usize) -> serde_json::Value {
        let tasks: Vec<_> = self
            .tasks
            .iter()
            .map(|t| {
                let mut o = json!({
                    "task": t.task,
                    "n": t.n,
                    "worker": t.worker,
                    "host": t.host.map(CloudHostId::to_hex),
                    "duration_ms": t.duration_ms,
                });
                match &t.outcome {
                    Ok(v) => o["value"] = json!(v),
                    Err(e) => o["error"] = json!(e),
                }
                o
            })
            .collect();
        json!({
            "suite_id": self.suite_id,
            "ok": self.ok(),
            "worker_counts": self.worker_counts(workers),
            "tasks": tasks,
        })
    }
}

struct PlannedTask {
    suite_id: String,
    task: u32,
    n: u32,
}

fn planned_task(v: &Value) -> Result<PlannedTask, CliError> {
    let bad = || CliError::Protocol(format!("bad task entry {v:?}"));
    let Value::Map(m) = v else { return Err(bad()) };
    Ok(PlannedTask {
        suite_id: m.get("suite_id").and_then(Value::as_str).ok_or_else(bad)?.to_string(),
        task: m.get("task").and_then(Value::as_i64).ok_or_else(bad)? as u32,
        n: m.get("n").and_then(Value::as_i64).ok_or_else(bad)? as u32,
    })
}

/// A master object plus one worker object per host.
#[derive(Debug, Clone)]
pub struct DemoCluster {
    pub master: CloudObjectHandle,
    pub workers: Vec<CloudObjectHandle>,
}

impl DemoCluster {
    pub fn deploy(m: &Manager, workers: usize) -> Result<Self, CliError> {
        let master = m.deploy(TEST_MASTER, vec![])?;
        let workers = (0..workers.max(1))
            .map(|_| m.deploy(TEST_WORKER, vec![]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { master, workers })
    }

    /// Distinct hosts the workers run on.
    pub fn hosts(&self, m: &Manager) -> Vec<CloudHostId> {
        let mut h: Vec<_> = self.workers.iter().filter_map(|w| m.resident_host(w)).collect();
        h.sort();
        h.dedup();
        h
    }

    /// Plans the suites on the master, runs each worker's share on its own
    /// thread and returns per-suite results in input order.
    pub fn run(&self, m: &Manager, suites: &[TestSuiteSpec]) -> Result<Vec<SuiteResult>, CliError> {
        let plan = m.invoke(
            &self.master,
            "plan",
            vec![
                Value::List(suites.iter().map(TestSuiteSpec::to_value).collect()),
                Value::Int64(self.workers.len() as i64),
            ],
        )?;
        let Value::List(shares) = plan else {
            return Err(CliError::Protocol(format!("plan returned {plan:?}")));
        };
        let shares = shares
            .iter()
            .map(|s| match s {
                Value::List(tasks) => tasks.iter().map(planned_task).collect::<Result<Vec<_>, _>>(),
                other => Err(CliError::Protocol(format!("bad share {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let per_worker: Vec<Result<Vec<(String, TaskResult)>, CliError>> = std::thread::scope(|s| {
            let handles: Vec<_> = shares
                .iter()
                .zip(&self.workers)
                .enumerate()
                .map(|(wi, (share, worker))| {
                    s.spawn(move || {
                        let host = m.resident_host(worker);
                        let mut out = Vec::with_capacity(share.len());
                        for t in share {
                            let started = Instant::now();
                            let outcome = match m.invoke(worker, "run_task", vec![Value::Int64(t.n as i64)]) {
                                Ok(Value::Int64(v)) => Ok(v),
                                Ok(other) => Err(format!("unexpected result {other:?}")),
                                Err(ManagerError::Application(e)) => Err(e),
                                Err(e) => return Err(CliError::Manager(e)),
                            };
                            out.push((
                                t.suite_id.clone(),
                                TaskResult {
                                    task: t.task,
                                    n: t.n,
                                    outcome,
                                    worker: wi,
                                    host,
                                    duration_ms: started.elapsed().as_secs_f64() * 1000.0,
                                },
                            ));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
        });

        let mut by_suite: BTreeMap<String, Vec<TaskResult>> = BTreeMap::new();
        for r in per_worker {
            for (suite, t) in r? {
                by_suite.entry(suite).or_default().push(t);
            }
        }
        let mut results = Vec::with_capacity(suites.len());
        for s in suites {
            let mut tasks = by_suite.remove(&s.suite_id).unwrap_or_default();
            tasks.sort_by_key(|t| t.task);
            let result = SuiteResult {
                suite_id: s.suite_id.clone(),
                tasks,
            };
            let cpu_ms: f64 = result.tasks.iter().map(|t| t.duration_ms).sum();
            m.bus().publish(
                MonitoringEvent::new(BILLING_EVENT, EventSource::Manager)
                    .with("suite_id", s.suite_id.as_str())
                    .with("tasks", s.tasks as i64)
                    .with("cpu_ms", cpu_ms),
            );
            m.invoke(&self.master, "record", vec![Value::Map(summary_map(&result))])?;
            results.push(result);
        }
        Ok(results)
    }
}

fn summary_map(r: &SuiteResult) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("suite_id".into(), Value::text(&r.suite_id));
    m.insert("ok".into(), Value::Bool(r.ok()));
    m.insert(
        "values".into(),
        Value::List(
            r.tasks
                .iter()
                .map(|t| t.outcome.as_ref().map_or(Value::Null, |v| Value::Int64(*v)))
                .collect(),
        ),
    );
    m
}

/// Worker count implied by a policy spec when none is given.
pub fn default_workers(policy: &str) -> usize {
    policy
        .strip_prefix("roundrobin:")
        .and_then(|n| n.parse().ok())
        .unwrap_or(1)
        .max(1)
}

// --- bench -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub host_count: usize,
    pub run: usize,
    pub makespan_ms: f64,
    pub baseline_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub host_count: usize,
    pub median_makespan_ms: f64,
    pub median_baseline_ms: f64,
    pub median_overhead_ms: f64,
}

pub const ROW_HEADER: &str = "host_count,run,makespan_ms,baseline_ms";
pub const SUMMARY_HEADER: &str =
    "host_count,median_makespan_ms,median_baseline_ms,median_overhead_ms,overhead_slope_ms_per_host";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

impl BenchReport {
    /// Reads the run rows of a report; the summary section is ignored.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut rows = Vec::new();
        let mut lines = text.lines();
        match lines.next() {
            None => return Ok(Self::default()),
            Some(h) if h.trim() == ROW_HEADER => {}
            Some(h) => return Err(CliError::Report(format!("unexpected header '{h}'"))),
        }
        for line in lines {
            if line.trim().is_empty() {
                break;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CliError::Report(format!("bad row '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(BenchRow {
                host_count: f[0].parse().map_err(|_| bad())?,
                run: f[1].parse().map_err(|_| bad())?,
                makespan_ms: f[2].parse().map_err(|_| bad())?,
                baseline_ms: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }

    pub fn next_run(&self, host_count: usize) -> usize {
        self.rows
            .iter()
            .filter(|r| r.host_count == host_count)
            .map(|r| r.run + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let g = groups.entry(r.host_count).or_default();
            g.0.push(r.makespan_ms);
            g.1.push(r.baseline_ms);
            g.2.push(r.makespan_ms - r.baseline_ms);
        }
        groups
            .into_iter()
            .map(|(h, (mut a, mut b, mut o))| SummaryRow {
                host_count: h,
                median_makespan_ms: median(&mut a),
                median_baseline_ms: median(&mut b),
                median_overhead_ms: median(&mut o),
            })
            .collect()
    }

    /// Least-squares slope of median overhead against host count.
    pub fn overhead_slope(&self) -> f64 {
        let s = self.summary();
        if s.len() < 2 {
            return 0.0;
        }
        let n = s.len() as f64;
        let mx = s.iter().map(|r| r.host_count as f64).sum::<f64>() / n;
        let my = s.iter().map(|r| r.median_overhead_ms).sum::<f64>() / n;
        let sxy: f64 = s.iter().map(|r| (r.host_count as f64 - mx) * (r.median_overhead_ms - my)).sum();
        let sxx: f64 = s.iter().map(|r| (r.host_count as f64 - mx).powi(2)).sum();
        if sxx == 0.0 {
            0.0
        } else {
            sxy / sxx
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ROW_HEADER}\n");
        for r in &self.rows {
            out += &format!("{},{},{:.3},{:.3}\n", r.host_count, r.run, r.makespan_ms, r.baseline_ms);
        }
        out += &format!("\n{SUMMARY_HEADER}\n");
        let slope = self.overhead_slope();
        for s in self.summary() {
            out += &format!(
                "{},{:.3},{:.3},{:.3},{:.3}\n",
                s.host_count, s.median_makespan_ms, s.median_baseline_ms, s.median_overhead_ms, slope
            );
        }
        out
    }
}

/// Runs the workload on `workers` plain threads with no middleware.
pub fn baseline_run(workers: usize, suites: &[TestSuiteSpec]) -> f64 {
    let tasks: Vec<u32> = suites
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.n, s.tasks as usize))
        .collect();
    let started = Instant::now();
    let out = crate::par::map_on_workers(workers, &tasks, |&n| fib(n));
    std::hint::black_box(out);
    started.elapsed().as_secs_f64() * 1000.0
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub config: ManagerConfig,
    pub host_counts: Vec<usize>,
    pub runs: usize,
    pub suites: Vec<TestSuiteSpec>,
    pub out: PathBuf,
}

/// Runs the benchmark, appending rows to `opts.out`. The file is rewritten
/// after every measured run, so partial results survive a failure.
pub fn run_bench(opts: &BenchOptions, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport, CliError> {
    let mut report = match std::fs::read_to_string(&opts.out) {
        Ok(text) => BenchReport::parse(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BenchReport::default(),
        Err(e) => return Err(e.into()),
    };
    for &h in &opts.host_counts {
        let cfg = opts.config.clone().with_policy(&format!("roundrobin:{h}"));
        let m = Manager::builder(cfg).build()?;
        let cluster = DemoCluster::deploy(&m, h)?;
        // One unmeasured pass warms up every lane and connection.
        cluster.run(&m, &opts.suites[..1.min(opts.suites.len())])?;
        let first = report.next_run(h);
        for run in first..first + opts.runs {
            let started = Instant::now();
            let results = cluster.run(&m, &opts.suites)?;
            let makespan_ms = started.elapsed().as_secs_f64() * 1000.0;
            if let Some(bad) = results.iter().find(|r| !r.ok()) {
                return Err(CliError::Protocol(format!("suite {} failed during bench", bad.suite_id)));
            }
            let baseline_ms = baseline_run(h, &opts.suites);
            let row = BenchRow {
                host_count: h,
                run,
                makespan_ms,
                baseline_ms,
            };
            progress(&row);
            report.rows.push(row);
            std::fs::write(&opts.out, report.to_csv())?;
        }
        m.shutdown();
    }
    Ok(report)
}

// --- trace -----------------------------------------------------------------

/// Time-ordered events, optionally restricted to `types`.
pub fn filter_events(mut events: Vec<MonitoringEvent>, types: &[String]) -> Vec<MonitoringEvent> {
    events.sort_by_key(|e| e.timestamp);
    events.retain(|e| types.is_empty() || types.contains(&e.event_type));
    events
}

/// Checks that `order` occurs as a subsequence of the event types. With
/// `per_host`, every host that has any of the named events must show the
/// full order on its own.
pub fn check_order(events: &[MonitoringEvent], order: &[String], per_host: bool) -> Result<(), String> {
    let seq_ok = |evs: &mut dyn Iterator<Item = &MonitoringEvent>| {
        let mut next = 0;
        for e in evs {
            if next < order.len() && e.event_type == order[next] {
                next += 1;
            }
        }
        next == order.len()
    };
    if !per_host {
        return if seq_ok(&mut events.iter()) {
            Ok(())
        } else {
            Err(format!("events do not occur in order {}", order.join(",")))
        };
    }
    let mut hosts: Vec<CloudHostId> = events
        .iter()
        .filter(|e| order.contains(&e.event_type))
        .filter_map(MonitoringEvent::host)
        .collect();
    hosts.sort();
    hosts.dedup();
    for h in hosts {
        if !seq_ok(&mut events.iter().filter(|e| e.host() == Some(h))) {
            return Err(format!("host {h}: events do not occur in order {}", order.join(",")));
        }
    }
    Ok(())
}

// --- command line ----------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "elastikit", about = "Elastic cloud-object middleware", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs test suites on the testing-as-a-service demo application.
    Demo(DemoArgs),
    /// Measures makespan over host counts against a no-middleware baseline.
    Bench(BenchArgs),
    /// Prints and checks an exported event log.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Manager configuration; falls back to ELASTIKIT_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Suites file, one JSON object per line.
    #[arg(long)]
    pub suites: PathBuf,
    /// Worker objects to deploy; defaults to n for roundrobin:n, else 1.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Writes the event log here after the run.
    #[arg(long = "event-log")]
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub hosts: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Suites file; defaults to 8 suites of 4 tasks each.
    #[arg(long)]
    pub suites: Option<PathBuf>,
    /// Manager configuration; the backend is always local.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    pub log: PathBuf,
    /// Only print events of this type; repeatable.
    #[arg(long = "type")]
    pub types: Vec<String>,
    /// Fails unless these event types occur in this relative order.
    #[arg(long = "assert-order", value_delimiter = ',')]
    pub assert_order: Vec<String>,
    /// Applies --assert-order to each host separately.
    #[arg(long = "per-host")]
    pub per_host: bool,
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Demo(a) => demo(a),
        Command::Bench(a) => bench(a),
        Command::Trace(a) => trace(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("elastikit: {e}");
            ExitCode::from(2)
        }
    }
}

fn demo(a: DemoArgs) -> Result<ExitCode, CliError> {
    let cfg = ManagerConfig::resolve(a.config.as_deref())?;
    let suites = parse_suites(&std::fs::read_to_string(&a.suites)?)?;
    let workers = a.workers.unwrap_or_else(|| default_workers(&cfg.policy));
    let m = Manager::builder(cfg).build()?;
    let outcome = DemoCluster::deploy(&m, workers).and_then(|c| c.run(&m, &suites));
    m.shutdown();
    if let Some(path) = &a.event_log {
        write_log(File::create(path)?, &m.bus().events())?;
    }
    let results = outcome?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &results {
        writeln!(out, "{}", r.to_json(workers))?;
    }
    Ok(if results.iter().all(SuiteResult::ok) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn bench(a: BenchArgs) -> Result<ExitCode, CliError> {
    let mut config = ManagerConfig::resolve(a.config.as_deref())?;
    config.backend = BackendKind::Local;
    let suites = match &a.suites {
        Some(p) => parse_suites(&std::fs::read_to_string(p)?)?,
        None => default_bench_suites(),
    };
    let opts = BenchOptions {
        config,
        host_counts: a.hosts,
        runs: a.runs,
        suites,
        out: a.out,
    };
    let report = run_bench(&opts, |r| {
        eprintln!(
            "hosts={} run={} makespan_ms={:.1} baseline_ms={:.1}",
            r.host_count, r.run, r.makespan_ms, r.baseline_ms
        )
    })?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn trace(a: TraceArgs) -> Result<ExitCode, CliError> {
    let events = read_log(BufReader::new(File::open(&a.log)?))?;
    let all = filter_events(events, &[]);
    let shown = filter_events(all.clone(), &a.types);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for e in &shown {
        writeln!(out, "{}", event_to_line(e))?;
    }
    if !a.assert_order.is_empty() {
        if let Err(msg) = check_order(&all, &a.assert_order, a.per_host) {
            eprintln!("elastikit trace: {msg}");
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads suites from `path`.
pub fn load_suites(path: &Path) -> Result<Vec<TestSuiteSpec>, CliError> {
    parse_suites(&std::fs::read_to_string(path)?)
}
