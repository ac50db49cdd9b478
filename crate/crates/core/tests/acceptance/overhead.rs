//! Demo makespan over growing pools, against an in-process baseline.

use elastikit::cli::{run_bench, BenchOptions, BenchReport, TestSuiteSpec, SUMMARY_HEADER};

use crate::common;
use crate::ensure;

const HOSTS: &[usize] = &[1, 2, 4];
const RUNS: usize = 5;
const TOLERANCE: f64 = 0.10;
// Heavy enough that scheduler jitter is small next to the makespan.
const FIB_N: u32 = 31;

pub fn run() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("report.csv");
    let opts = BenchOptions {
        config: common::local_config("single"),
        host_counts: HOSTS.to_vec(),
        runs: RUNS,
        suites: (0..8).map(|i| TestSuiteSpec::new(format!("suite-{i}"), 4, FIB_N)).collect(),
        out: out.clone(),
    };
    let report = run_bench(&opts, |_| {}).map_err(|e| e.to_string())?;
    ensure!(report.rows.len() == HOSTS.len() * RUNS, "{} rows, expected {}", report.rows.len(), HOSTS.len() * RUNS);

    // The written file carries the same rows and a summary with the slope.
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let (rows, summary) = text.split_once("\n\n").ok_or("report has no summary block")?;
    ensure!(BenchReport::parse(rows).map_err(|e| e.to_string())?.rows.len() == report.rows.len(), "report rows differ");
    let mut lines = summary.lines();
    ensure!(lines.next() == Some(SUMMARY_HEADER), "summary header missing");
    let slope = report.overhead_slope();
    ensure!(slope.is_finite(), "overhead slope is {slope}");
    for line in lines {
        let reported: f64 = line.rsplit(',').next().and_then(|s| s.parse().ok()).ok_or("bad summary line")?;
        ensure!((reported - slope).abs() <= 1e-3, "summary slope {reported} != {slope}");
    }

    let s = report.summary();
    for w in s.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        ensure!(
            b.median_makespan_ms <= a.median_makespan_ms * (1.0 + TOLERANCE),
            "median makespan rose from {:.1} ms at {} hosts to {:.1} ms at {} hosts",
            a.median_makespan_ms,
            a.host_count,
            b.median_makespan_ms,
            b.host_count
        );
    }
    let medians: Vec<String> = s
        .iter()
        .map(|r| format!("{}h={:.1}ms", r.host_count, r.median_makespan_ms))
        .collect();
    Ok(format!("medians {}; overhead slope {slope:.2} ms/host", medians.join(" ")))
}
