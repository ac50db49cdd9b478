//! Offline evaluation of metrics over a recorded event log.

use std::sync::Arc;

use super::engine::{MetricEngine, MetricError, MetricOutput, MonitoringRepository};
use super::statement::MonitoringMetric;
use super::MonitoringEvent;

/// Feeds `log` through a fresh engine holding only `metric`, registered at
/// `registered_at`, then advances to `until`. Returns every value the engine
/// wrote, in order.
pub fn replay_metric(
    metric: &MonitoringMetric,
    log: &[MonitoringEvent],
    registered_at: u64,
    until: u64,
) -> Result<Vec<MetricOutput>, MetricError> {
    let mut engine = MetricEngine::new(Arc::new(MonitoringRepository::new())).record_outputs();
    engine.register(metric.clone(), registered_at)?;
    for e in log {
        engine.on_event(e);
    }
    engine.advance_to(until);
    Ok(engine.take_outputs())
}

/// One replay job: a metric and the log it is evaluated over.
#[derive(Debug, Clone)]
pub struct ReplayJob {
    pub metric: MonitoringMetric,
    pub log: Vec<MonitoringEvent>,
    pub registered_at: u64,
    pub until: u64,
}

/// Replays many jobs, in parallel when the `parallel` feature is enabled.
pub fn replay_all(jobs: &[ReplayJob]) -> Vec<Result<Vec<MetricOutput>, MetricError>> {
    crate::par::map(jobs, run)
}

/// Sequential reference path for [`replay_all`].
pub fn replay_all_sequential(jobs: &[ReplayJob]) -> Vec<Result<Vec<MetricOutput>, MetricError>> {
    jobs.iter().map(run).collect()
}

fn run(job: &ReplayJob) -> Result<Vec<MetricOutput>, MetricError> {
    replay_metric(&job.metric, &job.log, job.registered_at, job.until)
}
