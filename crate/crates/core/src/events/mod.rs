//! Monitoring events, the consolidated event stream and the metric engine.
//!
//! Every lifecycle change in the manager or on a host is reported as a
//! [`MonitoringEvent`]. Events flow through the [`EventBus`], which stamps
//! them with the manager clock, records them, forwards them to subscribers
//! and feeds the [`MetricEngine`]. The engine evaluates registered
//! [`MonitoringMetric`]s and writes their latest values into the
//! [`MonitoringRepository`] that scaling policies read.

mod bus;
mod engine;
pub mod export;
pub mod replay;
mod statement;

use std::collections::BTreeMap;

use crate::value::{CloudHostId, CloudObjectId, Value};

pub use bus::{EmitError, EventBus, EventSubscription, DEFAULT_QUEUE_CAPACITY};
pub use engine::{
    MetricEngine, MetricError, MetricOutput, MetricReading, MonitoringRepository,
    RepositorySnapshot, UtilizationTracker, UTILIZATION_METRIC,
};
pub use statement::{
    parse_statement, Aggregate, Cmp, Filter, MetricStatement, MonitoringMetric, StatementError,
    ValueType, Window,
};

/// Predefined event types. Application events use the `custom.` prefix.
pub mod kind {
    pub const HOST_ONLINE: &str = "HostOnline";
    pub const HOST_OFFLINE: &str = "HostOffline";
    pub const HOST_PROVISION_REQUESTED: &str = "HostProvisionRequested";
    pub const HOST_TERMINATED: &str = "HostTerminatedEvent";
    pub const OBJECT_SCHEDULED: &str = "ObjectScheduledEvent";
    pub const OBJECT_DEPLOYED: &str = "ObjectDeployedEvent";
    pub const OBJECT_MIGRATED: &str = "ObjectMigratedEvent";
    pub const OBJECT_DESTROYED: &str = "ObjectDestroyedEvent";
    pub const EXECUTION_STARTED: &str = "ExecutionStarted";
    pub const EXECUTION_FINISHED: &str = "ExecutionFinished";
    pub const EXECUTION_FAILED: &str = "ExecutionFailedEvent";
    pub const POLICY_DECISION_REJECTED: &str = "PolicyDecisionRejected";
    pub const DROP_EVENT: &str = "DropEvent";

    pub const CUSTOM_PREFIX: &str = "custom.";

    pub const CATALOG: &[&str] = &[
        HOST_ONLINE,
        HOST_OFFLINE,
        HOST_PROVISION_REQUESTED,
        HOST_TERMINATED,
        OBJECT_SCHEDULED,
        OBJECT_DEPLOYED,
        OBJECT_MIGRATED,
        OBJECT_DESTROYED,
        EXECUTION_STARTED,
        EXECUTION_FINISHED,
        EXECUTION_FAILED,
        POLICY_DECISION_REJECTED,
        DROP_EVENT,
    ];

    pub fn is_valid(event_type: &str) -> bool {
        CATALOG.contains(&event_type)
            || (event_type.len() > CUSTOM_PREFIX.len() && event_type.starts_with(CUSTOM_PREFIX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventSource {
    Manager,
    Host(CloudHostId),
    Object(CloudObjectId),
    External,
}

impl EventSource {
    pub fn render(&self) -> String {
        match self {
            EventSource::Manager => "manager".to_string(),
            EventSource::Host(h) => format!("host:{h}"),
            EventSource::Object(o) => format!("object:{o}"),
            EventSource::External => "external".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "manager" => Some(EventSource::Manager),
            "external" => Some(EventSource::External),
            _ => {
                if let Some(h) = s.strip_prefix("host:") {
                    CloudHostId::parse_hex(h).map(EventSource::Host)
                } else if let Some(o) = s.strip_prefix("object:") {
                    CloudObjectId::parse_hex(o).map(EventSource::Object)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringEvent {
    pub event_type: String,
    /// Milliseconds since manager start, assigned at intake.
    pub timestamp: u64,
    pub source: EventSource,
    pub properties: BTreeMap<String, Value>,
}

impl MonitoringEvent {
    pub fn new(event_type: impl Into<String>, source: EventSource) -> Self {
        Self {
            event_type: event_type.into(),
            timestamp: 0,
            source,
            properties: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.properties.insert(key.to_string(), value.into());
        self
    }

    pub fn at(mut self, timestamp: u64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn prop(&self, key: &str) -> Option<&Value> {
        self.properties.get(key)
    }

    /// The host an event concerns: its source if emitted by a host, else
    /// its `host` property.
    pub fn host(&self) -> Option<CloudHostId> {
        if let EventSource::Host(h) = self.source {
            return Some(h);
        }
        self.prop("host")
            .and_then(Value::as_str)
            .and_then(CloudHostId::parse_hex)
    }

    pub fn object(&self) -> Option<CloudObjectId> {
        if let EventSource::Object(o) = self.source {
            return Some(o);
        }
        self.prop("co_id")
            .and_then(Value::as_str)
            .and_then(CloudObjectId::parse_hex)
    }

    pub fn is_well_formed(&self) -> bool {
        kind::is_valid(&self.event_type)
    }
}
