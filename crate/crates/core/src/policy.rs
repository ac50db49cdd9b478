//! Scaling policies: where new objects go and which hosts to release.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Arc, RwLock};
use std::time::Duration;

use thiserror::Error;

use crate::events::{RepositorySnapshot, UTILIZATION_METRIC};
use crate::value::{CloudHostId, CloudObjectDescriptor, CloudObjectId, Value};

pub const DEFAULT_DEADLINE: Duration = Duration::from_millis(1000);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostView {
    pub id: CloudHostId,
    pub endpoint: String,
    pub online: bool,
    pub resident: usize,
    pub age_ms: u64,
    pub to_next_billing_ms: u64,
}

/// Read-only pool snapshot, ordered by host id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostPoolView {
    pub hosts: Vec<HostView>,
}

impl HostPoolView {
    pub fn new(mut hosts: Vec<HostView>) -> Self {
        hosts.sort_by_key(|h| h.id);
        Self { hosts }
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn get(&self, id: CloudHostId) -> Option<&HostView> {
        self.hosts.iter().find(|h| h.id == id)
    }

    /// Fewest residents, lowest id on ties.
    pub fn least_loaded(&self) -> Option<CloudHostId> {
        self.hosts.iter().min_by_key(|h| (h.resident, h.id)).map(|h| h.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    UseExisting(CloudHostId),
    ProvisionNew,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalingDecision {
    pub placement: Placement,
    /// Enacted in order, before the placement.
    pub migrations: Vec<(CloudObjectId, CloudHostId)>,
}

impl ScalingDecision {
    pub fn place(placement: Placement) -> Self {
        Self {
            placement,
            migrations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BillingDecision {
    Keep,
    Destroy,
}

/// A planner consulted by the manager's scheduler.
///
/// Implementations must be pure in their inputs and must not hold on to
/// the pool or repository after returning.
pub trait ScalingPolicy: Send + Sync {
    fn name(&self) -> String;

    fn on_schedule(
        &self,
        desc: &CloudObjectDescriptor,
        pool: &HostPoolView,
        repo: &RepositorySnapshot,
    ) -> ScalingDecision;

    fn on_billing_boundary(&self, host: CloudHostId, pool: &HostPoolView, repo: &RepositorySnapshot)
        -> BillingDecision;
}

/// Always one host.
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleHost;

impl ScalingPolicy for SingleHost {
    fn name(&self) -> String {
        "single".into()
    }

    fn on_schedule(&self, _: &CloudObjectDescriptor, pool: &HostPoolView, _: &RepositorySnapshot) -> ScalingDecision {
        ScalingDecision::place(match pool.hosts.first() {
            Some(h) => Placement::UseExisting(h.id),
            None => Placement::ProvisionNew,
        })
    }

    fn on_billing_boundary(&self, _: CloudHostId, _: &HostPoolView, _: &RepositorySnapshot) -> BillingDecision {
        BillingDecision::Keep
    }
}

/// Grows the pool to `n` hosts, then spreads objects evenly across it.
#[derive(Debug, Clone, Copy)]
pub struct RoundRobinFixed {
    pub n: usize,
}

impl ScalingPolicy for RoundRobinFixed {
    fn name(&self) -> String {
        format!("roundrobin:{}", self.n)
    }

    fn on_schedule(&self, _: &CloudObjectDescriptor, pool: &HostPoolView, _: &RepositorySnapshot) -> ScalingDecision {
        if pool.len() < self.n.max(1) {
            return ScalingDecision::place(Placement::ProvisionNew);
        }
        ScalingDecision::place(Placement::UseExisting(pool.least_loaded().expect("non-empty pool")))
    }

    fn on_billing_boundary(&self, _: CloudHostId, _: &HostPoolView, _: &RepositorySnapshot) -> BillingDecision {
        BillingDecision::Keep
    }
}

/// Reacts to the `host.utilization` metric: provisions while utilization
/// exceeds `hi` (up to `quota` hosts) and releases empty hosts whose
/// utilization is below `lo`. A missing reading counts as zero.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdScaler {
    pub hi: f64,
    pub lo: f64,
    pub quota: usize,
}

pub fn utilization(repo: &RepositorySnapshot) -> f64 {
    repo.get(UTILIZATION_METRIC)
        .and_then(|r| r.as_ref())
        .and_then(|r| match r.value {
            Value::Null => None,
            ref v => v.as_f64(),
        })
        .unwrap_or(0.0)
}

impl ScalingPolicy for ThresholdScaler {
    fn name(&self) -> String {
        format!("threshold:{},{}", self.hi, self.lo)
    }

    fn on_schedule(&self, _: &CloudObjectDescriptor, pool: &HostPoolView, repo: &RepositorySnapshot) -> ScalingDecision {
        let Some(least) = pool.least_loaded() else {
            return ScalingDecision::place(Placement::ProvisionNew);
        };
        if utilization(repo) > self.hi && pool.len() < self.quota {
            return ScalingDecision::place(Placement::ProvisionNew);
        }
        ScalingDecision::place(Placement::UseExisting(least))
    }

    fn on_billing_boundary(&self, host: CloudHostId, pool: &HostPoolView, repo: &RepositorySnapshot) -> BillingDecision {
        let idle = pool.get(host).is_some_and(|h| h.resident == 0);
        if idle && utilization(repo) < self.lo {
            BillingDecision::Destroy
        } else {
            BillingDecision::Keep
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy did not answer within {0:?}")]
    Timeout(Duration),
    #[error("policy panicked: {0}")]
    Panic(String),
    #[error("policy decision invalid: {0}")]
    Invalid(String),
}

/// Runs policy callbacks under a deadline on a helper thread.
#[derive(Clone)]
pub struct PolicyRunner {
    policy: Arc<dyn ScalingPolicy>,
    deadline: Duration,
}

impl std::fmt::Debug for PolicyRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyRunner")
            .field("policy", &self.policy.name())
            .field("deadline", &self.deadline)
            .finish()
    }
}

impl PolicyRunner {
    pub fn new(policy: Arc<dyn ScalingPolicy>) -> Self {
        Self::with_deadline(policy, DEFAULT_DEADLINE)
    }

    pub fn with_deadline(policy: Arc<dyn ScalingPolicy>, deadline: Duration) -> Self {
        Self { policy, deadline }
    }

    pub fn policy(&self) -> &Arc<dyn ScalingPolicy> {
        &self.policy
    }

    fn run<R: Send + 'static>(
        &self,
        f: impl FnOnce(&dyn ScalingPolicy) -> R + Send + 'static,
    ) -> Result<R, PolicyError> {
        let (tx, rx) = mpsc::channel();
        let policy = self.policy.clone();
        std::thread::Builder::new()
            .name("policy".into())
            .spawn(move || {
                let r = catch_unwind(AssertUnwindSafe(|| f(policy.as_ref())));
                let _ = tx.send(r);
            })
            .map_err(|e| PolicyError::Panic(e.to_string()))?;
        match rx.recv_timeout(self.deadline) {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(p)) => Err(PolicyError::Panic(
                p.downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            )),
            Err(_) => Err(PolicyError::Timeout(self.deadline)),
        }
    }

    pub fn schedule(
        &self,
        desc: &CloudObjectDescriptor,
        pool: &HostPoolView,
        repo: &RepositorySnapshot,
    ) -> Result<ScalingDecision, PolicyError> {
        let (desc, pool, repo) = (desc.clone(), pool.clone(), repo.clone());
        self.run(move |p| p.on_schedule(&desc, &pool, &repo))
    }

    /// Timeouts and panics count as `Keep`.
    pub fn billing(&self, host: CloudHostId, pool: &HostPoolView, repo: &RepositorySnapshot) -> BillingDecision {
        let (pool, repo) = (pool.clone(), repo.clone());
        self.run(move |p| p.on_billing_boundary(host, &pool, &repo))
            .unwrap_or_else(|e| {
                log::warn!("billing decision for {host} defaulted to Keep: {e}");
                BillingDecision::Keep
            })
    }
}

type PolicyFactory = Arc<dyn Fn(&str, usize) -> Result<Arc<dyn ScalingPolicy>, String> + Send + Sync>;

/// Policies selectable by name from configuration. `name:args` passes
/// `args` and the configured host quota to the factory.
#[derive(Clone)]
pub struct PolicyCatalog {
    factories: Arc<RwLock<HashMap<String, PolicyFactory>>>,
}

impl std::fmt::Debug for PolicyCatalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<_> = self.factories.read().unwrap().keys().cloned().collect();
        names.sort();
        f.debug_struct("PolicyCatalog").field("names", &names).finish()
    }
}

impl Default for PolicyCatalog {
    fn default() -> Self {
        let c = Self {
            factories: Arc::new(RwLock::new(HashMap::new())),
        };
        c.register("single", |_, _| Ok(Arc::new(SingleHost)));
        c.register("roundrobin", |args, _| {
            let n = args.trim().parse::<usize>().map_err(|_| format!("bad host count '{args}'"))?;
            if n == 0 {
                return Err("roundrobin needs at least one host".into());
            }
            Ok(Arc::new(RoundRobinFixed { n }))
        });
        c.register("threshold", |args, max_hosts| {
            let parts: Vec<f64> = args
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad threshold '{p}'")))
                .collect::<Result<_, _>>()?;
            let [hi, lo] = parts[..] else {
                return Err(format!("threshold takes hi,lo, got '{args}'"));
            };
            if !(lo <= hi) {
                return Err(format!("lo {lo} exceeds hi {hi}"));
            }
            Ok(Arc::new(ThresholdScaler {
                hi,
                lo,
                quota: max_hosts,
            }))
        });
        c
    }
}

impl PolicyCatalog {
    pub fn register(
        &self,
        name: &str,
        f: impl Fn(&str, usize) -> Result<Arc<dyn ScalingPolicy>, String> + Send + Sync + 'static,
    ) {
        self.factories.write().unwrap().insert(name.to_string(), Arc::new(f));
    }

    pub fn build(&self, spec: &str, max_hosts: usize) -> Result<Arc<dyn ScalingPolicy>, String> {
        let (name, args) = spec.split_once(':').unwrap_or((spec, ""));
        let f = self
            .factories
            .read()
            .unwrap()
            .get(name.trim())
            .cloned()
            .ok_or_else(|| format!("unknown policy '{name}'"))?;
        f(args, max_hosts)
    }
}
