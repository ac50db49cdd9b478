//! The cloud manager: schedules objects through the scaling policy,
//! enacts provisioning, migration and release, and proxies calls.
//!
//! Scheduling, migration, destruction and billing ticks are serialized by
//! one scheduler lock, so every policy sees a pool consistent with the
//! order in which decisions were enacted. Invocations run concurrently and
//! only wait while their object is migrating.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::artifacts::{ArtifactError, Digest};
use crate::backend::{
    Backend, BackendError, HostState, LocalBackend, LocalOptions, SimOptions, SimulatedBackend,
};
use crate::clock::{Clock, VirtualClock, WallClock};
use crate::config::{BackendKind, ManagerConfig};
use crate::events::{kind, EventBus, EventSource, MetricError, MonitoringEvent};
use crate::policy::{BillingDecision, HostPoolView, HostView, Placement, PolicyCatalog, PolicyError, PolicyRunner};
use crate::registry::ClassRegistry;
use crate::services::{CallbackServer, ManagerServices};
use crate::value::{CloudHostId, CloudObjectDescriptor, CloudObjectId, IdGenerator, ObjectState, Value};
use crate::wire::{ErrorCode, Message, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManagerError {
    #[error("class '{0}' is not registered")]
    UnknownClass(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("provisioning failed: {0}")]
    ProvisionFailed(#[from] BackendError),
    #[error("deploy failed ({0:?}): {1}")]
    DeployFailed(ErrorCode, String),
    #[error("object {0} has been destroyed")]
    ObjectDestroyed(CloudObjectId),
    #[error("host {0} is unreachable")]
    HostUnreachable(CloudHostId),
    #[error("application error: {0}")]
    Application(String),
    #[error("remote error ({0:?}): {1}")]
    Remote(ErrorCode, String),
    #[error("object {0} is not quiescent")]
    NotQuiescent(CloudObjectId),
    #[error("class of {0} does not support migration")]
    SnapshotUnsupported(CloudObjectId),
    #[error("destination {0} is unreachable")]
    DestUnreachable(CloudHostId),
    #[error("unknown host {0}")]
    UnknownHost(CloudHostId),
    #[error("clock can only be advanced on the simulated backend")]
    NotSimulated,
    #[error("artifact error: {0}")]
    Artifact(#[from] ArtifactError),
    #[error("metric error: {0}")]
    Metric(#[from] MetricError),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ManagerError>;

/// Typed reference to a deployed object. Valid until destroyed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CloudObjectHandle {
    pub id: CloudObjectId,
    pub class_name: String,
}

impl CloudObjectHandle {
    /// The by-reference form for passing this object as an argument.
    pub fn as_ref_value(&self) -> Value {
        Value::Ref(self.id)
    }
}

struct ObjectSlot {
    desc: CloudObjectDescriptor,
    in_flight: usize,
}

struct ObjectEntry {
    slot: Mutex<ObjectSlot>,
    changed: Condvar,
}

#[derive(Debug, Default)]
struct HostEntry {
    residents: BTreeSet<CloudObjectId>,
    ticks_fired: u64,
    retired: bool,
}

struct Inner {
    services: Arc<ManagerServices>,
    bus: EventBus,
    backend: Arc<dyn Backend>,
    registry: Arc<ClassRegistry>,
    runner: PolicyRunner,
    ids: IdGenerator,
    sched: Mutex<()>,
    objects: RwLock<HashMap<CloudObjectId, Arc<ObjectEntry>>>,
    hosts: Mutex<BTreeMap<CloudHostId, HostEntry>>,
    host_size: String,
    stopping: AtomicBool,
}

pub struct Manager {
    inner: Arc<Inner>,
    callback: Mutex<Option<CallbackServer>>,
    timer: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for Manager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Manager")
            .field("backend", &self.inner.backend.name())
            .field("policy", &self.inner.runner)
            .finish()
    }
}

/// Builds a [`Manager`] from a [`ManagerConfig`].
pub struct ManagerBuilder {
    config: ManagerConfig,
    registry: Arc<ClassRegistry>,
    catalog: PolicyCatalog,
    policy: Option<Arc<dyn crate::policy::ScalingPolicy>>,
}

impl ManagerBuilder {
    pub fn registry(mut self, registry: ClassRegistry) -> Self {
        self.registry = Arc::new(registry);
        self
    }

    pub fn catalog(mut self, catalog: PolicyCatalog) -> Self {
        self.catalog = catalog;
        self
    }

    /// Uses `policy` instead of the one named in the configuration.
    pub fn policy(mut self, policy: Arc<dyn crate::policy::ScalingPolicy>) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn build(self) -> Result<Manager> {
        let cfg = self.config;
        let policy = match self.policy {
            Some(p) => p,
            None => self
                .catalog
                .build(&cfg.policy, cfg.max_hosts)
                .map_err(ManagerError::Config)?,
        };
        let (clock, virtual_clock): (Arc<dyn Clock>, Option<Arc<VirtualClock>>) = match cfg.backend {
            BackendKind::Simulated => {
                let vc = Arc::new(VirtualClock::new());
                (vc.clone(), Some(vc))
            }
            BackendKind::Local => (Arc::new(WallClock::new()), None),
        };
        let bus = EventBus::new(clock.clone());
        bus.enable_utilization(cfg.utilization_window_ms)?;
        let services = ManagerServices::new(bus.clone(), self.registry.clone());

        let mut callback = None;
        let backend: Arc<dyn Backend> = match cfg.backend {
            BackendKind::Simulated => Arc::new(SimulatedBackend::new(
                SimOptions {
                    billing_time_unit_ms: cfg.billing_time_unit_ms,
                    startup_delay_ms: cfg.startup_delay_ms,
                    max_hosts: cfg.max_hosts,
                },
                virtual_clock.expect("simulated clock"),
                services.clone(),
            )),
            BackendKind::Local => {
                let server = CallbackServer::start(&cfg.listen_callback, services.clone())
                    .map_err(|e| ManagerError::Config(format!("cannot listen on {}: {e}", cfg.listen_callback)))?;
                let wall = Arc::new(WallClock::new());
                let backend = LocalBackend::new(
                    LocalOptions {
                        billing_time_unit_ms: cfg.billing_time_unit_ms,
                        max_hosts: cfg.max_hosts,
                        hostd_path: cfg.hostd_path.clone(),
                        callback: server.addr().to_string(),
                    },
                    wall,
                    services.clone(),
                )?;
                callback = Some(server);
                Arc::new(backend)
            }
        };

        let inner = Arc::new(Inner {
            services,
            bus,
            backend,
            registry: self.registry,
            runner: PolicyRunner::with_deadline(policy, cfg.policy_deadline),
            ids: IdGenerator::new(),
            sched: Mutex::new(()),
            objects: RwLock::new(HashMap::new()),
            hosts: Mutex::new(BTreeMap::new()),
            host_size: cfg.host_size.clone(),
            stopping: AtomicBool::new(false),
        });

        let timer = (cfg.backend == BackendKind::Local).then(|| {
            let inner = inner.clone();
            std::thread::Builder::new()
                .name("billing-timer".into())
                .spawn(move || billing_timer(inner))
                .expect("spawn billing timer")
        });

        Ok(Manager {
            inner,
            callback: Mutex::new(callback),
            timer: Mutex::new(timer),
        })
    }
}

fn billing_timer(inner: Arc<Inner>) {
    while !inner.stopping.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(20));
        inner.bus.tick();
        let now = inner.backend.clock().now_ms();
        for id in inner.due_boundaries(now) {
            if inner.stopping.load(Ordering::SeqCst) {
                return;
            }
            let _guard = inner.sched.lock().unwrap();
            inner.billing_tick_locked(id);
        }
    }
}

fn remote_error(code: ErrorCode, detail: String) -> ManagerError {
    match code {
        ErrorCode::ApplicationError => ManagerError::Application(detail),
        c => ManagerError::Remote(c, detail),
    }
}

impl Inner {
    fn now(&self) -> u64 {
        self.backend.clock().now_ms()
    }

    fn entry(&self, id: CloudObjectId) -> Result<Arc<ObjectEntry>> {
        self.objects
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or(ManagerError::ObjectDestroyed(id))
    }

    /// Hosts whose next billing boundary is at or before `now`; marks each
    /// boundary as fired.
    fn due_boundaries(&self, now: u64) -> Vec<CloudHostId> {
        let btu = self.backend.billing_time_unit_ms().max(1);
        let mut hosts = self.hosts.lock().unwrap();
        let mut due = Vec::new();
        for rec in self.backend.records() {
            let Some(h) = hosts.get_mut(&rec.id) else { continue };
            if h.retired {
                continue;
            }
            let crossed = now.saturating_sub(rec.provisioned_at) / btu;
            if crossed > h.ticks_fired {
                h.ticks_fired = crossed;
                if rec.state == HostState::Online {
                    due.push(rec.id);
                }
            }
        }
        due
    }

    /// Earliest unfired boundary over all hosts, as `(time, host)`.
    fn next_boundary(&self) -> Option<(u64, CloudHostId)> {
        let btu = self.backend.billing_time_unit_ms().max(1);
        let hosts = self.hosts.lock().unwrap();
        self.backend
            .records()
            .into_iter()
            .filter_map(|rec| {
                let h = hosts.get(&rec.id).filter(|h| !h.retired)?;
                Some((rec.provisioned_at + (h.ticks_fired + 1) * btu, rec.id))
            })
            .min()
    }

    fn pool_view(&self) -> HostPoolView {
        let now = self.now();
        let hosts = self.hosts.lock().unwrap();
        HostPoolView::new(
            self.backend
                .records()
                .into_iter()
                .filter(|r| matches!(r.state, HostState::Starting | HostState::Online))
                .filter_map(|r| {
                    let h = hosts.get(&r.id).filter(|h| !h.retired)?;
                    let btu = r.billing_time_unit.max(1);
                    let age = now.saturating_sub(r.provisioned_at);
                    Some(HostView {
                        id: r.id,
                        endpoint: r.endpoint.clone(),
                        online: r.state == HostState::Online,
                        resident: h.residents.len(),
                        age_ms: age,
                        to_next_billing_ms: btu - age % btu,
                    })
                })
                .collect(),
        )
    }

    fn settle_metrics(&self) {
        self.bus.tick();
        self.bus.flush();
    }

    fn provision_locked(&self) -> Result<CloudHostId> {
        let id = self.ids.next_host();
        self.hosts.lock().unwrap().insert(id, HostEntry::default());
        match self.backend.provision(id, &self.host_size) {
            Ok(_) => Ok(id),
            Err(e) => {
                self.hosts.lock().unwrap().remove(&id);
                Err(e.into())
            }
        }
    }

    /// Steps virtual time to `target`, completing startups and firing
    /// billing ticks in time order (startups first at equal times, then
    /// billing in host-id order).
    fn advance_locked(&self, target: u64) -> Result<()> {
        let sim = self.backend.as_simulated().ok_or(ManagerError::NotSimulated)?;
        loop {
            let startup = sim.next_startup().map(|(t, _)| t);
            let boundary = self.next_boundary().map(|(t, _)| t);
            let next = match (startup, boundary) {
                (Some(a), Some(b)) => a.min(b),
                (a, b) => match a.or(b) {
                    Some(t) => t,
                    None => break,
                },
            };
            if next > target {
                break;
            }
            sim.virtual_clock().set(next);
            sim.complete_startups();
            self.bus.tick();
            for id in self.due_boundaries(next) {
                self.billing_tick_locked(id);
            }
        }
        sim.virtual_clock().set(target);
        self.bus.tick();
        Ok(())
    }

    fn wait_online_locked(&self, host: CloudHostId) -> Result<()> {
        loop {
            match self.backend.record(host).map(|r| r.state) {
                Some(HostState::Online) => return Ok(()),
                Some(HostState::Starting) => {
                    let sim = self.backend.as_simulated().ok_or(ManagerError::HostUnreachable(host))?;
                    let (ready, _) = sim.next_startup().ok_or(ManagerError::HostUnreachable(host))?;
                    self.advance_locked(ready)?;
                }
                _ => return Err(ManagerError::HostUnreachable(host)),
            }
        }
    }

    fn billing_tick_locked(&self, host: CloudHostId) {
        match self.hosts.lock().unwrap().get(&host) {
            Some(h) if !h.retired => {}
            _ => return,
        }
        if self.backend.record(host).map(|r| r.state) != Some(HostState::Online) {
            return;
        }
        self.settle_metrics();
        let pool = self.pool_view();
        let repo = self.bus.repository().snapshot();
        if self.runner.billing(host, &pool, &repo) == BillingDecision::Keep {
            return;
        }
        let residents = self.hosts.lock().unwrap().get(&host).map_or(0, |h| h.residents.len());
        if residents > 0 {
            self.bus.publish(
                MonitoringEvent::new(kind::POLICY_DECISION_REJECTED, EventSource::Manager)
                    .with("host", host.to_hex())
                    .with("decision", "Destroy")
                    .with("residents", residents as i64),
            );
            return;
        }
        self.retire_locked(host);
    }

    fn retire_locked(&self, host: CloudHostId) {
        if let Some(h) = self.hosts.lock().unwrap().get_mut(&host) {
            h.retired = true;
        }
        if let Err(e) = self.backend.terminate(host) {
            log::warn!("terminating {host}: {e}");
        }
    }

    fn migrate_locked(&self, co: CloudObjectId, dest: CloudHostId) -> Result<()> {
        let entry = self.entry(co)?;
        let started = Instant::now();
        let (source, desc) = {
            let mut slot = entry.slot.lock().unwrap();
            if slot.desc.state != ObjectState::Deployed {
                return Err(ManagerError::ObjectDestroyed(co));
            }
            let source = slot.desc.resident_on.expect("deployed objects are resident");
            if source == dest {
                return Ok(());
            }
            slot.desc.state = ObjectState::Migrating;
            while slot.in_flight > 0 {
                slot = entry.changed.wait(slot).unwrap();
            }
            (source, slot.desc.clone())
        };
        let restore_state = |entry: &ObjectEntry| {
            let mut slot = entry.slot.lock().unwrap();
            slot.desc.state = ObjectState::Deployed;
            entry.changed.notify_all();
        };
        let result = self.transfer(co, source, dest, desc);
        match result {
            Ok(()) => {
                {
                    let mut hosts = self.hosts.lock().unwrap();
                    if let Some(h) = hosts.get_mut(&source) {
                        h.residents.remove(&co);
                    }
                    hosts.entry(dest).or_default().residents.insert(co);
                }
                {
                    let mut slot = entry.slot.lock().unwrap();
                    slot.desc.resident_on = Some(dest);
                    slot.desc.state = ObjectState::Deployed;
                    entry.changed.notify_all();
                }
                self.bus.publish(
                    MonitoringEvent::new(kind::OBJECT_MIGRATED, EventSource::Object(co))
                        .with("co_id", co.to_hex())
                        .with("source", source.to_hex())
                        .with("dest", dest.to_hex())
                        .with("host", dest.to_hex())
                        .with("duration", started.elapsed().as_millis() as i64),
                );
                Ok(())
            }
            Err(e) => {
                restore_state(&entry);
                Err(e)
            }
        }
    }

    fn transfer(
        &self,
        co: CloudObjectId,
        source: CloudHostId,
        dest: CloudHostId,
        mut desc: CloudObjectDescriptor,
    ) -> Result<()> {
        let dest_ok = self
            .hosts
            .lock()
            .unwrap()
            .get(&dest)
            .is_some_and(|h| !h.retired);
        let dest_link = self
            .backend
            .link(dest)
            .filter(|l| dest_ok && l.is_alive())
            .ok_or(ManagerError::DestUnreachable(dest))?;
        let src_link = self.backend.link(source).ok_or(ManagerError::HostUnreachable(source))?;

        let state = match src_link.request(Message::SnapshotCO { co_id: co }) {
            Ok(Message::Ok {
                value: Value::Bytes(b),
            }) => b,
            Ok(Message::Err {
                code: ErrorCode::NotQuiescent,
                ..
            }) => return Err(ManagerError::NotQuiescent(co)),
            Ok(Message::Err {
                code: ErrorCode::SnapshotUnsupported,
                ..
            }) => return Err(ManagerError::SnapshotUnsupported(co)),
            Ok(Message::Err { code, detail }) => return Err(remote_error(code, detail)),
            Ok(other) => return Err(ManagerError::Remote(ErrorCode::Malformed, format!("{other:?}"))),
            Err(_) => return Err(ManagerError::HostUnreachable(source)),
        };
        desc.state = ObjectState::Migrating;
        match dest_link.request(Message::RestoreCO { descriptor: desc, state }) {
            Ok(Message::Ok { .. }) => {}
            Ok(Message::Err { code, detail }) => return Err(remote_error(code, detail)),
            Ok(other) => return Err(ManagerError::Remote(ErrorCode::Malformed, format!("{other:?}"))),
            Err(_) => return Err(ManagerError::DestUnreachable(dest)),
        }
        match src_link.request(Message::DestroyCO { co_id: co }) {
            Ok(Message::Ok { .. }) => {}
            // The copy on dest is authoritative; a stale source copy only
            // costs memory until the host goes away.
            other => log::warn!("removing {co} from {source} after migration: {other:?}"),
        }
        Ok(())
    }

    fn destroy_locked(&self, co: CloudObjectId) -> Result<()> {
        let entry = self.entry(co)?;
        let host = {
            let mut slot = entry.slot.lock().unwrap();
            if slot.desc.state == ObjectState::Destroyed {
                return Err(ManagerError::ObjectDestroyed(co));
            }
            let host = slot.desc.resident_on.expect("deployed objects are resident");
            slot.desc.state = ObjectState::Destroyed;
            slot.desc.resident_on = None;
            entry.changed.notify_all();
            host
        };
        if let Some(h) = self.hosts.lock().unwrap().get_mut(&host) {
            h.residents.remove(&co);
        }
        let link = self.backend.link(host).ok_or(ManagerError::HostUnreachable(host))?;
        let reply = link.request(Message::DestroyCO { co_id: co });
        self.bus.publish(
            MonitoringEvent::new(kind::OBJECT_DESTROYED, EventSource::Object(co))
                .with("co_id", co.to_hex())
                .with("host", host.to_hex()),
        );
        match reply {
            Ok(Message::Ok { .. }) => Ok(()),
            Ok(Message::Err { code, detail }) => Err(remote_error(code, detail)),
            Ok(other) => Err(ManagerError::Remote(ErrorCode::Malformed, format!("{other:?}"))),
            Err(_) => Err(ManagerError::HostUnreachable(host)),
        }
    }

    /// Routes one request to the object's current host, waiting out any
    /// migration in progress.
    fn call(&self, co: CloudObjectId, m: Message, method: &str) -> Result<Value> {
        let entry = self.entry(co)?;
        let host = {
            let mut slot = entry.slot.lock().unwrap();
            while matches!(slot.desc.state, ObjectState::Migrating | ObjectState::Scheduling) {
                slot = entry.changed.wait(slot).unwrap();
            }
            if slot.desc.state == ObjectState::Destroyed {
                return Err(ManagerError::ObjectDestroyed(co));
            }
            slot.in_flight += 1;
            slot.desc.resident_on.expect("deployed objects are resident")
        };
        let reply = match self.backend.link(host) {
            Some(link) => link.request(m),
            None => Err(WireError::ConnectionClosed),
        };
        {
            let mut slot = entry.slot.lock().unwrap();
            slot.in_flight -= 1;
            entry.changed.notify_all();
        }
        match reply {
            Ok(Message::Ok { value }) => Ok(value),
            Ok(Message::Err { code, detail }) => Err(remote_error(code, detail)),
            Ok(other) => Err(ManagerError::Remote(ErrorCode::Malformed, format!("{other:?}"))),
            Err(e) => {
                self.bus.publish(
                    MonitoringEvent::new(kind::EXECUTION_FAILED, EventSource::Object(co))
                        .with("co_id", co.to_hex())
                        .with("host", host.to_hex())
                        .with("method", method)
                        .with("error", format!("host unreachable: {e}")),
                );
                Err(ManagerError::HostUnreachable(host))
            }
        }
    }
}

impl Manager {
    pub fn builder(config: ManagerConfig) -> ManagerBuilder {
        ManagerBuilder {
            config,
            registry: Arc::new(crate::fixtures::default_registry()),
            catalog: PolicyCatalog::default(),
            policy: None,
        }
    }

    pub fn bus(&self) -> &EventBus {
        &self.inner.bus
    }

    pub fn services(&self) -> &Arc<ManagerServices> {
        &self.inner.services
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn registry(&self) -> &Arc<ClassRegistry> {
        &self.inner.registry
    }

    pub fn now_ms(&self) -> u64 {
        self.inner.now()
    }

    pub fn callback_addr(&self) -> Option<std::net::SocketAddr> {
        self.callback.lock().unwrap().as_ref().map(CallbackServer::addr)
    }

    /// Current pool, as policies see it.
    pub fn pool(&self) -> HostPoolView {
        self.inner.pool_view()
    }

    pub fn descriptor(&self, handle: &CloudObjectHandle) -> Option<CloudObjectDescriptor> {
        let e = self.inner.objects.read().unwrap().get(&handle.id).cloned()?;
        let d = e.slot.lock().unwrap().desc.clone();
        Some(d)
    }

    pub fn resident_host(&self, handle: &CloudObjectHandle) -> Option<CloudHostId> {
        self.descriptor(handle)?.resident_on
    }

    /// Schedules and deploys a new object.
    pub fn deploy(&self, class_name: &str, ctor_args: Vec<Value>) -> Result<CloudObjectHandle> {
        let inner = &self.inner;
        if inner.registry.get(class_name).is_none() {
            return Err(ManagerError::UnknownClass(class_name.to_string()));
        }
        let _guard = inner.sched.lock().unwrap();
        let id = inner.ids.next_object();
        let mut desc = CloudObjectDescriptor::scheduling(id, class_name);

        inner.settle_metrics();
        let pool = inner.pool_view();
        let repo = inner.bus.repository().snapshot();
        let decision = inner.runner.schedule(&desc, &pool, &repo)?;

        if let Placement::UseExisting(h) = decision.placement {
            if pool.get(h).is_none() {
                return Err(PolicyError::Invalid(format!("host {h} is not in the pool")).into());
            }
        }
        for (co, dest) in &decision.migrations {
            if pool.get(*dest).is_none() {
                return Err(PolicyError::Invalid(format!("migration target {dest} is not in the pool")).into());
            }
            if !inner.objects.read().unwrap().contains_key(co) {
                return Err(PolicyError::Invalid(format!("migration of unknown object {co}")).into());
            }
        }
        for (co, dest) in decision.migrations {
            inner.migrate_locked(co, dest)?;
        }

        let (host, fresh) = match decision.placement {
            Placement::UseExisting(h) => (h, false),
            Placement::ProvisionNew => (inner.provision_locked()?, true),
        };
        let rollback = |e: ManagerError| {
            let empty = inner.hosts.lock().unwrap().get(&host).is_some_and(|h| h.residents.is_empty());
            if fresh && empty {
                inner.retire_locked(host);
            }
            e
        };
        inner.wait_online_locked(host).map_err(rollback)?;
        let link = inner.backend.link(host).ok_or(ManagerError::HostUnreachable(host)).map_err(rollback)?;

        inner.bus.publish(
            MonitoringEvent::new(kind::OBJECT_SCHEDULED, EventSource::Manager)
                .with("co_id", id.to_hex())
                .with("host", host.to_hex())
                .with("class", class_name),
        );
        let reply = link.request(Message::DeployCO {
            descriptor: desc.clone(),
            ctor_args,
        });
        match reply {
            Ok(Message::Ok { .. }) => {}
            Ok(Message::Err { code, detail }) => return Err(rollback(ManagerError::DeployFailed(code, detail))),
            Ok(other) => {
                return Err(rollback(ManagerError::DeployFailed(ErrorCode::Malformed, format!("{other:?}"))))
            }
            Err(_) => return Err(rollback(ManagerError::HostUnreachable(host))),
        }
        desc.state = ObjectState::Deployed;
        desc.resident_on = Some(host);
        inner.hosts.lock().unwrap().entry(host).or_default().residents.insert(id);
        inner.objects.write().unwrap().insert(
            id,
            Arc::new(ObjectEntry {
                slot: Mutex::new(ObjectSlot { desc, in_flight: 0 }),
                changed: Condvar::new(),
            }),
        );
        Ok(CloudObjectHandle {
            id,
            class_name: class_name.to_string(),
        })
    }

    /// Calls `method`, blocking until the host answers.
    pub fn invoke(&self, handle: &CloudObjectHandle, method: &str, args: Vec<Value>) -> Result<Value> {
        self.inner.call(
            handle.id,
            Message::InvokeCO {
                co_id: handle.id,
                method: method.to_string(),
                args,
            },
            method,
        )
    }

    pub fn get_field(&self, handle: &CloudObjectHandle, field: &str) -> Result<Value> {
        self.inner.call(
            handle.id,
            Message::GetField {
                co_id: handle.id,
                field: field.to_string(),
            },
            field,
        )
    }

    pub fn set_field(&self, handle: &CloudObjectHandle, field: &str, value: Value) -> Result<()> {
        self.inner
            .call(
                handle.id,
                Message::SetField {
                    co_id: handle.id,
                    field: field.to_string(),
                    value,
                },
                field,
            )
            .map(|_| ())
    }

    pub fn destroy(&self, handle: &CloudObjectHandle) -> Result<()> {
        let _guard = self.inner.sched.lock().unwrap();
        self.inner.destroy_locked(handle.id)
    }

    pub fn migrate(&self, handle: &CloudObjectHandle, dest: CloudHostId) -> Result<()> {
        let _guard = self.inner.sched.lock().unwrap();
        self.inner.migrate_locked(handle.id, dest)
    }

    /// Provisions a host outside of any scheduling decision.
    pub fn provision_host(&self) -> Result<CloudHostId> {
        let _guard = self.inner.sched.lock().unwrap();
        let id = self.inner.provision_locked()?;
        self.inner.wait_online_locked(id)?;
        Ok(id)
    }

    /// Consults the policy for `host` as if a billing boundary were reached.
    pub fn billing_tick(&self, host: CloudHostId) -> Result<()> {
        let _guard = self.inner.sched.lock().unwrap();
        if !self.inner.hosts.lock().unwrap().contains_key(&host) {
            return Err(ManagerError::UnknownHost(host));
        }
        self.inner.billing_tick_locked(host);
        Ok(())
    }

    /// Simulated backend only: moves virtual time forward by `dt_ms`.
    pub fn advance_clock(&self, dt_ms: u64) -> Result<()> {
        let _guard = self.inner.sched.lock().unwrap();
        let target = self.inner.now() + dt_ms;
        self.inner.advance_locked(target)?;
        self.inner.bus.flush();
        Ok(())
    }

    pub fn global_get(&self, name: &str) -> Value {
        self.inner.services.globals.get(name)
    }

    pub fn global_set(&self, name: &str, value: Value) {
        self.inner.services.globals.set(name, value)
    }

    pub fn publish_artifact(&self, payload: &[u8]) -> Result<Digest> {
        Ok(self.inner.services.origin.publish(payload)?)
    }

    /// Pushes an artifact into a host's cache ahead of use.
    pub fn push_artifact(&self, host: CloudHostId, digest: Digest) -> Result<()> {
        let payload = self
            .inner
            .services
            .origin
            .get(&digest)
            .ok_or(ArtifactError::UnknownDigest(digest))?;
        let link = self.inner.backend.link(host).ok_or(ManagerError::HostUnreachable(host))?;
        match link.request(Message::ArtifactData {
            digest: digest.0,
            payload: payload.as_ref().clone(),
        }) {
            Ok(Message::Ok { .. }) => Ok(()),
            Ok(Message::Err { code, detail }) => Err(remote_error(code, detail)),
            Ok(other) => Err(ManagerError::Remote(ErrorCode::Malformed, format!("{other:?}"))),
            Err(_) => Err(ManagerError::HostUnreachable(host)),
        }
    }

    /// Fault injection: kills a host without any graceful shutdown.
    pub fn kill_host(&self, host: CloudHostId) -> Result<()> {
        Ok(self.inner.backend.kill(host)?)
    }

    /// Destroys every object, releases every host and stops background
    /// threads. Idempotent.
    pub fn shutdown(&self) {
        if self.inner.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(t) = self.timer.lock().unwrap().take() {
            let _ = t.join();
        }
        let _guard = self.inner.sched.lock().unwrap();
        let live: Vec<CloudObjectId> = self
            .inner
            .objects
            .read()
            .unwrap()
            .iter()
            .filter(|(_, e)| e.slot.lock().unwrap().desc.state == ObjectState::Deployed)
            .map(|(id, _)| *id)
            .collect();
        for co in live {
            let _ = self.inner.destroy_locked(co);
        }
        for rec in self.inner.backend.records() {
            self.inner.retire_locked(rec.id);
        }
        self.inner.bus.flush();
        if let Some(mut cb) = self.callback.lock().unwrap().take() {
            cb.shutdown();
        }
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        self.shutdown();
        self.inner.bus.shutdown();
    }
}
