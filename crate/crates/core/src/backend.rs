//! Provisioning backends: local worker processes and simulated hosts.
//!
//! A backend owns host lifecycles (`Starting -> Online -> Terminating ->
//! Gone`) and hands the manager a [`HostLink`] per online host.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::{Clock, VirtualClock, WallClock};
use crate::conn::{self, RpcConnection};
use crate::events::{kind, EventBus};
use crate::hostd::{host_event, ChannelResponder, HostDaemon};
use crate::services::ManagerServices;
use crate::value::CloudHostId;
use crate::wire::{Message, WireError};

pub const DEFAULT_SIM_BTU_MS: u64 = 60_000;
pub const DEFAULT_LOCAL_BTU_MS: u64 = 30_000;
pub const DEFAULT_STARTUP_DELAY_MS: u64 = 2_000;
pub const START_TIMEOUT: Duration = Duration::from_secs(10);
pub const EXIT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HostState {
    Starting,
    Online,
    Terminating,
    Gone,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudHostRecord {
    pub id: CloudHostId,
    pub endpoint: String,
    pub provisioned_at: u64,
    pub billing_time_unit: u64,
    pub state: HostState,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("host quota of {0} reached")]
    QuotaExceeded(usize),
    #[error("host {0} did not come online in time")]
    StartTimeout(CloudHostId),
    #[error("could not start host: {0}")]
    SpawnFailure(String),
    #[error("unknown host {0}")]
    UnknownHost(CloudHostId),
    #[error("host {0} is not online")]
    NotOnline(CloudHostId),
}

/// Manager-side connection to one host.
pub trait HostLink: Send + Sync {
    fn request(&self, m: Message) -> Result<Message, WireError>;
    fn is_alive(&self) -> bool;
    fn close(&self);
}

/// Link to a daemon in the same process. Events go straight to the bus.
pub struct InProcLink {
    daemon: HostDaemon,
    bus: EventBus,
    alive: AtomicBool,
}

impl InProcLink {
    pub fn new(daemon: HostDaemon, bus: EventBus) -> Self {
        Self {
            daemon,
            bus,
            alive: AtomicBool::new(true),
        }
    }

    pub fn daemon(&self) -> &HostDaemon {
        &self.daemon
    }
}

impl HostLink for InProcLink {
    fn request(&self, m: Message) -> Result<Message, WireError> {
        if !self.is_alive() {
            return Err(WireError::ConnectionClosed);
        }
        let bus = self.bus.clone();
        let (resp, rx) = ChannelResponder::new(move |e| bus.publish(e));
        self.daemon.handle(m, resp);
        let reply = rx.recv().map_err(|_| WireError::ConnectionClosed)?;
        if self.is_alive() {
            Ok(reply)
        } else {
            Err(WireError::ConnectionClosed)
        }
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    fn close(&self) {
        self.alive.store(false, Ordering::SeqCst);
    }
}

/// Link over TCP to a daemon process. Pushed events are published to the
/// bus by the reader thread before the response they precede is released.
#[derive(Debug)]
pub struct TcpHostLink {
    conn: Arc<RpcConnection>,
}

impl TcpHostLink {
    pub fn connect(endpoint: &str, services: &Arc<ManagerServices>) -> Result<Self, String> {
        let stream = conn::connect(endpoint, Duration::from_secs(5)).map_err(|e| e.to_string())?;
        let bus = services.bus.clone();
        let conn = RpcConnection::start(
            stream,
            move |m| match m {
                Message::EventPush { event } => bus.publish(event),
                other => log::warn!("unexpected push {:#04x} from host", other.msg_type()),
            },
            || {},
        )
        .map_err(|e| e.to_string())?;
        conn.handshake(services.registry_digest()).map_err(|e| e.to_string())?;
        Ok(Self { conn })
    }
}

impl HostLink for TcpHostLink {
    fn request(&self, m: Message) -> Result<Message, WireError> {
        self.conn.request(&m)
    }

    fn is_alive(&self) -> bool {
        !self.conn.is_closed()
    }

    fn close(&self) {
        self.conn.shutdown();
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn clock(&self) -> Arc<dyn Clock>;
    fn billing_time_unit_ms(&self) -> u64;
    fn max_hosts(&self) -> usize;

    /// Starts a host. Emits `HostProvisionRequested`, then `HostOnline`
    /// once it is reachable.
    fn provision(&self, id: CloudHostId, size: &str) -> Result<CloudHostRecord, BackendError>;

    /// Gracefully stops a host and emits `HostTerminatedEvent`.
    fn terminate(&self, id: CloudHostId) -> Result<(), BackendError>;

    fn record(&self, id: CloudHostId) -> Option<CloudHostRecord>;

    /// Every host not yet `Gone`, by id.
    fn records(&self) -> Vec<CloudHostRecord>;

    fn link(&self, id: CloudHostId) -> Option<Arc<dyn HostLink>>;

    /// Fault injection: the host dies without any shutdown.
    fn kill(&self, id: CloudHostId) -> Result<(), BackendError>;

    fn as_simulated(&self) -> Option<&SimulatedBackend> {
        None
    }
}

fn live_count<T>(hosts: &BTreeMap<CloudHostId, T>, state: impl Fn(&T) -> HostState) -> usize {
    hosts.values().filter(|h| state(h) != HostState::Gone).count()
}

// --- simulated -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub billing_time_unit_ms: u64,
    pub startup_delay_ms: u64,
    pub max_hosts: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            billing_time_unit_ms: DEFAULT_SIM_BTU_MS,
            startup_delay_ms: DEFAULT_STARTUP_DELAY_MS,
            max_hosts: 8,
        }
    }
}

struct SimHost {
    record: CloudHostRecord,
    ready_at: u64,
    link: Arc<InProcLink>,
}

/// In-process hosts on virtual time.
pub struct SimulatedBackend {
    opts: SimOptions,
    clock: Arc<VirtualClock>,
    services: Arc<ManagerServices>,
    hosts: Mutex<BTreeMap<CloudHostId, SimHost>>,
}

impl std::fmt::Debug for SimulatedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedBackend").field("opts", &self.opts).finish()
    }
}

impl SimulatedBackend {
    pub fn new(opts: SimOptions, clock: Arc<VirtualClock>, services: Arc<ManagerServices>) -> Self {
        Self {
            opts,
            clock,
            services,
            hosts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn virtual_clock(&self) -> &Arc<VirtualClock> {
        &self.clock
    }

    /// Earliest pending startup, if any.
    pub fn next_startup(&self) -> Option<(u64, CloudHostId)> {
        self.hosts
            .lock()
            .unwrap()
            .values()
            .filter(|h| h.record.state == HostState::Starting)
            .map(|h| (h.ready_at, h.record.id))
            .min()
    }

    /// Brings every host whose startup is due at the current time online.
    pub fn complete_startups(&self) {
        let now = self.clock.now_ms();
        let mut hosts = self.hosts.lock().unwrap();
        for h in hosts.values_mut() {
            if h.record.state == HostState::Starting && h.ready_at <= now {
                h.record.state = HostState::Online;
                self.services
                    .bus
                    .publish(host_event(kind::HOST_ONLINE, h.record.id).with("endpoint", h.record.endpoint.as_str()));
            }
        }
    }

    pub fn daemon(&self, id: CloudHostId) -> Option<HostDaemon> {
        self.hosts.lock().unwrap().get(&id).map(|h| h.link.daemon().clone())
    }
}

impl Backend for SimulatedBackend {
    fn name(&self) -> &'static str {
        "simulated"
    }

    fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    fn billing_time_unit_ms(&self) -> u64 {
        self.opts.billing_time_unit_ms
    }

    fn max_hosts(&self) -> usize {
        self.opts.max_hosts
    }

    fn provision(&self, id: CloudHostId, _size: &str) -> Result<CloudHostRecord, BackendError> {
        let mut hosts = self.hosts.lock().unwrap();
        if live_count(&hosts, |h| h.record.state) >= self.opts.max_hosts {
            return Err(BackendError::QuotaExceeded(self.opts.max_hosts));
        }
        let bus = &self.services.bus;
        bus.publish(host_event(kind::HOST_PROVISION_REQUESTED, id));
        let now = self.clock.now_ms();
        let daemon = HostDaemon::new(id, self.services.registry.clone(), self.services.uplink());
        let record = CloudHostRecord {
            id,
            endpoint: format!("sim://{}", id.to_hex()),
            provisioned_at: now,
            billing_time_unit: self.opts.billing_time_unit_ms,
            state: HostState::Starting,
        };
        hosts.insert(
            id,
            SimHost {
                record: record.clone(),
                ready_at: now + self.opts.startup_delay_ms,
                link: Arc::new(InProcLink::new(daemon, bus.clone())),
            },
        );
        drop(hosts);
        if self.opts.startup_delay_ms == 0 {
            self.complete_startups();
        }
        Ok(self.record(id).unwrap_or(record))
    }

    fn terminate(&self, id: CloudHostId) -> Result<(), BackendError> {
        let mut hosts = self.hosts.lock().unwrap();
        let h = hosts
            .get_mut(&id)
            .filter(|h| h.record.state != HostState::Gone)
            .ok_or(BackendError::UnknownHost(id))?;
        h.record.state = HostState::Terminating;
        h.link.close();
        h.record.state = HostState::Gone;
        self.services.bus.publish(host_event(kind::HOST_TERMINATED, id));
        Ok(())
    }

    fn record(&self, id: CloudHostId) -> Option<CloudHostRecord> {
        self.hosts.lock().unwrap().get(&id).map(|h| h.record.clone())
    }

    fn records(&self) -> Vec<CloudHostRecord> {
        self.hosts
            .lock()
            .unwrap()
            .values()
            .filter(|h| h.record.state != HostState::Gone)
            .map(|h| h.record.clone())
            .collect()
    }

    fn link(&self, id: CloudHostId) -> Option<Arc<dyn HostLink>> {
        self.hosts
            .lock()
            .unwrap()
            .get(&id)
            .filter(|h| h.record.state == HostState::Online)
            .map(|h| h.link.clone() as Arc<dyn HostLink>)
    }

    fn kill(&self, id: CloudHostId) -> Result<(), BackendError> {
        let hosts = self.hosts.lock().unwrap();
        let h = hosts.get(&id).ok_or(BackendError::UnknownHost(id))?;
        h.link.close();
        Ok(())
    }

    fn as_simulated(&self) -> Option<&SimulatedBackend> {
        Some(self)
    }
}

// --- local processes -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LocalOptions {
    pub billing_time_unit_ms: u64,
    pub max_hosts: usize,
    /// Overrides the hostd binary lookup.
    pub hostd_path: Option<PathBuf>,
    /// Endpoint hosts call back into.
    pub callback: String,
}

struct LocalHost {
    record: CloudHostRecord,
    child: Option<Child>,
    link: Option<Arc<TcpHostLink>>,
}

/// Hosts as `elastikit-hostd` child processes on this machine.
pub struct LocalBackend {
    opts: LocalOptions,
    clock: Arc<WallClock>,
    services: Arc<ManagerServices>,
    hostd: PathBuf,
    hosts: Mutex<BTreeMap<CloudHostId, LocalHost>>,
}

impl std::fmt::Debug for LocalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalBackend")
            .field("opts", &self.opts)
            .field("hostd", &self.hostd)
            .finish()
    }
}

pub const HOSTD_BINARY: &str = "elastikit-hostd";

/// Finds the hostd binary: `ELASTIKIT_HOSTD`, then next to the running
/// executable or one directory up (test binaries live in `deps/`).
pub fn locate_hostd() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("ELASTIKIT_HOSTD") {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let name = format!("{HOSTD_BINARY}{}", std::env::consts::EXE_SUFFIX);
    exe.ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(&name))
        .find(|p| p.is_file())
}

fn free_port() -> std::io::Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

fn wait_exit(child: &mut Child, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => return true,
            Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
            _ => return false,
        }
    }
}

impl LocalBackend {
    pub fn new(opts: LocalOptions, clock: Arc<WallClock>, services: Arc<ManagerServices>) -> Result<Self, BackendError> {
        let hostd = match &opts.hostd_path {
            Some(p) => p.clone(),
            None => locate_hostd().ok_or_else(|| {
                BackendError::SpawnFailure(format!("{HOSTD_BINARY} not found; set ELASTIKIT_HOSTD"))
            })?,
        };
        Ok(Self {
            opts,
            clock,
            services,
            hostd,
            hosts: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn hostd_path(&self) -> &Path {
        &self.hostd
    }

    /// OS process id of a host, for fault injection from tests.
    pub fn pid(&self, id: CloudHostId) -> Option<u32> {
        self.hosts.lock().unwrap().get(&id)?.child.as_ref().map(Child::id)
    }

    fn spawn(&self, id: CloudHostId, port: u16) -> Result<Child, BackendError> {
        Command::new(&self.hostd)
            .arg("--listen")
            .arg(format!("127.0.0.1:{port}"))
            .arg("--callback")
            .arg(&self.opts.callback)
            .arg("--host-id")
            .arg(id.to_hex())
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::SpawnFailure(format!("{}: {e}", self.hostd.display())))
    }

    fn set_state(&self, id: CloudHostId, state: HostState) {
        if let Some(h) = self.hosts.lock().unwrap().get_mut(&id) {
            h.record.state = state;
        }
    }

    fn stop_child(&self, id: CloudHostId, mut child: Child) {
        drop(child.stdin.take());
        if !wait_exit(&mut child, EXIT_TIMEOUT) {
            log::warn!("host {id} ignored shutdown; killing");
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Backend for LocalBackend {
    fn name(&self) -> &'static str {
        "local"
    }

    fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    fn billing_time_unit_ms(&self) -> u64 {
        self.opts.billing_time_unit_ms
    }

    fn max_hosts(&self) -> usize {
        self.opts.max_hosts
    }

    fn provision(&self, id: CloudHostId, _size: &str) -> Result<CloudHostRecord, BackendError> {
        let port = free_port().map_err(|e| BackendError::SpawnFailure(e.to_string()))?;
        let endpoint = format!("127.0.0.1:{port}");
        {
            let mut hosts = self.hosts.lock().unwrap();
            if live_count(&hosts, |h| h.record.state) >= self.opts.max_hosts {
                return Err(BackendError::QuotaExceeded(self.opts.max_hosts));
            }
            self.services.bus.publish(host_event(kind::HOST_PROVISION_REQUESTED, id));
            hosts.insert(
                id,
                LocalHost {
                    record: CloudHostRecord {
                        id,
                        endpoint: endpoint.clone(),
                        provisioned_at: self.clock.now_ms(),
                        billing_time_unit: self.opts.billing_time_unit_ms,
                        state: HostState::Starting,
                    },
                    child: None,
                    link: None,
                },
            );
        }

        let fail = |e: BackendError, child: Option<Child>| {
            if let Some(mut c) = child {
                let _ = c.kill();
                let _ = c.wait();
            }
            self.hosts.lock().unwrap().remove(&id);
            Err(e)
        };

        let mut child = match self.spawn(id, port) {
            Ok(c) => c,
            Err(e) => return fail(e, None),
        };
        let deadline = Instant::now() + START_TIMEOUT;
        let online = loop {
            let found = self.services.bus.wait_for(Duration::from_millis(50), |e| {
                e.event_type == kind::HOST_ONLINE && e.host() == Some(id)
            });
            if found.is_some() {
                break true;
            }
            if Instant::now() >= deadline || matches!(child.try_wait(), Ok(Some(_))) {
                break false;
            }
        };
        if !online {
            return fail(BackendError::StartTimeout(id), Some(child));
        }
        let link = match TcpHostLink::connect(&endpoint, &self.services) {
            Ok(l) => Arc::new(l),
            Err(e) => return fail(BackendError::SpawnFailure(e), Some(child)),
        };
        let mut hosts = self.hosts.lock().unwrap();
        let h = hosts.get_mut(&id).expect("inserted above");
        // The child exits when its stdin closes.
        h.child = Some(child);
        h.link = Some(link);
        h.record.state = HostState::Online;
        Ok(h.record.clone())
    }

    fn terminate(&self, id: CloudHostId) -> Result<(), BackendError> {
        let (child, link) = {
            let mut hosts = self.hosts.lock().unwrap();
            let h = hosts
                .get_mut(&id)
                .filter(|h| h.record.state != HostState::Gone)
                .ok_or(BackendError::UnknownHost(id))?;
            h.record.state = HostState::Terminating;
            (h.child.take(), h.link.take())
        };
        self.services.expect_exit(id);
        if let Some(l) = link {
            l.close();
        }
        if let Some(c) = child {
            self.stop_child(id, c);
        }
        if !self.services.wait_disconnect(id, Duration::from_secs(2)) {
            log::warn!("host {id} callback still open after exit");
        }
        self.set_state(id, HostState::Gone);
        self.services.bus.publish(host_event(kind::HOST_TERMINATED, id));
        Ok(())
    }

    fn record(&self, id: CloudHostId) -> Option<CloudHostRecord> {
        self.hosts.lock().unwrap().get(&id).map(|h| h.record.clone())
    }

    fn records(&self) -> Vec<CloudHostRecord> {
        self.hosts
            .lock()
            .unwrap()
            .values()
            .filter(|h| h.record.state != HostState::Gone)
            .map(|h| h.record.clone())
            .collect()
    }

    fn link(&self, id: CloudHostId) -> Option<Arc<dyn HostLink>> {
        let hosts = self.hosts.lock().unwrap();
        let h = hosts.get(&id).filter(|h| h.record.state == HostState::Online)?;
        h.link.clone().map(|l| l as Arc<dyn HostLink>)
    }

    fn kill(&self, id: CloudHostId) -> Result<(), BackendError> {
        let mut hosts = self.hosts.lock().unwrap();
        let h = hosts.get_mut(&id).ok_or(BackendError::UnknownHost(id))?;
        if let Some(c) = h.child.as_mut() {
            match c.kill() {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::InvalidInput => {}
                Err(e) => return Err(BackendError::SpawnFailure(e.to_string())),
            }
            let _ = c.wait();
        }
        Ok(())
    }
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        for h in self.hosts.lock().unwrap().values_mut() {
            if let Some(mut c) = h.child.take() {
                drop(c.stdin.take());
                if !wait_exit(&mut c, Duration::from_secs(2)) {
                    let _ = c.kill();
                    let _ = c.wait();
                }
            }
        }
    }
}
