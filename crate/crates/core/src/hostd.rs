//! The host daemon: sandboxes, per-object execution lanes and the TCP server.
//!
//! Requests are dispatched without blocking the connection reader. Each
//! resident object owns one lane thread, so calls on one object run in
//! arrival order while distinct objects run concurrently. Events produced
//! while handling a request go to its [`Responder`] before the reply.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::artifacts::{ArtifactCache, ArtifactError, ArtifactSource, Digest, DEFAULT_CACHE_BUDGET};
use crate::conn::{self, check_hello, HandshakeError, RpcConnection};
use crate::events::{kind, EventSource, MonitoringEvent};
use crate::registry::{check_mode, AppError, ClassRegistry, ClassSpec, CloudObject, ObjectContext};
use crate::value::{CloudHostId, CloudObjectId, Value};
use crate::wire::{encode_frame, read_frame, ErrorCode, Message, WireError};

/// The daemon's channel back to its manager.
pub trait HostUplink: Send + Sync {
    /// Round trip for `GlobalGet`, `GlobalSet` and `ArtifactFetch`.
    fn request(&self, m: Message) -> Result<Message, WireError>;
    fn push_event(&self, e: MonitoringEvent);
}

/// Delivers the outcome of one request.
pub trait Responder: Send {
    fn event(&mut self, e: MonitoringEvent);
    fn reply(self: Box<Self>, m: Message);
}

struct UplinkSource(Arc<dyn HostUplink>);

impl ArtifactSource for UplinkSource {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, ArtifactError> {
        match self.0.request(Message::ArtifactFetch { digest: digest.0 }) {
            Ok(Message::Ok {
                value: Value::Bytes(b),
            }) => Ok(b),
            Ok(Message::Err {
                code: ErrorCode::UnknownDigest,
                ..
            }) => Err(ArtifactError::UnknownDigest(*digest)),
            Ok(Message::Err {
                code: ErrorCode::SizeExceeded,
                ..
            }) => Err(ArtifactError::SizeExceeded(crate::wire::MAX_FRAME_PAYLOAD)),
            Ok(other) => Err(ArtifactError::OriginUnreachable(format!("unexpected reply {other:?}"))),
            Err(e) => Err(ArtifactError::OriginUnreachable(e.to_string())),
        }
    }
}

pub fn object_event(event_type: &str, host: CloudHostId, co: CloudObjectId) -> MonitoringEvent {
    MonitoringEvent::new(event_type, EventSource::Object(co))
        .with("host", host.to_hex())
        .with("co_id", co.to_hex())
}

pub fn host_event(event_type: &str, host: CloudHostId) -> MonitoringEvent {
    MonitoringEvent::new(event_type, EventSource::Host(host)).with("host", host.to_hex())
}

type Instance = Option<Box<dyn CloudObject>>;
type Job = Box<dyn FnOnce(&Mutex<Instance>) + Send>;

struct Sandbox {
    co: CloudObjectId,
    class: Arc<ClassSpec>,
    instance: Arc<Mutex<Instance>>,
    lane: Mutex<mpsc::Sender<Job>>,
    in_flight: AtomicUsize,
    artifact_view: Mutex<BTreeSet<Digest>>,
}

impl Sandbox {
    fn new(co: CloudObjectId, class: Arc<ClassSpec>, instance: Instance) -> Arc<Self> {
        let (tx, rx) = mpsc::channel::<Job>();
        let instance = Arc::new(Mutex::new(instance));
        let lane_instance = instance.clone();
        std::thread::Builder::new()
            .name(format!("lane-{}", &co.to_hex()[..8]))
            .spawn(move || {
                for job in rx {
                    job(&lane_instance);
                }
            })
            .expect("spawn lane thread");
        Arc::new(Self {
            co,
            class,
            instance,
            lane: Mutex::new(tx),
            in_flight: AtomicUsize::new(0),
            artifact_view: Mutex::new(BTreeSet::new()),
        })
    }

    /// Runs `f` on the lane. Its reply is held back until the instance
    /// lock is released and the call no longer counts as in flight, so a
    /// caller that has seen the reply finds the object quiescent.
    fn enqueue(
        self: &Arc<Self>,
        resp: Box<dyn Responder>,
        f: impl FnOnce(&Sandbox, &mut Instance, Box<dyn Responder>) + Send + 'static,
    ) {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let sb = self.clone();
        let job: Job = Box::new(move |instance| {
            let held = Arc::new(Mutex::new(None));
            let deferred = Box::new(Deferred {
                inner: Some(resp),
                held: held.clone(),
            });
            {
                let mut guard = instance.lock().unwrap_or_else(|p| p.into_inner());
                f(&sb, &mut guard, deferred);
            }
            sb.in_flight.fetch_sub(1, Ordering::SeqCst);
            let reply = held.lock().unwrap().take();
            if let Some((resp, m)) = reply {
                resp.reply(m);
            }
        });
        let _ = self.lane.lock().unwrap().send(job);
    }
}

type HeldReply = Arc<Mutex<Option<(Box<dyn Responder>, Message)>>>;

struct Deferred {
    inner: Option<Box<dyn Responder>>,
    held: HeldReply,
}

impl Responder for Deferred {
    fn event(&mut self, e: MonitoringEvent) {
        if let Some(r) = self.inner.as_mut() {
            r.event(e);
        }
    }

    fn reply(mut self: Box<Self>, m: Message) {
        if let Some(r) = self.inner.take() {
            *self.held.lock().unwrap() = Some((r, m));
        }
    }
}

struct Inner {
    host: CloudHostId,
    registry: Arc<ClassRegistry>,
    uplink: Arc<dyn HostUplink>,
    cache: Arc<ArtifactCache>,
    sandboxes: Mutex<HashMap<CloudObjectId, Arc<Sandbox>>>,
}

/// Request handler shared by every connection to one host.
#[derive(Clone)]
pub struct HostDaemon {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for HostDaemon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostDaemon")
            .field("host", &self.inner.host)
            .field("resident", &self.resident_count())
            .finish()
    }
}

struct LaneCtx<'a> {
    inner: &'a Inner,
    sandbox: &'a Sandbox,
    resp: &'a mut dyn Responder,
}

impl ObjectContext for LaneCtx<'_> {
    fn global_get(&mut self, name: &str) -> Result<Value, AppError> {
        match self.inner.uplink.request(Message::GlobalGet { name: name.to_string() }) {
            Ok(Message::Ok { value }) => Ok(value),
            Ok(Message::Err { detail, .. }) => Err(AppError::new(detail)),
            Ok(other) => Err(AppError::new(format!("unexpected reply {other:?}"))),
            Err(e) => Err(AppError::new(format!("global store unreachable: {e}"))),
        }
    }

    fn global_set(&mut self, name: &str, value: Value) -> Result<(), AppError> {
        match self.inner.uplink.request(Message::GlobalSet {
            name: name.to_string(),
            value,
        }) {
            Ok(Message::Ok { .. }) => Ok(()),
            Ok(Message::Err { detail, .. }) => Err(AppError::new(detail)),
            Ok(other) => Err(AppError::new(format!("unexpected reply {other:?}"))),
            Err(e) => Err(AppError::new(format!("global store unreachable: {e}"))),
        }
    }

    fn artifact(&mut self, digest: &Digest) -> Result<Arc<Vec<u8>>, AppError> {
        let data = self
            .inner
            .cache
            .fetch(digest)
            .map_err(|e| AppError::new(e.to_string()))?;
        self.sandbox.artifact_view.lock().unwrap().insert(*digest);
        Ok(data)
    }

    fn emit(&mut self, event_type: &str, properties: BTreeMap<String, Value>) {
        let e = MonitoringEvent {
            properties,
            ..object_event(event_type, self.inner.host, self.sandbox.co)
        };
        if event_type.starts_with(kind::CUSTOM_PREFIX) && e.is_well_formed() {
            self.resp.event(e);
        } else {
            log::warn!("object {} emitted non-custom event type {event_type}", self.sandbox.co);
        }
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

fn millis(d: Duration) -> i64 {
    d.as_millis() as i64
}

impl HostDaemon {
    pub fn new(host: CloudHostId, registry: Arc<ClassRegistry>, uplink: Arc<dyn HostUplink>) -> Self {
        Self::with_cache_budget(host, registry, uplink, DEFAULT_CACHE_BUDGET)
    }

    pub fn with_cache_budget(
        host: CloudHostId,
        registry: Arc<ClassRegistry>,
        uplink: Arc<dyn HostUplink>,
        budget: usize,
    ) -> Self {
        let cache = Arc::new(ArtifactCache::with_budget(Arc::new(UplinkSource(uplink.clone())), budget));
        Self {
            inner: Arc::new(Inner {
                host,
                registry,
                uplink,
                cache,
                sandboxes: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn host_id(&self) -> CloudHostId {
        self.inner.host
    }

    pub fn registry(&self) -> &Arc<ClassRegistry> {
        &self.inner.registry
    }

    pub fn cache(&self) -> &Arc<ArtifactCache> {
        &self.inner.cache
    }

    pub fn resident_count(&self) -> usize {
        self.inner.sandboxes.lock().unwrap().len()
    }

    pub fn is_resident(&self, co: CloudObjectId) -> bool {
        self.inner.sandboxes.lock().unwrap().contains_key(&co)
    }

    /// Digests fetched by `co` so far.
    pub fn artifact_view(&self, co: CloudObjectId) -> Option<BTreeSet<Digest>> {
        let sb = self.inner.sandboxes.lock().unwrap().get(&co).cloned()?;
        let view = sb.artifact_view.lock().unwrap().clone();
        Some(view)
    }

    pub fn announce_online(&self, endpoint: Option<&str>) {
        let mut e = host_event(kind::HOST_ONLINE, self.inner.host);
        if let Some(ep) = endpoint {
            e = e.with("endpoint", ep);
        }
        self.inner.uplink.push_event(e);
    }

    pub fn announce_offline(&self) {
        self.inner.uplink.push_event(host_event(kind::HOST_OFFLINE, self.inner.host));
    }

    fn sandbox(&self, co: CloudObjectId) -> Option<Arc<Sandbox>> {
        self.inner.sandboxes.lock().unwrap().get(&co).cloned()
    }

    /// Handles one request. The reply may be sent later from a lane thread.
    pub fn handle(&self, m: Message, resp: Box<dyn Responder>) {
        let inner = &self.inner;
        let unknown_co = |co: CloudObjectId| Message::err(ErrorCode::UnknownCO, format!("{co} is not resident"));
        match m {
            Message::Hello { .. } => resp.reply(check_hello(&m, &inner.registry.digest())),

            Message::DeployCO {
                descriptor,
                ctor_args,
            } => {
                let co = descriptor.id;
                let Some(class) = inner.registry.get(&descriptor.class_name).cloned() else {
                    return resp.reply(Message::err(
                        ErrorCode::UnknownClass,
                        format!("class '{}' is not registered", descriptor.class_name),
                    ));
                };
                if let Err(r) = class.check_ctor(&ctor_args) {
                    return resp.reply(Message::err(r.code, r.detail));
                }
                let sb = {
                    let mut table = inner.sandboxes.lock().unwrap();
                    if table.contains_key(&co) {
                        drop(table);
                        return resp.reply(Message::err(ErrorCode::DuplicateCO, format!("{co} already resident")));
                    }
                    let sb = Sandbox::new(co, class, None);
                    table.insert(co, sb.clone());
                    sb
                };
                let inner = inner.clone();
                sb.enqueue(resp, move |sb, inst, mut resp| {
                    let start = Instant::now();
                    let built = catch_unwind(AssertUnwindSafe(|| (sb.class.factory)(ctor_args)));
                    let duration = millis(start.elapsed());
                    match built {
                        Ok(Ok(obj)) => {
                            *inst = Some(obj);
                            resp.event(
                                object_event(kind::OBJECT_DEPLOYED, inner.host, co)
                                    .with("class", sb.class.name.as_str())
                                    .with("duration", duration),
                            );
                            resp.reply(Message::ok(Value::Null));
                        }
                        Ok(Err(e)) => {
                            inner.sandboxes.lock().unwrap().remove(&co);
                            resp.reply(Message::err(ErrorCode::ConstructorFailed, e.0));
                        }
                        Err(p) => {
                            inner.sandboxes.lock().unwrap().remove(&co);
                            resp.reply(Message::err(ErrorCode::ConstructorFailed, panic_text(p)));
                        }
                    }
                });
            }

            Message::InvokeCO { co_id, method, args } => {
                let Some(sb) = self.sandbox(co_id) else {
                    return resp.reply(unknown_co(co_id));
                };
                if let Err(r) = sb.class.check_invoke(&method, &args) {
                    return resp.reply(Message::err(r.code, r.detail));
                }
                let inner = inner.clone();
                sb.enqueue(resp, move |sb, inst, mut resp| {
                    let Some(obj) = inst.as_mut() else {
                        return resp.reply(unknown_co(co_id));
                    };
                    let host = inner.host;
                    resp.event(object_event(kind::EXECUTION_STARTED, host, co_id).with("method", method.as_str()));
                    let start = Instant::now();
                    let result = {
                        let mut ctx = LaneCtx {
                            inner: &inner,
                            sandbox: sb,
                            resp: &mut *resp,
                        };
                        catch_unwind(AssertUnwindSafe(|| obj.invoke(&method, args, &mut ctx)))
                    };
                    let duration = millis(start.elapsed());
                    let spec = sb.class.methods.get(&method).expect("checked before enqueue");
                    let failure = match result {
                        Ok(Ok(v)) => match sb.class.check_return(spec, &v) {
                            Ok(()) => {
                                resp.event(
                                    object_event(kind::EXECUTION_FINISHED, host, co_id)
                                        .with("method", method.as_str())
                                        .with("duration", duration),
                                );
                                return resp.reply(Message::ok(v));
                            }
                            Err(r) => (r.code, r.detail),
                        },
                        Ok(Err(e)) => (ErrorCode::ApplicationError, e.0),
                        Err(p) => (ErrorCode::ApplicationError, panic_text(p)),
                    };
                    resp.event(
                        object_event(kind::EXECUTION_FAILED, host, co_id)
                            .with("method", method.as_str())
                            .with("error", failure.1.as_str())
                            .with("duration", duration),
                    );
                    resp.reply(Message::err(failure.0, failure.1));
                });
            }

            Message::GetField { co_id, field } => {
                let Some(sb) = self.sandbox(co_id) else {
                    return resp.reply(unknown_co(co_id));
                };
                if let Err(r) = sb.class.check_field(&field) {
                    return resp.reply(Message::err(r.code, r.detail));
                }
                sb.enqueue(resp, move |_, inst, resp| {
                    let reply = match inst.as_ref() {
                        None => unknown_co(co_id),
                        Some(obj) => match obj.get_field(&field) {
                            Some(v) => Message::ok(v),
                            None => Message::err(ErrorCode::UnknownField, format!("{field} has no value")),
                        },
                    };
                    resp.reply(reply);
                });
            }

            Message::SetField { co_id, field, value } => {
                let Some(sb) = self.sandbox(co_id) else {
                    return resp.reply(unknown_co(co_id));
                };
                let spec = match sb.class.check_field(&field) {
                    Ok(s) => s.clone(),
                    Err(r) => return resp.reply(Message::err(r.code, r.detail)),
                };
                if !check_mode(spec.mode, &value) {
                    return resp.reply(Message::err(
                        ErrorCode::ModeMismatch,
                        format!("{field} value violates {:?}", spec.mode),
                    ));
                }
                sb.enqueue(resp, move |_, inst, resp| {
                    let reply = match inst.as_mut() {
                        None => unknown_co(co_id),
                        Some(obj) => match obj.set_field(&field, value) {
                            Ok(()) => Message::ok(Value::Null),
                            Err(e) => Message::err(ErrorCode::ApplicationError, e.0),
                        },
                    };
                    resp.reply(reply);
                });
            }

            Message::DestroyCO { co_id } => {
                let Some(sb) = inner.sandboxes.lock().unwrap().remove(&co_id) else {
                    return resp.reply(unknown_co(co_id));
                };
                // Runs after every call already queued on the lane.
                sb.enqueue(resp, move |_, inst, resp| {
                    inst.take();
                    resp.reply(Message::ok(Value::Null));
                });
            }

            Message::SnapshotCO { co_id } => {
                let Some(sb) = self.sandbox(co_id) else {
                    return resp.reply(unknown_co(co_id));
                };
                if sb.class.restore.is_none() {
                    return resp.reply(Message::err(
                        ErrorCode::SnapshotUnsupported,
                        format!("class '{}' cannot be migrated", sb.class.name),
                    ));
                }
                let not_quiescent = || Message::err(ErrorCode::NotQuiescent, format!("{co_id} has calls in flight"));
                if sb.in_flight.load(Ordering::SeqCst) > 0 {
                    return resp.reply(not_quiescent());
                }
                let Ok(guard) = sb.instance.try_lock() else {
                    return resp.reply(not_quiescent());
                };
                let reply = match guard.as_ref() {
                    None => not_quiescent(),
                    Some(obj) => match catch_unwind(AssertUnwindSafe(|| obj.snapshot())) {
                        Ok(Some(state)) => Message::ok(Value::Bytes(state)),
                        Ok(None) => Message::err(ErrorCode::SnapshotUnsupported, "instance declined to snapshot"),
                        Err(p) => Message::err(ErrorCode::ApplicationError, panic_text(p)),
                    },
                };
                drop(guard);
                resp.reply(reply);
            }

            Message::RestoreCO { descriptor, state } => {
                let co = descriptor.id;
                let Some(class) = inner.registry.get(&descriptor.class_name).cloned() else {
                    return resp.reply(Message::err(
                        ErrorCode::UnknownClass,
                        format!("class '{}' is not registered", descriptor.class_name),
                    ));
                };
                let Some(restore) = class.restore.clone() else {
                    return resp.reply(Message::err(
                        ErrorCode::SnapshotUnsupported,
                        format!("class '{}' cannot be migrated", class.name),
                    ));
                };
                if self.is_resident(co) {
                    return resp.reply(Message::err(ErrorCode::DuplicateCO, format!("{co} already resident")));
                }
                let obj = match catch_unwind(AssertUnwindSafe(|| restore(&state))) {
                    Ok(Ok(obj)) => obj,
                    Ok(Err(e)) => return resp.reply(Message::err(ErrorCode::ConstructorFailed, e.0)),
                    Err(p) => return resp.reply(Message::err(ErrorCode::ConstructorFailed, panic_text(p))),
                };
                let mut table = inner.sandboxes.lock().unwrap();
                if table.contains_key(&co) {
                    drop(table);
                    return resp.reply(Message::err(ErrorCode::DuplicateCO, format!("{co} already resident")));
                }
                table.insert(co, Sandbox::new(co, class, Some(obj)));
                drop(table);
                resp.reply(Message::ok(Value::Null));
            }

            Message::ArtifactData { digest, payload } => {
                let reply = match inner.cache.insert(Digest(digest), payload) {
                    Ok(()) => Message::ok(Value::Null),
                    Err(e) => Message::err(ErrorCode::VerificationFailed, e.to_string()),
                };
                resp.reply(reply);
            }

            other => resp.reply(Message::err(
                ErrorCode::Unsupported,
                format!("hosts do not serve message type {:#04x}", other.msg_type()),
            )),
        }
    }
}

// --- TCP serving -----------------------------------------------------------

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

struct TcpResponder {
    writer: SharedWriter,
    rid: u64,
}

fn write_to(writer: &SharedWriter, m: &Message, rid: u64) {
    let frame = match encode_frame(m, rid) {
        Ok(f) => f,
        Err(e) => {
            log::error!("cannot encode reply: {e}");
            match encode_frame(&Message::err(ErrorCode::SizeExceeded, e.to_string()), rid) {
                Ok(f) => f,
                Err(_) => return,
            }
        }
    };
    let mut w = writer.lock().unwrap();
    if w.write_all(&frame).and_then(|_| w.flush()).is_err() {
        log::debug!("peer went away before reply {rid}");
    }
}

impl Responder for TcpResponder {
    fn event(&mut self, e: MonitoringEvent) {
        write_to(&self.writer, &Message::EventPush { event: e }, 0);
    }

    fn reply(self: Box<Self>, m: Message) {
        write_to(&self.writer, &m, self.rid);
    }
}

/// A running TCP server for one daemon.
pub struct HostServer {
    addr: SocketAddr,
    daemon: HostDaemon,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for HostServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostServer").field("addr", &self.addr).finish()
    }
}

/// Serves `daemon` on `listener` and announces the host online.
pub fn serve(listener: TcpListener, daemon: HostDaemon) -> std::io::Result<HostServer> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let (stop, connections, daemon) = (stop.clone(), connections.clone(), daemon.clone());
        std::thread::Builder::new().name("hostd-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    connections.lock().unwrap().push(clone);
                }
                let daemon = daemon.clone();
                let _ = std::thread::Builder::new()
                    .name("hostd-conn".into())
                    .spawn(move || serve_connection(stream, daemon));
            }
        })?
    };
    daemon.announce_online(Some(&addr.to_string()));
    Ok(HostServer {
        addr,
        daemon,
        stop,
        connections,
        acceptor: Some(acceptor),
    })
}

fn serve_connection(stream: TcpStream, daemon: HostDaemon) {
    let Ok(write_half) = stream.try_clone() else { return };
    let writer: SharedWriter = Arc::new(Mutex::new(BufWriter::new(write_half)));
    let mut reader = BufReader::new(stream);
    let digest = daemon.registry().digest();

    match read_frame(&mut reader) {
        Ok((hello, rid)) => {
            let reply = check_hello(&hello, &digest);
            let accepted = matches!(reply, Message::Ok { .. });
            write_to(&writer, &reply, rid);
            if !accepted {
                let _ = reader.get_ref().shutdown(Shutdown::Both);
                return;
            }
        }
        Err(_) => return,
    }

    loop {
        match read_frame(&mut reader) {
            Ok((m, rid)) => daemon.handle(
                m,
                Box::new(TcpResponder {
                    writer: writer.clone(),
                    rid,
                }),
            ),
            Err(WireError::UnknownMsgType(t)) => log::warn!("skipping frame of type {t:#04x}"),
            Err(_) => break,
        }
    }
}

impl HostServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn daemon(&self) -> &HostDaemon {
        &self.daemon
    }

    /// Stops accepting, drops every connection and announces the host offline.
    pub fn shutdown(mut self) {
        self.stop_inner();
        self.daemon.announce_offline();
    }

    fn stop_inner(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for c in self.connections.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for HostServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

// --- callback client -------------------------------------------------------

/// Uplink over the manager's callback endpoint.
#[derive(Debug)]
pub struct TcpUplink {
    conn: Arc<RpcConnection>,
}

impl TcpUplink {
    /// Connects and completes the handshake. `on_close` runs when the
    /// manager goes away.
    pub fn connect(
        addr: &str,
        registry_digest: [u8; 32],
        on_close: impl FnOnce() + Send + 'static,
    ) -> Result<Self, HandshakeError> {
        let stream = conn::connect(addr, Duration::from_secs(5)).map_err(WireError::from)?;
        let conn = RpcConnection::start(stream, |_| {}, on_close).map_err(WireError::from)?;
        conn.handshake(registry_digest)?;
        Ok(Self { conn })
    }

    pub fn close(&self) {
        self.conn.shutdown();
    }
}

impl HostUplink for TcpUplink {
    fn request(&self, m: Message) -> Result<Message, WireError> {
        self.conn.request(&m)
    }

    fn push_event(&self, e: MonitoringEvent) {
        if let Err(err) = self.conn.send(&Message::EventPush { event: e }) {
            log::warn!("event push failed: {err}");
        }
    }
}

/// Uplink for a daemon with no manager: globals are local and artifacts
/// unavailable. Events are collected for inspection.
#[derive(Debug, Default)]
pub struct DetachedUplink {
    globals: Mutex<HashMap<String, Value>>,
    events: Mutex<Vec<MonitoringEvent>>,
}

impl DetachedUplink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<MonitoringEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl HostUplink for DetachedUplink {
    fn request(&self, m: Message) -> Result<Message, WireError> {
        Ok(match m {
            Message::GlobalGet { name } => {
                Message::ok(self.globals.lock().unwrap().get(&name).cloned().unwrap_or(Value::Null))
            }
            Message::GlobalSet { name, value } => {
                self.globals.lock().unwrap().insert(name, value);
                Message::ok(Value::Null)
            }
            Message::ArtifactFetch { digest } => {
                Message::err(ErrorCode::UnknownDigest, Digest(digest).to_hex())
            }
            other => Message::err(ErrorCode::Unsupported, format!("{:#04x}", other.msg_type())),
        })
    }

    fn push_event(&self, e: MonitoringEvent) {
        self.events.lock().unwrap().push(e);
    }
}

/// Responder that hands events and the reply to channels. Useful for
/// in-process hosts and tests.
pub struct ChannelResponder {
    on_event: Box<dyn FnMut(MonitoringEvent) + Send>,
    reply: mpsc::Sender<Message>,
}

impl ChannelResponder {
    pub fn new(on_event: impl FnMut(MonitoringEvent) + Send + 'static) -> (Box<Self>, mpsc::Receiver<Message>) {
        let (tx, rx) = mpsc::channel();
        (
            Box::new(Self {
                on_event: Box::new(on_event),
                reply: tx,
            }),
            rx,
        )
    }
}

impl Responder for ChannelResponder {
    fn event(&mut self, e: MonitoringEvent) {
        (self.on_event)(e);
    }

    fn reply(self: Box<Self>, m: Message) {
        let _ = self.reply.send(m);
    }
}

impl HostDaemon {
    /// Handles `m` and waits for the reply, collecting emitted events.
    pub fn call(&self, m: Message) -> (Message, Vec<MonitoringEvent>) {
        let events = Arc::new(Mutex::new(Vec::new()));
        let sink = events.clone();
        let (resp, rx) = ChannelResponder::new(move |e| sink.lock().unwrap().push(e));
        self.handle(m, resp);
        let reply = rx
            .recv()
            .unwrap_or_else(|_| Message::err(ErrorCode::Internal, "request dropped"));
        let events = std::mem::take(&mut *events.lock().unwrap());
        (reply, events)
    }
}
