//! Manager-side services reachable from hosts: the global store, the
//! artifact origin and event intake, plus the TCP callback endpoint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::artifacts::{ArtifactOrigin, Digest};
use crate::conn::check_hello;
use crate::events::{kind, EventBus, EventSource, MonitoringEvent};
use crate::hostd::{host_event, HostUplink};
use crate::registry::ClassRegistry;
use crate::value::{CloudHostId, Value};
use crate::wire::{encode_frame, msg_type, read_frame, ErrorCode, Message, WireError, MAX_FRAME_PAYLOAD};

/// Authoritative global variables. Last write wins; each name is totally
/// ordered by this store's lock.
#[derive(Debug, Default)]
pub struct GlobalStore {
    map: Mutex<HashMap<String, Value>>,
}

impl GlobalStore {
    pub fn get(&self, name: &str) -> Value {
        self.map.lock().unwrap().get(name).cloned().unwrap_or(Value::Null)
    }

    pub fn set(&self, name: &str, value: Value) {
        self.map.lock().unwrap().insert(name.to_string(), value);
    }
}

#[derive(Debug)]
pub struct ManagerServices {
    pub bus: EventBus,
    pub globals: GlobalStore,
    pub origin: Arc<ArtifactOrigin>,
    pub registry: Arc<ClassRegistry>,
    digest: [u8; 32],
    frames: Mutex<BTreeMap<u8, u64>>,
    gone: Mutex<HashSet<CloudHostId>>,
    gone_cv: Condvar,
    expected_exits: Mutex<HashSet<CloudHostId>>,
}

impl ManagerServices {
    pub fn new(bus: EventBus, registry: Arc<ClassRegistry>) -> Arc<Self> {
        let digest = registry.digest();
        Arc::new(Self {
            bus,
            globals: GlobalStore::default(),
            origin: Arc::new(ArtifactOrigin::new()),
            registry,
            digest,
            frames: Mutex::new(BTreeMap::new()),
            gone: Mutex::new(HashSet::new()),
            gone_cv: Condvar::new(),
            expected_exits: Mutex::new(HashSet::new()),
        })
    }

    pub fn registry_digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Host-originated frames seen so far, by message type.
    pub fn frame_count(&self, msg_type: u8) -> u64 {
        self.frames.lock().unwrap().get(&msg_type).copied().unwrap_or(0)
    }

    /// Serves one host-originated message. One-way messages yield `None`.
    pub fn handle_callback(&self, m: Message) -> Option<Message> {
        *self.frames.lock().unwrap().entry(m.msg_type()).or_default() += 1;
        match m {
            Message::EventPush { event } => {
                self.bus.publish(event);
                None
            }
            Message::GlobalGet { name } => Some(Message::ok(self.globals.get(&name))),
            Message::GlobalSet { name, value } => {
                self.globals.set(&name, value);
                Some(Message::ok(Value::Null))
            }
            Message::ArtifactFetch { digest } => {
                let d = Digest(digest);
                Some(match self.origin.get(&d) {
                    // Leave room for the tag and length prefix.
                    Some(p) if p.len() + 5 > MAX_FRAME_PAYLOAD => Message::err(
                        ErrorCode::SizeExceeded,
                        format!("artifact {d} does not fit in one frame"),
                    ),
                    Some(p) => Message::ok(Value::Bytes(p.as_ref().clone())),
                    None => Message::err(ErrorCode::UnknownDigest, d.to_hex()),
                })
            }
            Message::Hello { .. } => Some(check_hello(&m, &self.digest)),
            other => Some(Message::err(
                ErrorCode::Unsupported,
                format!("manager does not serve message type {:#04x}", other.msg_type()),
            )),
        }
    }

    /// Marks an upcoming disconnect of `host` as deliberate.
    pub fn expect_exit(&self, host: CloudHostId) {
        self.expected_exits.lock().unwrap().insert(host);
    }

    fn host_disconnected(&self, host: CloudHostId) {
        let expected = self.expected_exits.lock().unwrap().remove(&host);
        if !expected {
            self.bus.publish(host_event(kind::HOST_OFFLINE, host).with("reason", "connection lost"));
        }
        self.gone.lock().unwrap().insert(host);
        self.gone_cv.notify_all();
    }

    /// Waits until the callback connection of `host` has closed.
    pub fn wait_disconnect(&self, host: CloudHostId, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut gone = self.gone.lock().unwrap();
        while !gone.contains(&host) {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            gone = self.gone_cv.wait_timeout(gone, deadline - now).unwrap().0;
        }
        true
    }

    pub fn uplink(self: &Arc<Self>) -> Arc<dyn HostUplink> {
        Arc::new(InProcUplink(self.clone()))
    }
}

/// Uplink for hosts living in the manager's process.
#[derive(Debug)]
pub struct InProcUplink(pub Arc<ManagerServices>);

impl HostUplink for InProcUplink {
    fn request(&self, m: Message) -> Result<Message, WireError> {
        self.0
            .handle_callback(m)
            .ok_or_else(|| WireError::MalformedFrame("one-way message sent as request".into()))
    }

    fn push_event(&self, e: MonitoringEvent) {
        self.0.handle_callback(Message::EventPush { event: e });
    }
}

/// TCP endpoint that hosts dial back into.
pub struct CallbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for CallbackServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CallbackServer").field("addr", &self.addr).finish()
    }
}

impl CallbackServer {
    pub fn start(listen: &str, services: Arc<ManagerServices>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let (stop, connections) = (stop.clone(), connections.clone());
            std::thread::Builder::new().name("callback-accept".into()).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_nodelay(true);
                    if let Ok(c) = stream.try_clone() {
                        connections.lock().unwrap().push(c);
                    }
                    let services = services.clone();
                    let _ = std::thread::Builder::new()
                        .name("callback-conn".into())
                        .spawn(move || serve_callback(stream, services));
                }
            })?
        };
        Ok(Self {
            addr,
            stop,
            connections,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
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

impl Drop for CallbackServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_callback(stream: TcpStream, services: Arc<ManagerServices>) {
    let Ok(w) = stream.try_clone() else { return };
    let mut writer = BufWriter::new(w);
    let mut reader = BufReader::new(stream);
    let reply = |m: &Message, rid: u64, writer: &mut BufWriter<TcpStream>| -> bool {
        match encode_frame(m, rid) {
            Ok(f) => writer.write_all(&f).and_then(|_| writer.flush()).is_ok(),
            Err(_) => false,
        }
    };

    match read_frame(&mut reader) {
        Ok((hello @ Message::Hello { .. }, rid)) => {
            let r = services.handle_callback(hello).expect("hello is answered");
            let ok = matches!(r, Message::Ok { .. });
            if !reply(&r, rid, &mut writer) || !ok {
                return;
            }
        }
        Ok((other, rid)) => {
            reply(
                &Message::err(ErrorCode::Malformed, format!("expected handshake, got {:#04x}", other.msg_type())),
                rid,
                &mut writer,
            );
            return;
        }
        Err(_) => return,
    }

    let mut host = None;
    loop {
        match read_frame(&mut reader) {
            Ok((m, rid)) => {
                if let Message::EventPush { event } = &m {
                    if let EventSource::Host(h) = event.source {
                        host.get_or_insert(h);
                    }
                }
                let one_way = m.msg_type() == msg_type::EVENT_PUSH;
                if let Some(r) = services.handle_callback(m) {
                    if !one_way && !reply(&r, rid, &mut writer) {
                        break;
                    }
                }
            }
            Err(WireError::UnknownMsgType(t)) => log::warn!("callback: skipping frame of type {t:#04x}"),
            Err(_) => break,
        }
    }
    if let Some(h) = host {
        services.host_disconnected(h);
    }
}
