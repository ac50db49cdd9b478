//! Multiplexed request/response client over one TCP connection.
//!
//! Many threads may call [`RpcConnection::request`] at once; a single reader
//! thread routes each response to its waiter by request id and hands any
//! non-response frame (event pushes) to the push handler, in arrival order.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use crate::wire::{encode_frame, read_frame, ErrorCode, Message, WireError, PROTOCOL_VERSION};

type Waiter = mpsc::Sender<Result<Message, WireError>>;

pub struct RpcConnection {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    /// `None` once the connection is closed.
    pending: Mutex<Option<HashMap<u64, Waiter>>>,
    next_rid: AtomicU64,
}

impl std::fmt::Debug for RpcConnection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RpcConnection")
            .field("peer", &self.stream.peer_addr().ok())
            .field("closed", &self.is_closed())
            .finish()
    }
}

/// Connects with a timeout, trying each resolved address.
pub fn connect(addr: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let mut last = None;
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address")))
}

impl RpcConnection {
    /// Takes ownership of `stream` and starts the reader thread.
    /// `on_close` runs once, after every pending request has failed.
    pub fn start(
        stream: TcpStream,
        mut on_push: impl FnMut(Message) + Send + 'static,
        on_close: impl FnOnce() + Send + 'static,
    ) -> std::io::Result<Arc<Self>> {
        let conn = Arc::new(Self {
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            stream: stream.try_clone()?,
            pending: Mutex::new(Some(HashMap::new())),
            next_rid: AtomicU64::new(1),
        });
        let reader_conn = conn.clone();
        std::thread::Builder::new()
            .name("rpc-reader".into())
            .spawn(move || {
                let mut r = BufReader::new(stream);
                loop {
                    match read_frame(&mut r) {
                        Ok((m, rid)) if m.is_response() => {
                            let waiter = reader_conn
                                .pending
                                .lock()
                                .unwrap()
                                .as_mut()
                                .and_then(|p| p.remove(&rid));
                            match waiter {
                                Some(w) => {
                                    let _ = w.send(Ok(m));
                                }
                                None => log::warn!("response for unknown request id {rid}"),
                            }
                        }
                        Ok((m, _)) => on_push(m),
                        Err(WireError::UnknownMsgType(t)) => log::warn!("skipping frame of type {t:#04x}"),
                        Err(_) => break,
                    }
                }
                reader_conn.fail_all();
                on_close();
            })?;
        Ok(conn)
    }

    fn fail_all(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(p) = self.pending.lock().unwrap().take() {
            for (_, w) in p {
                let _ = w.send(Err(WireError::ConnectionClosed));
            }
        }
    }

    pub fn is_closed(&self) -> bool {
        self.pending.lock().unwrap().is_none()
    }

    fn write(&self, m: &Message, rid: u64) -> Result<(), WireError> {
        let frame = encode_frame(m, rid)?;
        let mut w = self.writer.lock().unwrap();
        w.write_all(&frame)?;
        w.flush()?;
        Ok(())
    }

    /// Sends `m` and blocks until its response arrives.
    pub fn request(&self, m: &Message) -> Result<Message, WireError> {
        let rid = self.next_rid.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        match self.pending.lock().unwrap().as_mut() {
            Some(p) => p.insert(rid, tx),
            None => return Err(WireError::ConnectionClosed),
        };
        if let Err(e) = self.write(m, rid) {
            if let Some(p) = self.pending.lock().unwrap().as_mut() {
                p.remove(&rid);
            }
            return Err(match e {
                WireError::Io(_) => WireError::ConnectionClosed,
                e => e,
            });
        }
        rx.recv().unwrap_or(Err(WireError::ConnectionClosed))
    }

    /// Sends a frame that expects no response.
    pub fn send(&self, m: &Message) -> Result<(), WireError> {
        if self.is_closed() {
            return Err(WireError::ConnectionClosed);
        }
        self.write(m, 0)
    }

    /// Exchanges the protocol version and registry digest with the peer.
    pub fn handshake(&self, registry_digest: [u8; 32]) -> Result<(), HandshakeError> {
        let hello = Message::Hello {
            version: PROTOCOL_VERSION,
            registry_digest,
        };
        match self.request(&hello)? {
            Message::Ok { .. } => Ok(()),
            Message::Err { code, detail } => Err(HandshakeError::Rejected(code, detail)),
            other => Err(HandshakeError::Wire(WireError::MalformedFrame(format!(
                "unexpected handshake reply {other:?}"
            )))),
        }
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HandshakeError {
    #[error("handshake rejected ({0:?}): {1}")]
    Rejected(ErrorCode, String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Server-side check of a peer's hello.
pub fn check_hello(m: &Message, registry_digest: &[u8; 32]) -> Message {
    match m {
        Message::Hello { version, .. } if *version != PROTOCOL_VERSION => Message::err(
            ErrorCode::RegistryMismatch,
            format!("protocol version {version}, expected {PROTOCOL_VERSION}"),
        ),
        Message::Hello {
            registry_digest: d, ..
        } if d != registry_digest => Message::err(
            ErrorCode::RegistryMismatch,
            format!("registry digest {} does not match {}", hex::encode(d), hex::encode(registry_digest)),
        ),
        Message::Hello { .. } => Message::ok(crate::value::Value::Null),
        other => Message::err(
            ErrorCode::Malformed,
            format!("expected handshake, got message type {:#04x}", other.msg_type()),
        ),
    }
}
