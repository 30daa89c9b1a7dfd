//! TCP runtime for deployment mode.
//!
//! One event loop owns the [`Node`]. Each inbound connection gets a reader
//! thread feeding the loop's inbox; each peer gets a writer thread with its
//! own outbound connection, opened lazily and dropped on error. Delivery is
//! at-most-once: frames for an unreachable peer are discarded and the
//! protocol's timeouts take over.
//!
//! Control requests (type 0x21) are answered on the connection they arrived
//! on, so a client needs no listening socket of its own.

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::crypto::NodeId;
use crate::protocol::messages::msg_type;
use crate::protocol::{Action, ControlRequest, ControlResponse, Millis, Node, OpId, OpResult, Timer};
use crate::Digest256;

use super::wire::{read_frame, write_frame, Envelope, WireError, VERSION};

const THREAD_STACK: usize = 256 << 10;
const CONNECT_TIMEOUT: Duration = Duration::from_millis(1_000);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("bad control payload: {0}")]
    Payload(#[from] bincode::Error),
    #[error("connection closed before a response arrived")]
    Closed,
    #[error("unexpected message type {0:#04x} on control channel")]
    Unexpected(u8),
}

/// Milliseconds since the Unix epoch, the runtime's clock.
pub fn wall_clock_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

/// Counters kept by the runtime itself, alongside the node's own.
#[derive(Debug, Default, Clone)]
pub struct RuntimeStats {
    pub frames_in: u64,
    pub frames_out: u64,
    pub bad_frames: u64,
    pub unknown_peers: u64,
}

enum Event {
    Connected(u64, TcpStream),
    Frame(u64, Envelope),
    Closed(u64),
}

/// Stops a running node from another thread.
#[derive(Clone, Default)]
pub struct Shutdown(Arc<AtomicBool>);

impl Shutdown {
    pub fn new() -> Shutdown {
        Shutdown::default()
    }

    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct Runtime {
    node: Node,
    listener: TcpListener,
    addresses: BTreeMap<NodeId, SocketAddr>,
    writers: HashMap<NodeId, Sender<Vec<u8>>>,
    control: HashMap<u64, TcpStream>,
    ops: HashMap<OpId, u64>,
    timers: BinaryHeap<Reverse<(Millis, u64, Timer)>>,
    timer_seq: u64,
    stats: RuntimeStats,
}

impl Runtime {
    /// Binds `listen`; `addresses` maps every peer to its listening address.
    pub fn bind(node: Node, listen: &str, addresses: BTreeMap<NodeId, SocketAddr>) -> io::Result<Runtime> {
        Ok(Runtime::from_listener(node, TcpListener::bind(listen)?, addresses))
    }

    pub fn from_listener(node: Node, listener: TcpListener, addresses: BTreeMap<NodeId, SocketAddr>) -> Runtime {
        Runtime {
            node,
            listener,
            addresses,
            writers: HashMap::new(),
            control: HashMap::new(),
            ops: HashMap::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            stats: RuntimeStats::default(),
        }
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn stats(&self) -> &RuntimeStats {
        &self.stats
    }

    /// Serves until `shutdown` is triggered. Returns the node for inspection.
    pub fn run(mut self, shutdown: Shutdown) -> io::Result<Node> {
        let (tx, rx) = mpsc::channel();
        spawn_acceptor(self.listener.try_clone()?, tx, shutdown.clone())?;
        let actions = self.node.start(wall_clock_ms());
        self.apply(actions);
        while !shutdown.is_set() {
            self.fire_timers();
            let wait = self
                .timers
                .peek()
                .map(|Reverse((at, ..))| at.saturating_sub(wall_clock_ms()))
                .unwrap_or(100)
                .min(100);
            match rx.recv_timeout(Duration::from_millis(wait)) {
                Ok(ev) => {
                    self.on_event(ev);
                    while let Ok(ev) = rx.try_recv() {
                        self.on_event(ev);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        // Wake the acceptor so it notices the flag.
        if let Ok(addr) = self.listener.local_addr() {
            let _ = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT);
        }
        Ok(self.node)
    }

    fn fire_timers(&mut self) {
        loop {
            let now = wall_clock_ms();
            match self.timers.peek() {
                Some(Reverse((at, ..))) if *at <= now => {}
                _ => return,
            }
            let Reverse((_, _, timer)) = self.timers.pop().unwrap();
            let actions = self.node.handle_timer(now, timer);
            self.apply(actions);
        }
    }

    fn on_event(&mut self, ev: Event) {
        match ev {
            Event::Connected(conn, stream) => {
                self.control.insert(conn, stream);
            }
            Event::Closed(conn) => {
                self.control.remove(&conn);
            }
            Event::Frame(conn, env) => {
                self.stats.frames_in += 1;
                if env.dst != self.node.id() && env.msg_type != msg_type::CONTROL_REQUEST {
                    self.stats.bad_frames += 1;
                    return;
                }
                if env.msg_type == msg_type::CONTROL_REQUEST {
                    self.on_control(conn, &env.payload);
                    return;
                }
                match env.message() {
                    Ok(msg) => {
                        let actions = self.node.handle_message(wall_clock_ms(), env.src, msg);
                        self.apply(actions);
                    }
                    Err(_) => self.stats.bad_frames += 1,
                }
            }
        }
    }

    fn on_control(&mut self, conn: u64, payload: &[u8]) {
        let req: ControlRequest = match bincode::deserialize(payload) {
            Ok(r) => r,
            Err(e) => {
                let resp = ControlResponse::Done(OpResult::Failed(format!("bad control request: {e}")));
                self.respond(conn, &resp);
                return;
            }
        };
        let now = wall_clock_ms();
        let (op, actions) = match req {
            ControlRequest::Store { data, secret, expiration } => self.node.begin_store(now, data, secret, expiration),
            ControlRequest::Query { recipe, secret } => self.node.begin_query(now, recipe, &secret),
            ControlRequest::Evict { chunk_hash } => self.node.begin_evict(now, chunk_hash),
            ControlRequest::View { chunk_hash } => self.node.begin_view(now, chunk_hash),
            ControlRequest::Stats => {
                let resp = ControlResponse::Stats(self.node.stats().clone());
                self.respond(conn, &resp);
                return;
            }
        };
        self.ops.insert(op, conn);
        self.apply(actions);
    }

    fn respond(&mut self, conn: u64, resp: &ControlResponse) {
        let Some(stream) = self.control.get_mut(&conn) else { return };
        let env = Envelope {
            version: VERSION,
            msg_type: msg_type::CONTROL_RESPONSE,
            src: self.node.id(),
            dst: Digest256([0; 32]),
            payload: bincode::serialize(resp).expect("in-memory serialization cannot fail"),
        };
        if write_frame(stream, &env).and_then(|_| stream.flush().map_err(WireError::from)).is_err() {
            self.control.remove(&conn);
        }
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    let env = Envelope::new(self.node.id(), to, &msg);
                    match super::wire::encode_envelope(&env) {
                        Ok(bytes) => self.send_bytes(to, bytes),
                        Err(_) => self.stats.bad_frames += 1,
                    }
                }
                Action::Timer { at, timer } => {
                    self.timer_seq += 1;
                    self.timers.push(Reverse((at, self.timer_seq, timer)));
                }
            }
        }
        for (op, result) in self.node.take_completed() {
            if let Some(conn) = self.ops.remove(&op) {
                self.respond(conn, &ControlResponse::Done(result));
            }
        }
    }

    fn send_bytes(&mut self, to: NodeId, bytes: Vec<u8>) {
        if !self.writers.contains_key(&to) {
            let Some(addr) = self.addresses.get(&to).copied() else {
                self.stats.unknown_peers += 1;
                return;
            };
            match spawn_writer(addr) {
                Ok(tx) => {
                    self.writers.insert(to, tx);
                }
                Err(_) => return,
            }
        }
        self.stats.frames_out += 1;
        if self.writers[&to].send(bytes).is_err() {
            self.writers.remove(&to);
        }
    }
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>, shutdown: Shutdown) -> io::Result<()> {
    thread::Builder::new()
        .name("accept".into())
        .stack_size(THREAD_STACK)
        .spawn(move || {
            let mut next = 0u64;
            for stream in listener.incoming() {
                if shutdown.is_set() {
                    return;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                next += 1;
                let conn = next;
                let Ok(write_half) = stream.try_clone() else { continue };
                if tx.send(Event::Connected(conn, write_half)).is_err() {
                    return;
                }
                let tx = tx.clone();
                let spawned = thread::Builder::new()
                    .name("read".into())
                    .stack_size(THREAD_STACK)
                    .spawn(move || reader(conn, stream, tx));
                if spawned.is_err() {
                    continue;
                }
            }
        })?;
    Ok(())
}

fn reader(conn: u64, stream: TcpStream, tx: Sender<Event>) {
    let mut r = BufReader::new(stream);
    loop {
        match read_frame(&mut r) {
            Ok(Some(env)) => {
                if tx.send(Event::Frame(conn, env)).is_err() {
                    return;
                }
            }
            // A malformed frame desynchronizes the stream; drop the connection.
            Ok(None) | Err(_) => {
                let _ = tx.send(Event::Closed(conn));
                return;
            }
        }
    }
}

fn spawn_writer(addr: SocketAddr) -> io::Result<Sender<Vec<u8>>> {
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    thread::Builder::new()
        .name("write".into())
        .stack_size(THREAD_STACK)
        .spawn(move || writer(addr, rx))?;
    Ok(tx)
}

fn writer(addr: SocketAddr, rx: Receiver<Vec<u8>>) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    while let Ok(frame) = rx.recv() {
        if conn.is_none() {
            conn = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).ok().map(|s| {
                let _ = s.set_nodelay(true);
                BufWriter::new(s)
            });
        }
        let Some(w) = conn.as_mut() else { continue };
        let mut ok = w.write_all(&frame).is_ok();
        // Coalesce whatever else is queued before flushing.
        while ok {
            match rx.try_recv() {
                Ok(f) => ok = w.write_all(&f).is_ok(),
                Err(_) => break,
            }
        }
        if !ok || w.flush().is_err() {
            conn = None;
        }
    }
}

/// Sends one control request to the node at `addr` and waits for its answer.
pub fn control(addr: &str, node: NodeId, req: &ControlRequest, timeout: Duration) -> Result<ControlResponse, TransportError> {
    let target = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("no address for {addr}")))?;
    let stream = TcpStream::connect_timeout(&target, CONNECT_TIMEOUT)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let env = Envelope {
        version: VERSION,
        msg_type: msg_type::CONTROL_REQUEST,
        src: Digest256([0; 32]),
        dst: node,
        payload: bincode::serialize(req)?,
    };
    let mut w = BufWriter::new(stream.try_clone()?);
    write_frame(&mut w, &env)?;
    w.flush()?;
    let mut r = BufReader::new(stream);
    let resp = read_frame(&mut r)?.ok_or(TransportError::Closed)?;
    if resp.msg_type != msg_type::CONTROL_RESPONSE {
        return Err(TransportError::Unexpected(resp.msg_type));
    }
    Ok(bincode::deserialize(&resp.payload)?)
}
