//! Worker/endpoint transport carrying tagged messages.
//!
//! A [`Worker`] owns endpoints and moves their traffic only inside
//! [`Worker::progress`]. Two backends sit behind the same surface:
//!
//! * `loopback`: in-process FIFO pipes. Fully deterministic: every progress
//!   call moves at most one message per endpoint and direction.
//! * `stream`: framed messages over non-blocking TCP, for runs across processes.
//!
//! Flow control is credit based. The connector announces its receive capacity
//! in the SYN, the acceptor answers with an ACK carrying its own. Afterwards a
//! receiver returns credit in ACKs once a quarter of its capacity has been
//! consumed since the last grant.

mod loopback;
mod stream;
mod tag;
#[cfg(test)]
mod tests;

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use loopback::{LoopListener, LoopSyn, Pipe, PipePair, PipeRecv};
use stream::{FrameResult, StreamLink};
pub use tag::{
    decode_frame, Decoded, Direction, MessageKind, Tag, TaggedMessage, FRAME_HEADER_LEN, MAX_GRANT,
};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown backend {0:?} (expected \"loopback\" or \"stream\")")]
    UnknownBackend(String),
    #[error("backend initialization failed: {0}")]
    Init(#[source] io::Error),
    #[error("invalid address {0:?}")]
    InvalidAddress(String),
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error("handshake with {0} timed out")]
    HandshakeTimeout(String),
    #[error("connection to {remote} refused: {reason}")]
    ConnectionRefused { remote: String, reason: String },
    #[error("payload length {len} outside 1..={max}")]
    InvalidLength { len: usize, max: usize },
    #[error("insufficient credit")]
    WouldBlock,
    #[error("endpoint not established")]
    NotEstablished,
    #[error("endpoint closed")]
    Closed,
    #[error("tag {0:?} does not belong to this endpoint")]
    InvalidTag(Tag),
    #[error("no such endpoint")]
    UnknownEndpoint,
    #[error("worker is not listening")]
    NotListening,
    #[error("protocol violation on connection {connection_id}: {detail}")]
    Protocol { connection_id: u32, detail: String },
    #[error("backend failure on connection {connection_id}: {source}")]
    Backend {
        connection_id: u32,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Loopback,
    Stream,
}

impl FromStr for Backend {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Backend::Loopback),
            "stream" => Ok(Backend::Stream),
            other => Err(TransportError::UnknownBackend(other.to_string())),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Loopback => "loopback",
            Backend::Stream => "stream",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Upper bound for a DATA payload.
    pub slice_length: usize,
    pub handshake_timeout: Duration,
    /// How long a graceful close may spend draining pending sends.
    pub close_timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            slice_length: crate::ringbuf::DEFAULT_SLICE_LENGTH,
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            close_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
        }
    }
}

struct Shared {
    backend: Backend,
    config: TransportConfig,
    loop_listeners: Mutex<HashMap<String, Arc<LoopListener>>>,
    next_worker_id: AtomicU64,
    live_workers: AtomicUsize,
    data_requests: AtomicU64,
}

/// Entry point of a backend instance. Cheap to clone; clones share the
/// loopback listener table and counters.
#[derive(Clone)]
pub struct Transport {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transport")
            .field("backend", &self.shared.backend)
            .field("live_workers", &self.live_workers())
            .finish()
    }
}

impl Transport {
    pub fn new(backend: Backend, config: TransportConfig) -> Self {
        Self {
            shared: Arc::new(Shared {
                backend,
                config,
                loop_listeners: Mutex::new(HashMap::new()),
                next_worker_id: AtomicU64::new(1),
                live_workers: AtomicUsize::new(0),
                data_requests: AtomicU64::new(0),
            }),
        }
    }

    pub fn from_name(name: &str, config: TransportConfig) -> Result<Self, TransportError> {
        Ok(Self::new(name.parse()?, config))
    }

    pub fn backend(&self) -> Backend {
        self.shared.backend
    }

    pub fn config(&self) -> &TransportConfig {
        &self.shared.config
    }

    pub fn create_worker(&self) -> Result<Worker, TransportError> {
        let id = self.shared.next_worker_id.fetch_add(1, Ordering::Relaxed);
        self.shared.live_workers.fetch_add(1, Ordering::SeqCst);
        Ok(Worker {
            id,
            shared: Arc::clone(&self.shared),
            endpoints: Vec::new(),
            listener: None,
            backlog: VecDeque::new(),
        })
    }

    pub fn live_workers(&self) -> usize {
        self.shared.live_workers.load(Ordering::SeqCst)
    }

    /// DATA send requests issued by all workers of this transport.
    pub fn data_requests(&self) -> u64 {
        self.shared.data_requests.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Endpoint {
    worker: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointState {
    Handshaking,
    Established,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    Graceful,
    Abort,
}

/// Completion handle for a send request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestHandle {
    endpoint: Endpoint,
    seq: u64,
}

/// Snapshot of an endpoint's bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointInfo {
    pub connection_id: u32,
    pub state: EndpointState,
    pub local_addr: String,
    pub remote_addr: String,
    pub end_of_stream: bool,
    /// Cumulative DATA bytes the peer has allowed us to send.
    pub credit_limit: u64,
    /// Cumulative DATA bytes issued.
    pub data_bytes_sent: u64,
    pub data_requests: u64,
    pub pending_sends: usize,
    pub pending_receives: usize,
}

impl EndpointInfo {
    pub fn available_credit(&self) -> u64 {
        self.credit_limit.saturating_sub(self.data_bytes_sent)
    }
}

/// A handshaken connection waiting to be adopted by a worker.
pub struct Incoming {
    connection_id: u32,
    local_addr: String,
    remote_addr: String,
    initial_credit: u64,
    link: Link,
}

impl std::fmt::Debug for Incoming {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Incoming")
            .field("connection_id", &self.connection_id)
            .field("remote_addr", &self.remote_addr)
            .finish()
    }
}

impl Incoming {
    pub fn connection_id(&self) -> u32 {
        self.connection_id
    }

    pub fn remote_addr(&self) -> &str {
        &self.remote_addr
    }
}

enum Link {
    LoopConnecting {
        addr: String,
        to_server: Arc<Pipe>,
        to_client: Arc<Pipe>,
    },
    Loop(PipePair),
    Stream(StreamLink),
    Detached,
}

struct Slot {
    connection_id: u32,
    direction: Direction,
    state: EndpointState,
    link: Link,
    local_addr: String,
    remote_addr: String,
    outbox: VecDeque<TaggedMessage>,
    issued: u64,
    completed: u64,
    inbox: VecDeque<Vec<u8>>,
    inbox_bytes: usize,
    end_of_stream: bool,
    failure: Option<TransportError>,
    deadline: Option<Instant>,
    credit_limit: u64,
    data_bytes_sent: u64,
    data_requests: u64,
    recv_capacity: u64,
    consumed: u64,
    consumed_at_grant: u64,
}

impl Slot {
    fn new(direction: Direction, link: Link, recv_capacity: u64) -> Self {
        Self {
            connection_id: 0,
            direction,
            state: EndpointState::Handshaking,
            link,
            local_addr: String::new(),
            remote_addr: String::new(),
            outbox: VecDeque::new(),
            issued: 0,
            completed: 0,
            inbox: VecDeque::new(),
            inbox_bytes: 0,
            end_of_stream: false,
            failure: None,
            deadline: None,
            credit_limit: 0,
            data_bytes_sent: 0,
            data_requests: 0,
            recv_capacity,
            consumed: 0,
            consumed_at_grant: 0,
        }
    }

    fn tag(&self, kind: MessageKind, reserved: u32) -> Tag {
        Tag::new(self.connection_id, self.direction, kind, reserved)
    }

    fn enqueue(&mut self, msg: TaggedMessage) -> u64 {
        let seq = self.issued;
        self.issued += 1;
        self.outbox.push_back(msg);
        seq
    }

    fn enqueue_grant(&mut self, mut amount: u64) {
        while amount > 0 {
            let chunk = amount.min(MAX_GRANT as u64);
            let tag = self.tag(MessageKind::Ack, chunk as u32);
            self.enqueue(TaggedMessage::control(tag));
            amount -= chunk;
        }
    }

    fn fail(&mut self, err: TransportError) {
        self.failure = Some(err);
        self.state = EndpointState::Closed;
        self.outbox.clear();
        self.link = Link::Detached;
    }

    fn mark_end_of_stream(&mut self) -> usize {
        if self.end_of_stream {
            0
        } else {
            self.end_of_stream = true;
            1
        }
    }

    /// Moves what the backend allows without blocking. Returns events handled.
    fn progress(&mut self, slice_length: usize) -> Result<usize, TransportError> {
        if self.state == EndpointState::Closed {
            return Ok(0);
        }
        let mut events = 0;

        if self.state == EndpointState::Handshaking {
            if let Some(deadline) = self.deadline {
                if Instant::now() >= deadline {
                    let remote = self.remote_addr.clone();
                    self.fail(TransportError::HandshakeTimeout(remote));
                    return Ok(1);
                }
            }
            events += self.progress_connect()?;
            if self.state == EndpointState::Closed {
                return Ok(events);
            }
        }

        events += self.progress_sends()?;
        events += self.progress_receives(slice_length)?;
        Ok(events)
    }

    fn progress_connect(&mut self) -> Result<usize, TransportError> {
        match &mut self.link {
            Link::LoopConnecting { .. } => Ok(0),
            Link::Stream(link) => match link.poll_connect() {
                Ok(_) => Ok(0),
                Err(e) => {
                    let remote = self.remote_addr.clone();
                    self.fail(TransportError::ConnectionRefused {
                        remote,
                        reason: e.to_string(),
                    });
                    Ok(1)
                }
            },
            _ => Ok(0),
        }
    }

    fn progress_sends(&mut self) -> Result<usize, TransportError> {
        let mut events = 0;
        match &mut self.link {
            // The SYN of a loopback connect travels through the listener queue.
            Link::LoopConnecting { .. } => {}
            Link::Loop(pair) => {
                if let Some(msg) = self.outbox.pop_front() {
                    pair.tx.push(msg);
                    self.completed += 1;
                    events += 1;
                }
            }
            Link::Stream(link) => {
                while link.can_enqueue() {
                    let Some(msg) = self.outbox.pop_front() else {
                        break;
                    };
                    link.enqueue(&msg);
                    self.completed += 1;
                    events += 1;
                }
                if let Err(e) = link.flush() {
                    return self.io_failure(e).map(|n| n + events);
                }
            }
            Link::Detached => {}
        }
        Ok(events)
    }

    fn progress_receives(&mut self, slice_length: usize) -> Result<usize, TransportError> {
        let mut events = 0;
        match &mut self.link {
            Link::Loop(pair) => match pair.rx.pop() {
                PipeRecv::Message(msg) => events += self.deliver(msg, slice_length)?,
                PipeRecv::Empty => {}
                PipeRecv::Closed => events += self.peer_gone(),
            },
            Link::Stream(link) => {
                if link.poll_connect().unwrap_or(false) {
                    let closed = match link.fill() {
                        Ok(closed) => closed,
                        Err(e) => return self.io_failure(e).map(|n| n + events),
                    };
                    loop {
                        let Link::Stream(link) = &mut self.link else {
                            break;
                        };
                        match link.next_frame(slice_length.max(64)) {
                            FrameResult::Frame(msg) => events += self.deliver(msg, slice_length)?,
                            FrameResult::None => break,
                            FrameResult::TooLong(len) => {
                                let id = self.connection_id;
                                self.fail(TransportError::Protocol {
                                    connection_id: id,
                                    detail: format!("frame of {len} bytes exceeds slice length"),
                                });
                                return Ok(events + 1);
                            }
                        }
                    }
                    if closed {
                        events += self.peer_gone();
                    }
                }
            }
            Link::LoopConnecting { to_client, .. } => {
                if let PipeRecv::Closed = to_client.pop() {
                    let remote = self.remote_addr.clone();
                    self.fail(TransportError::ConnectionRefused {
                        remote,
                        reason: "listener closed".into(),
                    });
                    events += 1;
                }
            }
            Link::Detached => {}
        }
        Ok(events)
    }

    fn io_failure(&mut self, e: io::Error) -> Result<usize, TransportError> {
        match e.kind() {
            io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::UnexpectedEof => {
                // Abrupt peer termination reads as end-of-stream.
                self.outbox.clear();
                self.link = Link::Detached;
                Ok(self.mark_end_of_stream())
            }
            _ => {
                let id = self.connection_id;
                self.state = EndpointState::Closed;
                self.link = Link::Detached;
                Err(TransportError::Backend {
                    connection_id: id,
                    source: e,
                })
            }
        }
    }

    fn peer_gone(&mut self) -> usize {
        if self.state == EndpointState::Handshaking {
            let remote = self.remote_addr.clone();
            self.fail(TransportError::ConnectionRefused {
                remote,
                reason: "peer closed during handshake".into(),
            });
            return 1;
        }
        self.mark_end_of_stream()
    }

    fn deliver(&mut self, msg: TaggedMessage, slice_length: usize) -> Result<usize, TransportError> {
        let tag = msg.tag;
        if tag.direction() == self.direction {
            return Err(TransportError::Protocol {
                connection_id: self.connection_id,
                detail: format!("message with own direction: {tag:?}"),
            });
        }
        match tag.kind() {
            MessageKind::Data => {
                if self.state != EndpointState::Established
                    || msg.payload.is_empty()
                    || msg.payload.len() > slice_length
                {
                    return Err(TransportError::Protocol {
                        connection_id: self.connection_id,
                        detail: format!("unexpected DATA of {} bytes", msg.payload.len()),
                    });
                }
                if !self.end_of_stream {
                    self.inbox_bytes += msg.payload.len();
                    self.inbox.push_back(msg.payload);
                }
            }
            MessageKind::Ack => {
                if self.state == EndpointState::Handshaking {
                    self.connection_id = tag.connection_id();
                    self.state = EndpointState::Established;
                    self.deadline = None;
                }
                self.credit_limit += tag.reserved() as u64;
            }
            MessageKind::Fin => {
                return Ok(self.mark_end_of_stream());
            }
            MessageKind::Syn => {
                return Err(TransportError::Protocol {
                    connection_id: self.connection_id,
                    detail: "SYN on established connection".into(),
                });
            }
        }
        Ok(1)
    }
}

enum ListenerSlot {
    Loopback {
        addr: String,
        listener: Arc<LoopListener>,
    },
    Stream {
        listener: TcpListener,
        next_connection_id: u32,
        handshaking: Vec<StreamLink>,
    },
}

/// Progress engine for a set of endpoints (and optionally one listener).
pub struct Worker {
    id: u64,
    shared: Arc<Shared>,
    endpoints: Vec<Slot>,
    listener: Option<ListenerSlot>,
    backlog: VecDeque<Incoming>,
}

impl std::fmt::Debug for Worker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Worker")
            .field("id", &self.id)
            .field("endpoints", &self.endpoints.len())
            .field("listening", &self.listener.is_some())
            .finish()
    }
}

impl Worker {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn backend(&self) -> Backend {
        self.shared.backend
    }

    fn slice_length(&self) -> usize {
        self.shared.config.slice_length
    }

    fn slot(&self, ep: Endpoint) -> Result<&Slot, TransportError> {
        if ep.worker != self.id {
            return Err(TransportError::UnknownEndpoint);
        }
        self.endpoints
            .get(ep.index)
            .ok_or(TransportError::UnknownEndpoint)
    }

    fn slot_mut(&mut self, ep: Endpoint) -> Result<&mut Slot, TransportError> {
        if ep.worker != self.id {
            return Err(TransportError::UnknownEndpoint);
        }
        self.endpoints
            .get_mut(ep.index)
            .ok_or(TransportError::UnknownEndpoint)
    }

    fn push_slot(&mut self, slot: Slot) -> Endpoint {
        self.endpoints.push(slot);
        Endpoint {
            worker: self.id,
            index: self.endpoints.len() - 1,
        }
    }

    /// Starts listening for connections. Returns the bound address.
    pub fn listen(&mut self, addr: &str) -> Result<String, TransportError> {
        match self.shared.backend {
            Backend::Loopback => {
                let mut table = self.shared.loop_listeners.lock().unwrap();
                if table.contains_key(addr) {
                    return Err(TransportError::AddressInUse(addr.to_string()));
                }
                let listener = Arc::new(LoopListener::new());
                table.insert(addr.to_string(), Arc::clone(&listener));
                self.listener = Some(ListenerSlot::Loopback {
                    addr: addr.to_string(),
                    listener,
                });
                Ok(addr.to_string())
            }
            Backend::Stream => {
                let sockaddr = resolve(addr)?;
                let listener = TcpListener::bind(sockaddr).map_err(|e| match e.kind() {
                    io::ErrorKind::AddrInUse => TransportError::AddressInUse(addr.to_string()),
                    _ => TransportError::Init(e),
                })?;
                listener.set_nonblocking(true).map_err(TransportError::Init)?;
                let bound = listener
                    .local_addr()
                    .map_err(TransportError::Init)?
                    .to_string();
                self.listener = Some(ListenerSlot::Stream {
                    listener,
                    next_connection_id: 1,
                    handshaking: Vec::new(),
                });
                Ok(bound)
            }
        }
    }

    pub fn is_listening(&self) -> bool {
        self.listener.is_some()
    }

    /// Stops listening; queued but unaccepted connections are dropped.
    pub fn unlisten(&mut self) {
        match self.listener.take() {
            Some(ListenerSlot::Loopback { addr, listener }) => {
                listener.close();
                let mut table = self.shared.loop_listeners.lock().unwrap();
                if table.get(&addr).is_some_and(|l| Arc::ptr_eq(l, &listener)) {
                    table.remove(&addr);
                }
            }
            Some(ListenerSlot::Stream { .. }) | None => {}
        }
        self.backlog.clear();
    }

    /// Opens an endpoint towards `remote` and queues the SYN.
    ///
    /// `recv_capacity` is the initial credit granted to the peer.
    pub fn connect_endpoint(
        &mut self,
        remote: &str,
        recv_capacity: u64,
    ) -> Result<Endpoint, TransportError> {
        let (link, local_addr) = match self.shared.backend {
            Backend::Loopback => {
                let local = format!("loopback:{}.{}", self.id, self.endpoints.len());
                (
                    Link::LoopConnecting {
                        addr: remote.to_string(),
                        to_server: Arc::new(Pipe::default()),
                        to_client: Arc::new(Pipe::default()),
                    },
                    local,
                )
            }
            Backend::Stream => {
                let sockaddr = resolve(remote)?;
                match StreamLink::connect(sockaddr) {
                    Ok(link) => {
                        let local = link.local_addr();
                        (Link::Stream(link), local)
                    }
                    Err(e) => {
                        // Reported through the endpoint like any later failure.
                        let mut slot = Slot::new(Direction::ToServer, Link::Detached, recv_capacity);
                        slot.remote_addr = remote.to_string();
                        slot.fail(TransportError::ConnectionRefused {
                            remote: remote.to_string(),
                            reason: e.to_string(),
                        });
                        return Ok(self.push_slot(slot));
                    }
                }
            }
        };
        let mut slot = Slot::new(Direction::ToServer, link, recv_capacity);
        slot.local_addr = local_addr.clone();
        slot.remote_addr = remote.to_string();
        slot.deadline = Some(Instant::now() + self.shared.config.handshake_timeout);
        let syn = TaggedMessage::new(
            slot.tag(MessageKind::Syn, 0),
            tag::encode_syn(recv_capacity, &local_addr),
        );
        slot.enqueue(syn);
        Ok(self.push_slot(slot))
    }

    /// Takes the next handshaken connection off this worker's listener backlog.
    pub fn accept_pending(&mut self) -> Result<Option<Incoming>, TransportError> {
        if self.listener.is_none() {
            return Err(TransportError::NotListening);
        }
        Ok(self.backlog.pop_front())
    }

    pub fn pending_connections(&self) -> usize {
        self.backlog.len()
    }

    /// Binds an accepted connection to this worker and queues the ACK that
    /// completes the peer's handshake.
    pub fn adopt(&mut self, incoming: Incoming, recv_capacity: u64) -> Endpoint {
        let mut slot = Slot::new(Direction::ToClient, incoming.link, recv_capacity);
        slot.connection_id = incoming.connection_id;
        slot.state = EndpointState::Established;
        slot.local_addr = incoming.local_addr;
        slot.remote_addr = incoming.remote_addr;
        slot.credit_limit = incoming.initial_credit;
        slot.enqueue_grant(recv_capacity.max(1));
        self.push_slot(slot)
    }

    /// Queues a DATA message. Only DATA tags of this endpoint are accepted;
    /// control traffic is generated internally.
    pub fn send_tagged(
        &mut self,
        ep: Endpoint,
        tag: Tag,
        payload: &[u8],
    ) -> Result<RequestHandle, TransportError> {
        let slice_length = self.slice_length();
        let slot = self.slot_mut(ep)?;
        match slot.state {
            EndpointState::Closed => return Err(TransportError::Closed),
            EndpointState::Handshaking => return Err(TransportError::NotEstablished),
            EndpointState::Established => {}
        }
        if tag != slot.tag(MessageKind::Data, 0) {
            return Err(TransportError::InvalidTag(tag));
        }
        if payload.is_empty() || payload.len() > slice_length {
            return Err(TransportError::InvalidLength {
                len: payload.len(),
                max: slice_length,
            });
        }
        if (payload.len() as u64) > slot.credit_limit - slot.data_bytes_sent {
            return Err(TransportError::WouldBlock);
        }
        slot.data_bytes_sent += payload.len() as u64;
        slot.data_requests += 1;
        let seq = slot.enqueue(TaggedMessage::new(tag, payload.to_vec()));
        self.shared.data_requests.fetch_add(1, Ordering::Relaxed);
        Ok(RequestHandle { endpoint: ep, seq })
    }

    /// Convenience wrapper sending DATA with the endpoint's own tag.
    pub fn send(&mut self, ep: Endpoint, payload: &[u8]) -> Result<RequestHandle, TransportError> {
        let tag = self.data_tag(ep)?;
        self.send_tagged(ep, tag, payload)
    }

    pub fn data_tag(&self, ep: Endpoint) -> Result<Tag, TransportError> {
        Ok(self.slot(ep)?.tag(MessageKind::Data, 0))
    }

    pub fn is_complete(&self, handle: &RequestHandle) -> bool {
        match self.slot(handle.endpoint) {
            Ok(slot) => handle.seq < slot.completed || slot.state == EndpointState::Closed,
            Err(_) => true,
        }
    }

    /// Advances every endpoint and the listener without blocking.
    ///
    /// Returns the number of completions and deliveries handled; 0 means no
    /// work was available.
    pub fn progress(&mut self) -> Result<usize, TransportError> {
        let slice_length = self.slice_length();
        let mut events = 0;
        let mut first_error = None;
        for slot in &mut self.endpoints {
            if let Link::LoopConnecting { .. } = slot.link {
                events += loop_send_syn(&self.shared, slot);
            }
            match slot.progress(slice_length) {
                Ok(n) => events += n,
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
            }
        }
        events += self.progress_listener()?;
        match first_error {
            Some(e) => Err(e),
            None => Ok(events),
        }
    }

    fn progress_listener(&mut self) -> Result<usize, TransportError> {
        let slice_length = self.slice_length();
        let mut events = 0;
        match &mut self.listener {
            None => {}
            Some(ListenerSlot::Loopback { addr, listener }) => {
                if let Some(req) = listener.take() {
                    match tag::decode_syn(&req.syn.payload) {
                        Some((credit, remote)) if req.syn.tag.kind() == MessageKind::Syn => {
                            self.backlog.push_back(Incoming {
                                connection_id: listener.next_connection_id(),
                                local_addr: addr.clone(),
                                remote_addr: remote,
                                initial_credit: credit,
                                link: Link::Loop(PipePair {
                                    tx: req.to_client,
                                    rx: req.to_server,
                                }),
                            });
                        }
                        _ => req.to_client.close(),
                    }
                    events += 1;
                }
            }
            Some(ListenerSlot::Stream {
                listener,
                next_connection_id,
                handshaking,
            }) => {
                loop {
                    match listener.accept() {
                        Ok((sock, _)) => {
                            if let Ok(link) = StreamLink::accepted(sock) {
                                handshaking.push(link);
                            }
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            break;
                        }
                    }
                }
                let mut i = 0;
                while i < handshaking.len() {
                    let link = &mut handshaking[i];
                    let closed = link.fill().unwrap_or(true);
                    match link.next_frame(slice_length.max(4096)) {
                        FrameResult::Frame(msg) if msg.tag.kind() == MessageKind::Syn => {
                            let link = handshaking.swap_remove(i);
                            match tag::decode_syn(&msg.payload) {
                                Some((credit, _)) => {
                                    let id = *next_connection_id;
                                    *next_connection_id = next_connection_id.wrapping_add(1);
                                    self.backlog.push_back(Incoming {
                                        connection_id: id,
                                        local_addr: link.local_addr(),
                                        remote_addr: link.peer_addr(),
                                        initial_credit: credit,
                                        link: Link::Stream(link),
                                    });
                                    events += 1;
                                }
                                None => link.shutdown(Shutdown::Both),
                            }
                        }
                        FrameResult::None if !closed => i += 1,
                        _ => {
                            handshaking[i].shutdown(Shutdown::Both);
                            handshaking.swap_remove(i);
                        }
                    }
                }
            }
        }
        Ok(events)
    }

    pub fn endpoint_info(&self, ep: Endpoint) -> Result<EndpointInfo, TransportError> {
        let slot = self.slot(ep)?;
        Ok(EndpointInfo {
            connection_id: slot.connection_id,
            state: slot.state,
            local_addr: slot.local_addr.clone(),
            remote_addr: slot.remote_addr.clone(),
            end_of_stream: slot.end_of_stream,
            credit_limit: slot.credit_limit,
            data_bytes_sent: slot.data_bytes_sent,
            data_requests: slot.data_requests,
            pending_sends: slot.outbox.len(),
            pending_receives: slot.inbox.len(),
        })
    }

    pub fn state(&self, ep: Endpoint) -> Result<EndpointState, TransportError> {
        Ok(self.slot(ep)?.state)
    }

    pub fn is_end_of_stream(&self, ep: Endpoint) -> Result<bool, TransportError> {
        Ok(self.slot(ep)?.end_of_stream)
    }

    pub fn available_credit(&self, ep: Endpoint) -> Result<u64, TransportError> {
        let slot = self.slot(ep)?;
        Ok(slot.credit_limit - slot.data_bytes_sent)
    }

    /// Returns and clears the failure that closed the endpoint, if any.
    pub fn take_failure(&mut self, ep: Endpoint) -> Result<Option<TransportError>, TransportError> {
        Ok(self.slot_mut(ep)?.failure.take())
    }

    /// Pops the next delivered DATA payload.
    pub fn recv(&mut self, ep: Endpoint) -> Result<Option<Vec<u8>>, TransportError> {
        let slot = self.slot_mut(ep)?;
        let seg = slot.inbox.pop_front();
        if let Some(seg) = &seg {
            slot.inbox_bytes -= seg.len();
        }
        Ok(seg)
    }

    /// Reports `bytes` of delivered data as consumed by the application,
    /// returning credit to the peer once a quarter of the capacity is free.
    pub fn consume(&mut self, ep: Endpoint, bytes: usize) -> Result<(), TransportError> {
        let slot = self.slot_mut(ep)?;
        slot.consumed += bytes as u64;
        let pending = slot.consumed - slot.consumed_at_grant;
        if slot.state == EndpointState::Established
            && !slot.end_of_stream
            && pending > 0
            && pending >= (slot.recv_capacity / 4).max(1)
        {
            slot.consumed_at_grant = slot.consumed;
            slot.enqueue_grant(pending);
        }
        Ok(())
    }

    /// Closes an endpoint. Graceful close drains queued sends before the FIN;
    /// abort drops them. Closing twice is a no-op.
    pub fn close_endpoint(&mut self, ep: Endpoint, mode: CloseMode) -> Result<(), TransportError> {
        let close_timeout = self.shared.config.close_timeout;
        let slot = self.slot_mut(ep)?;
        if slot.state == EndpointState::Closed {
            return Ok(());
        }
        let mode = if slot.state == EndpointState::Handshaking {
            CloseMode::Abort
        } else {
            mode
        };
        match mode {
            CloseMode::Graceful => {
                let fin = slot.tag(MessageKind::Fin, 0);
                slot.enqueue(TaggedMessage::control(fin));
                let deadline = Instant::now() + close_timeout;
                loop {
                    let _ = slot.progress_sends();
                    let drained = slot.outbox.is_empty()
                        && match &slot.link {
                            Link::Stream(link) => link.pending_write() == 0,
                            _ => true,
                        };
                    if drained || matches!(slot.link, Link::Detached) {
                        break;
                    }
                    if Instant::now() >= deadline {
                        log::warn!(
                            "connection {}: close timed out with {} messages unsent",
                            slot.connection_id,
                            slot.outbox.len()
                        );
                        break;
                    }
                    std::thread::yield_now();
                }
                if let Link::Stream(link) = &slot.link {
                    link.shutdown(Shutdown::Write);
                }
            }
            CloseMode::Abort => {
                slot.outbox.clear();
                match &slot.link {
                    Link::Loop(pair) => pair.tx.push(TaggedMessage::control(slot.tag(MessageKind::Fin, 0))),
                    Link::Stream(link) => link.shutdown(Shutdown::Both),
                    Link::LoopConnecting { to_server, .. } => to_server.close(),
                    Link::Detached => {}
                }
            }
        }
        slot.completed = slot.issued;
        slot.state = EndpointState::Closed;
        slot.link = Link::Detached;
        slot.inbox.clear();
        slot.inbox_bytes = 0;
        Ok(())
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        for idx in 0..self.endpoints.len() {
            let ep = Endpoint {
                worker: self.id,
                index: idx,
            };
            let _ = self.close_endpoint(ep, CloseMode::Abort);
        }
        self.unlisten();
        self.shared.live_workers.fetch_sub(1, Ordering::SeqCst);
    }
}

fn loop_send_syn(shared: &Shared, slot: &mut Slot) -> usize {
    let Link::LoopConnecting {
        addr,
        to_server,
        to_client,
    } = &slot.link
    else {
        return 0;
    };
    let Some(syn) = slot.outbox.front() else {
        return 0;
    };
    let listener = shared.loop_listeners.lock().unwrap().get(addr).cloned();
    let Some(listener) = listener else {
        // No listener yet; retried until the handshake deadline.
        return 0;
    };
    let req = LoopSyn {
        syn: syn.clone(),
        to_server: Arc::clone(to_server),
        to_client: Arc::clone(to_client),
    };
    if listener.offer(req).is_err() {
        return 0;
    }
    slot.outbox.pop_front();
    slot.completed += 1;
    slot.link = Link::Loop(PipePair {
        tx: Arc::clone(to_server),
        rx: Arc::clone(to_client),
    });
    1
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| TransportError::InvalidAddress(addr.to_string()))
}
