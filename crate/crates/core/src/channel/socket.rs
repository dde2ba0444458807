use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard, Weak};

use super::selector::KeyInner;
use super::{ChannelError, OpSet, ProviderShared, WorkerRole};
use crate::facade::{SocketFacade, SocketOptions};
use crate::ringbuf::{Region, RingBuffer, RingError};
use crate::transport::{
    CloseMode, Endpoint, EndpointState, RequestHandle, TransportError, Worker,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChannelState {
    Created,
    Connecting,
    Connected,
    /// The peer closed its side; buffered data can still be read.
    InputShutdown,
    Closed,
}

/// Result of a non-blocking read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadResult {
    /// Bytes copied; 0 means nothing was pending.
    Bytes(usize),
    /// The peer closed the connection and everything was read. Sticky.
    EndOfStream,
}

impl ReadResult {
    pub fn is_end_of_stream(self) -> bool {
        matches!(self, ReadResult::EndOfStream)
    }

    pub fn bytes(self) -> usize {
        match self {
            ReadResult::Bytes(n) => n,
            ReadResult::EndOfStream => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelStats {
    /// DATA send requests handed to the transport.
    pub data_requests: u64,
    pub write_calls: u64,
    pub gather_calls: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

pub(crate) struct ChannelInner {
    pub(crate) id: u64,
    pub(crate) state: ChannelState,
    worker: Option<Worker>,
    endpoint: Option<Endpoint>,
    ring: RingBuffer,
    in_flight: VecDeque<(Region, RequestHandle)>,
    recv_queue: VecDeque<Vec<u8>>,
    recv_offset: usize,
    connect_failure: Option<TransportError>,
    connect_reported: bool,
    /// Handshake finished but `finish_connect` was not called yet.
    connect_ready: bool,
    pub(crate) options: SocketOptions,
    pub(crate) local_addr: Option<String>,
    pub(crate) remote_addr: Option<String>,
    pub(crate) registration: Option<(u64, Weak<KeyInner>)>,
    stats: ChannelStats,
    provider: Arc<ProviderShared>,
}

/// A non-blocking, connection-oriented byte channel.
///
/// Handles are cheap clones of one shared channel. A channel may be driven by
/// one thread at a time and moved between threads.
#[derive(Clone)]
pub struct Channel {
    id: u64,
    pub(crate) inner: Arc<Mutex<ChannelInner>>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("id", &self.id)
            .field("state", &self.state())
            .finish()
    }
}

impl PartialEq for Channel {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Eq for Channel {}

impl Channel {
    pub(crate) fn open(provider: Arc<ProviderShared>) -> Result<Self, ChannelError> {
        let worker = provider.spawn_worker(WorkerRole::Channel)?;
        Ok(Self::wrap(ChannelInner::new(provider, worker, None)?))
    }

    pub(crate) fn accepted(
        provider: Arc<ProviderShared>,
        mut worker: Worker,
        incoming: crate::transport::Incoming,
    ) -> Result<Self, ChannelError> {
        let recv_capacity = provider.config.recv_capacity as u64;
        let ep = worker.adopt(incoming, recv_capacity);
        let mut inner = ChannelInner::new(provider, worker, Some(ep))?;
        inner.state = ChannelState::Connected;
        inner.refresh_addresses();
        // Sends the handshake ACK so the connector does not wait on our first poll.
        inner.pump()?;
        Ok(Self::wrap(inner))
    }

    fn wrap(inner: ChannelInner) -> Self {
        Self {
            id: inner.id,
            inner: Arc::new(Mutex::new(inner)),
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, ChannelInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> ChannelState {
        self.lock().state
    }

    pub fn is_open(&self) -> bool {
        self.state() != ChannelState::Closed
    }

    pub fn is_connected(&self) -> bool {
        matches!(
            self.state(),
            ChannelState::Connected | ChannelState::InputShutdown
        )
    }

    pub fn stats(&self) -> ChannelStats {
        self.lock().stats
    }

    /// Transport connection id, once the handshake has assigned one.
    pub fn connection_id(&self) -> Option<u32> {
        let inner = self.lock();
        let (worker, ep) = (inner.worker.as_ref()?, inner.endpoint?);
        let info = worker.endpoint_info(ep).ok()?;
        (info.state == EndpointState::Established).then_some(info.connection_id)
    }

    /// Socket-attribute view of this channel.
    pub fn socket(&self) -> SocketFacade {
        SocketFacade::new(self.clone())
    }

    /// Starts a non-blocking connect. Returns `true` if the channel is
    /// connected on return, `false` when [`finish_connect`](Self::finish_connect)
    /// has to be called once CONNECT is ready.
    pub fn connect(&self, remote: &str) -> Result<bool, ChannelError> {
        let mut inner = self.lock();
        inner.expect_state("connect", &[ChannelState::Created])?;
        let recv_capacity = inner.options.receive_buffer_size as u64;
        let worker = inner.worker.as_mut().ok_or(ChannelError::Closed)?;
        let ep = worker.connect_endpoint(remote, recv_capacity)?;
        inner.endpoint = Some(ep);
        inner.state = ChannelState::Connecting;
        inner.remote_addr = None;
        Ok(false)
    }

    /// Completes a pending connect. `Ok(false)` means still in progress.
    pub fn finish_connect(&self) -> Result<bool, ChannelError> {
        let mut inner = self.lock();
        match inner.state {
            ChannelState::Connected | ChannelState::InputShutdown => {
                inner.connect_ready = false;
                return Ok(true);
            }
            ChannelState::Created => return Err(ChannelError::NoConnectionPending),
            ChannelState::Closed => {
                return match inner.connect_failure.take() {
                    Some(err) if !inner.connect_reported => {
                        inner.connect_reported = true;
                        Err(ChannelError::ConnectFailed(err))
                    }
                    _ => Err(ChannelError::Closed),
                }
            }
            ChannelState::Connecting => {}
        }
        inner.pump()?;
        match inner.state {
            ChannelState::Connected | ChannelState::InputShutdown => {
                inner.connect_ready = false;
                Ok(true)
            }
            ChannelState::Closed => {
                inner.connect_reported = true;
                match inner.connect_failure.take() {
                    Some(err) => Err(ChannelError::ConnectFailed(err)),
                    None => Err(ChannelError::Closed),
                }
            }
            _ => Ok(false),
        }
    }

    /// Copies pending bytes into `dst` without blocking.
    pub fn read(&self, dst: &mut [u8]) -> Result<ReadResult, ChannelError> {
        let mut inner = self.lock();
        match inner.state {
            ChannelState::Closed => return Err(ChannelError::Closed),
            ChannelState::Created | ChannelState::Connecting => {
                return Err(ChannelError::NotConnected)
            }
            ChannelState::Connected | ChannelState::InputShutdown => {}
        }
        if inner.recv_queue.is_empty() && inner.state == ChannelState::Connected {
            inner.pump()?;
        }
        inner.read_buffered(dst)
    }

    /// Writes as much of `src` as ring space and peer credit allow, in
    /// requests of at most one slice. Returns 0 when nothing could be taken.
    pub fn write(&self, src: &[u8]) -> Result<usize, ChannelError> {
        let mut inner = self.lock();
        inner.expect_writable()?;
        inner.stats.write_calls += 1;
        if src.is_empty() {
            return Ok(0);
        }
        inner.release_completed();
        let mut accepted = 0;
        let mut pumped = false;
        while accepted < src.len() {
            let n = inner.send_chunk(&src[accepted..])?;
            if n == 0 {
                if pumped || accepted > 0 {
                    break;
                }
                inner.pump()?;
                inner.expect_writable()?;
                pumped = true;
                continue;
            }
            accepted += n;
        }
        if accepted > 0 {
            inner.pump()?;
        }
        inner.stats.bytes_written += accepted as u64;
        Ok(accepted)
    }

    /// Gathering write: merges as many whole leading spans as fit into one
    /// ring region per transport request. Spans larger than a slice, and
    /// leftovers of partially accepted spans, go out alone.
    pub fn write_gather(&self, srcs: &[&[u8]]) -> Result<usize, ChannelError> {
        let mut inner = self.lock();
        inner.expect_writable()?;
        inner.stats.gather_calls += 1;
        let spans: Vec<&[u8]> = srcs.iter().copied().filter(|s| !s.is_empty()).collect();
        if spans.is_empty() {
            return Ok(0);
        }
        inner.release_completed();
        let slice_length = inner.ring.slice_length();
        let mut idx = 0;
        let mut offset = 0;
        let mut accepted = 0;
        let mut pumped = false;
        while idx < spans.len() {
            let span = spans[idx];
            let sent = if offset > 0 || span.len() > slice_length {
                let n = inner.send_chunk(&span[offset..])?;
                offset += n;
                if offset == span.len() {
                    idx += 1;
                    offset = 0;
                }
                n
            } else {
                match inner.send_merged(&spans[idx..])? {
                    Some((bytes, consumed)) => {
                        idx += consumed;
                        bytes
                    }
                    None => {
                        // The first span does not fit whole: send what fits.
                        let n = inner.send_chunk(span)?;
                        offset = n;
                        if offset == span.len() {
                            idx += 1;
                            offset = 0;
                        }
                        n
                    }
                }
            };
            if sent == 0 {
                if pumped || accepted > 0 {
                    break;
                }
                inner.pump()?;
                inner.expect_writable()?;
                pumped = true;
                continue;
            }
            accepted += sent;
        }
        if accepted > 0 {
            inner.pump()?;
        }
        inner.stats.bytes_written += accepted as u64;
        Ok(accepted)
    }

    /// Runs one transport progress cycle and returns the ready operations.
    pub fn poll(&self) -> Result<OpSet, ChannelError> {
        let mut inner = self.lock();
        if inner.state == ChannelState::Closed {
            return Err(ChannelError::Closed);
        }
        inner.pump()?;
        Ok(inner.readiness())
    }

    /// Readiness for a selection key; `None` once the channel is closed and
    /// has nothing left to report.
    pub(crate) fn poll_for_key(&self) -> Option<OpSet> {
        let mut inner = self.lock();
        if inner.state != ChannelState::Closed {
            let _ = inner.pump();
        }
        let ops = inner.readiness();
        if inner.state == ChannelState::Closed && ops.is_empty() {
            None
        } else {
            Some(ops)
        }
    }

    /// Closes the channel after draining queued sends. Idempotent.
    pub fn close(&self) -> Result<(), ChannelError> {
        let key = {
            let mut inner = self.lock();
            inner.shutdown(CloseMode::Graceful);
            inner.registration.take()
        };
        if let Some(key) = key.and_then(|(_, k)| k.upgrade()) {
            key.mark_cancelled();
        }
        Ok(())
    }

    /// Closes without draining queued sends.
    pub fn abort(&self) -> Result<(), ChannelError> {
        let key = {
            let mut inner = self.lock();
            inner.shutdown(CloseMode::Abort);
            inner.registration.take()
        };
        if let Some(key) = key.and_then(|(_, k)| k.upgrade()) {
            key.mark_cancelled();
        }
        Ok(())
    }

    pub fn local_address(&self) -> Option<String> {
        self.lock().local_addr.clone()
    }

    pub fn remote_address(&self) -> Option<String> {
        self.lock().remote_addr.clone()
    }

    /// Ring capacity and slice length currently in use.
    pub fn ring_geometry(&self) -> (usize, usize) {
        let inner = self.lock();
        (inner.ring.capacity(), inner.ring.slice_length())
    }
}

impl ChannelInner {
    fn new(
        provider: Arc<ProviderShared>,
        worker: Worker,
        endpoint: Option<Endpoint>,
    ) -> Result<Self, ChannelError> {
        let cfg = &provider.config;
        let ring = RingBuffer::new(cfg.ring_capacity, cfg.slice_length)?;
        Ok(Self {
            id: provider.next_channel_id(),
            state: ChannelState::Created,
            worker: Some(worker),
            endpoint,
            ring,
            in_flight: VecDeque::new(),
            recv_queue: VecDeque::new(),
            recv_offset: 0,
            connect_failure: None,
            connect_reported: false,
            connect_ready: false,
            options: SocketOptions {
                receive_buffer_size: cfg.recv_capacity,
                send_buffer_size: cfg.ring_capacity,
                no_delay: false,
                keep_alive: false,
            },
            local_addr: None,
            remote_addr: None,
            registration: None,
            stats: ChannelStats::default(),
            provider,
        })
    }

    fn expect_state(&self, op: &'static str, allowed: &[ChannelState]) -> Result<(), ChannelError> {
        if self.state == ChannelState::Closed {
            return Err(ChannelError::Closed);
        }
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(ChannelError::InvalidState {
                op,
                state: self.state,
            })
        }
    }

    fn expect_writable(&self) -> Result<(), ChannelError> {
        match self.state {
            ChannelState::Connected => Ok(()),
            ChannelState::Closed => Err(ChannelError::Closed),
            ChannelState::Created | ChannelState::Connecting => Err(ChannelError::NotConnected),
            ChannelState::InputShutdown => Err(ChannelError::InvalidState {
                op: "write",
                state: self.state,
            }),
        }
    }

    /// Replaces the send ring; only valid before any data was written.
    pub(crate) fn resize_ring(&mut self, capacity: usize) -> Result<(), ChannelError> {
        let slice = self.provider.config.slice_length.min(capacity);
        self.ring = RingBuffer::new(capacity, slice)?;
        self.options.send_buffer_size = capacity;
        Ok(())
    }

    fn refresh_addresses(&mut self) {
        if let (Some(worker), Some(ep)) = (self.worker.as_ref(), self.endpoint) {
            if let Ok(info) = worker.endpoint_info(ep) {
                self.local_addr = Some(info.local_addr);
                if info.state == EndpointState::Established {
                    self.remote_addr = Some(info.remote_addr);
                }
            }
        }
    }

    /// One progress cycle: moves deliveries into the receive queue, releases
    /// completed ring regions and applies handshake and close transitions.
    pub(crate) fn pump(&mut self) -> Result<(), ChannelError> {
        let (Some(worker), Some(ep)) = (self.worker.as_mut(), self.endpoint) else {
            return Ok(());
        };
        let progressed = worker.progress();
        while let Some(seg) = worker.recv(ep)? {
            self.recv_queue.push_back(seg);
        }
        let info_state = worker.state(ep)?;
        let eos = worker.is_end_of_stream(ep)?;
        match (self.state, info_state) {
            (ChannelState::Connecting, EndpointState::Established) => {
                self.state = ChannelState::Connected;
                self.connect_ready = true;
                self.refresh_addresses();
            }
            (ChannelState::Connecting, EndpointState::Closed) => {
                let worker = self.worker.as_mut().unwrap();
                self.connect_failure = worker.take_failure(ep)?;
                self.shutdown(CloseMode::Abort);
                return Ok(());
            }
            _ => {}
        }
        if eos && self.state == ChannelState::Connected {
            self.state = ChannelState::InputShutdown;
        }
        self.release_completed();
        progressed?;
        Ok(())
    }

    fn release_completed(&mut self) {
        let Some(worker) = self.worker.as_ref() else {
            return;
        };
        while let Some((region, handle)) = self.in_flight.front() {
            if !worker.is_complete(handle) {
                break;
            }
            self.ring
                .release(region)
                .expect("in-flight regions are released in FIFO order");
            self.in_flight.pop_front();
        }
    }

    fn send_budget(&self) -> Result<usize, ChannelError> {
        let (Some(worker), Some(ep)) = (self.worker.as_ref(), self.endpoint) else {
            return Err(ChannelError::Closed);
        };
        let credit = worker.available_credit(ep)?;
        Ok(self
            .ring
            .max_reservable()
            .min(usize::try_from(credit).unwrap_or(usize::MAX)))
    }

    /// Issues one request carrying a prefix of `data`. Returns bytes taken.
    fn send_chunk(&mut self, data: &[u8]) -> Result<usize, ChannelError> {
        let len = data.len().min(self.send_budget()?);
        if len == 0 {
            return Ok(0);
        }
        let mut region = self.ring.reserve(len)?;
        self.ring.region_bytes_mut(&region).copy_from_slice(&data[..len]);
        self.ring.commit(&mut region, len)?;
        self.issue(region)?;
        Ok(len)
    }

    /// Issues one request carrying a merged prefix of whole spans.
    fn send_merged(&mut self, spans: &[&[u8]]) -> Result<Option<(usize, usize)>, ChannelError> {
        let budget = self.send_budget()?;
        match self.ring.merge_gather_within(spans, budget) {
            Ok((region, consumed)) => {
                let len = region.len();
                self.issue(region)?;
                Ok(Some((len, consumed)))
            }
            Err(RingError::Insufficient) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn issue(&mut self, region: Region) -> Result<(), ChannelError> {
        let (Some(worker), Some(ep)) = (self.worker.as_mut(), self.endpoint) else {
            return Err(ChannelError::Closed);
        };
        let handle = worker.send(ep, self.ring.region_bytes(&region))?;
        self.ring.mark_in_flight(&region)?;
        self.in_flight.push_back((region, handle));
        self.stats.data_requests += 1;
        Ok(())
    }

    fn read_buffered(&mut self, dst: &mut [u8]) -> Result<ReadResult, ChannelError> {
        let mut copied = 0;
        while copied < dst.len() {
            let Some(front) = self.recv_queue.front() else {
                break;
            };
            let avail = &front[self.recv_offset..];
            let n = avail.len().min(dst.len() - copied);
            dst[copied..copied + n].copy_from_slice(&avail[..n]);
            copied += n;
            self.recv_offset += n;
            if self.recv_offset == front.len() {
                self.recv_queue.pop_front();
                self.recv_offset = 0;
            }
        }
        if copied > 0 {
            self.stats.bytes_read += copied as u64;
            if let (Some(worker), Some(ep)) = (self.worker.as_mut(), self.endpoint) {
                worker.consume(ep, copied)?;
            }
            return Ok(ReadResult::Bytes(copied));
        }
        if self.state == ChannelState::InputShutdown && self.recv_queue.is_empty() {
            return Ok(ReadResult::EndOfStream);
        }
        Ok(ReadResult::Bytes(0))
    }

    pub(crate) fn readiness(&self) -> OpSet {
        let mut ops = OpSet::empty();
        match self.state {
            ChannelState::Connected => {
                if !self.recv_queue.is_empty() {
                    ops |= OpSet::READ;
                }
                if self.ring.max_reservable() > 0 {
                    ops |= OpSet::WRITE;
                }
            }
            ChannelState::InputShutdown => ops |= OpSet::READ,
            ChannelState::Closed if self.connect_failure.is_some() && !self.connect_reported => {
                ops |= OpSet::CONNECT
            }
            _ => {}
        }
        if self.connect_ready {
            ops |= OpSet::CONNECT;
        }
        ops
    }

    pub(crate) fn shutdown(&mut self, mode: CloseMode) {
        if self.state == ChannelState::Closed && self.worker.is_none() {
            return;
        }
        if let (Some(worker), Some(ep)) = (self.worker.as_mut(), self.endpoint) {
            let _ = worker.close_endpoint(ep, mode);
        }
        if let Some(worker) = self.worker.take() {
            self.provider.retire_worker(worker, WorkerRole::Channel);
        }
        self.state = ChannelState::Closed;
        self.in_flight.clear();
        self.recv_queue.clear();
    }
}

impl Drop for ChannelInner {
    fn drop(&mut self) {
        self.shutdown(CloseMode::Graceful);
    }
}
