//! Two-sided throughput and latency benchmarks over [`Channel`]s.
//!
//! Both roles run the same configuration. The server accepts
//! `connections` channels per run, the client opens them; afterwards each
//! connection is driven by its own thread (throughput) or by one of
//! `connections` selector threads (latency).
//!
//! Throughput, per connection: the server sends the warmup messages, waits
//! for a 1-byte sync from the client, passes a barrier shared by all server
//! threads, sends `message_count` messages and stops the clock when the
//! client's 1-byte finish signal arrives. Messages are buffered and handed
//! to [`Channel::write_gather`] every `flush_interval` messages.
//!
//! Latency: the server sends one message per connection; each side echoes a
//! message once it has been received completely. The server records one
//! sample per round trip after the warmup rounds.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{
    Channel, ChannelError, OpSet, Provider, ReadResult, SelectTimeout, ServerChannel,
};
use crate::transport::Backend;

pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Mode {
    Throughput,
    Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Role {
    Server,
    Client,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Throughput => "throughput",
            Mode::Latency => "latency",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "throughput" => Ok(Mode::Throughput),
            "latency" => Ok(Mode::Latency),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Server => "server",
            Role::Client => "client",
        })
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("peer out of sync on connection {connection}: no progress for {waited:?} while {phase}")]
    PeerDesync {
        connection: usize,
        phase: &'static str,
        waited: Duration,
    },
    #[error("connection {connection} ended inside a message ({got} of {expected} bytes)")]
    TruncatedMessage {
        connection: usize,
        got: usize,
        expected: usize,
    },
    #[error("connection {connection} closed by peer while {phase}")]
    ConnectionLost { connection: usize, phase: &'static str },
    #[error("connection {connection} received unexpected data")]
    UnexpectedData { connection: usize },
    #[error("connection {connection} touched by thread {thread}, owned by thread {owner}")]
    Ownership {
        connection: usize,
        thread: usize,
        owner: usize,
    },
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("no runs to aggregate")]
    NoData,
    #[error("benchmark thread panicked")]
    ThreadPanicked,
}

/// Parameters shared by both roles of one benchmark run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkConfig {
    pub mode: Mode,
    pub role: Role,
    /// Bind address for the server, remote address for the client.
    pub address: String,
    pub connections: usize,
    pub message_size: usize,
    /// Timed operations per connection.
    pub message_count: u64,
    /// Messages per gather call in throughput mode.
    pub flush_interval: usize,
    pub runs: usize,
    pub backend: Backend,
    /// Longest time without progress before a run is declared out of sync.
    pub timeout: Duration,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Throughput,
            role: Role::Server,
            address: "bench".into(),
            connections: 1,
            message_size: 16,
            message_count: 1000,
            flush_interval: 64,
            runs: DEFAULT_RUNS,
            backend: Backend::Loopback,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl BenchmarkConfig {
    /// Untimed leading operations: a tenth of `message_count`, at least one.
    pub fn warmup_count(&self) -> u64 {
        (self.message_count / 10).max(1)
    }

    pub fn total_messages(&self) -> u64 {
        self.warmup_count() + self.message_count
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let mut problems = Vec::new();
        if self.connections == 0 {
            problems.push("connections must be at least 1");
        }
        if self.message_size == 0 {
            problems.push("message size must be at least 1");
        }
        if self.message_count == 0 {
            problems.push("message count must be at least 1");
        }
        if self.flush_interval == 0 {
            problems.push("flush interval must be at least 1");
        }
        if self.runs == 0 {
            problems.push("runs must be at least 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    BarrierExit,
    FirstTimedSend,
    /// First I/O of a thread on a connection.
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub thread: usize,
    pub connection: usize,
    pub kind: EventKind,
}

/// Totally ordered log of benchmark events across threads.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    pub fn record(&self, thread: usize, connection: usize, kind: EventKind) {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64;
        events.push(Event {
            seq,
            thread,
            connection,
            kind,
        });
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }
}

/// True when every barrier exit precedes every first timed send.
pub fn barrier_precedes_timed_sends(events: &[Event]) -> bool {
    let last_exit = events
        .iter()
        .filter(|e| e.kind == EventKind::BarrierExit)
        .map(|e| e.seq)
        .max();
    let first_send = events
        .iter()
        .filter(|e| e.kind == EventKind::FirstTimedSend)
        .map(|e| e.seq)
        .min();
    match (last_exit, first_send) {
        (Some(exit), Some(send)) => exit < send,
        (None, None) => true,
        _ => false,
    }
}

/// Connection index → thread index for every connection that saw I/O, or
/// `None` if some connection was touched by two threads.
pub fn connection_owners(events: &[Event]) -> Option<Vec<(usize, usize)>> {
    let mut owners: Vec<(usize, usize)> = Vec::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Io) {
        match owners.iter().find(|(c, _)| *c == e.connection) {
            Some(&(_, t)) if t != e.thread => return None,
            Some(_) => {}
            None => owners.push((e.connection, e.thread)),
        }
    }
    owners.sort_unstable();
    Some(owners)
}

/// Per-connection owner ids; a second thread touching a connection is an error.
struct Owners {
    slots: Vec<AtomicUsize>,
}

impl Owners {
    const FREE: usize = usize::MAX;

    fn new(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| AtomicUsize::new(Self::FREE)).collect(),
        }
    }

    fn claim(&self, connection: usize, thread: usize, log: &EventLog) -> Result<(), BenchError> {
        match self.slots[connection].compare_exchange(
            Self::FREE,
            thread,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => {
                log.record(thread, connection, EventKind::Io);
                Ok(())
            }
            Err(owner) if owner == thread => Ok(()),
            Err(owner) => Err(BenchError::Ownership {
                connection,
                thread,
                owner,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConnectionResult {
    pub index: usize,
    pub elapsed: Duration,
    /// Timed bytes moved in the measured direction.
    pub bytes_moved: u64,
    /// Timed operations (messages or round trips).
    pub operations: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    /// Round-trip samples in nanoseconds.
    pub samples_ns: Vec<u64>,
    pub data_requests: u64,
    pub flushes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub role: Role,
    pub message_size: usize,
    pub connections: Vec<ConnectionResult>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
}

impl RunResult {
    /// Slowest connection's window; all windows start at the shared barrier.
    pub fn elapsed(&self) -> Duration {
        self.connections
            .iter()
            .map(|c| c.elapsed)
            .max()
            .unwrap_or_default()
    }

    pub fn bytes_total(&self) -> u64 {
        self.connections.iter().map(|c| c.bytes_moved).sum()
    }

    pub fn ops_total(&self) -> u64 {
        self.connections.iter().map(|c| c.operations).sum()
    }

    pub fn throughput_bytes_per_s(&self) -> f64 {
        per_second(self.bytes_total(), self.elapsed())
    }

    /// MB = 10^6 bytes.
    pub fn throughput_mbps(&self) -> f64 {
        self.throughput_bytes_per_s() / 1e6
    }

    pub fn ops_per_s(&self) -> f64 {
        per_second(self.ops_total(), self.elapsed())
    }

    pub fn samples_ns(&self) -> Vec<u64> {
        self.connections
            .iter()
            .flat_map(|c| c.samples_ns.iter().copied())
            .collect()
    }

    pub fn latency(&self) -> Option<LatencyStats> {
        let mut samples = self.samples_ns();
        if samples.is_empty() {
            return None;
        }
        samples.sort_unstable();
        let us = |ns: u64| ns as f64 / 1e3;
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64;
        Some(LatencyStats {
            mean_us: mean / 1e3,
            p50_us: us(nearest_rank(&samples, 0.50)),
            p99_us: us(nearest_rank(&samples, 0.99)),
            p999_us: us(nearest_rank(&samples, 0.999)),
        })
    }
}

fn per_second(count: u64, elapsed: Duration) -> f64 {
    let secs = elapsed.as_secs_f64();
    if secs > 0.0 {
        count as f64 / secs
    } else {
        0.0
    }
}

/// Nearest-rank percentile of sorted, non-empty data.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self, BenchError> {
        if values.is_empty() {
            return Err(BenchError::NoData);
        }
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (i, &x) in values.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        Ok(Self {
            n: values.len(),
            mean,
            stddev: (m2 / values.len() as f64).max(0.0).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub throughput_mbps: Summary,
    pub ops_per_s: Summary,
    pub rtt_mean_us: Option<Summary>,
}

pub fn aggregate_runs(results: &[RunResult]) -> Result<RunSummary, BenchError> {
    let metric = |f: fn(&RunResult) -> f64| {
        Summary::of(&results.iter().map(f).collect::<Vec<_>>())
    };
    let rtts: Vec<f64> = results
        .iter()
        .filter_map(|r| r.latency().map(|l| l.mean_us))
        .collect();
    Ok(RunSummary {
        throughput_mbps: metric(RunResult::throughput_mbps)?,
        ops_per_s: metric(RunResult::ops_per_s)?,
        rtt_mean_us: if rtts.is_empty() {
            None
        } else {
            Some(Summary::of(&rtts)?)
        },
    })
}

/// Busy-wait bookkeeping: yields now and then and enforces the idle timeout.
struct Idle {
    since: Instant,
    spins: u32,
    timeout: Duration,
}

impl Idle {
    fn new(timeout: Duration) -> Self {
        Self {
            since: Instant::now(),
            spins: 0,
            timeout,
        }
    }

    fn progressed(&mut self) {
        self.since = Instant::now();
        self.spins = 0;
    }

    fn wait(&mut self, connection: usize, phase: &'static str) -> Result<(), BenchError> {
        self.spins += 1;
        if self.spins % 16 == 0 {
            thread::yield_now();
            let waited = self.since.elapsed();
            if waited > self.timeout {
                return Err(BenchError::PeerDesync {
                    connection,
                    phase,
                    waited,
                });
            }
        }
        Ok(())
    }
}

fn write_all(ch: &Channel, data: &[u8], conn: usize, timeout: Duration) -> Result<(), BenchError> {
    let mut idle = Idle::new(timeout);
    let mut done = 0;
    while done < data.len() {
        let n = ch.write(&data[done..])?;
        if n == 0 {
            ch.poll()?;
            idle.wait(conn, "sending")?;
        } else {
            done += n;
            idle.progressed();
        }
    }
    Ok(())
}

/// Submits `count` copies of `msg` as one logical flush.
fn flush(
    ch: &Channel,
    msg: &[u8],
    count: usize,
    conn: usize,
    timeout: Duration,
) -> Result<(), BenchError> {
    let mut spans: Vec<&[u8]> = vec![msg; count];
    let mut idle = Idle::new(timeout);
    let mut first = 0;
    while first < spans.len() {
        let mut n = ch.write_gather(&spans[first..])?;
        if n == 0 {
            ch.poll()?;
            idle.wait(conn, "flushing")?;
            continue;
        }
        idle.progressed();
        while n > 0 {
            let span = spans[first];
            if n >= span.len() {
                n -= span.len();
                first += 1;
            } else {
                spans[first] = &span[n..];
                n = 0;
            }
        }
    }
    Ok(())
}

/// Reads exactly `dst.len()` bytes.
fn read_exact(
    ch: &Channel,
    dst: &mut [u8],
    conn: usize,
    phase: &'static str,
    timeout: Duration,
) -> Result<(), BenchError> {
    let mut idle = Idle::new(timeout);
    let mut got = 0;
    while got < dst.len() {
        match ch.read(&mut dst[got..])? {
            ReadResult::Bytes(0) => idle.wait(conn, phase)?,
            ReadResult::Bytes(n) => {
                got += n;
                idle.progressed();
            }
            ReadResult::EndOfStream if got == 0 => {
                return Err(BenchError::ConnectionLost {
                    connection: conn,
                    phase,
                })
            }
            ReadResult::EndOfStream => {
                return Err(BenchError::TruncatedMessage {
                    connection: conn,
                    got,
                    expected: dst.len(),
                })
            }
        }
    }
    Ok(())
}

/// Reads and discards `bytes` bytes.
fn drain(
    ch: &Channel,
    bytes: u64,
    conn: usize,
    phase: &'static str,
    timeout: Duration,
) -> Result<(), BenchError> {
    let mut scratch = vec![0u8; 256 * 1024];
    let mut left = bytes;
    let mut idle = Idle::new(timeout);
    while left > 0 {
        let want = usize::try_from(left).unwrap_or(usize::MAX).min(scratch.len());
        match ch.read(&mut scratch[..want])? {
            ReadResult::Bytes(0) => idle.wait(conn, phase)?,
            ReadResult::Bytes(n) => {
                left -= n as u64;
                idle.progressed();
            }
            ReadResult::EndOfStream => {
                return Err(BenchError::ConnectionLost {
                    connection: conn,
                    phase,
                })
            }
        }
    }
    Ok(())
}

fn message(size: usize) -> Vec<u8> {
    (0..size).map(|i| (i % 251) as u8).collect()
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Sends `count` messages in flushes of `flush_interval`. Returns flushes.
fn send_batch(
    ch: &Channel,
    msg: &[u8],
    count: u64,
    cfg: &BenchmarkConfig,
    conn: usize,
    mut on_first: impl FnMut(),
) -> Result<u64, BenchError> {
    let mut sent = 0;
    let mut flushes = 0;
    while sent < count {
        let n = (count - sent).min(cfg.flush_interval as u64);
        if sent == 0 {
            on_first();
        }
        flush(ch, msg, n as usize, conn, cfg.timeout)?;
        sent += n;
        flushes += 1;
    }
    debug_assert_eq!(flushes, ceil_div(count, cfg.flush_interval as u64));
    Ok(flushes)
}

fn throughput_server_conn(
    ch: &Channel,
    conn: usize,
    cfg: &BenchmarkConfig,
    barrier: &Barrier,
    log: &EventLog,
) -> Result<ConnectionResult, BenchError> {
    let msg = message(cfg.message_size);
    let warmup = cfg.warmup_count();
    let mut signal = [0u8; 1];
    let warmed = send_batch(ch, &msg, warmup, cfg, conn, || {}).and_then(|flushes| {
        read_exact(ch, &mut signal, conn, "waiting for sync", cfg.timeout)?;
        Ok(flushes)
    });
    // A failed thread still passes the barrier so the others are not stuck.
    barrier.wait();
    log.record(conn, conn, EventKind::BarrierExit);
    // Second rendezvous so every exit is logged before any timed send.
    barrier.wait();
    let mut flushes = warmed?;
    let start = Instant::now();
    flushes += send_batch(ch, &msg, cfg.message_count, cfg, conn, || {
        log.record(conn, conn, EventKind::FirstTimedSend)
    })?;
    read_exact(ch, &mut signal, conn, "waiting for finish", cfg.timeout)?;
    let elapsed = start.elapsed();
    Ok(ConnectionResult {
        index: conn,
        elapsed,
        bytes_moved: cfg.message_count * cfg.message_size as u64,
        operations: cfg.message_count,
        messages_sent: warmup + cfg.message_count,
        messages_received: 0,
        samples_ns: Vec::new(),
        data_requests: ch.stats().data_requests,
        flushes,
    })
}

fn throughput_client_conn(
    ch: &Channel,
    conn: usize,
    cfg: &BenchmarkConfig,
) -> Result<ConnectionResult, BenchError> {
    let size = cfg.message_size as u64;
    drain(ch, cfg.warmup_count() * size, conn, "receiving warmup", cfg.timeout)?;
    let start = Instant::now();
    write_all(ch, &[1], conn, cfg.timeout)?;
    drain(ch, cfg.message_count * size, conn, "receiving", cfg.timeout)?;
    let elapsed = start.elapsed();
    write_all(ch, &[2], conn, cfg.timeout)?;
    Ok(ConnectionResult {
        index: conn,
        elapsed,
        bytes_moved: cfg.message_count * size,
        operations: cfg.message_count,
        messages_sent: 0,
        messages_received: cfg.total_messages(),
        samples_ns: Vec::new(),
        data_requests: ch.stats().data_requests,
        flushes: 0,
    })
}

struct LatencyConn {
    index: usize,
    channel: Channel,
    buf: Vec<u8>,
    filled: usize,
    sent: u64,
    received: u64,
    send_time: Instant,
    timed_start: Option<Instant>,
    timed_end: Instant,
    samples: Vec<u64>,
}

impl LatencyConn {
    fn new(index: usize, channel: Channel, size: usize) -> Self {
        let now = Instant::now();
        Self {
            index,
            channel,
            buf: vec![0; size],
            filled: 0,
            sent: 0,
            received: 0,
            send_time: now,
            timed_start: None,
            timed_end: now,
            samples: Vec::new(),
        }
    }
}

fn latency_thread(
    thread_index: usize,
    conns: Vec<(usize, Channel)>,
    cfg: &BenchmarkConfig,
    provider: &Provider,
    owners: &Owners,
    log: &EventLog,
) -> Result<Vec<ConnectionResult>, BenchError> {
    let total = cfg.total_messages();
    let warmup = cfg.warmup_count();
    let is_server = cfg.role == Role::Server;
    let msg = message(cfg.message_size);
    let selector = provider.open_selector();
    let mut state: Vec<LatencyConn> = Vec::with_capacity(conns.len());
    for (slot, (index, ch)) in conns.into_iter().enumerate() {
        owners.claim(index, thread_index, log)?;
        let key = selector.register(&ch, OpSet::READ)?;
        key.attach(slot);
        state.push(LatencyConn::new(index, ch, cfg.message_size));
    }
    if is_server {
        for c in &mut state {
            c.send_time = Instant::now();
            write_all(&c.channel, &msg, c.index, cfg.timeout)?;
            c.sent = 1;
        }
    }
    let mut remaining = state.len();
    let mut last_progress = Instant::now();
    while remaining > 0 {
        let ready = selector.select(SelectTimeout::After(Duration::from_millis(50)))?;
        if ready == 0 {
            let waited = last_progress.elapsed();
            if waited > cfg.timeout {
                let stuck = state.iter().find(|c| c.received < total).map_or(0, |c| c.index);
                return Err(BenchError::PeerDesync {
                    connection: stuck,
                    phase: "waiting for echo",
                    waited,
                });
            }
            continue;
        }
        last_progress = Instant::now();
        for key in selector.drain_selected() {
            let c = &mut state[key.attachment()];
            owners.claim(c.index, thread_index, log)?;
            loop {
                let filled = c.filled;
                match c.channel.read(&mut c.buf[filled..])? {
                    ReadResult::Bytes(0) => break,
                    ReadResult::Bytes(n) => c.filled += n,
                    ReadResult::EndOfStream if c.filled > 0 => {
                        return Err(BenchError::TruncatedMessage {
                            connection: c.index,
                            got: c.filled,
                            expected: c.buf.len(),
                        })
                    }
                    ReadResult::EndOfStream => {
                        return Err(BenchError::ConnectionLost {
                            connection: c.index,
                            phase: "ping-pong",
                        })
                    }
                }
                if c.filled < c.buf.len() {
                    continue;
                }
                let now = Instant::now();
                c.filled = 0;
                c.received += 1;
                if c.buf != msg {
                    return Err(BenchError::UnexpectedData { connection: c.index });
                }
                if is_server {
                    if c.received > warmup {
                        c.samples.push((now - c.send_time).as_nanos().max(1) as u64);
                    }
                    if c.received == total {
                        c.timed_end = now;
                        key.cancel();
                        remaining -= 1;
                        break;
                    }
                    if c.received == warmup {
                        c.timed_start = Some(Instant::now());
                    }
                    c.send_time = Instant::now();
                    write_all(&c.channel, &msg, c.index, cfg.timeout)?;
                    c.sent += 1;
                } else {
                    if c.received == warmup + 1 {
                        c.timed_start = Some(now);
                    }
                    write_all(&c.channel, &msg, c.index, cfg.timeout)?;
                    c.sent += 1;
                    if c.received == total {
                        c.timed_end = Instant::now();
                        key.cancel();
                        remaining -= 1;
                        break;
                    }
                }
            }
        }
    }
    selector.close();
    Ok(state
        .into_iter()
        .map(|c| ConnectionResult {
            index: c.index,
            elapsed: c.timed_end - c.timed_start.unwrap_or(c.timed_end),
            bytes_moved: cfg.message_count * cfg.message_size as u64,
            operations: cfg.message_count,
            messages_sent: c.sent,
            messages_received: c.received,
            samples_ns: c.samples,
            data_requests: c.channel.stats().data_requests,
            flushes: 0,
        })
        .collect())
}

/// Runs the configured mode over already established channels.
pub fn run_on_channels(
    provider: &Provider,
    cfg: &BenchmarkConfig,
    channels: Vec<Channel>,
) -> Result<RunResult, BenchError> {
    cfg.validate()?;
    let n = channels.len();
    let log = EventLog::default();
    let owners = Owners::new(n);
    let barrier = Barrier::new(n);
    let mut results: Vec<ConnectionResult> = thread::scope(|scope| {
        let mut handles = Vec::new();
        match cfg.mode {
            Mode::Throughput => {
                let barrier = &barrier;
                for (conn, ch) in channels.iter().enumerate() {
                    let (log, owners) = (&log, &owners);
                    handles.push(scope.spawn(move || -> Result<Vec<ConnectionResult>, BenchError> {
                        owners.claim(conn, conn, log)?;
                        let r = match cfg.role {
                            Role::Server => throughput_server_conn(ch, conn, cfg, barrier, log),
                            Role::Client => throughput_client_conn(ch, conn, cfg),
                        };
                        if r.is_err() && cfg.role == Role::Server {
                            // Release the other server threads; their run fails too.
                            let _ = ch.abort();
                        }
                        r.map(|r| vec![r])
                    }));
                }
            }
            Mode::Latency => {
                let threads = n;
                let mut buckets: Vec<Vec<(usize, Channel)>> = vec![Vec::new(); threads];
                for (i, ch) in channels.iter().enumerate() {
                    buckets[i % threads].push((i, ch.clone()));
                }
                for (t, bucket) in buckets.into_iter().enumerate() {
                    let (log, owners) = (&log, &owners);
                    handles.push(scope.spawn(move || {
                        latency_thread(t, bucket, cfg, provider, owners, log)
                    }));
                }
            }
        }
        let mut all = Vec::new();
        let mut first_err = None;
        for h in handles {
            match h.join() {
                Ok(Ok(mut r)) => all.append(&mut r),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(BenchError::ThreadPanicked);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(all),
        }
    })?;
    results.sort_by_key(|r| r.index);
    Ok(RunResult {
        mode: cfg.mode,
        role: cfg.role,
        message_size: cfg.message_size,
        connections: results,
        events: log.events(),
    })
}

/// Listening side of the benchmark; the listener persists across runs.
pub struct BenchServer {
    provider: Provider,
    server: ServerChannel,
    address: String,
}

impl BenchServer {
    pub fn bind(provider: &Provider, address: &str) -> Result<Self, BenchError> {
        let server = provider.open_server_channel()?;
        let address = server.bind(address)?;
        Ok(Self {
            provider: provider.clone(),
            server,
            address,
        })
    }

    pub fn local_address(&self) -> &str {
        &self.address
    }

    /// Accepts `connections` channels and runs one benchmark over them.
    pub fn run(&self, cfg: &BenchmarkConfig) -> Result<RunResult, BenchError> {
        cfg.validate()?;
        let mut channels = Vec::with_capacity(cfg.connections);
        let mut idle = Idle::new(cfg.timeout);
        while channels.len() < cfg.connections {
            match self.server.accept()? {
                Some(ch) => {
                    channels.push(ch);
                    idle.progressed();
                }
                None => idle.wait(channels.len(), "accepting connections")?,
            }
        }
        let result = run_on_channels(&self.provider, cfg, channels.clone());
        close_all(&channels, result.is_ok());
        result
    }

    pub fn close(&self) -> Result<(), BenchError> {
        Ok(self.server.close()?)
    }
}

fn close_all(channels: &[Channel], graceful: bool) {
    for ch in channels {
        let _ = if graceful { ch.close() } else { ch.abort() };
    }
}

/// Connects with retries until the idle timeout, so the client may start
/// before the server listens.
pub fn connect(provider: &Provider, address: &str, timeout: Duration) -> Result<Channel, BenchError> {
    let deadline = Instant::now() + timeout;
    loop {
        let ch = provider.open_channel()?;
        ch.connect(address)?;
        let mut spins = 0u32;
        let err = loop {
            match ch.finish_connect() {
                Ok(true) => return Ok(ch),
                Ok(false) => {
                    spins += 1;
                    if spins % 16 == 0 {
                        thread::yield_now();
                    }
                }
                Err(e) => break e,
            }
        };
        if Instant::now() >= deadline {
            return Err(err.into());
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Client side of one run: connects `connections` channels and runs.
pub fn run_client(provider: &Provider, cfg: &BenchmarkConfig) -> Result<RunResult, BenchError> {
    cfg.validate()?;
    let mut channels = Vec::with_capacity(cfg.connections);
    for _ in 0..cfg.connections {
        match connect(provider, &cfg.address, cfg.timeout) {
            Ok(ch) => channels.push(ch),
            Err(e) => {
                close_all(&channels, false);
                return Err(e);
            }
        }
    }
    let result = run_on_channels(provider, cfg, channels.clone());
    close_all(&channels, result.is_ok());
    result
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub server: RunResult,
    pub client: RunResult,
}

impl PairResult {
    /// The side that measures: the sender for throughput, the initiator for
    /// latency. Both are the server.
    pub fn measured(&self) -> &RunResult {
        &self.server
    }
}

/// Runs both roles in this process against an existing server.
pub fn run_pair_with(
    provider: &Provider,
    server: &BenchServer,
    cfg: &BenchmarkConfig,
) -> Result<PairResult, BenchError> {
    let server_cfg = BenchmarkConfig {
        role: Role::Server,
        ..cfg.clone()
    };
    let client_cfg = BenchmarkConfig {
        role: Role::Client,
        address: server.local_address().to_string(),
        ..cfg.clone()
    };
    let (s, c) = thread::scope(|scope| {
        let s = scope.spawn(|| server.run(&server_cfg));
        let c = run_client(provider, &client_cfg);
        (s.join(), c)
    });
    let s = s.map_err(|_| BenchError::ThreadPanicked)?;
    Ok(PairResult {
        server: s?,
        client: c?,
    })
}

/// Runs both roles in this process on a fresh listener at `cfg.address`.
pub fn run_pair(provider: &Provider, cfg: &BenchmarkConfig) -> Result<PairResult, BenchError> {
    let server = BenchServer::bind(provider, &cfg.address)?;
    let result = run_pair_with(provider, &server, cfg);
    server.close()?;
    result
}
