//! Non-blocking channels and the busy-polling selector.
//!
//! Every open [`Channel`] and [`ServerChannel`] owns exactly one transport
//! [`Worker`](crate::transport::Worker). Because channels never share a worker
//! they can move between selectors freely; the price is that [`Selector::select`]
//! has to progress the worker of every registered channel.

mod selector;
mod server;
mod socket;

use std::env;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bitflags::bitflags;
use thiserror::Error;

use crate::ringbuf::{RingError, DEFAULT_CAPACITY, DEFAULT_SLICE_LENGTH};
use crate::transport::{Backend, Transport, TransportConfig, TransportError};

pub use selector::{SelectTimeout, Selectable, SelectionKey, Selector};
pub use server::ServerChannel;
pub use socket::{Channel, ChannelState, ChannelStats, ReadResult};

pub const RING_BUFFER_SIZE_VAR: &str = "RING_BUFFER_SIZE";
pub const SLICE_LENGTH_VAR: &str = "SLICE_LENGTH";

/// Iterations between cooperative yields inside a busy-polling select.
pub const SELECT_YIELD_INTERVAL: u32 = 64;

bitflags! {
    /// Readiness operations, with the values of the classic selector API.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct OpSet: u8 {
        const READ = 1 << 0;
        const WRITE = 1 << 2;
        const CONNECT = 1 << 3;
        const ACCEPT = 1 << 4;
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel is closed")]
    Closed,
    #[error("channel is not connected")]
    NotConnected,
    #[error("operation `{op}` not allowed in state {state:?}")]
    InvalidState { op: &'static str, state: ChannelState },
    #[error("no connection pending")]
    NoConnectionPending,
    #[error("connect failed: {0}")]
    ConnectFailed(#[source] TransportError),
    #[error("channel is registered with another selector")]
    AlreadyRegistered,
    #[error("interest {0:?} not supported by this channel")]
    InvalidInterest(OpSet),
    #[error("server channel is not bound")]
    NotBound,
    #[error("server channel is already bound")]
    AlreadyBound,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// Sizes used for new channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub ring_capacity: usize,
    pub slice_length: usize,
    /// Receive window granted to peers as credit.
    pub recv_capacity: usize,
    pub handshake_timeout: Duration,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            ring_capacity: DEFAULT_CAPACITY,
            slice_length: DEFAULT_SLICE_LENGTH,
            recv_capacity: DEFAULT_CAPACITY,
            handshake_timeout: crate::transport::DEFAULT_HANDSHAKE_TIMEOUT,
        }
    }
}

impl ChannelConfig {
    /// Defaults overridden by `RING_BUFFER_SIZE` and `SLICE_LENGTH`.
    pub fn from_env() -> Result<Self, ChannelError> {
        Self::from_lookup(|key| env::var(key).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ChannelError> {
        let mut cfg = Self::default();
        let parse = |key: &str| -> Result<Option<usize>, ChannelError> {
            match lookup(key) {
                None => Ok(None),
                Some(raw) => raw
                    .trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .map(Some)
                    .ok_or_else(|| ChannelError::Config(format!("{key}={raw:?} is not a positive integer"))),
            }
        };
        if let Some(size) = parse(RING_BUFFER_SIZE_VAR)? {
            cfg.ring_capacity = size;
            cfg.recv_capacity = size;
        }
        if let Some(slice) = parse(SLICE_LENGTH_VAR)? {
            cfg.slice_length = slice;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.slice_length == 0 || self.ring_capacity < self.slice_length {
            return Err(ChannelError::Config(format!(
                "slice length {} must be in 1..={}",
                self.slice_length, self.ring_capacity
            )));
        }
        Ok(())
    }
}

/// Counts of live transport workers and open channels, taken atomically with
/// respect to channel open/close.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Census {
    pub workers: usize,
    pub channels: usize,
    pub servers: usize,
}

#[derive(Debug, Default)]
struct Counts {
    channels: usize,
    servers: usize,
}

pub(crate) struct ProviderShared {
    transport: Transport,
    config: ChannelConfig,
    counts: Mutex<Counts>,
    next_channel_id: AtomicU64,
    next_selector_id: AtomicU64,
}

impl ProviderShared {
    pub(crate) fn next_channel_id(&self) -> u64 {
        self.next_channel_id.fetch_add(1, Ordering::Relaxed)
    }
}

/// Factory for channels and selectors sharing one transport instance.
#[derive(Clone)]
pub struct Provider {
    shared: Arc<ProviderShared>,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider")
            .field("backend", &self.shared.transport.backend())
            .field("config", &self.shared.config)
            .finish()
    }
}

impl Provider {
    pub fn new(backend: Backend, config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        let transport = Transport::new(
            backend,
            TransportConfig {
                slice_length: config.slice_length,
                handshake_timeout: config.handshake_timeout,
                ..TransportConfig::default()
            },
        );
        Ok(Self {
            shared: Arc::new(ProviderShared {
                transport,
                config,
                counts: Mutex::new(Counts::default()),
                next_channel_id: AtomicU64::new(1),
                next_selector_id: AtomicU64::new(1),
            }),
        })
    }

    pub fn loopback() -> Self {
        Self::new(Backend::Loopback, ChannelConfig::default()).expect("default config is valid")
    }

    pub fn backend(&self) -> Backend {
        self.shared.transport.backend()
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.shared.config
    }

    pub fn transport(&self) -> &Transport {
        &self.shared.transport
    }

    pub fn open_channel(&self) -> Result<Channel, ChannelError> {
        Channel::open(Arc::clone(&self.shared))
    }

    pub fn open_server_channel(&self) -> Result<ServerChannel, ChannelError> {
        ServerChannel::open(Arc::clone(&self.shared))
    }

    pub fn open_selector(&self) -> Selector {
        let id = self.shared.next_selector_id.fetch_add(1, Ordering::Relaxed);
        Selector::new(id)
    }

    pub fn census(&self) -> Census {
        let counts = self.shared.counts.lock().unwrap();
        Census {
            workers: self.shared.transport.live_workers(),
            channels: counts.channels,
            servers: counts.servers,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum WorkerRole {
    Channel,
    Server,
}

impl ProviderShared {
    /// Creates a worker and counts its owner in one step so a census never
    /// observes one without the other.
    pub(crate) fn spawn_worker(&self, role: WorkerRole) -> Result<crate::transport::Worker, ChannelError> {
        let mut counts = self.counts.lock().unwrap();
        let worker = self.transport.create_worker()?;
        match role {
            WorkerRole::Channel => counts.channels += 1,
            WorkerRole::Server => counts.servers += 1,
        }
        Ok(worker)
    }

    pub(crate) fn retire_worker(&self, worker: crate::transport::Worker, role: WorkerRole) {
        let mut counts = self.counts.lock().unwrap();
        drop(worker);
        match role {
            WorkerRole::Channel => counts.channels -= 1,
            WorkerRole::Server => counts.servers -= 1,
        }
    }
}
