use std::sync::{Arc, Mutex, MutexGuard, Weak};

use super::selector::KeyInner;
use super::{Channel, ChannelError, OpSet, ProviderShared, WorkerRole};
use crate::transport::Worker;

pub(crate) struct ServerInner {
    worker: Option<Worker>,
    local_addr: Option<String>,
    pub(crate) registration: Option<(u64, Weak<KeyInner>)>,
    provider: Arc<ProviderShared>,
}

/// Listening channel producing connected [`Channel`]s.
#[derive(Clone)]
pub struct ServerChannel {
    pub(crate) inner: Arc<Mutex<ServerInner>>,
}

impl std::fmt::Debug for ServerChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerChannel")
            .field("local_addr", &self.local_address())
            .finish()
    }
}

impl PartialEq for ServerChannel {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Eq for ServerChannel {}

impl ServerChannel {
    pub(crate) fn open(provider: Arc<ProviderShared>) -> Result<Self, ChannelError> {
        let worker = provider.spawn_worker(WorkerRole::Server)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(ServerInner {
                worker: Some(worker),
                local_addr: None,
                registration: None,
                provider,
            })),
        })
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, ServerInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Binds and starts listening. Returns the bound address, which for TCP
    /// carries the real port when `addr` asked for port 0.
    pub fn bind(&self, addr: &str) -> Result<String, ChannelError> {
        let mut inner = self.lock();
        let worker = inner.worker.as_mut().ok_or(ChannelError::Closed)?;
        if worker.is_listening() {
            return Err(ChannelError::AlreadyBound);
        }
        let bound = worker.listen(addr)?;
        inner.local_addr = Some(bound.clone());
        Ok(bound)
    }

    /// Accepts one pending connection without blocking.
    pub fn accept(&self) -> Result<Option<Channel>, ChannelError> {
        let mut inner = self.lock();
        let provider = Arc::clone(&inner.provider);
        let worker = inner.worker.as_mut().ok_or(ChannelError::Closed)?;
        if !worker.is_listening() {
            return Err(ChannelError::NotBound);
        }
        if worker.pending_connections() == 0 {
            let _ = worker.progress();
        }
        let Some(incoming) = worker.accept_pending()? else {
            return Ok(None);
        };
        let channel_worker = provider.spawn_worker(WorkerRole::Channel)?;
        Channel::accepted(provider, channel_worker, incoming).map(Some)
    }

    pub fn is_open(&self) -> bool {
        self.lock().worker.is_some()
    }

    pub fn local_address(&self) -> Option<String> {
        self.lock().local_addr.clone()
    }

    /// Stops listening and drops unaccepted connections. Idempotent.
    pub fn close(&self) -> Result<(), ChannelError> {
        let key = {
            let mut inner = self.lock();
            inner.shutdown();
            inner.registration.take()
        };
        if let Some(key) = key.and_then(|(_, k)| k.upgrade()) {
            key.mark_cancelled();
        }
        Ok(())
    }

    pub(crate) fn poll(&self) -> Result<OpSet, ChannelError> {
        let mut inner = self.lock();
        let worker = inner.worker.as_mut().ok_or(ChannelError::Closed)?;
        if !worker.is_listening() {
            return Ok(OpSet::empty());
        }
        let _ = worker.progress();
        Ok(if worker.pending_connections() > 0 {
            OpSet::ACCEPT
        } else {
            OpSet::empty()
        })
    }
}

impl ServerInner {
    fn shutdown(&mut self) {
        if let Some(mut worker) = self.worker.take() {
            worker.unlisten();
            self.provider.retire_worker(worker, WorkerRole::Server);
        }
    }
}

impl Drop for ServerInner {
    fn drop(&mut self) {
        self.shutdown();
    }
}
