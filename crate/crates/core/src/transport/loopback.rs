//! In-process backend: per-direction FIFO pipes and a shared listener table.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use super::tag::TaggedMessage;

#[derive(Debug, Default)]
pub(crate) struct Pipe {
    queue: Mutex<VecDeque<TaggedMessage>>,
    closed: AtomicBool,
}

pub(crate) enum PipeRecv {
    Message(TaggedMessage),
    Empty,
    Closed,
}

impl Pipe {
    pub(crate) fn push(&self, msg: TaggedMessage) {
        self.queue.lock().unwrap().push_back(msg);
    }

    pub(crate) fn pop(&self) -> PipeRecv {
        if let Some(msg) = self.queue.lock().unwrap().pop_front() {
            return PipeRecv::Message(msg);
        }
        // Re-check after observing the flag so a final push is never lost.
        if self.closed.load(Ordering::Acquire) {
            match self.queue.lock().unwrap().pop_front() {
                Some(msg) => PipeRecv::Message(msg),
                None => PipeRecv::Closed,
            }
        } else {
            PipeRecv::Empty
        }
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}

/// One side's view of a loopback connection. Dropping it closes the
/// outgoing direction.
#[derive(Debug)]
pub(crate) struct PipePair {
    pub(crate) tx: Arc<Pipe>,
    pub(crate) rx: Arc<Pipe>,
}

impl Drop for PipePair {
    fn drop(&mut self) {
        self.tx.close();
    }
}

/// A connection request waiting in a listener's queue.
pub(crate) struct LoopSyn {
    pub(crate) syn: TaggedMessage,
    pub(crate) to_server: Arc<Pipe>,
    pub(crate) to_client: Arc<Pipe>,
}

#[derive(Default)]
pub(crate) struct LoopListener {
    queue: Mutex<VecDeque<LoopSyn>>,
    closed: AtomicBool,
    next_connection_id: AtomicU32,
}

impl LoopListener {
    pub(crate) fn new() -> Self {
        Self {
            next_connection_id: AtomicU32::new(1),
            ..Self::default()
        }
    }

    /// Queues a connection request. Fails once the listener is closed.
    pub(crate) fn offer(&self, syn: LoopSyn) -> Result<(), LoopSyn> {
        let mut queue = self.queue.lock().unwrap();
        if self.closed.load(Ordering::Acquire) {
            return Err(syn);
        }
        queue.push_back(syn);
        Ok(())
    }

    pub(crate) fn take(&self) -> Option<LoopSyn> {
        self.queue.lock().unwrap().pop_front()
    }

    pub(crate) fn next_connection_id(&self) -> u32 {
        self.next_connection_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Closes the listener and drops queued requests; their connectors see
    /// the pipes close.
    pub(crate) fn close(&self) {
        let mut queue = self.queue.lock().unwrap();
        self.closed.store(true, Ordering::Release);
        for pending in queue.drain(..) {
            pending.to_client.close();
        }
    }
}
