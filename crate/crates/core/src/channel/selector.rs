use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{Channel, ChannelError, OpSet, ServerChannel, SELECT_YIELD_INTERVAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectTimeout {
    /// One pass over the keys.
    Immediate,
    After(Duration),
    Indefinite,
}

/// Something that can be registered with a [`Selector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selectable {
    Channel(Channel),
    Server(ServerChannel),
}

impl From<Channel> for Selectable {
    fn from(c: Channel) -> Self {
        Selectable::Channel(c)
    }
}

impl From<&Channel> for Selectable {
    fn from(c: &Channel) -> Self {
        Selectable::Channel(c.clone())
    }
}

impl From<ServerChannel> for Selectable {
    fn from(s: ServerChannel) -> Self {
        Selectable::Server(s)
    }
}

impl From<&ServerChannel> for Selectable {
    fn from(s: &ServerChannel) -> Self {
        Selectable::Server(s.clone())
    }
}

impl Selectable {
    pub fn valid_ops(&self) -> OpSet {
        match self {
            Selectable::Channel(_) => OpSet::READ | OpSet::WRITE | OpSet::CONNECT,
            Selectable::Server(_) => OpSet::ACCEPT,
        }
    }

    /// Progresses the target. `None` means it is closed for good.
    fn poll(&self) -> Option<OpSet> {
        match self {
            Selectable::Channel(c) => c.poll_for_key(),
            Selectable::Server(s) => s.poll().ok(),
        }
    }

    fn registration(&self) -> Option<(u64, std::sync::Weak<KeyInner>)> {
        match self {
            Selectable::Channel(c) => c.lock().registration.clone(),
            Selectable::Server(s) => s.lock().registration.clone(),
        }
    }
}

pub(crate) struct KeyInner {
    selector_id: u64,
    target: Selectable,
    interest: AtomicU8,
    ready: AtomicU8,
    cancelled: AtomicBool,
    attachment: AtomicUsize,
}

impl KeyInner {
    pub(crate) fn mark_cancelled(&self) {
        self.cancelled.store(true, Ordering::Release);
    }

    fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::Acquire)
    }
}

/// Registration of one channel with one selector.
#[derive(Clone)]
pub struct SelectionKey {
    inner: Arc<KeyInner>,
}

impl std::fmt::Debug for SelectionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SelectionKey")
            .field("target", &self.inner.target)
            .field("interest", &self.interest())
            .field("ready", &self.ready())
            .field("valid", &self.is_valid())
            .finish()
    }
}

impl PartialEq for SelectionKey {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Eq for SelectionKey {}

impl SelectionKey {
    pub fn target(&self) -> &Selectable {
        &self.inner.target
    }

    pub fn channel(&self) -> Option<&Channel> {
        match &self.inner.target {
            Selectable::Channel(c) => Some(c),
            Selectable::Server(_) => None,
        }
    }

    pub fn server(&self) -> Option<&ServerChannel> {
        match &self.inner.target {
            Selectable::Server(s) => Some(s),
            Selectable::Channel(_) => None,
        }
    }

    pub fn interest(&self) -> OpSet {
        OpSet::from_bits_truncate(self.inner.interest.load(Ordering::Acquire))
    }

    pub fn set_interest(&self, ops: OpSet) -> Result<(), ChannelError> {
        if !self.is_valid() {
            return Err(ChannelError::Closed);
        }
        if !self.inner.target.valid_ops().contains(ops) {
            return Err(ChannelError::InvalidInterest(ops));
        }
        self.inner.interest.store(ops.bits(), Ordering::Release);
        Ok(())
    }

    /// Ready operations found by the last select, limited to the interest set.
    pub fn ready(&self) -> OpSet {
        OpSet::from_bits_truncate(self.inner.ready.load(Ordering::Acquire))
    }

    pub fn is_readable(&self) -> bool {
        self.ready().contains(OpSet::READ)
    }

    pub fn is_writable(&self) -> bool {
        self.ready().contains(OpSet::WRITE)
    }

    pub fn is_connectable(&self) -> bool {
        self.ready().contains(OpSet::CONNECT)
    }

    pub fn is_acceptable(&self) -> bool {
        self.ready().contains(OpSet::ACCEPT)
    }

    pub fn attach(&self, value: usize) {
        self.inner.attachment.store(value, Ordering::Release);
    }

    pub fn attachment(&self) -> usize {
        self.inner.attachment.load(Ordering::Acquire)
    }

    pub fn is_valid(&self) -> bool {
        !self.inner.is_cancelled()
    }

    /// Cancels the registration. The channel may register again right away,
    /// with this or another selector.
    pub fn cancel(&self) {
        self.inner.mark_cancelled();
        let clear = |reg: &mut Option<(u64, std::sync::Weak<KeyInner>)>| {
            if reg
                .as_ref()
                .is_some_and(|(_, w)| std::ptr::eq(w.as_ptr(), Arc::as_ptr(&self.inner)))
            {
                *reg = None;
            }
        };
        match &self.inner.target {
            Selectable::Channel(c) => clear(&mut c.lock().registration),
            Selectable::Server(s) => clear(&mut s.lock().registration),
        }
    }
}

struct SelectorInner {
    id: u64,
    keys: Mutex<Vec<Arc<KeyInner>>>,
    selected: Mutex<Vec<SelectionKey>>,
    closed: AtomicBool,
}

/// Busy-polling readiness selector.
///
/// `select` progresses the worker of every registered channel, so it never
/// sleeps; waiting selects yield the thread every
/// [`SELECT_YIELD_INTERVAL`] passes.
#[derive(Clone)]
pub struct Selector {
    inner: Arc<SelectorInner>,
}

impl std::fmt::Debug for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Selector")
            .field("id", &self.inner.id)
            .field("keys", &self.key_count())
            .finish()
    }
}

impl Selector {
    pub(crate) fn new(id: u64) -> Self {
        Self {
            inner: Arc::new(SelectorInner {
                id,
                keys: Mutex::new(Vec::new()),
                selected: Mutex::new(Vec::new()),
                closed: AtomicBool::new(false),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn is_open(&self) -> bool {
        !self.inner.closed.load(Ordering::Acquire)
    }

    /// Registers `target`, or updates the interest of its existing key with
    /// this selector.
    pub fn register(
        &self,
        target: impl Into<Selectable>,
        interest: OpSet,
    ) -> Result<SelectionKey, ChannelError> {
        if !self.is_open() {
            return Err(ChannelError::Closed);
        }
        let target = target.into();
        if !target.valid_ops().contains(interest) {
            return Err(ChannelError::InvalidInterest(interest));
        }
        let open = match &target {
            Selectable::Channel(c) => c.is_open(),
            Selectable::Server(s) => s.is_open(),
        };
        if !open {
            return Err(ChannelError::Closed);
        }
        if let Some((sid, weak)) = target.registration() {
            if let Some(existing) = weak.upgrade().filter(|k| !k.is_cancelled()) {
                if sid != self.inner.id {
                    return Err(ChannelError::AlreadyRegistered);
                }
                existing.interest.store(interest.bits(), Ordering::Release);
                return Ok(SelectionKey { inner: existing });
            }
        }
        let key = Arc::new(KeyInner {
            selector_id: self.inner.id,
            target: target.clone(),
            interest: AtomicU8::new(interest.bits()),
            ready: AtomicU8::new(0),
            cancelled: AtomicBool::new(false),
            attachment: AtomicUsize::new(0),
        });
        let reg = Some((key.selector_id, Arc::downgrade(&key)));
        match &target {
            Selectable::Channel(c) => c.lock().registration = reg,
            Selectable::Server(s) => s.lock().registration = reg,
        }
        self.inner.keys.lock().unwrap().push(Arc::clone(&key));
        Ok(SelectionKey { inner: key })
    }

    /// Number of live registrations.
    pub fn key_count(&self) -> usize {
        self.inner
            .keys
            .lock()
            .unwrap()
            .iter()
            .filter(|k| !k.is_cancelled())
            .count()
    }

    pub fn keys(&self) -> Vec<SelectionKey> {
        self.inner
            .keys
            .lock()
            .unwrap()
            .iter()
            .filter(|k| !k.is_cancelled())
            .map(|k| SelectionKey { inner: Arc::clone(k) })
            .collect()
    }

    /// Polls every key until at least one is ready or the timeout passes.
    /// Returns the number of ready keys; they are available from
    /// [`selected`](Self::selected).
    pub fn select(&self, timeout: SelectTimeout) -> Result<usize, ChannelError> {
        if !self.is_open() {
            return Err(ChannelError::Closed);
        }
        let deadline = match timeout {
            SelectTimeout::After(d) => Some(Instant::now() + d),
            _ => None,
        };
        let mut iteration: u32 = 0;
        loop {
            let ready = self.select_pass();
            if ready > 0 || timeout == SelectTimeout::Immediate {
                return Ok(ready);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(0);
            }
            if !self.is_open() {
                return Err(ChannelError::Closed);
            }
            iteration = iteration.wrapping_add(1);
            if iteration % SELECT_YIELD_INTERVAL == 0 {
                std::thread::yield_now();
            }
        }
    }

    pub fn select_now(&self) -> Result<usize, ChannelError> {
        self.select(SelectTimeout::Immediate)
    }

    fn select_pass(&self) -> usize {
        let keys: Vec<Arc<KeyInner>> = {
            let mut keys = self.inner.keys.lock().unwrap();
            keys.retain(|k| !k.is_cancelled());
            keys.clone()
        };
        let mut selected = Vec::new();
        for key in keys {
            match key.target.poll() {
                None => {
                    key.mark_cancelled();
                    key.ready.store(0, Ordering::Release);
                }
                Some(ops) => {
                    let interest = OpSet::from_bits_truncate(key.interest.load(Ordering::Acquire));
                    let ready = ops & interest;
                    key.ready.store(ready.bits(), Ordering::Release);
                    if !ready.is_empty() {
                        selected.push(SelectionKey { inner: key });
                    }
                }
            }
        }
        let n = selected.len();
        *self.inner.selected.lock().unwrap() = selected;
        n
    }

    /// Keys found ready by the last select.
    pub fn selected(&self) -> Vec<SelectionKey> {
        self.inner.selected.lock().unwrap().clone()
    }

    /// Takes the keys found ready by the last select.
    pub fn drain_selected(&self) -> Vec<SelectionKey> {
        std::mem::take(&mut *self.inner.selected.lock().unwrap())
    }

    /// Closes the selector and cancels all its keys. Channels stay open.
    pub fn close(&self) {
        if self.inner.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let keys = std::mem::take(&mut *self.inner.keys.lock().unwrap());
        for key in keys {
            SelectionKey { inner: key }.cancel();
        }
        self.inner.selected.lock().unwrap().clear();
    }
}
