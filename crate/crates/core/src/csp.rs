//! Shared message-passing scaffolding: bounded queues, binding registries,
//! the packet-dealer loop and the task census every stack task reports to.

use std::collections::HashMap;
use std::fmt;
use std::future::Future;
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use tokio::sync::Notify;

use crate::error::{Error, Result};

/// Bounded multi-producer multi-consumer FIFO.
///
/// `send` waits while the queue is full, `recv` waits while it is empty, and
/// `close` wakes every blocked party with `Closed`. Items already queued at
/// close time are discarded. Cloning yields another handle to the same queue;
/// the queue stays open until some handle calls `close`.
pub struct MessageQueue<T> {
    tx: async_channel::Sender<T>,
    rx: async_channel::Receiver<T>,
}

impl<T> Clone for MessageQueue<T> {
    fn clone(&self) -> Self {
        MessageQueue {
            tx: self.tx.clone(),
            rx: self.rx.clone(),
        }
    }
}

impl<T> fmt::Debug for MessageQueue<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MessageQueue")
            .field("len", &self.len())
            .field("capacity", &self.capacity())
            .field("closed", &self.is_closed())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrySendError {
    Full,
    Closed,
}

impl<T> MessageQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        let (tx, rx) = async_channel::bounded(capacity);
        Ok(MessageQueue { tx, rx })
    }

    pub async fn send(&self, item: T) -> Result<()> {
        self.tx.send(item).await.map_err(|_| Error::Closed)
    }

    /// Like `send`, but a closed queue hands the item back.
    pub async fn send_or_return(&self, item: T) -> std::result::Result<(), T> {
        self.tx.send(item).await.map_err(|e| e.0)
    }

    pub fn try_send(&self, item: T) -> std::result::Result<(), TrySendError> {
        self.tx.try_send(item).map_err(|e| match e {
            async_channel::TrySendError::Full(_) => TrySendError::Full,
            async_channel::TrySendError::Closed(_) => TrySendError::Closed,
        })
    }

    pub async fn recv(&self) -> Result<T> {
        if self.rx.is_closed() {
            return Err(Error::Closed);
        }
        self.rx.recv().await.map_err(|_| Error::Closed)
    }

    pub fn try_recv(&self) -> Option<T> {
        if self.rx.is_closed() {
            return None;
        }
        self.rx.try_recv().ok()
    }

    pub async fn recv_timeout(&self, timeout: Duration) -> Result<T> {
        match tokio::time::timeout(timeout, self.recv()).await {
            Ok(r) => r,
            Err(_) => Err(Error::Timeout),
        }
    }

    pub fn close(&self) {
        self.tx.close();
        while self.rx.try_recv().is_ok() {}
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }

    /// True when both handles refer to the same queue.
    pub fn same_queue(&self, other: &MessageQueue<T>) -> bool {
        self.tx.same_channel(&other.tx)
    }

    pub fn capacity(&self) -> usize {
        self.tx.capacity().unwrap_or(usize::MAX)
    }
}

/// Synchronized map from a demultiplexing key to the queue bound for it.
pub struct BindingRegistry<K, T> {
    map: RwLock<HashMap<K, MessageQueue<T>>>,
    unbound_drops: AtomicU64,
}

impl<K, T> Default for BindingRegistry<K, T> {
    fn default() -> Self {
        BindingRegistry {
            map: RwLock::new(HashMap::new()),
            unbound_drops: AtomicU64::new(0),
        }
    }
}

impl<K: Eq + Hash + Clone, T> BindingRegistry<K, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&self, key: K, queue: MessageQueue<T>) -> Result<()> {
        let mut map = self.map.write();
        if map.contains_key(&key) {
            return Err(Error::AlreadyBound);
        }
        map.insert(key, queue);
        Ok(())
    }

    /// Binds `key` to a queue built only if the key is free.
    pub fn bind_with(&self, key: K, make: impl FnOnce() -> MessageQueue<T>) -> Result<MessageQueue<T>> {
        let mut map = self.map.write();
        if map.contains_key(&key) {
            return Err(Error::AlreadyBound);
        }
        let q = make();
        map.insert(key, q.clone());
        Ok(q)
    }

    pub fn unbind(&self, key: &K) -> Result<MessageQueue<T>> {
        self.map.write().remove(key).ok_or(Error::NotBound)
    }

    pub fn lookup(&self, key: &K) -> Option<MessageQueue<T>> {
        self.map.read().get(key).cloned()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.read().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    pub fn keys(&self) -> Vec<K> {
        self.map.read().keys().cloned().collect()
    }

    /// Unbinds everything and closes every bound queue.
    pub fn clear(&self) {
        let drained: Vec<_> = self.map.write().drain().collect();
        for (_, q) in drained {
            q.close();
        }
    }

    pub fn count_unbound(&self) {
        self.unbound_drops.fetch_add(1, Ordering::Relaxed);
    }

    pub fn unbound_drops(&self) -> u64 {
        self.unbound_drops.load(Ordering::Relaxed)
    }

    /// Delivers `item` to the queue bound for `key`, waiting for room.
    /// Returns `false` (and counts a drop) when nothing is bound.
    pub async fn dispatch(&self, key: &K, item: T) -> bool {
        match self.lookup(key) {
            Some(q) => q.send(item).await.is_ok(),
            None => {
                self.count_unbound();
                false
            }
        }
    }
}

/// Outcome counters of one dealer loop.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DealerReport {
    pub forwarded: u64,
    pub unclassified: u64,
    pub unbound: u64,
}

/// The packet-dealer loop: receive, classify, forward to the bound queue.
///
/// `classify` may reshape the message (for instance strip a header) but
/// returns `None` for messages it cannot classify; those are dropped and
/// counted. Returns when `input` closes.
pub async fn run_dealer<I, K, O, F>(
    input: MessageQueue<I>,
    mut classify: F,
    registry: Arc<BindingRegistry<K, O>>,
) -> DealerReport
where
    K: Eq + Hash + Clone,
    F: FnMut(I) -> Option<(K, O)>,
{
    let mut report = DealerReport::default();
    while let Ok(msg) = input.recv().await {
        match classify(msg) {
            Some((key, out)) => {
                if registry.dispatch(&key, out).await {
                    report.forwarded += 1;
                } else {
                    report.unbound += 1;
                }
            }
            None => report.unclassified += 1,
        }
    }
    report
}

/// Live-task counter. Every task a stack spawns goes through
/// [`TaskCensus::spawn`] so shutdown can wait for the count to reach zero.
#[derive(Clone, Default)]
pub struct TaskCensus {
    inner: Arc<CensusInner>,
}

#[derive(Default)]
struct CensusInner {
    live: AtomicUsize,
    zero: Notify,
}

struct CensusGuard(Arc<CensusInner>);

impl Drop for CensusGuard {
    fn drop(&mut self) {
        if self.0.live.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.0.zero.notify_waiters();
        }
    }
}

impl TaskCensus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::Acquire)
    }

    pub fn spawn<F>(&self, fut: F) -> tokio::task::JoinHandle<F::Output>
    where
        F: Future + Send + 'static,
        F::Output: Send + 'static,
    {
        self.inner.live.fetch_add(1, Ordering::AcqRel);
        let guard = CensusGuard(self.inner.clone());
        tokio::spawn(async move {
            let _guard = guard;
            fut.await
        })
    }

    /// Waits until no counted task remains, up to `limit`.
    pub async fn wait_zero(&self, limit: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            let notified = self.inner.zero.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.live() == 0 {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.live() == 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn send_then_receive() {
        let q = MessageQueue::new(4).unwrap();
        q.send(5u32).await.unwrap();
        assert_eq!(q.recv().await.unwrap(), 5);
        assert!(MessageQueue::<u8>::new(0).is_err());
    }

    #[tokio::test]
    async fn full_queue_blocks_sender() {
        let q = MessageQueue::new(1).unwrap();
        q.send(1u8).await.unwrap();
        assert_eq!(q.try_send(2), Err(TrySendError::Full));
        let q2 = q.clone();
        let pending = tokio::spawn(async move { q2.send(2).await });
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert!(!pending.is_finished());
        assert_eq!(q.recv().await.unwrap(), 1);
        pending.await.unwrap().unwrap();
        assert_eq!(q.recv().await.unwrap(), 2);
    }

    #[tokio::test]
    async fn close_wakes_receivers() {
        let q: MessageQueue<u8> = MessageQueue::new(2).unwrap();
        let waiters: Vec<_> = (0..3)
            .map(|_| {
                let q = q.clone();
                tokio::spawn(async move { q.recv().await })
            })
            .collect();
        tokio::time::sleep(Duration::from_millis(10)).await;
        q.close();
        for w in waiters {
            assert_eq!(w.await.unwrap(), Err(Error::Closed));
        }
        assert_eq!(q.send(1).await, Err(Error::Closed));
    }

    #[tokio::test]
    async fn per_producer_order_is_preserved() {
        let q = MessageQueue::new(8).unwrap();
        let producers = 6u32;
        let items = 500u32;
        for p in 0..producers {
            let q = q.clone();
            tokio::spawn(async move {
                for i in 0..items {
                    q.send((p, i)).await.unwrap();
                }
            });
        }
        let mut next = vec![0u32; producers as usize];
        for _ in 0..producers * items {
            let (p, i) = q.recv().await.unwrap();
            assert_eq!(next[p as usize], i);
            next[p as usize] += 1;
        }
        assert!(next.iter().all(|&n| n == items));
    }

    #[tokio::test]
    async fn registry_binding_rules() {
        let reg: BindingRegistry<u16, u8> = BindingRegistry::new();
        let q = MessageQueue::new(4).unwrap();
        reg.bind(2048, q.clone()).unwrap();
        assert_eq!(reg.bind(2048, q.clone()), Err(Error::AlreadyBound));
        assert!(reg.dispatch(&2048, 1).await);
        assert_eq!(q.recv().await.unwrap(), 1);
        assert!(!reg.dispatch(&0x86dd, 2).await);
        assert_eq!(reg.unbound_drops(), 1);
        reg.unbind(&2048).unwrap();
        assert_eq!(reg.unbind(&2048).err(), Some(Error::NotBound));
        assert!(!reg.dispatch(&2048, 3).await);
    }

    #[tokio::test]
    async fn dealer_separates_classes() {
        let input = MessageQueue::new(16).unwrap();
        let reg = Arc::new(BindingRegistry::<u8, u32>::new());
        let queues: Vec<_> = [1u8, 6, 17]
            .iter()
            .map(|&p| {
                let q = MessageQueue::new(20_000).unwrap();
                reg.bind(p, q.clone()).unwrap();
                (p, q)
            })
            .collect();
        let dealer = tokio::spawn(run_dealer(
            input.clone(),
            |(proto, tag): (u8, u32)| if proto == 0 { None } else { Some((proto, tag)) },
            reg.clone(),
        ));
        let protos = [1u8, 6, 17, 99, 0];
        for i in 0..10_000u32 {
            input.send((protos[i as usize % 5], i)).await.unwrap();
        }
        while !input.is_empty() {
            tokio::task::yield_now().await;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
        input.close();
        let report = dealer.await.unwrap();
        assert_eq!(report.forwarded, 6000);
        assert_eq!(report.unbound, 2000);
        assert_eq!(report.unclassified, 2000);
        for (p, q) in queues {
            let mut n = 0;
            while let Some(tag) = q.try_recv() {
                assert_eq!(protos[tag as usize % 5], p);
                n += 1;
            }
            assert_eq!(n, 2000);
        }
    }

    #[tokio::test]
    async fn dealer_exits_on_empty_close() {
        let input: MessageQueue<u8> = MessageQueue::new(1).unwrap();
        let reg = Arc::new(BindingRegistry::<u8, u8>::new());
        input.close();
        let report = run_dealer(input, |m| Some((m, m)), reg).await;
        assert_eq!(report, DealerReport::default());
    }

    #[tokio::test]
    async fn census_tracks_tasks() {
        let census = TaskCensus::new();
        let gate = Arc::new(Notify::new());
        for _ in 0..5 {
            let gate = gate.clone();
            census.spawn(async move { gate.notified().await });
        }
        tokio::task::yield_now().await;
        assert_eq!(census.live(), 5);
        assert!(!census.wait_zero(Duration::from_millis(20)).await);
        gate.notify_waiters();
        assert!(census.wait_zero(Duration::from_secs(1)).await);
    }
}
