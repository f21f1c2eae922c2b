//! Datagram transports.
//!
//! Two backends share one [`Transport`] trait: a seeded in-process network
//! simulator ([`sim`]) and real UDP sockets ([`udp`]). Both feed a bounded
//! [`RxQueue`] that can be drained without blocking ([`Transport::poll_rx`])
//! or slept on ([`Transport::wait_rx`]).

pub mod sim;
pub mod udp;

use std::collections::VecDeque;
use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::runtime::DomainContext;

pub use sim::{NetConfig, SendDecision, SimNetwork, SimNode, SimStats};
pub use udp::UdpTransport;

pub const DEFAULT_RX_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Sim(u32),
    Udp(SocketAddr),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Sim(n) => write!(f, "sim:{n}"),
            Endpoint::Udp(a) => write!(f, "udp:{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: Endpoint,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxWait {
    Ready,
    TimedOut,
}

/// Bounded receive ring. Overflowing datagrams are dropped and counted.
#[derive(Debug)]
pub struct RxQueue {
    queue: Mutex<VecDeque<Datagram>>,
    arrival: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    accepted: AtomicU64,
}

impl RxQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: Mutex::new(VecDeque::new()),
            arrival: Condvar::new(),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
            accepted: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    /// Returns false when the ring was full and the datagram was dropped.
    pub fn push(&self, d: Datagram) -> bool {
        let mut q = self.queue.lock().unwrap();
        if q.len() >= self.capacity {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        q.push_back(d);
        self.accepted.fetch_add(1, Ordering::Relaxed);
        drop(q);
        self.arrival.notify_all();
        true
    }

    pub fn pop_batch(&self, max: usize) -> Vec<Datagram> {
        let mut q = self.queue.lock().unwrap();
        let n = q.len().min(max);
        q.drain(..n).collect()
    }

    /// Wakes anyone blocked in [`RxQueue::wait_until`] so they re-check.
    pub fn kick(&self) {
        let _g = self.queue.lock().unwrap();
        self.arrival.notify_all();
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, VecDeque<Datagram>> {
        self.queue.lock().unwrap()
    }

    pub(crate) fn wait_on<'a>(
        &self,
        guard: MutexGuard<'a, VecDeque<Datagram>>,
        until: Instant,
    ) -> MutexGuard<'a, VecDeque<Datagram>> {
        let now = Instant::now();
        if until <= now {
            return guard;
        }
        self.arrival.wait_timeout(guard, until - now).unwrap().0
    }

    /// Blocks until the queue is nonempty or `deadline` passes.
    pub fn wait_until(&self, deadline: Instant) -> RxWait {
        let mut q = self.lock();
        loop {
            if !q.is_empty() {
                return RxWait::Ready;
            }
            if Instant::now() >= deadline {
                return RxWait::TimedOut;
            }
            q = self.wait_on(q, deadline);
        }
    }
}

pub trait Transport: Send + Sync + fmt::Debug {
    fn local_endpoint(&self) -> Endpoint;

    /// Largest datagram accepted by [`Transport::send`].
    fn mtu(&self) -> usize;

    fn send(&self, dest: Endpoint, datagram: &[u8]) -> Result<()>;

    /// Returns up to `max` queued datagrams without blocking.
    fn poll_rx(&self, max: usize) -> Vec<Datagram>;

    /// Blocks outside the library until a datagram is queued or `timeout`
    /// elapses.
    fn wait_rx(&self, ctx: &DomainContext, timeout: Duration) -> Result<RxWait>;

    fn rx_dropped(&self) -> u64;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    fn dg(i: u8) -> Datagram {
        Datagram {
            src: Endpoint::Sim(0),
            bytes: vec![i],
        }
    }

    #[test]
    fn batches_respect_max() {
        let q = RxQueue::new(16);
        assert!(q.pop_batch(3).is_empty());
        for i in 0..5 {
            q.push(dg(i));
        }
        assert_eq!(q.pop_batch(3).len(), 3);
        assert_eq!(q.pop_batch(3).len(), 2);
    }

    #[test]
    fn overflow_is_counted() {
        let q = RxQueue::new(2);
        assert!(q.push(dg(0)));
        assert!(q.push(dg(1)));
        assert!(!q.push(dg(2)));
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn waiter_sees_arrival() {
        let q = Arc::new(RxQueue::new(4));
        let q2 = Arc::clone(&q);
        let h = thread::spawn(move || q2.wait_until(Instant::now() + Duration::from_secs(5)));
        thread::sleep(Duration::from_millis(5));
        q.push(dg(9));
        assert_eq!(h.join().unwrap(), RxWait::Ready);
        assert_eq!(q.wait_until(Instant::now()), RxWait::Ready);
        q.pop_batch(1);
        assert_eq!(
            q.wait_until(Instant::now() + Duration::from_millis(5)),
            RxWait::TimedOut
        );
    }
}
