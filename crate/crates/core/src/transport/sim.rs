//! Seeded in-process network simulator.
//!
//! Loss, delay and reordering are drawn from a ChaCha stream at send time,
//! one fixed set of draws per datagram, so the decision trace depends only
//! on the seed and the order of sends. Delayed datagrams sit in the
//! destination's in-flight heap and move into its RX ring once due.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Datagram, Endpoint, RxQueue, RxWait, Transport, DEFAULT_RX_CAPACITY};
use crate::error::{Error, Result};
use crate::runtime::DomainContext;
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub loss_prob: f64,
    pub delay: Duration,
    pub jitter: Duration,
    pub reorder_prob: f64,
    pub seed: u64,
    pub mtu_datagram: usize,
    pub rx_capacity: usize,
    /// Busy time charged to a thread each time a blocking receive wakes.
    pub wake_cost: Duration,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            delay: Duration::ZERO,
            jitter: Duration::ZERO,
            reorder_prob: 0.0,
            seed: 42,
            mtu_datagram: wire::DEFAULT_MTU_PAYLOAD + wire::FRAG_OVERHEAD,
            rx_capacity: DEFAULT_RX_CAPACITY,
            wake_cost: Duration::from_micros(5),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(Error::InvalidConfig(format!(
                "loss probability {} not in [0, 1]",
                self.loss_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.reorder_prob) {
            return Err(Error::InvalidConfig(format!(
                "reorder probability {} not in [0, 1]",
                self.reorder_prob
            )));
        }
        if self.mtu_datagram < wire::FRAG_OVERHEAD + 1 {
            return Err(Error::InvalidConfig(format!(
                "datagram size {} too small",
                self.mtu_datagram
            )));
        }
        Ok(())
    }
}

/// What the simulator decided for one send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendDecision {
    pub order: u64,
    pub src: u32,
    pub dst: u32,
    pub len: usize,
    pub lost: bool,
    pub delay: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub sent: u64,
    pub lost: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

#[derive(Debug)]
struct InFlight {
    due: Instant,
    order: u64,
    datagram: Datagram,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    // reversed: BinaryHeap is a max-heap, we want earliest due first
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.due, other.order).cmp(&(self.due, self.order))
    }
}

#[derive(Debug)]
struct NodeShared {
    rx: RxQueue,
    in_flight: Mutex<BinaryHeap<InFlight>>,
}

#[derive(Debug)]
struct Decider {
    rng: ChaCha8Rng,
    order: u64,
    trace: Option<Vec<SendDecision>>,
}

#[derive(Debug)]
struct NetInner {
    config: NetConfig,
    decider: Mutex<Decider>,
    nodes: RwLock<Vec<Arc<NodeShared>>>,
    sent: AtomicU64,
    lost: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

/// The shared medium. Cheap to clone.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    inner: Arc<NetInner>,
}

impl SimNetwork {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            inner: Arc::new(NetInner {
                config,
                decider: Mutex::new(Decider {
                    rng: ChaCha8Rng::seed_from_u64(config.seed),
                    order: 0,
                    trace: None,
                }),
                nodes: RwLock::new(Vec::new()),
                sent: AtomicU64::new(0),
                lost: AtomicU64::new(0),
                delivered: AtomicU64::new(0),
                dropped: AtomicU64::new(0),
            }),
        })
    }

    pub fn config(&self) -> NetConfig {
        self.inner.config
    }

    /// Adds a node and returns its transport handle.
    pub fn attach(&self) -> Arc<SimNode> {
        let mut nodes = self.inner.nodes.write().unwrap();
        let id = nodes.len() as u32;
        nodes.push(Arc::new(NodeShared {
            rx: RxQueue::new(self.inner.config.rx_capacity),
            in_flight: Mutex::new(BinaryHeap::new()),
        }));
        Arc::new(SimNode {
            id,
            net: self.clone(),
            shared: Arc::clone(&nodes[id as usize]),
        })
    }

    /// Starts recording every send decision.
    pub fn record_trace(&self) {
        self.inner.decider.lock().unwrap().trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Vec<SendDecision> {
        self.inner
            .decider
            .lock()
            .unwrap()
            .trace
            .clone()
            .unwrap_or_default()
    }

    pub fn stats(&self) -> SimStats {
        let i = &self.inner;
        let in_flight = i
            .nodes
            .read()
            .unwrap()
            .iter()
            .map(|n| n.in_flight.lock().unwrap().len() as u64)
            .sum();
        SimStats {
            sent: i.sent.load(Ordering::Relaxed),
            lost: i.lost.load(Ordering::Relaxed),
            delivered: i.delivered.load(Ordering::Relaxed),
            dropped: i.dropped.load(Ordering::Relaxed),
            in_flight,
        }
    }

    fn node(&self, id: u32) -> Option<Arc<NodeShared>> {
        self.inner.nodes.read().unwrap().get(id as usize).cloned()
    }

    fn send_from(&self, src: u32, dst: Endpoint, bytes: &[u8]) -> Result<()> {
        let cfg = &self.inner.config;
        if bytes.len() > cfg.mtu_datagram {
            return Err(Error::OversizedDatagram {
                len: bytes.len(),
                mtu: cfg.mtu_datagram,
            });
        }
        let Endpoint::Sim(dst) = dst else {
            return Err(Error::InvalidConfig(format!(
                "{dst} is not a simulated endpoint"
            )));
        };
        self.inner.sent.fetch_add(1, Ordering::Relaxed);
        let target = self.node(dst);
        let (order, lost, delay) = {
            let mut d = self.inner.decider.lock().unwrap();
            let loss_draw: f64 = d.rng.random();
            let jitter_draw: f64 = d.rng.random();
            let reorder_draw: f64 = d.rng.random();
            let lost = loss_draw < cfg.loss_prob || target.is_none();
            let mut delay = cfg.delay + cfg.jitter.mul_f64(jitter_draw);
            if reorder_draw < cfg.reorder_prob {
                delay += (cfg.delay + cfg.jitter).max(Duration::from_micros(100));
            }
            d.order += 1;
            let order = d.order;
            if let Some(t) = d.trace.as_mut() {
                t.push(SendDecision {
                    order,
                    src,
                    dst,
                    len: bytes.len(),
                    lost,
                    delay,
                });
            }
            (order, lost, delay)
        };
        let Some(target) = target.filter(|_| !lost) else {
            self.inner.lost.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        };
        let datagram = Datagram {
            src: Endpoint::Sim(src),
            bytes: bytes.to_vec(),
        };
        if delay.is_zero() {
            self.enqueue(&target, datagram);
        } else {
            target.in_flight.lock().unwrap().push(InFlight {
                due: Instant::now() + delay,
                order,
                datagram,
            });
            target.rx.kick();
        }
        Ok(())
    }

    fn enqueue(&self, node: &NodeShared, d: Datagram) {
        if node.rx.push(d) {
            self.inner.delivered.fetch_add(1, Ordering::Relaxed);
        } else {
            self.inner.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn promote(&self, node: &NodeShared) {
        let now = Instant::now();
        let due: Vec<Datagram> = {
            let mut heap = node.in_flight.lock().unwrap();
            let mut out = Vec::new();
            while heap.peek().is_some_and(|f| f.due <= now) {
                out.push(heap.pop().unwrap().datagram);
            }
            out
        };
        for d in due {
            self.enqueue(node, d);
        }
    }
}

/// One attachment point on a [`SimNetwork`].
#[derive(Debug)]
pub struct SimNode {
    id: u32,
    net: SimNetwork,
    shared: Arc<NodeShared>,
}

impl SimNode {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    pub fn rx_len(&self) -> usize {
        self.net.promote(&self.shared);
        self.shared.rx.len()
    }

    fn next_due(&self) -> Option<Instant> {
        self.shared.in_flight.lock().unwrap().peek().map(|f| f.due)
    }
}

impl Transport for SimNode {
    fn local_endpoint(&self) -> Endpoint {
        Endpoint::Sim(self.id)
    }

    fn mtu(&self) -> usize {
        self.net.inner.config.mtu_datagram
    }

    fn send(&self, dest: Endpoint, datagram: &[u8]) -> Result<()> {
        self.net.send_from(self.id, dest, datagram)
    }

    fn poll_rx(&self, max: usize) -> Vec<Datagram> {
        self.net.promote(&self.shared);
        self.shared.rx.pop_batch(max)
    }

    fn wait_rx(&self, ctx: &DomainContext, timeout: Duration) -> Result<RxWait> {
        ctx.require_application()?;
        let start = Instant::now();
        let deadline = start + timeout;
        let mut blocked = false;
        loop {
            self.net.promote(&self.shared);
            let q = self.shared.rx.lock();
            if !q.is_empty() {
                drop(q);
                if blocked {
                    ctx.add_blocked(start.elapsed());
                    spin_for(self.net.inner.config.wake_cost);
                }
                return Ok(RxWait::Ready);
            }
            let now = Instant::now();
            if now >= deadline {
                drop(q);
                ctx.add_blocked(start.elapsed());
                return Ok(RxWait::TimedOut);
            }
            let until = self.next_due().map_or(deadline, |d| d.min(deadline));
            blocked = true;
            drop(self.shared.rx.wait_on(q, until));
        }
    }

    fn rx_dropped(&self) -> u64 {
        self.shared.rx.dropped()
    }
}

fn spin_for(d: Duration) {
    if d.is_zero() {
        return;
    }
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}
