//! DDS entities on top of the protected heap.
//!
//! A [`Domain`] is one runtime instance worth of middleware: the shared heap
//! holding participants, topics, writers, readers, waitsets and samples, the
//! permanent-buffer arena, and optionally a network attachment. Every method
//! taking a [`DomainContext`] is a library operation and must run between
//! `enter_library` and `exit_library`; [`Process`] wraps them into the
//! application-facing calls.

mod app;
mod delivery;
mod net;
mod reclaim;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::ThreadId;
use std::time::{Duration, Instant};

use crate::buffers::{BlockRef, BufferArena, RegionConfig};
use crate::error::{Error, Result};
use crate::heap::{Descriptor, EntityKind, EntityRef, SharedHeap};
use crate::runtime::{DomainContext, Pid, Runtime, TimeBoundPolicy};
use crate::transport::{Endpoint, Transport};
use crate::wait::WaitWord;
use crate::wire::{self, WriterReliability};

pub use app::{Process, ReaderHandle, Received};
pub use net::NetStats;

pub const MAX_TOPIC_NAME: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reliability {
    BestEffort,
    Reliable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum History {
    KeepAll,
    KeepLast(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Durability {
    Volatile,
    TransientLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QosProfile {
    pub reliability: Reliability,
    pub history: History,
    pub durability: Durability,
}

impl QosProfile {
    pub const BEST_EFFORT: QosProfile = QosProfile {
        reliability: Reliability::BestEffort,
        history: History::KeepLast(1),
        durability: Durability::Volatile,
    };

    pub const RELIABLE: QosProfile = QosProfile {
        reliability: Reliability::Reliable,
        history: History::KeepAll,
        durability: Durability::Volatile,
    };

    pub const RELIABLE_TRANSIENT: QosProfile = QosProfile {
        reliability: Reliability::Reliable,
        history: History::KeepAll,
        durability: Durability::TransientLocal,
    };

    pub fn is_reliable(&self) -> bool {
        self.reliability == Reliability::Reliable
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainConfig {
    pub policy: TimeBoundPolicy,
    pub heap_slots_per_kind: usize,
    pub regions: RegionConfig,
    pub receipt_capacity: usize,
    pub eager_notify: bool,
    pub reliable_window: usize,
    pub mtu_payload: usize,
    /// Datagrams sent per library call before the rest is left to the daemon.
    pub tx_budget: usize,
    /// Longest a take spins for a sample whose delivery has already begun.
    pub take_spin_limit: Duration,
    pub reassembly_timeout: Duration,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            policy: TimeBoundPolicy::default(),
            heap_slots_per_kind: 1024,
            regions: RegionConfig::default(),
            receipt_capacity: 1024,
            eager_notify: true,
            reliable_window: 1024,
            mtu_payload: wire::DEFAULT_MTU_PAYLOAD,
            tx_budget: 64,
            take_spin_limit: Duration::from_micros(200),
            reassembly_timeout: Duration::from_secs(5),
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        self.regions.validate()?;
        if self.heap_slots_per_kind == 0 || self.heap_slots_per_kind > u32::MAX as usize {
            return Err(Error::InvalidConfig(
                "heap slots per kind must be positive".into(),
            ));
        }
        if self.receipt_capacity == 0 || self.reliable_window == 0 || self.tx_budget == 0 {
            return Err(Error::InvalidConfig(
                "receipt capacity, reliable window and tx budget must be positive".into(),
            ));
        }
        if self.mtu_payload == 0 || self.mtu_payload > usize::from(u16::MAX) {
            return Err(Error::InvalidConfig(format!(
                "mtu payload {} out of range",
                self.mtu_payload
            )));
        }
        Ok(())
    }
}

/// Per-reader delivery record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageReceipt {
    pub topic: Descriptor,
    pub sample: Descriptor,
    pub writer_id: u32,
    pub sequence: u64,
    pub sample_len: u64,
    pub timestamp: u64,
}

/// One sample copied out by [`Domain::hdds_take`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TakenSample {
    pub block: BlockRef,
    pub len: u64,
    pub sequence: u64,
    pub timestamp: u64,
    pub writer_id: u32,
}

#[derive(Debug)]
pub enum Backing {
    /// A block in some process's permanent region, owned by the library.
    Block(BlockRef),
    /// A network-sourced payload reassembled in library memory.
    Heap(Arc<[u8]>),
}

#[derive(Debug)]
pub struct SampleState {
    pub topic: Descriptor,
    pub writer_id: u32,
    pub sequence: u64,
    pub timestamp: u64,
    pub len: u64,
    pub backing: Backing,
}

#[derive(Debug)]
pub struct TopicState {
    pub name: String,
    pub topic_id: u32,
    pub max_sample_len: u64,
    pub qos: QosProfile,
    readers: RwLock<Vec<Arc<ReaderState>>>,
    writers: RwLock<Vec<Arc<WriterState>>>,
    /// Deliveries that have started but not yet appended every receipt.
    in_flight: AtomicU32,
}

impl TopicState {
    pub fn reader_count(&self) -> usize {
        self.readers.read().unwrap().len()
    }

    pub fn writer_count(&self) -> usize {
        self.writers.read().unwrap().len()
    }

    pub fn reader_descs(&self) -> Vec<Descriptor> {
        self.readers
            .read()
            .unwrap()
            .iter()
            .map(|r| r.desc)
            .collect()
    }

    fn delivery_in_progress(&self) -> bool {
        self.in_flight.load(Ordering::Acquire) > 0
    }
}

#[derive(Debug)]
pub(crate) struct CachedSample {
    pub sample: Descriptor,
    pub outbound: Arc<net::OutboundSample>,
}

#[derive(Debug)]
pub(crate) struct WriterInner {
    pub next_seq: u64,
    pub history: VecDeque<(u64, Descriptor)>,
    pub reliable: Option<WriterReliability<Endpoint, CachedSample>>,
    pub heartbeat_count: u32,
    pub next_heartbeat: Option<Instant>,
    pub closed: bool,
}

#[derive(Debug)]
pub struct WriterState {
    pub desc: Descriptor,
    pub writer_id: u32,
    pub owner: Pid,
    pub topic: Descriptor,
    pub topic_state: Arc<TopicState>,
    pub(crate) inner: Mutex<WriterInner>,
    /// Bumped whenever acknowledgments open room in the reliable window.
    pub ack_word: Arc<WaitWord>,
}

impl WriterState {
    pub fn last_sequence(&self) -> u64 {
        self.inner.lock().unwrap().next_seq - 1
    }

    pub fn history_len(&self) -> usize {
        self.inner.lock().unwrap().history.len()
    }

    pub fn unacked(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .reliable
            .as_ref()
            .map_or(0, |r| r.cached())
    }
}

/// Application-visible count of pending receipts for one reader.
///
/// Written by the library before it wakes anybody; the application may
/// read it (and scribble on it), the library never reads it back.
#[derive(Debug, Clone, Default)]
pub struct ReadinessCell(Arc<AtomicU32>);

impl ReadinessCell {
    pub fn pending(&self) -> u32 {
        self.0.load(Ordering::Acquire)
    }

    /// Overwrites the advisory count, as a buggy or hostile process might.
    pub fn scribble(&self, v: u32) {
        self.0.store(v, Ordering::Release);
    }

    fn announce(&self, n: u32) {
        self.0.fetch_add(n, Ordering::AcqRel);
    }

    fn consume(&self, n: u32) {
        let _ = self
            .0
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |v| {
                Some(v.saturating_sub(n))
            });
    }
}

#[derive(Debug)]
pub struct ReaderState {
    pub desc: Descriptor,
    pub reader_id: u32,
    pub owner: Pid,
    pub topic: Descriptor,
    pub topic_state: Arc<TopicState>,
    queue: Mutex<VecDeque<MessageReceipt>>,
    capacity: usize,
    readiness: ReadinessCell,
    waitsets: Mutex<Vec<Arc<WaitWord>>>,
    closed: AtomicBool,
}

impl ReaderState {
    pub fn pending(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug)]
pub struct WaitsetState {
    pub owner: Pid,
    pub readers: Vec<Arc<ReaderState>>,
    pub word: Arc<WaitWord>,
}

#[derive(Debug)]
pub enum Entity {
    Participant,
    Topic(Arc<TopicState>),
    Writer(Arc<WriterState>),
    Reader(Arc<ReaderState>),
    Waitset(Arc<WaitsetState>),
    Sample(SampleState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Notify,
    Append,
}

/// One step of a delivery, in global order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub order: u64,
    pub at: Instant,
    pub thread: ThreadId,
    pub kind: TraceKind,
    pub reader_id: u32,
    pub writer_id: u32,
    pub sequence: u64,
}

/// Counters used by tests and the benchmark.
#[derive(Debug, Default)]
pub struct Instrumentation {
    payload_copies: AtomicU64,
    delivery_ops: AtomicU64,
    notifies: AtomicU64,
    order: AtomicU64,
    trace: Mutex<Option<Vec<TraceEvent>>>,
}

impl Instrumentation {
    /// Payload copies made into receiver buffers.
    pub fn payload_copies(&self) -> u64 {
        self.payload_copies.load(Ordering::Relaxed)
    }

    /// Per-receiver steps performed by deliverers.
    pub fn delivery_ops(&self) -> u64 {
        self.delivery_ops.load(Ordering::Relaxed)
    }

    pub fn notifies(&self) -> u64 {
        self.notifies.load(Ordering::Relaxed)
    }

    pub fn start_trace(&self) {
        *self.trace.lock().unwrap() = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap().take().unwrap_or_default()
    }

    fn record(&self, kind: TraceKind, reader_id: u32, writer_id: u32, sequence: u64) {
        let mut t = self.trace.lock().unwrap();
        if let Some(events) = t.as_mut() {
            events.push(TraceEvent {
                order: self.order.fetch_add(1, Ordering::Relaxed),
                at: Instant::now(),
                thread: std::thread::current().id(),
                kind,
                reader_id,
                writer_id,
                sequence,
            });
        }
    }
}

#[derive(Debug, Default)]
struct TopicRegistry {
    by_name: HashMap<String, Descriptor>,
    by_id: HashMap<u32, (Descriptor, Arc<TopicState>)>,
}

#[derive(Debug)]
pub(crate) struct DomainInner {
    runtime: Runtime,
    config: DomainConfig,
    heap: SharedHeap<Entity>,
    arena: BufferArena,
    topics: RwLock<TopicRegistry>,
    writers: RwLock<HashMap<u32, Arc<WriterState>>>,
    next_endpoint_id: AtomicU32,
    instr: Instrumentation,
    net: Option<net::NetworkState>,
    deferred_regions: Mutex<Vec<Pid>>,
}

impl Drop for DomainInner {
    fn drop(&mut self) {
        // topics and writers point at each other; break the cycles
        let reg = self.topics.get_mut().unwrap();
        for (_, t) in reg.by_id.values() {
            t.readers.write().unwrap().clear();
            t.writers.write().unwrap().clear();
        }
    }
}

/// One runtime instance of the middleware. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Domain {
    inner: Arc<DomainInner>,
}

/// 32-bit FNV-1a, used to derive wire topic ids from names.
pub fn topic_id_for(name: &str) -> u32 {
    name.bytes().fold(0x811c_9dc5u32, |h, b| {
        (h ^ u32::from(b)).wrapping_mul(0x0100_0193)
    })
}

impl Domain {
    /// A domain with no network attachment.
    pub fn new(config: DomainConfig) -> Result<Domain> {
        Self::build(config, None)
    }

    /// A domain that exchanges samples with `peers` over `transport`.
    pub fn with_network(
        config: DomainConfig,
        transport: Arc<dyn Transport>,
        peers: Vec<Endpoint>,
    ) -> Result<Domain> {
        if config.mtu_payload + wire::FRAG_OVERHEAD > transport.mtu() {
            return Err(Error::InvalidConfig(format!(
                "mtu payload {} does not fit in {}-byte datagrams",
                config.mtu_payload,
                transport.mtu()
            )));
        }
        let state = net::NetworkState::new(transport, peers, config.reassembly_timeout);
        Self::build(config, Some(state))
    }

    fn build(config: DomainConfig, net: Option<net::NetworkState>) -> Result<Domain> {
        config.validate()?;
        let runtime = Runtime::new(config.policy);
        Ok(Domain {
            inner: Arc::new(DomainInner {
                heap: SharedHeap::new(runtime.clone(), config.heap_slots_per_kind),
                arena: BufferArena::new(runtime.clone(), config.regions)?,
                runtime,
                config,
                topics: RwLock::new(TopicRegistry::default()),
                writers: RwLock::new(HashMap::new()),
                next_endpoint_id: AtomicU32::new(1),
                instr: Instrumentation::default(),
                net,
                deferred_regions: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn runtime(&self) -> &Runtime {
        &self.inner.runtime
    }

    pub fn config(&self) -> &DomainConfig {
        &self.inner.config
    }

    pub fn heap(&self) -> &SharedHeap<Entity> {
        &self.inner.heap
    }

    pub fn arena(&self) -> &BufferArena {
        &self.inner.arena
    }

    pub fn instrumentation(&self) -> &Instrumentation {
        &self.inner.instr
    }

    pub fn same_domain(&self, other: &Domain) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn resolve(
        &self,
        ctx: &DomainContext,
        desc: Descriptor,
        kind: EntityKind,
        owned: bool,
    ) -> Result<EntityRef<Entity>> {
        self.inner.heap.resolve(ctx, desc, kind, owned)
    }

    pub(crate) fn topic_state(
        &self,
        ctx: &DomainContext,
        desc: Descriptor,
    ) -> Result<Arc<TopicState>> {
        match &*self.resolve(ctx, desc, EntityKind::Topic, false)?.body {
            Entity::Topic(t) => Ok(Arc::clone(t)),
            _ => Err(Error::StaleDescriptor),
        }
    }

    pub(crate) fn writer_state(
        &self,
        ctx: &DomainContext,
        desc: Descriptor,
    ) -> Result<Arc<WriterState>> {
        match &*self.resolve(ctx, desc, EntityKind::Writer, true)?.body {
            Entity::Writer(w) => Ok(Arc::clone(w)),
            _ => Err(Error::StaleDescriptor),
        }
    }

    pub(crate) fn reader_state(
        &self,
        ctx: &DomainContext,
        desc: Descriptor,
    ) -> Result<Arc<ReaderState>> {
        match &*self.resolve(ctx, desc, EntityKind::Reader, true)?.body {
            Entity::Reader(r) => Ok(Arc::clone(r)),
            _ => Err(Error::StaleDescriptor),
        }
    }

    fn waitset_state(&self, ctx: &DomainContext, desc: Descriptor) -> Result<Arc<WaitsetState>> {
        match &*self.resolve(ctx, desc, EntityKind::Waitset, true)?.body {
            Entity::Waitset(w) => Ok(Arc::clone(w)),
            _ => Err(Error::StaleDescriptor),
        }
    }

    pub fn create_participant(&self, ctx: &DomainContext) -> Result<Descriptor> {
        self.inner
            .heap
            .allocate(ctx, EntityKind::Participant, ctx.pid(), Entity::Participant)
    }

    pub fn create_topic(
        &self,
        ctx: &DomainContext,
        participant: Descriptor,
        name: &str,
        max_sample_len: u64,
        qos: QosProfile,
    ) -> Result<Descriptor> {
        self.resolve(ctx, participant, EntityKind::Participant, true)?;
        if name.is_empty() {
            return Err(Error::InvalidTopicName("empty"));
        }
        if name.len() > MAX_TOPIC_NAME {
            return Err(Error::InvalidTopicName("longer than 255 bytes"));
        }
        if let History::KeepLast(0) = qos.history {
            return Err(Error::InvalidConfig(
                "KeepLast depth must be positive".into(),
            ));
        }
        let topic_id = topic_id_for(name);
        let mut reg = self.inner.topics.write().unwrap();
        if reg.by_name.contains_key(name) || reg.by_id.contains_key(&topic_id) {
            return Err(Error::DuplicateTopicName(name.to_owned()));
        }
        let state = Arc::new(TopicState {
            name: name.to_owned(),
            topic_id,
            max_sample_len,
            qos,
            readers: RwLock::new(Vec::new()),
            writers: RwLock::new(Vec::new()),
            in_flight: AtomicU32::new(0),
        });
        let desc = self.inner.heap.allocate(
            ctx,
            EntityKind::Topic,
            ctx.pid(),
            Entity::Topic(Arc::clone(&state)),
        )?;
        reg.by_name.insert(name.to_owned(), desc);
        reg.by_id.insert(topic_id, (desc, state));
        Ok(desc)
    }

    pub fn lookup_topic(&self, ctx: &DomainContext, name: &str) -> Result<Option<Descriptor>> {
        ctx.require_library()?;
        Ok(self.inner.topics.read().unwrap().by_name.get(name).copied())
    }

    pub(crate) fn topic_by_id(&self, topic_id: u32) -> Option<(Descriptor, Arc<TopicState>)> {
        self.inner
            .topics
            .read()
            .unwrap()
            .by_id
            .get(&topic_id)
            .map(|(d, t)| (*d, Arc::clone(t)))
    }

    /// Creates a writer whose QoS must equal the topic's profile.
    pub fn create_writer(
        &self,
        ctx: &DomainContext,
        topic: Descriptor,
        qos: QosProfile,
    ) -> Result<Descriptor> {
        let ts = self.topic_state(ctx, topic)?;
        if qos != ts.qos {
            return Err(Error::QosMismatch);
        }
        let writer_id = self.inner.next_endpoint_id.fetch_add(1, Ordering::Relaxed);
        let reliable = match (&self.inner.net, qos.reliability) {
            (Some(n), Reliability::Reliable) => Some(WriterReliability::new(
                self.inner.config.reliable_window,
                n.peers.iter().copied(),
            )),
            _ => None,
        };
        let next_heartbeat = self
            .inner
            .net
            .as_ref()
            .filter(|n| !n.peers.is_empty())
            .map(|n| Instant::now() + n.heartbeat_period());
        let desc = self
            .inner
            .heap
            .allocate_with(ctx, EntityKind::Writer, ctx.pid(), |desc| {
                Entity::Writer(Arc::new(WriterState {
                    desc,
                    writer_id,
                    owner: ctx.pid(),
                    topic,
                    topic_state: Arc::clone(&ts),
                    inner: Mutex::new(WriterInner {
                        next_seq: 1,
                        history: VecDeque::new(),
                        reliable,
                        heartbeat_count: 0,
                        next_heartbeat,
                        closed: false,
                    }),
                    ack_word: WaitWord::new(),
                }))
            })?;
        let state = self.writer_state(ctx, desc)?;
        ts.writers.write().unwrap().push(Arc::clone(&state));
        self.inner.writers.write().unwrap().insert(writer_id, state);
        Ok(desc)
    }

    /// Creates a reader and attaches it to the topic. On a TransientLocal
    /// topic the writers' retained history is queued to it right away.
    pub fn create_reader(
        &self,
        ctx: &DomainContext,
        topic: Descriptor,
        qos: QosProfile,
    ) -> Result<Descriptor> {
        let ts = self.topic_state(ctx, topic)?;
        if qos != ts.qos {
            return Err(Error::QosMismatch);
        }
        let reader_id = self.inner.next_endpoint_id.fetch_add(1, Ordering::Relaxed);
        let capacity = self.inner.config.receipt_capacity;
        let desc = self
            .inner
            .heap
            .allocate_with(ctx, EntityKind::Reader, ctx.pid(), |desc| {
                Entity::Reader(Arc::new(ReaderState {
                    desc,
                    reader_id,
                    owner: ctx.pid(),
                    topic,
                    topic_state: Arc::clone(&ts),
                    queue: Mutex::new(VecDeque::new()),
                    capacity,
                    readiness: ReadinessCell::default(),
                    waitsets: Mutex::new(Vec::new()),
                    closed: AtomicBool::new(false),
                }))
            })?;
        let reader = self.reader_state(ctx, desc)?;
        if qos.durability == Durability::TransientLocal {
            self.attach_with_history(ctx, reader)?;
        } else {
            ts.readers.write().unwrap().push(reader);
        }
        Ok(desc)
    }

    /// Creates a waitset triggered by any of `readers`, all owned by the caller.
    pub fn create_waitset(
        &self,
        ctx: &DomainContext,
        readers: &[Descriptor],
    ) -> Result<Descriptor> {
        let states = readers
            .iter()
            .map(|&r| self.reader_state(ctx, r))
            .collect::<Result<Vec<_>>>()?;
        let word = WaitWord::new();
        let desc = self.inner.heap.allocate(
            ctx,
            EntityKind::Waitset,
            ctx.pid(),
            Entity::Waitset(Arc::new(WaitsetState {
                owner: ctx.pid(),
                readers: states.clone(),
                word: Arc::clone(&word),
            })),
        )?;
        for r in &states {
            r.waitsets.lock().unwrap().push(Arc::clone(&word));
        }
        Ok(desc)
    }

    /// Snapshot of a reader's advisory readiness cell for the owning process.
    pub fn reader_readiness(
        &self,
        ctx: &DomainContext,
        reader: Descriptor,
    ) -> Result<ReadinessCell> {
        Ok(self.reader_state(ctx, reader)?.readiness.clone())
    }

    /// Writer state for inspection; requires ownership.
    pub fn writer(&self, ctx: &DomainContext, writer: Descriptor) -> Result<Arc<WriterState>> {
        self.writer_state(ctx, writer)
    }

    /// Reader state for inspection; requires ownership.
    pub fn reader(&self, ctx: &DomainContext, reader: Descriptor) -> Result<Arc<ReaderState>> {
        self.reader_state(ctx, reader)
    }

    /// Topic state for inspection.
    pub fn topic(&self, ctx: &DomainContext, topic: Descriptor) -> Result<Arc<TopicState>> {
        self.topic_state(ctx, topic)
    }

    /// Deletes an entity owned by the caller.
    pub fn delete(&self, ctx: &DomainContext, desc: Descriptor) -> Result<()> {
        if desc.kind == EntityKind::Sample {
            return Err(Error::InvalidStateTransition(
                "samples are freed by dropping their references",
            ));
        }
        self.resolve(ctx, desc, desc.kind, true)?;
        self.destroy(ctx, desc)
    }
}
