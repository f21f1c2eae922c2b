//! Network side of a domain: encoding, the TX queue, RX dispatch,
//! heartbeats and acknowledgments.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::delivery::Notifier;
use super::{Domain, Reliability, WriterState};
use crate::error::{Error, Result};
use crate::runtime::DomainContext;
use crate::transport::{Datagram, Endpoint, Transport};
use crate::wire::{
    self, Accepted, AckNack, GuidPrefix, Heartbeat, Message, ReaderProxy, Reassembler, Reassembly,
    ReassemblyKey, SampleMeta, Submessage,
};

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

fn fresh_guid() -> GuidPrefix {
    let mut g = [0u8; 12];
    g[..4].copy_from_slice(&std::process::id().to_le_bytes());
    g[4..].copy_from_slice(&NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed).to_le_bytes());
    g
}

/// A sample waiting to go out. Datagrams are encoded one at a time as
/// the TX pump reaches them, so queueing costs the same for any size.
#[derive(Debug)]
pub(crate) struct OutboundSample {
    meta: SampleMeta,
    payload: Arc<[u8]>,
    mtu_payload: usize,
}

impl OutboundSample {
    fn datagram_count(&self) -> usize {
        wire::fragment_count(self.payload.len(), self.mtu_payload)
    }

    fn encode(&self, guid: GuidPrefix, index: usize) -> Result<Vec<u8>> {
        let sub = wire::fragment_at(self.meta, &self.payload, self.mtu_payload, index);
        Message::new(guid, vec![sub]).encode()
    }
}

#[derive(Debug)]
enum TxSource {
    Encoded(Vec<u8>),
    Sample(Arc<OutboundSample>),
}

impl TxSource {
    fn len(&self) -> usize {
        match self {
            TxSource::Encoded(_) => 1,
            TxSource::Sample(s) => s.datagram_count(),
        }
    }
}

#[derive(Debug)]
struct TxJob {
    source: TxSource,
    dests: Vec<Endpoint>,
    next: usize,
    current: Option<(usize, Vec<u8>)>,
}

impl TxJob {
    fn total(&self) -> usize {
        self.source.len() * self.dests.len()
    }

    fn datagram(&mut self, guid: GuidPrefix, index: usize) -> Result<&[u8]> {
        let sample = match &self.source {
            TxSource::Encoded(bytes) => return Ok(bytes),
            TxSource::Sample(s) => s,
        };
        if self.current.as_ref().is_none_or(|(i, _)| *i != index) {
            self.current = Some((index, sample.encode(guid, index)?));
        }
        Ok(&self.current.as_ref().expect("just encoded").1)
    }
}

type RemoteSample = (u64, Arc<[u8]>);

#[derive(Debug)]
struct RxState {
    reassembler: Reassembler,
    proxies: HashMap<(GuidPrefix, u32), ReaderProxy<RemoteSample>>,
}

/// Counters for the network path.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct NetStats {
    pub rx_processed: u64,
    pub malformed: u64,
    pub datagrams_sent: u64,
    pub send_errors: u64,
    pub heartbeats_sent: u64,
    pub acknacks_sent: u64,
    pub retransmits: u64,
}

#[derive(Debug, Default)]
struct NetCounters {
    rx_processed: AtomicU64,
    malformed: AtomicU64,
    datagrams_sent: AtomicU64,
    send_errors: AtomicU64,
    heartbeats_sent: AtomicU64,
    acknacks_sent: AtomicU64,
    retransmits: AtomicU64,
}

#[derive(Debug)]
pub(crate) struct NetworkState {
    transport: Arc<dyn Transport>,
    pub peers: Vec<Endpoint>,
    guid: GuidPrefix,
    tx: Mutex<VecDeque<TxJob>>,
    rx: Mutex<RxState>,
    heartbeat_period: Mutex<Duration>,
    counters: NetCounters,
}

impl NetworkState {
    pub fn new(
        transport: Arc<dyn Transport>,
        peers: Vec<Endpoint>,
        reassembly_timeout: Duration,
    ) -> Self {
        let local = transport.local_endpoint();
        let mut peers: Vec<Endpoint> = peers.into_iter().filter(|p| *p != local).collect();
        peers.sort();
        peers.dedup();
        Self {
            transport,
            peers,
            guid: fresh_guid(),
            tx: Mutex::new(VecDeque::new()),
            rx: Mutex::new(RxState {
                reassembler: Reassembler::new(reassembly_timeout),
                proxies: HashMap::new(),
            }),
            heartbeat_period: Mutex::new(Duration::from_secs(1)),
            counters: NetCounters::default(),
        }
    }

    pub fn heartbeat_period(&self) -> Duration {
        *self.heartbeat_period.lock().unwrap()
    }

    pub fn outbound_sample(
        &self,
        meta: SampleMeta,
        payload: Arc<[u8]>,
        mtu_payload: usize,
    ) -> Arc<OutboundSample> {
        Arc::new(OutboundSample {
            meta,
            payload,
            mtu_payload,
        })
    }

    pub fn broadcast_sample(&self, sample: &Arc<OutboundSample>) {
        self.queue(TxSource::Sample(Arc::clone(sample)), self.peers.clone());
    }

    pub fn broadcast_bytes(&self, bytes: Vec<u8>) {
        self.queue(TxSource::Encoded(bytes), self.peers.clone());
    }

    fn queue(&self, source: TxSource, dests: Vec<Endpoint>) {
        if dests.is_empty() {
            return;
        }
        self.tx.lock().unwrap().push_back(TxJob {
            source,
            dests,
            next: 0,
            current: None,
        });
    }

    fn queue_message(&self, dest: Endpoint, sub: Submessage) -> Result<()> {
        let bytes = Message::new(self.guid, vec![sub]).encode()?;
        self.queue(TxSource::Encoded(bytes), vec![dest]);
        Ok(())
    }

    fn pending_datagrams(&self) -> usize {
        self.tx
            .lock()
            .unwrap()
            .iter()
            .map(|j| j.total() - j.next)
            .sum()
    }

    fn pump(&self, budget: usize) -> usize {
        let mut tx = self.tx.lock().unwrap();
        let mut sent = 0;
        while sent < budget {
            let Some(job) = tx.front_mut() else { break };
            let n = job.dests.len();
            let (d, p) = (job.next / n, job.next % n);
            let dest = job.dests[p];
            match job
                .datagram(self.guid, d)
                .and_then(|bytes| self.transport.send(dest, bytes))
            {
                Ok(()) => {
                    self.counters.datagrams_sent.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    self.counters.send_errors.fetch_add(1, Ordering::Relaxed);
                    log::debug!("send to {dest} failed: {e}");
                }
            }
            sent += 1;
            job.next += 1;
            if job.next >= job.total() {
                tx.pop_front();
            }
        }
        sent
    }
}

impl Domain {
    fn network(&self) -> Result<&NetworkState> {
        self.inner
            .net
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("domain has no network attachment".into()))
    }

    pub fn transport(&self) -> Option<&Arc<dyn Transport>> {
        self.inner.net.as_ref().map(|n| &n.transport)
    }

    pub fn peers(&self) -> &[Endpoint] {
        self.inner.net.as_ref().map_or(&[], |n| &n.peers)
    }

    pub fn net_stats(&self) -> NetStats {
        let Some(n) = self.inner.net.as_ref() else {
            return NetStats::default();
        };
        let c = &n.counters;
        NetStats {
            rx_processed: c.rx_processed.load(Ordering::Relaxed),
            malformed: c.malformed.load(Ordering::Relaxed),
            datagrams_sent: c.datagrams_sent.load(Ordering::Relaxed),
            send_errors: c.send_errors.load(Ordering::Relaxed),
            heartbeats_sent: c.heartbeats_sent.load(Ordering::Relaxed),
            acknacks_sent: c.acknacks_sent.load(Ordering::Relaxed),
            retransmits: c.retransmits.load(Ordering::Relaxed),
        }
    }

    /// Datagrams queued but not yet handed to the transport.
    pub fn tx_pending(&self) -> usize {
        self.inner.net.as_ref().map_or(0, |n| n.pending_datagrams())
    }

    /// Sends up to `budget` queued datagrams. Library mode only.
    pub fn pump_tx(&self, ctx: &DomainContext, budget: usize) -> Result<usize> {
        ctx.require_library()?;
        Ok(self.inner.net.as_ref().map_or(0, |n| n.pump(budget)))
    }

    pub fn heartbeat_period(&self) -> Option<Duration> {
        self.inner.net.as_ref().map(|n| n.heartbeat_period())
    }

    /// Changes the heartbeat period; writers already scheduled further out
    /// than one new period are pulled in.
    pub fn set_heartbeat_period(&self, period: Duration) -> Result<()> {
        if period.is_zero() {
            return Err(Error::InvalidConfig(
                "heartbeat period must be positive".into(),
            ));
        }
        let net = self.network()?;
        *net.heartbeat_period.lock().unwrap() = period;
        let latest = Instant::now() + period;
        for w in self.inner.writers.read().unwrap().values() {
            let mut inner = w.inner.lock().unwrap();
            if let Some(due) = inner.next_heartbeat.as_mut() {
                *due = (*due).min(latest);
            }
        }
        Ok(())
    }

    /// Earliest instant some writer owes a heartbeat.
    pub fn next_heartbeat_due(&self) -> Option<Instant> {
        self.inner
            .writers
            .read()
            .unwrap()
            .values()
            .filter_map(|w| w.inner.lock().unwrap().next_heartbeat)
            .min()
    }

    /// Sends one HEARTBEAT for every writer whose period has elapsed at
    /// `now`, advertising the sequences it can still resend.
    pub fn send_heartbeats(&self, ctx: &DomainContext, now: Instant) -> Result<usize> {
        ctx.require_library()?;
        let Some(net) = self.inner.net.as_ref() else {
            return Ok(0);
        };
        if net.peers.is_empty() {
            return Ok(0);
        }
        let period = net.heartbeat_period();
        let writers: Vec<Arc<WriterState>> = self
            .inner
            .writers
            .read()
            .unwrap()
            .values()
            .cloned()
            .collect();
        let mut sent = 0;
        for w in writers {
            let hb = {
                let mut inner = w.inner.lock().unwrap();
                let Some(due) = inner.next_heartbeat else {
                    continue;
                };
                if inner.closed || now < due {
                    continue;
                }
                let next = due + period;
                inner.next_heartbeat = Some(if next > now { next } else { now + period });
                inner.heartbeat_count = inner.heartbeat_count.wrapping_add(1);
                let (first_seq, last_seq) = match inner.reliable.as_ref() {
                    Some(r) => r.heartbeat_range(),
                    None => (inner.next_seq, inner.next_seq - 1),
                };
                Heartbeat {
                    topic_id: w.topic_state.topic_id,
                    writer_id: w.writer_id,
                    first_seq,
                    last_seq,
                    count: inner.heartbeat_count,
                }
            };
            let bytes = Message::new(net.guid, vec![Submessage::Heartbeat(hb)]).encode()?;
            net.broadcast_bytes(bytes);
            net.counters.heartbeats_sent.fetch_add(1, Ordering::Relaxed);
            sent += 1;
        }
        if sent > 0 {
            net.pump(self.inner.config.tx_budget);
        }
        Ok(sent)
    }

    /// Drains up to `max` datagrams from the transport and processes them.
    pub fn poll_network(&self, ctx: &DomainContext, max: usize) -> Result<usize> {
        ctx.require_library()?;
        let Some(net) = self.inner.net.as_ref() else {
            return Ok(0);
        };
        let batch = net.transport.poll_rx(max);
        if batch.is_empty() {
            return Ok(0);
        }
        self.process_rx_batch(ctx, batch)
    }

    /// Decodes and dispatches a batch of received datagrams. Malformed ones
    /// are counted and skipped. Returns how many decoded cleanly.
    pub fn process_rx_batch(&self, ctx: &DomainContext, batch: Vec<Datagram>) -> Result<usize> {
        ctx.require_library()?;
        let net = self.network()?;
        let mut notifier = Notifier::new(self.inner.config.eager_notify);
        let mut processed = 0;
        let now = Instant::now();
        let mut first_err = None;
        {
            let mut rx = net.rx.lock().unwrap();
            for dg in batch {
                let msg = match Message::decode(&dg.bytes) {
                    Ok(m) => m,
                    Err(e) => {
                        net.counters.malformed.fetch_add(1, Ordering::Relaxed);
                        log::debug!("dropping datagram from {}: {e}", dg.src);
                        continue;
                    }
                };
                processed += 1;
                let guid = msg.header.guid_prefix;
                for sub in msg.submessages {
                    let r = match sub {
                        Submessage::Data(d) => self.on_sample(
                            ctx,
                            &mut rx,
                            guid,
                            SampleMeta {
                                topic_id: d.topic_id,
                                writer_id: d.writer_id,
                                sequence: d.sequence,
                                timestamp: d.timestamp,
                            },
                            Arc::from(d.payload),
                            &mut notifier,
                        ),
                        Submessage::DataFrag(f) => match rx.reassembler.insert(guid, &f, now) {
                            Ok(Reassembly::Complete(bytes)) => self.on_sample(
                                ctx,
                                &mut rx,
                                guid,
                                SampleMeta {
                                    topic_id: f.topic_id,
                                    writer_id: f.writer_id,
                                    sequence: f.sequence,
                                    timestamp: f.timestamp,
                                },
                                Arc::from(bytes),
                                &mut notifier,
                            ),
                            Ok(_) => Ok(()),
                            Err(e) => {
                                net.counters.malformed.fetch_add(1, Ordering::Relaxed);
                                log::debug!("bad fragment from {}: {e}", dg.src);
                                Ok(())
                            }
                        },
                        Submessage::Heartbeat(hb) => {
                            self.on_heartbeat(ctx, &mut rx, net, guid, dg.src, hb, &mut notifier)
                        }
                        Submessage::AckNack(an) => self.on_acknack(ctx, net, dg.src, an),
                    };
                    if let Err(e) = r {
                        first_err.get_or_insert(e);
                    }
                }
            }
            let expirable = |topic_id: u32| {
                self.topic_by_id(topic_id)
                    .is_none_or(|(_, t)| t.qos.reliability == Reliability::BestEffort)
            };
            rx.reassembler.expire(now, expirable);
        }
        notifier.flush(self);
        net.counters
            .rx_processed
            .fetch_add(processed as u64, Ordering::Relaxed);
        net.pump(self.inner.config.tx_budget);
        match first_err {
            Some(e) => Err(e),
            None => Ok(processed),
        }
    }

    fn on_sample(
        &self,
        ctx: &DomainContext,
        rx: &mut RxState,
        guid: GuidPrefix,
        meta: SampleMeta,
        payload: Arc<[u8]>,
        notifier: &mut Notifier,
    ) -> Result<()> {
        let SampleMeta {
            topic_id,
            writer_id,
            sequence,
            ..
        } = meta;
        let Some((topic_desc, topic)) = self.topic_by_id(topic_id) else {
            return Ok(());
        };
        if !topic.qos.is_reliable() {
            return match self.deliver_remote(ctx, topic_desc, &topic, meta, payload, notifier) {
                Err(Error::BackpressureFull) => Ok(()),
                other => other,
            };
        }
        let proxy = rx
            .proxies
            .entry((guid, writer_id))
            .or_insert_with(|| ReaderProxy::new(true));
        let Accepted::Deliver(ready) = proxy.accept(sequence, (meta.timestamp, payload)) else {
            return Ok(());
        };
        for (seq, (ts, bytes)) in ready {
            match self.deliver_remote(
                ctx,
                topic_desc,
                &topic,
                SampleMeta {
                    sequence: seq,
                    timestamp: ts,
                    ..meta
                },
                bytes,
                notifier,
            ) {
                Ok(()) => {}
                Err(Error::BackpressureFull) => {
                    proxy.rollback(seq);
                    rx.reassembler.forget(&ReassemblyKey {
                        guid_prefix: guid,
                        writer_id,
                        sequence: seq,
                    });
                    break;
                }
                Err(e) => {
                    proxy.rollback(seq);
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_heartbeat(
        &self,
        ctx: &DomainContext,
        rx: &mut RxState,
        net: &NetworkState,
        guid: GuidPrefix,
        src: Endpoint,
        hb: Heartbeat,
        notifier: &mut Notifier,
    ) -> Result<()> {
        let Some((topic_desc, topic)) = self.topic_by_id(hb.topic_id) else {
            return Ok(());
        };
        if !topic.qos.is_reliable() {
            return Ok(());
        }
        let proxy = rx
            .proxies
            .entry((guid, hb.writer_id))
            .or_insert_with(|| ReaderProxy::new(true));
        let (_, _, ready) = proxy.on_heartbeat(hb.first_seq, hb.last_seq);
        for (seq, (ts, bytes)) in ready {
            let meta = SampleMeta {
                topic_id: hb.topic_id,
                writer_id: hb.writer_id,
                sequence: seq,
                timestamp: ts,
            };
            if let Err(e) = self.deliver_remote(ctx, topic_desc, &topic, meta, bytes, notifier) {
                proxy.rollback(seq);
                if !matches!(e, Error::BackpressureFull) {
                    return Err(e);
                }
                break;
            }
        }
        let (base, bitmap, _) = proxy.on_heartbeat(hb.first_seq, hb.last_seq);
        net.queue_message(
            src,
            Submessage::AckNack(AckNack {
                topic_id: hb.topic_id,
                reader_id: hb.writer_id,
                base_seq: base,
                bitmap,
            }),
        )?;
        net.counters.acknacks_sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn on_acknack(
        &self,
        ctx: &DomainContext,
        net: &NetworkState,
        src: Endpoint,
        an: AckNack,
    ) -> Result<()> {
        let Some(w) = self
            .inner
            .writers
            .read()
            .unwrap()
            .get(&an.reader_id)
            .cloned()
        else {
            return Ok(());
        };
        if w.topic_state.topic_id != an.topic_id {
            return Ok(());
        }
        let mut released = Vec::new();
        {
            let mut inner = w.inner.lock().unwrap();
            let Some(rel) = inner.reliable.as_mut() else {
                return Ok(());
            };
            let out = rel.on_acknack(&src, an.base_seq, an.missing());
            for seq in out.retransmit {
                if let Some(c) = rel.get(seq) {
                    net.queue(TxSource::Sample(Arc::clone(&c.outbound)), vec![src]);
                    net.counters.retransmits.fetch_add(1, Ordering::Relaxed);
                }
            }
            released.extend(out.released.into_iter().map(|(_, c)| c.sample));
        }
        if !released.is_empty() {
            for s in released {
                self.drop_hold(ctx, s)?;
            }
            crate::wait::notify_unchecked(&w.ack_word, crate::wait::NotifyCount::All);
        }
        Ok(())
    }
}
