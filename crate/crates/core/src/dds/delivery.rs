use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{
    Backing, CachedSample, Domain, Durability, Entity, History, MessageReceipt, ReaderState,
    SampleState, TakenSample, TopicState, TraceKind, WriterInner, WriterState,
};
use crate::buffers::{BlockRef, BlockStatus, Side};
use crate::error::{Error, Result};
use crate::heap::{Descriptor, EntityKind};
use crate::runtime::{DomainContext, Pid};
use crate::wait::{self, NotifyCount, WaitWord};
use crate::wire::SampleMeta;

/// Wakeups produced during one library call.
///
/// With eager notification they fire as soon as delivery starts; otherwise
/// they are held until the call has finished all of its delivery work.
#[derive(Debug)]
pub(crate) struct Notifier {
    eager: bool,
    deferred: Vec<(Arc<WaitWord>, u32, u32, u64)>,
}

impl Notifier {
    pub fn new(eager: bool) -> Self {
        Self {
            eager,
            deferred: Vec::new(),
        }
    }

    pub fn flush(&mut self, domain: &Domain) {
        let instr = &domain.inner.instr;
        for (word, reader_id, writer_id, seq) in self.deferred.drain(..) {
            wait::notify_unchecked(&word, NotifyCount::All);
            instr.notifies.fetch_add(1, Ordering::Relaxed);
            instr.record(TraceKind::Notify, reader_id, writer_id, seq);
        }
    }
}

/// Spins until `done` holds or `limit` passes. Only used where the thing
/// being waited for is another thread's in-progress library call.
fn bounded_spin(limit: Duration, mut done: impl FnMut() -> bool) -> bool {
    if done() {
        return true;
    }
    let end = Instant::now() + limit;
    while Instant::now() < end {
        std::thread::yield_now();
        if done() {
            return true;
        }
    }
    done()
}

impl Domain {
    /// Publishes the Ready block `block` of `len` bytes on `writer`.
    ///
    /// The block moves to library ownership for as long as any receiver,
    /// retained history or unacknowledged peer still needs it.
    pub fn hdds_write(
        &self,
        ctx: &DomainContext,
        writer: Descriptor,
        block: BlockRef,
        len: u64,
    ) -> Result<u64> {
        let w = self.writer_state(ctx, writer)?;
        let topic = Arc::clone(&w.topic_state);
        if len > topic.max_sample_len {
            return Err(Error::InvalidBlock("sample longer than the topic maximum"));
        }
        let arena = &self.inner.arena;
        let (region, state) = arena.lookup(ctx, block)?;
        if region.owner() != ctx.pid() {
            return Err(Error::InvalidBlock("block outside the caller's region"));
        }
        if state.owner() != Side::Application {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        if state.status() != BlockStatus::Ready || state.sample_len() != len {
            return Err(Error::InvalidBlock(
                "block is not a ready sample of that length",
            ));
        }

        let mut inner = w.inner.lock().unwrap();
        if inner.closed {
            return Err(Error::StaleDescriptor);
        }
        if topic.qos.is_reliable() {
            let window_full = inner.reliable.as_ref().is_some_and(|r| r.is_full());
            let reader_full = topic
                .readers
                .read()
                .unwrap()
                .iter()
                .any(|r| r.queue.lock().unwrap().len() >= r.capacity);
            if window_full || reader_full {
                return Err(Error::BackpressureFull);
            }
        }

        let sequence = inner.next_seq;
        let timestamp = self.inner.runtime.now_ns();
        let sample = self.inner.heap.allocate(
            ctx,
            EntityKind::Sample,
            ctx.pid(),
            Entity::Sample(SampleState {
                topic: w.topic,
                writer_id: w.writer_id,
                sequence,
                timestamp,
                len,
                backing: Backing::Block(block),
            }),
        )?;
        if let Err(e) = arena.transfer_block(ctx, block, Side::Application, Side::Library) {
            self.drop_hold(ctx, sample)?;
            return Err(e);
        }
        inner.next_seq += 1;

        let mut notifier = Notifier::new(self.inner.config.eager_notify);
        let receipt = MessageReceipt {
            topic: w.topic,
            sample,
            writer_id: w.writer_id,
            sequence,
            sample_len: len,
            timestamp,
        };
        self.deliver_local(ctx, &topic, receipt, &mut notifier)?;
        self.retain_history(ctx, &topic, &mut inner, sequence, sample)?;
        if self.inner.net.is_some() {
            self.enqueue_remote(ctx, &w, &mut inner, sequence, timestamp, sample)?;
        }
        drop(inner);
        self.pump_tx(ctx, self.inner.config.tx_budget)?;
        self.drop_hold(ctx, sample)?;
        notifier.flush(self);
        Ok(sequence)
    }

    fn retain_history(
        &self,
        ctx: &DomainContext,
        topic: &TopicState,
        inner: &mut WriterInner,
        sequence: u64,
        sample: Descriptor,
    ) -> Result<()> {
        if topic.qos.durability != Durability::TransientLocal {
            return Ok(());
        }
        self.inner.heap.hold_sample(ctx, sample)?;
        inner.history.push_back((sequence, sample));
        if let History::KeepLast(n) = topic.qos.history {
            while inner.history.len() > n as usize {
                let (_, old) = inner.history.pop_front().unwrap();
                self.drop_hold(ctx, old)?;
            }
        }
        Ok(())
    }

    fn enqueue_remote(
        &self,
        ctx: &DomainContext,
        w: &WriterState,
        inner: &mut WriterInner,
        sequence: u64,
        timestamp: u64,
        sample: Descriptor,
    ) -> Result<()> {
        let net = self.inner.net.as_ref().expect("network attached");
        if net.peers.is_empty() {
            return Ok(());
        }
        let payload = self.sample_bytes(ctx, sample)?;
        let meta = SampleMeta {
            topic_id: w.topic_state.topic_id,
            writer_id: w.writer_id,
            sequence,
            timestamp,
        };
        let outbound = net.outbound_sample(meta, payload, self.inner.config.mtu_payload);
        if let Some(rel) = inner.reliable.as_mut() {
            self.inner.heap.hold_sample(ctx, sample)?;
            let cached = CachedSample {
                sample,
                outbound: Arc::clone(&outbound),
            };
            if let Some(back) = rel.record_sent(sequence, cached) {
                self.drop_hold(ctx, back.sample)?;
            }
        }
        net.broadcast_sample(&outbound);
        Ok(())
    }

    /// Copies a sample's payload out of library storage.
    pub(crate) fn sample_bytes(
        &self,
        ctx: &DomainContext,
        sample: Descriptor,
    ) -> Result<Arc<[u8]>> {
        let s = self
            .inner
            .heap
            .resolve(ctx, sample, EntityKind::Sample, false)?;
        let Entity::Sample(st) = &*s.body else {
            return Err(Error::StaleDescriptor);
        };
        match &st.backing {
            Backing::Heap(bytes) => Ok(Arc::clone(bytes)),
            Backing::Block(b) => self
                .inner
                .arena
                .read_block(ctx, *b, 0, st.len, |s: &[u8]| Arc::from(s)),
        }
    }

    /// Drops one hold on `sample`, freeing its storage when nothing else
    /// needs it.
    pub(crate) fn drop_hold(&self, ctx: &DomainContext, sample: Descriptor) -> Result<()> {
        let r = self.inner.heap.unhold_sample(ctx, sample)?;
        if let Some(freed) = r.freed {
            self.free_backing(ctx, &freed.body)?;
        }
        Ok(())
    }

    pub(crate) fn drop_reference(&self, ctx: &DomainContext, sample: Descriptor) -> Result<()> {
        let r = self.inner.heap.release_sample(ctx, sample)?;
        if let Some(freed) = r.freed {
            self.free_backing(ctx, &freed.body)?;
        }
        Ok(())
    }

    fn free_backing(&self, ctx: &DomainContext, body: &Entity) -> Result<()> {
        if let Entity::Sample(SampleState {
            backing: Backing::Block(b),
            ..
        }) = body
        {
            self.inner.arena.free_block(ctx, *b, Side::Library)?;
            self.release_orphaned_region(ctx, b.region)?;
        }
        Ok(())
    }

    /// Hands a sample to every local reader of `topic`.
    ///
    /// Eager order: readiness cells, then wake every waitset attached to a
    /// subscribed reader, then take one reference per reader, then append
    /// the receipts. Receivers that wake before their receipt is appended
    /// spin briefly on `in_flight`, which is safe because this call cannot
    /// block.
    pub(crate) fn deliver_local(
        &self,
        ctx: &DomainContext,
        topic: &TopicState,
        receipt: MessageReceipt,
        notifier: &mut Notifier,
    ) -> Result<usize> {
        let readers: Vec<Arc<ReaderState>> = topic.readers.read().unwrap().clone();
        if readers.is_empty() {
            return Ok(0);
        }
        let instr = &self.inner.instr;
        topic.in_flight.fetch_add(1, Ordering::AcqRel);
        if notifier.eager {
            for r in &readers {
                r.readiness.announce(1);
                for word in r.waitsets.lock().unwrap().iter() {
                    wait::notify_unchecked(word, NotifyCount::All);
                    instr.notifies.fetch_add(1, Ordering::Relaxed);
                    instr.record(
                        TraceKind::Notify,
                        r.reader_id,
                        receipt.writer_id,
                        receipt.sequence,
                    );
                }
                instr.delivery_ops.fetch_add(1, Ordering::Relaxed);
            }
        }
        let result = self.append_receipts(ctx, topic, &readers, receipt);
        if !notifier.eager {
            for r in &readers {
                r.readiness.announce(1);
                for word in r.waitsets.lock().unwrap().iter() {
                    notifier.deferred.push((
                        Arc::clone(word),
                        r.reader_id,
                        receipt.writer_id,
                        receipt.sequence,
                    ));
                }
                instr.delivery_ops.fetch_add(1, Ordering::Relaxed);
            }
        }
        topic.in_flight.fetch_sub(1, Ordering::AcqRel);
        result?;
        Ok(readers.len())
    }

    fn append_receipts(
        &self,
        ctx: &DomainContext,
        topic: &TopicState,
        readers: &[Arc<ReaderState>],
        receipt: MessageReceipt,
    ) -> Result<()> {
        let instr = &self.inner.instr;
        self.inner
            .heap
            .retain_sample(ctx, receipt.sample, readers.len() as u32)?;
        let mut evicted = Vec::new();
        for r in readers {
            {
                let mut q = r.queue.lock().unwrap();
                if q.len() >= r.capacity && !topic.qos.is_reliable() {
                    if let Some(old) = q.pop_front() {
                        evicted.push(old.sample);
                    }
                }
                q.push_back(receipt);
            }
            instr.record(
                TraceKind::Append,
                r.reader_id,
                receipt.writer_id,
                receipt.sequence,
            );
            instr.delivery_ops.fetch_add(1, Ordering::Relaxed);
        }
        for s in evicted {
            self.drop_reference(ctx, s)?;
        }
        Ok(())
    }

    /// Queues a TransientLocal topic's retained history to a new reader and
    /// attaches it, with every writer held still so nothing slips between.
    pub(crate) fn attach_with_history(
        &self,
        ctx: &DomainContext,
        reader: Arc<ReaderState>,
    ) -> Result<()> {
        let topic = Arc::clone(&reader.topic_state);
        let writers: Vec<Arc<WriterState>> = topic.writers.read().unwrap().clone();
        let guards: Vec<_> = writers.iter().map(|w| w.inner.lock().unwrap()).collect();
        let mut replay = Vec::new();
        for (w, g) in writers.iter().zip(&guards) {
            for &(seq, sample) in &g.history {
                replay.push((w.writer_id, seq, sample));
            }
        }
        let skip = replay.len().saturating_sub(reader.capacity);
        let mut queued = 0u32;
        for &(writer_id, sequence, sample) in &replay[skip..] {
            let s = self
                .inner
                .heap
                .resolve(ctx, sample, EntityKind::Sample, false)?;
            let Entity::Sample(st) = &*s.body else {
                continue;
            };
            self.inner.heap.retain_sample(ctx, sample, 1)?;
            reader.queue.lock().unwrap().push_back(MessageReceipt {
                topic: reader.topic,
                sample,
                writer_id,
                sequence,
                sample_len: st.len,
                timestamp: st.timestamp,
            });
            queued += 1;
        }
        reader.readiness.announce(queued);
        topic.readers.write().unwrap().push(reader);
        drop(guards);
        Ok(())
    }

    /// Takes up to `max_samples` receipts in order, copying each payload
    /// into the next destination block (one copy per sample).
    pub fn hdds_take(
        &self,
        ctx: &DomainContext,
        reader: Descriptor,
        dest: &[BlockRef],
        max_samples: usize,
    ) -> Result<Vec<TakenSample>> {
        let r = self.reader_state(ctx, reader)?;
        let n = max_samples.min(dest.len());
        let arena = &self.inner.arena;
        for &b in &dest[..n] {
            let (region, st) = arena.lookup(ctx, b)?;
            if region.owner() != ctx.pid() {
                return Err(Error::InvalidBlock(
                    "destination outside the caller's region",
                ));
            }
            if st.owner() != Side::Application || st.status() != BlockStatus::Empty {
                return Err(Error::InvalidBlock(
                    "destination must be an empty application block",
                ));
            }
        }
        let mut taken = Vec::with_capacity(n);
        let spin = self.inner.config.take_spin_limit;
        for &d in &dest[..n] {
            let mut next = r.queue.lock().unwrap().pop_front();
            if next.is_none() && r.topic_state.delivery_in_progress() {
                bounded_spin(spin, || {
                    next = r.queue.lock().unwrap().pop_front();
                    next.is_some() || !r.topic_state.delivery_in_progress()
                });
            }
            let Some(receipt) = next else { break };
            if receipt.sample_len > arena.block_capacity(d) {
                r.queue.lock().unwrap().push_front(receipt);
                if taken.is_empty() {
                    return Err(Error::InvalidBlock("destination block too small"));
                }
                break;
            }
            self.copy_out(ctx, &receipt, d)?;
            arena.mark_ready(ctx, d, Side::Application, receipt.sample_len)?;
            self.drop_reference(ctx, receipt.sample)?;
            taken.push(TakenSample {
                block: d,
                len: receipt.sample_len,
                sequence: receipt.sequence,
                timestamp: receipt.timestamp,
                writer_id: receipt.writer_id,
            });
        }
        r.readiness.consume(taken.len() as u32);
        Ok(taken)
    }

    fn copy_out(
        &self,
        ctx: &DomainContext,
        receipt: &MessageReceipt,
        dest: BlockRef,
    ) -> Result<()> {
        let s = self
            .inner
            .heap
            .resolve(ctx, receipt.sample, EntityKind::Sample, false)?;
        let Entity::Sample(st) = &*s.body else {
            return Err(Error::StaleDescriptor);
        };
        match &st.backing {
            Backing::Block(src) => self.inner.arena.copy_block(ctx, *src, dest, st.len)?,
            Backing::Heap(bytes) => self.inner.arena.write_block(ctx, dest, 0, bytes)?,
        }
        self.inner
            .instr
            .payload_copies
            .fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Library half of a waitset wait: snapshot the word, then report the
    /// readers that already have receipts.
    pub fn waitset_poll(
        &self,
        ctx: &DomainContext,
        waitset: Descriptor,
    ) -> Result<(wait::WaitDirective, Vec<Descriptor>)> {
        let ws = self.waitset_state(ctx, waitset)?;
        let directive = wait::prepare_wait(ctx, &ws.word)?;
        let spin = self.inner.config.take_spin_limit;
        let triggered = ws
            .readers
            .iter()
            .filter(|r| !r.closed.load(Ordering::Acquire))
            .filter(|r| {
                bounded_spin(spin, || {
                    r.pending() > 0 || !r.topic_state.delivery_in_progress()
                });
                r.pending() > 0
            })
            .map(|r| r.desc)
            .collect();
        Ok((directive, triggered))
    }

    /// Blocks the calling application thread until one of the waitset's
    /// readers has a receipt, or `timeout` passes (empty list).
    pub fn waitset_wait(
        &self,
        ctx: &mut DomainContext,
        waitset: Descriptor,
        timeout: Duration,
    ) -> Result<Vec<Descriptor>> {
        ctx.require_application()?;
        let deadline = Instant::now() + timeout;
        loop {
            let (directive, triggered) = ctx.call(|c| self.waitset_poll(c, waitset))?;
            if !triggered.is_empty() {
                return Ok(triggered);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            wait::wait_outside(ctx, directive, deadline - now)?;
        }
    }

    /// Application-side check of a reader's advisory readiness cell. Never
    /// crosses into the library.
    pub fn take_fast_path(
        &self,
        ctx: &DomainContext,
        readiness: &super::ReadinessCell,
    ) -> Result<bool> {
        ctx.require_application()?;
        Ok(readiness.pending() > 0)
    }

    /// Snapshot of a writer's ack word, for waiting out a full window.
    pub fn prepare_write_wait(
        &self,
        ctx: &DomainContext,
        writer: Descriptor,
    ) -> Result<wait::WaitDirective> {
        let w = self.writer_state(ctx, writer)?;
        wait::prepare_wait(ctx, &w.ack_word)
    }

    /// Delivers a network-sourced sample to local readers.
    pub(crate) fn deliver_remote(
        &self,
        ctx: &DomainContext,
        topic_desc: Descriptor,
        topic: &TopicState,
        meta: SampleMeta,
        payload: Arc<[u8]>,
        notifier: &mut Notifier,
    ) -> Result<()> {
        let SampleMeta {
            writer_id,
            sequence,
            timestamp,
            ..
        } = meta;
        if topic.reader_count() == 0 {
            return Ok(());
        }
        if topic.qos.is_reliable()
            && topic
                .readers
                .read()
                .unwrap()
                .iter()
                .any(|r| r.queue.lock().unwrap().len() >= r.capacity)
        {
            return Err(Error::BackpressureFull);
        }
        let len = payload.len() as u64;
        let sample = self.inner.heap.allocate(
            ctx,
            EntityKind::Sample,
            Pid::SYSTEM,
            Entity::Sample(SampleState {
                topic: topic_desc,
                writer_id,
                sequence,
                timestamp,
                len,
                backing: Backing::Heap(payload),
            }),
        )?;
        let receipt = MessageReceipt {
            topic: topic_desc,
            sample,
            writer_id,
            sequence,
            sample_len: len,
            timestamp,
        };
        let delivered = self.deliver_local(ctx, topic, receipt, notifier);
        self.drop_hold(ctx, sample)?;
        delivered.map(|_| ())
    }
}
