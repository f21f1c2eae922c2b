//! Entity teardown and reclamation of dead processes' resources.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::{Domain, Entity};
use crate::buffers::{RegionId, Side};
use crate::error::{Error, Result};
use crate::heap::{Descriptor, EntityKind};
use crate::runtime::{DomainContext, Pid};
use crate::wait::{self, NotifyCount};

/// Teardown order: dependents before what they depend on.
const RECLAIM_ORDER: [EntityKind; 5] = [
    EntityKind::Waitset,
    EntityKind::Reader,
    EntityKind::Writer,
    EntityKind::Topic,
    EntityKind::Participant,
];

impl Domain {
    pub(crate) fn destroy(&self, ctx: &DomainContext, desc: Descriptor) -> Result<()> {
        self.destroy_entity(ctx, desc, false)
    }

    fn destroy_entity(&self, ctx: &DomainContext, desc: Descriptor, forced: bool) -> Result<()> {
        let heap = &self.inner.heap;
        let entry = heap.resolve(ctx, desc, desc.kind, false)?;
        match &*entry.body {
            Entity::Participant => {
                heap.free(ctx, desc)?;
            }
            Entity::Topic(t) => {
                if !forced && (t.reader_count() > 0 || t.writer_count() > 0) {
                    return Err(Error::InvalidStateTransition(
                        "topic still has readers or writers",
                    ));
                }
                heap.free(ctx, desc)?;
                let mut reg = self.inner.topics.write().unwrap();
                if reg.by_name.get(&t.name) == Some(&desc) {
                    reg.by_name.remove(&t.name);
                }
                if reg.by_id.get(&t.topic_id).is_some_and(|(d, _)| *d == desc) {
                    reg.by_id.remove(&t.topic_id);
                }
            }
            Entity::Waitset(ws) => {
                heap.free(ctx, desc)?;
                for r in &ws.readers {
                    r.waitsets
                        .lock()
                        .unwrap()
                        .retain(|w| !Arc::ptr_eq(w, &ws.word));
                }
            }
            Entity::Reader(r) => {
                heap.free(ctx, desc)?;
                r.closed.store(true, Ordering::Release);
                r.topic_state
                    .readers
                    .write()
                    .unwrap()
                    .retain(|x| !Arc::ptr_eq(x, r));
                let drained: Vec<_> = r.queue.lock().unwrap().drain(..).collect();
                for receipt in drained {
                    self.drop_reference(ctx, receipt.sample)?;
                }
                for w in r.waitsets.lock().unwrap().drain(..) {
                    wait::notify_unchecked(&w, NotifyCount::All);
                }
            }
            Entity::Writer(w) => {
                heap.free(ctx, desc)?;
                w.topic_state
                    .writers
                    .write()
                    .unwrap()
                    .retain(|x| !Arc::ptr_eq(x, w));
                self.inner.writers.write().unwrap().remove(&w.writer_id);
                let held: Vec<Descriptor> = {
                    let mut inner = w.inner.lock().unwrap();
                    inner.closed = true;
                    inner.next_heartbeat = None;
                    let mut held: Vec<_> = inner.history.drain(..).map(|(_, s)| s).collect();
                    if let Some(rel) = inner.reliable.as_mut() {
                        held.extend(rel.drain().into_iter().map(|(_, c)| c.sample));
                    }
                    held
                };
                for s in held {
                    self.drop_hold(ctx, s)?;
                }
                wait::notify_unchecked(&w.ack_word, NotifyCount::All);
            }
            Entity::Sample(_) => {
                return Err(Error::InvalidStateTransition(
                    "samples are freed by dropping their references",
                ))
            }
        }
        Ok(())
    }

    /// Frees everything a dead process left behind: its entities (samples
    /// still referenced by live readers survive until released) and its
    /// permanent regions. Returns the number of entities freed; a live pid
    /// or a second call yields 0.
    pub fn reclaim_process_resources(&self, ctx: &DomainContext, pid: Pid) -> Result<usize> {
        ctx.require_library()?;
        if pid == Pid::SYSTEM || self.inner.runtime.is_alive(pid) {
            return Ok(0);
        }
        let mut owned = self.inner.heap.owned_by(pid);
        owned.retain(|d| d.kind != EntityKind::Sample);
        owned.sort_by_key(|d| RECLAIM_ORDER.iter().position(|k| *k == d.kind));
        let mut freed = 0;
        for desc in owned {
            match self.destroy_entity(ctx, desc, true) {
                Ok(()) => freed += 1,
                Err(Error::StaleDescriptor) => {}
                Err(e) => return Err(e),
            }
        }
        self.release_regions(ctx, pid)?;
        Ok(freed)
    }

    /// Drops a dead process's application blocks and unmaps its regions.
    /// Regions still holding library-owned samples are retried later.
    fn release_regions(&self, ctx: &DomainContext, pid: Pid) -> Result<()> {
        let arena = &self.inner.arena;
        let mut pending = false;
        for region in arena.regions_of(pid) {
            if ctx.is_trusted() {
                for (block, side) in arena.blocks_in(ctx, region.id())? {
                    if side == Side::Application {
                        arena.free_block(ctx, block, Side::Application)?;
                    }
                }
            }
            match arena.unmap_region(ctx, region.id()) {
                Ok(()) => {}
                Err(Error::BlocksInUse) => pending = true,
                Err(e) => return Err(e),
            }
        }
        let mut deferred = self.inner.deferred_regions.lock().unwrap();
        deferred.retain(|p| *p != pid);
        if pending {
            deferred.push(pid);
        }
        Ok(())
    }

    /// Called when a library-owned block is freed: if its region belongs to
    /// a dead process, try to finish unmapping it.
    pub(crate) fn release_orphaned_region(&self, ctx: &DomainContext, id: RegionId) -> Result<()> {
        let Some(region) = self.inner.arena.region(id) else {
            return Ok(());
        };
        if self.inner.runtime.is_alive(region.owner()) {
            return Ok(());
        }
        match self.inner.arena.unmap_region(ctx, id) {
            Ok(()) => {
                let owner = region.owner();
                if self.inner.arena.regions_of(owner).is_empty() {
                    self.inner
                        .deferred_regions
                        .lock()
                        .unwrap()
                        .retain(|p| *p != owner);
                }
                Ok(())
            }
            Err(Error::BlocksInUse) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Reclaims every process whose termination is queued, then retries
    /// regions left over from earlier rounds. Returns entities freed.
    pub fn reclaim_dead(&self, ctx: &DomainContext) -> Result<usize> {
        ctx.require_library()?;
        let mut freed = 0;
        for pid in self.inner.runtime.take_terminations() {
            freed += self.reclaim_process_resources(ctx, pid)?;
        }
        let retry: Vec<Pid> = self.inner.deferred_regions.lock().unwrap().clone();
        for pid in retry {
            self.release_regions(ctx, pid)?;
        }
        Ok(freed)
    }

    /// Dead processes whose regions could not be unmapped yet.
    pub fn deferred_reclaims(&self) -> usize {
        self.inner.deferred_regions.lock().unwrap().len()
    }
}
