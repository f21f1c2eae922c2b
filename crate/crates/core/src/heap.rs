//! The protected heap.
//!
//! Entities live in fixed-capacity, per-kind slot tables and are named by
//! generation-checked [`Descriptor`]s. A descriptor resolves only while its
//! slot still holds the generation it was issued with, so a freed and reused
//! slot can never be reached through an old descriptor.
//!
//! Samples carry two counters: `refcount` (outstanding message receipts,
//! driven by [`SharedHeap::retain_sample`] / [`SharedHeap::release_sample`])
//! and `holds` (everything else that keeps the payload alive: the writer's
//! in-progress call, retained history, unacknowledged network peers). A
//! sample is freed when both reach zero.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::runtime::{DomainContext, Pid, Runtime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityKind {
    Participant,
    Topic,
    Writer,
    Reader,
    Waitset,
    Sample,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Participant,
        EntityKind::Topic,
        EntityKind::Writer,
        EntityKind::Reader,
        EntityKind::Waitset,
        EntityKind::Sample,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub kind: EntityKind,
    pub index: u32,
    pub generation: u32,
}

/// Snapshot of a slot's authoritative metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityHeader {
    pub owner: Pid,
    pub kind: EntityKind,
    pub generation: u32,
    pub refcount: u32,
    pub holds: u32,
}

#[derive(Debug)]
pub struct EntityRef<E> {
    pub desc: Descriptor,
    pub owner: Pid,
    pub body: Arc<E>,
}

impl<E> Clone for EntityRef<E> {
    fn clone(&self) -> Self {
        Self {
            desc: self.desc,
            owner: self.owner,
            body: Arc::clone(&self.body),
        }
    }
}

/// Outcome of dropping a reference or hold on a sample.
#[derive(Debug)]
pub struct Released<E> {
    pub remaining: u32,
    /// Present when this call freed the sample.
    pub freed: Option<EntityRef<E>>,
}

#[derive(Debug)]
struct Entry<E> {
    owner: Pid,
    body: Arc<E>,
    refcount: u32,
    holds: u32,
}

#[derive(Debug)]
struct Slot<E> {
    generation: u32,
    entry: Option<Entry<E>>,
}

#[derive(Debug)]
struct SlotTable<E> {
    slots: Vec<Slot<E>>,
    free: Vec<u32>,
    live: usize,
}

impl<E> SlotTable<E> {
    fn new() -> Self {
        Self {
            slots: Vec::new(),
            free: Vec::new(),
            live: 0,
        }
    }

    fn entry(&self, desc: Descriptor) -> Result<&Entry<E>> {
        self.slots
            .get(desc.index as usize)
            .filter(|s| s.generation == desc.generation)
            .and_then(|s| s.entry.as_ref())
            .ok_or(Error::StaleDescriptor)
    }

    fn entry_mut(&mut self, desc: Descriptor) -> Result<&mut Entry<E>> {
        self.slots
            .get_mut(desc.index as usize)
            .filter(|s| s.generation == desc.generation)
            .and_then(|s| s.entry.as_mut())
            .ok_or(Error::StaleDescriptor)
    }

    fn take(&mut self, desc: Descriptor) -> Option<Entry<E>> {
        let slot = self.slots.get_mut(desc.index as usize)?;
        if slot.generation != desc.generation {
            return None;
        }
        let entry = slot.entry.take()?;
        self.free.push(desc.index);
        self.live -= 1;
        Some(entry)
    }
}

pub struct SharedHeap<E> {
    runtime: Runtime,
    capacity: usize,
    tables: [Mutex<SlotTable<E>>; 6],
    retains: AtomicU64,
    releases: AtomicU64,
}

impl<E> std::fmt::Debug for SharedHeap<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedHeap")
            .field("capacity", &self.capacity)
            .finish_non_exhaustive()
    }
}

impl<E> SharedHeap<E> {
    pub fn new(runtime: Runtime, slots_per_kind: usize) -> Self {
        Self {
            runtime,
            capacity: slots_per_kind,
            tables: std::array::from_fn(|_| Mutex::new(SlotTable::new())),
            retains: AtomicU64::new(0),
            releases: AtomicU64::new(0),
        }
    }

    pub fn capacity_per_kind(&self) -> usize {
        self.capacity
    }

    fn table(&self, kind: EntityKind) -> MutexGuard<'_, SlotTable<E>> {
        self.tables[kind.index()].lock().unwrap()
    }

    fn check(&self, ctx: &DomainContext) -> Result<()> {
        ctx.require_library()?;
        ctx.require_runtime(&self.runtime)
    }

    /// Allocates a slot for `body`. Never waits for space.
    ///
    /// Samples start with one hold, owned by the caller, which must be
    /// dropped with [`SharedHeap::unhold_sample`] once the creating call is
    /// done with it.
    pub fn allocate(
        &self,
        ctx: &DomainContext,
        kind: EntityKind,
        owner: Pid,
        body: E,
    ) -> Result<Descriptor> {
        self.allocate_with(ctx, kind, owner, |_| body)
    }

    /// Like [`SharedHeap::allocate`], building the body from its own descriptor.
    pub fn allocate_with(
        &self,
        ctx: &DomainContext,
        kind: EntityKind,
        owner: Pid,
        body: impl FnOnce(Descriptor) -> E,
    ) -> Result<Descriptor> {
        self.check(ctx)?;
        if !self.runtime.is_alive(owner) {
            return Err(Error::UnknownPid(owner));
        }
        let mut t = self.table(kind);
        let index = match t.free.pop() {
            Some(i) => i,
            None if t.slots.len() < self.capacity => {
                t.slots.push(Slot {
                    generation: 0,
                    entry: None,
                });
                (t.slots.len() - 1) as u32
            }
            None => return Err(Error::HeapExhausted(kind)),
        };
        let slot = &mut t.slots[index as usize];
        slot.generation = slot.generation.wrapping_add(1);
        let desc = Descriptor {
            kind,
            index,
            generation: slot.generation,
        };
        slot.entry = Some(Entry {
            owner,
            body: Arc::new(body(desc)),
            refcount: 0,
            holds: u32::from(kind == EntityKind::Sample),
        });
        t.live += 1;
        Ok(desc)
    }

    /// Resolves `desc` to its entity.
    ///
    /// With `ownership_required`, the entity must be owned by the caller and
    /// the owner must be alive. The trusted daemon context passes ownership
    /// checks on behalf of any live owner.
    pub fn resolve(
        &self,
        ctx: &DomainContext,
        desc: Descriptor,
        expected: EntityKind,
        ownership_required: bool,
    ) -> Result<EntityRef<E>> {
        self.check(ctx)?;
        if desc.kind != expected {
            return Err(Error::KindMismatch {
                expected,
                found: desc.kind,
            });
        }
        let t = self.table(expected);
        let e = t.entry(desc)?;
        if ownership_required {
            let caller = ctx.pid();
            let owner_ok = e.owner == caller || ctx.is_trusted();
            if !owner_ok || !self.runtime.is_alive(e.owner) {
                return Err(Error::OwnershipViolation { caller });
            }
        }
        Ok(EntityRef {
            desc,
            owner: e.owner,
            body: Arc::clone(&e.body),
        })
    }

    pub fn header(&self, desc: Descriptor) -> Option<EntityHeader> {
        let t = self.table(desc.kind);
        t.entry(desc).ok().map(|e| EntityHeader {
            owner: e.owner,
            kind: desc.kind,
            generation: desc.generation,
            refcount: e.refcount,
            holds: e.holds,
        })
    }

    /// Frees a non-sample entity.
    pub fn free(&self, ctx: &DomainContext, desc: Descriptor) -> Result<EntityRef<E>> {
        self.check(ctx)?;
        if desc.kind == EntityKind::Sample {
            return Err(Error::InvalidStateTransition(
                "samples are freed by dropping their references",
            ));
        }
        let mut t = self.table(desc.kind);
        let e = t.take(desc).ok_or(Error::StaleDescriptor)?;
        Ok(EntityRef {
            desc,
            owner: e.owner,
            body: e.body,
        })
    }

    fn sample_desc(desc: Descriptor) -> Result<()> {
        if desc.kind != EntityKind::Sample {
            return Err(Error::KindMismatch {
                expected: EntityKind::Sample,
                found: desc.kind,
            });
        }
        Ok(())
    }

    pub fn retain_sample(&self, ctx: &DomainContext, desc: Descriptor, n: u32) -> Result<u32> {
        self.check(ctx)?;
        Self::sample_desc(desc)?;
        let mut t = self.table(EntityKind::Sample);
        let e = t.entry_mut(desc)?;
        e.refcount = e.refcount.checked_add(n).ok_or(Error::UnderflowViolation)?;
        let now = e.refcount;
        self.retains.fetch_add(u64::from(n), Ordering::Relaxed);
        Ok(now)
    }

    pub fn release_sample(&self, ctx: &DomainContext, desc: Descriptor) -> Result<Released<E>> {
        self.check(ctx)?;
        Self::sample_desc(desc)?;
        let mut t = self.table(EntityKind::Sample);
        let e = t.entry_mut(desc)?;
        if e.refcount == 0 {
            return Err(Error::UnderflowViolation);
        }
        e.refcount -= 1;
        self.releases.fetch_add(1, Ordering::Relaxed);
        Ok(Self::maybe_free(&mut t, desc))
    }

    pub fn hold_sample(&self, ctx: &DomainContext, desc: Descriptor) -> Result<()> {
        self.check(ctx)?;
        Self::sample_desc(desc)?;
        let mut t = self.table(EntityKind::Sample);
        let e = t.entry_mut(desc)?;
        e.holds += 1;
        Ok(())
    }

    pub fn unhold_sample(&self, ctx: &DomainContext, desc: Descriptor) -> Result<Released<E>> {
        self.check(ctx)?;
        Self::sample_desc(desc)?;
        let mut t = self.table(EntityKind::Sample);
        let e = t.entry_mut(desc)?;
        if e.holds == 0 {
            return Err(Error::UnderflowViolation);
        }
        e.holds -= 1;
        Ok(Self::maybe_free(&mut t, desc))
    }

    fn maybe_free(t: &mut SlotTable<E>, desc: Descriptor) -> Released<E> {
        let (remaining, idle) = match t.entry(desc) {
            Ok(e) => (e.refcount, e.refcount == 0 && e.holds == 0),
            Err(_) => (0, false),
        };
        let freed = if idle {
            t.take(desc).map(|e| EntityRef {
                desc,
                owner: e.owner,
                body: e.body,
            })
        } else {
            None
        };
        Released { remaining, freed }
    }

    /// Descriptors of every live entity owned by `pid`.
    pub fn owned_by(&self, pid: Pid) -> Vec<Descriptor> {
        let mut out = Vec::new();
        for kind in EntityKind::ALL {
            let t = self.table(kind);
            for (i, s) in t.slots.iter().enumerate() {
                if let Some(e) = &s.entry {
                    if e.owner == pid {
                        out.push(Descriptor {
                            kind,
                            index: i as u32,
                            generation: s.generation,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn live(&self, kind: EntityKind) -> usize {
        self.table(kind).live
    }

    /// Sum of refcounts over all live samples.
    pub fn live_refcount(&self) -> u64 {
        let t = self.table(EntityKind::Sample);
        t.slots
            .iter()
            .filter_map(|s| s.entry.as_ref())
            .map(|e| u64::from(e.refcount))
            .sum()
    }

    /// Lifetime totals of retained and released sample references.
    pub fn reference_totals(&self) -> (u64, u64) {
        (
            self.retains.load(Ordering::Relaxed),
            self.releases.load(Ordering::Relaxed),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::TimeBoundPolicy;

    fn setup(slots: usize) -> (Runtime, SharedHeap<u32>, DomainContext, Pid) {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let pid = rt.register_process().pid;
        let heap = SharedHeap::new(rt.clone(), slots);
        let mut ctx = rt.context(pid).unwrap();
        let _ = ctx.enter_library().unwrap();
        (rt, heap, ctx, pid)
    }

    #[test]
    fn allocate_and_resolve_owner() {
        let (_rt, heap, ctx, pid) = setup(8);
        let d = heap.allocate(&ctx, EntityKind::Topic, pid, 7).unwrap();
        let r = heap.resolve(&ctx, d, EntityKind::Topic, true).unwrap();
        assert_eq!(r.owner, pid);
        assert_eq!(*r.body, 7);
    }

    #[test]
    fn tiny_heap_exhausts_immediately() {
        let (_rt, heap, ctx, pid) = setup(4);
        for i in 0..4 {
            heap.allocate(&ctx, EntityKind::Topic, pid, i).unwrap();
        }
        let start = std::time::Instant::now();
        let r = heap.allocate(&ctx, EntityKind::Topic, pid, 5);
        assert!(matches!(r, Err(Error::HeapExhausted(EntityKind::Topic))));
        assert!(start.elapsed() < std::time::Duration::from_millis(1));
        // Other kinds have their own tables.
        heap.allocate(&ctx, EntityKind::Reader, pid, 0).unwrap();
    }

    #[test]
    fn reused_slot_makes_old_descriptor_stale() {
        let (_rt, heap, ctx, pid) = setup(4);
        let old = heap.allocate(&ctx, EntityKind::Writer, pid, 1).unwrap();
        heap.free(&ctx, old).unwrap();
        let new = heap.allocate(&ctx, EntityKind::Writer, pid, 2).unwrap();
        assert_eq!(old.index, new.index);
        assert_ne!(old.generation, new.generation);
        assert!(matches!(
            heap.resolve(&ctx, old, EntityKind::Writer, false),
            Err(Error::StaleDescriptor)
        ));
        assert_eq!(
            *heap
                .resolve(&ctx, new, EntityKind::Writer, false)
                .unwrap()
                .body,
            2
        );
    }

    #[test]
    fn foreign_owner_is_rejected() {
        let (rt, heap, ctx3, pid3) = setup(4);
        let d = heap.allocate(&ctx3, EntityKind::Writer, pid3, 0).unwrap();
        let pid4 = rt.register_process().pid;
        let mut ctx4 = rt.context(pid4).unwrap();
        let r = ctx4.call(|c| heap.resolve(c, d, EntityKind::Writer, true));
        assert!(matches!(r, Err(Error::OwnershipViolation { .. })));
        // Without the ownership requirement any process may reach it.
        ctx4.call(|c| heap.resolve(c, d, EntityKind::Writer, false))
            .unwrap();
    }

    #[test]
    fn kind_mismatch_and_dead_owner() {
        let (rt, heap, ctx, pid) = setup(4);
        let d = heap.allocate(&ctx, EntityKind::Reader, pid, 0).unwrap();
        assert!(matches!(
            heap.resolve(&ctx, d, EntityKind::Writer, false),
            Err(Error::KindMismatch { .. })
        ));
        rt.deregister_process(pid).unwrap();
        assert!(matches!(
            heap.resolve(&ctx, d, EntityKind::Reader, true),
            Err(Error::OwnershipViolation { .. })
        ));
    }

    #[test]
    fn application_mode_is_rejected() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let pid = rt.register_process().pid;
        let heap: SharedHeap<u32> = SharedHeap::new(rt.clone(), 4);
        let ctx = rt.context(pid).unwrap();
        assert!(matches!(
            heap.allocate(&ctx, EntityKind::Topic, pid, 0),
            Err(Error::ContextViolation(_))
        ));
    }

    #[test]
    fn sample_refcounting_frees_at_zero() {
        let (_rt, heap, ctx, pid) = setup(4);
        let s = heap.allocate(&ctx, EntityKind::Sample, pid, 0).unwrap();
        assert_eq!(heap.retain_sample(&ctx, s, 3).unwrap(), 3);
        // Creation hold keeps it alive while references come and go.
        heap.unhold_sample(&ctx, s).unwrap();
        assert_eq!(heap.release_sample(&ctx, s).unwrap().remaining, 2);
        assert_eq!(heap.release_sample(&ctx, s).unwrap().remaining, 1);
        let last = heap.release_sample(&ctx, s).unwrap();
        assert_eq!(last.remaining, 0);
        assert!(last.freed.is_some());
        assert!(matches!(
            heap.release_sample(&ctx, s),
            Err(Error::StaleDescriptor)
        ));
    }

    #[test]
    fn release_below_zero_underflows() {
        let (_rt, heap, ctx, pid) = setup(4);
        let s = heap.allocate(&ctx, EntityKind::Sample, pid, 0).unwrap();
        assert!(matches!(
            heap.release_sample(&ctx, s),
            Err(Error::UnderflowViolation)
        ));
    }

    #[test]
    fn hold_defers_free_past_last_release() {
        let (_rt, heap, ctx, pid) = setup(4);
        let s = heap.allocate(&ctx, EntityKind::Sample, pid, 0).unwrap();
        heap.retain_sample(&ctx, s, 3).unwrap();
        // Creation hold stands in for an unacknowledged remote peer.
        for _ in 0..3 {
            assert!(heap.release_sample(&ctx, s).unwrap().freed.is_none());
        }
        assert_eq!(heap.header(s).unwrap().refcount, 0);
        assert!(heap.unhold_sample(&ctx, s).unwrap().freed.is_some());
    }

    #[test]
    fn owned_by_scans_every_kind() {
        let (rt, heap, ctx, pid) = setup(8);
        let other = rt.register_process().pid;
        heap.allocate(&ctx, EntityKind::Participant, pid, 0)
            .unwrap();
        heap.allocate(&ctx, EntityKind::Topic, pid, 0).unwrap();
        heap.allocate(&ctx, EntityKind::Topic, other, 0).unwrap();
        heap.allocate(&ctx, EntityKind::Writer, pid, 0).unwrap();
        assert_eq!(heap.owned_by(pid).len(), 3);
        assert_eq!(heap.owned_by(other).len(), 1);
    }
}
