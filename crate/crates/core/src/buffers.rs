//! Permanently mapped transfer regions.
//!
//! Each process gets regions that both it and the library can read and
//! write, but that only library-mode code can unmap or re-protect. Regions
//! are carved into granule-aligned blocks by a first-fit allocator whose
//! authoritative state (bitmap plus [`BlockState`] per block) lives in the
//! protected heap. A second, advisory copy of each block header is mirrored
//! into memory the application can see and scribble on; the library writes
//! it but never reads it back.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use memmap2::MmapMut;

use crate::error::{Error, Result};
use crate::runtime::{DomainContext, Mode, Pid, Runtime};

pub const MIB: u64 = 1 << 20;

/// Bytes of advisory metadata mirrored per granule.
pub const ADVISORY_ENTRY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionConfig {
    pub region_size: u64,
    pub region_limit: u64,
    pub granule_size: u64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            region_size: 16 * MIB,
            region_limit: 64 * MIB,
            granule_size: 4096,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.granule_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "granule size {} is not a power of two",
                self.granule_size
            )));
        }
        if self.region_size == 0 || !self.region_size.is_multiple_of(self.granule_size) {
            return Err(Error::InvalidConfig(format!(
                "region size {} must be a non-zero multiple of the granule size",
                self.region_size
            )));
        }
        Ok(())
    }
}

/// True iff `[offset, offset + len)` lies inside `[0, size)`.
///
/// Two comparisons, and neither can overflow.
#[inline]
pub fn validate_offset(size: u64, offset: u64, len: u64) -> bool {
    len <= size && offset <= size - len
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u32);

/// Which side of the trampoline currently owns a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Side {
    Application = 0,
    Library = 1,
}

impl Side {
    fn from_u8(v: u8) -> Self {
        if v == 1 {
            Side::Library
        } else {
            Side::Application
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BlockStatus {
    Empty = 0,
    Writing = 1,
    Ready = 2,
}

impl BlockStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => BlockStatus::Writing,
            2 => BlockStatus::Ready,
            _ => BlockStatus::Empty,
        }
    }
}

/// Handle to an allocated block, as passed across the trampoline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockRef {
    pub region: RegionId,
    pub offset: u64,
    pub granules: u32,
    pub generation: u32,
}

/// Snapshot of a block's authoritative header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub offset: u64,
    pub granules: u32,
    pub owner: Side,
    pub status: BlockStatus,
    pub sample_len: u64,
    pub watermark: u64,
}

/// Authoritative per-block state kept in the protected heap.
///
/// Status and watermark are atomics so that a receiver may observe the fill
/// level while a producer is still writing.
#[derive(Debug)]
pub struct BlockState {
    offset: u64,
    granules: u32,
    generation: u32,
    owner: AtomicU8,
    status: AtomicU8,
    sample_len: AtomicU64,
    watermark: AtomicU64,
}

impl BlockState {
    pub fn status(&self) -> BlockStatus {
        BlockStatus::from_u8(self.status.load(Ordering::Acquire))
    }

    pub fn owner(&self) -> Side {
        Side::from_u8(self.owner.load(Ordering::Acquire))
    }

    pub fn watermark(&self) -> u64 {
        self.watermark.load(Ordering::Acquire)
    }

    pub fn sample_len(&self) -> u64 {
        self.sample_len.load(Ordering::Acquire)
    }

    pub fn header(&self) -> BlockHeader {
        BlockHeader {
            offset: self.offset,
            granules: self.granules,
            owner: self.owner(),
            status: self.status(),
            sample_len: self.sample_len(),
            watermark: self.watermark(),
        }
    }
}

#[derive(Debug)]
struct GranuleTable {
    bitmap: Vec<u64>,
    total: u64,
    free: u64,
    blocks: BTreeMap<u64, Arc<BlockState>>,
    next_generation: u32,
}

impl GranuleTable {
    fn new(total: u64) -> Self {
        Self {
            bitmap: vec![0; total.div_ceil(64) as usize],
            total,
            free: total,
            blocks: BTreeMap::new(),
            next_generation: 1,
        }
    }

    fn is_set(&self, g: u64) -> bool {
        self.bitmap[(g / 64) as usize] & (1 << (g % 64)) != 0
    }

    fn set_range(&mut self, start: u64, n: u64, on: bool) {
        for g in start..start + n {
            let word = &mut self.bitmap[(g / 64) as usize];
            if on {
                *word |= 1 << (g % 64);
            } else {
                *word &= !(1 << (g % 64));
            }
        }
    }

    /// First run of `n` clear granules. One pass over the bitmap.
    fn first_fit(&self, n: u64) -> Option<u64> {
        if n == 0 || n > self.free {
            return None;
        }
        let mut run_start = 0;
        let mut run = 0;
        let mut g = 0;
        while g < self.total {
            let word = self.bitmap[(g / 64) as usize];
            if g % 64 == 0 && word == u64::MAX {
                run = 0;
                g += 64;
                run_start = g;
                continue;
            }
            if self.is_set(g) {
                run = 0;
                run_start = g + 1;
            } else {
                run += 1;
                if run == n {
                    return Some(run_start);
                }
            }
            g += 1;
        }
        None
    }
}

/// A per-process transfer region.
#[derive(Debug)]
pub struct PermanentRegion {
    id: RegionId,
    owner: Pid,
    size: u64,
    granule: u64,
    arena_base: u64,
    mapped: AtomicBool,
    writable: AtomicBool,
    data: RwLock<MmapMut>,
    table: Mutex<GranuleTable>,
    advisory: Mutex<Box<[u8]>>,
    library_accesses: AtomicU64,
}

impl PermanentRegion {
    pub fn id(&self) -> RegionId {
        self.id
    }

    pub fn owner(&self) -> Pid {
        self.owner
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn granule_size(&self) -> u64 {
        self.granule
    }

    /// Start of this region in the shared arena namespace.
    pub fn arena_base(&self) -> u64 {
        self.arena_base
    }

    pub fn is_mapped(&self) -> bool {
        self.mapped.load(Ordering::Acquire)
    }

    pub fn is_writable(&self) -> bool {
        self.writable.load(Ordering::Acquire)
    }

    pub fn total_granules(&self) -> u64 {
        self.size / self.granule
    }

    pub fn free_granules(&self) -> u64 {
        self.table.lock().unwrap().free
    }

    pub fn allocated_granules(&self) -> u64 {
        self.table
            .lock()
            .unwrap()
            .blocks
            .values()
            .map(|b| u64::from(b.granules))
            .sum()
    }

    pub fn block_count(&self) -> usize {
        self.table.lock().unwrap().blocks.len()
    }

    /// Number of library-mode data accesses made to this region.
    pub fn library_accesses(&self) -> u64 {
        self.library_accesses.load(Ordering::Relaxed)
    }

    /// Full scan of the allocator state.
    ///
    /// Checks that blocks are pairwise disjoint and in bounds, that the
    /// bitmap agrees with the block table, and that free plus allocated
    /// granules account for the whole region.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let t = self.table.lock().unwrap();
        let mut expected = vec![false; t.total as usize];
        let mut allocated = 0u64;
        for (&start_g, b) in &t.blocks {
            if b.offset != start_g * self.granule {
                return Err(format!(
                    "block key {start_g} disagrees with offset {}",
                    b.offset
                ));
            }
            let end = start_g + u64::from(b.granules);
            if b.granules == 0 || end > t.total {
                return Err(format!("block at granule {start_g} out of bounds"));
            }
            for slot in &mut expected[start_g as usize..end as usize] {
                if *slot {
                    return Err(format!("block at granule {start_g} overlaps another"));
                }
                *slot = true;
            }
            allocated += u64::from(b.granules);
            let wm = b.watermark();
            let len = b.sample_len();
            if wm > len || len > u64::from(b.granules) * self.granule {
                return Err(format!(
                    "block at granule {start_g}: watermark {wm} len {len}"
                ));
            }
        }
        for (g, &want) in expected.iter().enumerate() {
            if t.is_set(g as u64) != want {
                return Err(format!("bitmap disagrees at granule {g}"));
            }
        }
        if t.free + allocated != t.total {
            return Err(format!(
                "conservation: free {} + allocated {allocated} != {}",
                t.free, t.total
            ));
        }
        Ok(())
    }

    fn write_advisory(&self, b: &BlockState) {
        let idx = (b.offset / self.granule) as usize * ADVISORY_ENTRY;
        let mut entry = [0u8; ADVISORY_ENTRY];
        entry[0] = b.status.load(Ordering::Relaxed);
        entry[1] = b.owner.load(Ordering::Relaxed);
        entry[4..8].copy_from_slice(&(b.sample_len() as u32).to_le_bytes());
        entry[8..12].copy_from_slice(&(b.watermark() as u32).to_le_bytes());
        entry[12..16].copy_from_slice(&b.generation.to_le_bytes());
        let mut adv = self.advisory.lock().unwrap();
        adv[idx..idx + ADVISORY_ENTRY].copy_from_slice(&entry);
    }

    fn clear_advisory(&self, offset: u64) {
        let idx = (offset / self.granule) as usize * ADVISORY_ENTRY;
        let mut adv = self.advisory.lock().unwrap();
        adv[idx..idx + ADVISORY_ENTRY].fill(0);
    }

    fn note_library_access(&self, offset: u64, len: u64) {
        debug_assert!(
            validate_offset(self.size, offset, len),
            "library access outside region bounds"
        );
        self.library_accesses.fetch_add(1, Ordering::Relaxed);
    }
}

/// Advisory view of a block, as the application sees it. Not trustworthy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvisoryHeader {
    pub status: u8,
    pub owner: u8,
    pub sample_len: u32,
    pub watermark: u32,
    pub generation: u32,
}

/// The shared region namespace plus every process's regions.
#[derive(Debug)]
pub struct BufferArena {
    runtime: Runtime,
    config: RegionConfig,
    regions: RwLock<HashMap<RegionId, Arc<PermanentRegion>>>,
    reserved: Mutex<HashMap<Pid, u64>>,
    next_id: AtomicU32,
    next_base: Mutex<u64>,
}

impl BufferArena {
    pub fn new(runtime: Runtime, config: RegionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            runtime,
            config,
            regions: RwLock::new(HashMap::new()),
            reserved: Mutex::new(HashMap::new()),
            next_id: AtomicU32::new(1),
            next_base: Mutex::new(0),
        })
    }

    pub fn config(&self) -> RegionConfig {
        self.config
    }

    fn check(&self, ctx: &DomainContext) -> Result<()> {
        ctx.require_library()?;
        ctx.require_runtime(&self.runtime)
    }

    pub fn region(&self, id: RegionId) -> Option<Arc<PermanentRegion>> {
        self.regions.read().unwrap().get(&id).cloned()
    }

    pub fn regions_of(&self, pid: Pid) -> Vec<Arc<PermanentRegion>> {
        let mut v: Vec<_> = self
            .regions
            .read()
            .unwrap()
            .values()
            .filter(|r| r.owner == pid)
            .cloned()
            .collect();
        v.sort_by_key(|r| r.id);
        v
    }

    pub fn reserved_by(&self, pid: Pid) -> u64 {
        self.reserved
            .lock()
            .unwrap()
            .get(&pid)
            .copied()
            .unwrap_or(0)
    }

    /// Maps a zeroed region for `owner`. Library mode only.
    pub fn map_region(
        &self,
        ctx: &DomainContext,
        owner: Pid,
        size: u64,
    ) -> Result<Arc<PermanentRegion>> {
        self.check(ctx)?;
        if owner != ctx.pid() && !ctx.is_trusted() {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        if !self.runtime.is_alive(owner) || owner == Pid::SYSTEM {
            return Err(Error::UnknownPid(owner));
        }
        let g = self.config.granule_size;
        let size = size.max(1).div_ceil(g) * g;
        let backing = MmapMut::map_anon(size as usize)?;
        {
            let mut reserved = self.reserved.lock().unwrap();
            let cur = reserved.entry(owner).or_insert(0);
            if *cur + size > self.config.region_limit {
                return Err(Error::ReservationLimitExceeded {
                    requested: size,
                    limit: self.config.region_limit,
                });
            }
            *cur += size;
        }
        let arena_base = {
            let mut base = self.next_base.lock().unwrap();
            let b = *base;
            *base += size;
            b
        };
        let granules = size / g;
        let region = Arc::new(PermanentRegion {
            id: RegionId(self.next_id.fetch_add(1, Ordering::Relaxed)),
            owner,
            size,
            granule: g,
            arena_base,
            mapped: AtomicBool::new(true),
            writable: AtomicBool::new(true),
            data: RwLock::new(backing),
            table: Mutex::new(GranuleTable::new(granules)),
            advisory: Mutex::new(vec![0u8; granules as usize * ADVISORY_ENTRY].into_boxed_slice()),
            library_accesses: AtomicU64::new(0),
        });
        self.regions
            .write()
            .unwrap()
            .insert(region.id, Arc::clone(&region));
        Ok(region)
    }

    /// Unmaps a region. Succeeds only from library mode; an application-mode
    /// attempt leaves the region fully usable.
    pub fn unmap_region(&self, ctx: &DomainContext, id: RegionId) -> Result<()> {
        if ctx.mode() != Mode::Library {
            return Err(Error::PermissionDenied);
        }
        self.check(ctx)?;
        let region = self
            .region(id)
            .ok_or(Error::InvalidBlock("unknown region"))?;
        {
            let t = region.table.lock().unwrap();
            let busy = t
                .blocks
                .values()
                .any(|b| b.status() == BlockStatus::Writing || b.owner() == Side::Library);
            if busy {
                return Err(Error::BlocksInUse);
            }
            region.mapped.store(false, Ordering::Release);
        }
        self.regions.write().unwrap().remove(&id);
        let mut reserved = self.reserved.lock().unwrap();
        if let Some(r) = reserved.get_mut(&region.owner) {
            *r = r.saturating_sub(region.size);
        }
        Ok(())
    }

    /// Changes region permissions. Library mode only, like unmapping.
    pub fn protect_region(&self, ctx: &DomainContext, id: RegionId, writable: bool) -> Result<()> {
        if ctx.mode() != Mode::Library {
            return Err(Error::PermissionDenied);
        }
        self.check(ctx)?;
        let region = self
            .region(id)
            .ok_or(Error::InvalidBlock("unknown region"))?;
        region.writable.store(writable, Ordering::Release);
        Ok(())
    }

    fn mapped_region(&self, id: RegionId) -> Result<Arc<PermanentRegion>> {
        let r = self
            .region(id)
            .ok_or(Error::InvalidBlock("unknown region"))?;
        if !r.is_mapped() {
            return Err(Error::InvalidBlock("region is not mapped"));
        }
        Ok(r)
    }

    fn side_check(ctx: &DomainContext, region: &PermanentRegion, side: Side) -> Result<()> {
        if side == Side::Application && region.owner != ctx.pid() && !ctx.is_trusted() {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        Ok(())
    }

    /// First-fit allocation. Returns [`Error::BufferFull`] immediately when
    /// no run of free granules is large enough.
    pub fn alloc_block(
        &self,
        ctx: &DomainContext,
        region: RegionId,
        len: u64,
        requester: Side,
    ) -> Result<BlockRef> {
        self.check(ctx)?;
        if len == 0 {
            return Err(Error::InvalidBlock("zero-length block"));
        }
        let r = self.mapped_region(region)?;
        Self::side_check(ctx, &r, requester)?;
        let granules = len.div_ceil(r.granule);
        if granules > u64::from(u32::MAX) {
            return Err(Error::BufferFull { granules });
        }
        let state = {
            let mut t = r.table.lock().unwrap();
            let start = t
                .first_fit(granules)
                .ok_or(Error::BufferFull { granules })?;
            t.set_range(start, granules, true);
            t.free -= granules;
            let generation = t.next_generation;
            t.next_generation = t.next_generation.wrapping_add(1).max(1);
            let state = Arc::new(BlockState {
                offset: start * r.granule,
                granules: granules as u32,
                generation,
                owner: AtomicU8::new(requester as u8),
                status: AtomicU8::new(BlockStatus::Empty as u8),
                sample_len: AtomicU64::new(0),
                watermark: AtomicU64::new(0),
            });
            t.blocks.insert(start, Arc::clone(&state));
            state
        };
        r.write_advisory(&state);
        Ok(BlockRef {
            region,
            offset: state.offset,
            granules: state.granules,
            generation: state.generation,
        })
    }

    /// Validates a block reference against the authoritative table.
    pub fn lookup(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
    ) -> Result<(Arc<PermanentRegion>, Arc<BlockState>)> {
        self.check(ctx)?;
        let r = self.mapped_region(block.region)?;
        let span = u64::from(block.granules) * r.granule;
        if !validate_offset(r.size, block.offset, span) || !block.offset.is_multiple_of(r.granule) {
            return Err(Error::InvalidBlock("block outside its region"));
        }
        let t = r.table.lock().unwrap();
        let state = t
            .blocks
            .get(&(block.offset / r.granule))
            .filter(|b| b.generation == block.generation && b.granules == block.granules)
            .cloned()
            .ok_or(Error::InvalidBlock("no such block"))?;
        drop(t);
        Ok((r, state))
    }

    pub fn header(&self, ctx: &DomainContext, block: BlockRef) -> Result<BlockHeader> {
        Ok(self.lookup(ctx, block)?.1.header())
    }

    pub fn transfer_block(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        caller: Side,
        new_owner: Side,
    ) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::side_check(ctx, &r, caller)?;
        if b.owner() != caller {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        b.owner.store(new_owner as u8, Ordering::Release);
        r.write_advisory(&b);
        Ok(())
    }

    /// Empty → Writing, fixing the sample length.
    pub fn begin_write(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        caller: Side,
        sample_len: u64,
    ) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::owner_check(ctx, &r, &b, caller)?;
        if b.status() != BlockStatus::Empty {
            return Err(Error::InvalidStateTransition(
                "begin_write needs an empty block",
            ));
        }
        if sample_len > u64::from(b.granules) * r.granule {
            return Err(Error::InvalidStateTransition("sample larger than block"));
        }
        b.sample_len.store(sample_len, Ordering::Release);
        b.watermark.store(0, Ordering::Release);
        b.status
            .store(BlockStatus::Writing as u8, Ordering::Release);
        r.write_advisory(&b);
        Ok(())
    }

    /// Raises the watermark by `n` bytes; returns the new watermark.
    pub fn advance_watermark(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        caller: Side,
        n: u64,
    ) -> Result<u64> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::owner_check(ctx, &r, &b, caller)?;
        if b.status() != BlockStatus::Writing {
            return Err(Error::InvalidStateTransition(
                "watermark moves only while writing",
            ));
        }
        let cur = b.watermark();
        let next = cur.checked_add(n).filter(|&w| w <= b.sample_len()).ok_or(
            Error::InvalidStateTransition("watermark beyond sample length"),
        )?;
        b.watermark.store(next, Ordering::Release);
        r.write_advisory(&b);
        Ok(next)
    }

    /// Empty or Writing → Ready with the whole sample present.
    pub fn mark_ready(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        caller: Side,
        sample_len: u64,
    ) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::owner_check(ctx, &r, &b, caller)?;
        match b.status() {
            BlockStatus::Ready => {
                return Err(Error::InvalidStateTransition("block is already ready"))
            }
            BlockStatus::Writing if b.sample_len() != sample_len => {
                return Err(Error::InvalidStateTransition(
                    "length differs from begin_write",
                ))
            }
            _ => {}
        }
        if sample_len > u64::from(b.granules) * r.granule {
            return Err(Error::InvalidStateTransition("sample larger than block"));
        }
        b.sample_len.store(sample_len, Ordering::Release);
        b.watermark.store(sample_len, Ordering::Release);
        b.status.store(BlockStatus::Ready as u8, Ordering::Release);
        r.write_advisory(&b);
        Ok(())
    }

    /// Ready → Empty, so a receive block can be reused for the next take.
    pub fn reset_block(&self, ctx: &DomainContext, block: BlockRef, caller: Side) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::owner_check(ctx, &r, &b, caller)?;
        if b.status() == BlockStatus::Writing {
            return Err(Error::InvalidStateTransition(
                "cannot reset a block being written",
            ));
        }
        b.sample_len.store(0, Ordering::Release);
        b.watermark.store(0, Ordering::Release);
        b.status.store(BlockStatus::Empty as u8, Ordering::Release);
        r.write_advisory(&b);
        Ok(())
    }

    /// Every block currently allocated in `id`, with its owning side.
    pub fn blocks_in(&self, ctx: &DomainContext, id: RegionId) -> Result<Vec<(BlockRef, Side)>> {
        self.check(ctx)?;
        let r = self
            .region(id)
            .ok_or(Error::InvalidBlock("unknown region"))?;
        let t = r.table.lock().unwrap();
        Ok(t.blocks
            .values()
            .map(|b| {
                (
                    BlockRef {
                        region: id,
                        offset: b.offset,
                        granules: b.granules,
                        generation: b.generation,
                    },
                    b.owner(),
                )
            })
            .collect())
    }

    /// Usable bytes in a block.
    pub fn block_capacity(&self, block: BlockRef) -> u64 {
        u64::from(block.granules) * self.config.granule_size
    }

    /// Returns a block's granules to the region.
    pub fn free_block(&self, ctx: &DomainContext, block: BlockRef, caller: Side) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        Self::owner_check(ctx, &r, &b, caller)?;
        let mut t = r.table.lock().unwrap();
        let start = block.offset / r.granule;
        match t.blocks.get(&start) {
            Some(cur) if Arc::ptr_eq(cur, &b) => {}
            _ => return Err(Error::InvalidBlock("block already freed")),
        }
        t.blocks.remove(&start);
        t.set_range(start, u64::from(b.granules), false);
        t.free += u64::from(b.granules);
        drop(t);
        r.clear_advisory(block.offset);
        Ok(())
    }

    fn owner_check(
        ctx: &DomainContext,
        r: &PermanentRegion,
        b: &BlockState,
        caller: Side,
    ) -> Result<()> {
        Self::side_check(ctx, r, caller)?;
        if b.owner() != caller {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        Ok(())
    }

    /// Library-mode copy of `len` bytes from `src` to the start of `dst`.
    ///
    /// Region locks are taken in id order so concurrent copies in opposite
    /// directions cannot deadlock.
    pub fn copy_block(
        &self,
        ctx: &DomainContext,
        src: BlockRef,
        dst: BlockRef,
        len: u64,
    ) -> Result<()> {
        let (sr, sb) = self.lookup(ctx, src)?;
        let (dr, db) = self.lookup(ctx, dst)?;
        if len > sb.sample_len().max(sb.watermark()) {
            return Err(Error::InvalidBlock("copy past the source sample"));
        }
        if len > u64::from(db.granules) * dr.granule {
            return Err(Error::InvalidBlock("destination block too small"));
        }
        let (so, doff, n) = (src.offset as usize, dst.offset as usize, len as usize);
        sr.note_library_access(src.offset, len);
        dr.note_library_access(dst.offset, len);
        if Arc::ptr_eq(&sr, &dr) {
            let mut data = sr.data.write().unwrap();
            data.copy_within(so..so + n, doff);
        } else if sr.id < dr.id {
            let s = sr.data.read().unwrap();
            let mut d = dr.data.write().unwrap();
            d[doff..doff + n].copy_from_slice(&s[so..so + n]);
        } else {
            let mut d = dr.data.write().unwrap();
            let s = sr.data.read().unwrap();
            d[doff..doff + n].copy_from_slice(&s[so..so + n]);
        }
        Ok(())
    }

    /// Library-mode write of `bytes` at `at` within a block.
    pub fn write_block(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        at: u64,
        bytes: &[u8],
    ) -> Result<()> {
        let (r, b) = self.lookup(ctx, block)?;
        let cap = u64::from(b.granules) * r.granule;
        let len = bytes.len() as u64;
        if !validate_offset(cap, at, len) {
            return Err(Error::InvalidBlock("write past block end"));
        }
        let off = block.offset + at;
        r.note_library_access(off, len);
        let mut data = r.data.write().unwrap();
        data[off as usize..(off + len) as usize].copy_from_slice(bytes);
        Ok(())
    }

    /// Library-mode read of `len` bytes at `at` within a block, handed to `f`.
    pub fn read_block<T>(
        &self,
        ctx: &DomainContext,
        block: BlockRef,
        at: u64,
        len: u64,
        f: impl FnOnce(&[u8]) -> T,
    ) -> Result<T> {
        let (r, b) = self.lookup(ctx, block)?;
        let cap = u64::from(b.granules) * r.granule;
        if !validate_offset(cap, at, len) {
            return Err(Error::InvalidBlock("read past block end"));
        }
        let off = block.offset + at;
        r.note_library_access(off, len);
        let data = r.data.read().unwrap();
        Ok(f(&data[off as usize..(off + len) as usize]))
    }

    // Application-side access. These model plain loads and stores by the
    // owning process into its own mapping; they never touch library state.

    fn app_region(&self, ctx: &DomainContext, id: RegionId) -> Result<Arc<PermanentRegion>> {
        ctx.require_application()?;
        let r = self.mapped_region(id)?;
        if r.owner != ctx.pid() {
            return Err(Error::OwnershipViolation { caller: ctx.pid() });
        }
        Ok(r)
    }

    pub fn app_write(
        &self,
        ctx: &DomainContext,
        id: RegionId,
        offset: u64,
        bytes: &[u8],
    ) -> Result<()> {
        let r = self.app_region(ctx, id)?;
        if !r.is_writable() {
            return Err(Error::PermissionDenied);
        }
        if !validate_offset(r.size, offset, bytes.len() as u64) {
            return Err(Error::InvalidBlock("application write outside its region"));
        }
        let mut data = r.data.write().unwrap();
        data[offset as usize..offset as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn app_read(
        &self,
        ctx: &DomainContext,
        id: RegionId,
        offset: u64,
        out: &mut [u8],
    ) -> Result<()> {
        let r = self.app_region(ctx, id)?;
        if !validate_offset(r.size, offset, out.len() as u64) {
            return Err(Error::InvalidBlock("application read outside its region"));
        }
        let data = r.data.read().unwrap();
        out.copy_from_slice(&data[offset as usize..offset as usize + out.len()]);
        Ok(())
    }

    /// Reads the advisory header mirrored for the block at `offset`.
    pub fn app_advisory(
        &self,
        ctx: &DomainContext,
        id: RegionId,
        offset: u64,
    ) -> Result<AdvisoryHeader> {
        let r = self.app_region(ctx, id)?;
        if !offset.is_multiple_of(r.granule) || offset >= r.size {
            return Err(Error::InvalidBlock("advisory offset"));
        }
        let idx = (offset / r.granule) as usize * ADVISORY_ENTRY;
        let adv = r.advisory.lock().unwrap();
        let e = &adv[idx..idx + ADVISORY_ENTRY];
        let word = |i: usize| u32::from_le_bytes(e[i..i + 4].try_into().unwrap());
        Ok(AdvisoryHeader {
            status: e[0],
            owner: e[1],
            sample_len: word(4),
            watermark: word(8),
            generation: word(12),
        })
    }

    /// Overwrites advisory metadata bytes, as a buggy or hostile process might.
    pub fn app_scribble_advisory(
        &self,
        ctx: &DomainContext,
        id: RegionId,
        at: usize,
        bytes: &[u8],
    ) -> Result<()> {
        let r = self.app_region(ctx, id)?;
        let mut adv = r.advisory.lock().unwrap();
        if at
            .checked_add(bytes.len())
            .is_none_or(|end| end > adv.len())
        {
            return Err(Error::InvalidBlock("advisory write outside its region"));
        }
        adv[at..at + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn advisory_len(&self, id: RegionId) -> usize {
        self.region(id)
            .map(|r| r.advisory.lock().unwrap().len())
            .unwrap_or(0)
    }
}
