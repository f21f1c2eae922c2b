//! Randomized allocator workload checked against a plain first-fit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use domainbus::buffers::{BlockRef, BlockStatus, BufferArena, RegionConfig, Side};
use domainbus::runtime::{Runtime, TimeBoundPolicy};
use domainbus::Error;

pub const GRANULE: u64 = 4096;
pub const GRANULES: usize = 64;

/// Occupancy vector; `alloc` returns the lowest start of a free run.
#[derive(Debug, Default)]
pub struct FirstFitModel {
    used: Vec<bool>,
}

impl FirstFitModel {
    pub fn new(granules: usize) -> Self {
        Self {
            used: vec![false; granules],
        }
    }

    pub fn alloc(&mut self, n: usize) -> Option<usize> {
        let start = (0..=self.used.len().checked_sub(n)?)
            .find(|&s| self.used[s..s + n].iter().all(|u| !u))?;
        self.used[start..start + n].fill(true);
        Some(start)
    }

    pub fn free(&mut self, start: usize, n: usize) {
        assert!(self.used[start..start + n].iter().all(|&u| u));
        self.used[start..start + n].fill(false);
    }

    pub fn free_count(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Live {
    block: BlockRef,
    owner: Side,
    status: BlockStatus,
    len: u64,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WorkloadReport {
    pub steps: usize,
    pub allocs: usize,
    pub full: usize,
    pub frees: usize,
    pub scribbles: usize,
}

/// Runs `steps` random operations on one region. With `scribble_every`
/// set, hostile advisory writes are mixed in at that period and every
/// library operation is still required to behave as the model says.
pub fn run_workload(
    seed: u64,
    steps: usize,
    scribble_every: Option<usize>,
    policy: TimeBoundPolicy,
) -> Result<WorkloadReport, String> {
    let rt = Runtime::new(policy);
    let arena = BufferArena::new(
        rt.clone(),
        RegionConfig {
            region_size: GRANULE * GRANULES as u64,
            region_limit: GRANULE * GRANULES as u64,
            granule_size: GRANULE,
        },
    )
    .map_err(|e| e.to_string())?;
    let pid = rt.register_process().pid;
    let mut ctx = rt.context(pid).map_err(|e| e.to_string())?;
    let region = ctx
        .call(|c| arena.map_region(c, pid, GRANULE * GRANULES as u64))
        .map_err(|e| e.to_string())?;
    let id = region.id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FirstFitModel::new(GRANULES);
    let mut live: Vec<Live> = Vec::new();
    let mut dead: Vec<BlockRef> = Vec::new();
    let mut report = WorkloadReport::default();
    let err =
        |step: usize, what: &str, e: &dyn std::fmt::Debug| format!("step {step}: {what}: {e:?}");

    for step in 0..steps {
        report.steps += 1;
        if scribble_every.is_some_and(|k| step % k == 0) {
            let len = arena.advisory_len(id);
            let at = rng.random_range(0..len);
            let n = rng.random_range(1..=16.min(len - at));
            let junk: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            arena
                .app_scribble_advisory(&ctx, id, at, &junk)
                .map_err(|e| err(step, "scribble", &e))?;
            report.scribbles += 1;
        }
        let op = rng.random_range(0..100);
        let pick = if live.is_empty() {
            None
        } else {
            Some(rng.random_range(0..live.len()))
        };
        match (op, pick) {
            (0..=34, _) | (_, None) => {
                let granules = rng.random_range(1..=6usize);
                let len = (granules as u64 - 1) * GRANULE + rng.random_range(1..=GRANULE);
                let side = if rng.random_bool(0.8) {
                    Side::Application
                } else {
                    Side::Library
                };
                let got = ctx.call(|c| arena.alloc_block(c, id, len, side));
                match (got, model.alloc(granules)) {
                    (Ok(b), Some(start)) => {
                        if b.offset != start as u64 * GRANULE || b.granules as usize != granules {
                            return Err(format!(
                                "step {step}: got {b:?}, first fit says granule {start}"
                            ));
                        }
                        live.push(Live {
                            block: b,
                            owner: side,
                            status: BlockStatus::Empty,
                            len: 0,
                        });
                        report.allocs += 1;
                    }
                    (Err(Error::BufferFull { .. }), None) => report.full += 1,
                    (got, want) => {
                        return Err(format!("step {step}: alloc {got:?} vs model {want:?}"))
                    }
                }
            }
            (35..=49, Some(i)) => {
                let l = &mut live[i];
                let to = if l.owner == Side::Application {
                    Side::Library
                } else {
                    Side::Application
                };
                let wrong = ctx.call(|c| arena.transfer_block(c, l.block, to, l.owner));
                if !matches!(wrong, Err(Error::OwnershipViolation { .. })) {
                    return Err(err(step, "transfer by non-owner", &wrong));
                }
                ctx.call(|c| arena.transfer_block(c, l.block, l.owner, to))
                    .map_err(|e| err(step, "transfer", &e))?;
                l.owner = to;
            }
            (50..=69, Some(i)) => {
                let l = &mut live[i];
                let cap = u64::from(l.block.granules) * GRANULE;
                match l.status {
                    BlockStatus::Empty => {
                        let len = rng.random_range(1..=cap);
                        ctx.call(|c| arena.begin_write(c, l.block, l.owner, len))
                            .map_err(|e| err(step, "begin_write", &e))?;
                        l.status = BlockStatus::Writing;
                        l.len = len;
                    }
                    BlockStatus::Writing => {
                        let half = l.len / 2;
                        ctx.call(|c| arena.advance_watermark(c, l.block, l.owner, half))
                            .map_err(|e| err(step, "advance", &e))?;
                        let over = ctx.call(|c| {
                            arena.advance_watermark(c, l.block, l.owner, l.len - half + 1)
                        });
                        if !matches!(over, Err(Error::InvalidStateTransition(_))) {
                            return Err(err(step, "watermark overrun accepted", &over));
                        }
                        ctx.call(|c| arena.mark_ready(c, l.block, l.owner, l.len))
                            .map_err(|e| err(step, "mark_ready", &e))?;
                        l.status = BlockStatus::Ready;
                    }
                    BlockStatus::Ready => {
                        let again = ctx.call(|c| arena.mark_ready(c, l.block, l.owner, l.len));
                        if !matches!(again, Err(Error::InvalidStateTransition(_))) {
                            return Err(err(step, "double ready accepted", &again));
                        }
                        ctx.call(|c| arena.reset_block(c, l.block, l.owner))
                            .map_err(|e| err(step, "reset", &e))?;
                        l.status = BlockStatus::Empty;
                        l.len = 0;
                    }
                }
            }
            (70..=94, Some(i)) => {
                let l = live.swap_remove(i);
                ctx.call(|c| arena.free_block(c, l.block, l.owner))
                    .map_err(|e| err(step, "free", &e))?;
                model.free(
                    (l.block.offset / GRANULE) as usize,
                    l.block.granules as usize,
                );
                dead.push(l.block);
                report.frees += 1;
            }
            (_, Some(_)) => {
                if let Some(&b) = dead.last() {
                    let still_there = live.iter().any(|l| l.block == b);
                    let r = ctx.call(|c| arena.lookup(c, b).map(|_| ()));
                    if !still_there && !matches!(r, Err(Error::InvalidBlock(_))) {
                        return Err(err(step, "stale block accepted", &r));
                    }
                }
            }
        }
        region
            .check_invariants()
            .map_err(|e| format!("step {step}: {e}"))?;
        if region.free_granules() as usize != model.free_count() {
            return Err(format!(
                "step {step}: free {} vs model {}",
                region.free_granules(),
                model.free_count()
            ));
        }
        if let Some(l) = live.get(step % live.len().max(1)) {
            let h = ctx
                .call(|c| arena.header(c, l.block))
                .map_err(|e| err(step, "header", &e))?;
            if h.owner != l.owner
                || h.status != l.status
                || (l.status != BlockStatus::Empty && h.sample_len != l.len)
            {
                return Err(format!("step {step}: header {h:?} vs model {l:?}"));
            }
        }
    }
    let violations = rt.stats().context_violations;
    if violations != 0 {
        return Err(format!("{violations} context violations"));
    }
    Ok(report)
}
