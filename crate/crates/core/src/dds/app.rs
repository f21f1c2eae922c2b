//! Application-side wrapper: one simulated process with its own context
//! and permanent region.

use std::time::{Duration, Instant};

use super::{Domain, QosProfile, ReadinessCell, TakenSample};
use crate::buffers::{BlockRef, BlockStatus, RegionId, Side};
use crate::error::{Error, Result};
use crate::heap::Descriptor;
use crate::runtime::{DomainContext, Pid};
use crate::wait;

/// A reader descriptor together with its advisory readiness cell.
#[derive(Debug, Clone)]
pub struct ReaderHandle {
    pub desc: Descriptor,
    pub readiness: ReadinessCell,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub sample: TakenSample,
    pub payload: Vec<u8>,
}

/// A registered process: a context, a mapped region and a participant.
/// Dropping it deregisters the pid, which queues it for reclamation.
#[derive(Debug)]
pub struct Process {
    domain: Domain,
    ctx: DomainContext,
    region: RegionId,
    participant: Descriptor,
    rx_pool: Vec<BlockRef>,
    publish_timeout: Duration,
    open: bool,
}

impl Process {
    pub fn open(domain: &Domain) -> Result<Process> {
        let rt = domain.runtime();
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid)?;
        let size = domain.config().regions.region_size;
        let setup = ctx.call(|c| {
            let region = domain.arena().map_region(c, pid, size)?;
            let participant = domain.create_participant(c)?;
            Ok((region.id(), participant))
        });
        let (region, participant) = match setup {
            Ok(v) => v,
            Err(e) => {
                let _ = rt.deregister_process(pid);
                return Err(e);
            }
        };
        Ok(Process {
            domain: domain.clone(),
            ctx,
            region,
            participant,
            rx_pool: Vec::new(),
            publish_timeout: Duration::from_secs(5),
            open: true,
        })
    }

    pub fn pid(&self) -> Pid {
        self.ctx.pid()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn ctx(&self) -> &DomainContext {
        &self.ctx
    }

    pub fn ctx_mut(&mut self) -> &mut DomainContext {
        &mut self.ctx
    }

    pub fn region(&self) -> RegionId {
        self.region
    }

    pub fn participant(&self) -> Descriptor {
        self.participant
    }

    /// How long [`Process::publish`] waits out a full reliable window.
    pub fn set_publish_timeout(&mut self, timeout: Duration) {
        self.publish_timeout = timeout;
    }

    /// Runs `f` as one library call with this process's context.
    pub fn call<T>(&mut self, f: impl FnOnce(&Domain, &DomainContext) -> Result<T>) -> Result<T> {
        let domain = &self.domain;
        self.ctx.call(|c| f(domain, c))
    }

    pub fn create_topic(
        &mut self,
        name: &str,
        max_sample_len: u64,
        qos: QosProfile,
    ) -> Result<Descriptor> {
        let p = self.participant;
        self.call(|d, c| d.create_topic(c, p, name, max_sample_len, qos))
    }

    /// Finds an existing topic by name or creates it.
    pub fn topic(
        &mut self,
        name: &str,
        max_sample_len: u64,
        qos: QosProfile,
    ) -> Result<Descriptor> {
        let p = self.participant;
        self.call(|d, c| match d.lookup_topic(c, name)? {
            Some(t) => Ok(t),
            None => d.create_topic(c, p, name, max_sample_len, qos),
        })
    }

    pub fn writer(&mut self, topic: Descriptor, qos: QosProfile) -> Result<Descriptor> {
        self.call(|d, c| d.create_writer(c, topic, qos))
    }

    pub fn reader(&mut self, topic: Descriptor, qos: QosProfile) -> Result<ReaderHandle> {
        self.call(|d, c| {
            let desc = d.create_reader(c, topic, qos)?;
            Ok(ReaderHandle {
                desc,
                readiness: d.reader_readiness(c, desc)?,
            })
        })
    }

    pub fn waitset(&mut self, readers: &[Descriptor]) -> Result<Descriptor> {
        self.call(|d, c| d.create_waitset(c, readers))
    }

    pub fn delete(&mut self, desc: Descriptor) -> Result<()> {
        self.call(|d, c| d.delete(c, desc))
    }

    /// Copies `bytes` into a fresh block of this process's region, then
    /// hands it to the library. Returns [`Error::BackpressureFull`]
    /// without waiting when the reliable window or a receiver is full.
    pub fn try_publish(&mut self, writer: Descriptor, bytes: &[u8]) -> Result<u64> {
        let block = self.fill_block(bytes)?;
        let len = bytes.len() as u64;
        let out = self.call(|d, c| d.hdds_write(c, writer, block, len));
        if out.is_err() {
            self.discard_block(block);
        }
        out
    }

    /// Like [`Process::try_publish`], but a full window is waited out
    /// (outside the library) for up to the publish timeout. Each retry
    /// also drains pending network input so acknowledgments get seen.
    pub fn publish(&mut self, writer: Descriptor, bytes: &[u8]) -> Result<u64> {
        let block = self.fill_block(bytes)?;
        let len = bytes.len() as u64;
        let deadline = Instant::now() + self.publish_timeout;
        loop {
            let attempt = self.call(|d, c| match d.hdds_write(c, writer, block, len) {
                Err(Error::BackpressureFull) => {
                    let directive = d.prepare_write_wait(c, writer)?;
                    d.poll_network(c, 64)?;
                    Ok(Err(directive))
                }
                other => other.map(Ok),
            });
            match attempt {
                Ok(Ok(seq)) => return Ok(seq),
                Ok(Err(directive)) => {
                    let now = Instant::now();
                    if now >= deadline {
                        self.discard_block(block);
                        return Err(Error::BackpressureFull);
                    }
                    let nap = (deadline - now).min(Duration::from_millis(1));
                    wait::wait_outside(&self.ctx, directive, nap)?;
                }
                Err(e) => {
                    self.discard_block(block);
                    return Err(e);
                }
            }
        }
    }

    fn fill_block(&mut self, bytes: &[u8]) -> Result<BlockRef> {
        let region = self.region;
        let len = bytes.len() as u64;
        let block = self.call(|d, c| {
            d.arena()
                .alloc_block(c, region, len.max(1), Side::Application)
        })?;
        let filled = self
            .domain
            .arena()
            .app_write(&self.ctx, region, block.offset, bytes)
            .and_then(|()| {
                self.call(|d, c| d.arena().mark_ready(c, block, Side::Application, len))
            });
        if let Err(e) = filled {
            self.discard_block(block);
            return Err(e);
        }
        Ok(block)
    }

    fn discard_block(&mut self, block: BlockRef) {
        let _ = self.call(|d, c| d.arena().free_block(c, block, Side::Application));
    }

    /// Takes up to `max` samples from `reader` and copies each out of the
    /// receive block it landed in.
    pub fn take(&mut self, reader: Descriptor, max: usize) -> Result<Vec<Received>> {
        if max == 0 {
            return Ok(Vec::new());
        }
        let region = self.region;
        let Process {
            domain,
            ctx,
            rx_pool,
            ..
        } = self;
        let taken = ctx.call(|c| {
            let arena = domain.arena();
            let r = domain.reader_state(c, reader)?;
            let need = r.topic_state.max_sample_len.max(1);
            rx_pool.retain(|b| {
                let Ok((_, st)) = arena.lookup(c, *b) else {
                    return false;
                };
                if arena.block_capacity(*b) < need {
                    let _ = arena.free_block(c, *b, Side::Application);
                    return false;
                }
                st.status() == BlockStatus::Empty
                    || arena.reset_block(c, *b, Side::Application).is_ok()
            });
            let want = max.min(r.pending().max(1));
            while rx_pool.len() < want {
                match arena.alloc_block(c, region, need, Side::Application) {
                    Ok(b) => rx_pool.push(b),
                    Err(Error::BufferFull { .. }) if !rx_pool.is_empty() => break,
                    Err(e) => return Err(e),
                }
            }
            let n = want.min(rx_pool.len());
            domain.hdds_take(c, reader, &rx_pool[..n], n)
        })?;
        let arena = self.domain.arena();
        taken
            .into_iter()
            .map(|s| {
                let mut payload = vec![0u8; s.len as usize];
                arena.app_read(&self.ctx, region, s.block.offset, &mut payload)?;
                Ok(Received { sample: s, payload })
            })
            .collect()
    }

    /// Blocks until a reader in `waitset` has data or `timeout` passes.
    pub fn wait(&mut self, waitset: Descriptor, timeout: Duration) -> Result<Vec<Descriptor>> {
        self.domain.waitset_wait(&mut self.ctx, waitset, timeout)
    }

    /// Checks the advisory readiness cell without entering the library.
    pub fn has_data(&self, reader: &ReaderHandle) -> Result<bool> {
        self.domain.take_fast_path(&self.ctx, &reader.readiness)
    }

    /// Deregisters the process. Its resources are reclaimed by whoever runs
    /// [`Domain::reclaim_dead`] next.
    pub fn close(mut self) -> Result<()> {
        self.open = false;
        self.domain.runtime().deregister_process(self.ctx.pid())
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        if self.open {
            let _ = self.domain.runtime().deregister_process(self.ctx.pid());
        }
    }
}
