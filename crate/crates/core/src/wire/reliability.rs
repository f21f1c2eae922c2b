//! Sequence bookkeeping for reliable delivery.
//!
//! The writer side keeps every sent sequence until all peers have
//! acknowledged it; the reader side tracks the highest contiguous sequence
//! per remote writer and answers heartbeats with the gaps it still has.

use std::collections::BTreeMap;

use super::{SequenceBitmap, MAX_BITMAP_BITS};

#[derive(Debug)]
pub struct AckOutcome<T> {
    /// Sequences the peer reported missing that are still cached.
    pub retransmit: Vec<u64>,
    /// Entries acknowledged by every peer, now dropped from the cache.
    pub released: Vec<(u64, T)>,
}

/// Writer-side cache of unacknowledged samples, keyed by sequence.
#[derive(Debug)]
pub struct WriterReliability<K: Ord, T> {
    window: usize,
    last_sent: u64,
    cache: BTreeMap<u64, T>,
    acked: BTreeMap<K, u64>,
}

impl<K: Ord + Clone, T> WriterReliability<K, T> {
    pub fn new(window: usize, peers: impl IntoIterator<Item = K>) -> Self {
        Self {
            window: window.max(1),
            last_sent: 0,
            cache: BTreeMap::new(),
            acked: peers.into_iter().map(|p| (p, 0)).collect(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn has_peers(&self) -> bool {
        !self.acked.is_empty()
    }

    pub fn last_sent(&self) -> u64 {
        self.last_sent
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    pub fn is_full(&self) -> bool {
        self.cache.len() >= self.window
    }

    pub fn contains(&self, seq: u64) -> bool {
        self.cache.contains_key(&seq)
    }

    pub fn cached_seqs(&self) -> impl Iterator<Item = u64> + '_ {
        self.cache.keys().copied()
    }

    pub fn get(&self, seq: u64) -> Option<&T> {
        self.cache.get(&seq)
    }

    pub fn acked_through(&self, peer: &K) -> Option<u64> {
        self.acked.get(peer).copied()
    }

    /// Records a newly written sequence. Without peers nothing is cached and
    /// the tag is handed straight back.
    pub fn record_sent(&mut self, seq: u64, tag: T) -> Option<T> {
        debug_assert!(seq > self.last_sent, "sequences must increase");
        self.last_sent = seq;
        if self.acked.is_empty() {
            return Some(tag);
        }
        self.cache.insert(seq, tag);
        None
    }

    /// Lowest sequence some peer has not acknowledged.
    pub fn first_unacked(&self) -> u64 {
        let min = self.acked.values().copied().min().unwrap_or(self.last_sent);
        min.min(self.last_sent) + 1
    }

    /// `(first, last)` for a HEARTBEAT; `(1, 0)` before anything was sent.
    pub fn heartbeat_range(&self) -> (u64, u64) {
        (self.first_unacked(), self.last_sent)
    }

    /// Applies an ACKNACK from `peer`: everything below `base` is
    /// acknowledged, `missing` lists sequences to resend.
    pub fn on_acknack(
        &mut self,
        peer: &K,
        base: u64,
        missing: impl IntoIterator<Item = u64>,
    ) -> AckOutcome<T> {
        let mut out = AckOutcome {
            retransmit: Vec::new(),
            released: Vec::new(),
        };
        let Some(acked) = self.acked.get_mut(peer) else {
            return out;
        };
        let through = base.saturating_sub(1).min(self.last_sent);
        *acked = (*acked).max(through);
        let through = *acked;
        out.retransmit = missing
            .into_iter()
            .filter(|s| *s > through && self.cache.contains_key(s))
            .collect();
        let floor = self.first_unacked();
        let keep = self.cache.split_off(&floor);
        out.released = std::mem::replace(&mut self.cache, keep)
            .into_iter()
            .collect();
        out
    }

    /// Forgets every cached entry, e.g. when the writer goes away.
    pub fn drain(&mut self) -> Vec<(u64, T)> {
        std::mem::take(&mut self.cache).into_iter().collect()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Accepted<T> {
    Duplicate,
    /// Buffered until the gap before it fills.
    Buffered,
    /// Items now deliverable, in sequence order.
    Deliver(Vec<(u64, T)>),
}

/// Reader-side state for one remote writer.
#[derive(Debug)]
pub struct ReaderProxy<T> {
    ordered: bool,
    highest_contiguous: u64,
    highest_seen: u64,
    pending: BTreeMap<u64, T>,
}

impl<T> ReaderProxy<T> {
    /// `ordered` proxies hold back out-of-order samples until the gap
    /// fills; unordered ones pass anything newer than what they saw.
    pub fn new(ordered: bool) -> Self {
        Self {
            ordered,
            highest_contiguous: 0,
            highest_seen: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn highest_contiguous(&self) -> u64 {
        self.highest_contiguous
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    pub fn accept(&mut self, seq: u64, item: T) -> Accepted<T> {
        if !self.ordered {
            if seq <= self.highest_seen {
                return Accepted::Duplicate;
            }
            self.highest_seen = seq;
            self.highest_contiguous = seq;
            return Accepted::Deliver(vec![(seq, item)]);
        }
        if seq <= self.highest_contiguous || self.pending.contains_key(&seq) {
            return Accepted::Duplicate;
        }
        self.highest_seen = self.highest_seen.max(seq);
        self.pending.insert(seq, item);
        let ready = self.drain_contiguous();
        if ready.is_empty() {
            Accepted::Buffered
        } else {
            Accepted::Deliver(ready)
        }
    }

    fn drain_contiguous(&mut self) -> Vec<(u64, T)> {
        let mut out = Vec::new();
        while let Some(item) = self.pending.remove(&(self.highest_contiguous + 1)) {
            self.highest_contiguous += 1;
            out.push((self.highest_contiguous, item));
        }
        out
    }

    /// Undoes acceptance of `seq` and everything after it, so they are
    /// requested again.
    pub fn rollback(&mut self, seq: u64) {
        if seq == 0 {
            return;
        }
        self.highest_contiguous = self.highest_contiguous.min(seq - 1);
        self.highest_seen = self.highest_seen.min(seq - 1);
        self.pending.retain(|s, _| *s < seq);
    }

    /// Handles a HEARTBEAT advertising `[first, last]`. Sequences below
    /// `first` are no longer available and get skipped. Returns the
    /// ACKNACK base and bitmap plus anything that became deliverable.
    pub fn on_heartbeat(&mut self, first: u64, last: u64) -> (u64, SequenceBitmap, Vec<(u64, T)>) {
        let mut ready = Vec::new();
        if self.ordered && first > self.highest_contiguous + 1 {
            self.highest_contiguous = first - 1;
            self.pending.retain(|s, _| *s >= first);
            ready = self.drain_contiguous();
        }
        let base = self.highest_contiguous + 1;
        let mut bitmap = SequenceBitmap::default();
        if last >= base {
            let n = ((last - base + 1) as usize).min(MAX_BITMAP_BITS);
            bitmap = SequenceBitmap::new(n);
            for i in 0..n {
                if !self.pending.contains_key(&(base + i as u64)) {
                    bitmap.set(i);
                }
            }
        }
        (base, bitmap, ready)
    }
}
