//! Splitting samples into datagram-sized pieces and putting them back together.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use super::{Data, DataFrag, GuidPrefix, Submessage};
use crate::error::{Error, Result};

/// Completed keys remembered to drop late duplicate fragments.
const COMPLETED_MEMORY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub topic_id: u32,
    pub writer_id: u32,
    pub sequence: u64,
    pub timestamp: u64,
}

pub fn fragment_count(len: usize, frag_size: usize) -> usize {
    len.div_ceil(frag_size).max(1)
}

/// One DATA submessage if the payload fits in `mtu_payload`, otherwise
/// `ceil(len / mtu_payload)` DATA_FRAGs of `mtu_payload` bytes (the last
/// one shorter).
pub fn fragment_sample(meta: SampleMeta, payload: &[u8], mtu_payload: usize) -> Vec<Submessage> {
    (0..fragment_count(payload.len(), mtu_payload))
        .map(|i| fragment_at(meta, payload, mtu_payload, i))
        .collect()
}

/// The `index`th submessage [`fragment_sample`] would produce.
pub fn fragment_at(
    meta: SampleMeta,
    payload: &[u8],
    mtu_payload: usize,
    index: usize,
) -> Submessage {
    assert!(
        mtu_payload > 0 && mtu_payload <= usize::from(u16::MAX),
        "mtu_payload {mtu_payload} out of range"
    );
    if payload.len() <= mtu_payload {
        assert_eq!(index, 0, "unfragmented sample has one submessage");
        return Submessage::Data(Data {
            topic_id: meta.topic_id,
            writer_id: meta.writer_id,
            sequence: meta.sequence,
            timestamp: meta.timestamp,
            payload: payload.to_vec(),
        });
    }
    let count = fragment_count(payload.len(), mtu_payload);
    assert!(index < count, "fragment {index} of {count}");
    let start = index * mtu_payload;
    let end = (start + mtu_payload).min(payload.len());
    Submessage::DataFrag(DataFrag {
        topic_id: meta.topic_id,
        writer_id: meta.writer_id,
        sequence: meta.sequence,
        timestamp: meta.timestamp,
        frag_index: index as u32,
        frag_count: count as u32,
        frag_size: mtu_payload as u16,
        total_len: payload.len() as u32,
        payload: payload[start..end].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReassemblyKey {
    pub guid_prefix: GuidPrefix,
    pub writer_id: u32,
    pub sequence: u64,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Reassembly {
    Incomplete,
    /// A fragment of a sample that already completed.
    Duplicate,
    Complete(Vec<u8>),
}

#[derive(Debug)]
struct Partial {
    topic_id: u32,
    total_len: u32,
    frag_count: u32,
    frag_size: u16,
    seen: Vec<bool>,
    received: u32,
    data: Vec<u8>,
    last_progress: Instant,
}

#[derive(Debug)]
pub struct Reassembler {
    partial: HashMap<ReassemblyKey, Partial>,
    completed: HashSet<ReassemblyKey>,
    completed_order: VecDeque<ReassemblyKey>,
    timeout: Duration,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(Duration::from_secs(5))
    }
}

impl Reassembler {
    pub fn new(timeout: Duration) -> Self {
        Self {
            partial: HashMap::new(),
            completed: HashSet::new(),
            completed_order: VecDeque::new(),
            timeout,
        }
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    pub fn buffered_bytes(&self) -> usize {
        self.partial.values().map(|p| p.data.len()).sum()
    }

    pub fn insert(
        &mut self,
        guid_prefix: GuidPrefix,
        frag: &DataFrag,
        now: Instant,
    ) -> Result<Reassembly> {
        let key = ReassemblyKey {
            guid_prefix,
            writer_id: frag.writer_id,
            sequence: frag.sequence,
        };
        if self.completed.contains(&key) {
            return Ok(Reassembly::Duplicate);
        }
        let expected_count = fragment_count(frag.total_len as usize, usize::from(frag.frag_size));
        if frag.total_len == 0 || expected_count != frag.frag_count as usize {
            return Err(Error::FragMetadataMismatch);
        }
        let start = frag.frag_index as usize * usize::from(frag.frag_size);
        let expected_len = (frag.total_len as usize - start).min(usize::from(frag.frag_size));
        if frag.payload.len() != expected_len {
            return Err(Error::FragMetadataMismatch);
        }
        let p = self.partial.entry(key).or_insert_with(|| Partial {
            topic_id: frag.topic_id,
            total_len: frag.total_len,
            frag_count: frag.frag_count,
            frag_size: frag.frag_size,
            seen: vec![false; frag.frag_count as usize],
            received: 0,
            data: vec![0; frag.total_len as usize],
            last_progress: now,
        });
        if p.topic_id != frag.topic_id
            || p.total_len != frag.total_len
            || p.frag_count != frag.frag_count
            || p.frag_size != frag.frag_size
        {
            return Err(Error::FragMetadataMismatch);
        }
        let i = frag.frag_index as usize;
        if p.seen[i] {
            return Ok(Reassembly::Incomplete);
        }
        p.seen[i] = true;
        p.received += 1;
        p.data[start..start + expected_len].copy_from_slice(&frag.payload);
        p.last_progress = now;
        if p.received < p.frag_count {
            return Ok(Reassembly::Incomplete);
        }
        let done = self.partial.remove(&key).expect("entry present");
        self.remember(key);
        Ok(Reassembly::Complete(done.data))
    }

    /// Forgets that `key` completed, so a retransmission can complete it again.
    pub fn forget(&mut self, key: &ReassemblyKey) {
        if self.completed.remove(key) {
            self.completed_order.retain(|k| k != key);
        }
    }

    fn remember(&mut self, key: ReassemblyKey) {
        if self.completed.insert(key) {
            self.completed_order.push_back(key);
        }
        while self.completed_order.len() > COMPLETED_MEMORY {
            if let Some(old) = self.completed_order.pop_front() {
                self.completed.remove(&old);
            }
        }
    }

    /// Drops partial samples idle for longer than the timeout, limited to
    /// topics for which `expirable(topic_id)` holds. Returns how many went.
    pub fn expire(&mut self, now: Instant, expirable: impl Fn(u32) -> bool) -> usize {
        let timeout = self.timeout;
        let before = self.partial.len();
        self.partial.retain(|_, p| {
            !(expirable(p.topic_id) && now.saturating_duration_since(p.last_progress) > timeout)
        });
        before - self.partial.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const META: SampleMeta = SampleMeta {
        topic_id: 1,
        writer_id: 2,
        sequence: 3,
        timestamp: 4,
    };

    fn frags(payload: &[u8], mtu: usize) -> Vec<DataFrag> {
        fragment_sample(META, payload, mtu)
            .into_iter()
            .map(|s| match s {
                Submessage::DataFrag(f) => f,
                other => panic!("expected DATA_FRAG, got {other:?}"),
            })
            .collect()
    }

    #[test]
    fn boundary_sizes() {
        assert!(matches!(
            fragment_sample(META, &[0; 1344], 1344)[..],
            [Submessage::Data(_)]
        ));
        let f = frags(&[0; 1345], 1344);
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].payload.len(), 1);
        assert_eq!(frags(&[0; 1_048_576], 1344).len(), 781);
        assert!(matches!(
            fragment_sample(META, &[], 1344)[..],
            [Submessage::Data(_)]
        ));
    }

    #[test]
    fn reverse_order_reassembly() {
        let payload: Vec<u8> = (0..5000u32).map(|i| i as u8).collect();
        let mut r = Reassembler::default();
        let now = Instant::now();
        let mut fs = frags(&payload, 1000);
        fs.reverse();
        let last = fs.pop().unwrap();
        for f in &fs {
            assert_eq!(r.insert([0; 12], f, now).unwrap(), Reassembly::Incomplete);
        }
        assert_eq!(
            r.insert([0; 12], &last, now).unwrap(),
            Reassembly::Complete(payload)
        );
        assert_eq!(r.pending(), 0);
        assert_eq!(
            r.insert([0; 12], &last, now).unwrap(),
            Reassembly::Duplicate
        );
    }

    #[test]
    fn duplicate_fragment_is_harmless() {
        let payload = vec![7u8; 2500];
        let fs = frags(&payload, 1000);
        let mut r = Reassembler::default();
        let now = Instant::now();
        r.insert([0; 12], &fs[0], now).unwrap();
        r.insert([0; 12], &fs[0], now).unwrap();
        r.insert([0; 12], &fs[1], now).unwrap();
        assert_eq!(
            r.insert([0; 12], &fs[2], now).unwrap(),
            Reassembly::Complete(payload)
        );
    }

    #[test]
    fn inconsistent_metadata_rejected() {
        let fs = frags(&[1u8; 3000], 1000);
        let mut r = Reassembler::default();
        let now = Instant::now();
        r.insert([0; 12], &fs[0], now).unwrap();
        let mut bad = fs[1].clone();
        bad.total_len = 2999;
        bad.frag_count = 3;
        assert!(matches!(
            r.insert([0; 12], &bad, now),
            Err(Error::FragMetadataMismatch)
        ));
        let mut bad = fs[1].clone();
        bad.frag_count = 5;
        assert!(matches!(
            r.insert([0; 12], &bad, now),
            Err(Error::FragMetadataMismatch)
        ));
    }

    #[test]
    fn distinct_senders_do_not_mix() {
        let a = vec![1u8; 2000];
        let b = vec![2u8; 2000];
        let mut r = Reassembler::default();
        let now = Instant::now();
        let fa = frags(&a, 1000);
        let fb = frags(&b, 1000);
        r.insert([1; 12], &fa[0], now).unwrap();
        r.insert([2; 12], &fb[0], now).unwrap();
        assert_eq!(
            r.insert([1; 12], &fa[1], now).unwrap(),
            Reassembly::Complete(a)
        );
        assert_eq!(
            r.insert([2; 12], &fb[1], now).unwrap(),
            Reassembly::Complete(b)
        );
    }

    #[test]
    fn expiry_respects_predicate() {
        let fs = frags(&[0u8; 2000], 1000);
        let mut r = Reassembler::new(Duration::from_secs(5));
        let t0 = Instant::now();
        r.insert([0; 12], &fs[0], t0).unwrap();
        assert_eq!(r.expire(t0 + Duration::from_secs(6), |_| false), 0);
        assert_eq!(r.expire(t0 + Duration::from_secs(4), |_| true), 0);
        assert_eq!(r.expire(t0 + Duration::from_secs(6), |_| true), 1);
    }
}
