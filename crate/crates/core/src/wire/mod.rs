//! Wire encoding for the reliable datagram protocol.
//!
//! A datagram is one [`MessageHeader`] followed by one or more submessages.
//! All integers are little-endian.
//!
//! ```text
//! header     magic "HPSL" | version u8 = 1 | flags u8 | guid_prefix [u8; 12]
//! submessage id u8 | flags u8 | length u16 | body (length octets)
//!
//! DATA       topic_id u32 | writer_id u32 | sequence u64 | timestamp u64
//!            | payload_len u32 | payload
//! DATA_FRAG  topic_id u32 | writer_id u32 | sequence u64 | timestamp u64
//!            | payload_len u32 | frag_index u32 | frag_count u32
//!            | frag_size u16 | total_len u32 | payload
//! HEARTBEAT  topic_id u32 | writer_id u32 | first_seq u64 | last_seq u64 | count u32
//! ACKNACK    topic_id u32 | reader_id u32 | base_seq u64 | bitmap_len u8
//!            | bitmap (ceil(bitmap_len / 8) bytes, bit i = sequence base_seq + i missing)
//! ```
//!
//! Without discovery the acknowledging side is identified by the datagram's
//! guid prefix and source address; the ACKNACK `reader_id` field names the
//! writer entity being acknowledged on that topic.

pub mod frag;
pub mod reliability;

use crate::error::{Error, Result};

pub use frag::{
    fragment_at, fragment_count, fragment_sample, Reassembler, Reassembly, ReassemblyKey,
    SampleMeta,
};
pub use reliability::{Accepted, AckOutcome, ReaderProxy, WriterReliability};

pub const MAGIC: [u8; 4] = *b"HPSL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const SUBMESSAGE_HEADER_LEN: usize = 4;
pub const DATA_FIXED_LEN: usize = 28;
pub const DATA_FRAG_FIXED_LEN: usize = 42;
pub const HEARTBEAT_LEN: usize = 28;
pub const ACKNACK_FIXED_LEN: usize = 17;
/// Fragment size used when none is configured.
pub const DEFAULT_MTU_PAYLOAD: usize = 1344;
/// Bytes a single-fragment datagram adds around its payload.
pub const FRAG_OVERHEAD: usize = HEADER_LEN + SUBMESSAGE_HEADER_LEN + DATA_FRAG_FIXED_LEN;
/// Largest gap an ACKNACK can describe in one round.
pub const MAX_BITMAP_BITS: usize = 255;

pub const ID_ACKNACK: u8 = 0x06;
pub const ID_HEARTBEAT: u8 = 0x07;
pub const ID_DATA: u8 = 0x15;
pub const ID_DATA_FRAG: u8 = 0x16;

pub type GuidPrefix = [u8; 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub flags: u8,
    pub guid_prefix: GuidPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Data {
    pub topic_id: u32,
    pub writer_id: u32,
    pub sequence: u64,
    pub timestamp: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrag {
    pub topic_id: u32,
    pub writer_id: u32,
    pub sequence: u64,
    pub timestamp: u64,
    pub frag_index: u32,
    pub frag_count: u32,
    pub frag_size: u16,
    pub total_len: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heartbeat {
    pub topic_id: u32,
    pub writer_id: u32,
    pub first_seq: u64,
    pub last_seq: u64,
    pub count: u32,
}

/// Set of missing sequences relative to a base, at most 255 wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SequenceBitmap {
    len: u8,
    bits: [u8; 32],
}

impl SequenceBitmap {
    pub fn new(len: usize) -> Self {
        Self {
            len: len.min(MAX_BITMAP_BITS) as u8,
            bits: [0; 32],
        }
    }

    pub fn len(&self) -> usize {
        usize::from(self.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len(), "bit {i} outside bitmap of {}", self.len);
        self.bits[i / 8] |= 1 << (i % 8);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len() && self.bits[i / 8] & (1 << (i % 8)) != 0
    }

    /// Indices of set bits.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.get(i))
    }

    fn byte_len(&self) -> usize {
        self.len().div_ceil(8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckNack {
    pub topic_id: u32,
    pub reader_id: u32,
    pub base_seq: u64,
    pub bitmap: SequenceBitmap,
}

impl AckNack {
    /// Sequences reported missing.
    pub fn missing(&self) -> impl Iterator<Item = u64> + '_ {
        self.bitmap.ones().map(move |i| self.base_seq + i as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submessage {
    Data(Data),
    DataFrag(DataFrag),
    Heartbeat(Heartbeat),
    AckNack(AckNack),
}

impl Submessage {
    pub fn id(&self) -> u8 {
        match self {
            Submessage::Data(_) => ID_DATA,
            Submessage::DataFrag(_) => ID_DATA_FRAG,
            Submessage::Heartbeat(_) => ID_HEARTBEAT,
            Submessage::AckNack(_) => ID_ACKNACK,
        }
    }

    /// Encoded size including the 4-byte submessage header.
    pub fn encoded_len(&self) -> usize {
        SUBMESSAGE_HEADER_LEN
            + match self {
                Submessage::Data(d) => DATA_FIXED_LEN + d.payload.len(),
                Submessage::DataFrag(f) => DATA_FRAG_FIXED_LEN + f.payload.len(),
                Submessage::Heartbeat(_) => HEARTBEAT_LEN,
                Submessage::AckNack(a) => ACKNACK_FIXED_LEN + a.bitmap.byte_len(),
            }
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        let body = self.encoded_len() - SUBMESSAGE_HEADER_LEN;
        let body =
            u16::try_from(body).map_err(|_| Error::MalformedMessage("submessage too large"))?;
        out.push(self.id());
        out.push(0);
        out.extend_from_slice(&body.to_le_bytes());
        match self {
            Submessage::Data(d) => {
                let plen = u32::try_from(d.payload.len())
                    .map_err(|_| Error::MalformedMessage("payload too large"))?;
                put_u32(out, d.topic_id);
                put_u32(out, d.writer_id);
                put_u64(out, d.sequence);
                put_u64(out, d.timestamp);
                put_u32(out, plen);
                out.extend_from_slice(&d.payload);
            }
            Submessage::DataFrag(f) => {
                put_u32(out, f.topic_id);
                put_u32(out, f.writer_id);
                put_u64(out, f.sequence);
                put_u64(out, f.timestamp);
                put_u32(out, f.payload.len() as u32);
                put_u32(out, f.frag_index);
                put_u32(out, f.frag_count);
                out.extend_from_slice(&f.frag_size.to_le_bytes());
                put_u32(out, f.total_len);
                out.extend_from_slice(&f.payload);
            }
            Submessage::Heartbeat(h) => {
                put_u32(out, h.topic_id);
                put_u32(out, h.writer_id);
                put_u64(out, h.first_seq);
                put_u64(out, h.last_seq);
                put_u32(out, h.count);
            }
            Submessage::AckNack(a) => {
                put_u32(out, a.topic_id);
                put_u32(out, a.reader_id);
                put_u64(out, a.base_seq);
                out.push(a.bitmap.len);
                out.extend_from_slice(&a.bitmap.bits[..a.bitmap.byte_len()]);
            }
        }
        Ok(())
    }

    fn decode(id: u8, body: &[u8]) -> Result<Submessage> {
        let mut r = Reader::new(body);
        let sub = match id {
            ID_DATA => {
                let topic_id = r.u32()?;
                let writer_id = r.u32()?;
                let sequence = r.u64()?;
                let timestamp = r.u64()?;
                let plen = r.u32()? as usize;
                if plen != r.remaining() {
                    return Err(Error::MalformedMessage("DATA payload length"));
                }
                Submessage::Data(Data {
                    topic_id,
                    writer_id,
                    sequence,
                    timestamp,
                    payload: r.rest().to_vec(),
                })
            }
            ID_DATA_FRAG => {
                let topic_id = r.u32()?;
                let writer_id = r.u32()?;
                let sequence = r.u64()?;
                let timestamp = r.u64()?;
                let plen = r.u32()? as usize;
                let frag_index = r.u32()?;
                let frag_count = r.u32()?;
                let frag_size = r.u16()?;
                let total_len = r.u32()?;
                if plen != r.remaining() {
                    return Err(Error::MalformedMessage("DATA_FRAG payload length"));
                }
                if frag_count == 0 || frag_index >= frag_count || frag_size == 0 {
                    return Err(Error::MalformedMessage("DATA_FRAG indices"));
                }
                if plen > usize::from(frag_size) {
                    return Err(Error::MalformedMessage("fragment larger than frag_size"));
                }
                Submessage::DataFrag(DataFrag {
                    topic_id,
                    writer_id,
                    sequence,
                    timestamp,
                    frag_index,
                    frag_count,
                    frag_size,
                    total_len,
                    payload: r.rest().to_vec(),
                })
            }
            ID_HEARTBEAT => {
                let h = Heartbeat {
                    topic_id: r.u32()?,
                    writer_id: r.u32()?,
                    first_seq: r.u64()?,
                    last_seq: r.u64()?,
                    count: r.u32()?,
                };
                r.finish()?;
                Submessage::Heartbeat(h)
            }
            ID_ACKNACK => {
                let topic_id = r.u32()?;
                let reader_id = r.u32()?;
                let base_seq = r.u64()?;
                let mut bitmap = SequenceBitmap::new(usize::from(r.u8()?));
                let bytes = r.take(bitmap.byte_len())?;
                bitmap.bits[..bytes.len()].copy_from_slice(bytes);
                let spare = bitmap.len() % 8;
                if spare != 0 && bytes[bytes.len() - 1] >> spare != 0 {
                    return Err(Error::MalformedMessage("ACKNACK bits past bitmap_len"));
                }
                r.finish()?;
                Submessage::AckNack(AckNack {
                    topic_id,
                    reader_id,
                    base_seq,
                    bitmap,
                })
            }
            _ => return Err(Error::MalformedMessage("unknown submessage id")),
        };
        Ok(sub)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub header: MessageHeader,
    pub submessages: Vec<Submessage>,
}

impl Message {
    pub fn new(guid_prefix: GuidPrefix, submessages: Vec<Submessage>) -> Self {
        Self {
            header: MessageHeader {
                flags: 0,
                guid_prefix,
            },
            submessages,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .submessages
                .iter()
                .map(Submessage::encoded_len)
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.submessages.is_empty() {
            return Err(Error::MalformedMessage("message without submessages"));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.header.flags);
        out.extend_from_slice(&self.header.guid_prefix);
        for s in &self.submessages {
            s.encode_into(&mut out)?;
        }
        Ok(out)
    }

    /// Decodes one datagram. Total over arbitrary input.
    pub fn decode(bytes: &[u8]) -> Result<Message> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::MalformedMessage("bad magic"));
        }
        if r.u8()? != VERSION {
            return Err(Error::MalformedMessage("unsupported version"));
        }
        let flags = r.u8()?;
        let mut guid_prefix = [0u8; 12];
        guid_prefix.copy_from_slice(r.take(12)?);
        let mut submessages = Vec::new();
        while r.remaining() > 0 {
            let id = r.u8()?;
            let _flags = r.u8()?;
            let len = usize::from(r.u16()?);
            let body = r.take(len)?;
            submessages.push(Submessage::decode(id, body)?);
        }
        if submessages.is_empty() {
            return Err(Error::MalformedMessage("message without submessages"));
        }
        Ok(Message {
            header: MessageHeader { flags, guid_prefix },
            submessages,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn remaining(&self) -> usize {
        self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::MalformedMessage("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::MalformedMessage("trailing bytes in submessage"))
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GUID: GuidPrefix = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

    #[test]
    fn empty_data_layout() {
        let m = Message::new(
            GUID,
            vec![Submessage::Data(Data {
                topic_id: 1,
                writer_id: 1,
                sequence: 1,
                timestamp: 0,
                payload: vec![],
            })],
        );
        let bytes = m.encode().unwrap();
        assert_eq!(&bytes[..4], b"HPSL");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[6..18], &GUID);
        assert_eq!(bytes[18], ID_DATA);
        assert_eq!(u16::from_le_bytes([bytes[20], bytes[21]]), 28);
        assert_eq!(bytes.len(), HEADER_LEN + SUBMESSAGE_HEADER_LEN + 28);
        // sequence at body offset 8, little-endian
        assert_eq!(&bytes[22 + 8..22 + 16], &1u64.to_le_bytes());
        assert_eq!(Message::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn truncation_is_malformed() {
        let m = Message::new(
            GUID,
            vec![Submessage::Heartbeat(Heartbeat {
                topic_id: 3,
                writer_id: 4,
                first_seq: 1,
                last_seq: 9,
                count: 2,
            })],
        );
        let bytes = m.encode().unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(
                Message::decode(&bytes[..cut]),
                Err(Error::MalformedMessage(_))
            ));
        }
    }

    #[test]
    fn wrong_magic_and_version_rejected() {
        let m = Message::new(
            GUID,
            vec![Submessage::Heartbeat(Heartbeat {
                topic_id: 3,
                writer_id: 4,
                first_seq: 1,
                last_seq: 0,
                count: 1,
            })],
        );
        let mut bytes = m.encode().unwrap();
        bytes[4] = 2;
        assert!(Message::decode(&bytes).is_err());
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(Message::decode(&bytes).is_err());
    }

    #[test]
    fn acknack_bitmap_round_trip() {
        let mut bm = SequenceBitmap::new(13);
        bm.set(0);
        bm.set(12);
        let a = AckNack {
            topic_id: 9,
            reader_id: 2,
            base_seq: 5,
            bitmap: bm,
        };
        let m = Message::new(GUID, vec![Submessage::AckNack(a)]);
        let bytes = m.encode().unwrap();
        assert_eq!(
            bytes.len(),
            HEADER_LEN + SUBMESSAGE_HEADER_LEN + ACKNACK_FIXED_LEN + 2
        );
        let back = Message::decode(&bytes).unwrap();
        assert_eq!(back, m);
        let Submessage::AckNack(a) = &back.submessages[0] else {
            panic!()
        };
        assert_eq!(a.missing().collect::<Vec<_>>(), vec![5, 17]);
    }

    #[test]
    fn stray_bitmap_bits_rejected() {
        let a = AckNack {
            topic_id: 1,
            reader_id: 1,
            base_seq: 1,
            bitmap: SequenceBitmap::new(3),
        };
        let mut bytes = Message::new(GUID, vec![Submessage::AckNack(a)])
            .encode()
            .unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 0b1000_0000;
        assert!(Message::decode(&bytes).is_err());
    }

    #[test]
    fn several_submessages_per_datagram() {
        let subs = vec![
            Submessage::Heartbeat(Heartbeat {
                topic_id: 1,
                writer_id: 1,
                first_seq: 1,
                last_seq: 0,
                count: 1,
            }),
            Submessage::Data(Data {
                topic_id: 1,
                writer_id: 2,
                sequence: 7,
                timestamp: 99,
                payload: vec![1, 2, 3],
            }),
        ];
        let m = Message::new(GUID, subs);
        assert_eq!(Message::decode(&m.encode().unwrap()).unwrap(), m);
    }

    #[test]
    fn empty_message_rejected() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[VERSION, 0]);
        bytes.extend_from_slice(&GUID);
        assert!(Message::decode(&bytes).is_err());
        assert!(Message::new(GUID, vec![]).encode().is_err());
    }

    #[test]
    fn oversized_data_does_not_encode() {
        let m = Message::new(
            GUID,
            vec![Submessage::Data(Data {
                topic_id: 1,
                writer_id: 1,
                sequence: 1,
                timestamp: 0,
                payload: vec![0; 70_000],
            })],
        );
        assert!(m.encode().is_err());
    }
}
