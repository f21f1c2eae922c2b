//! Random valid messages and random junk for the wire codec.

use rand::Rng;

use domainbus::wire::{
    self, AckNack, Data, DataFrag, Heartbeat, Message, SequenceBitmap, Submessage,
};

fn bytes(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random()).collect()
}

pub fn submessage(rng: &mut impl Rng) -> Submessage {
    match rng.random_range(0..4) {
        0 => Submessage::Data(Data {
            topic_id: rng.random(),
            writer_id: rng.random(),
            sequence: rng.random(),
            timestamp: rng.random(),
            payload: bytes(rng, 300),
        }),
        1 => {
            let frag_size: u16 = rng.random_range(1..=2000);
            let frag_count: u32 = rng.random_range(1..=64);
            let payload_max = usize::from(frag_size).min(300);
            Submessage::DataFrag(DataFrag {
                topic_id: rng.random(),
                writer_id: rng.random(),
                sequence: rng.random(),
                timestamp: rng.random(),
                frag_index: rng.random_range(0..frag_count),
                frag_count,
                frag_size,
                total_len: rng.random(),
                payload: bytes(rng, payload_max),
            })
        }
        2 => Submessage::Heartbeat(Heartbeat {
            topic_id: rng.random(),
            writer_id: rng.random(),
            first_seq: rng.random(),
            last_seq: rng.random(),
            count: rng.random(),
        }),
        _ => {
            let mut bitmap = SequenceBitmap::new(rng.random_range(0..=wire::MAX_BITMAP_BITS));
            for i in 0..bitmap.len() {
                if rng.random_bool(0.3) {
                    bitmap.set(i);
                }
            }
            Submessage::AckNack(AckNack {
                topic_id: rng.random(),
                reader_id: rng.random(),
                base_seq: rng.random(),
                bitmap,
            })
        }
    }
}

pub fn message(rng: &mut impl Rng) -> Message {
    let n = rng.random_range(1..=4);
    let mut m = Message::new(rng.random(), (0..n).map(|_| submessage(rng)).collect());
    m.header.flags = rng.random();
    m
}

/// Arbitrary input for the decoder: pure noise, noise behind a valid
/// header, or a valid encoding with a few bytes flipped or cut.
pub fn junk(rng: &mut impl Rng) -> Vec<u8> {
    match rng.random_range(0..3) {
        0 => bytes(rng, 256),
        1 => {
            let mut v = wire::MAGIC.to_vec();
            v.push(wire::VERSION);
            v.extend(bytes(rng, 13 + 200));
            v
        }
        _ => {
            let mut v = message(rng).encode().expect("valid message");
            for _ in 0..rng.random_range(1..=4) {
                let i = rng.random_range(0..v.len());
                v[i] = rng.random();
            }
            if rng.random_bool(0.3) {
                let cut = rng.random_range(0..v.len());
                v.truncate(cut);
            }
            v
        }
    }
}
