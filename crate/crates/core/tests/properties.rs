mod support;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use domainbus::bench::{compute_stats, nearest_rank};
use domainbus::daemon::ModeState;
use domainbus::heap::{EntityKind, SharedHeap};
use domainbus::runtime::{Runtime, TimeBoundPolicy};
use domainbus::transport::{Endpoint, NetConfig, SimNetwork, Transport};
use domainbus::wire::{
    fragment_count, fragment_sample, Message, Reassembler, Reassembly, SampleMeta, Submessage,
};
use domainbus::Error;
use support::{alloc_model, reference_percentile, wire_gen, ReferenceDetector};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encode_then_decode_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = wire_gen::message(&mut rng);
        let bytes = m.encode().unwrap();
        prop_assert_eq!(bytes.len(), m.encoded_len());
        prop_assert_eq!(Message::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        match Message::decode(&bytes) {
            Ok(m) => prop_assert_eq!(m.encode().unwrap(), bytes),
            Err(e) => prop_assert!(matches!(e, Error::MalformedMessage(_))),
        }
    }

    #[test]
    fn prefixes_decode_to_prefixes(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = wire_gen::message(&mut rng);
        let bytes = m.encode().unwrap();
        let cut = cut.index(bytes.len());
        if let Ok(p) = Message::decode(&bytes[..cut]) {
            prop_assert!(p.submessages.len() < m.submessages.len());
            prop_assert_eq!(&p.submessages[..], &m.submessages[..p.submessages.len()]);
        }
    }

    #[test]
    fn mutated_encodings_never_panic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            let _ = Message::decode(&wire_gen::junk(&mut rng));
        }
    }

    #[test]
    fn fragments_reassemble_under_shuffle_and_duplication(
        len in 1usize..40_000,
        frag in 1usize..3000,
        seed in any::<u64>(),
    ) {
        let payload: Vec<u8> = (0..len).map(|i| (i * 131 + 7) as u8).collect();
        let meta = SampleMeta { topic_id: 3, writer_id: 4, sequence: 5, timestamp: 6 };
        let subs = fragment_sample(meta, &payload, frag);
        let expected = if len <= frag { 1 } else { len.div_ceil(frag) };
        prop_assert_eq!(subs.len(), expected);
        prop_assert_eq!(fragment_count(len, frag), expected);
        if len <= frag {
            let [Submessage::Data(d)] = subs.as_slice() else { panic!("expected one DATA") };
            prop_assert_eq!(&d.payload, &payload);
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frags: Vec<_> = subs
            .iter()
            .map(|s| match s { Submessage::DataFrag(f) => f.clone(), other => panic!("{other:?}") })
            .collect();
        let dups: Vec<_> = frags.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        frags.extend(dups);
        frags.shuffle(&mut rng);
        let mut re = Reassembler::new(Duration::from_secs(5));
        let mut complete = 0;
        for f in &frags {
            match re.insert([1; 12], f, Instant::now()).unwrap() {
                Reassembly::Complete(bytes) => {
                    complete += 1;
                    prop_assert_eq!(&bytes, &payload);
                }
                Reassembly::Incomplete | Reassembly::Duplicate => {}
            }
        }
        prop_assert_eq!(complete, 1);
        prop_assert_eq!(re.pending(), 0);
    }

    #[test]
    fn allocator_matches_first_fit_model(seed in any::<u64>()) {
        let r = alloc_model::run_workload(seed, 1500, None, TimeBoundPolicy::fail(support::test_bound()));
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn advisory_scribbles_do_not_reach_library_state(seed in any::<u64>()) {
        let r = alloc_model::run_workload(seed, 800, Some(2), TimeBoundPolicy::fail(support::test_bound()));
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn heap_refcounts_match_model(ops in proptest::collection::vec((0u8..5, 0usize..8, 1u32..4), 1..300)) {
        let rt = Runtime::new(TimeBoundPolicy::fail(support::test_bound()));
        let heap: SharedHeap<u32> = SharedHeap::new(rt.clone(), 8);
        let mut ctx = rt.daemon_context();
        let pid = rt.register_process().pid;
        // (descriptor, refcount, holds)
        let mut model: Vec<(domainbus::heap::Descriptor, u32, u32)> = Vec::new();
        let mut freed = Vec::new();
        for (op, pick, n) in ops {
            let i = if model.is_empty() { None } else { Some(pick % model.len()) };
            match (op, i) {
                (0, _) | (_, None) => match ctx.call(|c| heap.allocate(c, EntityKind::Sample, pid, 0)) {
                    Ok(d) => model.push((d, 0, 1)),
                    Err(Error::HeapExhausted(_)) => prop_assert_eq!(model.len(), 8),
                    Err(e) => panic!("{e}"),
                },
                (1, Some(i)) => {
                    let now = ctx.call(|c| heap.retain_sample(c, model[i].0, n)).unwrap();
                    model[i].1 += n;
                    prop_assert_eq!(now, model[i].1);
                }
                (2, Some(i)) => {
                    let r = ctx.call(|c| heap.release_sample(c, model[i].0));
                    if model[i].1 == 0 {
                        prop_assert!(matches!(r, Err(Error::UnderflowViolation)));
                    } else {
                        model[i].1 -= 1;
                        let r = r.unwrap();
                        prop_assert_eq!(r.remaining, model[i].1);
                        prop_assert_eq!(r.freed.is_some(), model[i].1 == 0 && model[i].2 == 0);
                    }
                }
                (3, Some(i)) => {
                    ctx.call(|c| heap.hold_sample(c, model[i].0)).unwrap();
                    model[i].2 += 1;
                }
                (_, Some(i)) => {
                    let r = ctx.call(|c| heap.unhold_sample(c, model[i].0));
                    if model[i].2 == 0 {
                        prop_assert!(matches!(r, Err(Error::UnderflowViolation)));
                    } else {
                        model[i].2 -= 1;
                        prop_assert_eq!(r.unwrap().freed.is_some(), model[i].1 == 0 && model[i].2 == 0);
                    }
                }
            }
            let (gone, kept): (Vec<_>, Vec<_>) = model.drain(..).partition(|(_, r, h)| *r == 0 && *h == 0);
            freed.extend(gone.into_iter().map(|(d, _, _)| d));
            model = kept;
            let sum: u64 = model.iter().map(|(_, r, _)| u64::from(*r)).sum();
            prop_assert_eq!(heap.live_refcount(), sum);
            prop_assert_eq!(heap.live(EntityKind::Sample), model.len());
            let (retained, released) = heap.reference_totals();
            prop_assert_eq!(retained - released, sum);
        }
        for d in freed {
            prop_assert!(matches!(ctx.call(|c| heap.retain_sample(c, d, 1)), Err(Error::StaleDescriptor)));
        }
        let stats = rt.stats();
        prop_assert_eq!((stats.time_bound_violations, stats.context_violations), (0, 0));
    }

    #[test]
    fn percentile_matches_reference(v in proptest::collection::vec(0u64..1_000_000, 1..400), p in 0.0f64..=100.0) {
        let mut sorted = v.clone();
        sorted.sort_unstable();
        prop_assert_eq!(nearest_rank(&sorted, p).unwrap(), reference_percentile(&v, p));
        let s = compute_stats(&v, 0.1).unwrap();
        prop_assert_eq!(s.p50_ns, reference_percentile(&v, 50.0));
        prop_assert_eq!(s.p99_ns, reference_percentile(&v, 99.0));
        prop_assert!(s.trimmed_mean_ns <= s.mean_ns + 1e-6);
    }

    #[test]
    fn mode_detector_matches_reference(rates in proptest::collection::vec((50.0f64..400_000.0, 1usize..400), 1..6)) {
        let mut real = ModeState::new(10_000.0, 5_000.0).unwrap();
        let mut reference = ReferenceDetector::new(10_000.0, 5_000.0);
        let mut t = 1_000u64;
        for (hz, n) in rates {
            for a in support::arrivals(hz, n, t) {
                real.update(a);
                reference.arrive(a);
                prop_assert_eq!(real.mode(), reference.mode());
                t = a;
            }
        }
        prop_assert_eq!(real.switches(), u64::from(reference.transitions));
    }

    #[test]
    fn simulator_is_deterministic_per_seed(seed in any::<u64>(), loss in 0.0f64..0.5) {
        let run = || {
            let net = SimNetwork::new(NetConfig { loss_prob: loss, reorder_prob: 0.2, seed, ..NetConfig::default() }).unwrap();
            net.record_trace();
            let a = net.attach();
            let b = net.attach();
            for i in 0..64u8 {
                a.send(b.local_endpoint(), &[i]).unwrap();
            }
            let got: Vec<u8> = b.poll_rx(usize::MAX).iter().map(|d| d.bytes[0]).collect();
            (net.trace(), net.stats().lost, got)
        };
        let (t1, l1, _) = run();
        let (t2, l2, _) = run();
        prop_assert_eq!(t1, t2);
        prop_assert_eq!(l1, l2);
    }
}

#[test]
fn datagrams_to_unknown_sim_node_are_lost() {
    let net = SimNetwork::new(NetConfig::default()).unwrap();
    let a = net.attach();
    a.send(Endpoint::Sim(99), b"x").unwrap();
    assert_eq!(net.stats().lost, 1);
    let udp = Endpoint::Udp("127.0.0.1:9".parse().unwrap());
    assert!(a.send(udp, b"x").is_err());
    assert!(a.send(Endpoint::Sim(0), &vec![0; 4096]).is_err());
}

#[test]
fn reassembler_rejects_conflicting_metadata() {
    let meta = SampleMeta {
        topic_id: 1,
        writer_id: 1,
        sequence: 1,
        timestamp: 0,
    };
    let payload = vec![7u8; 5000];
    let subs = fragment_sample(meta, &payload, 1000);
    let Submessage::DataFrag(mut f) = subs[0].clone() else {
        panic!()
    };
    let mut re = Reassembler::new(Duration::from_secs(5));
    re.insert([0; 12], &f, Instant::now()).unwrap();
    f.frag_index = 1;
    f.total_len = 6000;
    f.frag_count = 6;
    assert!(matches!(
        re.insert([0; 12], &f, Instant::now()),
        Err(Error::FragMetadataMismatch)
    ));
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in fragment_sample(meta, &payload, 1000) {
        if let Submessage::DataFrag(f) = s {
            *counts.entry(f.payload.len()).or_default() += 1;
        }
    }
    assert_eq!(counts, HashMap::from([(1000, 5)]));
}
