mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{page_va, random_op, Oracle};
use ptsim::analyzer::{level_distribution, View};
use ptsim::machine::{AllocKind, FRAME_SIZE};
use ptsim::policy::{PolicyEngine, SystemPolicy};
use ptsim::translation::{PscConfig, TranslationConfig, TranslationEngine};
use ptsim::{AddressSpace, AllocPolicy, Machine, MachineConfig, Perms, SnapshotDump, SocketMask};

fn machine(sockets: usize) -> Machine {
    Machine::new(MachineConfig {
        socket_count: sockets,
        frames_per_socket: 1 << 15,
        pagecache_reserve: 32,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frames_are_conserved(ops in prop::collection::vec((0usize..4, any::<bool>(), any::<bool>()), 1..400)) {
        let mut m = machine(4);
        let mut live = Vec::new();
        for (socket, pt, free) in ops {
            if free && !live.is_empty() {
                let f = live.swap_remove(socket % live.len());
                m.free_frame(f).unwrap();
            } else {
                let kind = if pt { AllocKind::PageTable } else { AllocKind::Data };
                let f = m.allocate_frame(kind, &mut AllocPolicy::fixed(socket), 0).unwrap();
                prop_assert_eq!(f.socket, socket);
                live.push(f.number);
            }
        }
        for s in 0..4 {
            let u = m.usage(s);
            prop_assert_eq!(u.free + u.data + u.pagetable, 1 << 15);
            prop_assert!(u.pagecache <= u.free);
        }
        prop_assert_eq!(m.total_data_frames() + m.total_pagetable_frames(), live.len() as u64);
    }

    #[test]
    fn interleave_is_fair(sockets in 2usize..=8, count in 1usize..2000) {
        let mut m = machine(sockets);
        let mut policy = AllocPolicy::interleave();
        let mut per = vec![0usize; sockets];
        for _ in 0..count {
            per[m.allocate_frame(AllocKind::Data, &mut policy, 0).unwrap().socket] += 1;
        }
        prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
    }

    #[test]
    fn replicas_match_reference(seed in any::<u64>(), mask_bits in 1u64..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = machine(4);
        let mask = SocketMask::from_bits(mask_bits);
        let mut space = AddressSpace::create(&mut m, AllocPolicy::interleave(), AllocPolicy::first_touch(), mask).unwrap();
        let mut oracle = Oracle::default();
        for _ in 0..300 {
            let op = random_op(&mut rng, 4);
            oracle.apply(&mut space, &mut m, op).map_err(TestCaseError::fail)?;
        }
        space.check_invariants().map_err(TestCaseError::fail)?;
        let pages: Vec<u64> = oracle.pages.keys().copied().chain(oracle.sample(&mut rng, 200)).collect();
        for page in pages {
            let bad = oracle.check_page(&space, page);
            prop_assert!(bad.is_empty(), "{:?}", bad);
        }
    }

    #[test]
    fn mask_changes_preserve_translations(seed in any::<u64>(), masks in prop::collection::vec(1u64..16, 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = machine(4);
        let mut space = AddressSpace::create(&mut m, AllocPolicy::first_touch(), AllocPolicy::interleave(), SocketMask::single(0)).unwrap();
        let mut oracle = Oracle::default();
        for _ in 0..150 {
            let op = random_op(&mut rng, 4);
            oracle.apply(&mut space, &mut m, op).map_err(TestCaseError::fail)?;
        }
        for bits in masks {
            let mask = SocketMask::from_bits(bits);
            space.set_replication_mask(&mut m, mask).unwrap();
            prop_assert_eq!(space.replication_mask(), mask);
            space.check_invariants().map_err(TestCaseError::fail)?;
            if mask.len() >= 2 {
                prop_assert!(space.nodes().all(|n| n.socket() == n.replica()));
            }
            for &page in oracle.pages.keys() {
                let bad = oracle.check_page(&space, page);
                prop_assert!(bad.is_empty(), "{:?}", bad);
            }
        }
    }

    #[test]
    fn walks_agree_with_and_without_psc(seed in any::<u64>(), socket in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = machine(4);
        let mut space = AddressSpace::create(&mut m, AllocPolicy::interleave(), AllocPolicy::interleave(), SocketMask::single(1)).unwrap();
        let mut oracle = Oracle::default();
        for _ in 0..200 {
            oracle.apply(&mut space, &mut m, random_op(&mut rng, 4)).map_err(TestCaseError::fail)?;
        }
        let mut with = TranslationEngine::new(socket, TranslationConfig::default());
        let no_psc = TranslationConfig { psc: PscConfig { enabled: false, ..Default::default() }, ..Default::default() };
        let mut without = TranslationEngine::new(socket, no_psc);
        for page in oracle.sample(&mut rng, 300) {
            let va = page_va(page);
            let a = with.translate(&m, &mut space, va, false);
            let b = without.translate(&m, &mut space, va, false);
            match (&a, &b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.data_frame, b.data_frame);
                    if let (Some(wa), Some(wb)) = (&a.walk, &b.walk) {
                        prop_assert!(wa.accesses.len() <= wb.accesses.len());
                        prop_assert_eq!(wa.cycles, wa.accesses.iter().map(|x| x.cycles).sum::<u64>());
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "PSC changed the outcome: {:?} vs {:?}", a, b),
            }
        }
    }

    #[test]
    fn dumps_round_trip_and_sum(seed in any::<u64>(), mask_bits in 1u64..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = machine(4);
        let mut space = AddressSpace::create(&mut m, AllocPolicy::interleave(), AllocPolicy::interleave(), SocketMask::from_bits(mask_bits)).unwrap();
        let mut oracle = Oracle::default();
        for _ in 0..100 {
            oracle.apply(&mut space, &mut m, random_op(&mut rng, 4)).map_err(TestCaseError::fail)?;
        }
        let dump = space.snapshot_dump();
        let text = dump.to_jsonl();
        let parsed = SnapshotDump::from_jsonl(&text).unwrap();
        prop_assert_eq!(&parsed, &dump);
        prop_assert_eq!(parsed.to_jsonl(), text);
        let dist = level_distribution(&dump, View::Merged);
        for level in 1..=4u8 {
            let nodes = dump.nodes.iter().filter(|n| n.level == level).count() as u64;
            prop_assert_eq!(dist.nodes_at_level(level), nodes);
            for s in 0..4 {
                let cell = dist.cell(level, s);
                let valid: u64 = dump.nodes.iter().filter(|n| n.level == level && n.socket == s).map(|n| n.entries.len() as u64).sum();
                prop_assert_eq!(cell.valid(), valid);
            }
        }
    }
}

#[test]
fn fixed_socket_policy_pins_every_frame() {
    for target in 0..4 {
        let mut m = machine(4);
        let policy = PolicyEngine::new(SystemPolicy::FixedSocket(target));
        let mut space = AddressSpace::create(
            &mut m,
            policy.pt_policy_for(AllocPolicy::first_touch()),
            AllocPolicy::first_touch(),
            policy.initial_mask(SocketMask::all(4), SocketMask::all(4)),
        )
        .unwrap();
        for s in 0..4 {
            space.map(&mut m, (s as u64) << 33, 64 * FRAME_SIZE, Perms::RW, s).unwrap();
        }
        policy.request_mask(&mut m, &mut space, SocketMask::parse("0-3").unwrap()).unwrap();
        assert!(space.snapshot_dump().nodes.iter().all(|n| n.socket == target));
    }
}
