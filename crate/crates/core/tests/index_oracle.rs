mod support;

use coevo_core::index::{BeamIndex, IndexConfig};
use coevo_core::SidSequence;
use proptest::prelude::*;
use rand::Rng;
use support::{random_prediction, same_state, sid_pool, to_core, ReferenceIndex};

fn run(seed: u64, updates: usize, cfg: IndexConfig) -> (BeamIndex, ReferenceIndex) {
    let mut r = support::seeded(seed);
    let pool = sid_pool(&mut r, 200, 3, 8);
    let mut index = BeamIndex::new(cfg.capacity).unwrap();
    let mut reference = ReferenceIndex::new(cfg.gamma, cfg.delta_t, cfg.capacity, cfg.offset);
    let mut now = 0u64;
    for step in 0..updates {
        let item = r.gen_range(0..30u32);
        let pred = random_prediction(&mut r, &pool, 10);
        // Mostly small clock increments (fresh conflicts), sometimes
        // large jumps (stale conflicts), sometimes none.
        now += match r.gen_range(0..10) {
            0 => 0,
            1 => r.gen_range(cfg.delta_t..3 * cfg.delta_t),
            _ => r.gen_range(1..cfg.delta_t / 8),
        };
        index.update(item, &to_core(&pred), now, &cfg).unwrap();
        reference.update(item, &pred, now);
        index.check_invariants().unwrap();
        if let Err(e) = same_state(&index, &reference) {
            panic!("diverged at update {step}: {e}");
        }
    }
    (index, reference)
}

#[test]
fn five_thousand_updates_match_reference() {
    let cfg = IndexConfig { gamma: 0.9, delta_t: 200, capacity: 8, offset: 100.0 };
    let (index, reference) = run(2024, 5000, cfg);
    assert!(reference.stale_conflicts > 100, "stale {}", reference.stale_conflicts);
    assert!(reference.fresh_conflicts > 100, "fresh {}", reference.fresh_conflicts);
    assert!(index.link_count() > 0);
}

#[test]
fn boundary_momentum_and_capacity_variants_match_reference() {
    for (seed, gamma, capacity) in [(1, 0.0, 1), (2, 1.0, 3), (3, 0.5, 16)] {
        let cfg = IndexConfig { gamma, delta_t: 64, capacity, offset: 100.0 };
        run(seed, 1500, cfg);
    }
}

#[test]
fn link_exactly_delta_t_old_is_still_fresh() {
    let cfg = IndexConfig { gamma: 0.9, delta_t: 10, capacity: 4, offset: 100.0 };
    let s = SidSequence::new(vec![1, 2]);
    let mut idx = BeamIndex::new(4).unwrap();
    idx.update(0, &[(s.clone(), vec![1.0, 1.0])], 5, &cfg).unwrap();
    idx.update(1, &[(s.clone(), vec![0.0, 0.0])], 15, &cfg).unwrap();
    assert_eq!(idx.reverse_lookup(&s), Some((0, 5)));
    idx.update(1, &[(s.clone(), vec![0.0, 0.0])], 16, &cfg).unwrap();
    assert_eq!(idx.reverse_lookup(&s), Some((1, 16)));
    assert!(idx.forward_lookup(0).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_survive_arbitrary_update_sequences(
        ops in prop::collection::vec(
            (0u32..6, prop::collection::vec((0u16..4, 0u16..4, 0.0f64..6.0), 1..6), 0u64..30),
            1..80,
        ),
        capacity in 1usize..5,
    ) {
        let cfg = IndexConfig { gamma: 0.7, delta_t: 20, capacity, offset: 100.0 };
        let mut idx = BeamIndex::new(capacity).unwrap();
        let mut now = 0;
        for (item, raw, dt) in ops {
            now += dt;
            let mut pred: Vec<(SidSequence, Vec<f64>)> = Vec::new();
            for (a, b, loss) in raw {
                let sid = SidSequence::new(vec![a, b]);
                if !pred.iter().any(|(s, _)| *s == sid) {
                    pred.push((sid, vec![loss, loss / 2.0]));
                }
            }
            let before = idx.snapshot();
            let delta = idx.update(item, &pred, now, &cfg).unwrap();
            idx.check_invariants().unwrap();
            prop_assert!(idx.forward_lookup(item).len() <= capacity);
            // Everything added is owned by its item now; everything removed
            // was owned by that item before.
            for (i, s) in &delta.added {
                prop_assert_eq!(idx.reverse_lookup(s).map(|o| o.0), Some(*i));
            }
            for (i, s) in &delta.removed {
                prop_assert_eq!(before.reverse_lookup(s).map(|o| o.0), Some(*i));
            }
            // Other items only ever lose links.
            for other in before.items().filter(|&o| o != item) {
                for e in idx.forward_lookup(other) {
                    prop_assert!(before.forward_lookup(other).contains(&e));
                }
            }
        }
    }
}
