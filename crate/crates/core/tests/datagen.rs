use std::collections::BTreeMap;

use coevo_core::datagen::{generate_stream, generate_world, leave_one_out_split, WorldConfig};
use coevo_core::rng;
use coevo_core::rqkmeans::{kmeans_pp_seed, lloyd};

/// Adjusted Rand index from the contingency table.
fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = rows.values().map(|&n| c2(n)).sum();
    let sb: f64 = cols.values().map(|&n| c2(n)).sum();
    let expected = sa * sb / c2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    (index - expected) / (max - expected)
}

#[test]
fn adjusted_rand_reference_points() {
    assert!((adjusted_rand(&[0, 0, 1, 1], &[5, 5, 7, 7]) - 1.0).abs() < 1e-12);
    // classic example: ARI of these labelings is 0.24242...
    let ari = adjusted_rand(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]);
    assert!((ari - 0.242_424_242_424_242_4).abs() < 1e-12, "{ari}");
}

#[test]
fn clusters_are_recoverable_from_content() {
    for seed in 0..5 {
        let cfg = WorldConfig { item_noise: 0.05, content_noise: 0.05, ..WorldConfig::default() };
        let world = generate_world(&cfg, seed).unwrap();
        // best of a few restarts, as any k-means user would do
        let mut best = f64::INFINITY;
        let mut labels = Vec::new();
        for restart in 0..5 {
            let mut r = rng::seeded(rng::split(seed, restart));
            let init = kmeans_pp_seed(&world.content, cfg.n_clusters, &mut r);
            let fit = lloyd(&world.content, init, cfg.n_clusters, 100);
            if fit.sse < best {
                best = fit.sse;
                labels = fit.assignment;
            }
        }
        let ari = adjusted_rand(&world.item_cluster, &labels);
        assert!(ari > 0.9, "seed {seed}: ARI {ari}");
    }
}

#[test]
fn steep_popularity_concentrates_events() {
    let cfg = WorldConfig { zipf: 1.5, ..WorldConfig::default() };
    let world = generate_world(&cfg, 11).unwrap();
    let events = generate_stream(&world, 10_000).unwrap();
    let mut counts = vec![0u64; cfg.n_items];
    for e in &events {
        counts[e.item as usize] += 1;
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let top: u64 = counts[..cfg.n_items / 10].iter().sum();
    assert!(top as f64 / events.len() as f64 > 0.5, "top-10% share {}", top as f64 / events.len() as f64);
}

#[test]
fn label_rates_match_configuration() {
    let cfg = WorldConfig::default();
    for seed in [1, 2] {
        let world = generate_world(&cfg, seed).unwrap();
        let events = generate_stream(&world, 10_000).unwrap();
        for (b, &rate) in cfg.behavior_rates.iter().enumerate() {
            let pos = events.iter().filter(|e| e.labels[b]).count() as f64 / events.len() as f64;
            assert!((pos - rate).abs() <= 0.05, "seed {seed} behaviour {b}: {pos} vs {rate}");
        }
    }
}

#[test]
fn degenerate_world_keeps_users_in_their_cluster() {
    let cfg = WorldConfig {
        zipf: 0.0,
        orthogonal_clusters: true,
        item_noise: 0.0,
        user_noise: 0.0,
        content_noise: 0.0,
        sharpness: 50.0,
        ..WorldConfig::default()
    };
    let world = generate_world(&cfg, 5).unwrap();
    for e in generate_stream(&world, 5_000).unwrap() {
        assert_eq!(world.item_cluster[e.item as usize], world.user_cluster[e.user as usize]);
    }
}

#[test]
fn split_matches_an_independent_recount_and_never_leaks() {
    let world = generate_world(&WorldConfig { n_users: 60, n_items: 40, n_clusters: 4, ..WorldConfig::default() }, 2).unwrap();
    // uneven users: drop a pseudo-random subset of events
    let events: Vec<_> = generate_stream(&world, 300).unwrap().into_iter().filter(|e| (e.timestamp * 7919) % 5 != 0).collect();
    let split = leave_one_out_split(&events).unwrap();
    let mut per_user: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for e in &events {
        per_user.entry(e.user).or_default().push(e.timestamp);
    }
    assert_eq!(split.len(), per_user.len());
    for s in &split {
        let ts = &per_user[&s.user];
        let n = ts.len();
        if n >= 3 {
            assert_eq!(s.train.len(), n - 2);
            assert_eq!(s.valid.as_ref().unwrap().timestamp, ts[n - 2]);
            assert_eq!(s.test.as_ref().unwrap().timestamp, ts[n - 1]);
        } else {
            assert_eq!(s.train.len(), n);
            assert!(s.valid.is_none() && s.test.is_none());
        }
        let mut all: Vec<u64> = s.train.iter().map(|e| e.timestamp).collect();
        all.extend(s.valid.iter().chain(s.test.iter()).map(|e| e.timestamp));
        let before = all.len();
        all.dedup();
        assert_eq!(all.len(), before);
        assert_eq!(all, *ts);
    }
}

#[test]
fn regeneration_is_bit_identical() {
    let cfg = WorldConfig::default();
    let a = generate_stream(&generate_world(&cfg, 9).unwrap(), 2_000).unwrap();
    let b = generate_stream(&generate_world(&cfg, 9).unwrap(), 2_000).unwrap();
    assert_eq!(a, b);
    let c = generate_stream(&generate_world(&cfg, 10).unwrap(), 2_000).unwrap();
    assert_ne!(a, c);
}
