use coevo_core::rng;
use coevo_core::rqkmeans::{assign_unique, fit, fit_with_stats, lloyd};
use coevo_core::CodebookSpec;
use rand::Rng;

fn cloud(seed: u64, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| (0..dim).map(|_| scale * rng::normal(&mut r)).collect()).collect()
}

/// Textbook Lloyd: full reassignment and mean update every iteration.
fn lloyd_oracle(points: &[Vec<f64>], init: &[Vec<f64>], iters: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut cents = init.to_vec();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = cents.iter().map(|c| c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
                (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))).unwrap()
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, cent) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            assert!(!members.is_empty(), "oracle fixture must not empty a cluster");
            for (j, v) in cent.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    (cents, assign)
}

#[test]
fn lloyd_matches_textbook_iteration() {
    for seed in 0..10 {
        // four separated blobs, seeded with one point from each
        let mut r = rng::seeded(seed);
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let pts: Vec<Vec<f64>> = (0..80)
            .map(|i| {
                let c = centres[i % 4];
                vec![c[0] + 2.0 * rng::normal(&mut r), c[1] + 2.0 * rng::normal(&mut r)]
            })
            .collect();
        let init: Vec<Vec<f64>> = (0..4).map(|i| pts[i].clone()).collect();
        let (want_c, want_a) = lloyd_oracle(&pts, &init, 30);
        let fit = lloyd(&pts, init.concat(), 4, 30);
        assert_eq!(fit.assignment, want_a);
        for (got, want) in fit.centroids.chunks(2).zip(&want_c) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        let sse: f64 = pts.iter().zip(&want_a).map(|(p, &a)| p.iter().zip(&want_c[a]).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()).sum();
        assert!((fit.sse - sse).abs() < 1e-9 * sse.max(1.0));
    }
}

#[test]
fn residual_mse_never_increases_across_levels() {
    for seed in 0..20 {
        let pts = cloud(seed, 120, 6, 1.0 + seed as f64 * 0.1);
        let spec = CodebookSpec::new(4, 8, 6).unwrap();
        let (cb, sse) = fit_with_stats(&pts, spec, 20, seed).unwrap();
        let mse = cb.level_mse(&pts).unwrap();
        let total: f64 = pts.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / pts.len() as f64;
        assert!(mse[0] <= total);
        for w in mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {mse:?}");
        }
        for (l, s) in sse.iter().enumerate() {
            assert!((s / pts.len() as f64 - mse[l]).abs() < 1e-9);
        }
    }
}

#[test]
fn few_distinct_points_give_zero_first_level_error() {
    for seed in 0..20 {
        let mut r = rng::seeded(seed);
        let k = 8;
        let distinct = r.gen_range(1..=k);
        let base = cloud(seed + 50, distinct, 3, 5.0);
        let pts: Vec<Vec<f64>> = (0..60).map(|i| base[i % distinct].clone()).collect();
        let cb = fit(&pts, CodebookSpec::new(2, k, 3).unwrap(), 10, seed).unwrap();
        let mse = cb.level_mse(&pts).unwrap();
        assert_eq!(mse[0], 0.0, "seed {seed} distinct {distinct}");
        assert_eq!(mse[1], 0.0);
    }
}

#[test]
fn fitting_is_bit_reproducible() {
    let pts = cloud(3, 90, 5, 1.0);
    let spec = CodebookSpec::new(3, 6, 5).unwrap();
    let a = fit(&pts, spec, 15, 42).unwrap();
    let b = fit(&pts, spec, 15, 42).unwrap();
    for l in 0..3 {
        let bits_a: Vec<u64> = a.level(l).iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.level(l).iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert_ne!(fit(&pts, spec, 15, 43).unwrap(), a);
}

#[test]
fn reconstruction_error_is_the_last_residual() {
    let pts = cloud(8, 50, 4, 1.0);
    let cb = fit(&pts, CodebookSpec::new(3, 5, 4).unwrap(), 20, 1).unwrap();
    let mut total = 0.0;
    for p in &pts {
        let (sid, residual) = cb.tokenize_with_residual(p).unwrap();
        let rec = cb.reconstruct(&sid).unwrap();
        for ((x, y), e) in p.iter().zip(&rec).zip(&residual) {
            assert!((x - y - e).abs() < 1e-12);
        }
        total += residual.iter().map(|v| v * v).sum::<f64>();
    }
    let mse = cb.level_mse(&pts).unwrap();
    assert!((total / pts.len() as f64 - mse[2]).abs() < 1e-12);
}

#[test]
fn unique_assignment_is_injective_and_keeps_free_greedy_codes() {
    for seed in 0..10 {
        let base = cloud(seed, 20, 3, 1.0);
        // every point twice, so half of them collide
        let pts: Vec<Vec<f64>> = base.iter().chain(base.iter()).cloned().collect();
        let cb = fit(&pts, CodebookSpec::new(2, 8, 3).unwrap(), 10, seed).unwrap();
        let ua = assign_unique(&cb, &pts).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for s in &ua.sids {
            assert!(seen.insert(s.clone()), "duplicate SID {s}");
        }
        assert!(ua.collisions >= 20);
        // an item keeps its greedy code whenever no earlier item holds it
        let mut taken = std::collections::BTreeSet::new();
        for (p, s) in pts.iter().zip(&ua.sids) {
            let g = cb.tokenize(p).unwrap();
            if !taken.contains(&g) {
                assert_eq!(&g, s);
            }
            taken.insert(s.clone());
        }
    }
    let cb = fit(&cloud(1, 10, 2, 1.0), CodebookSpec::new(1, 4, 2).unwrap(), 5, 1).unwrap();
    assert!(assign_unique(&cb, &cloud(2, 5, 2, 1.0)).is_err());
}
