use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsedet_core::head::{
    assign_targets, classify_voxels, decode_boxes, focal_loss, focal_loss_with_logits, l1_loss_with_grad,
    l1_regression_loss, regress_boxes, select_query_voxels, GtBox, HeadConfig, HeadWeights, Query, RegressionOutput,
    FOCAL_ALPHA, FOCAL_GAMMA,
};
use sparsedet_core::selftest::random_tensor;
use sparsedet_core::sparse::{canonical_cmp, submanifold_conv, Coord, Dims};
use sparsedet_core::voxelizer::GridConfig;

const TAU: f64 = std::f64::consts::TAU;

fn random_box(rng: &mut impl Rng, class: usize) -> GtBox {
    GtBox {
        class,
        center: [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-4.0..2.0)],
        size: [rng.gen_range(0.2..15.0), rng.gen_range(0.2..4.0), rng.gen_range(0.3..4.5)],
        yaw: rng.gen_range(-TAU..TAU),
        velocity: [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)],
    }
}

/// Stride-8 voxels within two cells of the box centre.
fn neighbourhood(b: &GtBox, grid: &GridConfig) -> Vec<Coord> {
    let cx = ((b.center[0] - grid.range_min[0]) / 0.6).floor() as i32;
    let cy = ((b.center[1] - grid.range_min[1]) / 0.6).floor() as i32;
    let mut out = Vec::new();
    for dy in -2..=2 {
        for dx in -2..=2 {
            out.push([cx + dx, cy + dy, 0]);
        }
    }
    out
}

fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[test]
fn encode_decode_round_trip_500_boxes() {
    let grid = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let boxes: Vec<GtBox> = (0..500).map(|i| random_box(&mut rng, i % 10)).collect();
    let mut sites: Vec<Coord> = boxes.iter().flat_map(|b| neighbourhood(b, &grid)).collect();
    sites.sort_by(canonical_cmp);
    sites.dedup();
    let a = assign_targets(&boxes, &sites, &grid, 8, 10, true).unwrap();
    for (b, p) in boxes.iter().zip(&a.positives) {
        let p = p.as_ref().expect("every box finds a voxel");
        let q = Query {
            coord: p.coord,
            class: p.class,
            score: 1.0,
        };
        let d = &decode_boxes(&[q], &[p.target], &grid, 8).unwrap()[0];
        for k in 0..3 {
            assert!((d.center[k] - b.center[k]).abs() <= 1e-5, "centre {:?} vs {:?}", d.center, b.center);
            assert!((d.size[k] - b.size[k]).abs() <= 1e-5, "size {:?} vs {:?}", d.size, b.size);
        }
        assert!(yaw_error(d.yaw, b.yaw) <= 1e-5);
        let v = d.velocity.unwrap();
        assert!((v[0] - b.velocity[0]).abs() <= 1e-5 && (v[1] - b.velocity[1]).abs() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_box_takes_nearest_voxel(seed in any::<u64>()) {
        let grid = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng, 0);
        let mut sites = neighbourhood(&b, &grid);
        // random subset, at least one
        let n = rng.gen_range(1..=sites.len());
        sites.truncate(n);
        let u = [(b.center[0] + 54.0) / 0.6, (b.center[1] + 54.0) / 0.6];
        let d2 = |c: &Coord| (u[0] - c[0] as f64 - 0.5).powi(2) + (u[1] - c[1] as f64 - 0.5).powi(2);
        let best = sites
            .iter()
            .min_by(|a, c| d2(a).total_cmp(&d2(c)).then(canonical_cmp(a, c)))
            .unwrap();
        let a = assign_targets(std::slice::from_ref(&b), &sites, &grid, 8, 1, false).unwrap();
        prop_assert_eq!(a.positives[0].as_ref().unwrap().coord, *best);
        prop_assert_eq!(a.cls_targets.iter().filter(|&&t| t == 1.0).count(), 1);
    }

    #[test]
    fn voxel_is_positive_once_per_class(seed in any::<u64>()) {
        let grid = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_box(&mut rng, 0);
        // several boxes of two classes crowded around one spot
        let boxes: Vec<GtBox> = (0..6)
            .map(|i| {
                let mut b = base.clone();
                b.class = i % 2;
                b.center[0] += rng.gen_range(-0.5..0.5);
                b.center[1] += rng.gen_range(-0.5..0.5);
                b
            })
            .collect();
        let sites = neighbourhood(&base, &grid);
        let a = assign_targets(&boxes, &sites, &grid, 8, 2, false).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in a.positives.iter().flatten() {
            prop_assert!(seen.insert((p.coord, p.class)));
        }
        prop_assert_eq!(a.positives.iter().flatten().count(), 6);
    }
}

fn scalar_focal(p: f64, t: f64) -> f64 {
    if t == 1.0 {
        -FOCAL_ALPHA * (1.0 - p) * (1.0 - p) * p.ln()
    } else {
        -(1.0 - FOCAL_ALPHA) * p * p * (1.0 - p).ln()
    }
}

fn random_targets(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect()
}

#[test]
fn focal_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(1..200);
        let p: Vec<f32> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let t = random_targets(&mut rng, n);
        let mut want = 0.0;
        for i in 0..n {
            want += scalar_focal(p[i] as f64, t[i] as f64);
        }
        want /= n as f64;
        let got = focal_loss(&p, &t, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn l1_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.gen_range(1..40);
        let vel = rng.gen_bool(0.5);
        let mut r = || {
            let v: Vec<f32> = (0..if vel { 10 } else { 8 }).map(|_| rng.gen_range(-3.0..3.0)).collect();
            RegressionOutput::from_slice(&v)
        };
        let pred: Vec<RegressionOutput> = (0..n).map(|_| r()).collect();
        let tgt: Vec<RegressionOutput> = (0..n).map(|_| r()).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for (a, b) in pred.iter().zip(&tgt) {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                sum += (*x as f64 - y as f64).abs();
                count += 1;
            }
        }
        let got = l1_regression_loss(&pred, &tgt).unwrap();
        assert!((got - sum / count as f64).abs() <= 1e-6);
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for _ in 0..20 {
        let n = rng.gen_range(1..30);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = random_targets(&mut rng, n);
        let (_, grad) = focal_loss_with_logits(&z, &t, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
        for i in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fp = focal_loss_with_logits(&zp, &t, FOCAL_GAMMA, FOCAL_ALPHA).unwrap().0;
            let fm = focal_loss_with_logits(&zm, &t, FOCAL_GAMMA, FOCAL_ALPHA).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!(relative_error(fd, grad[i]) <= 1e-4, "{fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    for _ in 0..20 {
        let n = rng.gen_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, grad) = l1_loss_with_grad(&p, &t).unwrap();
        for i in 0..n {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[i] += h;
            pm[i] -= h;
            let fd = (l1_loss_with_grad(&pp, &t).unwrap().0 - l1_loss_with_grad(&pm, &t).unwrap().0) / (2.0 * h);
            assert!(relative_error(fd, grad[i]) <= 1e-4, "{fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn regression_at_queries_equals_full_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = HeadConfig {
        class_names: vec!["a".into(), "b".into(), "c".into()],
        class_groups: vec![0, 0, 1],
        maxpool_kernels: vec![3, 5],
        score_threshold: 0.01,
        ..Default::default()
    };
    let bev = random_tensor(&mut rng, Dims::Two, 40, 400, 6);
    let w = HeadWeights::random(&cfg, 6, &mut rng).unwrap();
    let scores = classify_voxels(&bev, &w).unwrap();
    assert!(scores.features().iter().all(|&s| s > 0.0 && s < 1.0));
    let q = select_query_voxels(&scores, &cfg).unwrap();
    assert!(!q.is_empty());
    let regs = regress_boxes(&bev, &q, &w, &cfg).unwrap();
    for g in 0..2 {
        let full = submanifold_conv(&bev, &w.reg[g]).unwrap();
        for (query, r) in q.iter().zip(&regs) {
            if cfg.group_of(query.class) == g {
                assert_eq!(r.to_vec().as_slice(), full.feature_at(&query.coord).unwrap());
            }
        }
    }
}
