//! Randomised property checks of the sparse kernels against the dense and
//! brute-force references in [`crate::oracle`]. Backs the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::head::{assign_targets, decode_boxes, GtBox, Query};
use crate::metrics::{iou_bev, Box3d};
use crate::oracle::{brute_force_dilation_set, brute_force_local_max, dense_conv_same, dense_conv_stride2, dense_z_sum, DenseGrid};
use crate::sparse::{
    dilation_keep_count, height_compress, select_dilation_set, sparse_max_pool, strided_conv_downsample,
    submanifold_conv, ConvLayer, ConvMode, Coord, Dims, Duplicates, Layout, SparseTensor,
};
use crate::voxelizer::GridConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Largest deviation seen, where the check is numeric.
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random tensor with up to `max_sites` distinct sites, extents in
/// `4..=max_extent` and features in `[-1, 1)`.
pub fn random_tensor(rng: &mut impl Rng, dims: Dims, max_extent: i32, max_sites: usize, channels: usize) -> SparseTensor {
    let mut e = || rng.gen_range(4..=max_extent);
    let extent = match dims {
        Dims::Three => [e(), e(), e()],
        Dims::Two => [e(), e(), 1],
    };
    let cells = (extent[0] * extent[1] * extent[2]) as usize;
    let n = rng.gen_range(1..=max_sites.min(cells));
    let mut seen = std::collections::HashSet::new();
    let mut coords = Vec::with_capacity(n);
    while coords.len() < n {
        let c: Coord = [
            rng.gen_range(0..extent[0]),
            rng.gen_range(0..extent[1]),
            rng.gen_range(0..extent[2]),
        ];
        if seen.insert(c) {
            coords.push(c);
        }
    }
    let features = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layout = Layout::new(dims, 1, extent).expect("positive extent");
    SparseTensor::build(layout, coords, features, channels, Duplicates::Reject).expect("distinct in-range sites")
}

pub fn random_layer(rng: &mut impl Rng, dims: Dims, mode: ConvMode, c_in: usize, c_out: usize) -> ConvLayer {
    let taps = crate::sparse::kernel_volume(dims, 3);
    let w = (0..taps * c_in * c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ConvLayer::new(dims, mode, 3, c_in, c_out, w, b).expect("consistent shapes")
}

/// Largest absolute difference between `t` and the dense grid at `t`'s sites,
/// or infinity when the active sets differ.
pub fn max_dense_error(t: &SparseTensor, dense: &DenseGrid) -> f64 {
    let active: Vec<Coord> = dense.active_sites().into_iter().map(|(c, _)| c).collect();
    let mut coords = t.coords().to_vec();
    coords.sort_by_key(|c| (c[2], c[1], c[0]));
    if coords != active {
        return f64::INFINITY;
    }
    let mut err = 0.0f64;
    for (c, f) in t.iter() {
        let d = dense.at([c[0] as i64, c[1] as i64, c[2] as i64]).expect("in extent");
        for (a, b) in f.iter().zip(d) {
            err = err.max((a - b).abs() as f64);
        }
    }
    err
}

fn check(name: &'static str, trials: usize, mut f: impl FnMut(usize) -> Result<f64>, tol: f64) -> Result<CheckResult> {
    let mut r = CheckResult {
        name,
        trials,
        failures: 0,
        max_error: 0.0,
    };
    for i in 0..trials {
        let e = f(i)?;
        r.max_error = r.max_error.max(e);
        if !(e <= tol) {
            r.failures += 1;
        }
    }
    Ok(r)
}

fn dims_for(i: usize) -> Dims {
    if i % 2 == 0 {
        Dims::Three
    } else {
        Dims::Two
    }
}

/// Runs every property `trials` times from `seed`.
pub fn run_selftest(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    out.push(check(
        "submanifold conv matches dense",
        trials,
        |i| {
            let d = dims_for(i);
            let t = random_tensor(rng, d, 12, 200, 3);
            let l = random_layer(rng, d, ConvMode::Submanifold, 3, 4);
            let s = submanifold_conv(&t, &l)?;
            let closed = s.coords() == t.coords();
            let err = max_dense_error(&s, &dense_conv_same(&DenseGrid::from_sparse(&t), &l));
            Ok(if closed { err } else { f64::INFINITY })
        },
        1e-5,
    )?);

    out.push(check(
        "strided conv matches dense",
        trials,
        |i| {
            let d = dims_for(i);
            let t = random_tensor(rng, d, 12, 200, 3);
            let l = random_layer(rng, d, ConvMode::Strided, 3, 4);
            let s = strided_conv_downsample(&t, &l)?;
            Ok(max_dense_error(&s, &dense_conv_stride2(&DenseGrid::from_sparse(&t), &l)))
        },
        1e-5,
    )?);

    out.push(check(
        "height compression matches z-sum",
        trials,
        |_| {
            let t = random_tensor(rng, Dims::Three, 10, 200, 3);
            let h = height_compress(&t)?;
            let dense = dense_z_sum(&DenseGrid::from_sparse(&t));
            if dense.len() != h.len() {
                return Ok(f64::INFINITY);
            }
            let mut err = 0.0f64;
            for (c, f) in h.iter() {
                let Some(d) = dense.get(&(c[0], c[1])) else {
                    return Ok(f64::INFINITY);
                };
                for (a, b) in f.iter().zip(d) {
                    err = err.max((*a as f64 - b).abs());
                }
            }
            Ok(err)
        },
        1e-5,
    )?);

    out.push(check(
        "max pool matches local argmax",
        trials,
        |i| {
            let d = dims_for(i);
            let t = random_tensor(rng, d, 16, 150, 1);
            // coarse scores so ties occur
            let t = t.map_features(|v| (v * 4.0).round() / 4.0);
            let k = [1, 3, 5, 7][i % 4];
            let mut got = sparse_max_pool(&t, k)?;
            got.sort_by_key(|c| (c[2], c[1], c[0]));
            let sites: Vec<(Coord, f32)> = t.iter().map(|(c, f)| (*c, f[0])).collect();
            Ok(if got == brute_force_local_max(&sites, k) { 0.0 } else { 1.0 })
        },
        0.0,
    )?);

    out.push(check(
        "dilation set matches full sort",
        trials,
        |i| {
            let t = random_tensor(rng, dims_for(i), 12, 200, 2);
            let r = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9][i % 6];
            let keep = dilation_keep_count(t.len(), r);
            let mut got = select_dilation_set(&t, r);
            got.sort_by_key(|c| (c[2], c[1], c[0]));
            let sites: Vec<(Coord, Vec<f32>)> = t.iter().map(|(c, f)| (*c, f.to_vec())).collect();
            let ok = got.len() == keep && got == brute_force_dilation_set(&sites, keep);
            Ok(if ok { 0.0 } else { 1.0 })
        },
        0.0,
    )?);

    out.push(check(
        "box encode and decode invert",
        trials,
        |_| {
            let grid = GridConfig::default();
            let gt = GtBox {
                class: 0,
                center: [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..1.0)],
                size: [rng.gen_range(0.3..12.0), rng.gen_range(0.3..4.0), rng.gen_range(0.5..4.0)],
                yaw: rng.gen_range(-3.1..3.1),
                velocity: [0.0; 2],
            };
            let c = [
                ((gt.center[0] + 54.0) / 0.6) as i32 + rng.gen_range(-1..=1),
                ((gt.center[1] + 54.0) / 0.6) as i32 + rng.gen_range(-1..=1),
                0,
            ];
            let a = assign_targets(std::slice::from_ref(&gt), &[c], &grid, 8, 1, false)?;
            let p = a.positives[0].as_ref().expect("one site, one box");
            let q = Query {
                coord: p.coord,
                class: 0,
                score: 1.0,
            };
            let d = &decode_boxes(&[q], &[p.target], &grid, 8)?[0];
            let mut err = 0.0f64;
            for k in 0..3 {
                err = err.max((d.center[k] - gt.center[k]).abs()).max((d.size[k] - gt.size[k]).abs());
            }
            let dyaw = (d.yaw - gt.yaw).rem_euclid(std::f64::consts::TAU);
            Ok(err.max(dyaw.min(std::f64::consts::TAU - dyaw)))
        },
        1e-5,
    )?);

    out.push(check(
        "bev iou symmetric and bounded",
        trials,
        |_| {
            let mut b = || Box3d {
                center: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0],
                size: [rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0), 1.0],
                yaw: rng.gen_range(-3.2..3.2),
            };
            let (x, y) = (b(), b());
            let (a, c) = (iou_bev(&x, &y)?, iou_bev(&y, &x)?);
            let self_err = (iou_bev(&x, &x)? - 1.0).abs();
            let bounded = (0.0..=1.0).contains(&a);
            Ok(if bounded { (a - c).abs().max(self_err) } else { f64::INFINITY })
        },
        1e-9,
    )?);

    Ok(out)
}
