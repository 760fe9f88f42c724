//! Dense and brute-force reference implementations.
//!
//! These exist to check the sparse kernels: they densify onto the full grid and
//! use plain nested loops, sharing nothing with the rulebook path except the
//! weight layout. Only suitable for small grids. Used by the test suites and by
//! the `selftest` command.

use std::collections::BTreeMap;

use crate::sparse::{ConvLayer, Coord, Dims, SparseTensor};

/// A sparse tensor scattered onto its full extent.
#[derive(Clone, Debug)]
pub struct DenseGrid {
    pub extent: [usize; 3],
    pub channels: usize,
    pub values: Vec<f32>,
    pub active: Vec<bool>,
}

impl DenseGrid {
    pub fn zeros(extent: [usize; 3], channels: usize) -> Self {
        let cells = extent[0] * extent[1] * extent[2];
        Self {
            extent,
            channels,
            values: vec![0.0; cells * channels],
            active: vec![false; cells],
        }
    }

    pub fn from_sparse(t: &SparseTensor) -> Self {
        let e = t.extent();
        let mut g = Self::zeros([e[0] as usize, e[1] as usize, e[2] as usize], t.channels());
        for (c, f) in t.iter() {
            let cell = g.cell([c[0] as i64, c[1] as i64, c[2] as i64]).unwrap();
            g.active[cell] = true;
            g.values[cell * g.channels..(cell + 1) * g.channels].copy_from_slice(f);
        }
        g
    }

    pub fn cell(&self, p: [i64; 3]) -> Option<usize> {
        if (0..3).any(|a| p[a] < 0 || p[a] >= self.extent[a] as i64) {
            return None;
        }
        Some((p[2] as usize * self.extent[1] + p[1] as usize) * self.extent[0] + p[0] as usize)
    }

    pub fn at(&self, p: [i64; 3]) -> Option<&[f32]> {
        self.cell(p)
            .map(|c| &self.values[c * self.channels..(c + 1) * self.channels])
    }

    /// Active cells as `(coordinate, feature)` pairs, `z`-major.
    pub fn active_sites(&self) -> Vec<(Coord, Vec<f32>)> {
        let mut out = Vec::new();
        for z in 0..self.extent[2] {
            for y in 0..self.extent[1] {
                for x in 0..self.extent[0] {
                    let c = self.cell([x as i64, y as i64, z as i64]).unwrap();
                    if self.active[c] {
                        out.push((
                            [x as i32, y as i32, z as i32],
                            self.values[c * self.channels..(c + 1) * self.channels].to_vec(),
                        ));
                    }
                }
            }
        }
        out
    }
}

fn tap_index(layer: &ConvLayer, dx: i64, dy: i64, dz: i64) -> usize {
    let k = layer.kernel_size() as i64;
    let r = k / 2;
    match layer.dims() {
        Dims::Three => (((dz + r) * k + (dy + r)) * k + (dx + r)) as usize,
        Dims::Two => ((dy + r) * k + (dx + r)) as usize,
    }
}

fn weight(layer: &ConvLayer, tap: usize, ci: usize, co: usize) -> f32 {
    let (cin, cout) = (layer.in_channels(), layer.out_channels());
    layer.weights()[(tap * cin + ci) * cout + co]
}

fn z_radius(layer: &ConvLayer) -> i64 {
    match layer.dims() {
        Dims::Three => layer.kernel_size() as i64 / 2,
        Dims::Two => 0,
    }
}

/// Dense "same" correlation with zero padding, evaluated at every cell. The
/// result carries the input's active mask.
pub fn dense_conv_same(input: &DenseGrid, layer: &ConvLayer) -> DenseGrid {
    let r = layer.kernel_size() as i64 / 2;
    let rz = z_radius(layer);
    let cout = layer.out_channels();
    let mut out = DenseGrid::zeros(input.extent, cout);
    out.active = input.active.clone();
    for z in 0..input.extent[2] as i64 {
        for y in 0..input.extent[1] as i64 {
            for x in 0..input.extent[0] as i64 {
                let cell = out.cell([x, y, z]).unwrap();
                let mut acc: Vec<f64> = layer.bias().iter().map(|&b| b as f64).collect();
                for dz in -rz..=rz {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if let Some(f) = input.at([x + dx, y + dy, z + dz]) {
                                let tap = tap_index(layer, dx, dy, dz);
                                for (ci, &v) in f.iter().enumerate() {
                                    for (co, a) in acc.iter_mut().enumerate() {
                                        *a += v as f64 * weight(layer, tap, ci, co) as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                for (co, a) in acc.into_iter().enumerate() {
                    out.values[cell * cout + co] = a as f32;
                }
            }
        }
    }
    out
}

/// Dense stride-2 convolution matching dilate-then-halve semantics: output
/// `u` gathers `W[o] . x[2u + j - o]` for every tap `o` and every parity
/// `j in {0, 1}` per active axis. An output cell is active when any active
/// input reaches it. Output extent is the input extent halved, rounding up.
pub fn dense_conv_stride2(input: &DenseGrid, layer: &ConvLayer) -> DenseGrid {
    let r = layer.kernel_size() as i64 / 2;
    let rz = z_radius(layer);
    let three = layer.dims() == Dims::Three;
    let half = |e: usize| e.div_ceil(2);
    let ext = [
        half(input.extent[0]),
        half(input.extent[1]),
        if three { half(input.extent[2]) } else { input.extent[2] },
    ];
    let cout = layer.out_channels();
    let mut out = DenseGrid::zeros(ext, cout);
    let parities_z: &[i64] = if three { &[0, 1] } else { &[0] };
    for uz in 0..ext[2] as i64 {
        for uy in 0..ext[1] as i64 {
            for ux in 0..ext[0] as i64 {
                let cell = out.cell([ux, uy, uz]).unwrap();
                let mut acc: Vec<f64> = layer.bias().iter().map(|&b| b as f64).collect();
                let mut hit = false;
                for dz in -rz..=rz {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let tap = tap_index(layer, dx, dy, dz);
                            for &jz in parities_z {
                                for jy in 0..2 {
                                    for jx in 0..2 {
                                        let zq = if three { 2 * uz + jz - dz } else { uz };
                                        let p = [2 * ux + jx - dx, 2 * uy + jy - dy, zq];
                                        let Some(c) = input.cell(p) else { continue };
                                        if !input.active[c] {
                                            continue;
                                        }
                                        hit = true;
                                        let f = &input.values[c * input.channels..(c + 1) * input.channels];
                                        for (ci, &v) in f.iter().enumerate() {
                                            for (co, a) in acc.iter_mut().enumerate() {
                                                *a += v as f64 * weight(layer, tap, ci, co) as f64;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out.active[cell] = hit;
                for (co, a) in acc.into_iter().enumerate() {
                    out.values[cell * cout + co] = a as f32;
                }
            }
        }
    }
    out
}

/// Applies `f` to active cells and zeroes inactive ones.
pub fn dense_map_active(g: &DenseGrid, f: impl Fn(f32) -> f32) -> DenseGrid {
    let mut out = g.clone();
    for (cell, &a) in g.active.iter().enumerate() {
        for v in &mut out.values[cell * g.channels..(cell + 1) * g.channels] {
            *v = if a { f(*v) } else { 0.0 };
        }
    }
    out
}

/// Residual block `relu(conv2(relu(conv1(x))) + x)` on the dense grid.
pub fn dense_residual_block(input: &DenseGrid, w1: &ConvLayer, w2: &ConvLayer) -> DenseGrid {
    let h = dense_map_active(&dense_conv_same(input, w1), |v| v.max(0.0));
    let h = dense_map_active(&dense_conv_same(&h, w2), |v| v);
    let mut out = h;
    for (o, i) in out.values.iter_mut().zip(&input.values) {
        *o += *i;
    }
    dense_map_active(&out, |v| v.max(0.0))
}

/// Sum over `z` of every column that has at least one active cell.
pub fn dense_z_sum(g: &DenseGrid) -> BTreeMap<(i32, i32), Vec<f64>> {
    let mut out = BTreeMap::new();
    for y in 0..g.extent[1] {
        for x in 0..g.extent[0] {
            let mut any = false;
            let mut acc = vec![0.0f64; g.channels];
            for z in 0..g.extent[2] {
                let c = g.cell([x as i64, y as i64, z as i64]).unwrap();
                if g.active[c] {
                    any = true;
                    for (a, v) in acc.iter_mut().zip(&g.values[c * g.channels..(c + 1) * g.channels]) {
                        *a += *v as f64;
                    }
                }
            }
            if any {
                out.insert((x as i32, y as i32), acc);
            }
        }
    }
    out
}

/// Quadratic local-maximum scan with the canonical tie rule: `p` is kept iff
/// no other site within Chebyshev radius `kernel_size / 2` has a higher score,
/// or an equal score and an earlier `(z, y, x)` key.
pub fn brute_force_local_max(sites: &[(Coord, f32)], kernel_size: usize) -> Vec<Coord> {
    let r = (kernel_size / 2) as i32;
    let mut keep: Vec<Coord> = sites
        .iter()
        .filter(|(p, s)| {
            !sites.iter().any(|(q, t)| {
                if q == p {
                    return false;
                }
                let near = (0..3).all(|a| (p[a] - q[a]).abs() <= r);
                let earlier = (q[2], q[1], q[0]) < (p[2], p[1], p[0]);
                near && (t > s || (t == s && earlier))
            })
        })
        .map(|(p, _)| *p)
        .collect();
    keep.sort_by_key(|p| (p[2], p[1], p[0]));
    keep
}

/// Top `keep` sites by mean absolute feature, ties to the earlier `(z, y, x)`
/// key, by full sort.
pub fn brute_force_dilation_set(sites: &[(Coord, Vec<f32>)], keep: usize) -> Vec<Coord> {
    let mut ranked: Vec<(f64, (i32, i32, i32), Coord)> = sites
        .iter()
        .map(|(c, f)| {
            let m = f.iter().map(|v| v.abs() as f64).sum::<f64>() / f.len().max(1) as f64;
            (m, (c[2], c[1], c[0]), *c)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<Coord> = ranked.into_iter().take(keep).map(|r| r.2).collect();
    out.sort_by_key(|p| (p[2], p[1], p[0]));
    out
}
