//! Submanifold and strided sparse convolution.
//!
//! Both modes go through a [`Rulebook`]: for every output site the list of
//! `(kernel offset, input site)` pairs that contribute to it, ordered by offset
//! then by canonical input order. Each output row is accumulated strictly in
//! that order, so results are bit-identical regardless of how output rows are
//! distributed across threads.

use std::collections::HashSet;

use rayon::prelude::*;

use super::tensor::{canonical_cmp, Coord, Dims, Layout, SparseTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Dilate active sites to the kernel footprint, then halve coordinates.
    Strided,
}

/// What a voxel left out of the dilation set contributes to a strided layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrunedContribution {
    /// Only the center tap, landing on the voxel's own halved coordinate.
    #[default]
    CenterOnly,
    /// Nothing at all.
    Drop,
}

/// Weights and bias of one sparse convolution.
///
/// Weights are laid out `[offset][c_in][c_out]`, with offsets enumerated by
/// [`kernel_offsets`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    dims: Dims,
    mode: ConvMode,
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    prune_ratio: f64,
    pruned: PrunedContribution,
}

impl ConvLayer {
    pub fn new(
        dims: Dims,
        mode: ConvMode,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        let taps = kernel_volume(dims, kernel_size);
        let expected = taps * in_channels * out_channels;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel_size} ({taps} taps) x {in_channels} x {out_channels} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            dims,
            mode,
            kernel_size,
            in_channels,
            out_channels,
            weights,
            bias,
            prune_ratio: 0.0,
            pruned: PrunedContribution::CenterOnly,
        })
    }

    pub fn zeros(dims: Dims, mode: ConvMode, kernel_size: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let n = kernel_volume(dims, kernel_size) * c_in * c_out;
        Self::new(dims, mode, kernel_size, c_in, c_out, vec![0.0; n], vec![0.0; c_out])
    }

    pub fn with_prune_ratio(mut self, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidConfig(format!("prune ratio {ratio} outside [0, 1)")));
        }
        self.prune_ratio = ratio;
        Ok(self)
    }

    pub fn with_pruned_contribution(mut self, pruned: PrunedContribution) -> Self {
        self.pruned = pruned;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn mode(&self) -> ConvMode {
        self.mode
    }
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
    pub fn prune_ratio(&self) -> f64 {
        self.prune_ratio
    }
    pub fn pruned_contribution(&self) -> PrunedContribution {
        self.pruned
    }

    /// Weight matrix (`c_in x c_out`, row-major) of one kernel tap.
    pub fn tap(&self, offset: usize) -> &[f32] {
        let n = self.in_channels * self.out_channels;
        &self.weights[offset * n..(offset + 1) * n]
    }

    fn check_input(&self, t: &SparseTensor) -> Result<()> {
        if t.dims() != self.dims {
            return Err(Error::DimMismatch {
                expected: self.dims.count(),
                actual: t.dims().count(),
            });
        }
        if t.channels() != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                actual: t.channels(),
            });
        }
        Ok(())
    }
}

pub fn kernel_volume(dims: Dims, kernel_size: usize) -> usize {
    kernel_size.pow(dims.count() as u32)
}

/// Kernel offsets centred on zero, `z` outermost and `x` fastest. The centre
/// tap sits at index `len / 2`.
pub fn kernel_offsets(dims: Dims, kernel_size: usize) -> Vec<Coord> {
    let r = (kernel_size / 2) as i32;
    let zr = if dims == Dims::Three { r } else { 0 };
    let mut out = Vec::with_capacity(kernel_volume(dims, kernel_size));
    for dz in -zr..=zr {
        for dy in -r..=r {
            for dx in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

#[inline]
fn add(a: &Coord, b: &Coord) -> Coord {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn halve(c: &Coord) -> Coord {
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

/// The realised `(input site, kernel offset, output site)` triples of a layer,
/// grouped by output site.
#[derive(Clone, Debug, Default)]
pub struct Rulebook {
    out_coords: Vec<Coord>,
    starts: Vec<usize>,
    entries: Vec<(u32, u32)>,
}

impl Rulebook {
    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    /// Number of realised triples.
    pub fn pairs(&self) -> usize {
        self.entries.len()
    }

    /// `(offset index, input index)` pairs feeding output `i`, in accumulation order.
    pub fn contributions(&self, i: usize) -> &[(u32, u32)] {
        &self.entries[self.starts[i]..self.starts[i + 1]]
    }

    pub fn submanifold(t: &SparseTensor, kernel_size: usize) -> Self {
        let offsets = kernel_offsets(t.dims(), kernel_size);
        let mut starts = Vec::with_capacity(t.len() + 1);
        let mut entries = Vec::new();
        for p in t.coords() {
            starts.push(entries.len());
            for (k, o) in offsets.iter().enumerate() {
                if let Some(q) = t.index_of(&add(p, o)) {
                    entries.push((k as u32, q as u32));
                }
            }
        }
        starts.push(entries.len());
        Self {
            out_coords: t.coords().to_vec(),
            starts,
            entries,
        }
    }

    /// Rulebook of a stride-2 layer. `eligible[q]` says whether input `q` may
    /// dilate; ineligible inputs contribute per `pruned`.
    pub fn strided(
        t: &SparseTensor,
        kernel_size: usize,
        eligible: &[bool],
        pruned: PrunedContribution,
    ) -> Self {
        let offsets = kernel_offsets(t.dims(), kernel_size);
        let center = offsets.len() / 2;
        let out_layout = t.layout().downsampled();

        let mut triples: Vec<(Coord, u32, u32)> = Vec::new();
        for (q, c) in t.coords().iter().enumerate() {
            if eligible[q] {
                for (k, o) in offsets.iter().enumerate() {
                    let u = halve(&add(c, o));
                    if out_layout.contains(&u) {
                        triples.push((u, k as u32, q as u32));
                    }
                }
            } else if pruned == PrunedContribution::CenterOnly {
                triples.push((halve(c), center as u32, q as u32));
            }
        }
        triples.sort_unstable_by(|a, b| {
            canonical_cmp(&a.0, &b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut out_coords = Vec::new();
        let mut starts = Vec::new();
        let mut entries = Vec::with_capacity(triples.len());
        for (u, k, q) in triples {
            if out_coords.last() != Some(&u) {
                out_coords.push(u);
                starts.push(entries.len());
            }
            entries.push((k, q));
        }
        starts.push(entries.len());
        Self {
            out_coords,
            starts,
            entries,
        }
    }
}

/// Accumulates one output row: bias first, then every contribution in rulebook order.
#[inline]
/// Sums in f64 and rounds once, so error does not grow with the number of taps.
fn accumulate_row(out: &mut [f32], acc: &mut Vec<f64>, layer: &ConvLayer, input: &SparseTensor, contribs: &[(u32, u32)]) {
    acc.clear();
    acc.extend(layer.bias.iter().map(|&b| b as f64));
    let c_out = layer.out_channels;
    for &(k, q) in contribs {
        let w = layer.tap(k as usize);
        let f = input.row(q as usize);
        for (ci, &x) in f.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let x = x as f64;
            let wrow = &w[ci * c_out..(ci + 1) * c_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += x * wv as f64;
            }
        }
    }
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = *a as f32;
    }
}

fn run_rulebook(input: &SparseTensor, layer: &ConvLayer, rb: &Rulebook) -> Vec<f32> {
    let c_out = layer.out_channels;
    let mut out = vec![0.0f32; rb.out_coords.len() * c_out];
    if c_out == 0 {
        return out;
    }
    out.par_chunks_mut(c_out)
        .enumerate()
        .for_each_init(Vec::new, |acc, (i, row)| accumulate_row(row, acc, layer, input, rb.contributions(i)));
    out
}

/// Submanifold convolution. The output has exactly the input's sites; at site
/// `p` it is `bias + sum_o W[o] . f(p + o)` over active neighbours `p + o`.
pub fn submanifold_conv(t: &SparseTensor, layer: &ConvLayer) -> Result<SparseTensor> {
    submanifold_conv_with_rulebook(t, layer).map(|(out, _)| out)
}

pub(crate) fn submanifold_conv_with_rulebook(
    t: &SparseTensor,
    layer: &ConvLayer,
) -> Result<(SparseTensor, Rulebook)> {
    if layer.mode != ConvMode::Submanifold {
        return Err(Error::InvalidConfig("submanifold_conv needs a submanifold layer".into()));
    }
    layer.check_input(t)?;
    let rb = Rulebook::submanifold(t, layer.kernel_size);
    let features = run_rulebook(t, layer, &rb);
    let out = t.with_features(features, layer.out_channels)?;
    Ok((out, rb))
}

/// Evaluates a submanifold layer only at the listed input sites, returning one
/// `c_out`-wide row per site.
pub fn submanifold_conv_at(t: &SparseTensor, layer: &ConvLayer, sites: &[usize]) -> Result<Vec<f32>> {
    if layer.mode != ConvMode::Submanifold {
        return Err(Error::InvalidConfig("site evaluation needs a submanifold layer".into()));
    }
    layer.check_input(t)?;
    let offsets = kernel_offsets(t.dims(), layer.kernel_size);
    let c_out = layer.out_channels;
    let mut out = vec![0.0f32; sites.len() * c_out];
    let mut acc = Vec::with_capacity(c_out);
    for (row, &s) in out.chunks_exact_mut(c_out.max(1)).zip(sites) {
        let p = t.coords()[s];
        let contribs: Vec<(u32, u32)> = offsets
            .iter()
            .enumerate()
            .filter_map(|(k, o)| t.index_of(&add(&p, o)).map(|q| (k as u32, q as u32)))
            .collect();
        accumulate_row(row, &mut acc, layer, t, &contribs);
    }
    Ok(out)
}

/// Number of sites kept for dilation: `ceil((1 - ratio) * n)`.
///
/// Products that land within rounding noise of an integer are snapped to it,
/// so e.g. `(1 - 0.7) * 10` gives 3 rather than 4.
pub fn dilation_keep_count(n: usize, ratio: f64) -> usize {
    let x = (1.0 - ratio) * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Channel-averaged absolute feature magnitude of every site.
pub fn site_magnitudes(t: &SparseTensor) -> Vec<f32> {
    let c = t.channels().max(1) as f32;
    (0..t.len())
        .map(|i| t.row(i).iter().map(|v| v.abs()).sum::<f32>() / c)
        .collect()
}

fn dilation_mask(t: &SparseTensor, ratio: f64) -> Vec<bool> {
    let n = t.len();
    let keep = dilation_keep_count(n, ratio);
    if keep == n {
        return vec![true; n];
    }
    let mags = site_magnitudes(t);
    let mut order: Vec<usize> = (0..n).collect();
    // descending magnitude; equal magnitudes keep canonical order
    order.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// The sites allowed to dilate in a pruned strided layer: the
/// `ceil((1 - ratio) * N)` sites with the largest mean absolute feature,
/// returned in canonical order.
pub fn select_dilation_set(t: &SparseTensor, prune_ratio: f64) -> Vec<Coord> {
    dilation_mask(t, prune_ratio)
        .iter()
        .zip(t.coords())
        .filter(|(m, _)| **m)
        .map(|(_, c)| *c)
        .collect()
}

/// Stride-2 sparse convolution with spatial voxel pruning.
///
/// Every selected input `q` contributes `W[o] . f(q)` to output
/// `floor((q + o) / 2)` for each kernel offset `o`; unselected inputs only
/// contribute through the centre tap (or not at all, per the layer's
/// [`PrunedContribution`]). Outputs falling outside the halved extent are
/// discarded.
pub fn strided_conv_downsample(t: &SparseTensor, layer: &ConvLayer) -> Result<SparseTensor> {
    strided_conv_with_rulebook(t, layer).map(|(out, _)| out)
}

pub(crate) fn strided_conv_with_rulebook(
    t: &SparseTensor,
    layer: &ConvLayer,
) -> Result<(SparseTensor, Rulebook)> {
    if layer.mode != ConvMode::Strided {
        return Err(Error::InvalidConfig("strided_conv_downsample needs a strided layer".into()));
    }
    layer.check_input(t)?;
    let rb = strided_rulebook(t, layer);
    let features = run_rulebook(t, layer, &rb);
    let out = SparseTensor::from_canonical(
        t.layout().downsampled(),
        rb.out_coords.clone(),
        features,
        layer.out_channels,
    );
    Ok((out, rb))
}

fn strided_rulebook(t: &SparseTensor, layer: &ConvLayer) -> Rulebook {
    let mask = dilation_mask(t, layer.prune_ratio);
    Rulebook::strided(t, layer.kernel_size, &mask, layer.pruned)
}

/// Rulebook a layer realises on input `t`, whichever its mode.
pub fn rulebook_for(t: &SparseTensor, layer: &ConvLayer) -> Rulebook {
    match layer.mode {
        ConvMode::Submanifold => Rulebook::submanifold(t, layer.kernel_size),
        ConvMode::Strided => strided_rulebook(t, layer),
    }
}

/// Runs a layer in whichever mode it was built for.
pub fn apply_conv(t: &SparseTensor, layer: &ConvLayer) -> Result<SparseTensor> {
    apply_conv_with_rulebook(t, layer).map(|(out, _)| out)
}

pub(crate) fn apply_conv_with_rulebook(t: &SparseTensor, layer: &ConvLayer) -> Result<(SparseTensor, Rulebook)> {
    match layer.mode {
        ConvMode::Submanifold => submanifold_conv_with_rulebook(t, layer),
        ConvMode::Strided => strided_conv_with_rulebook(t, layer),
    }
}

pub fn relu(t: &SparseTensor) -> SparseTensor {
    t.map_features(|v| v.max(0.0))
}

/// Output coordinate set of a strided layer without pruning, by direct
/// dilation. Used to sanity-check layouts.
pub fn dilated_halving(coords: &[Coord], dims: Dims, kernel_size: usize, out: &Layout) -> Vec<Coord> {
    let offsets = kernel_offsets(dims, kernel_size);
    let set: HashSet<Coord> = coords
        .iter()
        .flat_map(|c| offsets.iter().map(move |o| halve(&add(c, o))))
        .filter(|u| out.contains(u))
        .collect();
    let mut v: Vec<Coord> = set.into_iter().collect();
    v.sort_by(canonical_cmp);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Duplicates;

    fn single(c: Coord, f: Vec<f32>, extent: i32) -> SparseTensor {
        let ch = f.len();
        let l = Layout::new(Dims::Three, 1, [extent; 3]).unwrap();
        SparseTensor::build(l, vec![c], f, ch, Duplicates::Reject).unwrap()
    }

    #[test]
    fn offsets_are_centered() {
        let o = kernel_offsets(Dims::Three, 3);
        assert_eq!(o.len(), 27);
        assert_eq!(o[13], [0, 0, 0]);
        let o2 = kernel_offsets(Dims::Two, 5);
        assert_eq!(o2.len(), 25);
        assert_eq!(o2[12], [0, 0, 0]);
        assert!(o2.iter().all(|c| c[2] == 0));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvLayer::zeros(Dims::Three, ConvMode::Submanifold, 2, 1, 1).is_err());
        assert!(ConvLayer::zeros(Dims::Three, ConvMode::Strided, 3, 1, 1)
            .unwrap()
            .with_prune_ratio(1.0)
            .is_err());
    }

    #[test]
    fn empty_submanifold() {
        let l = Layout::new(Dims::Three, 1, [4; 3]).unwrap();
        let t = SparseTensor::empty(l, 2);
        let layer = ConvLayer::zeros(Dims::Three, ConvMode::Submanifold, 3, 2, 5).unwrap();
        let out = submanifold_conv(&t, &layer).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 5);
    }

    #[test]
    fn identity_center_kernel() {
        let t = single([2, 1, 3], vec![0.25, -1.5], 6);
        let mut w = vec![0.0; 27 * 4];
        // centre tap = identity
        w[13 * 4] = 1.0;
        w[13 * 4 + 3] = 1.0;
        let layer = ConvLayer::new(Dims::Three, ConvMode::Submanifold, 3, 2, 2, w, vec![0.0; 2]).unwrap();
        let out = submanifold_conv(&t, &layer).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert_eq!(out.features(), t.features());
    }

    #[test]
    fn channel_mismatch() {
        let t = single([0, 0, 0], vec![1.0], 2);
        let layer = ConvLayer::zeros(Dims::Three, ConvMode::Submanifold, 3, 2, 1).unwrap();
        assert!(matches!(
            submanifold_conv(&t, &layer),
            Err(Error::ChannelMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn strided_single_site_dilates_to_eight() {
        let t = single([4, 4, 4], vec![1.0], 12);
        let layer = ConvLayer::zeros(Dims::Three, ConvMode::Strided, 3, 1, 1).unwrap();
        let out = strided_conv_downsample(&t, &layer).unwrap();
        let mut expected = Vec::new();
        for z in 1..=2 {
            for y in 1..=2 {
                for x in 1..=2 {
                    expected.push([x, y, z]);
                }
            }
        }
        assert_eq!(out.coords(), expected.as_slice());
        assert_eq!(out.stride(), 2);
        assert_eq!(out.extent(), [6, 6, 6]);
    }

    #[test]
    fn strided_empty_doubles_stride() {
        let l = Layout::new(Dims::Three, 2, [5, 5, 3]).unwrap();
        let t = SparseTensor::empty(l, 1);
        let layer = ConvLayer::zeros(Dims::Three, ConvMode::Strided, 3, 1, 4).unwrap();
        let out = strided_conv_downsample(&t, &layer).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.stride(), 4);
        assert_eq!(out.extent(), [3, 3, 2]);
        assert_eq!(out.channels(), 4);
    }

    #[test]
    fn pruned_site_keeps_center_only() {
        let l = Layout::new(Dims::Three, 1, [12; 3]).unwrap();
        let t = SparseTensor::build(l, vec![[4, 4, 4], [9, 9, 9]], vec![5.0, 1.0], 1, Duplicates::Reject).unwrap();
        let layer = ConvLayer::zeros(Dims::Three, ConvMode::Strided, 3, 1, 1)
            .unwrap()
            .with_prune_ratio(0.5)
            .unwrap();
        let out = strided_conv_downsample(&t, &layer).unwrap();
        // (4,4,4) dilates to 8 sites, (9,9,9) lands only on (4,4,4)
        assert_eq!(out.len(), 9);
        assert!(out.index_of(&[4, 4, 4]).is_some());
        assert!(out.index_of(&[5, 5, 5]).is_none());

        let dropped = strided_conv_downsample(&t, &layer.clone().with_pruned_contribution(PrunedContribution::Drop)).unwrap();
        assert_eq!(dropped.len(), 8);
    }

    #[test]
    fn keep_count_snaps() {
        assert_eq!(dilation_keep_count(10, 0.7), 3);
        assert_eq!(dilation_keep_count(10, 0.1), 9);
        assert_eq!(dilation_keep_count(7, 0.5), 4);
        assert_eq!(dilation_keep_count(0, 0.5), 0);
        assert_eq!(dilation_keep_count(3, 0.0), 3);
        assert_eq!(dilation_keep_count(1, 0.9), 1);
    }

    #[test]
    fn dilation_set_top_half() {
        let l = Layout::new(Dims::Two, 1, [16, 1, 1]).unwrap();
        let coords: Vec<Coord> = (0..10).map(|x| [x, 0, 0]).collect();
        let feats: Vec<f32> = [3.0, -9.0, 1.0, 7.0, 0.5, 2.0, -8.0, 4.0, 6.0, 0.1].to_vec();
        let t = SparseTensor::build(l, coords, feats, 1, Duplicates::Reject).unwrap();
        let sel = select_dilation_set(&t, 0.5);
        assert_eq!(sel, vec![[1, 0, 0], [3, 0, 0], [6, 0, 0], [7, 0, 0], [8, 0, 0]]);
        assert_eq!(select_dilation_set(&t, 0.0).len(), 10);
    }

    #[test]
    fn dilation_ties_prefer_canonical_first() {
        let l = Layout::new(Dims::Two, 1, [8, 1, 1]).unwrap();
        let coords: Vec<Coord> = (0..4).map(|x| [x, 0, 0]).collect();
        let t = SparseTensor::build(l, coords, vec![1.0; 4], 1, Duplicates::Reject).unwrap();
        assert_eq!(select_dilation_set(&t, 0.5), vec![[0, 0, 0], [1, 0, 0]]);
    }
}
