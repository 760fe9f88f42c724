use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`. Two-dimensional tensors keep `z == 0`.
pub type Coord = [i32; 3];

/// Spatial dimensionality of a sparse tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn count(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }
}

/// Canonical ordering: lexicographic by `(z, y, x)`. For 2D tensors `z` is
/// always zero so this reduces to `(y, x)`.
#[inline]
pub fn canonical_cmp(a: &Coord, b: &Coord) -> Ordering {
    (a[2], a[1], a[0]).cmp(&(b[2], b[1], b[0]))
}

/// Geometry shared by every site of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub dims: Dims,
    /// Downsampling factor relative to the input voxel grid.
    pub stride: u32,
    /// Exclusive upper bound per axis; `extent[2] == 1` for 2D tensors.
    pub extent: [i32; 3],
}

impl Layout {
    pub fn new(dims: Dims, stride: u32, extent: [i32; 3]) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if extent.iter().any(|&e| e < 1) {
            return Err(Error::InvalidConfig(format!("extent {extent:?} must be >= 1 on every axis")));
        }
        if dims == Dims::Two && extent[2] != 1 {
            return Err(Error::InvalidConfig("2D layouts must have z extent 1".into()));
        }
        Ok(Self { dims, stride, extent })
    }

    pub fn contains(&self, c: &Coord) -> bool {
        (0..3).all(|a| c[a] >= 0 && c[a] < self.extent[a])
    }

    /// Layout after a stride-2 downsampling: stride doubles, extent halves
    /// rounding up on every active axis.
    pub fn downsampled(&self) -> Self {
        let mut extent = self.extent;
        for e in extent.iter_mut().take(self.dims.count()) {
            *e = (*e + 1) / 2;
        }
        Self {
            dims: self.dims,
            stride: self.stride * 2,
            extent,
        }
    }

    /// The same layout projected onto the ground plane.
    pub fn flattened(&self) -> Self {
        Self {
            dims: Dims::Two,
            stride: self.stride,
            extent: [self.extent[0], self.extent[1], 1],
        }
    }
}

/// How `SparseTensor::build` treats repeated coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Duplicates {
    Reject,
    /// Sum the features of repeated coordinates, in input order.
    Merge,
}

/// Active coordinates with one feature row each.
///
/// Coordinates are unique and stored in canonical order; the feature matrix is
/// row-major with `channels` columns. Instances are immutable once built.
#[derive(Clone)]
pub struct SparseTensor {
    layout: Layout,
    channels: usize,
    coords: Vec<Coord>,
    features: Vec<f32>,
    index: HashMap<Coord, u32>,
}

impl SparseTensor {
    pub fn empty(layout: Layout, channels: usize) -> Self {
        Self {
            layout,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a tensor from unordered coordinates and a row-major feature
    /// matrix with `channels` columns.
    pub fn build(
        layout: Layout,
        coords: Vec<Coord>,
        features: Vec<f32>,
        channels: usize,
        duplicates: Duplicates,
    ) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates but {} feature values for {} channels",
                coords.len(),
                features.len(),
                channels
            )));
        }
        for c in &coords {
            if !layout.contains(c) || (layout.dims == Dims::Two && c[2] != 0) {
                return Err(Error::OutOfExtent {
                    coord: *c,
                    extent: layout.extent,
                });
            }
        }

        let mut order: Vec<usize> = (0..coords.len()).collect();
        // stable: merged rows are summed in input order
        order.sort_by(|&a, &b| canonical_cmp(&coords[a], &coords[b]));

        let mut out_coords: Vec<Coord> = Vec::with_capacity(coords.len());
        let mut out_features: Vec<f32> = Vec::with_capacity(features.len());
        for &i in &order {
            let row = &features[i * channels..(i + 1) * channels];
            if out_coords.last() == Some(&coords[i]) {
                match duplicates {
                    Duplicates::Reject => return Err(Error::DuplicateCoordinate(coords[i])),
                    Duplicates::Merge => {
                        let start = out_features.len() - channels;
                        for (acc, v) in out_features[start..].iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                }
            } else {
                out_coords.push(coords[i]);
                out_features.extend_from_slice(row);
            }
        }
        Ok(Self::from_canonical(layout, out_coords, out_features, channels))
    }

    /// Assembles a tensor from coordinates that are already unique, in-extent
    /// and canonically ordered.
    pub(crate) fn from_canonical(
        layout: Layout,
        coords: Vec<Coord>,
        features: Vec<f32>,
        channels: usize,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * channels);
        debug_assert!(coords
            .windows(2)
            .all(|w| canonical_cmp(&w[0], &w[1]) == Ordering::Less));
        let index = coords
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Self {
            layout,
            channels,
            coords,
            features,
            index,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> Dims {
        self.layout.dims
    }

    pub fn stride(&self) -> u32 {
        self.layout.stride
    }

    pub fn extent(&self) -> [i32; 3] {
        self.layout.extent
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn index_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).map(|&i| i as usize)
    }

    pub fn feature_at(&self, c: &Coord) -> Option<&[f32]> {
        self.index_of(c).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Coord, &[f32])> {
        self.coords
            .iter()
            .zip(self.features.chunks_exact(self.channels.max(1)))
    }

    /// Same sites and layout with a new feature matrix.
    pub fn with_features(&self, features: Vec<f32>, channels: usize) -> Result<Self> {
        if features.len() != self.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} sites need {} values, got {}",
                self.len(),
                self.len() * channels,
                features.len()
            )));
        }
        Ok(Self {
            layout: self.layout,
            channels,
            coords: self.coords.clone(),
            features,
            index: self.index.clone(),
        })
    }

    /// Applies `f` to every feature value.
    pub fn map_features(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.features.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Exact equality including the bit patterns of every feature value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.channels == other.channels
            && self.coords == other.coords
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PartialEq for SparseTensor {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.channels == other.channels
            && self.coords == other.coords
            && self.features == other.features
    }
}

impl fmt::Debug for SparseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SparseTensor")
            .field("dims", &self.layout.dims)
            .field("stride", &self.layout.stride)
            .field("extent", &self.layout.extent)
            .field("channels", &self.channels)
            .field("sites", &self.coords.len())
            .finish()
    }
}
