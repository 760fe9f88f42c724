//! Point cloud to stride-1 sparse tensor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Coord, Dims, Layout, SparseTensor};

/// Point count that maps to a normalised count feature of 1.0.
pub const COUNT_NORMALIZER: f64 = 32.0;

/// Feature channels emitted per voxel: mean offset of the points from the
/// voxel centre (x, y, z), mean intensity, normalised point count.
pub const VOXEL_FEATURES: usize = 5;

/// Voxelization geometry. Ranges are half-open: `[range_min, range_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            range_min: [-54.0, -54.0, -5.0],
            range_max: [54.0, 54.0, 3.0],
            voxel_size: [0.075, 0.075, 0.2],
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.range_max[a] > self.range_min[a]) {
                return Err(Error::InvalidConfig(format!("grid range on axis {a} is empty")));
            }
            if !(self.voxel_size[a] > 0.0) {
                return Err(Error::InvalidConfig(format!("voxel size on axis {a} must be positive")));
            }
        }
        Ok(())
    }

    /// Voxel count per axis, `ceil((max - min) / size)`.
    pub fn extent(&self) -> [i32; 3] {
        let mut e = [0; 3];
        for a in 0..3 {
            e[a] = ((self.range_max[a] - self.range_min[a]) / self.voxel_size[a] - 1e-9).ceil().max(1.0) as i32;
        }
        e
    }

    pub fn layout(&self) -> Layout {
        Layout {
            dims: Dims::Three,
            stride: 1,
            extent: self.extent(),
        }
    }

    /// Voxel index of a point, or `None` when it falls outside the range.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<Coord> {
        let e = self.extent();
        let mut c = [0i32; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let i = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor();
            if i < 0.0 || i >= e[a] as f64 {
                return None;
            }
            c[a] = i as i32;
        }
        Some(c)
    }

    /// Metric centre of voxel `c` on a grid downsampled by `stride`.
    pub fn cell_center(&self, c: Coord, stride: u32) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = (c[a] as f64 + 0.5) * stride as f64 * self.voxel_size[a] + self.range_min[a];
        }
        out
    }
}

/// One LIDAR sweep: `(x, y, z, intensity)` per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
    pub timestamp: f64,
    pub frame_id: u32,
}

#[derive(Clone, Debug)]
pub struct Voxelized {
    pub tensor: SparseTensor,
    pub points_kept: usize,
    pub points_clipped: usize,
}

impl Voxelized {
    /// No voxel survived clipping. Not an error; downstream stages produce
    /// empty outputs.
    pub fn is_empty_frame(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Bins points into voxels. Each occupied voxel's feature is the mean of its
/// points' `(x, y, z)` relative to the voxel centre, their mean intensity, and
/// the point count over [`COUNT_NORMALIZER`]. Points within a voxel are sorted
/// before averaging so the result does not depend on input order.
pub fn voxelize(pc: &PointCloud, cfg: &GridConfig) -> Result<Voxelized> {
    cfg.validate()?;
    let mut bins: HashMap<Coord, Vec<[f32; 4]>> = HashMap::new();
    let mut kept = 0;
    for p in &pc.points {
        if !p.iter().all(|v| v.is_finite()) {
            continue;
        }
        if let Some(c) = cfg.voxel_of([p[0] as f64, p[1] as f64, p[2] as f64]) {
            bins.entry(c).or_default().push(*p);
            kept += 1;
        }
    }
    let clipped = pc.points.len() - kept;

    let mut coords = Vec::with_capacity(bins.len());
    let mut features = Vec::with_capacity(bins.len() * VOXEL_FEATURES);
    for (c, mut pts) in bins {
        pts.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
                .then(a[3].total_cmp(&b[3]))
        });
        let center = cfg.cell_center(c, 1);
        let mut sum = [0.0f64; 4];
        for p in &pts {
            for a in 0..3 {
                sum[a] += p[a] as f64 - center[a];
            }
            sum[3] += p[3] as f64;
        }
        let n = pts.len() as f64;
        coords.push(c);
        features.extend(sum.iter().map(|s| (s / n) as f32));
        features.push((n / COUNT_NORMALIZER) as f32);
    }

    let tensor = SparseTensor::build(
        cfg.layout(),
        coords,
        features,
        VOXEL_FEATURES,
        crate::sparse::Duplicates::Reject,
    )?;
    if tensor.is_empty() {
        log::warn!("frame {}: no voxels survived clipping", pc.frame_id);
    }
    Ok(Voxelized {
        tensor,
        points_kept: kept,
        points_clipped: clipped,
    })
}
