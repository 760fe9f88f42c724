use serde::{Deserialize, Serialize};

use super::RegressionOutput;
use crate::error::{Error, Result};
use crate::sparse::{canonical_cmp, Coord};
use crate::voxelizer::GridConfig;

/// Annotated box. Center and size in metres, yaw in radians, velocity in m/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub coord: Coord,
    /// Index of `coord` in the site list given to `assign_targets`.
    pub site: usize,
    pub class: usize,
    pub target: RegressionOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    /// One entry per ground-truth box, `None` only when every active voxel is
    /// already claimed by nearer boxes of the same class.
    pub positives: Vec<Option<Positive>>,
    /// `sites x num_classes` one-hot classification targets.
    pub cls_targets: Vec<f32>,
    pub num_classes: usize,
}

/// Box centre in continuous stride-`stride` voxel units.
fn grid_position(center: &[f64; 3], grid: &GridConfig, stride: u32) -> [f64; 2] {
    [
        (center[0] - grid.range_min[0]) / (stride as f64 * grid.voxel_size[0]),
        (center[1] - grid.range_min[1]) / (stride as f64 * grid.voxel_size[1]),
    ]
}

fn sq_dist(u: &[f64; 2], c: &Coord) -> f64 {
    let dx = u[0] - (c[0] as f64 + 0.5);
    let dy = u[1] - (c[1] as f64 + 0.5);
    dx * dx + dy * dy
}

/// Regression target of `gt` relative to voxel `c`.
pub fn encode_box(gt: &GtBox, c: &Coord, grid: &GridConfig, stride: u32, with_velocity: bool) -> RegressionOutput {
    let u = grid_position(&gt.center, grid, stride);
    RegressionOutput {
        offset: [(u[0] - (c[0] as f64 + 0.5)) as f32, (u[1] - (c[1] as f64 + 0.5)) as f32],
        height: gt.center[2] as f32,
        log_size: [gt.size[0].ln() as f32, gt.size[1].ln() as f32, gt.size[2].ln() as f32],
        rotation: [gt.yaw.sin() as f32, gt.yaw.cos() as f32],
        velocity: with_velocity.then(|| [gt.velocity[0] as f32, gt.velocity[1] as f32]),
    }
}

/// Marks, for every ground-truth box, the active 2D voxel whose centre is
/// nearest the box centre (Euclidean, in stride-`stride` voxel units) as the
/// positive sample.
///
/// Distance ties go to the canonically-first voxel. A voxel is positive for at
/// most one box per class: boxes claim voxels in order of their nearest
/// distance, so the nearer box wins and the other takes its next-nearest free
/// voxel.
pub fn assign_targets(
    gt_boxes: &[GtBox],
    sites: &[Coord],
    grid: &GridConfig,
    stride: u32,
    num_classes: usize,
    with_velocity: bool,
) -> Result<TargetAssignment> {
    if sites.is_empty() {
        return Err(Error::NoActiveVoxels);
    }
    if let Some(b) = gt_boxes.iter().find(|b| b.class >= num_classes) {
        return Err(Error::InvalidConfig(format!("ground-truth class {} out of range", b.class)));
    }

    // per box: sites ranked by distance, ties canonical
    let ranked: Vec<Vec<(f64, usize)>> = gt_boxes
        .iter()
        .map(|b| {
            let u = grid_position(&b.center, grid, stride);
            let mut r: Vec<(f64, usize)> = sites.iter().enumerate().map(|(i, c)| (sq_dist(&u, c), i)).collect();
            r.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| canonical_cmp(&sites[a.1], &sites[b.1]))
            });
            r
        })
        .collect();

    let mut order: Vec<usize> = (0..gt_boxes.len()).collect();
    order.sort_by(|&a, &b| ranked[a][0].0.total_cmp(&ranked[b][0].0).then(a.cmp(&b)));

    let mut claimed = vec![false; sites.len() * num_classes];
    let mut positives = vec![None; gt_boxes.len()];
    for g in order {
        let b = &gt_boxes[g];
        let pick = ranked[g].iter().find(|(_, i)| !claimed[i * num_classes + b.class]);
        if let Some(&(_, i)) = pick {
            claimed[i * num_classes + b.class] = true;
            positives[g] = Some(Positive {
                coord: sites[i],
                site: i,
                class: b.class,
                target: encode_box(b, &sites[i], grid, stride, with_velocity),
            });
        }
    }
    let cls_targets = claimed.into_iter().map(|c| if c { 1.0 } else { 0.0 }).collect();
    Ok(TargetAssignment {
        positives,
        cls_targets,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridConfig {
        GridConfig {
            range_min: [0.0, 0.0, -2.0],
            range_max: [16.0, 16.0, 2.0],
            voxel_size: [0.25, 0.25, 0.5],
        }
    }

    fn gt(class: usize, x: f64, y: f64) -> GtBox {
        GtBox {
            class,
            center: [x, y, 0.5],
            size: [4.0, 2.0, 1.5],
            yaw: 0.3,
            velocity: [1.0, -1.0],
        }
    }

    #[test]
    fn centred_box_has_zero_offset() {
        // stride 8 x 0.25 m = 2 m cells; voxel (1, 2) centre is (3, 5)
        let sites = [[1, 2, 0], [3, 3, 0]];
        let a = assign_targets(&[gt(0, 3.0, 5.0)], &sites, &grid(), 8, 1, true).unwrap();
        let p = a.positives[0].as_ref().unwrap();
        assert_eq!(p.coord, [1, 2, 0]);
        assert_eq!(p.target.offset, [0.0, 0.0]);
        assert_eq!(a.cls_targets, vec![1.0, 0.0]);
    }

    #[test]
    fn nearer_voxel_wins() {
        // voxel centres at 1.0 and 2.0 voxel units from the box centre
        let sites = [[0, 0, 0], [3, 0, 0]];
        let a = assign_targets(&[gt(0, 2.0 * 2.0, 1.0)], &sites, &grid(), 8, 1, false).unwrap();
        // box at u = (2.0, 0.5): site 0 centre (0.5, 0.5) d=1.5, site 1 (3.5, 0.5) d=1.5 -> tie, canonical first
        assert_eq!(a.positives[0].as_ref().unwrap().coord, [0, 0, 0]);
        let a = assign_targets(&[gt(0, 2.0 * 2.5, 1.0)], &sites, &grid(), 8, 1, false).unwrap();
        assert_eq!(a.positives[0].as_ref().unwrap().coord, [3, 0, 0]);
    }

    #[test]
    fn contested_voxel_goes_to_nearer_box() {
        let sites = [[0, 0, 0], [5, 5, 0]];
        let far = gt(0, 2.0, 1.0 + 0.4);
        let near = gt(0, 1.0, 1.0);
        let a = assign_targets(&[far, near.clone()], &sites, &grid(), 8, 1, false).unwrap();
        assert_eq!(a.positives[1].as_ref().unwrap().coord, [0, 0, 0]);
        assert_eq!(a.positives[0].as_ref().unwrap().coord, [5, 5, 0]);
        // other class may share the voxel
        let mut other = near;
        other.class = 1;
        let b = assign_targets(&[gt(0, 1.0, 1.0), other], &sites, &grid(), 8, 2, false).unwrap();
        assert_eq!(b.positives[0].as_ref().unwrap().coord, [0, 0, 0]);
        assert_eq!(b.positives[1].as_ref().unwrap().coord, [0, 0, 0]);
    }

    #[test]
    fn no_active_voxels() {
        assert!(matches!(
            assign_targets(&[gt(0, 1.0, 1.0)], &[], &grid(), 8, 1, false),
            Err(Error::NoActiveVoxels)
        ));
    }
}
