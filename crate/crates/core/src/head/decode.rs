use super::{Query, RegressionOutput};
use crate::error::{Error, Result};
use crate::voxelizer::GridConfig;

/// One decoded 3D box together with the voxel it was predicted from.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f32,
    pub center: [f64; 3],
    /// Length, width, height in metres.
    pub size: [f64; 3],
    pub yaw: f64,
    /// m/s, when the head regresses velocity.
    pub velocity: Option<[f64; 2]>,
    /// Query voxel index on the head's stride-8 grid.
    pub query_voxel: [i32; 2],
    /// Metric centre of the query voxel's cell.
    pub query_position: [f64; 2],
}

/// Converts raw regressions to metric boxes. Inverts `encode_box`: the centre
/// is `(voxel + 0.5 + offset) * stride * voxel_size + range_min` on x and y,
/// `z` is the regressed height, sizes are exponentiated and yaw is
/// `atan2(sin, cos)` with `(0, 0)` mapped to 0.
pub fn decode_boxes(
    selected: &[Query],
    regressions: &[RegressionOutput],
    grid: &GridConfig,
    stride: u32,
) -> Result<Vec<Detection>> {
    if selected.len() != regressions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} queries vs {} regressions",
            selected.len(),
            regressions.len()
        )));
    }
    let cell = [stride as f64 * grid.voxel_size[0], stride as f64 * grid.voxel_size[1]];
    Ok(selected
        .iter()
        .zip(regressions)
        .map(|(q, r)| {
            let vx = q.coord[0] as f64 + 0.5;
            let vy = q.coord[1] as f64 + 0.5;
            let (s, c) = (r.rotation[0] as f64, r.rotation[1] as f64);
            let yaw = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
            Detection {
                class: q.class,
                score: q.score,
                center: [
                    (vx + r.offset[0] as f64) * cell[0] + grid.range_min[0],
                    (vy + r.offset[1] as f64) * cell[1] + grid.range_min[1],
                    r.height as f64,
                ],
                size: r.log_size.map(|v| (v as f64).exp()),
                yaw,
                velocity: r.velocity.map(|v| [v[0] as f64, v[1] as f64]),
                query_voxel: [q.coord[0], q.coord[1]],
                query_position: [vx * cell[0] + grid.range_min[0], vy * cell[1] + grid.range_min[1]],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(x: i32, y: i32) -> Query {
        Query {
            coord: [x, y, 0],
            class: 0,
            score: 0.9,
        }
    }

    #[test]
    fn zero_regression_at_origin_voxel() {
        let grid = GridConfig::default();
        let d = decode_boxes(&[q(0, 0)], &[RegressionOutput::default()], &grid, 8).unwrap();
        assert!((d[0].center[0] - -53.7).abs() < 1e-12);
        assert!((d[0].center[1] - -53.7).abs() < 1e-12);
        assert_eq!(d[0].size, [1.0; 3]);
        assert_eq!(d[0].yaw, 0.0);
        assert_eq!(d[0].query_position, [d[0].center[0], d[0].center[1]]);
    }

    #[test]
    fn yaw_from_sin_cos() {
        let grid = GridConfig::default();
        let mut r = RegressionOutput::default();
        r.rotation = [0.0, 1.0];
        let d = decode_boxes(&[q(1, 1)], &[r], &grid, 8).unwrap();
        assert_eq!(d[0].yaw, 0.0);
        r.rotation = [1.0, 0.0];
        let d = decode_boxes(&[q(1, 1)], &[r], &grid, 8).unwrap();
        assert!((d[0].yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(decode_boxes(&[q(0, 0)], &[], &GridConfig::default(), 8).is_err());
    }
}
