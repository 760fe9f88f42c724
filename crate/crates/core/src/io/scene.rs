//! Synthetic LIDAR scenes: points sampled on the surfaces of parametric boxes
//! moving at constant velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{FrameGt, GtObject};
use crate::error::{Error, Result};
use crate::voxelizer::PointCloud;

fn one() -> u32 {
    1
}
fn half() -> f64 {
    0.5
}
fn density() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class: String,
    /// Centre at time zero.
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub frames: u32,
    /// Seconds between frames.
    #[serde(default = "half")]
    pub dt: f64,
    /// Surface points per square metre.
    #[serde(default = "density")]
    pub points_per_m2: f64,
    /// Uniform jitter added to every coordinate, in metres.
    #[serde(default)]
    pub noise: f64,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<PointCloud>,
    pub gt: Vec<FrameGt>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.dt > 0.0) || !(self.points_per_m2 > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::InvalidConfig(
                "scene needs frames >= 1 and positive dt and density".into(),
            ));
        }
        if let Some(o) = self.objects.iter().find(|o| o.size.iter().any(|&s| !(s > 0.0))) {
            return Err(Error::DegenerateBox(o.size));
        }
        Ok(())
    }
}

/// Uniform samples on the four sides and the top of an upright box, given in
/// the box frame.
fn sample_surface(size: [f64; 3], density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<[f64; 3]>) {
    let [l, w, h] = size;
    // (area, fixed axis, fixed value, extents of the two free axes)
    let faces = [
        (w * h, 0, l / 2.0),
        (w * h, 0, -l / 2.0),
        (l * h, 1, w / 2.0),
        (l * h, 1, -w / 2.0),
        (l * w, 2, h / 2.0),
    ];
    for (area, axis, value) in faces {
        let n = (area * density).round() as usize;
        for _ in 0..n {
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = if a == axis {
                    value
                } else {
                    rng.gen_range(-0.5..0.5) * size[a]
                };
            }
            out.push(p);
        }
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.frames as usize);
    let mut gt = Vec::with_capacity(spec.frames as usize);
    let mut local = Vec::new();
    for f in 0..spec.frames {
        let t = f as f64 * spec.dt;
        let mut points = Vec::new();
        let mut objects = Vec::with_capacity(spec.objects.len());
        for (id, o) in spec.objects.iter().enumerate() {
            let center = [
                o.center[0] + o.velocity[0] * t,
                o.center[1] + o.velocity[1] * t,
                o.center[2],
            ];
            let (s, c) = o.yaw.sin_cos();
            local.clear();
            sample_surface(o.size, spec.points_per_m2, &mut rng, &mut local);
            for p in &local {
                let mut q = [
                    center[0] + p[0] * c - p[1] * s,
                    center[1] + p[0] * s + p[1] * c,
                    center[2] + p[2],
                ];
                if spec.noise > 0.0 {
                    for v in &mut q {
                        *v += rng.gen_range(-spec.noise..=spec.noise);
                    }
                }
                let intensity: f32 = rng.gen();
                points.push([q[0] as f32, q[1] as f32, q[2] as f32, intensity]);
            }
            objects.push(GtObject {
                id: id as u64,
                class: o.class.clone(),
                center,
                size: o.size,
                yaw: o.yaw,
                velocity: o.velocity,
            });
        }
        frames.push(PointCloud {
            points,
            timestamp: t,
            frame_id: f,
        });
        gt.push(FrameGt {
            frame_id: f,
            timestamp: t,
            objects,
        });
    }
    Ok(Scene { frames, gt })
}
