//! JSON records exchanged between the `infer`, `track` and `eval` commands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Detection, HeadConfig};
use crate::metrics::{Box3d, EvalBox};
use crate::tracker::TrackOutput;
use crate::voxelizer::GridConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: u32,
    pub class: String,
    pub score: f32,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    /// Stride-8 voxel the box was decoded from.
    pub query_voxel: [i32; 2],
}

/// Contents of one detection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub frame_id: u32,
    pub timestamp: f64,
    pub detections: Vec<DetectionRecord>,
}

fn class_name(head: &HeadConfig, class: usize) -> Result<String> {
    head.class_names
        .get(class)
        .cloned()
        .ok_or_else(|| Error::InvalidConfig(format!("class index {class} has no name")))
}

fn class_id(head: &HeadConfig, name: &str) -> Result<usize> {
    head.class_index(name)
        .ok_or_else(|| Error::Malformed(format!("unknown class `{name}`")))
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, frame_id: u32, head: &HeadConfig) -> Result<Self> {
        Ok(Self {
            frame_id,
            class: class_name(head, d.class)?,
            score: d.score,
            center: d.center,
            size: d.size,
            yaw: d.yaw,
            velocity: d.velocity,
            query_voxel: d.query_voxel,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score > 0.0 && self.score <= 1.0) {
            return Err(Error::Malformed(format!("score {} outside (0, 1]", self.score)));
        }
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::DegenerateBox(self.size));
        }
        Ok(())
    }

    /// Rebuilds the detection; the query position is recomputed from the
    /// query voxel on the stride-`stride` grid.
    pub fn to_detection(&self, head: &HeadConfig, grid: &GridConfig, stride: u32) -> Result<Detection> {
        self.validate()?;
        let cell = grid.cell_center([self.query_voxel[0], self.query_voxel[1], 0], stride);
        Ok(Detection {
            class: class_id(head, &self.class)?,
            score: self.score,
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
            query_voxel: self.query_voxel,
            query_position: [cell[0], cell[1]],
        })
    }

    pub fn to_eval_box(&self, head: &HeadConfig) -> Result<EvalBox> {
        Ok(EvalBox {
            frame: self.frame_id,
            class: class_id(head, &self.class)?,
            score: self.score,
            bbox: Box3d {
                center: self.center,
                size: self.size,
                yaw: self.yaw,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: u32,
    pub id: u64,
    pub class: String,
    pub center: [f64; 3],
    pub velocity: [f64; 2],
}

impl TrackRecord {
    pub fn from_output(t: &TrackOutput, head: &HeadConfig) -> Result<Self> {
        Ok(Self {
            frame: t.frame,
            id: t.id,
            class: class_name(head, t.class)?,
            center: t.center,
            velocity: t.velocity,
        })
    }
}

/// One annotated object in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtObject {
    /// Identity, stable across frames.
    pub id: u64,
    pub class: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameGt {
    pub frame_id: u32,
    pub timestamp: f64,
    pub objects: Vec<GtObject>,
}

impl GtObject {
    pub fn to_eval_box(&self, frame: u32, head: &HeadConfig) -> Result<EvalBox> {
        Ok(EvalBox {
            frame,
            class: class_id(head, &self.class)?,
            score: 1.0,
            bbox: Box3d {
                center: self.center,
                size: self.size,
                yaw: self.yaw,
            },
        })
    }
}
