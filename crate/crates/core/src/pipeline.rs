//! Voxelize, run the backbone and head, decode boxes.

use std::path::Path;

use crate::backbone::{forward_backbone, profile_backbone, BackboneWeights};
use crate::error::Result;
use crate::head::{
    classify_voxels, decode_boxes, head_flops, regress_boxes, select_query_voxels, Detection, HeadWeights,
};
use crate::io::{load_weights, random_weights, Config};
use crate::sparse::FlopsReport;
use crate::voxelizer::{voxelize, PointCloud};

/// Stride of the map the head runs on.
pub const HEAD_STRIDE: u32 = 8;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub backbone: BackboneWeights,
    pub head: HeadWeights,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub detections: Vec<Detection>,
    pub input_voxels: usize,
    pub bev_voxels: usize,
}

impl Model {
    pub fn load(config: Config, weights: &Path) -> Result<Self> {
        let (backbone, head) = load_weights(weights, &config)?;
        Ok(Self { config, backbone, head })
    }

    pub fn random(config: Config, seed: u64) -> Result<Self> {
        let (backbone, head) = random_weights(&config, seed)?;
        Ok(Self { config, backbone, head })
    }

    pub fn infer(&self, pc: &PointCloud) -> Result<FrameOutput> {
        Ok(self.run(pc, false)?.0)
    }

    /// Inference plus the per-layer cost of backbone and head.
    pub fn profile(&self, pc: &PointCloud) -> Result<(FrameOutput, FlopsReport)> {
        let (out, report) = self.run(pc, true)?;
        Ok((out, report.unwrap_or_default()))
    }

    fn run(&self, pc: &PointCloud, profile: bool) -> Result<(FrameOutput, Option<FlopsReport>)> {
        let cfg = &self.config;
        let vox = voxelize(pc, &cfg.grid)?;
        let (bb, mut report) = if profile {
            let (bb, r) = profile_backbone(&vox.tensor, &self.backbone, &cfg.backbone)?;
            (bb, Some(r))
        } else {
            (forward_backbone(&vox.tensor, &self.backbone, &cfg.backbone)?, None)
        };
        let scores = classify_voxels(&bb.bev, &self.head)?;
        let queries = select_query_voxels(&scores, &cfg.head)?;
        let regs = regress_boxes(&bb.bev, &queries, &self.head, &cfg.head)?;
        let detections = decode_boxes(&queries, &regs, &cfg.grid, HEAD_STRIDE)?;
        if let Some(r) = report.as_mut() {
            r.merge(head_flops(&bb.bev, &queries, &self.head, &cfg.head));
        }
        log::debug!(
            "frame {}: {} voxels, {} bev sites, {} detections",
            pc.frame_id,
            vox.tensor.len(),
            bb.bev.len(),
            detections.len()
        );
        Ok((
            FrameOutput {
                detections,
                input_voxels: vox.tensor.len(),
                bev_voxels: bb.bev.len(),
            },
            report,
        ))
    }
}
