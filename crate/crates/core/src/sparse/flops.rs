//! Multiply-add accounting for sparse layers.
//!
//! A layer costs `pairs * c_in * c_out` multiply-adds, where `pairs` is the
//! number of realised rulebook triples, and reports
//! `2 * macs + c_out * output_sites` FLOPs (the second term is the bias).

use std::fmt;

use serde::Serialize;

use super::conv::{rulebook_for, ConvLayer};
use super::tensor::SparseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub part: Part,
    pub input_sites: u64,
    pub output_sites: u64,
    pub rulebook_pairs: u64,
    pub macs: u64,
    pub flops: u64,
}

impl LayerFlops {
    pub fn from_counts(
        name: impl Into<String>,
        part: Part,
        input_sites: usize,
        output_sites: usize,
        pairs: usize,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let macs = pairs as u64 * c_in as u64 * c_out as u64;
        Self {
            name: name.into(),
            part,
            input_sites: input_sites as u64,
            output_sites: output_sites as u64,
            rulebook_pairs: pairs as u64,
            macs,
            flops: 2 * macs + c_out as u64 * output_sites as u64,
        }
    }
}

/// Cost of running `layer` on `t_in` to produce `t_out`, from the rulebook the
/// layer realises on that input.
pub fn count_flops(t_in: &SparseTensor, layer: &ConvLayer, t_out: &SparseTensor) -> LayerFlops {
    let pairs = if t_in.is_empty() {
        0
    } else {
        rulebook_for(t_in, layer).pairs()
    };
    LayerFlops::from_counts(
        "",
        Part::Backbone,
        t_in.len(),
        t_out.len(),
        pairs,
        layer.in_channels(),
        layer.out_channels(),
    )
}

/// Per-stage voxel count of a backbone pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageStats {
    pub stage: usize,
    pub stride: u32,
    pub voxels: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub stages: Vec<StageStats>,
}

impl FlopsReport {
    pub fn push(&mut self, entry: LayerFlops) {
        self.layers.push(entry);
    }

    pub fn part_flops(&self, part: Part) -> u64 {
        self.layers.iter().filter(|l| l.part == part).map(|l| l.flops).sum()
    }

    pub fn backbone_flops(&self) -> u64 {
        self.part_flops(Part::Backbone)
    }

    pub fn head_flops(&self) -> u64 {
        self.part_flops(Part::Head)
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn merge(&mut self, other: FlopsReport) {
        self.layers.extend(other.layers);
        self.stages.extend(other.stages);
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>9} {:>11} {:>15}", "layer", "in", "out", "pairs", "flops")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:>9} {:>9} {:>11} {:>15}",
                l.name, l.input_sites, l.output_sites, l.rulebook_pairs, l.flops
            )?;
        }
        if !self.stages.is_empty() {
            writeln!(f)?;
            writeln!(f, "{:<8} {:>7} {:>10}", "stage", "stride", "voxels")?;
            for s in &self.stages {
                writeln!(f, "{:<8} {:>7} {:>10}", s.stage, s.stride, s.voxels)?;
            }
        }
        writeln!(f)?;
        writeln!(f, "backbone GFLOPs {:.4}", self.backbone_flops() as f64 * 1e-9)?;
        writeln!(f, "head GFLOPs     {:.4}", self.head_flops() as f64 * 1e-9)?;
        write!(f, "total GFLOPs    {:.4}", self.total_flops() as f64 * 1e-9)
    }
}
