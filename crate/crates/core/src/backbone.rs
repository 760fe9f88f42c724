//! Six-stage sparse CNN backbone.
//!
//! Stage 1 runs at stride 1; stages 2-6 each open with a stride-2 sparse
//! convolution, giving features at strides {1, 2, 4, 8, 16, 32}. The last three
//! stages are aligned to stride 8 and unioned, then height-compressed into the
//! 2D sparse map the head consumes.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{
    apply_conv_with_rulebook, height_compress, relu, ConvLayer, ConvMode, Coord, Dims, Duplicates, FlopsReport,
    LayerFlops, Part, PrunedContribution, SparseTensor, StageStats,
};
use crate::voxelizer::VOXEL_FEATURES;

pub const NUM_STAGES: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// 3D sparse convolutions, height compression at stride 8.
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
    /// Height compression at stride 1, 2D sparse convolutions throughout.
    #[serde(rename = "2d")]
    TwoD,
}

impl BackboneMode {
    pub fn dims(self) -> Dims {
        match self {
            BackboneMode::ThreeD => Dims::Three,
            BackboneMode::TwoD => Dims::Two,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrunedVoxels {
    #[default]
    Center,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub prune_ratio: f64,
    /// 1-based indices of the down-sampling layers that prune (1..=5).
    pub prune_stages: Vec<usize>,
    pub pruned_voxels: PrunedVoxels,
    pub mode: BackboneMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: VOXEL_FEATURES,
            channels: vec![16, 32, 64, 128, 128, 128],
            blocks_per_stage: 2,
            kernel_size: 3,
            prune_ratio: 0.5,
            prune_stages: vec![1, 2, 3],
            pruned_voxels: PrunedVoxels::Center,
            mode: BackboneMode::ThreeD,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_STAGES {
            return Err(Error::InvalidConfig(format!(
                "backbone needs {NUM_STAGES} stage widths, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if self.channels[3] != self.channels[4] || self.channels[3] != self.channels[5] {
            return Err(Error::InvalidConfig(
                "stages 4-6 must share a width so their features can be unioned".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("backbone kernel size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::InvalidConfig(format!("prune ratio {} outside [0, 1)", self.prune_ratio)));
        }
        if let Some(s) = self.prune_stages.iter().find(|&&s| !(1..NUM_STAGES).contains(&s)) {
            return Err(Error::InvalidConfig(format!("prune stage {s} outside 1..=5")));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.channels[3]
    }

    /// Prune ratio applied by the down-sampling layer opening `stage` (2..=6).
    pub fn ratio_for_stage(&self, stage: usize) -> f64 {
        if stage >= 2 && self.prune_stages.contains(&(stage - 1)) {
            self.prune_ratio
        } else {
            0.0
        }
    }

    /// Every convolution of the backbone, in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let dims = self.mode.dims();
        let k = self.kernel_size;
        let mut specs = Vec::new();
        for s in 0..NUM_STAGES {
            let stage = s + 1;
            let (mode, c_in) = if s == 0 {
                (ConvMode::Submanifold, self.input_channels)
            } else {
                (ConvMode::Strided, self.channels[s - 1])
            };
            let c = self.channels[s];
            specs.push(LayerSpec::new(format!("backbone.stage{stage}.entry"), dims, mode, k, c_in, c));
            for b in 0..self.blocks_per_stage {
                for j in 1..=2 {
                    specs.push(LayerSpec::new(
                        format!("backbone.stage{stage}.block{b}.conv{j}"),
                        dims,
                        ConvMode::Submanifold,
                        k,
                        c,
                        c,
                    ));
                }
            }
        }
        specs
    }
}

/// Shape and mode of one named convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub dims: Dims,
    pub mode: ConvMode,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn new(name: String, dims: Dims, mode: ConvMode, k: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            name,
            dims,
            mode,
            kernel_size: k,
            in_channels: c_in,
            out_channels: c_out,
        }
    }

    /// Weight tensor shape: `K` repeated per spatial axis, then `c_in`, `c_out`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.kernel_size; self.dims.count()];
        s.push(self.in_channels);
        s.push(self.out_channels);
        s
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn build(&self, weights: Vec<f32>, bias: Vec<f32>) -> Result<ConvLayer> {
        ConvLayer::new(
            self.dims,
            self.mode,
            self.kernel_size,
            self.in_channels,
            self.out_channels,
            weights,
            bias,
        )
    }

    pub fn zeros(&self) -> ConvLayer {
        self.build(vec![0.0; self.weight_len()], vec![0.0; self.out_channels])
            .expect("layer shapes are consistent")
    }

    /// He-style uniform initialisation scaled by `gain`.
    pub fn random(&self, rng: &mut impl Rng, gain: f32) -> ConvLayer {
        let fan_in = (self.weight_len() / self.out_channels.max(1)).max(1) as f32;
        let bound = gain * (6.0 / fan_in).sqrt();
        let w = (0..self.weight_len()).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..self.out_channels).map(|_| rng.gen_range(-0.05..0.05)).collect();
        self.build(w, b).expect("layer shapes are consistent")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Stem (stage 1) or stride-2 down-sampling layer (stages 2-6).
    pub entry: ConvLayer,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub stages: Vec<Stage>,
}

impl BackboneWeights {
    /// Assembles weights from named layers produced for `cfg.layer_specs()`.
    pub fn from_layers(cfg: &BackboneConfig, layers: &mut HashMap<String, ConvLayer>) -> Result<Self> {
        cfg.validate()?;
        let mut take = |name: String| layers.remove(&name).ok_or(Error::MissingTensor(name));
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let entry = take(format!("backbone.stage{s}.entry"))?;
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResidualBlock {
                    conv1: take(format!("backbone.stage{s}.block{b}.conv1"))?,
                    conv2: take(format!("backbone.stage{s}.block{b}.conv2"))?,
                });
            }
            stages.push(Stage { entry, blocks });
        }
        let w = Self { stages };
        w.check(cfg)?;
        Ok(w)
    }

    pub fn zeros(cfg: &BackboneConfig) -> Result<Self> {
        let mut layers = cfg.layer_specs().into_iter().map(|s| (s.name.clone(), s.zeros())).collect();
        Self::from_layers(cfg, &mut layers)
    }

    pub fn random(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = cfg
            .layer_specs()
            .into_iter()
            .map(|s| {
                // keep residual branches small so depth does not blow up activations
                let gain = if s.name.ends_with("conv2") { 0.1 } else { 1.0 };
                (s.name.clone(), s.random(rng, gain))
            })
            .collect();
        Self::from_layers(cfg, &mut layers)
    }

    /// Layers in the order of `BackboneConfig::layer_specs`.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.entry);
            for b in &s.blocks {
                out.push(&b.conv1);
                out.push(&b.conv2);
            }
        }
        out
    }

    fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        for (spec, layer) in cfg.layer_specs().iter().zip(self.layers()) {
            let ok = layer.dims() == spec.dims
                && layer.mode() == spec.mode
                && layer.kernel_size() == spec.kernel_size
                && layer.in_channels() == spec.in_channels
                && layer.out_channels() == spec.out_channels;
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} does not match the configured shape {:?}",
                    spec.name,
                    spec.weight_shape()
                )));
            }
        }
        Ok(())
    }
}

/// `relu(conv2(relu(conv1(t))) + t)`. Output sites equal input sites.
pub fn residual_block(t: &SparseTensor, w1: &ConvLayer, w2: &ConvLayer) -> Result<SparseTensor> {
    residual_block_profiled(t, w1, w2, None)
}

fn residual_block_profiled(
    t: &SparseTensor,
    w1: &ConvLayer,
    w2: &ConvLayer,
    mut prof: Option<(&mut FlopsReport, &str)>,
) -> Result<SparseTensor> {
    for w in [w1, w2] {
        if w.mode() != ConvMode::Submanifold {
            return Err(Error::InvalidConfig("residual blocks use submanifold convolutions".into()));
        }
        if w.in_channels() != t.channels() || w.out_channels() != t.channels() {
            return Err(Error::ChannelMismatch {
                expected: t.channels(),
                actual: if w.in_channels() != t.channels() {
                    w.in_channels()
                } else {
                    w.out_channels()
                },
            });
        }
    }
    let h = relu(&run_layer(t, w1, prof.as_mut().map(|(r, n)| (&mut **r, format!("{n}.conv1"))))?);
    let h = run_layer(&h, w2, prof.as_mut().map(|(r, n)| (&mut **r, format!("{n}.conv2"))))?;
    let sum: Vec<f32> = h
        .features()
        .iter()
        .zip(t.features())
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    h.with_features(sum, t.channels())
}

fn run_layer(t: &SparseTensor, layer: &ConvLayer, prof: Option<(&mut FlopsReport, String)>) -> Result<SparseTensor> {
    let (out, rb) = apply_conv_with_rulebook(t, layer)?;
    if let Some((report, name)) = prof {
        report.push(LayerFlops::from_counts(
            name,
            Part::Backbone,
            t.len(),
            out.len(),
            rb.pairs(),
            layer.in_channels(),
            layer.out_channels(),
        ));
    }
    Ok(out)
}

/// Aligns stride-`s` features with their stride `2s` and `4s` successors:
/// coordinates of `f5` are doubled and those of `f6` quadrupled on every axis,
/// and the three site sets are unioned. Coincident sites sum their features as
/// `f4 + (f5 + f6)`.
pub fn fuse_multi_stride(f4: &SparseTensor, f5: &SparseTensor, f6: &SparseTensor) -> Result<SparseTensor> {
    let s = f4.stride();
    if f5.stride() != 2 * s || f6.stride() != 4 * s {
        return Err(Error::InvalidConfig(format!(
            "strides {}, {}, {} are not a x1/x2/x4 ladder",
            s,
            f5.stride(),
            f6.stride()
        )));
    }
    let c = f4.channels();
    for t in [f5, f6] {
        if t.channels() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: t.channels(),
            });
        }
        if t.dims() != f4.dims() {
            return Err(Error::DimMismatch {
                expected: f4.dims().count(),
                actual: t.dims().count(),
            });
        }
    }
    let n = f4.len() + f5.len() + f6.len();
    let mut coords: Vec<Coord> = Vec::with_capacity(n);
    let mut features: Vec<f32> = Vec::with_capacity(n * c);
    // merge is stable: f5' accumulates f6' first, f4 is added last
    for (t, scale) in [(f5, 2), (f6, 4), (f4, 1)] {
        for (p, f) in t.iter() {
            coords.push(rescale(p, scale));
            features.extend_from_slice(f);
        }
    }
    SparseTensor::build(f4.layout(), coords, features, c, Duplicates::Merge)
}

/// Multiplies every axis of `p` by `factor`.
pub fn rescale(p: &Coord, factor: i32) -> Coord {
    [p[0] * factor, p[1] * factor, p[2] * factor]
}

/// Everything a backbone pass produces.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `F_1 .. F_6` at strides 1 .. 32.
    pub stages: Vec<SparseTensor>,
    /// Union of stages 4-6 at stride 8, before height compression.
    pub fused: SparseTensor,
    /// 2D stride-8 map fed to the head.
    pub bev: SparseTensor,
}

pub fn forward_backbone(t0: &SparseTensor, w: &BackboneWeights, cfg: &BackboneConfig) -> Result<BackboneOutput> {
    run_backbone(t0, w, cfg, None)
}

/// Runs the backbone while recording the cost of every layer and the voxel
/// count of every stage.
pub fn profile_backbone(t0: &SparseTensor, w: &BackboneWeights, cfg: &BackboneConfig) -> Result<(BackboneOutput, FlopsReport)> {
    let mut report = FlopsReport::default();
    let out = run_backbone(t0, w, cfg, Some(&mut report))?;
    Ok((out, report))
}

fn run_backbone(
    t0: &SparseTensor,
    w: &BackboneWeights,
    cfg: &BackboneConfig,
    mut report: Option<&mut FlopsReport>,
) -> Result<BackboneOutput> {
    cfg.validate()?;
    if t0.stride() != 1 {
        return Err(Error::InvalidConfig(format!("backbone input must be stride 1, got {}", t0.stride())));
    }
    if t0.channels() != cfg.input_channels {
        return Err(Error::ChannelMismatch {
            expected: cfg.input_channels,
            actual: t0.channels(),
        });
    }
    let mut x = match (cfg.mode, t0.dims()) {
        (BackboneMode::TwoD, Dims::Three) => height_compress(t0)?,
        (BackboneMode::ThreeD, Dims::Two) => {
            return Err(Error::DimMismatch { expected: 3, actual: 2 });
        }
        _ => t0.clone(),
    };
    let pruned = match cfg.pruned_voxels {
        PrunedVoxels::Center => PrunedContribution::CenterOnly,
        PrunedVoxels::Drop => PrunedContribution::Drop,
    };

    let mut stages = Vec::with_capacity(NUM_STAGES);
    for (s, stage) in w.stages.iter().enumerate() {
        let idx = s + 1;
        let entry = if stage.entry.mode() == ConvMode::Strided {
            stage
                .entry
                .clone()
                .with_prune_ratio(cfg.ratio_for_stage(idx))?
                .with_pruned_contribution(pruned)
        } else {
            stage.entry.clone()
        };
        let name = format!("stage{idx}.entry");
        x = relu(&run_layer(&x, &entry, report.as_mut().map(|r| (&mut **r, name)))?);
        for (b, block) in stage.blocks.iter().enumerate() {
            let name = format!("stage{idx}.block{b}");
            x = residual_block_profiled(&x, &block.conv1, &block.conv2, report.as_mut().map(|r| (&mut **r, name.as_str())))?;
        }
        if let Some(r) = report.as_mut() {
            r.stages.push(StageStats {
                stage: idx,
                stride: x.stride(),
                voxels: x.len() as u64,
            });
        }
        stages.push(x.clone());
    }

    let fused = fuse_multi_stride(&stages[3], &stages[4], &stages[5])?;
    let bev = match fused.dims() {
        Dims::Three => height_compress(&fused)?,
        Dims::Two => fused.clone(),
    };
    Ok(BackboneOutput { stages, fused, bev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Layout;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            input_channels: 2,
            channels: vec![2, 3, 4, 4, 4, 4],
            blocks_per_stage: 1,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.layer_specs().len(), 6 * 5);
        assert_eq!(cfg.ratio_for_stage(1), 0.0);
        assert_eq!(cfg.ratio_for_stage(4), 0.5);
        assert_eq!(cfg.ratio_for_stage(5), 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny_cfg();
        c.channels[5] = 8;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.prune_stages = vec![6];
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.prune_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rescale_matches_union_algebra() {
        assert_eq!(rescale(&[3, 2, 1], 4), [12, 8, 4]);
        assert_eq!(rescale(&[3, 2, 1], 2), [6, 4, 2]);
    }

    #[test]
    fn empty_input_gives_empty_bev() {
        let cfg = tiny_cfg();
        let w = BackboneWeights::zeros(&cfg).unwrap();
        let l = Layout::new(Dims::Three, 1, [64, 64, 16]).unwrap();
        let out = forward_backbone(&SparseTensor::empty(l, 2), &w, &cfg).unwrap();
        assert!(out.bev.is_empty());
        assert_eq!(out.bev.dims(), Dims::Two);
        assert_eq!(out.bev.stride(), 8);
        let strides: Vec<u32> = out.stages.iter().map(|s| s.stride()).collect();
        assert_eq!(strides, vec![1, 2, 4, 8, 16, 32]);
    }

    #[test]
    fn zero_network_single_voxel() {
        let cfg = tiny_cfg();
        let w = BackboneWeights::zeros(&cfg).unwrap();
        let l = Layout::new(Dims::Three, 1, [64, 64, 16]).unwrap();
        let t = SparseTensor::build(l, vec![[20, 20, 4]], vec![1.0, 1.0], 2, Duplicates::Reject).unwrap();
        let out = forward_backbone(&t, &w, &cfg).unwrap();
        assert!(!out.bev.is_empty());
        assert!(out.bev.features().iter().all(|&v| v == 0.0));
        // the stride-8 column holding the original voxel is present
        assert!(out.bev.index_of(&[20 / 8, 20 / 8, 0]).is_some());
    }

    #[test]
    fn missing_layer_reported() {
        let cfg = tiny_cfg();
        let mut layers: HashMap<String, ConvLayer> =
            cfg.layer_specs().into_iter().map(|s| (s.name.clone(), s.zeros())).collect();
        layers.remove("backbone.stage3.block0.conv2");
        assert!(matches!(
            BackboneWeights::from_layers(&cfg, &mut layers),
            Err(Error::MissingTensor(n)) if n == "backbone.stage3.block0.conv2"
        ));
    }
}
