//! Fully sparse prediction head.
//!
//! Class scores are predicted for every active stride-8 voxel; sparse max
//! pooling per class keeps local maxima only, and boxes are regressed from
//! the surviving voxels. No dense map and no NMS are involved.

mod decode;
mod loss;
mod targets;

pub use decode::{decode_boxes, Detection};
pub use loss::{
    focal_loss, focal_loss_with_logits, l1_loss_with_grad, l1_regression_loss, FOCAL_ALPHA, FOCAL_GAMMA,
};
pub use targets::{assign_targets, encode_box, GtBox, Positive, TargetAssignment};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LayerSpec;
use crate::error::{Error, Result};
use crate::sparse::{
    apply_conv_with_rulebook, canonical_cmp, kernel_offsets, sparse_max_pool, submanifold_conv_at, ConvLayer,
    ConvMode, Coord, Dims, FlopsReport, LayerFlops, Part, SparseTensor,
};

/// Regression channels without velocity: dx, dy, z, log l, log w, log h, sin, cos.
pub const BOX_CODE_LEN: usize = 8;

pub const NUSCENES_CLASSES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub class_names: Vec<String>,
    /// Group index per class. Classes of one group share a regression layer
    /// and a max-pool kernel. Empty means one group per class.
    pub class_groups: Vec<usize>,
    /// Odd max-pool kernel per group.
    pub maxpool_kernels: Vec<usize>,
    /// 1 (pointwise) or 3 (submanifold 3x3).
    pub head_kernel: usize,
    pub score_threshold: f32,
    pub max_detections: usize,
    pub regress_velocity: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            class_names: NUSCENES_CLASSES.iter().map(|s| s.to_string()).collect(),
            class_groups: Vec::new(),
            // vehicles pool wide, small objects narrow
            maxpool_kernels: vec![7, 7, 7, 7, 7, 3, 3, 3, 3, 3],
            head_kernel: 3,
            score_threshold: 0.1,
            max_detections: 500,
            regress_velocity: true,
        }
    }
}

impl HeadConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn group_of(&self, class: usize) -> usize {
        if self.class_groups.is_empty() {
            class
        } else {
            self.class_groups[class]
        }
    }

    pub fn num_groups(&self) -> usize {
        if self.class_groups.is_empty() {
            self.num_classes()
        } else {
            self.class_groups.iter().max().map_or(0, |m| m + 1)
        }
    }

    pub fn maxpool_kernel(&self, class: usize) -> usize {
        self.maxpool_kernels[self.group_of(class)]
    }

    pub fn code_len(&self) -> usize {
        BOX_CODE_LEN + if self.regress_velocity { 2 } else { 0 }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::InvalidConfig("head needs at least one class".into()));
        }
        if !self.class_groups.is_empty() {
            if self.class_groups.len() != k {
                return Err(Error::InvalidConfig("class_groups needs one entry per class".into()));
            }
            let g = self.num_groups();
            if (0..g).any(|i| !self.class_groups.contains(&i)) {
                return Err(Error::InvalidConfig("class groups must be numbered 0..n without gaps".into()));
            }
        }
        if self.maxpool_kernels.len() != self.num_groups() {
            return Err(Error::InvalidConfig(format!(
                "{} max-pool kernels for {} class groups",
                self.maxpool_kernels.len(),
                self.num_groups()
            )));
        }
        if self.maxpool_kernels.iter().any(|&m| m % 2 == 0) {
            return Err(Error::InvalidConfig("max-pool kernels must be odd".into()));
        }
        if self.head_kernel != 1 && self.head_kernel != 3 {
            return Err(Error::InvalidConfig("head kernel must be 1 or 3".into()));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::InvalidConfig("score threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Classification layer followed by one regression layer per group.
    pub fn layer_specs(&self, in_channels: usize) -> Vec<LayerSpec> {
        let k = self.head_kernel;
        let mut specs = vec![LayerSpec::new(
            "head.cls".into(),
            Dims::Two,
            ConvMode::Submanifold,
            k,
            in_channels,
            self.num_classes(),
        )];
        for g in 0..self.num_groups() {
            specs.push(LayerSpec::new(
                format!("head.reg{g}"),
                Dims::Two,
                ConvMode::Submanifold,
                k,
                in_channels,
                self.code_len(),
            ));
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub cls: ConvLayer,
    pub reg: Vec<ConvLayer>,
}

impl HeadWeights {
    pub fn from_layers(cfg: &HeadConfig, in_channels: usize, layers: &mut HashMap<String, ConvLayer>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.layer_specs(in_channels);
        let mut found = Vec::with_capacity(specs.len());
        for s in &specs {
            let l = layers.remove(&s.name).ok_or_else(|| Error::MissingTensor(s.name.clone()))?;
            if l.in_channels() != s.in_channels || l.out_channels() != s.out_channels || l.kernel_size() != s.kernel_size
            {
                return Err(Error::ShapeMismatch(format!("layer {} does not match the head config", s.name)));
            }
            found.push(l);
        }
        let cls = found.remove(0);
        Ok(Self { cls, reg: found })
    }

    pub fn zeros(cfg: &HeadConfig, in_channels: usize) -> Result<Self> {
        let mut layers = cfg
            .layer_specs(in_channels)
            .into_iter()
            .map(|s| (s.name.clone(), s.zeros()))
            .collect();
        Self::from_layers(cfg, in_channels, &mut layers)
    }

    /// Random weights; classification bias starts at the logit of 0.1.
    pub fn random(cfg: &HeadConfig, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers: HashMap<String, ConvLayer> = HashMap::new();
        for s in cfg.layer_specs(in_channels) {
            let mut l = s.random(rng, 0.5);
            if s.name == "head.cls" {
                let bias = vec![-2.19; s.out_channels];
                l = s.build(l.weights().to_vec(), bias)?;
            }
            layers.insert(s.name.clone(), l);
        }
        Self::from_layers(cfg, in_channels, &mut layers)
    }
}

/// A voxel kept by max pooling: where it is, which class, how confident.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub coord: Coord,
    pub class: usize,
    pub score: f32,
}

/// Raw regression vector of one query voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegressionOutput {
    /// Offset of the box centre from the voxel centre, in stride-8 voxels.
    pub offset: [f32; 2],
    /// Box centre z in metres.
    pub height: f32,
    /// Natural log of (length, width, height) in metres.
    pub log_size: [f32; 3],
    /// (sin yaw, cos yaw); not necessarily normalised.
    pub rotation: [f32; 2],
    /// m/s, when the head regresses velocity.
    pub velocity: Option<[f32; 2]>,
}

impl RegressionOutput {
    pub fn from_slice(v: &[f32]) -> Self {
        Self {
            offset: [v[0], v[1]],
            height: v[2],
            log_size: [v[3], v[4], v[5]],
            rotation: [v[6], v[7]],
            velocity: (v.len() >= BOX_CODE_LEN + 2).then(|| [v[8], v[9]]),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = vec![
            self.offset[0],
            self.offset[1],
            self.height,
            self.log_size[0],
            self.log_size[1],
            self.log_size[2],
            self.rotation[0],
            self.rotation[1],
        ];
        if let Some(vel) = self.velocity {
            v.extend_from_slice(&vel);
        }
        v
    }
}

/// Clamp keeping sigmoid outputs strictly inside (0, 1).
const SCORE_EPS: f32 = 1e-6;

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-x).exp())).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Raw per-class logits at every active site.
pub fn class_logits(bev: &SparseTensor, w: &HeadWeights) -> Result<SparseTensor> {
    Ok(apply_conv_with_rulebook(bev, &w.cls)?.0)
}

/// Per-voxel class scores in (0, 1), same sites as `bev`.
pub fn classify_voxels(bev: &SparseTensor, w: &HeadWeights) -> Result<SparseTensor> {
    Ok(class_logits(bev, w)?.map_features(sigmoid))
}

/// Keeps, for each class, the voxels that are local maxima under that class
/// group's max-pool kernel and score at least `score_threshold`. The result is
/// sorted by descending score (ties: class, then canonical coordinate) and
/// capped at `max_detections`.
pub fn select_query_voxels(scores: &SparseTensor, cfg: &HeadConfig) -> Result<Vec<Query>> {
    let k = cfg.num_classes();
    if scores.channels() != k {
        return Err(Error::ChannelMismatch {
            expected: k,
            actual: scores.channels(),
        });
    }
    let mut out = Vec::new();
    for class in 0..k {
        let channel: Vec<f32> = (0..scores.len()).map(|i| scores.row(i)[class]).collect();
        let single = scores.with_features(channel, 1)?;
        for c in sparse_max_pool(&single, cfg.maxpool_kernel(class))? {
            let score = single.feature_at(&c).expect("pooled sites are active")[0];
            if score >= cfg.score_threshold {
                out.push(Query { coord: c, class, score });
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class.cmp(&b.class))
            .then(canonical_cmp(&a.coord, &b.coord))
    });
    out.truncate(cfg.max_detections);
    Ok(out)
}

/// Runs each query's group regression layer at that query's voxel only.
pub fn regress_boxes(
    bev: &SparseTensor,
    selected: &[Query],
    w: &HeadWeights,
    cfg: &HeadConfig,
) -> Result<Vec<RegressionOutput>> {
    let mut sites = Vec::with_capacity(selected.len());
    for q in selected {
        sites.push(bev.index_of(&q.coord).ok_or(Error::InactiveQuery(q.coord))?);
    }
    let code = cfg.code_len();
    let mut out = vec![RegressionOutput::default(); selected.len()];
    for g in 0..cfg.num_groups() {
        let members: Vec<usize> = (0..selected.len()).filter(|&i| cfg.group_of(selected[i].class) == g).collect();
        if members.is_empty() {
            continue;
        }
        let idx: Vec<usize> = members.iter().map(|&i| sites[i]).collect();
        let rows = submanifold_conv_at(bev, &w.reg[g], &idx)?;
        for (m, row) in members.iter().zip(rows.chunks_exact(code)) {
            out[*m] = RegressionOutput::from_slice(row);
        }
    }
    Ok(out)
}

/// Cost of the head: classification over every site plus regression at the
/// selected sites only.
pub fn head_flops(bev: &SparseTensor, selected: &[Query], w: &HeadWeights, cfg: &HeadConfig) -> FlopsReport {
    let mut report = FlopsReport::default();
    let cls_pairs = if bev.is_empty() {
        0
    } else {
        crate::sparse::rulebook_for(bev, &w.cls).pairs()
    };
    report.push(LayerFlops::from_counts(
        "head.cls",
        Part::Head,
        bev.len(),
        bev.len(),
        cls_pairs,
        w.cls.in_channels(),
        w.cls.out_channels(),
    ));
    let offsets = kernel_offsets(Dims::Two, cfg.head_kernel);
    for (g, layer) in w.reg.iter().enumerate() {
        let queries: Vec<&Query> = selected.iter().filter(|q| cfg.group_of(q.class) == g).collect();
        let pairs: usize = queries
            .iter()
            .map(|q| {
                offsets
                    .iter()
                    .filter(|o| bev.index_of(&[q.coord[0] + o[0], q.coord[1] + o[1], 0]).is_some())
                    .count()
            })
            .sum();
        report.push(LayerFlops::from_counts(
            format!("head.reg{g}"),
            Part::Head,
            bev.len(),
            queries.len(),
            pairs,
            layer.in_channels(),
            layer.out_channels(),
        ));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Duplicates, Layout};

    fn small_cfg(k: usize) -> HeadConfig {
        HeadConfig {
            class_names: (0..k).map(|i| format!("c{i}")).collect(),
            class_groups: vec![],
            maxpool_kernels: vec![3; k],
            head_kernel: 1,
            score_threshold: 0.1,
            max_detections: 500,
            regress_velocity: true,
        }
    }

    fn bev(sites: &[(i32, i32)], c: usize) -> SparseTensor {
        let l = Layout::new(Dims::Two, 8, [32, 32, 1]).unwrap();
        let coords: Vec<Coord> = sites.iter().map(|s| [s.0, s.1, 0]).collect();
        let n = coords.len();
        SparseTensor::build(l, coords, (0..n * c).map(|i| i as f32 * 0.1).collect(), c, Duplicates::Reject).unwrap()
    }

    #[test]
    fn default_config_valid() {
        HeadConfig::default().validate().unwrap();
        assert_eq!(HeadConfig::default().code_len(), 10);
    }

    #[test]
    fn group_validation() {
        let mut c = small_cfg(3);
        c.class_groups = vec![0, 0, 2];
        assert!(c.validate().is_err());
        c.class_groups = vec![0, 0, 1];
        c.maxpool_kernels = vec![3, 5];
        c.validate().unwrap();
        assert_eq!(c.maxpool_kernel(2), 5);
    }

    #[test]
    fn zero_head_scores_half() {
        let cfg = small_cfg(3);
        let w = HeadWeights::zeros(&cfg, 4).unwrap();
        let s = classify_voxels(&bev(&[(1, 1), (5, 5)], 4), &w).unwrap();
        assert_eq!(s.channels(), 3);
        assert!(s.features().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_scores_select_nothing() {
        let cfg = small_cfg(2);
        let w = HeadWeights::zeros(&cfg, 4).unwrap();
        let s = classify_voxels(&bev(&[], 4), &w).unwrap();
        assert!(s.is_empty());
        assert!(select_query_voxels(&s, &cfg).unwrap().is_empty());
    }

    #[test]
    fn threshold_filters_everything() {
        let cfg = small_cfg(1);
        let l = Layout::new(Dims::Two, 8, [16, 16, 1]).unwrap();
        let s = SparseTensor::build(l, vec![[1, 1, 0], [9, 9, 0]], vec![0.05, 0.09], 1, Duplicates::Reject).unwrap();
        assert!(select_query_voxels(&s, &cfg).unwrap().is_empty());
    }

    #[test]
    fn isolated_voxel_selected_once() {
        let cfg = small_cfg(1);
        let l = Layout::new(Dims::Two, 8, [16, 16, 1]).unwrap();
        let s = SparseTensor::build(l, vec![[4, 4, 0]], vec![0.8], 1, Duplicates::Reject).unwrap();
        let q = select_query_voxels(&s, &cfg).unwrap();
        assert_eq!(q, vec![Query { coord: [4, 4, 0], class: 0, score: 0.8 }]);
    }

    #[test]
    fn max_detections_caps_output() {
        let mut cfg = small_cfg(1);
        cfg.max_detections = 2;
        let l = Layout::new(Dims::Two, 8, [32, 32, 1]).unwrap();
        let coords: Vec<Coord> = (0..5).map(|i| [i * 4, 0, 0]).collect();
        let s = SparseTensor::build(l, coords, vec![0.2, 0.9, 0.5, 0.7, 0.3], 1, Duplicates::Reject).unwrap();
        let q = select_query_voxels(&s, &cfg).unwrap();
        assert_eq!(q.iter().map(|q| q.score).collect::<Vec<_>>(), vec![0.9, 0.7]);
    }

    #[test]
    fn regress_rejects_inactive_query() {
        let cfg = small_cfg(1);
        let w = HeadWeights::zeros(&cfg, 4).unwrap();
        let b = bev(&[(1, 1)], 4);
        let q = [Query { coord: [2, 2, 0], class: 0, score: 0.5 }];
        assert!(matches!(regress_boxes(&b, &q, &w, &cfg), Err(Error::InactiveQuery(_))));
        assert!(regress_boxes(&b, &[], &w, &cfg).unwrap().is_empty());
    }

    #[test]
    fn zero_regression() {
        let cfg = small_cfg(1);
        let w = HeadWeights::zeros(&cfg, 4).unwrap();
        let b = bev(&[(1, 1)], 4);
        let q = [Query { coord: [1, 1, 0], class: 0, score: 0.5 }];
        let r = regress_boxes(&b, &q, &w, &cfg).unwrap();
        assert_eq!(r[0], RegressionOutput { velocity: Some([0.0; 2]), ..Default::default() });
    }

    #[test]
    fn regression_vector_layout() {
        let v: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let r = RegressionOutput::from_slice(&v);
        assert_eq!(r.rotation, [6.0, 7.0]);
        assert_eq!(r.velocity, Some([8.0, 9.0]));
        assert_eq!(r.to_vec(), v);
        assert_eq!(RegressionOutput::from_slice(&v[..8]).velocity, None);
    }
}
