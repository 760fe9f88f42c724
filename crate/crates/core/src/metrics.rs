//! Oriented box overlap and desk-scale detection scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upright 3D box: centre, (length, width, height), yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3d {
    /// Footprint corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [self.center[0] + x * c - y * s, self.center[1] + x * s + y * c]
        })
    }

    fn check(&self) -> Result<()> {
        if self.size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::DegenerateBox(self.size));
        }
        Ok(())
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a.abs() / 2.0
}

/// Clips `subject` by every edge of the convex, counter-clockwise `clip`
/// polygon (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(intersect(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(intersect(prev, cur, a, b));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection(a: &Box3d, b: &Box3d) -> f64 {
    polygon_area(&clip_convex(&a.corners(), &b.corners()))
}

/// Bird's-eye-view IoU of the two rotated footprints, in [0, 1].
pub fn iou_bev(a: &Box3d, b: &Box3d) -> Result<f64> {
    a.check()?;
    b.check()?;
    let inter = bev_intersection(a, b);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU: footprint intersection times the overlap of the z extents.
pub fn iou_3d(a: &Box3d, b: &Box3d) -> Result<f64> {
    a.check()?;
    b.check()?;
    let lo = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    let hi = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let dz = (hi - lo).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    let union = a.size.iter().product::<f64>() + b.size.iter().product::<f64>() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// A box to score, tagged with frame and class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBox {
    pub frame: u32,
    pub class: usize,
    pub score: f32,
    pub bbox: Box3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub gt_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_switches: Option<usize>,
}

/// Greedy matching per frame and class: detections in descending score order
/// each take the unmatched ground truth with the highest BEV IoU, if that IoU
/// reaches `iou_threshold`. Returns, per detection, the matched gt index.
pub fn greedy_match(dets: &[EvalBox], gts: &[EvalBox], iou_threshold: f64) -> Result<Vec<Option<usize>>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_free = vec![true; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if !gt_free[g] || gt.frame != dets[d].frame || gt.class != dets[d].class {
                continue;
            }
            let iou = iou_bev(&dets[d].bbox, &gt.bbox)?;
            if iou >= iou_threshold && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            gt_free[g] = false;
            out[d] = Some(g);
        }
    }
    Ok(out)
}

/// Precision and recall per class at a fixed IoU threshold. With no
/// detections precision is 1 by convention; with no ground truth recall is 1.
/// Means are taken over classes that have any detection or ground truth.
pub fn match_and_score(
    dets: &[EvalBox],
    gts: &[EvalBox],
    iou_threshold: f64,
    class_names: &[String],
) -> Result<EvalReport> {
    let matches = greedy_match(dets, gts, iou_threshold)?;
    let mut classes = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let n_det = dets.iter().filter(|d| d.class == k).count();
        let gt_count = gts.iter().filter(|g| g.class == k).count();
        let tp = dets
            .iter()
            .zip(&matches)
            .filter(|(d, m)| d.class == k && m.is_some())
            .count();
        classes.push(ClassReport {
            class: k,
            name: name.clone(),
            gt_count,
            true_positives: tp,
            false_positives: n_det - tp,
            false_negatives: gt_count - tp,
            precision: if n_det == 0 { 1.0 } else { tp as f64 / n_det as f64 },
            recall: if gt_count == 0 { 1.0 } else { tp as f64 / gt_count as f64 },
        });
    }
    let present: Vec<&ClassReport> = classes
        .iter()
        .filter(|c| c.gt_count > 0 || c.true_positives + c.false_positives > 0)
        .collect();
    let mean = |f: fn(&ClassReport) -> f64| {
        if present.is_empty() {
            1.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(EvalReport {
        iou_threshold,
        mean_precision: mean(|c| c.precision),
        mean_recall: mean(|c| c.recall),
        classes,
        id_switches: None,
    })
}
