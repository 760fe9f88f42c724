//! Multi-object tracking by greedy center association plus query-voxel
//! association.
//!
//! Each frame runs two greedy passes within each class. The first matches a
//! track's velocity-predicted centre against detection centres; the second
//! takes whatever is left and matches the track's last query-voxel position
//! against the detections' query-voxel positions. The second pass recovers
//! objects whose predicted centre drifted while the voxel they are predicted
//! from stayed put.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackState {
    Active,
    Dead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub class: usize,
    pub center: [f64; 3],
    pub velocity: [f64; 2],
    /// Metric position of the query voxel of the last matched detection.
    pub query_position: [f64; 2],
    /// Frames since the last match.
    pub age: u32,
    /// Seconds since the last match.
    pub time_since_update: f64,
    pub hits: u32,
    pub state: TrackState,
}

impl Track {
    /// Centre extrapolated `dt` seconds past the current frame.
    pub fn predicted_center(&self, dt: f64) -> [f64; 2] {
        let t = self.time_since_update + dt;
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Centre gate in metres per class; classes past the end use `default_center_gate`.
    pub center_gates: Vec<f64>,
    pub default_center_gate: f64,
    pub voxel_gate: f64,
    /// A track unmatched for more than this many frames dies.
    pub max_age: u32,
    /// Matches needed before a track is reported.
    pub min_hits: u32,
    /// Run the query-voxel pass.
    pub voxel_association: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            center_gates: Vec::new(),
            default_center_gate: 2.0,
            voxel_gate: 2.0,
            max_age: 3,
            min_hits: 1,
            voxel_association: true,
        }
    }
}

impl AssociationConfig {
    pub fn center_gate(&self, class: usize) -> f64 {
        self.center_gates.get(class).copied().unwrap_or(self.default_center_gate)
    }

    pub fn validate(&self) -> Result<()> {
        let gates_ok = self.center_gates.iter().all(|&g| g > 0.0) && self.default_center_gate > 0.0 && self.voxel_gate > 0.0;
        if !gates_ok {
            return Err(Error::InvalidConfig("association gates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Center,
    Voxel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub track: usize,
    pub det: usize,
    pub distance: f64,
    pub pass: Pass,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<Match>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_dets: Vec<usize>,
}

fn l2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One greedy pass: candidates within the gate are taken nearest first, ties
/// to the lower detection index, then the lower track index.
fn greedy_pass(
    tracks: &[Track],
    dets: &[Detection],
    track_free: &mut [bool],
    det_free: &mut [bool],
    pass: Pass,
    dist: impl Fn(&Track, &Detection) -> f64,
    gate: impl Fn(&Track) -> f64,
) -> Vec<Match> {
    let mut cands = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        if !track_free[ti] {
            continue;
        }
        for (di, d) in dets.iter().enumerate() {
            if !det_free[di] || d.class != t.class {
                continue;
            }
            let dd = dist(t, d);
            if dd <= gate(t) {
                cands.push((dd, di, ti));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = Vec::new();
    for (dd, di, ti) in cands {
        if track_free[ti] && det_free[di] {
            track_free[ti] = false;
            det_free[di] = false;
            out.push(Match {
                track: ti,
                det: di,
                distance: dd,
                pass,
            });
        }
    }
    out
}

/// Matches active tracks to detections `dt` seconds after the previous frame.
pub fn associate(tracks: &[Track], dets: &[Detection], dt: f64, cfg: &AssociationConfig) -> Matching {
    let mut track_free: Vec<bool> = tracks.iter().map(|t| t.state == TrackState::Active).collect();
    let mut det_free = vec![true; dets.len()];

    let mut pairs = greedy_pass(
        tracks,
        dets,
        &mut track_free,
        &mut det_free,
        Pass::Center,
        |t, d| l2(t.predicted_center(dt), [d.center[0], d.center[1]]),
        |t| cfg.center_gate(t.class),
    );
    if cfg.voxel_association {
        pairs.extend(greedy_pass(
            tracks,
            dets,
            &mut track_free,
            &mut det_free,
            Pass::Voxel,
            |t, d| l2(t.query_position, d.query_position),
            |_| cfg.voxel_gate,
        ));
    }
    Matching {
        pairs,
        unmatched_tracks: (0..tracks.len())
            .filter(|&i| track_free[i] && tracks[i].state == TrackState::Active)
            .collect(),
        unmatched_dets: (0..dets.len()).filter(|&i| det_free[i]).collect(),
    }
}

/// A reported track position for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: u32,
    pub id: u64,
    pub class: usize,
    pub center: [f64; 3],
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, Default)]
pub struct Tracker {
    tracks: Vec<Track>,
    dead: Vec<Track>,
    next_id: u64,
    last_timestamp: Option<f64>,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active_tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn dead_tracks(&self) -> &[Track] {
        &self.dead
    }

    /// Consumes one frame of detections. Matched tracks take the detection's
    /// centre, query voxel and velocity (regressed, else finite-differenced);
    /// unmatched detections start new tracks; unmatched tracks age and die
    /// once their age exceeds `max_age`. Returns the confirmed tracks updated
    /// in this frame, ordered by id.
    pub fn step(
        &mut self,
        frame: u32,
        timestamp: f64,
        dets: &[Detection],
        cfg: &AssociationConfig,
    ) -> Result<Vec<TrackOutput>> {
        let dt = match self.last_timestamp {
            Some(prev) if timestamp <= prev => {
                return Err(Error::NonMonotoneTimestamp {
                    previous: prev,
                    current: timestamp,
                })
            }
            Some(prev) => timestamp - prev,
            None => 0.0,
        };
        self.last_timestamp = Some(timestamp);

        let m = associate(&self.tracks, dets, dt, cfg);
        for p in &m.pairs {
            let t = &mut self.tracks[p.track];
            let d = &dets[p.det];
            let elapsed = t.time_since_update + dt;
            t.velocity = match d.velocity {
                Some(v) => v,
                None if elapsed > 0.0 => [
                    (d.center[0] - t.center[0]) / elapsed,
                    (d.center[1] - t.center[1]) / elapsed,
                ],
                None => t.velocity,
            };
            t.center = d.center;
            t.query_position = d.query_position;
            t.age = 0;
            t.time_since_update = 0.0;
            t.hits += 1;
        }
        for &i in &m.unmatched_tracks {
            let t = &mut self.tracks[i];
            t.age += 1;
            t.time_since_update += dt;
            if t.age > cfg.max_age {
                t.state = TrackState::Dead;
            }
        }
        for &i in &m.unmatched_dets {
            let d = &dets[i];
            self.tracks.push(Track {
                id: self.next_id,
                class: d.class,
                center: d.center,
                velocity: d.velocity.unwrap_or([0.0; 2]),
                query_position: d.query_position,
                age: 0,
                time_since_update: 0.0,
                hits: 1,
                state: TrackState::Active,
            });
            self.next_id += 1;
        }
        let (alive, dead): (Vec<Track>, Vec<Track>) =
            std::mem::take(&mut self.tracks).into_iter().partition(|t| t.state == TrackState::Active);
        self.tracks = alive;
        self.dead.extend(dead);

        let mut out: Vec<TrackOutput> = self
            .tracks
            .iter()
            .filter(|t| t.age == 0 && t.hits >= cfg.min_hits)
            .map(|t| TrackOutput {
                frame,
                id: t.id,
                class: t.class,
                center: t.center,
                velocity: t.velocity,
            })
            .collect();
        out.sort_by_key(|o| o.id);
        Ok(out)
    }
}

/// An identified 2D position in one frame, ground truth or tracker output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged {
    pub id: u64,
    pub position: [f64; 2],
}

/// Counts identity switches: frames in which a ground-truth object is matched
/// to a different track id than at its previous match. Per frame, ground
/// truth and outputs are paired greedily by ascending distance within `gate`
/// (ties: lower ground-truth index, then lower output index).
pub fn count_id_switches(gt: &[Vec<Tagged>], output: &[Vec<Tagged>], gate: f64) -> usize {
    use std::collections::HashMap;
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut switches = 0;
    for (g, o) in gt.iter().zip(output) {
        let mut cands = Vec::new();
        for (gi, a) in g.iter().enumerate() {
            for (oi, b) in o.iter().enumerate() {
                let d = l2(a.position, b.position);
                if d <= gate {
                    cands.push((d, gi, oi));
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gf = vec![true; g.len()];
        let mut of = vec![true; o.len()];
        for (_, gi, oi) in cands {
            if gf[gi] && of[oi] {
                gf[gi] = false;
                of[oi] = false;
                let (gid, tid) = (g[gi].id, o[oi].id);
                if let Some(prev) = last.insert(gid, tid) {
                    if prev != tid {
                        switches += 1;
                    }
                }
            }
        }
    }
    switches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, x: f64, y: f64, qx: f64, qy: f64) -> Detection {
        Detection {
            class,
            score: 0.9,
            center: [x, y, 0.0],
            size: [4.0, 2.0, 1.5],
            yaw: 0.0,
            velocity: None,
            query_voxel: [0, 0],
            query_position: [qx, qy],
        }
    }

    fn track(id: u64, x: f64, y: f64, v: [f64; 2], q: [f64; 2]) -> Track {
        Track {
            id,
            class: 0,
            center: [x, y, 0.0],
            velocity: v,
            query_position: q,
            age: 0,
            time_since_update: 0.0,
            hits: 1,
            state: TrackState::Active,
        }
    }

    #[test]
    fn no_tracks_all_births() {
        let m = associate(&[], &[det(0, 0.0, 0.0, 0.0, 0.0)], 0.5, &AssociationConfig::default());
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_dets, vec![0]);
    }

    #[test]
    fn predicted_position_matches_exactly() {
        let t = [track(0, 0.0, 0.0, [1.0, 0.0], [0.0, 0.0])];
        let m = associate(&t, &[det(0, 0.5, 0.0, 9.0, 9.0)], 0.5, &AssociationConfig::default());
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].distance, 0.0);
        assert_eq!(m.pairs[0].pass, Pass::Center);
    }

    #[test]
    fn voxel_pass_rescues_displaced_center() {
        let t = [track(0, 0.0, 0.0, [0.0, 0.0], [1.0, 1.0])];
        let d = [det(0, 3.0, 0.0, 1.0, 1.0)];
        let cfg = AssociationConfig::default();
        let m = associate(&t, &d, 0.1, &cfg);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].pass, Pass::Voxel);
        let off = AssociationConfig {
            voxel_association: false,
            ..cfg
        };
        let m = associate(&t, &d, 0.1, &off);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_tracks, vec![0]);
    }

    #[test]
    fn classes_never_cross() {
        let t = [track(0, 0.0, 0.0, [0.0, 0.0], [0.0, 0.0])];
        let m = associate(&t, &[det(1, 0.0, 0.0, 0.0, 0.0)], 0.1, &AssociationConfig::default());
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn track_dies_after_max_age() {
        let cfg = AssociationConfig::default();
        let mut tr = Tracker::new();
        tr.step(0, 0.0, &[det(0, 0.0, 0.0, 0.0, 0.0)], &cfg).unwrap();
        for f in 1..=3 {
            tr.step(f, f as f64 * 0.5, &[], &cfg).unwrap();
            assert_eq!(tr.active_tracks().len(), 1, "alive after frame {f}");
        }
        tr.step(4, 2.0, &[], &cfg).unwrap();
        assert!(tr.active_tracks().is_empty());
        assert_eq!(tr.dead_tracks().len(), 1);
    }

    #[test]
    fn timestamps_must_increase() {
        let cfg = AssociationConfig::default();
        let mut tr = Tracker::new();
        tr.step(0, 1.0, &[], &cfg).unwrap();
        assert!(matches!(
            tr.step(1, 1.0, &[], &cfg),
            Err(Error::NonMonotoneTimestamp { .. })
        ));
    }

    #[test]
    fn finite_difference_velocity() {
        let cfg = AssociationConfig::default();
        let mut tr = Tracker::new();
        tr.step(0, 0.0, &[det(0, 0.0, 0.0, 0.0, 0.0)], &cfg).unwrap();
        let out = tr.step(1, 0.5, &[det(0, 0.5, 0.25, 0.0, 0.0)], &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].velocity, [1.0, 0.5]);
    }

    #[test]
    fn id_switch_examples() {
        let tag = |id, x| Tagged { id, position: [x, 0.0] };
        let gt = vec![vec![tag(0, 0.0), tag(1, 10.0)]; 3];
        let perfect = vec![vec![tag(5, 0.0), tag(6, 10.0)]; 3];
        assert_eq!(count_id_switches(&gt, &perfect, 1.0), 0);
        let swapped = vec![
            vec![tag(5, 0.0), tag(6, 10.0)],
            vec![tag(6, 0.0), tag(5, 10.0)],
            vec![tag(6, 0.0), tag(5, 10.0)],
        ];
        assert_eq!(count_id_switches(&gt, &swapped, 1.0), 2);
    }
}
