//! Search for triangulation and map-point creation.
//!
//! The search runs one task per (current keypoint, neighbor keyframe) pair
//! against an immutable map snapshot. Conflicts between current keypoints
//! that pick the same neighbor keypoint are then resolved by a sequential
//! pass, so the candidate list is the same for any worker count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device_store::{DeviceStore, StageTag};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{
    check_creation_gates, epipolar_error_with, hamming, triangulate, GateConfig, GateFailure, GateOutcome, TwoView,
};
use crate::map::{KeyFrame, KeyFrameId, Map, MapPointId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangulationConfig {
    pub match_max_distance: u32,
    /// χ² (1 dof, 95 %) scaled by the neighbor keypoint's level variance.
    pub chi2_epi: f64,
    /// Allowed pyramid-level difference between matched keypoints.
    pub level_window: u8,
    pub neighbor_count: usize,
    /// Use the most recent keyframe when the current one has no covisible neighbors yet.
    pub temporal_fallback: bool,
    pub gates: GateConfig,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            match_max_distance: 50,
            chi2_epi: 3.84,
            level_window: 1,
            neighbor_count: 10,
            temporal_fallback: true,
            gates: GateConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub neighbor_kf_id: KeyFrameId,
    pub kp_index_current: usize,
    pub kp_index_neighbor: usize,
    pub distance: u32,
}

/// Per current keypoint: best neighbor index and descriptor distance.
pub type RawMatches = Vec<Option<(usize, u32)>>;

/// Best admissible neighbor keypoint for one current keypoint, before the
/// one-to-one pass. Ties go to the lowest neighbor index.
fn best_match(
    current: &KeyFrame,
    neighbor: &KeyFrame,
    f: &nalgebra::Matrix3<f64>,
    free_neighbor_kps: &[usize],
    i: usize,
    cfg: &TriangulationConfig,
) -> Option<(usize, u32)> {
    if current.binding(i).is_some() {
        return None;
    }
    let d_i = current.descriptor(i);
    let level_i = current.level(i);
    let pix_i = current.keypoints[i].pixel();
    let mut best: Option<(usize, u32)> = None;
    for &j in free_neighbor_kps {
        let level_j = neighbor.level(j);
        if level_i.abs_diff(level_j) > cfg.level_window {
            continue;
        }
        let d = hamming(d_i, neighbor.descriptor(j));
        if d > cfg.match_max_distance || best.is_some_and(|(_, bd)| d >= bd) {
            continue;
        }
        let err = epipolar_error_with(f, &pix_i, &neighbor.keypoints[j].pixel());
        if err <= cfg.chi2_epi * neighbor.intrinsics.level_sigma2(level_j) {
            best = Some((j, d));
        }
    }
    best
}

/// Per-current-keypoint best matches (index `i` → `(j, distance)`), before
/// conflict resolution.
pub fn raw_matches(
    current: &KeyFrame,
    neighbor: &KeyFrame,
    cfg: &TriangulationConfig,
    exec: &Executor,
) -> Result<RawMatches> {
    let mut all = raw_matches_many(current, &[neighbor], cfg, exec);
    all.pop().expect("one neighbor")
}

fn raw_matches_many(
    current: &KeyFrame,
    neighbors: &[&KeyFrame],
    cfg: &TriangulationConfig,
    exec: &Executor,
) -> Vec<Result<RawMatches>> {
    let prepared: Vec<Result<(nalgebra::Matrix3<f64>, Vec<usize>)>> = neighbors
        .iter()
        .map(|nb| {
            let view = TwoView::new(current.pose, nb.pose, current.intrinsics, nb.intrinsics);
            let f = view.fundamental()?;
            let free = (0..nb.len()).filter(|&j| nb.binding(j).is_none()).collect();
            Ok((f, free))
        })
        .collect();
    let n = current.len();
    let flat = exec.map(n * neighbors.len(), |task| {
        let (k, i) = (task / n.max(1), task % n.max(1));
        match &prepared[k] {
            Ok((f, free)) => best_match(current, neighbors[k], f, free, i, cfg),
            Err(_) => None,
        }
    });
    prepared
        .into_iter()
        .enumerate()
        .map(|(k, p)| p.map(|_| flat[k * n..(k + 1) * n].to_vec()))
        .collect()
}

/// Keeps, for every neighbor keypoint, only its lowest-distance claimant
/// (ties: lowest current index). Output is sorted by current index.
pub fn resolve_one_to_one(
    neighbor_id: KeyFrameId,
    neighbor_len: usize,
    raw: &[Option<(usize, u32)>],
) -> Vec<MatchCandidate> {
    let mut claim: Vec<Option<(u32, usize)>> = vec![None; neighbor_len];
    for (i, m) in raw.iter().enumerate() {
        if let Some((j, d)) = *m {
            if claim[j].is_none_or(|(cd, _)| d < cd) {
                claim[j] = Some((d, i));
            }
        }
    }
    raw.iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let (j, d) = (*m)?;
            (claim[j].map(|c| c.1) == Some(i)).then_some(MatchCandidate {
                neighbor_kf_id: neighbor_id,
                kp_index_current: i,
                kp_index_neighbor: j,
                distance: d,
            })
        })
        .collect()
}

pub fn search_for_triangulation(
    current: &KeyFrame,
    neighbor: &KeyFrame,
    cfg: &TriangulationConfig,
    exec: &Executor,
) -> Result<Vec<MatchCandidate>> {
    let raw = raw_matches(current, neighbor, cfg, exec)?;
    Ok(resolve_one_to_one(neighbor.id, neighbor.len(), &raw))
}

/// Searches every neighbor at once; the parallel grain is one current
/// keypoint against one neighbor.
pub fn search_neighbors(
    current: &KeyFrame,
    neighbors: &[&KeyFrame],
    cfg: &TriangulationConfig,
    exec: &Executor,
) -> Vec<Result<Vec<MatchCandidate>>> {
    raw_matches_many(current, neighbors, cfg, exec)
        .into_iter()
        .zip(neighbors)
        .map(|(raw, nb)| raw.map(|r| resolve_one_to_one(nb.id, nb.len(), &r)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreationReport {
    pub neighbors: Vec<KeyFrameId>,
    pub candidates: usize,
    pub created: Vec<MapPointId>,
    pub gate_failures: BTreeMap<GateFailure, usize>,
    pub degenerate: usize,
    pub conflicts: usize,
    pub skipped_neighbors: Vec<KeyFrameId>,
}

/// Neighbors used for creation: top-`n` covisible, or the latest earlier
/// keyframe when the covisibility list is empty and the fallback is on.
pub fn triangulation_neighbors(
    map: &Map,
    current: KeyFrameId,
    n: usize,
    cfg: &TriangulationConfig,
) -> Result<Vec<KeyFrameId>> {
    let mut neighbors = map.covisible_neighbors(current, n)?;
    if neighbors.is_empty() && n > 0 && cfg.temporal_fallback {
        if let Some(prev) = map.live_keyframes().filter(|k| k.id < current).last() {
            neighbors.push(prev.id);
        }
    }
    Ok(neighbors)
}

pub fn create_map_points(
    map: &mut Map,
    store: &mut DeviceStore,
    current_id: KeyFrameId,
    n: usize,
    cfg: &TriangulationConfig,
    exec: &Executor,
) -> Result<CreationReport> {
    let mut report = CreationReport::default();
    if n == 0 {
        return Ok(report);
    }
    if !store.is_resident(current_id) {
        return Err(Error::InvalidState(format!("{current_id} is not resident")));
    }
    let neighbor_ids = triangulation_neighbors(map, current_id, n, cfg)?;
    let mut accessed = vec![current_id];
    accessed.extend(&neighbor_ids);
    store.record_neighbor_access(StageTag::Triangulation, &accessed)?;

    let results = {
        let current = map.live_keyframe(current_id)?;
        let neighbors: Vec<&KeyFrame> = neighbor_ids
            .iter()
            .map(|id| map.live_keyframe(*id))
            .collect::<Result<_>>()?;
        search_neighbors(current, &neighbors, cfg, exec)
    };
    report.neighbors = neighbor_ids.clone();

    for (nb_id, result) in neighbor_ids.iter().zip(results) {
        let Ok(candidates) = result else {
            report.skipped_neighbors.push(*nb_id);
            continue;
        };
        report.candidates += candidates.len();
        for c in candidates {
            let current = map.live_keyframe(current_id)?;
            let neighbor = map.live_keyframe(*nb_id)?;
            if current.binding(c.kp_index_current).is_some() || neighbor.binding(c.kp_index_neighbor).is_some() {
                report.conflicts += 1;
                continue;
            }
            let view = TwoView::new(current.pose, neighbor.pose, current.intrinsics, neighbor.intrinsics);
            let (kp_a, kp_b) = (
                current.keypoints[c.kp_index_current],
                neighbor.keypoints[c.kp_index_neighbor],
            );
            let (pix_a, pix_b) = (kp_a.pixel(), kp_b.pixel());
            let Ok(x) = triangulate(&view, &pix_a, &pix_b) else {
                report.degenerate += 1;
                continue;
            };
            match check_creation_gates(&view, &cfg.gates, &pix_a, kp_a.level, &pix_b, kp_b.level, &x) {
                GateOutcome::Pass => {}
                GateOutcome::Fail(reason) => {
                    *report.gate_failures.entry(reason).or_insert(0) += 1;
                    continue;
                }
            }
            match map.create_map_point(
                x,
                current_id,
                &[(current_id, c.kp_index_current), (*nb_id, c.kp_index_neighbor)],
            ) {
                Ok(id) => report.created.push(id),
                Err(Error::Conflict(_)) => report.conflicts += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}
