//! Duplicate map-point fusion across first- and second-order covisible keyframes.
//!
//! Fusion is split into a read-only gather ([`fuse_pass`], data-parallel over
//! point × target pairs) and a sequential apply ([`apply_fusion`]). Actions
//! invalidated by an earlier action in the same batch are skipped as stale.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::device_store::{DeviceStore, StageTag};
use crate::error::Result;
use crate::exec::Executor;
use crate::geometry::{hamming, Vec3};
use crate::map::{KeyFrame, KeyFrameId, Map, MapPoint, MapPointId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub first_order: usize,
    pub second_order: usize,
    /// Search radius at level 0, scaled by the level scale at the predicted level.
    pub radius_px: f64,
    pub min_view_cos: f64,
    /// Multiplicative slack on the point's scale-derived distance band.
    pub scale_slack: f64,
    pub match_max_distance: u32,
    pub level_window: u8,
    /// Gather/apply rounds per call; fusion stops earlier once a round finds nothing.
    pub max_rounds: usize,
    /// Bytes per map-point record sent with each fusion batch.
    pub point_record_bytes: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            first_order: 20,
            second_order: 5,
            radius_px: 3.0,
            min_view_cos: 0.5,
            scale_slack: 1.2,
            match_max_distance: 50,
            level_window: 1,
            max_rounds: 8,
            point_record_bytes: 48,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseKind {
    Merge,
    AddObservation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FuseAction {
    pub target_kf_id: KeyFrameId,
    pub mp_id_projected: MapPointId,
    pub kp_index_hit: usize,
    pub existing_mp_id: Option<MapPointId>,
    pub kind: FuseKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionCounts {
    pub merged: usize,
    pub observations_added: usize,
    pub stale: usize,
}

impl std::ops::AddAssign for FusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.merged += o.merged;
        self.observations_added += o.observations_added;
        self.stale += o.stale;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub counts: FusionCounts,
    pub rounds: usize,
    pub targets: Vec<KeyFrameId>,
}

/// Top-`n1` covisible keyframes, then each one's top-`n2` neighbors other than
/// `current`, deduplicated in discovery order.
pub fn collect_fusion_targets(map: &Map, current: KeyFrameId, n1: usize, n2: usize) -> Result<Vec<KeyFrameId>> {
    let first = map.covisible_neighbors(current, n1)?;
    let mut seen: BTreeSet<KeyFrameId> = first.iter().copied().collect();
    seen.insert(current);
    let mut out = first.clone();
    for f in &first {
        let second = map.covisibility_weights(*f);
        let picks = second
            .into_iter()
            .filter(|(k, w)| *k != current && *w >= map.config().min_covis_weight)
            .take(n2);
        for (k, _) in picks {
            if seen.insert(k) {
                out.push(k);
            }
        }
    }
    Ok(out)
}

/// Observation-derived geometry of a map point used to predict its appearance.
struct PointGeometry {
    position: Vec3,
    normal: Vec3,
    /// Level-0-equivalent distances `dist / scale^level` over all observations.
    d0_min: f64,
    d0_max: f64,
    d0_ref: f64,
}

fn point_geometry(map: &Map, p: &MapPoint) -> Option<PointGeometry> {
    let mut normal = Vec3::zeros();
    let mut d0_min = f64::INFINITY;
    let mut d0_max: f64 = 0.0;
    let mut d0_ref = None;
    for &(kf, kp) in p.observations() {
        let frame = map.keyframe(kf)?;
        let ray = p.position - frame.camera_center();
        let dist = ray.norm();
        if dist <= 0.0 {
            continue;
        }
        normal += ray / dist;
        let d0 = dist / frame.intrinsics.level_scale(frame.level(kp as usize));
        d0_min = d0_min.min(d0);
        d0_max = d0_max.max(d0);
        d0_ref.get_or_insert(d0);
    }
    let n = normal.norm();
    (n > 0.0).then(|| PointGeometry {
        position: p.position,
        normal: normal / n,
        d0_min,
        d0_max,
        d0_ref: d0_ref.unwrap_or(d0_min),
    })
}

/// Parameters of a guided search for one map point in one keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSearch {
    /// Radius at level 0, scaled by the level scale at the predicted level.
    pub radius_px: f64,
    pub min_view_cos: f64,
    pub scale_slack: f64,
    pub match_max_distance: u32,
    pub level_window: u8,
}

impl From<&FusionConfig> for ProjectionSearch {
    fn from(c: &FusionConfig) -> Self {
        Self {
            radius_px: c.radius_px,
            min_view_cos: c.min_view_cos,
            scale_slack: c.scale_slack,
            match_max_distance: c.match_max_distance,
            level_window: c.level_window,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionHit {
    /// Outside the image, the distance band or the viewing cone.
    OutOfView,
    InViewUnmatched,
    /// Keypoint index and descriptor distance.
    Matched(usize, u32),
}

/// Projects `mp` into `target` and picks the closest descriptor among the
/// keypoints inside the search radius (ties: lowest index). Points already
/// observed by `target` are reported out of view.
pub fn search_by_projection(map: &Map, target: &KeyFrame, mp: MapPointId, s: &ProjectionSearch) -> ProjectionHit {
    let Some(point) = map.live_point(mp) else {
        return ProjectionHit::OutOfView;
    };
    if point.is_observed_by(target.id) {
        return ProjectionHit::OutOfView;
    }
    let Some(g) = point_geometry(map, point) else {
        return ProjectionHit::OutOfView;
    };
    let k = &target.intrinsics;
    let Some(pix) = crate::geometry::project(k, &target.pose.transform_point(&g.position)) else {
        return ProjectionHit::OutOfView;
    };
    let ray = g.position - target.camera_center();
    let dist = ray.norm();
    let top = k.level_scale(k.num_levels - 1) * k.scale_factor;
    if dist < g.d0_min / s.scale_slack || dist > g.d0_max * top * s.scale_slack {
        return ProjectionHit::OutOfView;
    }
    if ray.dot(&g.normal) / dist < s.min_view_cos {
        return ProjectionHit::OutOfView;
    }
    let predicted = ((dist / g.d0_ref).ln() / k.scale_factor.ln())
        .floor()
        .clamp(0.0, (k.num_levels - 1) as f64) as u8;
    let radius = s.radius_px * k.level_scale(predicted);

    let desc = point.rep_descriptor();
    let mut best: Option<(usize, u32)> = None;
    for j in target.keypoints_in_radius(&pix, radius) {
        if target.level(j).abs_diff(predicted) > s.level_window {
            continue;
        }
        let d = hamming(desc, target.descriptor(j));
        if d <= s.match_max_distance && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    match best {
        Some((j, d)) => ProjectionHit::Matched(j, d),
        None => ProjectionHit::InViewUnmatched,
    }
}

fn fuse_one(map: &Map, target: &KeyFrame, mp: MapPointId, cfg: &FusionConfig) -> Option<FuseAction> {
    let ProjectionHit::Matched(j, _) = search_by_projection(map, target, mp, &cfg.into()) else {
        return None;
    };
    let existing = target.binding(j);
    Some(FuseAction {
        target_kf_id: target.id,
        mp_id_projected: mp,
        kp_index_hit: j,
        existing_mp_id: existing,
        kind: if existing.is_some() {
            FuseKind::Merge
        } else {
            FuseKind::AddObservation
        },
    })
}

/// Projects `points` into `target` and proposes one action per point at most.
pub fn fuse_pass(
    map: &Map,
    points: &[MapPointId],
    target: KeyFrameId,
    cfg: &FusionConfig,
    exec: &Executor,
) -> Vec<FuseAction> {
    fuse_pass_many(map, points, &[target], cfg, exec)
}

/// Target-major concatenation of [`fuse_pass`] over several targets, one
/// parallel task per (point, target) pair.
pub fn fuse_pass_many(
    map: &Map,
    points: &[MapPointId],
    targets: &[KeyFrameId],
    cfg: &FusionConfig,
    exec: &Executor,
) -> Vec<FuseAction> {
    let frames: Vec<Option<&KeyFrame>> = targets.iter().map(|t| map.live_keyframe(*t).ok()).collect();
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    exec.map(n * targets.len(), |task| {
        let frame = frames[task / n]?;
        fuse_one(map, frame, points[task % n], cfg)
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Applies actions in order. The point with fewer observations loses a
/// merge (ties: the higher id loses).
pub fn apply_fusion(map: &mut Map, actions: &[FuseAction]) -> FusionCounts {
    let mut counts = FusionCounts::default();
    for a in actions {
        let applied = match a.kind {
            FuseKind::Merge => apply_merge(map, a),
            FuseKind::AddObservation => apply_add(map, a),
        };
        match (applied, a.kind) {
            (true, FuseKind::Merge) => counts.merged += 1,
            (true, FuseKind::AddObservation) => counts.observations_added += 1,
            (false, _) => counts.stale += 1,
        }
    }
    counts
}

fn apply_merge(map: &mut Map, a: &FuseAction) -> bool {
    let Some(existing) = a.existing_mp_id else {
        return false;
    };
    let bound_ok = map
        .live_keyframe(a.target_kf_id)
        .is_ok_and(|kf| kf.binding(a.kp_index_hit) == Some(existing));
    let (Some(p), Some(q)) = (map.live_point(a.mp_id_projected), map.live_point(existing)) else {
        return false;
    };
    if !bound_ok || p.id == q.id {
        return false;
    }
    let (np, nq) = (p.num_observations(), q.num_observations());
    let (loser, winner) = if np < nq || (np == nq && p.id > q.id) {
        (p.id, q.id)
    } else {
        (q.id, p.id)
    };
    map.replace_map_point(loser, winner).is_ok()
}

fn apply_add(map: &mut Map, a: &FuseAction) -> bool {
    let slot_free = map
        .live_keyframe(a.target_kf_id)
        .is_ok_and(|kf| kf.binding(a.kp_index_hit).is_none());
    slot_free
        && map
            .add_observation(a.mp_id_projected, a.target_kf_id, a.kp_index_hit)
            .is_ok()
}

fn live_bound_points(kf: &KeyFrame, map: &Map) -> Vec<MapPointId> {
    kf.bound_points()
        .map(|(_, mp)| mp)
        .filter(|mp| map.live_point(*mp).is_some())
        .collect()
}

/// Forward (current into targets) then reverse (targets into current),
/// repeated until a round changes nothing or `max_rounds` is reached.
pub fn run_fusion(
    map: &mut Map,
    store: &mut DeviceStore,
    current: KeyFrameId,
    cfg: &FusionConfig,
    exec: &Executor,
) -> Result<FusionReport> {
    let mut report = FusionReport::default();
    let current_points = live_bound_points(map.live_keyframe(current)?, map);
    store.record_small_transfer(StageTag::Fusion, current_points.len() as u64 * cfg.point_record_bytes);

    for round in 0..cfg.max_rounds {
        let targets = collect_fusion_targets(map, current, cfg.first_order, cfg.second_order)?;
        let mut accessed = vec![current];
        accessed.extend(&targets);
        store.record_neighbor_access(StageTag::Fusion, &accessed)?;
        if round == 0 {
            report.targets = targets.clone();
        }
        report.rounds = round + 1;

        let forward_points = live_bound_points(map.live_keyframe(current)?, map);
        let forward = fuse_pass_many(map, &forward_points, &targets, cfg, exec);
        let mut counts = apply_fusion(map, &forward);

        let mut seen = BTreeSet::new();
        let mut reverse_points = Vec::new();
        for t in &targets {
            if let Ok(kf) = map.live_keyframe(*t) {
                for mp in live_bound_points(kf, map) {
                    let observed = map.live_point(mp).is_some_and(|p| p.is_observed_by(current));
                    if !observed && seen.insert(mp) {
                        reverse_points.push(mp);
                    }
                }
            }
        }
        let reverse = fuse_pass(map, &reverse_points, current, cfg, exec);
        counts += apply_fusion(map, &reverse);

        report.counts += counts;
        if counts.merged + counts.observations_added == 0 {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device_store::DeviceStoreConfig;
    use crate::geometry::{BinaryDescriptor, CameraIntrinsics, KeyPoint, SE3Pose};
    use crate::map::MapConfig;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640, 480, 8, 1.2).unwrap()
    }

    fn pose(x: f64) -> SE3Pose {
        SE3Pose::from_camera_center(UnitQuaternion::identity(), Vec3::new(x, 0.0, 0.0))
    }

    /// Landmarks in a slab 4–6 m in front of cameras translating along x.
    struct World {
        landmarks: Vec<Vec3>,
        descriptors: Vec<BinaryDescriptor>,
    }

    fn world(n: usize, seed: u64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        World {
            landmarks: (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(4.0..6.0),
                    )
                })
                .collect(),
            descriptors: (0..n).map(|_| BinaryDescriptor(rng.random())).collect(),
        }
    }

    /// Keypoint levels follow `floor(log_1.2(dist / 3.5))`.
    fn level_for(dist: f64) -> u8 {
        ((dist / 3.5).ln() / 1.2f64.ln()).floor().clamp(0.0, 7.0) as u8
    }

    fn keyframe(w: &World, id: u64, p: SE3Pose) -> (KeyFrame, Vec<usize>) {
        let mut kps = Vec::new();
        let mut descs = Vec::new();
        let mut which = Vec::new();
        for (l, x) in w.landmarks.iter().enumerate() {
            if let Some(pix) = crate::geometry::project(&k(), &p.transform_point(x)) {
                let dist = (x - p.camera_center()).norm();
                kps.push(KeyPoint {
                    u: pix.x,
                    v: pix.y,
                    level: level_for(dist),
                    descriptor_index: kps.len(),
                });
                descs.push(w.descriptors[l]);
                which.push(l);
            }
        }
        (
            KeyFrame::new(KeyFrameId(id), id as f64, p, k(), kps, descs).unwrap(),
            which,
        )
    }

    struct Fixture {
        map: Map,
        store: DeviceStore,
        which: Vec<Vec<usize>>,
    }

    fn fixture(w: &World, xs: &[f64]) -> Fixture {
        let mut map = Map::new(MapConfig::default());
        let mut store = DeviceStore::new(DeviceStoreConfig::default());
        let mut which = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let (kf, wh) = keyframe(w, i as u64, pose(*x));
            store.upload_keyframe(&kf).unwrap();
            map.insert_keyframe(kf).unwrap();
            which.push(wh);
        }
        Fixture { map, store, which }
    }

    fn kp_of(f: &Fixture, kf: usize, landmark: usize) -> Option<usize> {
        f.which[kf].iter().position(|&l| l == landmark)
    }

    /// Binds `landmark` as a map point observed in the listed keyframes.
    fn bind(f: &mut Fixture, w: &World, landmark: usize, kfs: &[usize]) -> MapPointId {
        let obs: Vec<(KeyFrameId, usize)> = kfs
            .iter()
            .map(|&i| (KeyFrameId(i as u64), kp_of(f, i, landmark).unwrap()))
            .collect();
        f.map.create_map_point(w.landmarks[landmark], obs[0].0, &obs).unwrap()
    }

    fn common_landmarks(f: &Fixture, kfs: &[usize]) -> Vec<usize> {
        (0..f.which.iter().flatten().max().map_or(0, |m| m + 1))
            .filter(|l| kfs.iter().all(|&i| kp_of(f, i, *l).is_some()))
            .collect()
    }

    #[test]
    fn fusion_targets_walk_the_graph() {
        let w = world(200, 1);
        let mut f = fixture(&w, &[0.0, 0.2, 0.4, 0.6]);
        // Chain 0–1 (weight 1), 1–2 (weight 3); 3 isolated.
        let shared01 = common_landmarks(&f, &[0, 1]);
        bind(&mut f, &w, shared01[0], &[0, 1]);
        let shared12 = common_landmarks(&f, &[1, 2]);
        for l in &shared12[10..13] {
            bind(&mut f, &w, *l, &[1, 2]);
        }
        let t = collect_fusion_targets(&f.map, KeyFrameId(0), 1, 1).unwrap();
        assert_eq!(t, vec![KeyFrameId(1), KeyFrameId(2)]);
        assert!(collect_fusion_targets(&f.map, KeyFrameId(3), 5, 5).unwrap().is_empty());
        let t = collect_fusion_targets(&f.map, KeyFrameId(1), 5, 5).unwrap();
        assert_eq!(t, vec![KeyFrameId(2), KeyFrameId(0)]);
    }

    #[test]
    fn injected_duplicate_yields_one_merge() {
        let w = world(200, 2);
        let mut f = fixture(&w, &[0.0, 0.2, 0.4]);
        let l = common_landmarks(&f, &[0, 1, 2])[0];
        let a = bind(&mut f, &w, l, &[0, 1]);
        let kp2 = kp_of(&f, 2, l).unwrap();
        let b = f
            .map
            .create_map_point(w.landmarks[l], KeyFrameId(2), &[(KeyFrameId(2), kp2)])
            .unwrap();
        let cfg = FusionConfig::default();
        let actions = fuse_pass(&f.map, &[a], KeyFrameId(2), &cfg, &Executor::Sequential);
        assert_eq!(
            actions,
            vec![FuseAction {
                target_kf_id: KeyFrameId(2),
                mp_id_projected: a,
                kp_index_hit: kp2,
                existing_mp_id: Some(b),
                kind: FuseKind::Merge,
            }]
        );
        let c = apply_fusion(&mut f.map, &actions);
        assert_eq!(c.merged, 1);
        assert!(!f.map.point(b).unwrap().is_alive());
        assert_eq!(f.map.point(a).unwrap().num_observations(), 3);
        assert!(f.map.audit().is_empty());
    }

    #[test]
    fn out_of_view_and_unbound_hits() {
        let w = world(200, 3);
        let mut f = fixture(&w, &[0.0, 0.2]);
        let l = common_landmarks(&f, &[0, 1])[0];
        let a = f
            .map
            .create_map_point(
                w.landmarks[l],
                KeyFrameId(0),
                &[(KeyFrameId(0), kp_of(&f, 0, l).unwrap())],
            )
            .unwrap();
        let actions = fuse_pass(
            &f.map,
            &[a],
            KeyFrameId(1),
            &FusionConfig::default(),
            &Executor::Sequential,
        );
        assert_eq!(actions.len(), 1);
        assert_eq!(actions[0].kind, FuseKind::AddObservation);
        assert_eq!(actions[0].kp_index_hit, kp_of(&f, 1, l).unwrap());

        f.map.set_point_position(a, Vec3::new(50.0, 0.0, 5.0)).unwrap();
        assert!(fuse_pass(
            &f.map,
            &[a],
            KeyFrameId(1),
            &FusionConfig::default(),
            &Executor::Sequential
        )
        .is_empty());
    }

    #[test]
    fn stale_actions_are_skipped() {
        let w = world(200, 4);
        let mut f = fixture(&w, &[0.0, 0.2, 0.4]);
        let l = common_landmarks(&f, &[0, 1, 2])[0];
        let p = bind(&mut f, &w, l, &[0]);
        let q = bind(&mut f, &w, l, &[1]);
        let loser_hit = FuseAction {
            target_kf_id: KeyFrameId(1),
            mp_id_projected: p,
            kp_index_hit: kp_of(&f, 1, l).unwrap(),
            existing_mp_id: Some(q),
            kind: FuseKind::Merge,
        };
        let c = apply_fusion(&mut f.map, &[loser_hit, loser_hit]);
        assert_eq!(
            c,
            FusionCounts {
                merged: 1,
                observations_added: 0,
                stale: 1
            }
        );
        assert_eq!(apply_fusion(&mut f.map, &[]), FusionCounts::default());
        assert!(f.map.audit().is_empty());
    }

    #[test]
    fn merge_plus_add_changes_counts_by_set_union() {
        let w = world(200, 5);
        let mut f = fixture(&w, &[0.0, 0.2, 0.4]);
        let ls = common_landmarks(&f, &[0, 1, 2]);
        let p = bind(&mut f, &w, ls[0], &[0, 1]);
        let q = bind(&mut f, &w, ls[0], &[2]);
        let r = bind(&mut f, &w, ls[1], &[0, 1]);
        let points_before = f.map.num_live_points();
        let obs_before = f.map.num_observations();
        let actions = [
            FuseAction {
                target_kf_id: KeyFrameId(2),
                mp_id_projected: p,
                kp_index_hit: kp_of(&f, 2, ls[0]).unwrap(),
                existing_mp_id: Some(q),
                kind: FuseKind::Merge,
            },
            FuseAction {
                target_kf_id: KeyFrameId(2),
                mp_id_projected: r,
                kp_index_hit: kp_of(&f, 2, ls[1]).unwrap(),
                existing_mp_id: None,
                kind: FuseKind::AddObservation,
            },
        ];
        let c = apply_fusion(&mut f.map, &actions);
        assert_eq!((c.merged, c.observations_added), (1, 1));
        assert_eq!(f.map.num_live_points(), points_before - 1);
        // Disjoint merge keeps every observation, the add contributes one more.
        assert_eq!(f.map.num_observations(), obs_before + 1);
        assert!(f.map.audit().is_empty());
    }

    #[test]
    fn run_fusion_merges_all_injected_pairs_and_is_idempotent() {
        let w = world(300, 6);
        let mut f = fixture(&w, &[0.0, 0.15, 0.3, 0.45]);
        let ls = common_landmarks(&f, &[0, 1, 2, 3]);
        assert!(ls.len() > 60);
        // Every landmark bound once in (0,1); the first k also as a second point in (2,3).
        let k = 12;
        for l in &ls[..40] {
            bind(&mut f, &w, *l, &[0, 1]);
        }
        for l in &ls[..k] {
            bind(&mut f, &w, *l, &[2, 3]);
        }
        // Give kf3 covisibility with the rest of the map.
        for l in &ls[40..50] {
            bind(&mut f, &w, *l, &[0, 1, 2, 3]);
        }
        let before = f.map.num_live_points();
        let cfg = FusionConfig::default();
        let r = run_fusion(&mut f.map, &mut f.store, KeyFrameId(3), &cfg, &Executor::Sequential).unwrap();
        assert_eq!(r.counts.merged, k, "{r:?}");
        assert_eq!(f.map.num_live_points(), before - k);
        assert!(f.map.audit().is_empty());
        let again = run_fusion(&mut f.map, &mut f.store, KeyFrameId(3), &cfg, &Executor::Sequential).unwrap();
        assert_eq!(again.counts.merged + again.counts.observations_added, 0);
    }

    #[test]
    fn no_duplicates_means_no_merges() {
        let w = world(300, 7);
        let mut f = fixture(&w, &[0.0, 0.15, 0.3]);
        let ls = common_landmarks(&f, &[0, 1, 2]);
        for l in &ls[..30] {
            bind(&mut f, &w, *l, &[0, 1, 2]);
        }
        let before = f.map.num_live_points();
        let r = run_fusion(
            &mut f.map,
            &mut f.store,
            KeyFrameId(2),
            &FusionConfig::default(),
            &Executor::Sequential,
        )
        .unwrap();
        assert_eq!(r.counts.merged, 0);
        assert_eq!(f.map.num_live_points(), before);
    }

    #[test]
    fn parallel_gather_matches_sequential() {
        let w = world(400, 8);
        let mut f = fixture(&w, &[0.0, 0.1, 0.2, 0.3]);
        let ls = common_landmarks(&f, &[0, 1, 2, 3]);
        let mut pts = Vec::new();
        for (i, l) in ls.iter().enumerate() {
            let kfs: &[usize] = if i % 3 == 0 {
                &[0, 1]
            } else if i % 3 == 1 {
                &[2]
            } else {
                &[3, 1]
            };
            pts.push(bind(&mut f, &w, *l, kfs));
        }
        let targets = [KeyFrameId(0), KeyFrameId(1), KeyFrameId(2), KeyFrameId(3)];
        let cfg = FusionConfig::default();
        let seq = fuse_pass_many(&f.map, &pts, &targets, &cfg, &Executor::Sequential);
        let par = fuse_pass_many(&f.map, &pts, &targets, &cfg, &Executor::with_workers(4));
        assert!(!seq.is_empty());
        assert_eq!(seq, par);
    }
}
