//! Reference implementations and scene builders shared by the integration tests.
//!
//! The oracles are deliberately naive: full scans instead of grids, one
//! thread, and a dense normal-equation assembly straight from the factors.
#![allow(dead_code)]

use localmap_core::ba::{residual_and_jacobian, BAConfig, BAWindow};
use localmap_core::device_store::{DeviceStore, DeviceStoreConfig};
use localmap_core::fusion::{collect_fusion_targets, FuseAction, FuseKind, FusionConfig};
use localmap_core::geometry::{epipolar_error_with, hamming, project, Pixel, TwoView, Vec3};
use localmap_core::map::{KeyFrame, KeyFrameId, Map, MapConfig, MapPointId};
use localmap_core::pipeline::{AssociationConfig, Pipeline, PipelineConfig, RunOutput};
use localmap_core::synth::{associate, ate_rmse, generate_sequence, Sequence, TrajectoryKind, WorldConfig};
use localmap_core::triangulation::{MatchCandidate, TriangulationConfig};
use localmap_core::{BinaryDescriptor, CameraIntrinsics, KeyPoint, SE3Pose};
use nalgebra::{DMatrix, DVector, Matrix2x3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Matrix2x6 = nalgebra::SMatrix<f64, 2, 6>;

// ---------------------------------------------------------------------------
// Oracles.

/// Full-scan search for triangulation between two keyframes.
pub fn oracle_search(current: &KeyFrame, neighbor: &KeyFrame, cfg: &TriangulationConfig) -> Vec<MatchCandidate> {
    let Ok(f) = TwoView::new(current.pose, neighbor.pose, current.intrinsics, neighbor.intrinsics).fundamental() else {
        return Vec::new();
    };
    let mut best: Vec<Option<(u32, usize)>> = vec![None; current.len()];
    for (i, slot) in best.iter_mut().enumerate() {
        if current.binding(i).is_some() {
            continue;
        }
        for j in 0..neighbor.len() {
            if neighbor.binding(j).is_some() || current.level(i).abs_diff(neighbor.level(j)) > cfg.level_window {
                continue;
            }
            let d = hamming(current.descriptor(i), neighbor.descriptor(j));
            if d > cfg.match_max_distance {
                continue;
            }
            let err = epipolar_error_with(&f, &current.keypoints[i].pixel(), &neighbor.keypoints[j].pixel());
            if err > cfg.chi2_epi * neighbor.intrinsics.level_sigma2(neighbor.level(j)) {
                continue;
            }
            if slot.is_none_or(|(bd, bj)| (d, j) < (bd, bj)) {
                *slot = Some((d, j));
            }
        }
    }
    let mut out = Vec::new();
    for (i, m) in best.iter().enumerate() {
        let Some((d, j)) = *m else { continue };
        let beaten = best
            .iter()
            .enumerate()
            .any(|(i2, m2)| matches!(*m2, Some((d2, j2)) if j2 == j && (d2, i2) < (d, i)));
        if !beaten {
            out.push(MatchCandidate {
                neighbor_kf_id: neighbor.id,
                kp_index_current: i,
                kp_index_neighbor: j,
                distance: d,
            });
        }
    }
    out
}

/// Full-scan projection search of one point into one keyframe.
pub fn oracle_project(map: &Map, target: &KeyFrame, mp: MapPointId, cfg: &FusionConfig) -> Option<FuseAction> {
    let p = map.live_point(mp)?;
    if p.is_observed_by(target.id) {
        return None;
    }
    let mut normal = Vec3::zeros();
    let mut d0s = Vec::new();
    for &(kf, kp) in p.observations() {
        let frame = map.keyframe(kf)?;
        let ray = p.position - frame.camera_center();
        normal += ray / ray.norm();
        d0s.push(ray.norm() / frame.intrinsics.level_scale(frame.level(kp as usize)));
    }
    let normal = normal / normal.norm();
    let d0_min = d0s.iter().copied().fold(f64::INFINITY, f64::min);
    let d0_max = d0s.iter().copied().fold(0.0, f64::max);
    let k = &target.intrinsics;
    let pix = project(k, &target.pose.transform_point(&p.position))?;
    let ray = p.position - target.camera_center();
    let dist = ray.norm();
    let far = d0_max * k.level_scale(k.num_levels - 1) * k.scale_factor * cfg.scale_slack;
    if dist < d0_min / cfg.scale_slack || dist > far || ray.dot(&normal) / dist < cfg.min_view_cos {
        return None;
    }
    let level = ((dist / d0s[0]).ln() / k.scale_factor.ln())
        .floor()
        .clamp(0.0, (k.num_levels - 1) as f64) as u8;
    let r = cfg.radius_px * k.level_scale(level);
    let mut best: Option<(u32, usize)> = None;
    for j in 0..target.len() {
        let off: Pixel = target.keypoints[j].pixel() - pix;
        if off.norm_squared() > r * r || target.level(j).abs_diff(level) > cfg.level_window {
            continue;
        }
        let d = hamming(p.rep_descriptor(), target.descriptor(j));
        if d <= cfg.match_max_distance && best.is_none_or(|b| (d, j) < b) {
            best = Some((d, j));
        }
    }
    let (_, j) = best?;
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

/// Target-major gather over `targets` × `points`.
pub fn oracle_fuse(map: &Map, points: &[MapPointId], targets: &[KeyFrameId], cfg: &FusionConfig) -> Vec<FuseAction> {
    let mut out = Vec::new();
    for t in targets {
        let Ok(frame) = map.live_keyframe(*t) else { continue };
        for mp in points {
            out.extend(oracle_project(map, frame, *mp, cfg));
        }
    }
    out
}

/// Damped step from the full system assembled factor by factor.
pub fn oracle_dense_step(
    map: &Map,
    window: &BAWindow,
    cfg: &BAConfig,
    lambda: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = 6 * window.local_kf_ids.len();
    let n = np + 3 * window.point_ids.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for f in &window.factors {
        let kf = map.keyframe(f.kf_id)?;
        let point = map.point(f.point_id)?;
        let Some(lin) = residual_and_jacobian(
            &kf.pose,
            &kf.intrinsics,
            &point.position,
            &f.observed,
            f.level,
            cfg.huber_delta,
        ) else {
            continue;
        };
        let mut j = DMatrix::<f64>::zeros(2, n);
        if let Some(a) = window.local_kf_ids.iter().position(|k| *k == f.kf_id) {
            j.view_mut((0, 6 * a), (2, 6)).copy_from(&lin.j_pose);
        }
        let l = window.point_ids.iter().position(|p| *p == f.point_id)?;
        j.view_mut((0, np + 3 * l), (2, 3)).copy_from(&lin.j_point);
        h += j.transpose() * &j * lin.weight;
        b += j.transpose() * lin.residual * lin.weight;
    }
    for i in 0..n {
        h[(i, i)] += lambda;
    }
    let x = h.lu().solve(&-b)?;
    Some((x.rows(0, np).into_owned(), x.rows(np, n - np).into_owned()))
}

/// Central differences of the whitened residual over the pose retraction and the point.
pub fn fd_jacobians(
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    point: &Vec3,
    observed: &Pixel,
    level: u8,
    h: f64,
) -> Option<(Matrix2x6, Matrix2x3<f64>)> {
    let r = |pose: &SE3Pose, x: &Vec3| {
        residual_and_jacobian(pose, k, x, observed, level, f64::INFINITY).map(|l| l.residual)
    };
    let mut jp = Matrix2x6::zeros();
    for c in 0..6 {
        let mut d = [0.0; 6];
        d[c] = h;
        let plus = pose.retract(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]));
        let minus = pose.retract(&-Vec3::new(d[0], d[1], d[2]), &-Vec3::new(d[3], d[4], d[5]));
        jp.set_column(c, &((r(&plus, point)? - r(&minus, point)?) / (2.0 * h)));
    }
    let mut jx = Matrix2x3::zeros();
    for c in 0..3 {
        let mut e = Vec3::zeros();
        e[c] = h;
        jx.set_column(c, &((r(pose, &(point + e))? - r(pose, &(point - e))?) / (2.0 * h)));
    }
    Some((jp, jx))
}

// ---------------------------------------------------------------------------
// Scenes.

pub fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        landmark_count: 900,
        keyframe_count: 8,
        features_per_kf: 180,
        trajectory: if seed.is_multiple_of(2) {
            TrajectoryKind::Line
        } else {
            TrajectoryKind::Orbit
        },
        ..WorldConfig::default()
    }
}

fn process(p: &mut Pipeline, seq: &Sequence, frames: std::ops::Range<usize>) {
    for f in &seq.frames[frames] {
        p.enqueue_keyframe(f.to_keyframe().expect("valid frame"));
        p.process_one();
    }
}

/// A map built from all but the last keyframe of a small sequence, with the
/// last one freshly inserted (no bindings yet). Returns the fresh keyframe
/// and the newest processed one, which has covisible neighbors.
pub fn matching_scene(seed: u64) -> (Map, [KeyFrameId; 2]) {
    let seq = generate_sequence(&small_world(seed)).expect("scene generates");
    let last = seq.frames.len() - 1;
    let mut p = Pipeline::new(PipelineConfig::baseline());
    process(&mut p, &seq, 0..last);
    let mut map = p.map().clone();
    let processed = map.live_keyframes().last().expect("keyframes").id;
    let fresh = map
        .insert_keyframe(seq.frames[last].to_keyframe().expect("valid frame"))
        .expect("insert");
    (map, [fresh, processed])
}

/// Keyframes of a small sequence straight from the generator, nothing bound.
pub fn raw_frames(seed: u64) -> Vec<KeyFrame> {
    let seq = generate_sequence(&small_world(seed)).expect("scene generates");
    seq.frames
        .iter()
        .map(|f| f.to_keyframe().expect("valid frame"))
        .collect()
}

/// A map with unfused duplicates: no association, fusion switched off.
pub fn fusion_scene(seed: u64) -> (Map, KeyFrameId, Vec<MapPointId>, Vec<KeyFrameId>) {
    let seq = generate_sequence(&WorldConfig {
        duplicate_injection_rate: 0.2,
        ..small_world(seed)
    })
    .expect("scene generates");
    let mut cfg = PipelineConfig::baseline();
    cfg.association = AssociationConfig {
        enabled: false,
        ..cfg.association
    };
    cfg.fusion.max_rounds = 0;
    let mut p = Pipeline::new(cfg);
    process(&mut p, &seq, 0..seq.frames.len());
    let map = p.map().clone();
    let current = map.live_keyframes().last().expect("keyframes").id;
    let points: Vec<MapPointId> = map
        .live_keyframe(current)
        .expect("live")
        .bound_points()
        .map(|(_, mp)| mp)
        .filter(|mp| map.live_point(*mp).is_some())
        .collect();
    let fc = FusionConfig::default();
    let targets = collect_fusion_targets(&map, current, fc.first_order, fc.second_order).expect("targets");
    (map, current, points, targets)
}

/// Random small BA problem: up to 5 keyframes around a point cloud, up to
/// 50 points, noisy observations and perturbed estimates.
pub fn ba_scene(seed: u64) -> Map {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics {
        fx: 450.0,
        fy: 450.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        num_levels: 8,
        scale_factor: 1.2,
    };
    let n_kf = rng.random_range(2..=5);
    let n_pt = rng.random_range(10..=50);
    let px = Normal::new(0.0, 1.0).expect("sigma");
    let poses: Vec<SE3Pose> = (0..n_kf)
        .map(|i| {
            let c = Vec3::new(
                0.3 * i as f64 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.1..0.1),
                0.0,
            );
            let r = UnitQuaternion::from_euler_angles(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            SE3Pose::from_camera_center(r, c)
        })
        .collect();
    let points: Vec<Vec3> = (0..n_pt)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.5..2.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(3.0..7.0),
            )
        })
        .collect();

    let mut map = Map::new(MapConfig {
        min_obs_keep: 1,
        ..MapConfig::default()
    });
    let mut slots: Vec<Vec<(KeyFrameId, usize)>> = vec![Vec::new(); n_pt];
    for (i, pose) in poses.iter().enumerate() {
        let mut kps = Vec::new();
        for (l, x) in points.iter().enumerate() {
            let Some(pix) = project(&k, &pose.transform_point(x)) else {
                continue;
            };
            let (u, v) = (pix.x + px.sample(&mut rng), pix.y + px.sample(&mut rng));
            if !k.in_image(&Pixel::new(u, v)) {
                continue;
            }
            slots[l].push((KeyFrameId(i as u64), kps.len()));
            kps.push(KeyPoint {
                u,
                v,
                level: rng.random_range(0..4),
                descriptor_index: kps.len(),
            });
        }
        let descs = (0..kps.len()).map(|_| BinaryDescriptor(rng.random())).collect();
        let noisy = if i < 2 {
            *pose
        } else {
            pose.retract(
                &Vec3::new(
                    rng.random_range(-1e-2..1e-2),
                    rng.random_range(-1e-2..1e-2),
                    rng.random_range(-1e-2..1e-2),
                ),
                &Vec3::new(
                    rng.random_range(-3e-2..3e-2),
                    rng.random_range(-3e-2..3e-2),
                    rng.random_range(-3e-2..3e-2),
                ),
            )
        };
        let kf = KeyFrame::new(KeyFrameId(i as u64), i as f64, noisy, k, kps, descs).expect("valid keyframe");
        map.insert_keyframe(kf).expect("insert");
    }
    for (l, obs) in slots.iter().enumerate() {
        if obs.len() >= 2 {
            let x = points[l]
                + Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.2..0.2),
                );
            map.create_map_point(x, obs[0].0, obs).expect("create");
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Evaluation helpers.

pub fn ate(seq: &Sequence, out: &RunOutput, align_scale: bool) -> f64 {
    let (est, gt) = associate(&out.trajectory, &seq.ground_truth_trajectory());
    ate_rmse(&est, &gt, align_scale).unwrap_or(f64::NAN)
}

/// A store with every live keyframe of `map` resident.
pub fn resident_store(map: &Map) -> DeviceStore {
    let mut store = DeviceStore::new(DeviceStoreConfig {
        capacity: usize::MAX,
        ..DeviceStoreConfig::default()
    });
    for kf in map.live_keyframes() {
        store.upload_keyframe(kf).expect("upload");
    }
    store
}

pub type PointPrint = (u64, bool, [u64; 3], Vec<(u64, u32)>);

/// Bitwise summary of keyframe poses and map points for equality checks.
pub fn map_fingerprint(map: &Map) -> (Vec<(u64, bool, String)>, Vec<PointPrint>) {
    let kfs = map
        .keyframes()
        .map(|k| (k.id.0, k.is_alive(), format!("{:?}", k.pose)))
        .collect();
    let points = map
        .points()
        .map(|p| {
            (
                p.id.0,
                p.is_alive(),
                [p.position.x.to_bits(), p.position.y.to_bits(), p.position.z.to_bits()],
                p.observations().iter().map(|(k, kp)| (k.0, *kp)).collect(),
            )
        })
        .collect();
    (kfs, points)
}
