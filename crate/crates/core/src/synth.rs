//! Synthetic worlds, keyframe sequences, trajectory files and ATE evaluation.
//!
//! A sequence is a list of keyframes with noisy keypoints and descriptors, the
//! pose prior a tracker would hand over, and a held-out ground-truth section
//! (true poses, landmark positions, per-keypoint landmark ids).

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, BinaryDescriptor, CameraIntrinsics, KeyPoint, SE3Pose, Vec3};
use crate::map::{KeyFrame, KeyFrameId, Map, MapConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Straight translation with the camera facing a slab of landmarks.
    Line,
    /// Circle around a cluster of landmarks, camera facing the center.
    Orbit,
    /// Closed circular corridor, camera facing the outer wall.
    CorridorLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub landmark_count: usize,
    /// Height of the landmark region across the direction of travel (m).
    pub world_extent: f64,
    pub trajectory: TrajectoryKind,
    pub keyframe_count: usize,
    /// Distance travelled between consecutive keyframes (m).
    pub kf_spacing: f64,
    /// Landmark depth band in front of the camera path (m).
    pub depth_min: f64,
    pub depth_max: f64,
    /// Keypoints kept per keyframe, most salient landmarks first.
    pub features_per_kf: usize,
    pub pixel_noise_sigma: f64,
    pub descriptor_flip_bits: u32,
    pub spurious_feature_fraction: f64,
    pub duplicate_injection_rate: f64,
    pub min_covisible: usize,
    pub max_placement_retries: usize,
    /// Per-keyframe noise of the relative motion (rad, m). Priors are chained
    /// like odometry, so their error grows as a random walk. The first two
    /// keyframes always carry their true pose.
    pub pose_prior_sigma_rot: f64,
    pub pose_prior_sigma_trans: f64,
    pub frame_rate: f64,
    /// Frames between keyframe insertions in the recorded schedule.
    pub kf_interval_frames: u32,
    pub intrinsics: CameraIntrinsics,
    /// Distance at which level 0 starts; each level covers one scale factor.
    pub level0_distance: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            landmark_count: 3000,
            world_extent: 4.0,
            trajectory: TrajectoryKind::Line,
            keyframe_count: 50,
            kf_spacing: 0.1,
            depth_min: 3.0,
            depth_max: 9.0,
            features_per_kf: 300,
            pixel_noise_sigma: 1.0,
            descriptor_flip_bits: 4,
            spurious_feature_fraction: 0.05,
            duplicate_injection_rate: 0.0,
            min_covisible: 30,
            max_placement_retries: 8,
            pose_prior_sigma_rot: 0.002,
            pose_prior_sigma_trans: 0.01,
            frame_rate: 20.0,
            kf_interval_frames: 10,
            intrinsics: CameraIntrinsics {
                fx: 450.0,
                fy: 450.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
                num_levels: 8,
                scale_factor: 1.2,
            },
            level0_distance: 2.5,
        }
    }
}

impl WorldConfig {
    /// Noise-free variant: exact keypoints, descriptors, pose priors, no clutter.
    pub fn noise_free(mut self) -> Self {
        self.pixel_noise_sigma = 0.0;
        self.descriptor_flip_bits = 0;
        self.spurious_feature_fraction = 0.0;
        self.pose_prior_sigma_rot = 0.0;
        self.pose_prior_sigma_trans = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let ok = self.landmark_count > 0
            && self.keyframe_count > 0
            && self.kf_spacing > 0.0
            && self.depth_min > 0.0
            && self.depth_max > self.depth_min
            && self.world_extent > 0.0
            && self.pixel_noise_sigma >= 0.0
            && self.descriptor_flip_bits <= 256
            && (0.0..1.0).contains(&self.spurious_feature_fraction)
            && (0.0..=1.0).contains(&self.duplicate_injection_rate)
            && self.pose_prior_sigma_rot >= 0.0
            && self.pose_prior_sigma_trans >= 0.0
            && self.frame_rate > 0.0
            && self.kf_interval_frames > 0
            && self.level0_distance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid world config: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub id: KeyFrameId,
    pub frame_index: u64,
    pub timestamp: f64,
    pub pose_prior: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<KeyPoint>,
    pub descriptors: Vec<BinaryDescriptor>,
}

impl SequenceFrame {
    pub fn to_keyframe(&self) -> Result<KeyFrame> {
        KeyFrame::new(
            self.id,
            self.timestamp,
            self.pose_prior,
            self.intrinsics,
            self.keypoints.clone(),
            self.descriptors.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFrame {
    pub id: KeyFrameId,
    pub pose: SE3Pose,
    /// Landmark instance behind each keypoint; `None` for clutter.
    pub landmark_ids: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub config: WorldConfig,
    pub frames: Vec<SequenceFrame>,
    pub ground_truth: Vec<GroundTruthFrame>,
    /// Landmark instances; twins share position and base descriptor.
    pub landmarks: Vec<Vec3>,
    /// `(original, twin)` landmark instance pairs.
    pub duplicates: Vec<(u64, u64)>,
}

impl Sequence {
    pub fn ground_truth_trajectory(&self) -> Vec<TrajectoryEntry> {
        self.frames
            .iter()
            .zip(&self.ground_truth)
            .map(|(f, g)| TrajectoryEntry {
                timestamp: f.timestamp,
                pose: g.pose,
            })
            .collect()
    }
}

fn look_rotation(forward: &Vec3) -> UnitQuaternion<f64> {
    let f = forward.normalize();
    let down = Vec3::new(0.0, 1.0, 0.0);
    let x = down.cross(&f).normalize();
    let y = f.cross(&x);
    UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, f]))
}

/// True camera poses along the configured path.
pub fn trajectory_poses(cfg: &WorldConfig) -> Vec<SE3Pose> {
    let mid_depth = 0.5 * (cfg.depth_min + cfg.depth_max);
    (0..cfg.keyframe_count)
        .map(|i| {
            let s = i as f64 * cfg.kf_spacing;
            match cfg.trajectory {
                TrajectoryKind::Line => SE3Pose::from_camera_center(UnitQuaternion::identity(), Vec3::new(s, 0.0, 0.0)),
                TrajectoryKind::Orbit => {
                    let a = s / mid_depth;
                    let c = Vec3::new(mid_depth * a.sin(), 0.0, -mid_depth * a.cos());
                    SE3Pose::from_camera_center(look_rotation(&-c), c)
                }
                TrajectoryKind::CorridorLoop => {
                    let r = cfg.depth_min;
                    let a = s / r;
                    let dir = Vec3::new(a.sin(), 0.0, a.cos());
                    SE3Pose::from_camera_center(look_rotation(&dir), dir * r)
                }
            }
        })
        .collect()
}

fn place_landmarks(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let h = 0.5 * cfg.world_extent;
    let path = cfg.kf_spacing * cfg.keyframe_count.saturating_sub(1) as f64;
    (0..cfg.landmark_count)
        .map(|_| {
            let y = rng.random_range(-h..h);
            match cfg.trajectory {
                TrajectoryKind::Line => {
                    let margin = cfg.depth_max * 0.6;
                    Vec3::new(
                        rng.random_range(-margin..path + margin),
                        y,
                        rng.random_range(cfg.depth_min..cfg.depth_max),
                    )
                }
                TrajectoryKind::Orbit => {
                    let r = 0.5 * (cfg.depth_max - cfg.depth_min);
                    loop {
                        let p = Vec3::new(
                            rng.random_range(-r..r),
                            rng.random_range(-r..r),
                            rng.random_range(-r..r),
                        );
                        if p.norm() <= r {
                            break p;
                        }
                    }
                }
                TrajectoryKind::CorridorLoop => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let rad = cfg.depth_min + rng.random_range(cfg.depth_min..cfg.depth_max);
                    Vec3::new(rad * a.sin(), y, rad * a.cos())
                }
            }
        })
        .collect()
}

fn level_for(cfg: &WorldConfig, dist: f64) -> u8 {
    let k = &cfg.intrinsics;
    ((dist / cfg.level0_distance).ln() / k.scale_factor.ln())
        .floor()
        .clamp(0.0, (k.num_levels - 1) as f64) as u8
}

/// Landmark indices visible from `pose`, most salient first, at most `features_per_kf`.
fn visible_landmarks(cfg: &WorldConfig, pose: &SE3Pose, landmarks: &[Vec3], saliency: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..landmarks.len())
        .filter(|&l| project(&cfg.intrinsics, &pose.transform_point(&landmarks[l])).is_some())
        .collect();
    v.sort_by_key(|&l| (saliency[l], l));
    v.truncate(cfg.features_per_kf);
    v
}

fn flipped(base: &BinaryDescriptor, bits: u32, rng: &mut ChaCha8Rng) -> BinaryDescriptor {
    let mut d = *base;
    if bits > 0 {
        for i in sample(rng, 256, bits as usize) {
            d.flip_bit(i);
        }
    }
    d
}

pub fn generate_sequence(cfg: &WorldConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let poses = trajectory_poses(cfg);

    let mut attempt = 0;
    let (landmarks, visible) = loop {
        let landmarks = place_landmarks(cfg, &mut rng);
        let saliency: Vec<u64> = (0..landmarks.len()).map(|_| rng.random()).collect();
        let visible: Vec<Vec<usize>> = poses
            .iter()
            .map(|p| visible_landmarks(cfg, p, &landmarks, &saliency))
            .collect();
        let worst = visible
            .windows(2)
            .map(|w| {
                let prev: BTreeSet<usize> = w[0].iter().copied().collect();
                w[1].iter().filter(|l| prev.contains(l)).count()
            })
            .min();
        let first = visible.first().map_or(0, Vec::len);
        let shared = worst.unwrap_or(first).min(first);
        if shared >= cfg.min_covisible {
            break (landmarks, visible);
        }
        attempt += 1;
        if attempt > cfg.max_placement_retries {
            return Err(Error::GenerationFailed(format!(
                "only {shared} landmarks shared between consecutive keyframes (need {}) after {attempt} placements",
                cfg.min_covisible
            )));
        }
    };

    let base_descriptors: Vec<BinaryDescriptor> =
        (0..landmarks.len()).map(|_| BinaryDescriptor(rng.random())).collect();
    let n_dup = (cfg.duplicate_injection_rate * landmarks.len() as f64).round() as usize;
    let mut originals: Vec<usize> = sample(&mut rng, landmarks.len(), n_dup).into_vec();
    originals.sort_unstable();
    let mut instances = landmarks.clone();
    let mut twin_of = vec![None; landmarks.len()];
    let mut duplicates = Vec::with_capacity(n_dup);
    for &o in &originals {
        let t = instances.len();
        instances.push(landmarks[o]);
        twin_of[o] = Some(t);
        duplicates.push((o as u64, t as u64));
    }

    let noise = Normal::new(0.0, cfg.pixel_noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rot_noise = Normal::new(0.0, cfg.pose_prior_sigma_rot).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let trans_noise =
        Normal::new(0.0, cfg.pose_prior_sigma_trans).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let k = cfg.intrinsics;

    let mut frames = Vec::with_capacity(poses.len());
    let mut ground_truth = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut entries: Vec<(KeyPoint, BinaryDescriptor, Option<u64>)> = Vec::new();
        for &l in &visible[i] {
            let x = landmarks[l];
            let pix = k.project_unchecked(&pose.transform_point(&x));
            let (u, v) = if cfg.pixel_noise_sigma > 0.0 {
                (pix.x + noise.sample(&mut rng), pix.y + noise.sample(&mut rng))
            } else {
                (pix.x, pix.y)
            };
            if !k.in_image(&crate::geometry::Pixel::new(u, v)) {
                continue;
            }
            // Twins alternate in blocks of three keyframes.
            let instance = match twin_of[l] {
                Some(t) if (i / 3) % 2 == 1 => t,
                _ => l,
            };
            let level = level_for(cfg, (x - pose.camera_center()).norm());
            let desc = flipped(&base_descriptors[l], cfg.descriptor_flip_bits, &mut rng);
            entries.push((
                KeyPoint {
                    u,
                    v,
                    level,
                    descriptor_index: 0,
                },
                desc,
                Some(instance as u64),
            ));
        }
        let n_spurious = (cfg.spurious_feature_fraction * entries.len() as f64).round() as usize;
        for _ in 0..n_spurious {
            let kp = KeyPoint {
                u: rng.random_range(0.0..k.width as f64),
                v: rng.random_range(0.0..k.height as f64),
                level: rng.random_range(0..k.num_levels),
                descriptor_index: 0,
            };
            entries.push((kp, BinaryDescriptor(rng.random()), None));
        }
        // Keypoint order carries no information about landmark identity.
        for j in (1..entries.len()).rev() {
            entries.swap(j, rng.random_range(0..=j));
        }

        let pose_prior = if i < 2 || (cfg.pose_prior_sigma_rot == 0.0 && cfg.pose_prior_sigma_trans == 0.0) {
            *pose
        } else {
            // Noisy relative motion chained onto the previous prior.
            let motion = pose.compose(&poses[i - 1].inverse());
            let w = Vec3::new(
                rot_noise.sample(&mut rng),
                rot_noise.sample(&mut rng),
                rot_noise.sample(&mut rng),
            );
            let t = Vec3::new(
                trans_noise.sample(&mut rng),
                trans_noise.sample(&mut rng),
                trans_noise.sample(&mut rng),
            );
            motion
                .retract(&w, &t)
                .compose(&frames.last().map_or(*pose, |f: &SequenceFrame| f.pose_prior))
        };
        let frame_index = i as u64 * u64::from(cfg.kf_interval_frames);
        let id = KeyFrameId(i as u64);
        let mut keypoints = Vec::with_capacity(entries.len());
        let mut descriptors = Vec::with_capacity(entries.len());
        let mut landmark_ids = Vec::with_capacity(entries.len());
        for (j, (mut kp, d, l)) in entries.into_iter().enumerate() {
            kp.descriptor_index = j;
            keypoints.push(kp);
            descriptors.push(d);
            landmark_ids.push(l);
        }
        frames.push(SequenceFrame {
            id,
            frame_index,
            timestamp: frame_index as f64 / cfg.frame_rate,
            pose_prior,
            intrinsics: k,
            keypoints,
            descriptors,
        });
        ground_truth.push(GroundTruthFrame {
            id,
            pose: *pose,
            landmark_ids,
        });
    }

    Ok(Sequence {
        config: cfg.clone(),
        frames,
        ground_truth,
        landmarks: instances,
        duplicates,
    })
}

// ---------------------------------------------------------------------------
// Sequence file: one JSON object per line.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PoseRecord {
    /// `[x, y, z, w]`
    q: [f64; 4],
    t: [f64; 3],
}

impl From<&SE3Pose> for PoseRecord {
    fn from(p: &SE3Pose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            q: [q.i, q.j, q.k, q.w],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<&PoseRecord> for SE3Pose {
    fn from(r: &PoseRecord) -> Self {
        let q = nalgebra::Quaternion::new(r.q[3], r.q[0], r.q[1], r.q[2]);
        SE3Pose::new(UnitQuaternion::new_unchecked(q), Vec3::new(r.t[0], r.t[1], r.t[2]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header {
        config: WorldConfig,
        keyframes: usize,
    },
    Keyframe {
        id: u64,
        frame_index: u64,
        timestamp: f64,
        pose_prior: PoseRecord,
        intrinsics: CameraIntrinsics,
        /// `[u, v, level]`
        keypoints: Vec<(f64, f64, u8)>,
        descriptors: Vec<BinaryDescriptor>,
    },
    GroundTruth {
        id: u64,
        pose: PoseRecord,
        landmark_ids: Vec<Option<u64>>,
    },
    Landmarks {
        positions: Vec<[f64; 3]>,
        duplicates: Vec<(u64, u64)>,
    },
}

pub fn write_sequence<W: Write>(seq: &Sequence, mut out: W) -> Result<()> {
    let mut emit = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Line::Header {
        config: seq.config.clone(),
        keyframes: seq.frames.len(),
    })?;
    for f in &seq.frames {
        emit(&Line::Keyframe {
            id: f.id.0,
            frame_index: f.frame_index,
            timestamp: f.timestamp,
            pose_prior: (&f.pose_prior).into(),
            intrinsics: f.intrinsics,
            keypoints: f.keypoints.iter().map(|k| (k.u, k.v, k.level)).collect(),
            descriptors: f.descriptors.clone(),
        })?;
    }
    for g in &seq.ground_truth {
        emit(&Line::GroundTruth {
            id: g.id.0,
            pose: (&g.pose).into(),
            landmark_ids: g.landmark_ids.clone(),
        })?;
    }
    emit(&Line::Landmarks {
        positions: seq.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect(),
        duplicates: seq.duplicates.clone(),
    })
}

pub fn read_sequence<R: BufRead>(input: R) -> Result<Sequence> {
    let mut config = None;
    let mut expected = 0;
    let mut frames = Vec::new();
    let mut ground_truth = Vec::new();
    let mut landmarks = Vec::new();
    let mut duplicates = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        match parsed {
            Line::Header { config: c, keyframes } => {
                config = Some(c);
                expected = keyframes;
            }
            Line::Keyframe {
                id,
                frame_index,
                timestamp,
                pose_prior,
                intrinsics,
                keypoints,
                descriptors,
            } => frames.push(SequenceFrame {
                id: KeyFrameId(id),
                frame_index,
                timestamp,
                pose_prior: (&pose_prior).into(),
                intrinsics,
                keypoints: keypoints
                    .into_iter()
                    .enumerate()
                    .map(|(i, (u, v, level))| KeyPoint {
                        u,
                        v,
                        level,
                        descriptor_index: i,
                    })
                    .collect(),
                descriptors,
            }),
            Line::GroundTruth { id, pose, landmark_ids } => ground_truth.push(GroundTruthFrame {
                id: KeyFrameId(id),
                pose: (&pose).into(),
                landmark_ids,
            }),
            Line::Landmarks {
                positions,
                duplicates: d,
            } => {
                landmarks = positions.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
                duplicates = d;
            }
        }
    }
    let config = config.ok_or_else(|| Error::Parse("missing header line".into()))?;
    if frames.len() != expected {
        return Err(Error::Parse(format!(
            "header announces {expected} keyframes, found {}",
            frames.len()
        )));
    }
    if !ground_truth.is_empty() && ground_truth.len() != frames.len() {
        return Err(Error::Parse("ground truth does not cover every keyframe".into()));
    }
    Ok(Sequence {
        config,
        frames,
        ground_truth,
        landmarks,
        duplicates,
    })
}

pub fn save_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sequence(seq, f)
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    read_sequence(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// Trajectories.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// World-to-camera pose.
    pub pose: SE3Pose,
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines with the camera-to-world pose.
pub fn write_trajectory<W: Write>(traj: &[TrajectoryEntry], mut out: W) -> Result<()> {
    for e in traj {
        let wc = e.pose.inverse();
        let q = wc.rotation.quaternion();
        let t = wc.translation;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(input: R) -> Result<Vec<TrajectoryEntry>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Parse(format!(
                "line {}: expected 8 fields, got {}",
                n + 1,
                v.len()
            )));
        }
        let q = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]));
        let wc = SE3Pose::new(q, Vec3::new(v[1], v[2], v[3]));
        out.push(TrajectoryEntry {
            timestamp: v[0],
            pose: wc.inverse(),
        });
    }
    Ok(out)
}

pub fn save_trajectory(traj: &[TrajectoryEntry], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory(traj, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    read_trajectory(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Pairs estimated and ground-truth camera centers by timestamp (within 1e-6 s).
pub fn associate(estimated: &[TrajectoryEntry], ground_truth: &[TrajectoryEntry]) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for e in estimated {
        let hit = ground_truth.iter().find(|g| (g.timestamp - e.timestamp).abs() <= 1e-6);
        if let Some(g) = hit {
            est.push(e.pose.camera_center());
            gt.push(g.pose.camera_center());
        }
    }
    (est, gt)
}

/// RMSE of position residuals after the least-squares rigid (optionally
/// similarity) alignment of `estimated` onto `ground_truth`.
pub fn ate_rmse(estimated: &[Vec3], ground_truth: &[Vec3], align_scale: bool) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("ATE needs at least 3 poses, got {n}")));
    }
    let mean = |v: &[Vec3]| v.iter().sum::<Vec3>() / n as f64;
    let (me, mg) = (mean(estimated), mean(ground_truth));
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in estimated.iter().zip(ground_truth) {
        cov += (g - mg) * (e - me).transpose();
        var_e += (e - me).norm_squared();
    }
    cov /= n as f64;
    var_e /= n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let c = if align_scale && var_e > 0.0 {
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_e
    } else {
        1.0
    };
    let t = mg - c * r * me;
    let sq: f64 = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (c * r * e + t - g).norm_squared())
        .sum();
    Ok((sq / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Random maps for redundancy and counter tests.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMapConfig {
    pub keyframes: usize,
    pub points: usize,
    pub max_observations: usize,
    pub keypoints_per_kf: usize,
}

impl Default for RandomMapConfig {
    fn default() -> Self {
        Self {
            keyframes: 12,
            points: 150,
            max_observations: 10,
            keypoints_per_kf: 160,
        }
    }
}

/// A map with random observation patterns. The level distribution varies
/// with the seed: uniform, all level 0, skewed toward fine levels, or split
/// between the extremes. Some observations are erased afterwards.
pub fn random_map(seed: u64, cfg: &RandomMapConfig) -> Map {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = WorldConfig::default().intrinsics;
    let levels = k.num_levels;
    let mode = seed % 4;
    let mut map = Map::new(MapConfig {
        num_levels: levels,
        min_obs_keep: 1,
        ..MapConfig::default()
    });
    for id in 0..cfg.keyframes {
        let kps: Vec<KeyPoint> = (0..cfg.keypoints_per_kf)
            .map(|i| {
                let level = match mode {
                    0 => rng.random_range(0..levels),
                    1 => 0,
                    2 => (rng.random_range(0.0f64..1.0).powi(3) * levels as f64) as u8,
                    _ => {
                        if rng.random_bool(0.5) {
                            0
                        } else {
                            levels - 1
                        }
                    }
                };
                KeyPoint {
                    u: rng.random_range(0.0..k.width as f64),
                    v: rng.random_range(0.0..k.height as f64),
                    level,
                    descriptor_index: i,
                }
            })
            .collect();
        let descs = (0..kps.len()).map(|_| BinaryDescriptor(rng.random())).collect();
        let kf = KeyFrame::new(KeyFrameId(id as u64), id as f64, SE3Pose::identity(), k, kps, descs)
            .expect("valid keyframe");
        map.insert_keyframe(kf).expect("fresh id");
    }
    let mut next_free = vec![0usize; cfg.keyframes];
    let mut created = Vec::new();
    for _ in 0..cfg.points {
        let n_obs = rng.random_range(1..=cfg.max_observations.min(cfg.keyframes));
        let mut kfs = sample(&mut rng, cfg.keyframes, n_obs).into_vec();
        kfs.retain(|&kf| next_free[kf] < cfg.keypoints_per_kf);
        if kfs.is_empty() {
            continue;
        }
        let obs: Vec<(KeyFrameId, usize)> = kfs
            .iter()
            .map(|&kf| {
                next_free[kf] += 1;
                (KeyFrameId(kf as u64), next_free[kf] - 1)
            })
            .collect();
        let pos = Vec3::new(rng.random(), rng.random(), rng.random::<f64>() + 1.0);
        created.push(map.create_map_point(pos, obs[0].0, &obs).expect("free slots"));
    }
    for mp in created {
        if rng.random_bool(0.1) {
            let obs = map
                .live_point(mp)
                .map(|p| p.observations().to_vec())
                .unwrap_or_default();
            if let Some(&(kf, _)) = obs.get(rng.random_range(0..obs.len().max(1))) {
                map.erase_observation(mp, kf).expect("live observation");
            }
        }
    }
    map
}
