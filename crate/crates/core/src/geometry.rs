//! Poses, pinhole projection, binary descriptors and the two-view predicates
//! that gate map-point creation.
//!
//! Poses are world-to-camera transforms (`T_cw`). Pixels are `(u, v)` with
//! the origin at the top-left corner of the image.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

const MIN_BASELINE: f64 = 1e-9;
const MIN_HOMOGENEOUS_W: f64 = 1e-12;

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Builds a pose from a camera-to-world rotation and the camera center.
    pub fn from_camera_center(rotation_wc: UnitQuaternion<f64>, center: Vec3) -> Self {
        let rotation = renormalize(rotation_wc.inverse());
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rotation = renormalize(self.rotation.inverse());
        SE3Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Right perturbation `T · (Exp(ω), ν)`, i.e. `R' = R·Exp(ω)`, `t' = t + R·ν`.
    pub fn retract(&self, omega: &Vec3, nu: &Vec3) -> SE3Pose {
        SE3Pose {
            rotation: renormalize(self.rotation * UnitQuaternion::from_scaled_axis(*omega)),
            translation: self.translation + self.rotation * nu,
        }
    }

    pub fn angle_to(&self, other: &SE3Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Leaves quaternions that are already unit to rounding untouched, so that
/// normalizing twice gives the same bits as normalizing once.
fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
        q
    } else {
        UnitQuaternion::new_normalize(q.into_inner())
    }
}

/// Pinhole intrinsics plus the image-pyramid layout used by the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub num_levels: u8,
    pub scale_factor: f64,
}

impl CameraIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        num_levels: u8,
        scale_factor: f64,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            num_levels,
            scale_factor,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.num_levels >= 1
            && self.scale_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn level_scale(&self, level: u8) -> f64 {
        self.scale_factor.powi(level as i32)
    }

    pub fn level_sigma2(&self, level: u8) -> f64 {
        self.scale_factor.powi(2 * level as i32)
    }

    pub fn in_image(&self, pix: &Pixel) -> bool {
        pix.x >= 0.0 && pix.x < self.width as f64 && pix.y >= 0.0 && pix.y < self.height as f64
    }

    /// Pinhole projection without the image-bounds check. Caller ensures `z > 0`.
    pub fn project_unchecked(&self, p_cam: &Vec3) -> Pixel {
        let inv_z = 1.0 / p_cam.z;
        Pixel::new(self.fx * p_cam.x * inv_z + self.cx, self.fy * p_cam.y * inv_z + self.cy)
    }

    /// Normalized image coordinates (`K⁻¹·[u v 1]ᵀ`, first two components).
    pub fn unproject(&self, pix: &Pixel) -> Vector2<f64> {
        Vector2::new((pix.x - self.cx) / self.fx, (pix.y - self.cy) / self.fy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Returns `None` when the point is behind the camera or outside the image.
pub fn project(k: &CameraIntrinsics, p_cam: &Vec3) -> Option<Pixel> {
    if p_cam.z <= 0.0 {
        return None;
    }
    let pix = k.project_unchecked(p_cam);
    k.in_image(&pix).then_some(pix)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub u: f64,
    pub v: f64,
    /// Pyramid level, 0 is the finest.
    pub level: u8,
    pub descriptor_index: usize,
}

impl KeyPoint {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.u, self.v)
    }
}

/// 256-bit binary feature descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub const BITS: u32 = 256;
    pub const BYTES: usize = 32;

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Self(words)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (chunk, w) in out.chunks_exact_mut(8).zip(self.0.iter()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Parse(format!("descriptor hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Parse("descriptor must be 32 bytes".into()))?;
        Ok(Self::from_bytes(&arr))
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }
}

impl Serialize for BinaryDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BinaryDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    a.0.iter().zip(b.0.iter()).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Two calibrated views; `a` is conventionally the current keyframe.
#[derive(Clone, Copy, Debug)]
pub struct TwoView {
    pub pose_a: SE3Pose,
    pub pose_b: SE3Pose,
    pub k_a: CameraIntrinsics,
    pub k_b: CameraIntrinsics,
}

impl TwoView {
    pub fn new(pose_a: SE3Pose, pose_b: SE3Pose, k_a: CameraIntrinsics, k_b: CameraIntrinsics) -> Self {
        Self {
            pose_a,
            pose_b,
            k_a,
            k_b,
        }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.pose_b, self.pose_a, self.k_b, self.k_a)
    }

    pub fn baseline(&self) -> f64 {
        (self.pose_a.camera_center() - self.pose_b.camera_center()).norm()
    }

    /// `F = K_b⁻ᵀ·[t]×·R·K_a⁻¹` for the relative pose mapping camera a into camera b.
    pub fn fundamental(&self) -> Result<Matrix3<f64>> {
        let rel = self.pose_b.compose(&self.pose_a.inverse());
        if rel.translation.norm() < MIN_BASELINE {
            return Err(Error::DegenerateGeometry("zero baseline".into()));
        }
        let essential = rel.translation.cross_matrix() * rel.rotation_matrix();
        Ok(self.k_b.inverse_matrix().transpose() * essential * self.k_a.inverse_matrix())
    }
}

/// Squared distance (px²) from `pix_b` to the epipolar line of `pix_a` in image b.
pub fn epipolar_error(view: &TwoView, pix_a: &Pixel, pix_b: &Pixel) -> Result<f64> {
    let f = view.fundamental()?;
    Ok(epipolar_error_with(&f, pix_a, pix_b))
}

/// Same as [`epipolar_error`] with a precomputed fundamental matrix.
pub fn epipolar_error_with(f: &Matrix3<f64>, pix_a: &Pixel, pix_b: &Pixel) -> f64 {
    let line = f * Vec3::new(pix_a.x, pix_a.y, 1.0);
    let num = line.x * pix_b.x + line.y * pix_b.y + line.z;
    let den = line.x * line.x + line.y * line.y;
    if den == 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Linear (DLT) two-view triangulation in normalized image coordinates.
pub fn triangulate(view: &TwoView, pix_a: &Pixel, pix_b: &Pixel) -> Result<Vec3> {
    if view.baseline() < MIN_BASELINE {
        return Err(Error::DegenerateGeometry("zero baseline".into()));
    }
    let xa = view.k_a.unproject(pix_a);
    let xb = view.k_b.unproject(pix_b);
    let pa = projection_rows(&view.pose_a);
    let pb = projection_rows(&view.pose_b);

    let mut a = Matrix4::zeros();
    a.set_row(0, &(pa[2] * xa.x - pa[0]));
    a.set_row(1, &(pa[2] * xa.y - pa[1]));
    a.set_row(2, &(pb[2] * xb.x - pb[0]));
    a.set_row(3, &(pb[2] * xb.y - pb[1]));

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(min_idx);
    if h[3].abs() < MIN_HOMOGENEOUS_W {
        return Err(Error::DegenerateGeometry("point at infinity".into()));
    }
    Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn projection_rows(pose: &SE3Pose) -> [nalgebra::RowVector4<f64>; 3] {
    let r = pose.rotation_matrix();
    let t = pose.translation;
    std::array::from_fn(|i| nalgebra::RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]))
}

/// Cosine of the angle subtended at `point` by the two centers.
pub fn parallax_cosine(point: &Vec3, center_a: &Vec3, center_b: &Vec3) -> Result<f64> {
    let ra = point - center_a;
    let rb = point - center_b;
    let (na, nb) = (ra.norm(), rb.norm());
    if na < MIN_BASELINE || nb < MIN_BASELINE {
        return Err(Error::DegenerateGeometry("point coincides with a camera center".into()));
    }
    Ok((ra.dot(&rb) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub cos_parallax_max: f64,
    pub chi2_mono: f64,
    pub scale_ratio_slack: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            cos_parallax_max: 0.9998,
            chi2_mono: 5.991,
            scale_ratio_slack: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GateFailure {
    Parallax,
    PositiveDepth,
    Reprojection,
    ScaleConsistency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateOutcome {
    Pass,
    Fail(GateFailure),
}

/// Applies parallax, depth, reprojection and scale-consistency checks, in that order.
pub fn check_creation_gates(
    view: &TwoView,
    cfg: &GateConfig,
    pix_a: &Pixel,
    level_a: u8,
    pix_b: &Pixel,
    level_b: u8,
    candidate: &Vec3,
) -> GateOutcome {
    let center_a = view.pose_a.camera_center();
    let center_b = view.pose_b.camera_center();
    match parallax_cosine(candidate, &center_a, &center_b) {
        Ok(c) if c < cfg.cos_parallax_max => {}
        _ => return GateOutcome::Fail(GateFailure::Parallax),
    }
    let pc_a = view.pose_a.transform_point(candidate);
    let pc_b = view.pose_b.transform_point(candidate);
    if pc_a.z <= 0.0 || pc_b.z <= 0.0 {
        return GateOutcome::Fail(GateFailure::PositiveDepth);
    }
    let err_a = (view.k_a.project_unchecked(&pc_a) - pix_a).norm_squared();
    let err_b = (view.k_b.project_unchecked(&pc_b) - pix_b).norm_squared();
    if err_a > cfg.chi2_mono * view.k_a.level_sigma2(level_a) || err_b > cfg.chi2_mono * view.k_b.level_sigma2(level_b)
    {
        return GateOutcome::Fail(GateFailure::Reprojection);
    }
    let dist_ratio = (candidate - center_a).norm() / (candidate - center_b).norm();
    let level_ratio = view.k_a.level_scale(level_a) / view.k_b.level_scale(level_b);
    let r = cfg.scale_ratio_slack * view.k_a.scale_factor;
    let rel = dist_ratio / level_ratio;
    if rel < 1.0 / r || rel > r {
        return GateOutcome::Fail(GateFailure::ScaleConsistency);
    }
    GateOutcome::Pass
}
