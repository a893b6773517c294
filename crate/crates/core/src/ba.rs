//! Local bundle adjustment: Levenberg–Marquardt over a window of keyframe
//! poses and the points they observe, with the point blocks eliminated by a
//! Schur complement.
//!
//! Residuals are whitened by the keypoint's pyramid scale and robustified
//! with a Huber kernel through iteratively reweighted normal equations. Pose
//! updates are right perturbations `(ω, ν)` as in [`SE3Pose::retract`].

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{CameraIntrinsics, Pixel, SE3Pose, Vec3};
use crate::map::{KeyFrameId, Map, MapPointId};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix6x3 = SMatrix<f64, 6, 3>;

/// Depth below which a factor counts as behind the camera.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BAConfig {
    pub window_size: usize,
    pub fixed_cap: usize,
    pub max_iters: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Stop once an iteration changes the cost by less than this fraction.
    pub cost_tol: f64,
    pub huber_delta: f64,
    /// Costs at or below this are treated as already optimal.
    pub min_cost: f64,
}

impl Default for BAConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            fixed_cap: 30,
            max_iters: 10,
            lambda0: 1e-4,
            lambda_up: 10.0,
            lambda_down: 2.0,
            lambda_max: 1e8,
            cost_tol: 1e-6,
            huber_delta: 5.991f64.sqrt(),
            min_cost: 1e-18,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub kf_id: KeyFrameId,
    pub point_id: MapPointId,
    pub observed: Pixel,
    pub level: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BAWindow {
    /// Optimized poses, ascending id.
    pub local_kf_ids: Vec<KeyFrameId>,
    /// Poses held constant, ascending id.
    pub fixed_kf_ids: Vec<KeyFrameId>,
    /// Optimized points, ascending id.
    pub point_ids: Vec<MapPointId>,
    /// Sorted by point, then keyframe.
    pub factors: Vec<Factor>,
}

/// Current keyframe plus its top covisible neighbors, the points they see,
/// and the other observers of those points held fixed. Without any outside
/// observer the two oldest local keyframes are fixed instead; with a single
/// one and more than two local keyframes, the oldest local keyframe other
/// than `current` joins it.
pub fn build_local_window(map: &Map, current: KeyFrameId, cfg: &BAConfig) -> Result<BAWindow> {
    if map.num_live_keyframes() < 2 {
        return Err(Error::WindowTooSmall(format!(
            "{} live keyframe(s), need at least 2",
            map.num_live_keyframes()
        )));
    }
    let mut local: BTreeSet<KeyFrameId> = map
        .covisible_neighbors(current, cfg.window_size.saturating_sub(1))?
        .into_iter()
        .collect();
    local.insert(current);

    let mut points = BTreeSet::new();
    for kf in &local {
        let frame = map.live_keyframe(*kf)?;
        points.extend(
            frame
                .bound_points()
                .map(|(_, mp)| mp)
                .filter(|mp| map.live_point(*mp).is_some()),
        );
    }

    let mut shared: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for mp in &points {
        for (kf, _) in map.live_point(*mp).expect("live").observations() {
            if !local.contains(kf) {
                *shared.entry(*kf).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(KeyFrameId, usize)> = shared.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut fixed: BTreeSet<KeyFrameId> = ranked.into_iter().take(cfg.fixed_cap).map(|(k, _)| k).collect();
    if fixed.is_empty() {
        let oldest: Vec<KeyFrameId> = local.iter().take(2).copied().collect();
        for kf in oldest {
            local.remove(&kf);
            fixed.insert(kf);
        }
    } else if fixed.len() == 1 && local.len() > 2 {
        // One fixed pose leaves the monocular scale free.
        if let Some(&kf) = local.iter().find(|&&k| k != current) {
            local.remove(&kf);
            fixed.insert(kf);
        }
    }

    let mut point_ids = Vec::new();
    let mut factors = Vec::new();
    for mp in points {
        let p = map.live_point(mp).expect("live");
        let start = factors.len();
        for &(kf, kp) in p.observations() {
            if local.contains(&kf) || fixed.contains(&kf) {
                let frame = map.live_keyframe(kf)?;
                let key = &frame.keypoints[kp as usize];
                factors.push(Factor {
                    kf_id: kf,
                    point_id: mp,
                    observed: key.pixel(),
                    level: key.level,
                });
            }
        }
        if factors.len() - start >= 2 {
            point_ids.push(mp);
        } else {
            factors.truncate(start);
        }
    }
    Ok(BAWindow {
        local_kf_ids: local.into_iter().collect(),
        fixed_kf_ids: fixed.into_iter().collect(),
        point_ids,
        factors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorLinearization {
    /// Whitened residual `(π(T·X) − z) / σ(level)`.
    pub residual: Vector2<f64>,
    /// With respect to `(ω, ν)`.
    pub j_pose: Matrix2x6,
    pub j_point: Matrix2x3<f64>,
    pub weight: f64,
}

pub fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

/// Huber cost of a squared whitened residual norm.
pub fn robust_cost(sq_norm: f64, delta: f64) -> f64 {
    if sq_norm <= delta * delta {
        sq_norm
    } else {
        2.0 * delta * sq_norm.sqrt() - delta * delta
    }
}

fn whitened_residual(
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    point: &Vec3,
    observed: &Pixel,
    level: u8,
) -> Option<(Vector2<f64>, Vec3, f64)> {
    let pc = pose.transform_point(point);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let inv_sigma = 1.0 / k.level_scale(level);
    let pix = k.project_unchecked(&pc);
    Some(((pix - observed) * inv_sigma, pc, inv_sigma))
}

/// `None` when the point is behind the camera (the factor is deactivated).
pub fn residual_and_jacobian(
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    point: &Vec3,
    observed: &Pixel,
    level: u8,
    huber_delta: f64,
) -> Option<FactorLinearization> {
    let (residual, pc, inv_sigma) = whitened_residual(pose, k, point, observed, level)?;
    let iz = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    ) * inv_sigma;
    let r = pose.rotation_matrix();
    let j_point = d_proj * r;
    let j_rot = -(j_point * point.cross_matrix());
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_point);
    Some(FactorLinearization {
        residual,
        j_pose,
        j_point,
        weight: huber_weight(residual.norm(), huber_delta),
    })
}

/// Gauss–Newton blocks of a window at one linearization point.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub num_poses: usize,
    /// `6P × 6P`; block-diagonal before elimination.
    pub h_pp: DMatrix<f64>,
    pub b_p: DVector<f64>,
    pub h_ll: Vec<Matrix3<f64>>,
    pub b_l: Vec<Vector3<f64>>,
    /// Per point: `(pose index, 6×3 block)` sorted by pose index.
    pub h_pl: Vec<Vec<(usize, Matrix6x3)>>,
}

impl NormalEquations {
    pub fn num_points(&self) -> usize {
        self.h_ll.len()
    }

    /// The full `(6P + 3M)` system, for checking the reduced solve.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let np = 6 * self.num_poses;
        let n = np + 3 * self.num_points();
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.h_pp);
        b.rows_mut(0, np).copy_from(&self.b_p);
        for j in 0..self.num_points() {
            let o = np + 3 * j;
            h.fixed_view_mut::<3, 3>(o, o).copy_from(&self.h_ll[j]);
            b.fixed_rows_mut::<3>(o).copy_from(&self.b_l[j]);
            for (a, w) in &self.h_pl[j] {
                h.fixed_view_mut::<6, 3>(6 * a, o).copy_from(w);
                h.fixed_view_mut::<3, 6>(o, 6 * a).copy_from(&w.transpose());
            }
        }
        (h, b)
    }
}

/// Variable layout and state of a window during optimization.
struct Problem<'a> {
    window: &'a BAWindow,
    intrinsics: Vec<CameraIntrinsics>,
    /// Per factor: index into `poses` or `None` for a fixed keyframe.
    pose_of: Vec<Option<usize>>,
    fixed_pose_of: Vec<usize>,
    point_of: Vec<usize>,
    /// Factor ranges per point.
    ranges: Vec<std::ops::Range<usize>>,
    fixed_poses: Vec<SE3Pose>,
}

#[derive(Clone, Debug, PartialEq)]
struct State {
    poses: Vec<SE3Pose>,
    points: Vec<Vec3>,
}

impl<'a> Problem<'a> {
    fn new(map: &Map, window: &'a BAWindow) -> Result<(Self, State)> {
        let local: BTreeMap<KeyFrameId, usize> = window.local_kf_ids.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let fixed: BTreeMap<KeyFrameId, usize> = window.fixed_kf_ids.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let points: BTreeMap<MapPointId, usize> = window.point_ids.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let mut intrinsics = Vec::with_capacity(window.factors.len());
        let mut pose_of = Vec::with_capacity(window.factors.len());
        let mut fixed_pose_of = Vec::with_capacity(window.factors.len());
        let mut point_of = Vec::with_capacity(window.factors.len());
        let mut ranges = vec![0..0; window.point_ids.len()];
        for (i, f) in window.factors.iter().enumerate() {
            let j = *points
                .get(&f.point_id)
                .ok_or_else(|| Error::InvalidArgument(format!("factor on {} outside the window", f.point_id)))?;
            if i > 0 && point_of[i - 1] > j {
                return Err(Error::InvalidArgument("factors must be sorted by point".into()));
            }
            if ranges[j].is_empty() {
                ranges[j] = i..i + 1;
            } else {
                ranges[j].end = i + 1;
            }
            point_of.push(j);
            intrinsics.push(map.live_keyframe(f.kf_id)?.intrinsics);
            match (local.get(&f.kf_id), fixed.get(&f.kf_id)) {
                (Some(&p), _) => {
                    pose_of.push(Some(p));
                    fixed_pose_of.push(usize::MAX);
                }
                (None, Some(&p)) => {
                    pose_of.push(None);
                    fixed_pose_of.push(p);
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "factor on {} outside the window",
                        f.kf_id
                    )))
                }
            }
        }
        let pose = |k: &KeyFrameId| map.live_keyframe(*k).map(|f| f.pose);
        let state = State {
            poses: window.local_kf_ids.iter().map(pose).collect::<Result<_>>()?,
            points: window
                .point_ids
                .iter()
                .map(|p| {
                    map.live_point(*p)
                        .map(|p| p.position)
                        .ok_or_else(|| Error::InvalidState(format!("{p} is dead")))
                })
                .collect::<Result<_>>()?,
        };
        let problem = Self {
            window,
            intrinsics,
            pose_of,
            fixed_pose_of,
            point_of,
            ranges,
            fixed_poses: window.fixed_kf_ids.iter().map(pose).collect::<Result<_>>()?,
        };
        Ok((problem, state))
    }

    fn pose<'s>(&'s self, state: &'s State, i: usize) -> &'s SE3Pose {
        match self.pose_of[i] {
            Some(p) => &state.poses[p],
            None => &self.fixed_poses[self.fixed_pose_of[i]],
        }
    }

    /// Robust cost of the active factors; `None` if a factor in `active`
    /// ended up behind its camera.
    fn cost(&self, state: &State, active: Option<&[bool]>, delta: f64, exec: &Executor) -> Option<f64> {
        let per_factor = exec.map(self.window.factors.len(), |i| {
            let f = &self.window.factors[i];
            whitened_residual(
                self.pose(state, i),
                &self.intrinsics[i],
                &state.points[self.point_of[i]],
                &f.observed,
                f.level,
            )
            .map(|(r, _, _)| robust_cost(r.norm_squared(), delta))
        });
        let mut total = 0.0;
        for (i, c) in per_factor.into_iter().enumerate() {
            match (c, active.map(|a| a[i])) {
                (Some(c), None | Some(true)) => total += c,
                (None, Some(true)) => return None,
                _ => {}
            }
        }
        Some(total)
    }

    fn linearize(&self, state: &State, delta: f64, exec: &Executor) -> (NormalEquations, Vec<bool>) {
        let lin = exec.map(self.window.factors.len(), |i| {
            let f = &self.window.factors[i];
            residual_and_jacobian(
                self.pose(state, i),
                &self.intrinsics[i],
                &state.points[self.point_of[i]],
                &f.observed,
                f.level,
                delta,
            )
        });
        let active: Vec<bool> = lin.iter().map(Option::is_some).collect();

        type PoseTerm = (usize, Matrix6x3, Matrix6, Vector6<f64>);
        let per_point: Vec<(Matrix3<f64>, Vector3<f64>, Vec<PoseTerm>)> = exec.map(self.ranges.len(), |j| {
            let mut h_ll = Matrix3::zeros();
            let mut b_l = Vector3::zeros();
            let mut terms: Vec<PoseTerm> = Vec::new();
            for i in self.ranges[j].clone() {
                let Some(l) = &lin[i] else { continue };
                let wr = l.residual * l.weight;
                h_ll += l.j_point.transpose() * l.j_point * l.weight;
                b_l += l.j_point.transpose() * wr;
                if let Some(p) = self.pose_of[i] {
                    terms.push((
                        p,
                        l.j_pose.transpose() * l.j_point * l.weight,
                        l.j_pose.transpose() * l.j_pose * l.weight,
                        l.j_pose.transpose() * wr,
                    ));
                }
            }
            terms.sort_by_key(|t| t.0);
            (h_ll, b_l, terms)
        });

        let np = state.poses.len();
        let mut ne = NormalEquations {
            num_poses: np,
            h_pp: DMatrix::zeros(6 * np, 6 * np),
            b_p: DVector::zeros(6 * np),
            h_ll: Vec::with_capacity(per_point.len()),
            b_l: Vec::with_capacity(per_point.len()),
            h_pl: Vec::with_capacity(per_point.len()),
        };
        for (h_ll, b_l, terms) in per_point {
            let mut h_pl: Vec<(usize, Matrix6x3)> = Vec::with_capacity(terms.len());
            for (p, w, hpp, bp) in terms {
                let mut block = ne.h_pp.fixed_view_mut::<6, 6>(6 * p, 6 * p);
                block += hpp;
                let mut seg = ne.b_p.fixed_rows_mut::<6>(6 * p);
                seg += bp;
                match h_pl.last_mut() {
                    Some((q, acc)) if *q == p => *acc += w,
                    _ => h_pl.push((p, w)),
                }
            }
            ne.h_ll.push(h_ll);
            ne.b_l.push(b_l);
            ne.h_pl.push(h_pl);
        }
        (ne, active)
    }
}

/// Reduced pose system `S = H_pp + λI − Σ W (H_ll + λI)⁻¹ Wᵀ`,
/// `b_s = b_p − Σ W (H_ll + λI)⁻¹ b_l`, summed in point order.
pub fn schur_reduce(ne: &NormalEquations, lambda: f64, exec: &Executor) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let contributions = exec.map(ne.num_points(), |j| {
        let inv = (ne.h_ll[j] + Matrix3::identity() * lambda).try_inverse()?;
        let blocks = &ne.h_pl[j];
        let mut out = Vec::with_capacity(blocks.len() * blocks.len());
        let mut rhs = Vec::with_capacity(blocks.len());
        for (a, wa) in blocks {
            let wa_inv = wa * inv;
            rhs.push((*a, wa_inv * ne.b_l[j]));
            for (b, wb) in blocks {
                out.push((*a, *b, wa_inv * wb.transpose()));
            }
        }
        Some((out, rhs))
    });
    let mut s = ne.h_pp.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += lambda;
    }
    let mut b = ne.b_p.clone();
    for (j, c) in contributions.into_iter().enumerate() {
        let (blocks, rhs) =
            c.ok_or_else(|| Error::DegenerateGeometry(format!("point block {j} is singular at λ = {lambda}")))?;
        for (a, bb, m) in blocks {
            let mut v = s.fixed_view_mut::<6, 6>(6 * a, 6 * bb);
            v -= m;
        }
        for (a, r) in rhs {
            let mut v = b.fixed_rows_mut::<6>(6 * a);
            v -= r;
        }
    }
    Ok((s, b))
}

/// LM step `(Δposes, Δpoints)` solving `(H + λI) Δ = −b` through the Schur complement.
pub fn schur_step(ne: &NormalEquations, lambda: f64, exec: &Executor) -> Result<(DVector<f64>, DVector<f64>)> {
    let (s, b_s) = schur_reduce(ne, lambda, exec)?;
    let dp = if s.nrows() == 0 {
        DVector::zeros(0)
    } else {
        s.cholesky()
            .ok_or_else(|| Error::DegenerateGeometry(format!("reduced system not positive definite at λ = {lambda}")))?
            .solve(&-b_s)
    };
    let dl = exec.map(ne.num_points(), |j| {
        let mut rhs = -ne.b_l[j];
        for (a, w) in &ne.h_pl[j] {
            rhs -= w.transpose() * dp.fixed_rows::<6>(6 * a);
        }
        (ne.h_ll[j] + Matrix3::identity() * lambda)
            .try_inverse()
            .map(|m| m * rhs)
    });
    let mut points = DVector::zeros(3 * ne.num_points());
    for (j, d) in dl.into_iter().enumerate() {
        let d = d.ok_or_else(|| Error::DegenerateGeometry(format!("point block {j} is singular at λ = {lambda}")))?;
        points.fixed_rows_mut::<3>(3 * j).copy_from(&d);
    }
    Ok((dp, points))
}

/// The same step from the full system, without elimination.
pub fn dense_step(ne: &NormalEquations, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let (mut h, b) = ne.dense();
    for i in 0..h.nrows() {
        h[(i, i)] += lambda;
    }
    let x = h
        .lu()
        .solve(&-b)
        .ok_or_else(|| Error::DegenerateGeometry("dense system is singular".into()))?;
    let np = 6 * ne.num_poses;
    Ok((x.rows(0, np).into_owned(), x.rows(np, x.len() - np).into_owned()))
}

/// Normal equations and robust cost of a window at the map's current state.
pub fn linearize_window(
    map: &Map,
    window: &BAWindow,
    cfg: &BAConfig,
    exec: &Executor,
) -> Result<(NormalEquations, f64)> {
    let (problem, state) = Problem::new(map, window)?;
    let (ne, active) = problem.linearize(&state, cfg.huber_delta, exec);
    let cost = problem
        .cost(&state, Some(&active), cfg.huber_delta, exec)
        .unwrap_or(f64::INFINITY);
    Ok((ne, cost))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoFactors,
    AlreadyOptimal,
    Converged,
    MaxIterations,
    LambdaTooLarge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmStep {
    pub lambda: f64,
    /// Cost after the step if accepted, else the candidate cost (infinite when
    /// a factor went behind its camera or the system was singular).
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BAReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub steps: Vec<LmStep>,
    pub stop: StopReason,
    pub num_local: usize,
    pub num_fixed: usize,
    pub num_points: usize,
    pub num_factors: usize,
}

fn apply_step(state: &State, dp: &DVector<f64>, dl: &DVector<f64>) -> State {
    State {
        poses: state
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = dp.fixed_rows::<6>(6 * i);
                p.retract(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]))
            })
            .collect(),
        points: state
            .points
            .iter()
            .enumerate()
            .map(|(j, x)| x + dl.fixed_rows::<3>(3 * j))
            .collect(),
    }
}

/// Optimizes the window and writes accepted local poses and points back to the map.
pub fn lm_optimize(map: &mut Map, window: &BAWindow, cfg: &BAConfig, exec: &Executor) -> Result<BAReport> {
    let (problem, mut state) = Problem::new(map, window)?;
    let mut report = BAReport {
        iterations: 0,
        initial_cost: 0.0,
        final_cost: 0.0,
        steps: Vec::new(),
        stop: StopReason::MaxIterations,
        num_local: window.local_kf_ids.len(),
        num_fixed: window.fixed_kf_ids.len(),
        num_points: window.point_ids.len(),
        num_factors: window.factors.len(),
    };
    let delta = cfg.huber_delta;
    let (mut ne, mut active) = problem.linearize(&state, delta, exec);
    if !active.iter().any(|a| *a) {
        report.stop = StopReason::NoFactors;
        return Ok(report);
    }
    let mut cost = problem
        .cost(&state, Some(&active), delta, exec)
        .expect("active factors are in front");
    report.initial_cost = cost;
    let mut lambda = cfg.lambda0;
    let mut stale = false;

    while report.iterations < cfg.max_iters {
        if cost <= cfg.min_cost {
            report.stop = if report.iterations == 0 {
                StopReason::AlreadyOptimal
            } else {
                StopReason::Converged
            };
            break;
        }
        if stale {
            (ne, active) = problem.linearize(&state, delta, exec);
            cost = problem
                .cost(&state, Some(&active), delta, exec)
                .expect("active factors are in front");
            stale = false;
        }
        report.iterations += 1;
        let candidate = schur_step(&ne, lambda, exec)
            .ok()
            .map(|(dp, dl)| apply_step(&state, &dp, &dl));
        let new_cost = candidate
            .as_ref()
            .and_then(|c| problem.cost(c, Some(&active), delta, exec))
            .unwrap_or(f64::INFINITY);
        if new_cost < cost {
            let rel = (cost - new_cost) / cost;
            report.steps.push(LmStep {
                lambda,
                cost: new_cost,
                accepted: true,
            });
            state = candidate.expect("finite cost implies a candidate");
            cost = new_cost;
            lambda /= cfg.lambda_down;
            stale = true;
            if rel < cfg.cost_tol {
                report.stop = StopReason::Converged;
                break;
            }
        } else {
            report.steps.push(LmStep {
                lambda,
                cost: new_cost,
                accepted: false,
            });
            if new_cost.is_finite() && (new_cost - cost) / cost < cfg.cost_tol {
                report.stop = StopReason::Converged;
                break;
            }
            lambda *= cfg.lambda_up;
            if lambda > cfg.lambda_max {
                report.stop = StopReason::LambdaTooLarge;
                break;
            }
        }
    }
    report.final_cost = cost;

    for (kf, pose) in window.local_kf_ids.iter().zip(&state.poses) {
        map.set_keyframe_pose(*kf, *pose)?;
    }
    for (mp, x) in window.point_ids.iter().zip(&state.points) {
        map.set_point_position(*mp, *x)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, BinaryDescriptor, KeyPoint};
    use crate::map::{KeyFrame, MapConfig};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640, 480, 8, 1.2).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    struct Scene {
        map: Map,
        poses: Vec<SE3Pose>,
        points: Vec<(MapPointId, Vec3)>,
    }

    /// `n_kf` cameras along x looking at points 4–8 m away; every point is
    /// observed by every camera that sees it, with exact keypoints.
    fn scene(n_kf: usize, n_pts: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<SE3Pose> = (0..n_kf)
            .map(|i| {
                let r = UnitQuaternion::from_scaled_axis(rand_vec(&mut rng, 0.05));
                SE3Pose::from_camera_center(r, Vec3::new(0.3 * i as f64, rng.random_range(-0.05..0.05), 0.0))
            })
            .collect();
        let landmarks: Vec<Vec3> = (0..n_pts)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-2.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(4.0..8.0),
                )
            })
            .collect();
        let mut map = Map::new(MapConfig::default());
        let mut slots = vec![Vec::new(); n_pts];
        for (i, pose) in poses.iter().enumerate() {
            let mut kps = Vec::new();
            for (l, x) in landmarks.iter().enumerate() {
                if let Some(pix) = project(&k(), &pose.transform_point(x)) {
                    slots[l].push((KeyFrameId(i as u64), kps.len()));
                    kps.push(KeyPoint {
                        u: pix.x,
                        v: pix.y,
                        level: (l % 3) as u8,
                        descriptor_index: kps.len(),
                    });
                }
            }
            let descs = (0..kps.len())
                .map(|j| BinaryDescriptor([j as u64, i as u64, 0, 0]))
                .collect();
            map.insert_keyframe(KeyFrame::new(KeyFrameId(i as u64), i as f64, *pose, k(), kps, descs).unwrap())
                .unwrap();
        }
        let mut points = Vec::new();
        for (l, obs) in slots.iter().enumerate() {
            if obs.len() >= 2 {
                points.push((map.create_map_point(landmarks[l], obs[0].0, obs).unwrap(), landmarks[l]));
            }
        }
        Scene { map, poses, points }
    }

    fn perturb(s: &mut Scene, seed: u64, rot: f64, trans: f64, window: &BAWindow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kf in &window.local_kf_ids {
            let p = s.map.keyframe(*kf).unwrap().pose;
            s.map
                .set_keyframe_pose(*kf, p.retract(&rand_vec(&mut rng, rot), &rand_vec(&mut rng, trans)))
                .unwrap();
        }
        for (mp, x) in &s.points {
            s.map.set_point_position(*mp, x + rand_vec(&mut rng, trans)).unwrap();
        }
    }

    #[test]
    fn window_on_a_chain() {
        let mut map = Map::new(MapConfig::default());
        for i in 0..3u64 {
            let kps = (0..4)
                .map(|j| KeyPoint {
                    u: 10.0 * j as f64,
                    v: 5.0,
                    level: 0,
                    descriptor_index: j,
                })
                .collect();
            let kf = KeyFrame::new(
                KeyFrameId(i),
                i as f64,
                SE3Pose::identity(),
                k(),
                kps,
                vec![BinaryDescriptor::default(); 4],
            )
            .unwrap();
            map.insert_keyframe(kf).unwrap();
        }
        let x = Vec3::new(0.0, 0.0, 5.0);
        map.create_map_point(x, KeyFrameId(0), &[(KeyFrameId(0), 0), (KeyFrameId(1), 0)])
            .unwrap();
        map.create_map_point(x, KeyFrameId(1), &[(KeyFrameId(1), 1), (KeyFrameId(2), 1)])
            .unwrap();
        map.create_map_point(x, KeyFrameId(1), &[(KeyFrameId(1), 2), (KeyFrameId(2), 2)])
            .unwrap();
        let cfg = BAConfig {
            window_size: 2,
            ..Default::default()
        };
        let w = build_local_window(&map, KeyFrameId(2), &cfg).unwrap();
        assert_eq!(w.local_kf_ids, vec![KeyFrameId(1), KeyFrameId(2)]);
        assert!(w.fixed_kf_ids.contains(&KeyFrameId(0)));
        assert_eq!(w.point_ids.len(), 3);
        assert!(w
            .factors
            .windows(2)
            .all(|f| (f[0].point_id, f[0].kf_id) < (f[1].point_id, f[1].kf_id)));

        let mut single = Map::new(MapConfig::default());
        single
            .insert_keyframe(KeyFrame::new(KeyFrameId(0), 0.0, SE3Pose::identity(), k(), vec![], vec![]).unwrap())
            .unwrap();
        assert!(matches!(
            build_local_window(&single, KeyFrameId(0), &cfg),
            Err(Error::WindowTooSmall(_))
        ));
    }

    #[test]
    fn fully_connected_window_fixes_two_oldest() {
        let s = scene(5, 60, 1);
        let w = build_local_window(
            &s.map,
            KeyFrameId(4),
            &BAConfig {
                window_size: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(w.fixed_kf_ids, vec![KeyFrameId(0), KeyFrameId(1)]);
        assert_eq!(w.local_kf_ids, vec![KeyFrameId(2), KeyFrameId(3), KeyFrameId(4)]);
    }

    #[test]
    fn perfect_observation_and_huber_weight() {
        let pose = SE3Pose::identity();
        let x = Vec3::new(0.2, -0.1, 4.0);
        let z = project(&k(), &x).unwrap();
        let l = residual_and_jacobian(&pose, &k(), &x, &z, 2, 2.0).unwrap();
        assert_eq!(l.residual, Vector2::zeros());
        assert_eq!(l.weight, 1.0);
        let delta = 5.991f64.sqrt();
        assert!((huber_weight(2.0 * delta, delta) - 0.5).abs() < 1e-15);
        // Level 2 whitening divides by 1.2²: a 2δ·1.44 px error is 2δ after scaling.
        let off = z + Vector2::new(2.0 * delta * 1.44, 0.0);
        let l = residual_and_jacobian(&pose, &k(), &x, &off, 2, delta).unwrap();
        assert!((l.weight - 0.5).abs() < 1e-12);
        assert!(residual_and_jacobian(&pose, &k(), &Vec3::new(0.0, 0.0, -1.0), &z, 0, delta).is_none());
        assert_eq!(robust_cost(1.0, delta), 1.0);
        assert!((robust_cost(4.0 * delta * delta, delta) - 3.0 * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..100 {
            let pose = SE3Pose::new(
                UnitQuaternion::from_scaled_axis(rand_vec(&mut rng, 0.5)),
                rand_vec(&mut rng, 1.0),
            );
            let x = pose.inverse().transform_point(&Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..8.0),
            ));
            let z = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let level = rng.random_range(0..8);
            let l = residual_and_jacobian(&pose, &k(), &x, &z, level, 1e9).unwrap();
            let r = |p: &SE3Pose, x: &Vec3| whitened_residual(p, &k(), x, &z, level).unwrap().0;
            let mut num_pose = Matrix2x6::zeros();
            for c in 0..6 {
                let mut e = Vector6::zeros();
                e[c] = h;
                let step = |s: f64| {
                    let d = e * s;
                    pose.retract(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]))
                };
                num_pose.set_column(c, &((r(&step(1.0), &x) - r(&step(-1.0), &x)) / (2.0 * h)));
            }
            let mut num_point = Matrix2x3::zeros();
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = h;
                num_point.set_column(c, &((r(&pose, &(x + e)) - r(&pose, &(x - e))) / (2.0 * h)));
            }
            assert!((l.j_pose - num_pose).norm() / num_pose.norm() < 1e-5);
            assert!((l.j_point - num_point).norm() / num_point.norm() < 1e-5);
        }
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn schur_step_equals_dense_step() {
        for seed in 0..10 {
            let mut s = scene(2 + (seed as usize % 3), 3 + 5 * seed as usize, seed);
            let cfg = BAConfig::default();
            let w = build_local_window(&s.map, KeyFrameId(s.poses.len() as u64 - 1), &cfg).unwrap();
            perturb(&mut s, seed, 0.01, 0.05, &w);
            let (ne, _) = linearize_window(&s.map, &w, &cfg, &Executor::Sequential).unwrap();
            let (sp, sl) = schur_step(&ne, 1e-3, &Executor::Sequential).unwrap();
            let (dp, dl) = dense_step(&ne, 1e-3).unwrap();
            assert!(rel(&sp, &dp) < 1e-8, "seed {seed}");
            assert!(rel(&sl, &dl) < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn decoupled_system_reduces_to_pose_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h_pp = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        h_pp = &h_pp * h_pp.transpose();
        let ne = NormalEquations {
            num_poses: 2,
            h_pp: h_pp.clone(),
            b_p: DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0)),
            h_ll: vec![Matrix3::identity(); 3],
            b_l: vec![Vector3::new(1.0, 2.0, 3.0); 3],
            h_pl: vec![Vec::new(); 3],
        };
        let (s, b) = schur_reduce(&ne, 0.0, &Executor::Sequential).unwrap();
        assert_eq!(s, h_pp);
        assert_eq!(b, ne.b_p);
    }

    #[test]
    fn shared_point_couples_poses() {
        // One point seen by both poses: the off-diagonal block of S must
        // match dense elimination.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Matrix6x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let w1 = Matrix6x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let h_ll = a * a.transpose() + Matrix3::identity();
        let ne = NormalEquations {
            num_poses: 2,
            h_pp: DMatrix::identity(12, 12) * 5.0,
            b_p: DVector::zeros(12),
            h_ll: vec![h_ll],
            b_l: vec![Vector3::new(0.5, -1.0, 2.0)],
            h_pl: vec![vec![(0, w0), (1, w1)]],
        };
        let (s, _) = schur_reduce(&ne, 0.0, &Executor::Sequential).unwrap();
        let (h, _) = ne.dense();
        let hpl = h.view((0, 12), (12, 3)).into_owned();
        let hll_inv = h.view((12, 12), (3, 3)).into_owned().try_inverse().unwrap();
        let expected = h.view((0, 0), (12, 12)).into_owned() - &hpl * hll_inv * hpl.transpose();
        assert!((&s - &expected).norm() < 1e-12);
        let off = s.view((0, 6), (6, 6)).into_owned();
        assert!(off.norm() > 0.1);
    }

    #[test]
    fn recovers_perturbed_noise_free_window() {
        let mut s = scene(5, 80, 11);
        let cfg = BAConfig {
            max_iters: 30,
            ..Default::default()
        };
        let w = build_local_window(&s.map, KeyFrameId(4), &cfg).unwrap();
        let fixed_before: Vec<SE3Pose> = w
            .fixed_kf_ids
            .iter()
            .map(|k| s.map.keyframe(*k).unwrap().pose)
            .collect();
        perturb(&mut s, 5, 1e-3, 1e-3, &w);
        let report = lm_optimize(&mut s.map, &w, &cfg, &Executor::Sequential).unwrap();
        assert!(report.final_cost < report.initial_cost);
        let accepted: Vec<f64> = report.steps.iter().filter(|st| st.accepted).map(|st| st.cost).collect();
        assert!(accepted.windows(2).all(|c| c[1] <= c[0]));
        for (kf, before) in w.fixed_kf_ids.iter().zip(&fixed_before) {
            assert_eq!(s.map.keyframe(*kf).unwrap().pose, *before);
        }
        for kf in &w.local_kf_ids {
            let got = s.map.keyframe(*kf).unwrap().pose;
            let truth = s.poses[kf.0 as usize];
            assert!(
                (got.camera_center() - truth.camera_center()).norm() < 1e-6,
                "{kf}: {report:?}"
            );
            assert!(got.angle_to(&truth) < 1e-6);
        }
        let (_, cost) = linearize_window(&s.map, &w, &cfg, &Executor::Sequential).unwrap();
        assert!(cost < 1e-12);
    }

    #[test]
    fn optimal_window_is_a_fixpoint() {
        let mut s = scene(4, 50, 12);
        let cfg = BAConfig::default();
        let w = build_local_window(&s.map, KeyFrameId(3), &cfg).unwrap();
        let report = lm_optimize(&mut s.map, &w, &cfg, &Executor::Sequential).unwrap();
        assert!(report.iterations <= 1);
        assert!((report.final_cost - report.initial_cost).abs() <= cfg.cost_tol * report.initial_cost.max(1e-30));
    }

    #[test]
    fn outlier_is_bounded_by_huber() {
        let mut s = scene(4, 150, 13);
        // Move one keypoint of keyframe 3 by 50 px across the epipolar lines,
        // where no depth change can explain it.
        let (mp, _) = s.points[5];
        let kp = s
            .map
            .point(mp)
            .unwrap()
            .observation_in(KeyFrameId(3))
            .expect("observed");
        let mut frame = s.map.keyframe(KeyFrameId(3)).unwrap().clone();
        frame.keypoints[kp].v += 50.0;
        let cfg = BAConfig {
            max_iters: 20,
            ..Default::default()
        };
        let mut w = build_local_window(&s.map, KeyFrameId(3), &cfg).unwrap();
        for f in w.factors.iter_mut() {
            if f.point_id == mp && f.kf_id == KeyFrameId(3) {
                f.observed = frame.keypoints[kp].pixel();
            }
        }
        perturb(&mut s, 9, 1e-3, 1e-3, &w);
        lm_optimize(&mut s.map, &w, &cfg, &Executor::Sequential).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        let mut outlier = 0.0;
        for f in &w.factors {
            let pose = s.map.keyframe(f.kf_id).unwrap().pose;
            let x = s.map.point(f.point_id).unwrap().position;
            let e = (project(&k(), &pose.transform_point(&x)).unwrap() - f.observed).norm();
            if f.point_id == mp && f.kf_id == KeyFrameId(3) {
                outlier = e;
            } else {
                sq += e * e;
                n += 1;
            }
        }
        assert!((sq / n as f64).sqrt() < 0.1, "inlier rmse {}", (sq / n as f64).sqrt());
        assert!(outlier > 40.0, "outlier residual {outlier}");
    }

    #[test]
    fn identical_across_worker_counts() {
        let run = |exec: Executor| {
            let mut s = scene(6, 120, 21);
            let cfg = BAConfig::default();
            let w = build_local_window(&s.map, KeyFrameId(5), &cfg).unwrap();
            perturb(&mut s, 2, 5e-3, 5e-3, &w);
            let r = lm_optimize(&mut s.map, &w, &cfg, &exec).unwrap();
            let poses: Vec<SE3Pose> = s.map.keyframes().map(|k| k.pose).collect();
            (r, poses)
        };
        let a = run(Executor::Sequential);
        assert_eq!(a, run(Executor::with_workers(2)));
        assert_eq!(a, run(Executor::with_workers(8)));
    }
}
