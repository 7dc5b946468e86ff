//! Robust bundle adjustment (motion-only, local, global) over
//! reprojection residuals, plus closed-form trajectory alignment and ATE
//! RMSE evaluation.
//!
//! The solver is Levenberg-Marquardt with additive damping. Pose
//! increments live in a 6-dim tangent (axis-angle, translation) composed
//! on the left; residuals are whitened by the per-level keypoint sigma and
//! robustified with a Huber kernel in whitened-residual units.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{CameraPose, PinholeCamera};
use crate::math::{skew, so3_exp};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has non-positive camera-frame depth {0}")]
    BehindCamera(f64),
    #[error("underdetermined problem: need at least {needed} usable observations, got {got}")]
    Underdetermined { needed: usize, got: usize },
    #[error("trajectory comparison needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("trajectories have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("observation references missing pose {0}")]
    MissingPose(usize),
    #[error("observation references missing point {0}")]
    MissingPoint(usize),
}

/// One 2D measurement of a 3D point from a keyframe.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub pose_id: usize,
    pub point_id: usize,
    pub pixel: Vector2<f64>,
    /// Pyramid level; the measurement sigma grows with it.
    pub level: u32,
}

/// A full adjustment problem over keyframe poses and map points.
#[derive(Debug, Clone)]
pub struct BAProblem {
    pub poses: BTreeMap<usize, CameraPose>,
    pub points: BTreeMap<usize, Vector3<f64>>,
    pub observations: Vec<Observation>,
    pub camera: PinholeCamera,
    /// Poses that never move, beyond the gauge anchor chosen per solve.
    pub fixed_pose_ids: BTreeSet<usize>,
}

impl BAProblem {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for obs in &self.observations {
            if !self.poses.contains_key(&obs.pose_id) {
                return Err(GeometryError::MissingPose(obs.pose_id));
            }
            if !self.points.contains_key(&obs.point_id) {
                return Err(GeometryError::MissingPoint(obs.point_id));
            }
        }
        Ok(())
    }
}

/// Huber threshold (whitened units), base pixel sigma, and the per-level
/// sigma growth factor.
#[derive(Debug, Clone, Copy)]
pub struct RobustConfig {
    pub huber_delta: f64,
    pub sigma_base: f64,
    pub level_factor: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            huber_delta: 5.991f64.sqrt(),
            sigma_base: 1.0,
            level_factor: 1.2,
        }
    }
}

impl RobustConfig {
    fn sigma(&self, level: u32) -> f64 {
        self.sigma_base * self.level_factor.powi(level as i32)
    }
}

/// Levenberg-Marquardt knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub increment_tolerance: f64,
    pub initial_lambda: f64,
    pub lambda_cap: f64,
    /// Apply the Huber kernel; quadratic cost when false.
    pub robust: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            increment_tolerance: 1e-10,
            initial_lambda: 1e-4,
            lambda_cap: 1e8,
            robust: true,
        }
    }
}

/// Outcome of one LM solve.
#[derive(Debug, Clone)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost increase could not be escaped before the damping cap.
    pub diverged: bool,
    /// Rank trouble was flagged during at least one damped solve.
    pub rank_deficient: bool,
    /// Observations excluded for non-positive depth, last evaluation.
    pub excluded: usize,
    /// Robustified cost after every accepted step, starting at the
    /// initial cost. Non-increasing by construction.
    pub cost_trace: Vec<f64>,
}

/// Pinhole projection of a world point into a camera.
pub fn reproject(
    pose: &CameraPose,
    point: &Vector3<f64>,
    cam: &PinholeCamera,
) -> Result<Vector2<f64>, GeometryError> {
    let p = pose.transform(point);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Vector2::new(
        cam.fx * p.x / p.z + cam.cx,
        cam.fy * p.y / p.z + cam.cy,
    ))
}

fn proj_jacobian(cam: &PinholeCamera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Left-composed tangent update: pose' = exp([omega, tau]) * pose.
pub fn apply_increment(pose: &CameraPose, xi: &[f64; 6]) -> CameraPose {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let tau = Vector3::new(xi[3], xi[4], xi[5]);
    let dr = so3_exp(&omega);
    CameraPose {
        rotation: dr * pose.rotation,
        translation: dr * pose.translation + tau,
    }
}

/// Residual `observed - projected` and its Jacobians w.r.t. the 6-dim
/// left-composed pose increment ([omega, tau] columns) and the point.
/// `None` when the point is behind the camera.
pub fn residual_and_jacobians(
    pose: &CameraPose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    cam: &PinholeCamera,
) -> Option<(Vector2<f64>, [[f64; 6]; 2], Matrix2x3<f64>)> {
    let p = pose.transform(point);
    if p.z <= 0.0 {
        return None;
    }
    let pred = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let r = pixel - pred;
    let jp = proj_jacobian(cam, &p);
    // d p_cam / d omega = -[p]x, d p_cam / d tau = I; r = z - proj(p_cam).
    let j_omega = jp * skew(&p); // = -jp * (-[p]x)
    let j_tau = -jp;
    let mut j_pose = [[0.0; 6]; 2];
    for row in 0..2 {
        for c in 0..3 {
            j_pose[row][c] = j_omega[(row, c)];
            j_pose[row][3 + c] = j_tau[(row, c)];
        }
    }
    let j_point = -jp * pose.rotation;
    Some((r, j_pose, j_point))
}

/// Huber rho(u) on the squared whitened norm u, and its derivative.
fn huber(u: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    if u <= d2 {
        (u, 1.0)
    } else {
        let su = u.sqrt();
        (2.0 * delta * su - d2, delta / su)
    }
}

fn robust_cost_of(u: f64, robust: &RobustConfig, opts: &SolveOptions) -> f64 {
    if opts.robust {
        huber(u, robust.huber_delta).0
    } else {
        u
    }
}

struct Indexer {
    pose_slot: HashMap<usize, usize>,
    point_slot: HashMap<usize, usize>,
    n_pose: usize,
}

impl Indexer {
    fn dim(&self) -> usize {
        self.n_pose * 6 + self.point_slot.len() * 3
    }
    fn pose_off(&self, id: usize) -> Option<usize> {
        self.pose_slot.get(&id).map(|s| s * 6)
    }
    fn point_off(&self, id: usize) -> Option<usize> {
        self.point_slot.get(&id).map(|s| self.n_pose * 6 + s * 3)
    }
}

fn total_cost(
    problem: &BAProblem,
    obs_idx: &[usize],
    robust: &RobustConfig,
    opts: &SolveOptions,
) -> (f64, usize) {
    let mut cost = 0.0;
    let mut excluded = 0;
    for &i in obs_idx {
        let obs = &problem.observations[i];
        let pose = &problem.poses[&obs.pose_id];
        let point = &problem.points[&obs.point_id];
        let p = pose.transform(point);
        if p.z <= 0.0 {
            excluded += 1;
            continue;
        }
        let pred = Vector2::new(
            problem.camera.fx * p.x / p.z + problem.camera.cx,
            problem.camera.fy * p.y / p.z + problem.camera.cy,
        );
        let sigma = robust.sigma(obs.level);
        let u = (obs.pixel - pred).norm_squared() / (sigma * sigma);
        cost += robust_cost_of(u, robust, opts);
    }
    (cost, excluded)
}

/// Shared LM loop over the given free poses/points and observation subset.
fn solve_lm(
    problem: &mut BAProblem,
    free_poses: &[usize],
    free_points: &[usize],
    obs_idx: &[usize],
    robust: &RobustConfig,
    opts: &SolveOptions,
) -> BaReport {
    let indexer = Indexer {
        pose_slot: free_poses.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        point_slot: free_points.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        n_pose: free_poses.len(),
    };
    let dim = indexer.dim();

    let (initial_cost, mut excluded) = total_cost(problem, obs_idx, robust, opts);
    let mut cost = initial_cost;
    let mut cost_trace = vec![initial_cost];
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut diverged = false;
    let mut rank_deficient = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        // Assemble damped normal equations around the current state.
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        excluded = 0;
        for &i in obs_idx {
            let obs = &problem.observations[i];
            let pose = problem.poses[&obs.pose_id];
            let point = problem.points[&obs.point_id];
            let Some((r, j_pose, j_point)) =
                residual_and_jacobians(&pose, &point, &obs.pixel, &problem.camera)
            else {
                excluded += 1;
                continue;
            };
            let sigma = robust.sigma(obs.level);
            let w = 1.0 / sigma;
            let u = r.norm_squared() * w * w;
            let s = if opts.robust {
                huber(u, robust.huber_delta).1.sqrt()
            } else {
                1.0
            } * w;

            let pose_off = indexer.pose_off(obs.pose_id);
            let point_off = indexer.point_off(obs.point_id);

            // Scaled rows: one 2-vector residual with up to 9 columns.
            let mut cols: Vec<(usize, [f64; 2])> = Vec::with_capacity(9);
            if let Some(off) = pose_off {
                for c in 0..6 {
                    cols.push((off + c, [s * j_pose[0][c], s * j_pose[1][c]]));
                }
            }
            if let Some(off) = point_off {
                for c in 0..3 {
                    cols.push((off + c, [s * j_point[(0, c)], s * j_point[(1, c)]]));
                }
            }
            let rs = [s * r.x, s * r.y];
            for (ci, jci) in &cols {
                b[*ci] -= jci[0] * rs[0] + jci[1] * rs[1];
                for (cj, jcj) in &cols {
                    if cj < ci {
                        continue;
                    }
                    let v = jci[0] * jcj[0] + jci[1] * jcj[1];
                    h[(*ci, *cj)] += v;
                    if ci != cj {
                        h[(*cj, *ci)] += v;
                    }
                }
            }
        }

        // b points downhill: delta = (H + lambda I)^-1 * (-J^T W r).
        let mut accepted = false;
        while lambda <= opts.lambda_cap {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda;
            }
            let delta = match damped.cholesky() {
                Some(chol) => chol.solve(&b),
                None => {
                    rank_deficient = true;
                    lambda *= 10.0;
                    continue;
                }
            };

            // Propose.
            let mut proposal = problem.clone();
            for (slot, &id) in free_poses.iter().enumerate() {
                let off = slot * 6;
                let xi = [
                    delta[off],
                    delta[off + 1],
                    delta[off + 2],
                    delta[off + 3],
                    delta[off + 4],
                    delta[off + 5],
                ];
                let p = proposal.poses.get_mut(&id).unwrap();
                *p = apply_increment(p, &xi);
            }
            for (slot, &id) in free_points.iter().enumerate() {
                let off = indexer.n_pose * 6 + slot * 3;
                let p = proposal.points.get_mut(&id).unwrap();
                *p += Vector3::new(delta[off], delta[off + 1], delta[off + 2]);
            }
            let (new_cost, _) = total_cost(&proposal, obs_idx, robust, opts);
            if new_cost <= cost {
                *problem = proposal;
                cost = new_cost;
                cost_trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if delta.norm() < opts.increment_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            diverged = true;
            break;
        }
        if converged {
            break;
        }
    }

    BaReport {
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        diverged,
        rank_deficient,
        excluded,
        cost_trace,
    }
}

/// Optimize a single pose against fixed points. Needs at least 6 usable
/// observations of that pose.
pub fn motion_only_ba(
    problem: &mut BAProblem,
    pose_id: usize,
    robust: &RobustConfig,
    opts: &SolveOptions,
) -> Result<BaReport, GeometryError> {
    problem.validate()?;
    if !problem.poses.contains_key(&pose_id) {
        return Err(GeometryError::MissingPose(pose_id));
    }
    let obs_idx: Vec<usize> = problem
        .observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.pose_id == pose_id)
        .map(|(i, _)| i)
        .collect();
    if obs_idx.len() < 6 {
        return Err(GeometryError::Underdetermined {
            needed: 6,
            got: obs_idx.len(),
        });
    }
    Ok(solve_lm(problem, &[pose_id], &[], &obs_idx, robust, opts))
}

/// Joint optimization over a covisible window of keyframes and every point
/// they observe. Keyframes outside the window that observe those points
/// contribute residuals with their poses held fixed; when no such fixed
/// pose participates, the first window pose is anchored to pin the gauge
/// (global adjustment thus keeps its origin keyframe fixed).
pub fn local_ba(
    problem: &mut BAProblem,
    window: &[usize],
    robust: &RobustConfig,
    opts: &SolveOptions,
) -> Result<BaReport, GeometryError> {
    problem.validate()?;
    assert!(!window.is_empty(), "window must name at least one keyframe");
    for id in window {
        if !problem.poses.contains_key(id) {
            return Err(GeometryError::MissingPose(*id));
        }
    }
    let window_set: BTreeSet<usize> = window.iter().copied().collect();
    // Points observed from the window.
    let free_points_set: BTreeSet<usize> = problem
        .observations
        .iter()
        .filter(|o| window_set.contains(&o.pose_id))
        .map(|o| o.point_id)
        .collect();
    let free_points: Vec<usize> = free_points_set.iter().copied().collect();
    // Residuals: anything touching a free point or a free pose.
    let obs_idx: Vec<usize> = problem
        .observations
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            free_points_set.contains(&o.point_id) || window_set.contains(&o.pose_id)
        })
        .map(|(i, _)| i)
        .collect();
    let mut free_poses: Vec<usize> = window
        .iter()
        .filter(|id| !problem.fixed_pose_ids.contains(id))
        .copied()
        .collect();
    // A residual anchored to a pose outside the free set already pins the
    // gauge; otherwise anchor the first window pose.
    let free_set: BTreeSet<usize> = free_poses.iter().copied().collect();
    let externally_anchored = obs_idx
        .iter()
        .any(|&i| !free_set.contains(&problem.observations[i].pose_id));
    if !externally_anchored && !free_poses.is_empty() {
        free_poses.remove(0);
    }
    let needed = free_poses.len() * 6 + free_points.len() * 3;
    if obs_idx.len() * 2 < needed {
        return Err(GeometryError::Underdetermined {
            needed: needed.div_ceil(2),
            got: obs_idx.len(),
        });
    }
    Ok(solve_lm(problem, &free_poses, &free_points, &obs_idx, robust, opts))
}

/// Local BA with every keyframe in the window; the origin keyframe (the
/// lowest id) stays fixed to pin the gauge.
pub fn global_ba(
    problem: &mut BAProblem,
    robust: &RobustConfig,
    opts: &SolveOptions,
) -> Result<BaReport, GeometryError> {
    let ids: Vec<usize> = problem.poses.keys().copied().collect();
    local_ba(problem, &ids, robust, opts)
}

/// Linear (DLT-style) triangulation of one point from two or more views.
pub fn triangulate_linear(
    views: &[(CameraPose, Vector2<f64>)],
    cam: &PinholeCamera,
) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (pose, pixel) in views {
        let xn = (pixel.x - cam.cx) / cam.fx;
        let yn = (pixel.y - cam.cy) / cam.fy;
        let r = &pose.rotation;
        let t = &pose.translation;
        let rows = [
            (r.row(0) - r.row(2) * xn, xn * t.z - t.x),
            (r.row(1) - r.row(2) * yn, yn * t.z - t.y),
        ];
        for (a, b) in rows {
            let av = Vector3::new(a[0], a[1], a[2]);
            ata += av * av.transpose();
            atb += av * b;
        }
    }
    ata.try_inverse().map(|inv| inv * atb)
}

/// Trajectory alignment mode: rigid by default, similarity for monocular
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Se3,
    Sim3,
}

/// Closed-form alignment (rotation, translation, optional scale) mapping
/// `src` onto `dst` in the least-squares sense.
pub fn umeyama_alignment(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> (f64, Matrix3<f64>, Vector3<f64>) {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mean_src = src.iter().sum::<Vector3<f64>>() / n;
    let mean_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mean_src;
        let dc = d - mean_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s_fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] + d[1] + s_fix[(2, 2)] * d[2]) / var_src
    } else {
        1.0
    };
    let translation = mean_dst - scale * (rotation * mean_src);
    (scale, rotation, translation)
}

/// RMSE of the absolute trajectory error in centimeters: camera centers
/// are aligned by the closed-form transform, then translational residuals
/// are averaged.
pub fn ate_rmse(
    estimated: &[CameraPose],
    ground_truth: &[CameraPose],
    mode: AlignMode,
) -> Result<f64, GeometryError> {
    if estimated.len() != ground_truth.len() {
        return Err(GeometryError::LengthMismatch(
            estimated.len(),
            ground_truth.len(),
        ));
    }
    if estimated.len() < 3 {
        return Err(GeometryError::TooFewPoses(estimated.len()));
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|p| p.camera_center()).collect();
    let dst: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.camera_center()).collect();
    let (scale, rot, trans) = umeyama_alignment(&src, &dst, mode == AlignMode::Sim3);
    let mut acc = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        acc += (scale * (rot * s) + trans - d).norm_squared();
    }
    Ok((acc / src.len() as f64).sqrt() * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::matrix_to_quat;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    /// Realistic focal length for the solver tests; outlier influence on
    /// the robustified objective shrinks as inlier stiffness grows.
    fn solver_cam() -> PinholeCamera {
        PinholeCamera::new(500.0, 500.0, 320.0, 320.0, 640, 640)
    }

    #[test]
    fn reproject_axis_and_offset_points() {
        let c = cam();
        let pose = CameraPose::identity();
        let px = reproject(&pose, &Vector3::new(0.0, 0.0, 2.0), &c).unwrap();
        assert_eq!(px, Vector2::new(50.0, 50.0));
        let px = reproject(&pose, &Vector3::new(0.1, 0.0, 1.0), &c).unwrap();
        assert!((px - Vector2::new(60.0, 50.0)).norm() < 1e-12);
        assert!(matches!(
            reproject(&pose, &Vector3::new(0.0, 0.0, -1.0), &c),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn reproject_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cam();
        for _ in 0..50 {
            let pose = CameraPose::look_at(
                &Vector3::new(
                    rng.gen_range(1.0..2.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                &Vector3::zeros(),
                &Vector3::new(0.0, 0.0, 1.0),
            );
            let p = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let px = reproject(&pose, &p, &c).unwrap();
            let q = pose.rotation * p + pose.translation;
            assert!((px.x - (c.fx * q.x / q.z + c.cx)).abs() < 1e-12);
            assert!((px.y - (c.fy * q.y / q.z + c.cy)).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cam();
        for _ in 0..40 {
            let pose = CameraPose::look_at(
                &Vector3::new(1.5, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                &Vector3::zeros(),
                &Vector3::new(0.0, 0.0, 1.0),
            );
            let point = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let pixel = Vector2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
            let (_, j_pose, j_point) =
                residual_and_jacobians(&pose, &point, &pixel, &c).unwrap();
            let h = 1e-7;
            for k in 0..6 {
                let mut xi = [0.0; 6];
                xi[k] = h;
                let rp = pixel
                    - reproject(&apply_increment(&pose, &xi), &point, &c).unwrap();
                xi[k] = -h;
                let rm = pixel
                    - reproject(&apply_increment(&pose, &xi), &point, &c).unwrap();
                for row in 0..2 {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let an = j_pose[row][k];
                    assert!(
                        (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                        "pose dof {k} row {row}: analytic {an} fd {fd}"
                    );
                }
            }
            for k in 0..3 {
                let mut pp = point;
                pp[k] += h;
                let mut pm = point;
                pm[k] -= h;
                let rp = pixel - reproject(&pose, &pp, &c).unwrap();
                let rm = pixel - reproject(&pose, &pm, &c).unwrap();
                for row in 0..2 {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let an = j_point[(row, k)];
                    assert!(
                        (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                        "point dof {k}: analytic {an} fd {fd}"
                    );
                }
            }
        }
    }

    /// Minimal synthetic single-pose problem with noiseless observations.
    fn single_pose_problem(
        rng: &mut ChaCha8Rng,
        n_points: usize,
    ) -> (BAProblem, CameraPose) {
        let truth = CameraPose::look_at(
            &Vector3::new(2.0, 0.3, 0.4),
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
        );
        let mut points = BTreeMap::new();
        let mut observations = Vec::new();
        for i in 0..n_points {
            let p = Vector3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            );
            let pixel = reproject(&truth, &p, &solver_cam()).unwrap();
            points.insert(i, p);
            observations.push(Observation {
                pose_id: 0,
                point_id: i,
                pixel,
                level: 0,
            });
        }
        let mut poses = BTreeMap::new();
        poses.insert(0, truth);
        (
            BAProblem {
                poses,
                points,
                observations,
                camera: solver_cam(),
                fixed_pose_ids: BTreeSet::new(),
            },
            truth,
        )
    }

    fn pose_error(a: &CameraPose, b: &CameraPose) -> (f64, f64) {
        let dr = a.rotation.transpose() * b.rotation;
        let angle = ((dr.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        let dt = (a.camera_center() - b.camera_center()).norm();
        (angle, dt)
    }

    #[test]
    fn motion_only_at_truth_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut problem, truth) = single_pose_problem(&mut rng, 30);
        let report = motion_only_ba(
            &mut problem,
            0,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(report.final_cost < 1e-20);
        let (da, dt) = pose_error(&problem.poses[&0], &truth);
        assert!(da < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn motion_only_recovers_perturbed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut problem, truth) = single_pose_problem(&mut rng, 50);
        // 5 degrees and 0.1 m off.
        let angle = 5.0f64.to_radians();
        let xi = [angle, 0.0, 0.0, 0.1, 0.0, 0.0];
        let perturbed = apply_increment(&truth, &xi);
        problem.poses.insert(0, perturbed);
        let report = motion_only_ba(
            &mut problem,
            0,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(!report.diverged);
        let (da, dt) = pose_error(&problem.poses[&0], &truth);
        assert!(da < 1e-4, "rotation error {da}");
        assert!(dt < 1e-4, "translation error {dt}");
    }

    #[test]
    fn motion_only_underdetermined_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut problem, _) = single_pose_problem(&mut rng, 5);
        assert!(matches!(
            motion_only_ba(
                &mut problem,
                0,
                &RobustConfig::default(),
                &SolveOptions::default()
            ),
            Err(GeometryError::Underdetermined { needed: 6, got: 5 })
        ));
    }

    #[test]
    fn huber_beats_quadratic_under_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut problem, truth) = single_pose_problem(&mut rng, 100);
        // 20% gross outliers at 50 px, directions alternating the way the
        // synthetic generator flags them.
        let n_out = 20;
        for i in 0..n_out {
            let o = &mut problem.observations[i * 5];
            let sx = if i % 2 == 0 { 1.0 } else { -1.0 };
            let sy = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
            o.pixel += Vector2::new(50.0 * sx, 50.0 * sy);
        }
        let xi = [0.02, -0.01, 0.015, 0.05, -0.04, 0.03];
        let start = apply_increment(&truth, &xi);

        let mut robust_problem = problem.clone();
        robust_problem.poses.insert(0, start);
        motion_only_ba(
            &mut robust_problem,
            0,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let (ra, rt) = pose_error(&robust_problem.poses[&0], &truth);

        let mut quad_problem = problem.clone();
        quad_problem.poses.insert(0, start);
        motion_only_ba(
            &mut quad_problem,
            0,
            &RobustConfig::default(),
            &SolveOptions {
                robust: false,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        let (qa, qt) = pose_error(&quad_problem.poses[&0], &truth);

        assert!(ra < 1e-2 && rt < 1e-2, "robust recovery {ra} {rt}");
        assert!(qa > ra && qt > rt, "quadratic ({qa},{qt}) vs robust ({ra},{rt})");
    }

    #[test]
    fn lm_cost_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut problem, truth) = single_pose_problem(&mut rng, 40);
        for o in problem.observations.iter_mut() {
            o.pixel += Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let xi = [0.05, -0.02, 0.01, 0.2, 0.1, -0.15];
        problem.poses.insert(0, apply_increment(&truth, &xi));
        let report = motion_only_ba(
            &mut problem,
            0,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        for pair in report.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn sigma_scaling_rescales_cost_but_not_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (problem, truth) = single_pose_problem(&mut rng, 40);
        // Small enough that every whitened residual stays in the Huber
        // quadratic zone, where the 1/sigma^2 scaling is exact.
        let xi = [0.002, -0.001, 0.001, 0.004, 0.002, -0.003];
        let start = apply_increment(&truth, &xi);

        let run = |sigma: f64| {
            let mut p = problem.clone();
            p.poses.insert(0, start);
            let robust = RobustConfig {
                sigma_base: sigma,
                ..RobustConfig::default()
            };
            let rep =
                motion_only_ba(&mut p, 0, &robust, &SolveOptions::default()).unwrap();
            (rep.initial_cost, p.poses[&0])
        };
        let (c1, p1) = run(1.0);
        let (c2, p2) = run(2.0);
        assert!((c2 - c1 / 4.0).abs() < 1e-9 * c1.max(1.0));
        let (da, dt) = pose_error(&p1, &p2);
        assert!(da < 1e-6 && dt < 1e-6, "argmin moved: {da} {dt}");
    }

    /// Multi-keyframe synthetic problem; returns truth for comparisons.
    fn multi_problem(
        rng: &mut ChaCha8Rng,
        n_kf: usize,
        n_points: usize,
        noise: f64,
    ) -> (BAProblem, Vec<CameraPose>, Vec<Vector3<f64>>) {
        let mut poses = BTreeMap::new();
        let mut truth_poses = Vec::new();
        for k in 0..n_kf {
            let angle = 0.3 * k as f64;
            let eye = Vector3::new(2.0 * angle.cos(), 2.0 * angle.sin(), 0.5);
            let pose = CameraPose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0));
            poses.insert(k, pose);
            truth_poses.push(pose);
        }
        let mut points = BTreeMap::new();
        let mut truth_points = Vec::new();
        let mut observations = Vec::new();
        let robust = RobustConfig::default();
        for i in 0..n_points {
            let p = Vector3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            );
            points.insert(i, p);
            truth_points.push(p);
            for k in 0..n_kf {
                let level = rng.gen_range(0..4u32);
                let sigma = noise * robust.level_factor.powi(level as i32);
                let pixel = reproject(&truth_poses[k], &p, &solver_cam()).unwrap();
                observations.push(Observation {
                    pose_id: k,
                    point_id: i,
                    pixel: pixel
                        + Vector2::new(
                            sigma * rng.sample::<f64, _>(rand_distr_standard()),
                            sigma * rng.sample::<f64, _>(rand_distr_standard()),
                        ),
                    level,
                });
            }
        }
        (
            BAProblem {
                poses,
                points,
                observations,
                camera: solver_cam(),
                fixed_pose_ids: BTreeSet::new(),
            },
            truth_poses,
            truth_points,
        )
    }

    // Standard normal via Box-Muller on the uniform source; keeps the
    // dependency surface small.
    struct StdNormal;
    fn rand_distr_standard() -> StdNormal {
        StdNormal
    }
    impl rand::distributions::Distribution<f64> for StdNormal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    #[test]
    fn local_ba_noiseless_reaches_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut problem, _, truth_points) = multi_problem(&mut rng, 3, 40, 0.0);
        // Perturb the points; poses stay at truth but are free to move.
        for (i, p) in problem.points.iter_mut() {
            *p += Vector3::new(0.01, -0.01, 0.005) * ((i % 3) as f64 + 1.0);
        }
        let window = [0, 1, 2];
        let report = local_ba(
            &mut problem,
            &window,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(!report.diverged);
        // Mean reprojection error below 1e-8 px.
        let mut err = 0.0;
        let mut n = 0.0;
        for o in &problem.observations {
            let pred = reproject(
                &problem.poses[&o.pose_id],
                &problem.points[&o.point_id],
                &solver_cam(),
            )
            .unwrap();
            err += (pred - o.pixel).norm();
            n += 1.0;
        }
        assert!(err / n < 1e-8, "mean reprojection {}", err / n);
        let _ = truth_points;
    }

    #[test]
    fn local_ba_improves_triangulation_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut problem, truth_poses, truth_points) = multi_problem(&mut rng, 3, 100, 1.0);
        // Poses are known here; the paired comparison is DLT points vs
        // reprojection-optimal points.
        problem.fixed_pose_ids = [0, 1, 2].into_iter().collect();
        // Re-initialize points from noisy linear triangulation.
        let mut init_rmse = 0.0;
        for i in 0..truth_points.len() {
            let views: Vec<(CameraPose, Vector2<f64>)> = problem
                .observations
                .iter()
                .filter(|o| o.point_id == i)
                .map(|o| (truth_poses[o.pose_id], o.pixel))
                .collect();
            let tri = triangulate_linear(&views, &solver_cam()).unwrap();
            init_rmse += (tri - truth_points[i]).norm_squared();
            problem.points.insert(i, tri);
        }
        init_rmse = (init_rmse / truth_points.len() as f64).sqrt();

        let window = [0, 1, 2];
        local_ba(
            &mut problem,
            &window,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let mut ba_rmse = 0.0;
        for i in 0..truth_points.len() {
            ba_rmse += (problem.points[&i] - truth_points[i]).norm_squared();
        }
        ba_rmse = (ba_rmse / truth_points.len() as f64).sqrt();
        assert!(
            ba_rmse < init_rmse,
            "BA rmse {ba_rmse} should beat triangulation rmse {init_rmse}"
        );
    }

    #[test]
    fn single_keyframe_window_degenerates_to_motion_only() {
        // Two keyframes outside the window triangulate every point, so a
        // one-keyframe window reduces structurally to motion-only.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (problem, truth_poses, _) = multi_problem(&mut rng, 3, 30, 0.0);
        let xi = [0.02, 0.0, -0.01, 0.05, 0.03, 0.0];
        let start = apply_increment(&truth_poses[2], &xi);

        let mut p1 = problem.clone();
        p1.poses.insert(2, start);
        let r1 = local_ba(
            &mut p1,
            &[2],
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let mut p2 = problem.clone();
        p2.poses.insert(2, start);
        let r2 = motion_only_ba(
            &mut p2,
            2,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(r1.final_cost < 1e-16, "window cost {}", r1.final_cost);
        assert!(r2.final_cost < 1e-16, "motion-only cost {}", r2.final_cost);
        let (da, dt) = pose_error(&p1.poses[&2], &p2.poses[&2]);
        assert!(da < 1e-7 && dt < 1e-7, "window vs motion-only: {da} {dt}");
    }

    #[test]
    fn global_ba_fixes_origin_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut problem, truth_poses, _) = multi_problem(&mut rng, 10, 60, 0.0);
        // Perturb all but the origin.
        for k in 1..10 {
            let xi = [
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            let p = problem.poses.get_mut(&k).unwrap();
            *p = apply_increment(p, &xi);
        }
        let origin_before = problem.poses[&0];
        let report = global_ba(
            &mut problem,
            &RobustConfig::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(!report.diverged);
        assert_eq!(problem.poses[&0], origin_before);
        assert!(report.final_cost < 1e-10, "final cost {}", report.final_cost);
        // Fixing one pose leaves the monocular scale gauge free, so pose
        // recovery is asserted up to a similarity alignment.
        let est: Vec<CameraPose> = (0..10).map(|k| problem.poses[&k]).collect();
        let rmse_cm = ate_rmse(&est, &truth_poses, AlignMode::Sim3).unwrap();
        assert!(rmse_cm < 1e-4, "aligned center rmse {rmse_cm} cm");
        for k in 0..10 {
            let (da, _) = pose_error(&problem.poses[&k], &truth_poses[k]);
            assert!(da < 1e-5, "kf {k} rotation error {da}");
        }
    }

    #[test]
    fn gauge_invariance_of_final_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (problem, _, _) = multi_problem(&mut rng, 3, 30, 0.5);

        let run = |mut p: BAProblem| {
            local_ba(
                &mut p,
                &[0, 1, 2],
                &RobustConfig::default(),
                &SolveOptions::default(),
            )
            .unwrap()
            .final_cost
        };
        let base_cost = run(problem.clone());

        // Rigidly transform the whole problem (world-frame change).
        let g = CameraPose::look_at(
            &Vector3::new(0.3, -0.2, 0.6),
            &Vector3::new(1.0, 1.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
        );
        let mut moved = problem.clone();
        for pose in moved.poses.values_mut() {
            // p_cam = R (g^-1 q) + t = (R g_r^T) q + (t - R g_r^T g_t_world)...
            // compose the pose with the inverse world transform.
            *pose = pose.compose(&g);
        }
        for point in moved.points.values_mut() {
            *point = g.inverse().transform(point);
        }
        let moved_cost = run(moved);
        assert!(
            (base_cost - moved_cost).abs() < 1e-9 * base_cost.max(1.0),
            "{base_cost} vs {moved_cost}"
        );
    }

    #[test]
    fn umeyama_matches_horn_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let n = 12;
            let src: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let true_r = so3_exp(&Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let true_t = Vector3::new(0.4, -0.3, 0.9);
            let dst: Vec<Vector3<f64>> = src
                .iter()
                .map(|s| {
                    true_r * s
                        + true_t
                        + Vector3::new(
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                        )
                })
                .collect();
            let (_, r_est, t_est) = umeyama_alignment(&src, &dst, false);

            // Independent route: Horn's quaternion method via the 4x4
            // cross-covariance eigenproblem.
            let n_f = src.len() as f64;
            let ms = src.iter().sum::<Vector3<f64>>() / n_f;
            let md = dst.iter().sum::<Vector3<f64>>() / n_f;
            let mut m = Matrix3::<f64>::zeros();
            for (s, d) in src.iter().zip(&dst) {
                m += (s - ms) * (d - md).transpose();
            }
            let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
            let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
            let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
            let n4 = nalgebra::Matrix4::new(
                sxx + syy + szz,
                syz - szy,
                szx - sxz,
                sxy - syx,
                syz - szy,
                sxx - syy - szz,
                sxy + syx,
                szx + sxz,
                szx - sxz,
                sxy + syx,
                -sxx + syy - szz,
                syz + szy,
                sxy - syx,
                szx + sxz,
                syz + szy,
                -sxx - syy + szz,
            );
            let eig = nalgebra::SymmetricEigen::new(n4);
            let mut best = 0;
            for i in 1..4 {
                if eig.eigenvalues[i] > eig.eigenvalues[best] {
                    best = i;
                }
            }
            let q = eig.eigenvectors.column(best);
            let r_horn = crate::math::quat_to_matrix(&[q[0], q[1], q[2], q[3]]);
            let t_horn = md - r_horn * ms;
            assert!((r_est - r_horn).norm() < 1e-9, "rotation mismatch");
            assert!((t_est - t_horn).norm() < 1e-9, "translation mismatch");
        }
    }

    fn ring_trajectory(n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.4;
                CameraPose::look_at(
                    &Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.7),
                    &Vector3::zeros(),
                    &Vector3::new(0.0, 0.0, 1.0),
                )
            })
            .collect()
    }

    #[test]
    fn ate_identical_is_zero() {
        let traj = ring_trajectory(8);
        // The closed-form alignment leaves only floating-point noise.
        assert!(ate_rmse(&traj, &traj, AlignMode::Se3).unwrap() <= 1e-12);
    }

    #[test]
    fn ate_rigid_transform_is_zero() {
        let traj = ring_trajectory(10);
        let g = CameraPose::look_at(
            &Vector3::new(0.5, 0.7, -0.3),
            &Vector3::new(-1.0, 0.2, 0.8),
            &Vector3::new(0.0, 0.0, 1.0),
        );
        let moved: Vec<CameraPose> = traj.iter().map(|p| p.compose(&g)).collect();
        let rmse = ate_rmse(&moved, &traj, AlignMode::Se3).unwrap();
        assert!(rmse < 1e-9, "rmse {rmse} cm");
    }

    #[test]
    fn ate_noise_magnitude_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let traj = ring_trajectory(50);
        let sigma_m = 0.01; // 1 cm
        let noisy: Vec<CameraPose> = traj
            .iter()
            .map(|p| {
                let mut q = *p;
                let c = p.camera_center()
                    + Vector3::new(
                        sigma_m * rng.sample(rand_distr_standard()),
                        sigma_m * rng.sample(rand_distr_standard()),
                        sigma_m * rng.sample(rand_distr_standard()),
                    );
                q.translation = -(q.rotation * c);
                q
            })
            .collect();
        let rmse = ate_rmse(&noisy, &traj, AlignMode::Se3).unwrap();
        // sigma = 1 cm per axis => expected 3D RMSE about sqrt(3) cm.
        assert!(rmse > 0.8 && rmse < 3.5, "rmse {rmse} cm");

        // Direct recomputation through an independent alignment path.
        let src: Vec<Vector3<f64>> = noisy.iter().map(|p| p.camera_center()).collect();
        let dst: Vec<Vector3<f64>> = traj.iter().map(|p| p.camera_center()).collect();
        let (s, r, t) = umeyama_alignment(&src, &dst, false);
        let mut acc = 0.0;
        for (a, b) in src.iter().zip(&dst) {
            acc += (s * (r * a) + t - b).norm_squared();
        }
        let oracle = (acc / src.len() as f64).sqrt() * 100.0;
        assert!((rmse - oracle).abs() < 1e-9);
    }

    #[test]
    fn ate_too_few_poses() {
        let traj = ring_trajectory(2);
        assert!(matches!(
            ate_rmse(&traj, &traj, AlignMode::Se3),
            Err(GeometryError::TooFewPoses(2))
        ));
    }

    #[test]
    fn sim3_alignment_removes_scale() {
        let traj = ring_trajectory(12);
        let scaled: Vec<CameraPose> = traj
            .iter()
            .map(|p| {
                let c = p.camera_center() * 1.5;
                CameraPose {
                    rotation: p.rotation,
                    translation: -(p.rotation * c),
                }
            })
            .collect();
        let rigid = ate_rmse(&scaled, &traj, AlignMode::Se3).unwrap();
        let sim = ate_rmse(&scaled, &traj, AlignMode::Sim3).unwrap();
        assert!(sim < 1e-9, "sim3 rmse {sim}");
        assert!(rigid > 1.0, "rigid rmse {rigid}");
    }

    #[test]
    fn quaternion_export_is_canonical() {
        for pose in ring_trajectory(5) {
            let q = matrix_to_quat(&pose.rotation);
            assert!(q[0] >= 0.0);
        }
    }
}
