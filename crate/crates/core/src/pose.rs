//! Standalone pose recovery from keypoint measurements (EPnP with
//! Gauss-Newton reprojection refinement) and the evaluation metrics,
//! including their calibrated zeroing thresholds.

use crate::geometry::{dcm_to_quat, quat_to_dcm, CameraModel, KeypointModel, Quaternion, Roi};
use crate::heatmap::KeypointMeasurement;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, Vector3, Vector6};
use thiserror::Error;

/// Relative error below which the translation error is zeroed, per meter of
/// range (label-accuracy calibration of the robotic test facility).
pub const CALIB_ET_PER_M: f64 = 2.173e-3;

/// Orientation error below which the rotation error is zeroed, degrees.
pub const CALIB_EQ_DEG: f64 = 0.169;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("PnP needs at least 4 valid keypoints, got {got}")]
    TooFewPoints { got: usize },
    #[error("degenerate keypoint geometry (collinear points)")]
    DegenerateGeometry,
}

/// Target pose in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    /// Target position, meters.
    pub t: Vector3<f64>,
    /// Target orientation (body w.r.t. camera).
    pub q: Quaternion,
}

/// Raw and calibrated translation/orientation errors of one estimate.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorReport {
    pub e_t: f64,
    pub e_q: f64,
    pub e_t_calibrated: f64,
    pub e_q_calibrated: f64,
}

// ---------------------------------------------------------------------------
// EPnP
// ---------------------------------------------------------------------------

struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

/// Solve for the pose from valid keypoints of a measurement. Measurement
/// coordinates are crop-frame; they are mapped back to the full frame with
/// the RoI, and the per-keypoint covariances weight the refinement stage.
pub fn solve_pnp(
    meas: &KeypointMeasurement,
    model: &KeypointModel,
    cam: &CameraModel,
    roi: &Roi,
) -> Result<Pose, PoseError> {
    let mut world = Vec::new();
    let mut image = Vec::new();
    let mut weights = Vec::new();
    let crop_to_full = roi.side / roi.out_size as f64;
    for k in 0..meas.num_keypoints() {
        if !meas.valid[k] {
            continue;
        }
        world.push(model.point(k));
        image.push(roi.crop_to_full(&meas.point(k)));
        // Covariance scales with the crop-to-full ratio squared.
        let cov = meas.cov[k] * crop_to_full * crop_to_full;
        weights.push(cov.try_inverse().unwrap_or_else(Matrix2::identity));
    }
    if world.len() < 4 {
        return Err(PoseError::TooFewPoints { got: world.len() });
    }
    let intr = Intrinsics {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
    };
    let (r, t) = epnp(&world, &image, &intr)?;
    let (r, t) = refine_pose(&world, &image, &weights, &intr, r, t);
    Ok(Pose {
        t,
        q: dcm_to_quat(&r),
    })
}

/// Reprojection RMS of a pose against full-frame pixel observations.
pub fn reprojection_rms(
    pose: &Pose,
    model: &KeypointModel,
    cam: &CameraModel,
    image_full: &[(usize, [f64; 2])],
) -> f64 {
    let r = quat_to_dcm(&pose.q);
    let mut acc = 0.0;
    for (k, u) in image_full {
        let x = r * model.point(*k) + pose.t;
        let proj = cam.pixel(&x);
        acc += (proj[0] - u[0]).powi(2) + (proj[1] - u[1]).powi(2);
    }
    (acc / image_full.len() as f64).sqrt()
}

fn epnp(
    world: &[Vector3<f64>],
    image: &[[f64; 2]],
    intr: &Intrinsics,
) -> Result<(Matrix3<f64>, Vector3<f64>), PoseError> {
    let n = world.len();

    // Control points from the principal directions of the point cloud.
    let c0 = world.iter().sum::<Vector3<f64>>() / n as f64;
    let mut scatter = Matrix3::zeros();
    for p in world {
        let d = p - c0;
        scatter += d * d.transpose() / n as f64;
    }
    let eig = scatter.symmetric_eigen();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let dirs: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if lam[1] <= 1e-12 * lam[0].max(1e-300) {
        return Err(PoseError::DegenerateGeometry);
    }
    let planar = lam[2] <= 1e-8 * lam[0];
    let ncp = if planar { 3 } else { 4 };
    let mut ctrl = vec![c0];
    for j in 0..ncp - 1 {
        ctrl.push(c0 + lam[j].sqrt() * dirs[j]);
    }

    // Barycentric coordinates of every world point in the control basis.
    let mut alphas = vec![vec![0.0; ncp]; n];
    if planar {
        let a1 = ctrl[1] - c0;
        let a2 = ctrl[2] - c0;
        let g = nalgebra::Matrix2::new(a1.dot(&a1), a1.dot(&a2), a1.dot(&a2), a2.dot(&a2));
        let g_inv = g.try_inverse().ok_or(PoseError::DegenerateGeometry)?;
        for (i, p) in world.iter().enumerate() {
            let d = p - c0;
            let rhs = nalgebra::Vector2::new(a1.dot(&d), a2.dot(&d));
            let ab = g_inv * rhs;
            alphas[i] = vec![1.0 - ab[0] - ab[1], ab[0], ab[1]];
        }
    } else {
        let basis = Matrix3::from_columns(&[ctrl[1] - c0, ctrl[2] - c0, ctrl[3] - c0]);
        let inv = basis.try_inverse().ok_or(PoseError::DegenerateGeometry)?;
        for (i, p) in world.iter().enumerate() {
            let ab = inv * (p - c0);
            alphas[i] = vec![1.0 - ab[0] - ab[1] - ab[2], ab[0], ab[1], ab[2]];
        }
    }

    // M x = 0 where x stacks the camera-frame control points.
    let dim = 3 * ncp;
    let mut m = DMatrix::zeros(2 * n, dim);
    for i in 0..n {
        let (u, v) = (image[i][0], image[i][1]);
        for j in 0..ncp {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a * intr.fx;
            m[(2 * i, 3 * j + 2)] = a * (intr.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * intr.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (intr.cy - v);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    // Null-space candidates, smallest eigenvalue first.
    let vs: Vec<DVector<f64>> = order
        .iter()
        .take(4)
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    // Pairwise squared distances between world control points.
    let mut pairs = Vec::new();
    for j in 0..ncp {
        for k in j + 1..ncp {
            pairs.push((j, k, (ctrl[j] - ctrl[k]).norm_squared()));
        }
    }
    let dv = |v: &DVector<f64>, j: usize, k: usize| -> Vector3<f64> {
        Vector3::new(
            v[3 * j] - v[3 * k],
            v[3 * j + 1] - v[3 * k + 1],
            v[3 * j + 2] - v[3 * k + 2],
        )
    };

    // Candidate beta vectors from the reference method's approximations.
    let mut candidates: Vec<[f64; 4]> = Vec::new();
    {
        // N = 1: single null vector, closed-form scale.
        let (mut num, mut den) = (0.0, 0.0);
        for &(j, k, rho) in &pairs {
            let d = dv(&vs[0], j, k).norm();
            num += d * rho.sqrt();
            den += d * d;
        }
        candidates.push([num / den, 0.0, 0.0, 0.0]);
    }
    if pairs.len() >= 3 {
        // N = 2: unknowns (b11, b12, b22).
        let mut l = DMatrix::zeros(pairs.len(), 3);
        let mut rho = DVector::zeros(pairs.len());
        for (r, &(j, k, d2)) in pairs.iter().enumerate() {
            let d1 = dv(&vs[0], j, k);
            let d2v = dv(&vs[1], j, k);
            l[(r, 0)] = d1.norm_squared();
            l[(r, 1)] = 2.0 * d1.dot(&d2v);
            l[(r, 2)] = d2v.norm_squared();
            rho[r] = d2;
        }
        if let Some(b) = solve_ls(&l, &rho) {
            let (mut b11, mut b12, b22) = (b[0], b[1], b[2]);
            if b11 < 0.0 && b22 < 0.0 {
                b11 = -b11;
                b12 = -b12;
            }
            if b11 > 0.0 {
                let beta1 = b11.sqrt();
                let mut beta2 = if b22 > 0.0 { b22.abs().sqrt() } else { 0.0 };
                if b12 < 0.0 {
                    beta2 = -beta2;
                }
                candidates.push([beta1, beta2, 0.0, 0.0]);
            }
        }
    }
    if pairs.len() >= 5 && vs.len() >= 3 {
        // N = 3: unknowns (b11, b12, b22, b13, b23).
        let mut l = DMatrix::zeros(pairs.len(), 5);
        let mut rho = DVector::zeros(pairs.len());
        for (r, &(j, k, d2)) in pairs.iter().enumerate() {
            let d1 = dv(&vs[0], j, k);
            let d2v = dv(&vs[1], j, k);
            let d3 = dv(&vs[2], j, k);
            l[(r, 0)] = d1.norm_squared();
            l[(r, 1)] = 2.0 * d1.dot(&d2v);
            l[(r, 2)] = d2v.norm_squared();
            l[(r, 3)] = 2.0 * d1.dot(&d3);
            l[(r, 4)] = 2.0 * d2v.dot(&d3);
            rho[r] = d2;
        }
        if let Some(b) = solve_ls(&l, &rho) {
            if b[0] > 0.0 {
                let beta1 = b[0].sqrt();
                let mut beta2 = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
                if b[1] < 0.0 {
                    beta2 = -beta2;
                }
                let beta3 = b[3] / beta1;
                candidates.push([beta1, beta2, beta3, 0.0]);
            }
        }
    }

    // Refine each candidate on the distance constraints, then pick the pose
    // with the smallest reprojection error among positive-depth solutions.
    let mut best: Option<(f64, Matrix3<f64>, Vector3<f64>)> = None;
    for mut beta in candidates {
        gauss_newton_betas(&vs, &pairs, &dv, &mut beta);
        // Camera-frame control points.
        let mut ctrl_cam = vec![Vector3::zeros(); ncp];
        for (j, c) in ctrl_cam.iter_mut().enumerate() {
            for (a, v) in beta.iter().zip(&vs) {
                *c += *a * Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
            }
        }
        let mut pcs: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                (0..ncp)
                    .map(|j| alphas[i][j] * ctrl_cam[j])
                    .sum::<Vector3<f64>>()
            })
            .collect();
        // The null vectors are sign-ambiguous; enforce positive depth.
        let depth_sum: f64 = pcs.iter().map(|p| p.z).sum();
        if depth_sum < 0.0 {
            for p in &mut pcs {
                *p = -*p;
            }
        }
        if pcs.iter().any(|p| p.z <= 0.0) {
            continue;
        }
        let Some((r, t)) = kabsch(world, &pcs) else {
            continue;
        };
        let err = reprojection_cost(world, image, intr, &r, &t);
        if best.as_ref().map_or(true, |(e, _, _)| err < *e) {
            best = Some((err, r, t));
        }
    }
    let (_, r, t) = best.ok_or(PoseError::DegenerateGeometry)?;
    Ok((r, t))
}

fn solve_ls(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}

/// Refine betas on the control-point distance constraints (residuals
/// |sum beta_a dv_a|^2 - rho), a few damped Gauss-Newton iterations.
fn gauss_newton_betas(
    vs: &[DVector<f64>],
    pairs: &[(usize, usize, f64)],
    dv: &impl Fn(&DVector<f64>, usize, usize) -> Vector3<f64>,
    beta: &mut [f64; 4],
) {
    let nb = vs.len().min(4);
    for _ in 0..8 {
        let mut jt_j: DMatrix<f64> = DMatrix::zeros(nb, nb);
        let mut jt_r: DVector<f64> = DVector::zeros(nb);
        for &(j, k, rho) in pairs {
            let deltas: Vec<Vector3<f64>> = (0..nb).map(|a| dv(&vs[a], j, k)).collect();
            let combo: Vector3<f64> = deltas.iter().zip(beta.iter()).map(|(d, b)| *b * d).sum();
            let resid = combo.norm_squared() - rho;
            for a in 0..nb {
                let ja = 2.0 * combo.dot(&deltas[a]);
                jt_r[a] += ja * resid;
                for b in 0..nb {
                    jt_j[(a, b)] += ja * 2.0 * combo.dot(&deltas[b]);
                }
            }
        }
        for d in 0..nb {
            jt_j[(d, d)] += 1e-12;
        }
        let Some(step) = jt_j.lu().solve(&jt_r) else {
            return;
        };
        for a in 0..nb {
            beta[a] -= step[a];
        }
        if step.amax() < 1e-12 {
            break;
        }
    }
}

/// Rigid transform world -> camera minimizing least squares over pairs.
fn kabsch(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vector3<f64>>() / n;
    let cc = cam.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (w - cw) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut d = Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * d * u.transpose();
    let t = cc - r * cw;
    Some((r, t))
}

fn reprojection_cost(
    world: &[Vector3<f64>],
    image: &[[f64; 2]],
    intr: &Intrinsics,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> f64 {
    let mut acc = 0.0;
    for (w, u) in world.iter().zip(image) {
        let x = r * w + t;
        if x.z <= 1e-9 {
            return f64::INFINITY;
        }
        let pu = intr.fx * x.x / x.z + intr.cx;
        let pv = intr.fy * x.y / x.z + intr.cy;
        acc += (pu - u[0]).powi(2) + (pv - u[1]).powi(2);
    }
    acc / world.len() as f64
}

/// Covariance-weighted Gauss-Newton polish of (R, t) on the reprojection
/// residuals; at most 10 iterations, stops when the mean squared pixel
/// cost changes by less than 1e-8.
fn refine_pose(
    world: &[Vector3<f64>],
    image: &[[f64; 2]],
    weights: &[Matrix2<f64>],
    intr: &Intrinsics,
    mut r: Matrix3<f64>,
    mut t: Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let cost = |r: &Matrix3<f64>, t: &Vector3<f64>| reprojection_cost(world, image, intr, r, t);
    let mut prev = cost(&r, &t);
    for _ in 0..10 {
        let mut jt_j = SMatrix::<f64, 6, 6>::zeros();
        let mut jt_r = Vector6::zeros();
        for ((w, u), wgt) in world.iter().zip(image).zip(weights) {
            let x = r * w + t;
            if x.z <= 1e-9 {
                return (r, t);
            }
            let inv_z = 1.0 / x.z;
            let proj = [
                intr.fx * x.x * inv_z + intr.cx,
                intr.fy * x.y * inv_z + intr.cy,
            ];
            let resid = nalgebra::Vector2::new(proj[0] - u[0], proj[1] - u[1]);
            let jp = nalgebra::Matrix2x3::new(
                intr.fx * inv_z,
                0.0,
                -intr.fx * x.x * inv_z * inv_z,
                0.0,
                intr.fy * inv_z,
                -intr.fy * x.y * inv_z * inv_z,
            );
            // Left perturbation: x = exp(dtheta) R w + t + dt.
            let y = x - t;
            let skew = Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0);
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (-skew)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            jt_j += j.transpose() * wgt * j;
            jt_r += j.transpose() * wgt * resid;
        }
        for d in 0..6 {
            jt_j[(d, d)] += 1e-12;
        }
        let Some(step) = jt_j.lu().solve(&jt_r) else {
            break;
        };
        let dtheta = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        let r_new = quat_to_dcm(&Quaternion::from_rotvec(&-dtheta)) * r;
        let t_new = t - dt;
        let c = cost(&r_new, &t_new);
        if c.is_finite() && c < prev {
            let gain = prev - c;
            r = r_new;
            t = t_new;
            prev = c;
            if gain < 1e-8 {
                break;
            }
        } else {
            break;
        }
    }
    (r, t)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Translation and orientation errors with the calibrated zeroing rule.
pub fn pose_errors(est: &Pose, truth: &Pose) -> ErrorReport {
    let e_t = (est.t - truth.t).norm();
    let dot = est
        .q
        .normalized()
        .dot(&truth.q.normalized())
        .abs()
        .clamp(0.0, 1.0);
    let e_q = (2.0 * dot.acos()).to_degrees();
    let range = truth.t.norm();
    let e_t_calibrated = if range > 0.0 && e_t / range < CALIB_ET_PER_M {
        0.0
    } else {
        e_t
    };
    let e_q_calibrated = if e_q < CALIB_EQ_DEG { 0.0 } else { e_q };
    ErrorReport {
        e_t,
        e_q,
        e_t_calibrated,
        e_q_calibrated,
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("log spans {span:.1} s, need at least two orbital periods ({needed:.1} s)")]
pub struct InsufficientSpan {
    pub span: f64,
    pub needed: f64,
}

/// Steady-state errors: mean of (e_t, e_q) over the second orbit,
/// `t in [T, 2T]`.
pub fn steady_state_errors(
    log: &[(f64, ErrorReport)],
    orbit_period: f64,
) -> Result<(f64, f64), InsufficientSpan> {
    let span = log.last().map_or(0.0, |(t, _)| *t);
    // A sampled log whose last epoch falls within one sample interval of
    // 2T still covers the second orbit (epochs land on multiples of the
    // cadence, not on the period).
    let last_dt = if log.len() >= 2 {
        log[log.len() - 1].0 - log[log.len() - 2].0
    } else {
        0.0
    };
    if span + last_dt < 2.0 * orbit_period - 1e-9 {
        return Err(InsufficientSpan {
            span,
            needed: 2.0 * orbit_period,
        });
    }
    let mut n = 0usize;
    let (mut et, mut eq) = (0.0, 0.0);
    for (t, e) in log {
        if *t >= orbit_period && *t <= 2.0 * orbit_period {
            et += e.e_t;
            eq += e.e_q;
            n += 1;
        }
    }
    Ok((et / n as f64, eq / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, roi_from_keypoints, ROI_FLOOR_SIDE, ROI_OUT_SIZE};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn identity_roi(cam: &CameraModel) -> Roi {
        Roi {
            x0: 0.0,
            y0: 0.0,
            side: cam.width.min(cam.height) as f64,
            out_size: ROI_OUT_SIZE as u32,
        }
    }

    fn measurement_from_pixels(px: &[[f64; 2]], roi: &Roi) -> KeypointMeasurement {
        let k = px.len();
        let mut y = DVector::zeros(2 * k);
        for (i, p) in px.iter().enumerate() {
            let c = roi.full_to_crop(p);
            y[2 * i] = c[0];
            y[2 * i + 1] = c[1];
        }
        KeypointMeasurement {
            y,
            cov: vec![Matrix2::identity(); k],
            valid: vec![true; k],
        }
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        Pose {
            t: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(8.0..25.0),
            ),
            q: Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        }
    }

    #[test]
    fn pnp_noise_free_round_trip() {
        let cam = CameraModel::default();
        let model = KeypointModel::builtin();
        let mut rng = StdRng::seed_from_u64(21);
        let mut solved = 0;
        for _ in 0..100 {
            let truth = random_pose(&mut rng);
            let Ok(px) = project(&truth.t, &truth.q, &model, &cam) else {
                continue;
            };
            let roi = roi_from_keypoints(&px, 1.2, ROI_FLOOR_SIDE, &cam);
            let meas = measurement_from_pixels(&px, &roi);
            let pose = solve_pnp(&meas, &model, &cam, &roi).unwrap();
            let err = pose_errors(&pose, &truth);
            let pairs: Vec<(usize, [f64; 2])> = px.iter().copied().enumerate().collect();
            let rms = reprojection_rms(&pose, &model, &cam, &pairs);
            assert!(err.e_q < 1e-5, "orientation error {} deg", err.e_q);
            assert!(rms < 1e-6, "reprojection rms {rms} px");
            solved += 1;
        }
        assert!(solved > 80, "only {solved} poses were in view");
    }

    #[test]
    fn pnp_planar_square() {
        let cam = CameraModel::default();
        let model = KeypointModel {
            points: vec![
                [0.5, 0.5, 0.0],
                [-0.5, 0.5, 0.0],
                [-0.5, -0.5, 0.0],
                [0.5, -0.5, 0.0],
            ],
        };
        let truth = Pose {
            t: Vector3::new(0.4, -0.2, 12.0),
            q: Quaternion::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 0.5),
        };
        let px = project(&truth.t, &truth.q, &model, &cam).unwrap();
        let roi = roi_from_keypoints(&px, 1.2, ROI_FLOOR_SIDE, &cam);
        let meas = measurement_from_pixels(&px, &roi);
        let pose = solve_pnp(&meas, &model, &cam, &roi).unwrap();
        assert!(pose.t.z > 0.0);
        let err = pose_errors(&pose, &truth);
        assert!(err.e_q < 1e-4, "planar orientation error {} deg", err.e_q);
        assert!(err.e_t < 1e-4, "planar translation error {} m", err.e_t);
    }

    #[test]
    fn pnp_too_few_points() {
        let cam = CameraModel::default();
        let model = KeypointModel::builtin();
        let roi = identity_roi(&cam);
        let mut meas = measurement_from_pixels(&[[100.0, 100.0]; 11], &roi);
        for k in 3..11 {
            meas.valid[k] = false;
        }
        assert_eq!(
            solve_pnp(&meas, &model, &cam, &roi).unwrap_err(),
            PoseError::TooFewPoints { got: 3 }
        );
    }

    #[test]
    fn pnp_collinear_points_degenerate() {
        let cam = CameraModel::default();
        let model = KeypointModel {
            points: vec![
                [0.0, 0.0, 0.0],
                [0.1, 0.0, 0.0],
                [0.2, 0.0, 0.0],
                [0.3, 0.0, 0.0],
            ],
        };
        let truth = Pose {
            t: Vector3::new(0.0, 0.0, 10.0),
            q: Quaternion::IDENTITY,
        };
        let px = project(&truth.t, &truth.q, &model, &cam).unwrap();
        let roi = identity_roi(&cam);
        let meas = measurement_from_pixels(&px, &roi);
        assert_eq!(
            solve_pnp(&meas, &model, &cam, &roi).unwrap_err(),
            PoseError::DegenerateGeometry
        );
    }

    #[test]
    fn pnp_rotation_equivariance() {
        // Rotating the camera frame rotates the recovered pose consistently.
        let cam = CameraModel::default();
        let model = KeypointModel::builtin();
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            // Small frame rotation that keeps the target in view.
            let frame_q = Quaternion::from_axis_angle(
                &Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
                rng.gen_range(-0.02..0.02),
            );
            let rotated = Pose {
                t: frame_q.rotate(&truth.t),
                q: frame_q.mul(&truth.q),
            };
            let Ok(px) = project(&rotated.t, &rotated.q, &model, &cam) else {
                continue;
            };
            let roi = roi_from_keypoints(&px, 1.2, ROI_FLOOR_SIDE, &cam);
            let meas = measurement_from_pixels(&px, &roi);
            let pose = solve_pnp(&meas, &model, &cam, &roi).unwrap();
            let err = pose_errors(&pose, &rotated);
            assert!(err.e_q < 1e-5 && err.e_t < 1e-5);
        }
    }

    #[test]
    fn error_metric_basics() {
        let pose = Pose {
            t: Vector3::new(1.0, 2.0, 10.0),
            q: Quaternion::from_axis_angle(&Vector3::x(), 0.3),
        };
        let report = pose_errors(&pose, &pose);
        assert_eq!(report.e_t, 0.0);
        assert_eq!(report.e_q, 0.0);

        // Double cover: -q is the same rotation.
        let flipped = Pose {
            t: pose.t,
            q: Quaternion {
                w: -pose.q.w,
                x: -pose.q.x,
                y: -pose.q.y,
                z: -pose.q.z,
            },
        };
        assert_eq!(pose_errors(&flipped, &pose).e_q, 0.0);
    }

    #[test]
    fn error_metric_calibration_thresholds() {
        let truth = Pose {
            t: Vector3::new(0.0, 0.0, 10.0),
            q: Quaternion::IDENTITY,
        };
        // 0.02 m at 10 m range: 2.0 mm/m < 2.173 mm/m -> zeroed.
        let est = Pose {
            t: Vector3::new(0.02, 0.0, 10.0),
            q: Quaternion::IDENTITY,
        };
        let r = pose_errors(&est, &truth);
        assert_relative_eq!(r.e_t, 0.02, epsilon = 1e-12);
        assert_eq!(r.e_t_calibrated, 0.0);

        // Just above the ratio threshold: kept.
        let est = Pose {
            t: Vector3::new(0.0218, 0.0, 10.0),
            q: Quaternion::IDENTITY,
        };
        let r = pose_errors(&est, &truth);
        assert_eq!(r.e_t_calibrated, r.e_t);

        // Orientation: 0.1 deg < 0.169 deg -> zeroed; 0.2 deg kept.
        let est = Pose {
            t: truth.t,
            q: Quaternion::from_axis_angle(&Vector3::z(), 0.1f64.to_radians()),
        };
        let r = pose_errors(&est, &truth);
        assert!(r.e_q > 0.0 && r.e_q_calibrated == 0.0);
        let est = Pose {
            t: truth.t,
            q: Quaternion::from_axis_angle(&Vector3::z(), 0.2f64.to_radians()),
        };
        let r = pose_errors(&est, &truth);
        assert_relative_eq!(r.e_q_calibrated, r.e_q, epsilon = 1e-12);
        assert!(r.e_q_calibrated <= r.e_q && r.e_t_calibrated <= r.e_t);
    }

    #[test]
    fn steady_state_windowing() {
        let period = 100.0;
        let mut log = Vec::new();
        for i in 0..=40 {
            let t = i as f64 * 5.0;
            let e = if t < period { 1.0 } else { 0.2 };
            log.push((
                t,
                ErrorReport {
                    e_t: e,
                    e_q: 2.0 * e,
                    e_t_calibrated: e,
                    e_q_calibrated: 2.0 * e,
                },
            ));
        }
        let (et, eq) = steady_state_errors(&log, period).unwrap();
        assert_relative_eq!(et, 0.2, epsilon = 1e-12);
        assert_relative_eq!(eq, 0.4, epsilon = 1e-12);

        // Constant sequence -> the constant.
        let const_log: Vec<_> = (0..=40)
            .map(|i| {
                (
                    i as f64 * 5.0,
                    ErrorReport {
                        e_t: 0.7,
                        e_q: 0.9,
                        ..Default::default()
                    },
                )
            })
            .collect();
        let (et, eq) = steady_state_errors(&const_log, period).unwrap();
        assert_relative_eq!(et, 0.7, epsilon = 1e-12);
        assert_relative_eq!(eq, 0.9, epsilon = 1e-12);

        // Too short.
        assert!(steady_state_errors(&log[..10], period).is_err());
    }
}
