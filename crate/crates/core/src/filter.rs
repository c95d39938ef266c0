//! Adaptive unscented Kalman filter over the 12-dimensional state
//! [ROE (6), MRP attitude deviation (3), relative angular velocity (3)].
//!
//! The attitude is handled multiplicatively: sigma points live in MRP
//! deviation space around a reference quaternion that absorbs the mean
//! rotation after every time and measurement update, so the stored
//! deviation is always zero between operations. Measurement noise comes
//! from the heatmap spread covariances; outliers are gated per keypoint on
//! the squared Mahalanobis distance of the innovation; the process noise
//! spectral densities are re-estimated online from windowed filter
//! residuals and rebuilt through analytical discrete noise mappings, which
//! keeps Q positive semidefinite by construction.

use crate::dynamics::{roe_stm, roe_to_rtn, ChiefOrbit, Roe, StmMode};
use crate::geometry::{
    camera_from_rtn, mrp_to_quat, project, quat_to_mrp, CameraModel, GeometryError, KeypointModel,
    Mrp, Quaternion, Roi,
};
use crate::heatmap::KeypointMeasurement;
use crate::pose::Pose;
use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix6, SMatrix, SVector, Vector3, Vector6};
use std::collections::VecDeque;
use thiserror::Error;

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;

/// State dimension.
pub const NX: usize = 12;

/// Per-keypoint Mahalanobis gate on the 2-dof innovation (0.9973 tail).
pub const GATE_CHI2_2DOF: f64 = 11.83;

/// Minimum accepted keypoints for a measurement update.
pub const MIN_ACCEPTED_KEYPOINTS: usize = 4;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("state covariance is not positive semidefinite (conditioning failed)")]
    CovarianceNotPsd,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("too few accepted keypoints for an update: {got}")]
    TooFewAccepted { got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// State and UT configuration
// ---------------------------------------------------------------------------

/// Full filter belief. The MRP deviation `p` is zero between operations;
/// its uncertainty lives in `cov`.
#[derive(Debug, Clone)]
pub struct RelativeState {
    pub alpha: Vector6<f64>,
    pub p: Vector3<f64>,
    pub w: Vector3<f64>,
    pub q_ref: Quaternion,
    pub cov: Matrix12,
    pub t: f64,
}

impl RelativeState {
    pub fn new(alpha: Roe, q_ref: Quaternion, w: Vector3<f64>, cov: Matrix12) -> Self {
        RelativeState {
            alpha: alpha.as_vector(),
            p: Vector3::zeros(),
            w,
            q_ref,
            cov,
            t: 0.0,
        }
    }

    pub fn roe(&self) -> Roe {
        Roe::from_vector(&self.alpha)
    }

    fn mean_vector(&self) -> Vector12 {
        let mut x = Vector12::zeros();
        x.fixed_rows_mut::<6>(0).copy_from(&self.alpha);
        x.fixed_rows_mut::<3>(6).copy_from(&self.p);
        x.fixed_rows_mut::<3>(9).copy_from(&self.w);
        x
    }

    /// Normalized estimation error squared against a truth state, with the
    /// attitude error taken multiplicatively about the reference.
    pub fn nees(
        &self,
        truth_alpha: &Vector6<f64>,
        truth_q: &Quaternion,
        truth_w: &Vector3<f64>,
    ) -> f64 {
        let dq = truth_q.mul(&self.q_ref.conjugate());
        let p_err = quat_to_mrp(&dq).p;
        let mut e = Vector12::zeros();
        e.fixed_rows_mut::<6>(0)
            .copy_from(&(truth_alpha - self.alpha));
        e.fixed_rows_mut::<3>(6).copy_from(&p_err);
        e.fixed_rows_mut::<3>(9).copy_from(&(truth_w - self.w));
        match Cholesky::new(symmetrize(&self.cov)) {
            Some(chol) => e.dot(&chol.solve(&e)),
            None => f64::INFINITY,
        }
    }
}

/// Unscented transform scaling. Defaults: alpha = 1, beta = 2,
/// kappa = 3 - n for the 12-state filter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct UtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtConfig {
    fn default() -> Self {
        UtConfig {
            alpha: 1.0,
            beta: 2.0,
            kappa: 3.0 - NX as f64,
        }
    }
}

impl UtConfig {
    fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    fn weights(&self, n: usize) -> (f64, f64, f64) {
        let lambda = self.lambda(n);
        let wm0 = lambda / (n as f64 + lambda);
        let wc0 = wm0 + 1.0 - self.alpha * self.alpha + self.beta;
        let wi = 0.5 / (n as f64 + lambda);
        (wm0, wc0, wi)
    }
}

pub fn symmetrize(m: &Matrix12) -> Matrix12 {
    (m + m.transpose()) * 0.5
}

/// Clamp eigenvalues at zero; keeps covariances PSD after downdates.
pub fn psd_floor(m: &Matrix12) -> Matrix12 {
    let eig = symmetrize(m).symmetric_eigen();
    let mut out = Matrix12::zeros();
    for i in 0..NX {
        let lam = eig.eigenvalues[i].max(0.0);
        let v = eig.eigenvectors.column(i);
        out += lam * v * v.transpose();
    }
    symmetrize(&out)
}

/// Smallest eigenvalue, for PSD assertions in tests and diagnostics.
pub fn min_eigenvalue(m: &Matrix12) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

/// 2n+1 sigma points from a mean and covariance; escalating diagonal
/// jitter before giving up on the square root.
fn sigma_points(
    mean: &Vector12,
    cov: &Matrix12,
    ut: &UtConfig,
) -> Result<Vec<Vector12>, FilterError> {
    let scale = ut.lambda(NX) + NX as f64;
    let base = symmetrize(cov) * scale;
    let trace_scale = (cov.trace() / NX as f64).abs();
    let mut chol = None;
    for jitter in [
        0.0,
        1e-30 + 1e-12 * trace_scale,
        1e-24 + 1e-9 * trace_scale,
        1e-18 + 1e-6 * trace_scale,
    ] {
        let attempt = base + Matrix12::identity() * (jitter * scale);
        if let Some(c) = Cholesky::new(attempt) {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or(FilterError::CovarianceNotPsd)?;
    let l = chol.l();
    let mut points = Vec::with_capacity(2 * NX + 1);
    points.push(*mean);
    for i in 0..NX {
        let col: Vector12 = l.column(i).into_owned();
        points.push(mean + col);
        points.push(mean - col);
    }
    Ok(points)
}

fn ut_mean(points: &[Vector12], ut: &UtConfig) -> Vector12 {
    let (wm0, _, wi) = ut.weights(NX);
    let mut mean = wm0 * points[0];
    for p in &points[1..] {
        mean += wi * p;
    }
    mean
}

// ---------------------------------------------------------------------------
// Time update
// ---------------------------------------------------------------------------

/// Sigma-point propagation over `dt`: ROE through the state-transition
/// matrix, attitude multiplicatively with the per-point angular velocity
/// held constant. The reference quaternion absorbs the propagated mean
/// rotation and the mean MRP resets to zero.
pub fn time_update(
    state: &RelativeState,
    chief: &ChiefOrbit,
    stm_mode: StmMode,
    dt: f64,
    ut: &UtConfig,
    process_noise: &Matrix12,
) -> Result<RelativeState, FilterError> {
    assert!(dt > 0.0, "dt must be positive");
    debug_assert!(
        state.p.norm() == 0.0,
        "MRP deviation must be reset before propagation"
    );

    let phi = roe_stm(chief, dt, stm_mode);
    let points = sigma_points(&state.mean_vector(), &state.cov, ut)?;

    // Reference propagated with the mean angular velocity (sigma point 0).
    let q_ref_prop = state.q_ref.mul(&Quaternion::from_rotvec(&(state.w * dt)));
    let q_ref_prop_inv = q_ref_prop.conjugate();

    let mut propagated = Vec::with_capacity(points.len());
    for x in &points {
        let alpha: Vector6<f64> = phi * x.fixed_rows::<6>(0).into_owned();
        let p = Mrp::new(x.fixed_rows::<3>(6).into_owned());
        let w: Vector3<f64> = x.fixed_rows::<3>(9).into_owned();
        let q = mrp_to_quat(&p).mul(&state.q_ref);
        let q_new = q.mul(&Quaternion::from_rotvec(&(w * dt)));
        let p_new = quat_to_mrp(&q_new.mul(&q_ref_prop_inv)).p;
        let mut out = Vector12::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(&alpha);
        out.fixed_rows_mut::<3>(6).copy_from(&p_new);
        out.fixed_rows_mut::<3>(9).copy_from(&w);
        propagated.push(out);
    }

    let mean = ut_mean(&propagated, ut);
    let (_, wc0, wi) = ut.weights(NX);
    let mut cov = Matrix12::zeros();
    for (i, x) in propagated.iter().enumerate() {
        let d = x - mean;
        let w = if i == 0 { wc0 } else { wi };
        cov += w * d * d.transpose();
    }
    cov += process_noise;
    let cov = psd_floor(&cov);

    // Multiplicative reset: fold the propagated mean deviation into the
    // reference so the stored deviation is exactly zero.
    let p_mean = Mrp::new(mean.fixed_rows::<3>(6).into_owned());
    let q_ref = mrp_to_quat(&p_mean).mul(&q_ref_prop);

    Ok(RelativeState {
        alpha: mean.fixed_rows::<6>(0).into_owned(),
        p: Vector3::zeros(),
        w: mean.fixed_rows::<3>(9).into_owned(),
        q_ref,
        cov,
        t: state.t + dt,
    })
}

// ---------------------------------------------------------------------------
// Measurement prediction and update
// ---------------------------------------------------------------------------

/// Unscented measurement prediction: predicted keypoint vector (crop
/// pixels), innovation covariance before measurement noise, and the
/// state-measurement cross covariance.
#[derive(Debug, Clone)]
pub struct MeasurementPrediction {
    pub y_pred: DVector<f64>,
    pub s: DMatrix<f64>,
    pub c_xy: DMatrix<f64>,
}

pub(crate) fn measurement_of(
    x: &Vector12,
    q_ref: &Quaternion,
    t: f64,
    chief: &ChiefOrbit,
    cam: &CameraModel,
    model: &KeypointModel,
    roi: &Roi,
) -> Result<DVector<f64>, GeometryError> {
    let alpha = Roe::from_vector(&x.fixed_rows::<6>(0).into_owned());
    let (r_rtn, _) = roe_to_rtn(&alpha, chief, t);
    let r_cam = camera_from_rtn() * r_rtn;
    let p = Mrp::new(x.fixed_rows::<3>(6).into_owned());
    let q = mrp_to_quat(&p).mul(q_ref);
    let px = project(&r_cam, &q, model, cam)?;
    let mut y = DVector::zeros(2 * px.len());
    for (k, p) in px.iter().enumerate() {
        let c = roi.full_to_crop(p);
        y[2 * k] = c[0];
        y[2 * k + 1] = c[1];
    }
    Ok(y)
}

/// Full-frame pixel projection of the mean state's keypoints.
pub fn predicted_keypoints_full(
    state: &RelativeState,
    chief: &ChiefOrbit,
    cam: &CameraModel,
    model: &KeypointModel,
) -> Result<Vec<[f64; 2]>, GeometryError> {
    let (r_rtn, _) = roe_to_rtn(&state.roe(), chief, state.t);
    let r_cam = camera_from_rtn() * r_rtn;
    project(&r_cam, &state.q_ref, model, cam)
}

pub fn predict_measurement(
    state: &RelativeState,
    chief: &ChiefOrbit,
    cam: &CameraModel,
    model: &KeypointModel,
    roi: &Roi,
    ut: &UtConfig,
) -> Result<MeasurementPrediction, FilterError> {
    let points = sigma_points(&state.mean_vector(), &state.cov, ut)?;
    let mean_x = state.mean_vector();
    let ny = 2 * model.len();

    let mut ys = Vec::with_capacity(points.len());
    for x in &points {
        ys.push(measurement_of(
            x,
            &state.q_ref,
            state.t,
            chief,
            cam,
            model,
            roi,
        )?);
    }

    let (wm0, wc0, wi) = ut.weights(NX);
    let mut y_pred = DVector::zeros(ny);
    for (i, y) in ys.iter().enumerate() {
        y_pred += if i == 0 { wm0 } else { wi } * y;
    }
    let mut s = DMatrix::zeros(ny, ny);
    let mut c_xy = DMatrix::zeros(NX, ny);
    for (i, (x, y)) in points.iter().zip(&ys).enumerate() {
        let w = if i == 0 { wc0 } else { wi };
        let dy = y - &y_pred;
        let dx = x - mean_x;
        s += w * &dy * dy.transpose();
        for r in 0..NX {
            for c in 0..ny {
                c_xy[(r, c)] += w * dx[r] * dy[c];
            }
        }
    }
    Ok(MeasurementPrediction { y_pred, s, c_xy })
}

/// Per-keypoint Mahalanobis acceptance: `true` keeps the keypoint. Invalid
/// keypoints are never accepted. The gate uses the 2x2 marginal innovation
/// covariance of each keypoint.
pub fn reject_outliers(
    meas: &KeypointMeasurement,
    pred: &MeasurementPrediction,
    gate: f64,
) -> Vec<bool> {
    let k = meas.num_keypoints();
    let mut accepted = vec![false; k];
    for i in 0..k {
        if !meas.valid[i] {
            continue;
        }
        let nu = nalgebra::Vector2::new(
            meas.y[2 * i] - pred.y_pred[2 * i],
            meas.y[2 * i + 1] - pred.y_pred[2 * i + 1],
        );
        let s_block = Matrix2::new(
            pred.s[(2 * i, 2 * i)],
            pred.s[(2 * i, 2 * i + 1)],
            pred.s[(2 * i + 1, 2 * i)],
            pred.s[(2 * i + 1, 2 * i + 1)],
        );
        let m = s_block + meas.cov[i];
        let Some(inv) = m.try_inverse() else {
            continue;
        };
        let d2 = nu.dot(&(inv * nu));
        accepted[i] = d2 <= gate;
    }
    accepted
}

/// Everything the adaptive layer and diagnostics need from one update.
#[derive(Debug, Clone)]
pub struct UpdateInfo {
    /// State correction applied by the gain.
    pub dx: Vector12,
    /// Number of keypoints that entered the update.
    pub accepted: usize,
    /// Normalized innovation squared of the used subset.
    pub nis: f64,
}

/// Kalman measurement update on the accepted, valid keypoint subset.
/// R is assembled block-diagonal from the per-keypoint spread covariances;
/// the posterior MRP deviation folds into the reference quaternion.
pub fn measurement_update(
    state: &RelativeState,
    meas: &KeypointMeasurement,
    pred: &MeasurementPrediction,
    accepted: &[bool],
) -> Result<(RelativeState, UpdateInfo), FilterError> {
    let used: Vec<usize> = (0..meas.num_keypoints())
        .filter(|&k| meas.valid[k] && accepted[k])
        .collect();
    if used.len() < MIN_ACCEPTED_KEYPOINTS {
        return Err(FilterError::TooFewAccepted { got: used.len() });
    }
    let m = 2 * used.len();
    let mut nu = DVector::zeros(m);
    let mut s_tot = DMatrix::zeros(m, m);
    let mut c_sub = DMatrix::zeros(NX, m);
    for (a, &ka) in used.iter().enumerate() {
        nu[2 * a] = meas.y[2 * ka] - pred.y_pred[2 * ka];
        nu[2 * a + 1] = meas.y[2 * ka + 1] - pred.y_pred[2 * ka + 1];
        for (b, &kb) in used.iter().enumerate() {
            for ra in 0..2 {
                for rb in 0..2 {
                    s_tot[(2 * a + ra, 2 * b + rb)] = pred.s[(2 * ka + ra, 2 * kb + rb)];
                }
            }
        }
        // Block-diagonal measurement noise.
        for ra in 0..2 {
            for rb in 0..2 {
                s_tot[(2 * a + ra, 2 * a + rb)] += meas.cov[ka][(ra, rb)];
            }
        }
        for r in 0..NX {
            c_sub[(r, 2 * a)] = pred.c_xy[(r, 2 * ka)];
            c_sub[(r, 2 * a + 1)] = pred.c_xy[(r, 2 * ka + 1)];
        }
    }
    s_tot = (&s_tot + s_tot.transpose()) * 0.5;
    let chol = Cholesky::new(s_tot.clone()).ok_or(FilterError::SingularInnovation)?;
    // K = C S^-1  =>  S K^T = C^T.
    let k_t = chol.solve(&c_sub.transpose());
    let gain = k_t.transpose();
    let dx_dyn = &gain * &nu;
    let nis = nu.dot(&chol.solve(&nu));

    let mut dx = Vector12::zeros();
    for i in 0..NX {
        dx[i] = dx_dyn[i];
    }

    let cov_dyn = &gain * &s_tot * gain.transpose();
    let mut cov12 = state.cov;
    for r in 0..NX {
        for c in 0..NX {
            cov12[(r, c)] -= cov_dyn[(r, c)];
        }
    }
    let cov = psd_floor(&cov12);

    let p_post = Mrp::new(dx.fixed_rows::<3>(6).into_owned());
    let q_ref = mrp_to_quat(&p_post).mul(&state.q_ref);

    Ok((
        RelativeState {
            alpha: state.alpha + dx.fixed_rows::<6>(0).into_owned(),
            p: Vector3::zeros(),
            w: state.w + dx.fixed_rows::<3>(9).into_owned(),
            q_ref,
            cov,
            t: state.t,
        },
        UpdateInfo {
            dx,
            accepted: used.len(),
            nis,
        },
    ))
}

// ---------------------------------------------------------------------------
// Process noise models and ASNC
// ---------------------------------------------------------------------------

/// Discrete ROE noise mapping for unit acceleration PSD: dt * B B^T with B
/// the impulsive velocity-to-ROE map of the near-circular variational
/// equations, evaluated at the interval midpoint.
pub fn gamma_orbit(chief: &ChiefOrbit, t: f64, dt: f64) -> Matrix6<f64> {
    let na = chief.n() * chief.a;
    let u = chief.u_at(t + 0.5 * dt);
    let (su, cu) = u.sin_cos();
    let mut b = SMatrix::<f64, 6, 3>::zeros();
    b[(0, 1)] = 2.0 / na;
    b[(1, 0)] = -2.0 / na;
    b[(2, 0)] = su / na;
    b[(2, 1)] = 2.0 * cu / na;
    b[(3, 0)] = -cu / na;
    b[(3, 1)] = 2.0 * su / na;
    b[(4, 2)] = cu / na;
    b[(5, 2)] = su / na;
    dt * b * b.transpose()
}

/// Discrete attitude noise mapping for unit angular-acceleration PSD over
/// the (MRP deviation, rate) pairs. The MRP kinematics contribute the
/// quarter factor: pdot = w/4 near p = 0.
pub fn gamma_attitude(dt: f64) -> Matrix6<f64> {
    let mut g = Matrix6::zeros();
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    for i in 0..3 {
        g[(i, i)] = dt3 / 48.0;
        g[(i, i + 3)] = dt2 / 8.0;
        g[(i + 3, i)] = dt2 / 8.0;
        g[(i + 3, i + 3)] = dt;
    }
    g
}

/// Assemble the 12x12 process noise from the two scalar PSDs.
pub fn build_process_noise(
    chief: &ChiefOrbit,
    t: f64,
    dt: f64,
    q_orb: f64,
    q_att: f64,
) -> Matrix12 {
    let mut q = Matrix12::zeros();
    let go = gamma_orbit(chief, t, dt) * q_orb;
    let ga = gamma_attitude(dt) * q_att;
    for r in 0..6 {
        for c in 0..6 {
            q[(r, c)] = go[(r, c)];
            q[(r + 6, c + 6)] = ga[(r, c)];
        }
    }
    q
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AsncConfig {
    pub enabled: bool,
    /// Sliding window length, epochs.
    pub window: usize,
    /// Updates start once the window holds this many samples.
    pub min_samples: usize,
    /// Smoothing applied when the estimate rises, (0, 1]. Inflation reacts
    /// fast: an underestimated Q makes the filter overconfident and is the
    /// failure mode the adaptation exists to prevent.
    pub ema_up: f64,
    /// Smoothing applied when the estimate falls, (0, 1]. Deflation is
    /// slow: recurring model error only shows in the window after the
    /// state error has rebuilt.
    pub ema_down: f64,
}

impl Default for AsncConfig {
    fn default() -> Self {
        AsncConfig {
            enabled: true,
            window: 30,
            min_samples: 10,
            ema_up: 0.3,
            ema_down: 0.02,
        }
    }
}

struct AsncSample {
    /// State correction applied at the update.
    dx: Vector12,
    /// Posterior covariance after the update.
    p_post: Matrix12,
    /// Previous posterior covariance mapped through the linearized state
    /// transition.
    p_prev_mapped: Matrix12,
}

/// Windowed residual-based estimator of the two continuous process-noise
/// spectral densities. Each epoch contributes a state-space noise sample
/// `dx dx^T + P_post - Phi P_prev Phi^T` whose window mean is projected by
/// least squares onto the analytical mappings; negative fits clamp to zero
/// so the rebuilt Q stays positive semidefinite.
pub struct Asnc {
    pub cfg: AsncConfig,
    pub q_orb: f64,
    pub q_att: f64,
    window: VecDeque<AsncSample>,
}

impl Asnc {
    pub fn new(cfg: AsncConfig, q_orb: f64, q_att: f64) -> Self {
        Asnc {
            cfg,
            q_orb: q_orb.max(0.0),
            q_att: q_att.max(0.0),
            window: VecDeque::new(),
        }
    }

    /// Linearized 12x12 transition used for the covariance bookkeeping.
    fn phi12(chief: &ChiefOrbit, stm_mode: StmMode, dt: f64) -> Matrix12 {
        let phi6 = roe_stm(chief, dt, stm_mode);
        let mut phi = Matrix12::identity();
        for r in 0..6 {
            for c in 0..6 {
                phi[(r, c)] = phi6[(r, c)];
            }
        }
        for i in 0..3 {
            // MRP deviation integrates a quarter of the rate deviation.
            phi[(6 + i, 9 + i)] = 0.25 * dt;
        }
        phi
    }

    /// Record one epoch. `p_prev_post` is the posterior covariance of the
    /// previous epoch, `p_post` of the current one.
    pub fn push(
        &mut self,
        info: &UpdateInfo,
        p_post: &Matrix12,
        p_prev_post: &Matrix12,
        chief: &ChiefOrbit,
        stm_mode: StmMode,
        dt: f64,
    ) {
        let phi = Self::phi12(chief, stm_mode, dt);
        self.window.push_back(AsncSample {
            dx: info.dx,
            p_post: *p_post,
            p_prev_mapped: phi * p_prev_post * phi.transpose(),
        });
        while self.window.len() > self.cfg.window {
            self.window.pop_front();
        }
    }

    /// Re-estimate the PSDs from the current window. Returns true if the
    /// estimates changed (enough samples were available).
    pub fn update(&mut self, chief: &ChiefOrbit, t: f64, dt: f64) -> bool {
        if !self.cfg.enabled || self.window.len() < self.cfg.min_samples {
            return false;
        }
        let mut q_hat = Matrix12::zeros();
        for s in &self.window {
            q_hat += s.dx * s.dx.transpose() + s.p_post - s.p_prev_mapped;
        }
        q_hat /= self.window.len() as f64;

        let go = gamma_orbit(chief, t, dt);
        let ga = gamma_attitude(dt);
        let mut num_o = 0.0;
        let mut den_o = 0.0;
        let mut num_a = 0.0;
        let mut den_a = 0.0;
        for r in 0..6 {
            for c in 0..6 {
                num_o += q_hat[(r, c)] * go[(r, c)];
                den_o += go[(r, c)] * go[(r, c)];
                num_a += q_hat[(r + 6, c + 6)] * ga[(r, c)];
                den_a += ga[(r, c)] * ga[(r, c)];
            }
        }
        let fit_o = (num_o / den_o).max(0.0);
        let fit_a = (num_a / den_a).max(0.0);
        let blend = |current: f64, fit: f64, cfg: &AsncConfig| {
            let ema = if fit > current { cfg.ema_up } else { cfg.ema_down };
            (1.0 - ema) * current + ema * fit
        };
        self.q_orb = blend(self.q_orb, fit_o, &self.cfg);
        self.q_att = blend(self.q_att, fit_a, &self.cfg);
        true
    }
}

// ---------------------------------------------------------------------------
// Pose extraction
// ---------------------------------------------------------------------------

/// Convert the belief to a camera-frame pose with a 6x6 covariance over
/// [position, attitude rotation vector], both via the unscented transform.
/// The returned quaternion is exactly the reference quaternion.
pub fn state_to_pose(
    state: &RelativeState,
    chief: &ChiefOrbit,
    ut: &UtConfig,
) -> Result<(Pose, Matrix6<f64>), FilterError> {
    let points = sigma_points(&state.mean_vector(), &state.cov, ut)?;
    let m_cam = camera_from_rtn();
    let mapped: Vec<Vector6<f64>> = points
        .iter()
        .map(|x| {
            let alpha = Roe::from_vector(&x.fixed_rows::<6>(0).into_owned());
            let (r_rtn, _) = roe_to_rtn(&alpha, chief, state.t);
            let t_cam = m_cam * r_rtn;
            let p = Mrp::new(x.fixed_rows::<3>(6).into_owned());
            // Rotation-vector attitude deviation: angle 4 atan|p|.
            let norm = p.p.norm();
            let dtheta = if norm > 1e-300 {
                p.p / norm * (4.0 * norm.atan())
            } else {
                Vector3::zeros()
            };
            let mut v = Vector6::zeros();
            v.fixed_rows_mut::<3>(0).copy_from(&t_cam);
            v.fixed_rows_mut::<3>(3).copy_from(&dtheta);
            v
        })
        .collect();

    let (wm0, wc0, wi) = ut.weights(NX);
    let mut mean = wm0 * mapped[0];
    for v in &mapped[1..] {
        mean += wi * v;
    }
    let mut cov = Matrix6::zeros();
    for (i, v) in mapped.iter().enumerate() {
        let w = if i == 0 { wc0 } else { wi };
        let d = v - mean;
        cov += w * d * d.transpose();
    }
    cov = (cov + cov.transpose()) * 0.5;

    Ok((
        Pose {
            t: mean.fixed_rows::<3>(0).into_owned(),
            q: state.q_ref,
        },
        cov,
    ))
}
