//! Relative orbital and rotational dynamics: ROE state-transition matrices,
//! the first-order ROE→RTN map for a near-circular chief, torque-free
//! attitude propagation, and a nonlinear two-body (+J2) integration oracle
//! used for verification and optional truth generation.

use crate::geometry::Quaternion;
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub const MU_EARTH: f64 = 3.986004418e14; // m^3/s^2
pub const R_EARTH: f64 = 6378137.0; // m
pub const J2_EARTH: f64 = 1.08262668e-3;

/// Max internal RK4 substep of the orbit oracle, seconds.
pub const ORACLE_MAX_SUBSTEP: f64 = 1.0;

/// Max internal RK4 substep of the attitude propagator, seconds. Small
/// enough that energy/momentum drift stays below 1e-9 relative over two
/// orbits of 5 s calls at deg/s-class rates.
pub const ATTITUDE_MAX_SUBSTEP: f64 = 0.05;

// ---------------------------------------------------------------------------
// State types
// ---------------------------------------------------------------------------

/// Quasi-nonsingular relative orbital elements (dimensionless).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Roe {
    /// Relative semi-major axis.
    pub da: f64,
    /// Relative mean longitude.
    pub dlambda: f64,
    /// Relative eccentricity vector.
    pub dex: f64,
    pub dey: f64,
    /// Relative inclination vector.
    pub dix: f64,
    pub diy: f64,
}

impl Roe {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Roe {
            da: v[0],
            dlambda: v[1],
            dex: v[2],
            dey: v[3],
            dix: v[4],
            diy: v[5],
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(self.da, self.dlambda, self.dex, self.dey, self.dix, self.diy)
    }

    pub fn max_abs(&self) -> f64 {
        self.as_vector().amax()
    }
}

/// Near-circular chief (servicer) orbit. Angles in radians.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChiefOrbit {
    /// Semi-major axis, meters.
    pub a: f64,
    pub e: f64,
    /// Inclination.
    pub i: f64,
    /// Right ascension of the ascending node.
    pub raan: f64,
    /// Argument of perigee.
    pub argp: f64,
    /// Mean anomaly at t = 0.
    pub m0: f64,
}

impl ChiefOrbit {
    pub fn near_circular(a: f64, i: f64) -> Self {
        ChiefOrbit {
            a,
            e: 0.0,
            i,
            raan: 0.0,
            argp: 0.0,
            m0: 0.0,
        }
    }

    /// Mean motion, rad/s.
    pub fn n(&self) -> f64 {
        (MU_EARTH / (self.a * self.a * self.a)).sqrt()
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n()
    }

    /// Mean argument of latitude at time t (two-body).
    pub fn u_at(&self, t: f64) -> f64 {
        self.argp + self.m0 + self.n() * t
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.a <= R_EARTH {
            return Err(format!("semi-major axis {} m below Earth radius", self.a));
        }
        if self.e < 0.0 || self.e > 0.05 {
            return Err(format!("chief eccentricity {} outside near-circular range", self.e));
        }
        Ok(())
    }
}

/// Relative attitude of the target: orientation and body-frame angular
/// velocity, rad/s.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelAttitude {
    pub q: Quaternion,
    pub w: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StmMode {
    Kepler,
    J2,
}

// ---------------------------------------------------------------------------
// State-transition matrix
// ---------------------------------------------------------------------------

/// J2 secular strength at e = 0: kappa = (3/4) J2 n (Re/a)^2, rad/s.
fn j2_kappa(chief: &ChiefOrbit) -> f64 {
    let re_a = R_EARTH / chief.a;
    0.75 * J2_EARTH * chief.n() * re_a * re_a
}

/// ROE state-transition matrix over `dt` for a near-circular chief.
///
/// Kepler mode: identity except the keplerian drift d(dlambda)/d(da) =
/// -1.5 n dt. J2 mode adds the secular effects at e = 0: extra dlambda
/// drift from (da, dix), rotation of the relative eccentricity vector at
/// the perigee precession rate, and diy drift from (da, dix). Both modes
/// satisfy the exact group property Phi(t1 + t2) = Phi(t2) * Phi(t1).
pub fn roe_stm(chief: &ChiefOrbit, dt: f64, mode: StmMode) -> Matrix6<f64> {
    let n = chief.n();
    let mut phi = Matrix6::identity();
    phi[(1, 0)] = -1.5 * n * dt;
    if mode == StmMode::J2 {
        let k = j2_kappa(chief);
        let (s, c) = chief.i.sin_cos();
        let p = 3.0 * c * c - 1.0;
        // Differential drift of the mean argument of latitude plus the
        // node term folded into dlambda.
        phi[(1, 0)] -= 7.0 * k * p * dt;
        phi[(1, 4)] = -14.0 * k * s * c * dt;
        // Relative eccentricity vector rotates at the perigee precession
        // rate of the chief.
        let rot = k * (5.0 * c * c - 1.0) * dt;
        let (sr, cr) = rot.sin_cos();
        phi[(2, 2)] = cr;
        phi[(2, 3)] = -sr;
        phi[(3, 2)] = sr;
        phi[(3, 3)] = cr;
        // Differential nodal precession.
        phi[(5, 0)] = 7.0 * k * s * c * dt;
        phi[(5, 4)] = 2.0 * k * s * s * dt;
    }
    phi
}

// ---------------------------------------------------------------------------
// ROE -> RTN map
// ---------------------------------------------------------------------------

/// First-order map from ROE to relative position/velocity in the chief RTN
/// frame (meters, m/s; velocity as seen in the rotating frame). Exact in
/// the linear (near-range, near-circular) regime; linear in `alpha`.
pub fn roe_to_rtn(alpha: &Roe, chief: &ChiefOrbit, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let a = chief.a;
    let n = chief.n();
    let u = chief.u_at(t);
    let (su, cu) = u.sin_cos();

    let r = Vector3::new(
        a * (alpha.da - alpha.dex * cu - alpha.dey * su),
        a * (alpha.dlambda + 2.0 * alpha.dex * su - 2.0 * alpha.dey * cu),
        a * (alpha.dix * su - alpha.diy * cu),
    );
    let v = Vector3::new(
        a * n * (alpha.dex * su - alpha.dey * cu),
        a * n * (-1.5 * alpha.da + 2.0 * alpha.dex * cu + 2.0 * alpha.dey * su),
        a * n * (alpha.dix * cu + alpha.diy * su),
    );
    (r, v)
}

/// 6x6 matrix form of [`roe_to_rtn`], columns = images of the ROE basis.
pub fn roe_to_rtn_matrix(chief: &ChiefOrbit, t: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for j in 0..6 {
        let mut v = Vector6::zeros();
        v[j] = 1.0;
        let (r, vel) = roe_to_rtn(&Roe::from_vector(&v), chief, t);
        for i in 0..3 {
            m[(i, j)] = r[i];
            m[(i + 3, j)] = vel[i];
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Attitude propagation
// ---------------------------------------------------------------------------

fn attitude_deriv(
    q: &Quaternion,
    w: &Vector3<f64>,
    inertia: &Matrix3<f64>,
    inertia_inv: &Matrix3<f64>,
) -> (Quaternion, Vector3<f64>) {
    // qdot = 0.5 q ⊗ (0, w); wdot from Euler's torque-free equations.
    let qw = Quaternion {
        w: 0.0,
        x: w.x,
        y: w.y,
        z: w.z,
    };
    let qd = q.mul(&qw);
    let qdot = Quaternion {
        w: 0.5 * qd.w,
        x: 0.5 * qd.x,
        y: 0.5 * qd.y,
        z: 0.5 * qd.z,
    };
    let wdot = inertia_inv * (-(w.cross(&(inertia * w))));
    (qdot, wdot)
}

fn quat_axpy(q: &Quaternion, d: &Quaternion, h: f64) -> Quaternion {
    Quaternion {
        w: q.w + h * d.w,
        x: q.x + h * d.x,
        y: q.y + h * d.y,
        z: q.z + h * d.z,
    }
}

/// Advance torque-free rotation by `dt` with RK4 on Euler's equations and
/// quaternion kinematics. The quaternion is renormalized after every step.
pub fn propagate_attitude(att: &RelAttitude, inertia: &Matrix3<f64>, dt: f64) -> RelAttitude {
    assert!(dt > 0.0, "dt must be positive");
    let inertia_inv = inertia.try_inverse().expect("inertia must be invertible");
    let steps = (dt / ATTITUDE_MAX_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / steps as f64;

    let mut q = att.q;
    let mut w = att.w;
    for _ in 0..steps {
        let (k1q, k1w) = attitude_deriv(&q, &w, inertia, &inertia_inv);
        let (k2q, k2w) = attitude_deriv(
            &quat_axpy(&q, &k1q, 0.5 * h),
            &(w + 0.5 * h * k1w),
            inertia,
            &inertia_inv,
        );
        let (k3q, k3w) = attitude_deriv(
            &quat_axpy(&q, &k2q, 0.5 * h),
            &(w + 0.5 * h * k2w),
            inertia,
            &inertia_inv,
        );
        let (k4q, k4w) = attitude_deriv(&quat_axpy(&q, &k3q, h), &(w + h * k3w), inertia, &inertia_inv);

        let sixth = h / 6.0;
        q = Quaternion {
            w: q.w + sixth * (k1q.w + 2.0 * k2q.w + 2.0 * k3q.w + k4q.w),
            x: q.x + sixth * (k1q.x + 2.0 * k2q.x + 2.0 * k3q.x + k4q.x),
            y: q.y + sixth * (k1q.y + 2.0 * k2q.y + 2.0 * k3q.y + k4q.y),
            z: q.z + sixth * (k1q.z + 2.0 * k2q.z + 2.0 * k3q.z + k4q.z),
        }
        .normalized();
        w += sixth * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
    }
    RelAttitude { q, w }
}

/// Rotational kinetic energy, J.
pub fn kinetic_energy(w: &Vector3<f64>, inertia: &Matrix3<f64>) -> f64 {
    0.5 * w.dot(&(inertia * w))
}

/// Body-frame angular momentum magnitude, N m s (equals the inertial
/// magnitude for a rigid body).
pub fn momentum_norm(w: &Vector3<f64>, inertia: &Matrix3<f64>) -> f64 {
    (inertia * w).norm()
}

// ---------------------------------------------------------------------------
// Nonlinear orbit oracle
// ---------------------------------------------------------------------------

/// Chief ECI position/velocity on the two-body near-circular orbit at t.
fn chief_eci(chief: &ChiefOrbit, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let u = chief.u_at(t);
    let (su, cu) = u.sin_cos();
    let (sraan, craan) = chief.raan.sin_cos();
    let (si, ci) = chief.i.sin_cos();
    let r_hat = Vector3::new(
        craan * cu - sraan * su * ci,
        sraan * cu + craan * su * ci,
        su * si,
    );
    let t_hat = Vector3::new(
        -craan * su - sraan * cu * ci,
        -sraan * su + craan * cu * ci,
        cu * si,
    );
    (chief.a * r_hat, chief.a * chief.n() * t_hat)
}

/// RTN basis (rows) from an ECI state: rotation taking ECI coords to RTN.
fn rtn_from_eci(r: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let r_hat = r.normalize();
    let n_hat = r.cross(v).normalize();
    let t_hat = n_hat.cross(&r_hat);
    Matrix3::from_rows(&[r_hat.transpose(), t_hat.transpose(), n_hat.transpose()])
}

fn gravity_accel(r: &Vector3<f64>, mode: StmMode) -> Vector3<f64> {
    let rn2 = r.norm_squared();
    let rn = rn2.sqrt();
    let mut a = -MU_EARTH / (rn2 * rn) * r;
    if mode == StmMode::J2 {
        let z2_r2 = (r.z * r.z) / rn2;
        let f = 1.5 * J2_EARTH * MU_EARTH * R_EARTH * R_EARTH / (rn2 * rn2 * rn);
        a.x += f * r.x * (5.0 * z2_r2 - 1.0);
        a.y += f * r.y * (5.0 * z2_r2 - 1.0);
        a.z += f * r.z * (5.0 * z2_r2 - 3.0);
    }
    a
}

fn rk4_orbit(r: &mut Vector3<f64>, v: &mut Vector3<f64>, h: f64, mode: StmMode) {
    let k1r = *v;
    let k1v = gravity_accel(r, mode);
    let k2r = *v + 0.5 * h * k1v;
    let k2v = gravity_accel(&(*r + 0.5 * h * k1r), mode);
    let k3r = *v + 0.5 * h * k2v;
    let k3v = gravity_accel(&(*r + 0.5 * h * k2r), mode);
    let k4r = *v + h * k3v;
    let k4v = gravity_accel(&(*r + h * k3r), mode);
    *r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
    *v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
}

/// Nonlinear relative-motion oracle. Integrates chief and deputy as
/// absolute ECI states (RK4, substep <= [`ORACLE_MAX_SUBSTEP`]) and
/// differences them in the chief's instantaneous RTN frame, so no
/// linearization enters anywhere.
pub struct RtnOracle {
    chief_r: Vector3<f64>,
    chief_v: Vector3<f64>,
    deputy_r: Vector3<f64>,
    deputy_v: Vector3<f64>,
    mode: StmMode,
}

impl RtnOracle {
    /// `r`, `v`: deputy relative to chief in RTN at `t0` (rotating-frame
    /// velocity).
    pub fn new(chief: &ChiefOrbit, r: &Vector3<f64>, v: &Vector3<f64>, t0: f64, mode: StmMode) -> Self {
        let (cr, cv) = chief_eci(chief, t0);
        let m = rtn_from_eci(&cr, &cv); // ECI -> RTN
        let m_t = m.transpose(); // RTN -> ECI
        let omega = cr.cross(&cv) / cr.norm_squared(); // frame rate, ECI coords
        let dr_eci = m_t * r;
        let dv_eci = m_t * v + omega.cross(&dr_eci);
        RtnOracle {
            chief_r: cr,
            chief_v: cv,
            deputy_r: cr + dr_eci,
            deputy_v: cv + dv_eci,
            mode,
        }
    }

    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        let steps = (dt / ORACLE_MAX_SUBSTEP).ceil().max(1.0) as usize;
        let h = dt / steps as f64;
        for _ in 0..steps {
            rk4_orbit(&mut self.chief_r, &mut self.chief_v, h, self.mode);
            rk4_orbit(&mut self.deputy_r, &mut self.deputy_v, h, self.mode);
        }
    }

    /// Relative position and rotating-frame relative velocity in RTN.
    pub fn relative(&self) -> (Vector3<f64>, Vector3<f64>) {
        let m = rtn_from_eci(&self.chief_r, &self.chief_v);
        let omega = self.chief_r.cross(&self.chief_v) / self.chief_r.norm_squared();
        let dr = self.deputy_r - self.chief_r;
        let dv = self.deputy_v - self.chief_v - omega.cross(&dr);
        (m * dr, m * dv)
    }
}

/// One-shot form of the oracle: propagate an RTN relative state by `dt`
/// starting at epoch `t0`.
pub fn oracle_propagate_rtn(
    r: &Vector3<f64>,
    v: &Vector3<f64>,
    chief: &ChiefOrbit,
    t0: f64,
    dt: f64,
    mode: StmMode,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut oracle = RtnOracle::new(chief, r, v, t0, mode);
    oracle.step(dt);
    oracle.relative()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_chief() -> ChiefOrbit {
        ChiefOrbit::near_circular(R_EARTH + 700e3, 98f64.to_radians())
    }

    #[test]
    fn stm_kepler_structure() {
        let chief = test_chief();
        let dt = 5.0;
        let phi = roe_stm(&chief, dt, StmMode::Kepler);
        let mut expected = Matrix6::identity();
        expected[(1, 0)] = -1.5 * chief.n() * dt;
        assert_relative_eq!(phi, expected, epsilon = 1e-15);
    }

    #[test]
    fn stm_dt_zero_is_identity() {
        let chief = test_chief();
        for mode in [StmMode::Kepler, StmMode::J2] {
            let phi = roe_stm(&chief, 0.0, mode);
            assert_relative_eq!(phi, Matrix6::identity(), epsilon = 1e-15);
        }
    }

    #[test]
    fn stm_da_drift_over_one_period() {
        let chief = test_chief();
        let alpha = Roe {
            da: 1e-4,
            ..Default::default()
        };
        let phi = roe_stm(&chief, chief.period(), StmMode::Kepler);
        let out = Roe::from_vector(&(phi * alpha.as_vector()));
        let expected = -3.0 * std::f64::consts::PI * 1e-4;
        assert!((out.dlambda - expected).abs() < 1e-8);
        // Kepler mode leaves everything but dlambda untouched.
        assert_eq!(out.da, alpha.da);
        assert_eq!(out.dex, 0.0);
        assert_eq!(out.dix, 0.0);
    }

    #[test]
    fn stm_group_property() {
        let chief = test_chief();
        for mode in [StmMode::Kepler, StmMode::J2] {
            let p1 = roe_stm(&chief, 37.0, mode);
            let p2 = roe_stm(&chief, 1543.0, mode);
            let p12 = roe_stm(&chief, 1580.0, mode);
            assert_relative_eq!(p2 * p1, p12, epsilon = 1e-12);
        }
    }

    #[test]
    fn stm_kepler_matches_finite_differences_of_oracle() {
        // Columns of the STM from central differences through the nonlinear
        // oracle: map ROE basis perturbations to RTN, propagate, map back.
        let chief = test_chief();
        let dt = 600.0;
        let h = 1e-7;
        let m_out_inv = roe_to_rtn_matrix(&chief, dt).try_inverse().unwrap();
        let m_in = roe_to_rtn_matrix(&chief, 0.0);
        let phi = roe_stm(&chief, dt, StmMode::Kepler);

        for j in 0..6 {
            let mut plus = Vector6::zeros();
            plus[j] = h;
            let col_fd: Vector6<f64> = {
                let propagate = |alpha: Vector6<f64>| -> Vector6<f64> {
                    let rv = m_in * alpha;
                    let (r, v) = (
                        Vector3::new(rv[0], rv[1], rv[2]),
                        Vector3::new(rv[3], rv[4], rv[5]),
                    );
                    let (r1, v1) = oracle_propagate_rtn(&r, &v, &chief, 0.0, dt, StmMode::Kepler);
                    m_out_inv * Vector6::new(r1[0], r1[1], r1[2], v1[0], v1[1], v1[2])
                };
                (propagate(plus) - propagate(-plus)) / (2.0 * h)
            };
            for i in 0..6 {
                assert!(
                    (col_fd[i] - phi[(i, j)]).abs() < 2e-4 * phi.amax().max(1.0),
                    "phi[{i}][{j}]: fd {} vs stm {}",
                    col_fd[i],
                    phi[(i, j)]
                );
            }
        }
    }

    /// Exact secular mean-element propagation used as the J2 STM oracle.
    fn secular_roe_after(chief: &ChiefOrbit, alpha0: &Roe, tau: f64) -> Roe {
        let rates = |a: f64, e: f64, i: f64| -> (f64, f64, f64) {
            let n = (MU_EARTH / (a * a * a)).sqrt();
            let p = a * (1.0 - e * e);
            let k = 0.75 * J2_EARTH * n * (R_EARTH / p) * (R_EARTH / p);
            let eta = (1.0 - e * e).sqrt();
            let c = i.cos();
            let m_dot = n + k * eta * (3.0 * c * c - 1.0);
            let w_dot = k * (5.0 * c * c - 1.0);
            let raan_dot = -2.0 * k * c;
            (m_dot, w_dot, raan_dot)
        };
        // Chief elements (e = 0 exactly).
        let (cm, cw, craan) = rates(chief.a, 0.0, chief.i);
        // Deputy elements implied by the initial ROE.
        let a_d = chief.a * (1.0 + alpha0.da);
        let e_d = (alpha0.dex * alpha0.dex + alpha0.dey * alpha0.dey).sqrt();
        let w_d0 = alpha0.dey.atan2(alpha0.dex);
        let i_d = chief.i + alpha0.dix;
        let raan_d0 = chief.raan + alpha0.diy / chief.i.sin();
        let u_d0 = chief.argp + chief.m0 + alpha0.dlambda - (raan_d0 - chief.raan) * chief.i.cos();
        let m_d0 = u_d0 - w_d0;
        let (dm, dw, draan) = rates(a_d, e_d, i_d);

        // Secular-only: angles evolve linearly.
        let u_c = chief.argp + chief.m0 + (cm + cw) * tau;
        let raan_c = chief.raan + craan * tau;
        let u_d = m_d0 + w_d0 + (dm + dw) * tau;
        let raan_d = raan_d0 + draan * tau;
        let w_d = w_d0 + dw * tau;
        Roe {
            da: alpha0.da,
            dlambda: (u_d - u_c) + (raan_d - raan_c) * chief.i.cos(),
            dex: e_d * w_d.cos(),
            dey: e_d * w_d.sin(),
            dix: alpha0.dix,
            diy: (raan_d - raan_c) * chief.i.sin(),
        }
    }

    #[test]
    fn stm_j2_matches_secular_element_oracle() {
        let chief = test_chief();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let alpha = Roe {
                da: rng.gen_range(-1e-5..1e-5),
                dlambda: rng.gen_range(-1e-5..1e-5),
                dex: rng.gen_range(-1e-5..1e-5),
                dey: rng.gen_range(-1e-5..1e-5),
                dix: rng.gen_range(-1e-5..1e-5),
                diy: rng.gen_range(-1e-5..1e-5),
            };
            let tau = chief.period();
            let oracle = secular_roe_after(&chief, &alpha, tau).as_vector();
            let stm = roe_stm(&chief, tau, StmMode::J2) * alpha.as_vector();
            // First-order STM: agreement to second order in the ROE scale.
            let tol = 50.0 * alpha.max_abs() * alpha.max_abs() + 1e-14;
            assert!(
                (oracle - stm).amax() < tol,
                "J2 STM mismatch {:e} vs tol {:e}",
                (oracle - stm).amax(),
                tol
            );
        }
    }

    #[test]
    fn rtn_map_pure_components() {
        let chief = test_chief();
        let a = chief.a;

        // Pure da: constant radial offset plus along-track drift rate.
        let (r, v) = roe_to_rtn(
            &Roe {
                da: 1e-5,
                ..Default::default()
            },
            &chief,
            321.0,
        );
        assert_relative_eq!(r.x, a * 1e-5, epsilon = 1e-9);
        assert_relative_eq!(r.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(v.y, -1.5 * chief.n() * a * 1e-5, epsilon = 1e-12);

        // Pure dlambda: along-track offset.
        let (r, v) = roe_to_rtn(
            &Roe {
                dlambda: 1e-5,
                ..Default::default()
            },
            &chief,
            77.0,
        );
        assert_relative_eq!(r.y, a * 1e-5, epsilon = 1e-9);
        assert_relative_eq!(r.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(v.norm(), 0.0, epsilon = 1e-12);

        // Co-located.
        let (r, v) = roe_to_rtn(&Roe::default(), &chief, 500.0);
        assert_eq!(r.norm(), 0.0);
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn rtn_map_linearity() {
        let chief = test_chief();
        let alpha = Roe {
            da: 2e-6,
            dlambda: -3e-6,
            dex: 1e-6,
            dey: 4e-7,
            dix: -2e-6,
            diy: 9e-7,
        };
        let (r1, v1) = roe_to_rtn(&alpha, &chief, 123.0);
        let scaled = Roe::from_vector(&(alpha.as_vector() * 3.5));
        let (r2, v2) = roe_to_rtn(&scaled, &chief, 123.0);
        assert_relative_eq!(r2, 3.5 * r1, epsilon = 1e-12);
        assert_relative_eq!(v2, 3.5 * v1, epsilon = 1e-12);
    }

    #[test]
    fn attitude_zero_rate_static() {
        let att = RelAttitude {
            q: Quaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.4),
            w: Vector3::zeros(),
        };
        let inertia = Matrix3::from_diagonal(&Vector3::new(2.0, 1.8, 1.0));
        let out = propagate_attitude(&att, &inertia, 60.0);
        assert!(out.q.angle_to(&att.q) < 1e-14);
        assert_eq!(out.w.norm(), 0.0);
    }

    #[test]
    fn attitude_principal_axis_spin() {
        // 1 deg/s about the z principal axis for 90 s -> 90 deg rotation.
        let rate = 1f64.to_radians();
        let att = RelAttitude {
            q: Quaternion::IDENTITY,
            w: Vector3::new(0.0, 0.0, rate),
        };
        let inertia = Matrix3::from_diagonal(&Vector3::new(2.0, 1.8, 1.0));
        let out = propagate_attitude(&att, &inertia, 90.0);
        let expected = Quaternion::from_axis_angle(&Vector3::z(), 90f64.to_radians());
        assert!(out.q.angle_to(&expected) < 1e-10);
        assert_relative_eq!(out.w, att.w, epsilon = 1e-15);
    }

    #[test]
    fn attitude_conservation_two_orbits() {
        let chief = test_chief();
        let inertia = Matrix3::from_diagonal(&Vector3::new(2.0, 1.8, 1.0));
        let mut att = RelAttitude {
            q: Quaternion::IDENTITY,
            w: Vector3::new(1.5f64.to_radians(), 1.0f64.to_radians(), 0.7f64.to_radians()),
        };
        let e0 = kinetic_energy(&att.w, &inertia);
        let h0 = momentum_norm(&att.w, &inertia);
        let steps = (2.0 * chief.period() / 5.0).ceil() as usize;
        for _ in 0..steps {
            att = propagate_attitude(&att, &inertia, 5.0);
        }
        let e1 = kinetic_energy(&att.w, &inertia);
        let h1 = momentum_norm(&att.w, &inertia);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-9,
            "energy drift {:e}",
            ((e1 - e0) / e0).abs()
        );
        assert!(
            ((h1 - h0) / h0).abs() < 1e-9,
            "momentum drift {:e}",
            ((h1 - h0) / h0).abs()
        );
    }

    #[test]
    fn oracle_zero_stays_zero() {
        let chief = test_chief();
        let (r, v) = oracle_propagate_rtn(
            &Vector3::zeros(),
            &Vector3::zeros(),
            &chief,
            0.0,
            chief.period(),
            StmMode::Kepler,
        );
        assert!(r.norm() < 1e-6, "drift {} m", r.norm());
        assert!(v.norm() < 1e-9);
    }

    #[test]
    fn oracle_along_track_offset_bounded() {
        // 10 km along-track offset on the same orbit: bounded periodic
        // motion, no growth of the radial excursion from orbit 1 to orbit 2.
        // The linear-map initial condition carries a second-order energy
        // mismatch (~2 L^2/a in equivalent da), so the libration amplitude
        // is tens of meters at this range; what matters is boundedness.
        let chief = test_chief();
        let alpha = Roe {
            dlambda: 10e3 / chief.a,
            ..Default::default()
        };
        let (r0, v0) = roe_to_rtn(&alpha, &chief, 0.0);
        let mut oracle = RtnOracle::new(&chief, &r0, &v0, 0.0, StmMode::Kepler);
        let mut max_orbit = [0.0f64; 2];
        for half in 0..2 {
            for _ in 0..100 {
                oracle.step(chief.period() / 100.0);
                let (r, _) = oracle.relative();
                max_orbit[half] = max_orbit[half].max(r.x.abs());
            }
        }
        assert!(max_orbit[1] < 100.0, "radial excursion {} m", max_orbit[1]);
        assert!(
            max_orbit[1] < 1.2 * max_orbit[0].max(1.0),
            "secular radial growth: {} m -> {} m",
            max_orbit[0],
            max_orbit[1]
        );
    }

    fn stm_vs_oracle_worst(chief: &ChiefOrbit, alpha: &Roe) -> f64 {
        let (r0, v0) = roe_to_rtn(alpha, chief, 0.0);
        let mut oracle = RtnOracle::new(chief, &r0, &v0, 0.0, StmMode::Kepler);
        let dt = 60.0;
        let steps = (chief.period() / dt).ceil() as usize;
        let mut t = 0.0;
        let mut worst = 0.0f64;
        for _ in 0..steps {
            oracle.step(dt);
            t += dt;
            let alpha_t = Roe::from_vector(&(roe_stm(chief, t, StmMode::Kepler) * alpha.as_vector()));
            let (r_lin, _) = roe_to_rtn(&alpha_t, chief, t);
            let (r_orc, _) = oracle.relative();
            worst = worst.max((r_lin - r_orc).norm() / r_orc.norm());
        }
        worst
    }

    #[test]
    fn stm_vs_oracle_one_orbit_close_range() {
        // STM + linear map against the nonlinear oracle in the close-range
        // regime (tens of meters): agreement to well below 0.1% of the
        // separation over one orbit.
        let chief = test_chief();
        for scale in [10.0, 50.0] {
            let alpha = Roe {
                da: 0.02 * scale / chief.a,
                dlambda: scale / chief.a,
                dex: 0.1 * scale / chief.a,
                dey: -0.07 * scale / chief.a,
                dix: 0.1 * scale / chief.a,
                diy: 0.05 * scale / chief.a,
            };
            let worst = stm_vs_oracle_worst(&chief, &alpha);
            assert!(worst < 1e-3, "relative discrepancy {worst} at {scale} m");
        }
    }

    #[test]
    fn stm_vs_oracle_one_orbit_ten_km() {
        // At 10 km the second-order terms of the first-order map dominate
        // (energy mismatch of the initial condition drifts along-track at
        // ~ -3 pi * 2 (L/a)^2 per orbit), so the tolerance scales with the
        // separation ratio rather than staying at the close-range 0.1%.
        let chief = test_chief();
        let alpha = Roe {
            dlambda: 10e3 / chief.a,
            dex: 5e-5,
            dey: -3e-5,
            dix: 4e-5,
            diy: 2e-5,
            ..Default::default()
        };
        let worst = stm_vs_oracle_worst(&chief, &alpha);
        let expected_second_order = 40.0 * alpha.max_abs();
        assert!(
            worst < expected_second_order,
            "relative discrepancy {worst} vs second-order budget {expected_second_order}"
        );
    }
}
