//! Extended Kalman filter over image features `x = [f_x, f_y, Z]` of a target seen by a
//! pinhole camera, with interaction matrices, the hand-to-eye twist extension, linearized
//! propagation and intercept-point prediction.
//!
//! Dynamics: `x1' = L_g cTr J u - v_o`, `x2' = L_Zg (cTr J u - pinv(L_g) v_o)` where
//! `L_g = -L_s H`, `L_Zg = -L_Z H` and `H = [[R, -R S(-R^T t)], [0, R]]`. `v_o` is the
//! target-induced term, so a target whose features move at `s'` has `v_o = -s'`.

use nalgebra::{
    DMatrix, DVector, Matrix2x6, Matrix3, Matrix6, Matrix6xX, RowVector6, SMatrix, Vector2, Vector3,
    Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{back_project_camera, check_rotation, CameraModel, FeatureObservation};

pub const DEFAULT_WINDOW: usize = 5;
pub const MIN_DEPTH: f64 = 1e-3;
const PINV_RTOL: f64 = 1e-8;

fn check_depth(z: f64, lambda: f64) -> Result<()> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("depth {z} must be > 0")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("focal length {lambda} must be > 0")));
    }
    Ok(())
}

/// Feature rows of the point interaction matrix, camera twist `[v; w]` in camera frame.
pub fn interaction_matrix_point(fx: f64, fy: f64, z: f64, lambda: f64) -> Result<Matrix2x6<f64>> {
    check_depth(z, lambda)?;
    let l = lambda;
    Ok(Matrix2x6::new(
        -l / z, 0.0, fx / z, fx * fy / l, -(l + fx * fx / l), fy,
        0.0, -l / z, fy / z, l + fy * fy / l, -fx * fy / l, -fx,
    ))
}

/// Depth row: `Z' = -v_z - w_x Y + w_y X` with `X = f_x Z / lambda`, `Y = f_y Z / lambda`.
pub fn interaction_matrix_depth(fx: f64, fy: f64, z: f64, lambda: f64) -> Result<RowVector6<f64>> {
    check_depth(z, lambda)?;
    Ok(RowVector6::new(0.0, 0.0, -1.0, -fy * z / lambda, fx * z / lambda, 0.0))
}

/// Partial derivatives of `L_s` with respect to `f_x`, `f_y`, `Z`.
fn interaction_point_partials(fx: f64, fy: f64, z: f64, l: f64) -> [Matrix2x6<f64>; 3] {
    [
        Matrix2x6::new(
            0.0, 0.0, 1.0 / z, fy / l, -2.0 * fx / l, 0.0,
            0.0, 0.0, 0.0, 0.0, -fy / l, -1.0,
        ),
        Matrix2x6::new(
            0.0, 0.0, 0.0, fx / l, 0.0, 1.0,
            0.0, 0.0, 1.0 / z, 2.0 * fy / l, -fx / l, 0.0,
        ),
        Matrix2x6::new(
            l / (z * z), 0.0, -fx / (z * z), 0.0, 0.0, 0.0,
            0.0, l / (z * z), -fy / (z * z), 0.0, 0.0, 0.0,
        ),
    ]
}

fn interaction_depth_partials(fx: f64, fy: f64, z: f64, l: f64) -> [RowVector6<f64>; 3] {
    [
        RowVector6::new(0.0, 0.0, 0.0, 0.0, z / l, 0.0),
        RowVector6::new(0.0, 0.0, 0.0, -z / l, 0.0, 0.0),
        RowVector6::new(0.0, 0.0, 0.0, -fy / l, fx / l, 0.0),
    ]
}

pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// `H_Rt = [[R, -R S(-R^T t)], [0, R]]`.
pub fn twist_transform(r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<Matrix6<f64>> {
    check_rotation(r).map_err(Error::Domain)?;
    let mut h = Matrix6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r * skew(&(-r.transpose() * t))));
    h.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    Ok(h)
}

/// `-L H_Rt` for a stack of interaction rows `L` (`k x 6`).
pub fn hand_to_eye_extend<const K: usize>(
    l: &SMatrix<f64, K, 6>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<SMatrix<f64, K, 6>> {
    Ok(-(l * twist_transform(r, t)?))
}

/// Truncated-SVD pseudo-inverse of a `2 x 6` matrix and its condition number.
pub fn pinv_2x6(m: &Matrix2x6<f64>) -> (SMatrix<f64, 6, 2>, f64) {
    let d = DMatrix::from_column_slice(2, 6, m.as_slice());
    let svd = d.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut out = SMatrix::<f64, 6, 2>::zeros();
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > PINV_RTOL * smax {
            for i in 0..6 {
                for j in 0..2 {
                    out[(i, j)] += vt[(k, i)] * u[(j, k)] / s;
                }
            }
        }
    }
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    (out, cond)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// Process noise diagonal per second; multiplied by the step.
    pub q_diag: [f64; 3],
    pub p0_diag: [f64; 3],
    /// Observe depth in addition to the feature pair.
    pub use_depth: bool,
    pub window: usize,
    #[serde(with = "matrix3_rows")]
    pub extrinsic_rotation: Matrix3<f64>,
    pub extrinsic_translation: Vector3<f64>,
    /// Twist transform applied to `J u`; row-major.
    pub ctr: [[f64; 6]; 6],
    /// Initial depth when depth is not observed.
    pub depth_prior: f64,
}

mod matrix3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            q_diag: [1.0, 1.0, 0.01],
            p0_diag: [25.0, 25.0, 0.25],
            use_depth: true,
            window: DEFAULT_WINDOW,
            extrinsic_rotation: Matrix3::identity(),
            extrinsic_translation: Vector3::zeros(),
            ctr: std::array::from_fn(|r| std::array::from_fn(|c| if r == c { 1.0 } else { 0.0 })),
            depth_prior: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub q: Matrix3<f64>,
    /// Measurement noise, `m x m`.
    pub r_meas: DMatrix<f64>,
    /// Measurement selector, `m x 3`.
    pub c: DMatrix<f64>,
    pub dt: f64,
    pub lambda: f64,
    pub extrinsic_rotation: Matrix3<f64>,
    pub extrinsic_translation: Vector3<f64>,
    pub ctr: Matrix6<f64>,
    pub v_o: Vector2<f64>,
    pub depth_rate: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateInfo {
    pub innovation: DVector<f64>,
    /// Normalized innovation squared.
    pub nis: f64,
}

impl EkfState {
    /// Filter initialized at the first observation.
    pub fn new(cfg: &EkfConfig, cam: &CameraModel, first: &FeatureObservation, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("filter step {dt} must be > 0")));
        }
        if cfg.window < 2 {
            return Err(Error::Config("velocity window must be >= 2".into()));
        }
        check_rotation(&cfg.extrinsic_rotation).map_err(Error::Config)?;
        let m = if cfg.use_depth { 3 } else { 2 };
        let c = DMatrix::from_fn(m, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut r_diag = vec![cam.pixel_noise_sigma.powi(2); 2];
        if cfg.use_depth {
            r_diag.push(cam.depth_noise_sigma.powi(2));
        }
        let z0 = if cfg.use_depth { first.z } else { cfg.depth_prior };
        Ok(EkfState {
            x: Vector3::new(first.fx, first.fy, z0.max(MIN_DEPTH)),
            p: Matrix3::from_diagonal(&Vector3::from(cfg.p0_diag)),
            q: Matrix3::from_diagonal(&Vector3::from(cfg.q_diag)) * dt,
            r_meas: DMatrix::from_diagonal(&DVector::from_vec(r_diag)),
            c,
            dt,
            lambda: cam.lambda,
            extrinsic_rotation: cfg.extrinsic_rotation,
            extrinsic_translation: cfg.extrinsic_translation,
            ctr: Matrix6::from_fn(|r, c| cfg.ctr[r][c]),
            v_o: Vector2::zeros(),
            depth_rate: 0.0,
            timestamp: first.timestamp,
        })
    }

    pub fn measurement(&self, f: &FeatureObservation) -> DVector<f64> {
        let full = [f.fx, f.fy, f.z];
        DVector::from_fn(self.c.nrows(), |i, _| full[i])
    }
}

/// Stacked time derivative of `x` under the filter dynamics.
pub fn dynamics(state: &EkfState, u: &DVector<f64>, j_ee: &Matrix6xX<f64>) -> Result<Vector3<f64>> {
    let (f, _) = dynamics_and_jacobian(state, &state.x, u, j_ee, false)?;
    Ok(f)
}

/// Analytic `df/dx` at the current state.
pub fn dynamics_jacobian(state: &EkfState, u: &DVector<f64>, j_ee: &Matrix6xX<f64>) -> Result<Matrix3<f64>> {
    let (_, j) = dynamics_and_jacobian(state, &state.x, u, j_ee, true)?;
    Ok(j)
}

fn commanded_twist(state: &EkfState, u: &DVector<f64>, j_ee: &Matrix6xX<f64>) -> Result<Vector6<f64>> {
    if u.len() != j_ee.ncols() {
        return Err(Error::Domain(format!(
            "joint rate length {} does not match Jacobian columns {}",
            u.len(),
            j_ee.ncols()
        )));
    }
    if u.is_empty() {
        return Ok(Vector6::zeros());
    }
    Ok(state.ctr * (j_ee * u))
}

fn dynamics_and_jacobian(
    state: &EkfState,
    x: &Vector3<f64>,
    u: &DVector<f64>,
    j_ee: &Matrix6xX<f64>,
    want_jacobian: bool,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let (fx, fy, z, l) = (x[0], x[1], x[2], state.lambda);
    let h = twist_transform(&state.extrinsic_rotation, &state.extrinsic_translation)?;
    let w = commanded_twist(state, u, j_ee)?;
    let ls = interaction_matrix_point(fx, fy, z, l)?;
    let lz = interaction_matrix_depth(fx, fy, z, l)?;
    let lg = -(ls * h);
    let lzg = -(lz * h);
    let (lg_pinv, cond) = pinv_2x6(&lg);
    if cond > 1e8 {
        log::warn!("ill-conditioned extended interaction matrix (condition number {cond:e})");
    }
    let pv = lg_pinv * state.v_o;
    let f1 = lg * w - state.v_o;
    let f2 = (lzg * (w - pv))[0];
    let f = Vector3::new(f1[0], f1[1], f2);
    if !want_jacobian {
        return Ok((f, Matrix3::zeros()));
    }
    // d(M+) = -M+ dM M+ + (I - M+ M) dM^T (M M^T)^-1 for full row rank M
    let mmt_inv = (lg * lg.transpose())
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular L_g L_g^T".into()))?;
    let null_proj = Matrix6::identity() - lg_pinv * lg;
    let dls = interaction_point_partials(fx, fy, z, l);
    let dlz = interaction_depth_partials(fx, fy, z, l);
    let mut jac = Matrix3::zeros();
    for k in 0..3 {
        let dlg = -(dls[k] * h);
        let dlzg = -(dlz[k] * h);
        let df1 = dlg * w;
        let dpinv = -lg_pinv * dlg * lg_pinv + null_proj * dlg.transpose() * mmt_inv;
        let df2 = (dlzg * (w - pv))[0] - (lzg * (dpinv * state.v_o))[0];
        jac[(0, k)] = df1[0];
        jac[(1, k)] = df1[1];
        jac[(2, k)] = df2;
    }
    Ok((f, jac))
}

fn symmetrize(p: &Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

/// One Euler step of the state and first-order propagation of the covariance.
pub fn predict(state: &EkfState, u: &DVector<f64>, j_ee: &Matrix6xX<f64>) -> Result<EkfState> {
    let (f, fbar) = dynamics_and_jacobian(state, &state.x, u, j_ee, true)?;
    let mut next = state.clone();
    next.x = state.x + f * state.dt;
    if next.x[2] < MIN_DEPTH {
        log::warn!("depth {} clamped to {MIN_DEPTH}", next.x[2]);
        next.x[2] = MIN_DEPTH;
    }
    let fm = Matrix3::identity() + fbar * state.dt;
    next.p = symmetrize(&(fm * state.p * fm.transpose() + state.q));
    next.depth_rate = f[2];
    next.timestamp = state.timestamp + state.dt;
    Ok(next)
}

/// Fixed-camera prediction (`u = 0`).
pub fn predict_static(state: &EkfState) -> Result<EkfState> {
    predict(state, &DVector::zeros(0), &Matrix6xX::zeros(0))
}

/// Kalman measurement update, Joseph form.
pub fn update(state: &EkfState, y: &DVector<f64>) -> Result<(EkfState, UpdateInfo)> {
    let m = state.c.nrows();
    if y.len() != m || state.r_meas.shape() != (m, m) {
        return Err(Error::Domain(format!(
            "measurement of length {} does not match a {m}-row selector",
            y.len()
        )));
    }
    let p = DMatrix::from_column_slice(3, 3, state.p.as_slice());
    let x = DVector::from_column_slice(state.x.as_slice());
    let c = &state.c;
    let s = c * &p * c.transpose() + &state.r_meas;
    let s_inv = s
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    let k = &p * c.transpose() * &s_inv;
    let innovation = y - c * &x;
    let nis = (innovation.transpose() * &s_inv * &innovation)[0];
    let xn = &x + &k * &innovation;
    let ikc = DMatrix::identity(3, 3) - &k * c;
    let pn = &ikc * &p * ikc.transpose() + &k * &state.r_meas * k.transpose();
    let mut next = state.clone();
    next.x = Vector3::new(xn[0], xn[1], xn[2].max(MIN_DEPTH));
    if xn[2] < MIN_DEPTH {
        log::warn!("depth {} clamped to {MIN_DEPTH}", xn[2]);
    }
    next.p = symmetrize(&Matrix3::from_column_slice(pn.as_slice()));
    Ok((next, UpdateInfo { innovation, nis }))
}

/// Least-squares rates of `f_x`, `f_y`, `Z` over the last `window` observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRate {
    pub fx: f64,
    pub fy: f64,
    pub z: f64,
}

pub fn estimate_feature_velocity(history: &[FeatureObservation], window: usize) -> Result<FeatureRate> {
    if window < 2 {
        return Err(Error::Config(format!("velocity window {window} must be >= 2")));
    }
    if history.len() < 2 {
        return Err(Error::Domain(format!(
            "{} observation(s); at least 2 are needed for a slope",
            history.len()
        )));
    }
    let w = &history[history.len().saturating_sub(window)..];
    let n = w.len() as f64;
    let tm = w.iter().map(|o| o.timestamp).sum::<f64>() / n;
    let stt: f64 = w.iter().map(|o| (o.timestamp - tm).powi(2)).sum();
    if stt <= 0.0 {
        return Err(Error::Domain("observations share one timestamp".into()));
    }
    let slope = |g: &dyn Fn(&FeatureObservation) -> f64| {
        let m = w.iter().map(g).sum::<f64>() / n;
        w.iter().map(|o| (o.timestamp - tm) * (g(o) - m)).sum::<f64>() / stt
    };
    Ok(FeatureRate {
        fx: slope(&|o| o.fx),
        fy: slope(&|o| o.fy),
        z: slope(&|o| o.z),
    })
}

/// Spherical shell of reachable points around the arm base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachShell {
    pub center: Vector3<f64>,
    pub r_min: f64,
    pub r_max: f64,
}

impl ReachShell {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = (p - self.center).norm();
        d >= self.r_min && d <= self.r_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterceptPrediction {
    pub point: Vector3<f64>,
    pub time: f64,
    pub stage: u32,
    pub innovation_norm: f64,
    /// False when no propagated point entered the shell; `point` is then the last one.
    pub reachable: bool,
}

/// Propagates the fixed-camera dynamics over `horizon` and returns the earliest back-projected
/// point inside `shell` no sooner than `min_lead` after the filter time.
pub fn predict_intercept(
    state: &EkfState,
    cam: &CameraModel,
    shell: &ReachShell,
    horizon: f64,
    min_lead: f64,
    stage: u32,
    innovation_norm: f64,
) -> Result<InterceptPrediction> {
    let steps = (horizon / state.dt).ceil().max(0.0) as usize;
    let mut s = state.clone();
    let mut point = Vector3::zeros();
    for k in 0..=steps {
        if k > 0 {
            let f = dynamics(&s, &DVector::zeros(0), &Matrix6xX::zeros(0))?;
            s.x += f * s.dt;
            s.x[2] = s.x[2].max(MIN_DEPTH);
        }
        let lead = k as f64 * state.dt;
        point = cam.to_world(&back_project_camera(cam, s.x[0], s.x[1], s.x[2])?);
        if lead + 1e-12 >= min_lead && shell.contains(&point) {
            return Ok(InterceptPrediction {
                point,
                time: state.timestamp + lead,
                stage,
                innovation_norm,
                reachable: true,
            });
        }
    }
    Ok(InterceptPrediction {
        point,
        time: state.timestamp + steps as f64 * state.dt,
        stage,
        innovation_norm,
        reachable: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{project_exact, rotation_matrix};
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rand_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        rotation_matrix(&axis, rng.random_range(-3.0..3.0))
    }

    fn test_camera() -> CameraModel {
        CameraModel::look_at(Vector3::new(0.0, -2.5, 0.8), Vector3::new(0.0, 0.0, 0.8), 600.0)
    }

    fn state_at(x: Vector3<f64>) -> EkfState {
        let cam = test_camera();
        let obs = FeatureObservation { fx: x[0], fy: x[1], z: x[2], timestamp: 0.0 };
        let mut s = EkfState::new(&EkfConfig::default(), &cam, &obs, 1.0 / 30.0).unwrap();
        s.x = x;
        s
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    /// Point in camera frame moved by a camera twist (static point).
    fn point_rate(p: &Vector3<f64>, v: &Vector6<f64>) -> Vector3<f64> {
        let lin = Vector3::new(v[0], v[1], v[2]);
        let ang = Vector3::new(v[3], v[4], v[5]);
        -lin - ang.cross(p)
    }

    #[test]
    fn principal_point_rows() {
        let l = interaction_matrix_point(0.0, 0.0, 2.0, 500.0).unwrap();
        let expect = Matrix2x6::new(-250.0, 0.0, 0.0, 0.0, -500.0, 0.0, 0.0, -250.0, 0.0, 500.0, 0.0, 0.0);
        assert_eq!(l, expect);
        let a = interaction_matrix_point(30.0, -20.0, 1.5, 500.0).unwrap();
        let b = interaction_matrix_point(30.0, -20.0, 3.0, 500.0).unwrap();
        for c in 0..3 {
            assert!((b.column(c) * 2.0 - a.column(c)).norm() < 1e-12);
        }
        for c in 3..6 {
            assert_eq!(a.column(c), b.column(c));
        }
        assert!(matches!(interaction_matrix_point(0.0, 0.0, 0.0, 500.0), Err(Error::Domain(_))));
    }

    #[test]
    fn depth_row_cases() {
        let lz = interaction_matrix_depth(0.0, 0.0, 2.0, 500.0).unwrap();
        let v = Vector6::new(0.0, 0.0, 0.7, 0.0, 0.0, 0.0);
        assert_eq!((lz * v)[0], -0.7);
        let rot = Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0);
        assert_eq!((lz * rot)[0], 0.0);
    }

    #[test]
    fn interaction_matrices_match_pinhole_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lambda = 600.0;
        for _ in 0..100 {
            let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..4.0));
            let v = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let proj = |p: &Vector3<f64>| Vector3::new(lambda * p.x / p.z, lambda * p.y / p.z, p.z);
            let h = 1e-6;
            let rate = point_rate(&p, &v);
            let fd = (proj(&(p + rate * h)) - proj(&(p - rate * h))) / (2.0 * h);
            let f = proj(&p);
            let ls = interaction_matrix_point(f.x, f.y, f.z, lambda).unwrap() * v;
            let lz = (interaction_matrix_depth(f.x, f.y, f.z, lambda).unwrap() * v)[0];
            assert!(rel(ls[0], fd.x) < 1e-3 && rel(ls[1], fd.y) < 1e-3);
            assert!(rel(lz, fd.z) < 1e-3);
        }
    }

    #[test]
    fn skew_is_cross_product() {
        let a = Vector3::new(0.3, -1.2, 2.0);
        for b in [Vector3::x(), Vector3::y(), Vector3::z()] {
            assert_eq!(skew(&a) * b, a.cross(&b));
        }
    }

    #[test]
    fn identity_extrinsics_negate() {
        let l = interaction_matrix_point(10.0, 5.0, 2.0, 500.0).unwrap();
        let lg = hand_to_eye_extend(&l, &Matrix3::identity(), &Vector3::zeros()).unwrap();
        assert_eq!(lg, -l);
        let bad = Matrix3::identity() * 2.0;
        assert!(hand_to_eye_extend(&l, &bad, &Vector3::zeros()).is_err());
    }

    #[test]
    fn hand_to_eye_matches_rigid_motion() {
        // robot frame r moves with body twist V_r; camera rigidly attached with T_cr = (R, t)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lambda = 600.0;
        for _ in 0..100 {
            let r = rand_rotation(&mut rng);
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let t_cr = Isometry3::from_parts(
                Translation3::from(t),
                UnitQuaternion::from_matrix(&r),
            );
            let p_c = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.0..3.0));
            let v_r = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let feat = |tau: f64| {
                let lin = Vector3::new(v_r[0], v_r[1], v_r[2]) * tau;
                let ang = Vector3::new(v_r[3], v_r[4], v_r[5]) * tau;
                let motion = Isometry3::new(lin, ang);
                // camera pose after motion, expressed in the initial camera frame
                let cam_new = t_cr * motion * t_cr.inverse();
                let p = cam_new.inverse() * nalgebra::Point3::from(p_c);
                Vector3::new(lambda * p.x / p.z, lambda * p.y / p.z, p.z)
            };
            let h = 1e-6;
            let fd = (feat(h) - feat(-h)) / (2.0 * h);
            let f = feat(0.0);
            let ls = interaction_matrix_point(f.x, f.y, f.z, lambda).unwrap();
            let lz = interaction_matrix_depth(f.x, f.y, f.z, lambda).unwrap();
            let lg = hand_to_eye_extend(&ls, &r, &t).unwrap();
            let lzg = hand_to_eye_extend(&lz, &r, &t).unwrap();
            let s = -(lg * v_r);
            let zr = -(lzg * v_r)[0];
            assert!(rel(s[0], fd.x) < 1e-3 && rel(s[1], fd.y) < 1e-3, "{s:?} vs {fd:?}");
            assert!(rel(zr, fd.z) < 1e-3);
        }
    }

    #[test]
    fn static_dynamics() {
        let mut s = state_at(Vector3::new(12.0, -7.0, 2.0));
        assert_eq!(dynamics(&s, &DVector::zeros(0), &Matrix6xX::zeros(0)).unwrap(), Vector3::zeros());
        s.v_o = Vector2::new(3.0, 0.0);
        let f = dynamics(&s, &DVector::zeros(0), &Matrix6xX::zeros(0)).unwrap();
        assert_eq!((f[0], f[1]), (-3.0, 0.0));
    }

    #[test]
    fn dynamics_match_simulated_min_norm_motion() {
        // the depth row follows the minimum-norm robot twist that explains the feature motion
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Vector3::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(1.0..4.0));
            let mut s = state_at(x);
            s.extrinsic_rotation = rand_rotation(&mut rng);
            s.extrinsic_translation = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            s.v_o = Vector2::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0));
            let f = dynamics(&s, &DVector::zeros(0), &Matrix6xX::zeros(0)).unwrap();
            let ls = interaction_matrix_point(x[0], x[1], x[2], s.lambda).unwrap();
            let h_rt = twist_transform(&s.extrinsic_rotation, &s.extrinsic_translation).unwrap();
            let (lg_pinv, _) = pinv_2x6(&-(ls * h_rt));
            let v_cam = h_rt * (lg_pinv * s.v_o);
                        let lambda = s.lambda;
            let p = Vector3::new(x[0] * x[2] / lambda, x[1] * x[2] / lambda, x[2]);
            let rate = point_rate(&p, &v_cam);
            let proj = |p: &Vector3<f64>| Vector3::new(lambda * p.x / p.z, lambda * p.y / p.z, p.z);
            let hstep = 1e-7;
            let fd = (proj(&(p + rate * hstep)) - proj(&(p - rate * hstep))) / (2.0 * hstep);
            for k in 0..3 {
                assert!(rel(f[k], fd[k]) < 1e-3, "component {k}: {} vs {}", f[k], fd[k]);
            }
        }
    }

    fn random_full_state(rng: &mut ChaCha8Rng) -> (EkfState, DVector<f64>, Matrix6xX<f64>) {
        let x = Vector3::new(rng.random_range(-250.0..250.0), rng.random_range(-250.0..250.0), rng.random_range(0.8..4.0));
        let mut s = state_at(x);
        s.extrinsic_rotation = rand_rotation(rng);
        s.extrinsic_translation = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        s.v_o = Vector2::new(rng.random_range(-400.0..400.0), rng.random_range(-400.0..400.0));
        let u = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let j = Matrix6xX::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        (s, u, j)
    }

    pub(crate) fn fd_jacobian(s: &EkfState, u: &DVector<f64>, j: &Matrix6xX<f64>) -> Matrix3<f64> {
        let mut out = Matrix3::zeros();
        for k in 0..3 {
            let h = 1e-6 * s.x[k].abs().max(1.0);
            let mut a = s.clone();
            let mut b = s.clone();
            a.x[k] += h;
            b.x[k] -= h;
            let col = (dynamics(&a, u, j).unwrap() - dynamics(&b, u, j).unwrap()) / (2.0 * h);
            out.set_column(k, &col);
        }
        out
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let (s, u, j) = random_full_state(&mut rng);
            let (u, j) = if i % 2 == 0 { (u, j) } else { (DVector::zeros(0), Matrix6xX::zeros(0)) };
            let a = dynamics_jacobian(&s, &u, &j).unwrap();
            let n = fd_jacobian(&s, &u, &j);
            let err = (a - n).norm() / n.norm().max(1e-8);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn predict_without_motion_adds_q() {
        let s = state_at(Vector3::new(1.0, 2.0, 3.0));
        let n = predict_static(&s).unwrap();
        assert_eq!(n.x, s.x);
        assert!((n.p - (s.p + s.q)).norm() < 1e-12);
    }

    #[test]
    fn half_steps_agree_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dt in [0.02, 0.01, 0.005] {
            let (mut s, _, _) = random_full_state(&mut rng);
            s.dt = dt;
            let one = predict_static(&s).unwrap();
            let mut h = s.clone();
            h.dt = dt / 2.0;
            let two = predict_static(&predict_static(&h).unwrap()).unwrap();
            let scale = s.v_o.norm().max(1.0) * 1e3;
            assert!((one.x - two.x).norm() <= scale * dt * dt, "dt {dt}");
        }
    }

    #[test]
    fn update_limits_and_scalar_case() {
        let mut s = state_at(Vector3::new(10.0, 20.0, 2.0));
        s.c = DMatrix::identity(3, 3);
        s.r_meas = DMatrix::zeros(3, 3);
        let y = DVector::from_vec(vec![13.0, 18.0, 2.5]);
        let (n, _) = update(&s, &y).unwrap();
        assert!((DVector::from_column_slice(n.x.as_slice()) - &y).norm() < 1e-9);

        s.r_meas = DMatrix::identity(3, 3) * 1e15;
        let (n, _) = update(&s, &y).unwrap();
        assert!((n.x - s.x).norm() < 1e-9);

        // one observed component, decoupled: P = 1, R = 1 gives K = 0.5, P+ = 0.5
        s.p = Matrix3::identity();
        s.c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        s.r_meas = DMatrix::from_element(1, 1, 1.0);
        let (n, info) = update(&s, &DVector::from_element(1, 12.0)).unwrap();
        assert!((n.x[0] - 11.0).abs() < 1e-12);
        assert!((n.p[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((info.innovation[0] - 2.0).abs() < 1e-12);

        s.p = Matrix3::zeros();
        s.r_meas = DMatrix::zeros(1, 1);
        assert!(matches!(update(&s, &DVector::from_element(1, 1.0)), Err(Error::Numerical(_))));
    }

    fn obs(t: f64, fx: f64, fy: f64, z: f64) -> FeatureObservation {
        FeatureObservation { fx, fy, z, timestamp: t }
    }

    #[test]
    fn velocity_estimates() {
        let flat: Vec<_> = (0..6).map(|k| obs(k as f64 / 30.0, 5.0, 6.0, 2.0)).collect();
        let r = estimate_feature_velocity(&flat, 5).unwrap();
        assert_eq!((r.fx, r.fy, r.z), (0.0, 0.0, 0.0));
        let line: Vec<_> = (0..8).map(|k| {
            let t = k as f64 / 30.0;
            obs(t, 3.0 + 120.0 * t, -1.0 - 45.0 * t, 2.0 - 0.5 * t)
        }).collect();
        let r = estimate_feature_velocity(&line, 5).unwrap();
        assert!((r.fx - 120.0).abs() < 1e-9 && (r.fy + 45.0).abs() < 1e-9 && (r.z + 0.5).abs() < 1e-12);
        assert!(estimate_feature_velocity(&line, 1).is_err());
        assert!(estimate_feature_velocity(&line[..1], 5).is_err());
    }

    #[test]
    fn noisy_slope_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let window = 30;
        let dt = 1.0 / 30.0;
        let ts: Vec<f64> = (0..window).map(|k| k as f64 * dt).collect();
        let tm = ts.iter().sum::<f64>() / window as f64;
        let se = 1.0 / ts.iter().map(|t| (t - tm).powi(2)).sum::<f64>().sqrt();
        let mut inside = 0;
        for _ in 0..200 {
            let h: Vec<_> = ts.iter().map(|&t| obs(t, 50.0 * t + noise.sample(&mut rng), 0.0, 1.0)).collect();
            let r = estimate_feature_velocity(&h, window).unwrap();
            if (r.fx - 50.0).abs() < 3.0 * se {
                inside += 1;
            }
        }
        assert!(inside >= 195, "{inside}/200");
    }

    #[test]
    fn intercept_cases() {
        let cam = test_camera();
        let shell = ReachShell { center: Vector3::new(0.0, 0.0, 0.8), r_min: 0.0, r_max: 0.5 };
        // static ball in the shell
        let p = Vector3::new(0.1, 0.1, 0.9);
        let f = project_exact(&cam, &p, 0.0).unwrap();
        let s = EkfState::new(&EkfConfig::default(), &cam, &f, 1.0 / 30.0).unwrap();
        let pred = predict_intercept(&s, &cam, &shell, 1.0, 0.0, 1, 0.0).unwrap();
        assert!(pred.reachable && (pred.point - p).norm() < 1e-9 && pred.time == 0.0);
        // moving away from the shell
        let far = Vector3::new(1.0, 0.0, 0.8);
        let f = project_exact(&cam, &far, 0.0).unwrap();
        let mut s = EkfState::new(&EkfConfig::default(), &cam, &f, 1.0 / 30.0).unwrap();
        s.v_o = Vector2::new(-300.0, 0.0);
        let pred = predict_intercept(&s, &cam, &shell, 1.0, 0.0, 1, 0.0).unwrap();
        assert!(!pred.reachable);
    }

    #[test]
    fn intercept_of_noise_free_throw() {
        use crate::world::{step_ball, BallState};
        // camera aimed at the region where the ball enters the shell
        let cam = CameraModel::look_at(Vector3::new(0.7, -2.5, 1.0), Vector3::new(0.7, 0.0, 1.0), 600.0);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let dt = 1.0 / 30.0;
        let sub = 20;
        let fine = dt / sub as f64;
        let shell = ReachShell { center: Vector3::new(0.0, 0.0, 0.6), r_min: 0.0, r_max: 0.85 };
        let mut b = BallState {
            position: Vector3::new(1.8, 0.0, 1.0),
            velocity: Vector3::new(-3.0, 0.0, 1.5),
            radius: 0.03,
        };
        let frame = |b: &BallState| (0..sub).fold(*b, |acc, _| step_ball(&acc, fine, &g));
        let mut hist = Vec::new();
        let mut t = 0.0;
        // observe until the next frame would be inside the shell
        loop {
            hist.push(project_exact(&cam, &b.position, t).unwrap());
            let next = frame(&b);
            if hist.len() >= 5 && shell.contains(&next.position) {
                break;
            }
            b = next;
            t += dt;
            assert!(t < 2.0);
        }
        let cfg = EkfConfig::default();
        let mut s = EkfState::new(&cfg, &cam, &hist[0], dt).unwrap();
        for o in &hist[1..] {
            s = predict_static(&s).unwrap();
            s.timestamp = o.timestamp;
            let y = s.measurement(o);
            s = update(&s, &y).unwrap().0;
        }
        let rate = estimate_feature_velocity(&hist, cfg.window).unwrap();
        s.v_o = Vector2::new(-rate.fx, -rate.fy);
        let pred = predict_intercept(&s, &cam, &shell, 1.0, 0.0, 1, 0.0).unwrap();
        assert!(pred.reachable);
        let mut bt = b;
        let mut tt = t;
        while tt + fine / 2.0 < pred.time {
            bt = step_ball(&bt, fine, &g);
            tt += fine;
        }
        let err = (pred.point - bt.position).norm();
        assert!(err < 0.05, "error {err} at horizon {}", pred.time - t);
    }

    #[test]
    fn nis_is_consistent_under_matched_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cam = test_camera();
        cam.pixel_noise_sigma = 1.5;
        cam.depth_noise_sigma = 0.01;
        let first = FeatureObservation { fx: 0.0, fy: 0.0, z: 2.0, timestamp: 0.0 };
        let cfg = EkfConfig {
            p0_diag: [cam.pixel_noise_sigma.powi(2), cam.pixel_noise_sigma.powi(2), 1e-4],
            ..EkfConfig::default()
        };
        let mut s = EkfState::new(&cfg, &cam, &first, 1.0 / 30.0).unwrap();
        s.v_o = Vector2::new(-60.0, 30.0);
        let mut truth = s.x;
        let qn = s.q.map(|v| v.sqrt());
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        let steps = 200;
        for _ in 0..steps {
            let mut ts = s.clone();
            ts.x = truth;
            let f = dynamics(&ts, &DVector::zeros(0), &Matrix6xX::zeros(0)).unwrap();
            truth += f * s.dt + Vector3::from_fn(|k, _| qn[(k, k)] * std.sample(&mut rng));
            s = predict_static(&s).unwrap();
            let y = DVector::from_vec(vec![
                truth[0] + cam.pixel_noise_sigma * std.sample(&mut rng),
                truth[1] + cam.pixel_noise_sigma * std.sample(&mut rng),
                truth[2] + cam.depth_noise_sigma * std.sample(&mut rng),
            ]);
            let (n, info) = update(&s, &y).unwrap();
            total += info.nis;
            s = n;
            let ev = s.p.symmetric_eigenvalues();
            assert!(ev.min() >= -1e-10);
        }
        let mean = total / steps as f64;
        assert!((0.6 * 3.0..=1.6 * 3.0).contains(&mean), "mean NIS {mean}");
    }
}
