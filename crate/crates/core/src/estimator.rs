//! Tightly-coupled square-root CDGNSS/IMU filter.
//!
//! Propagation is model replacement: bias-compensated IMU specific force and
//! angular rate drive the strapdown mechanization, so the a-priori antenna
//! position carries all sensed vehicle motion, including road dithering. The
//! measurement update normalizes the DD innovations and the state prior with
//! Cholesky square-root information factors, QR-factorizes the stacked
//! Jacobian into three cost blocks, resolves the integer ambiguities each
//! epoch with an exact ILS search, and conditions the state on the fixed
//! integers. The fixed-ambiguity residual cost of each epoch feeds the
//! spoofing detector.

use crate::geometry::GeometryError;
use crate::ils::{ils_solve, IlsError, IlsProblem};
use crate::observables::{
    linearize, EpochMeasurement, LinearizedMeasurement, ObservableSim, ObservablesError,
};
use crate::scenario::{gravity_enu, ImuGradeModel, ImuSample, TruthState};
use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Error-state dimension: position, velocity, attitude, accel bias, gyro bias.
pub const STATE_DIM: usize = 15;

/// Condition-number guard on triangular factors.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("IMU gap of {gap:.3} s at t={t:.3} exceeds two sample periods")]
    ImuGap { t: f64, gap: f64 },
    #[error("timestamps out of order: {prev:.3} then {next:.3}")]
    OutOfOrder { prev: f64, next: f64 },
    #[error("decomposition ill-conditioned (ratio {0:.3e})")]
    IllConditioned(f64),
    #[error("prior covariance is not positive definite")]
    BadPrior,
    #[error(transparent)]
    Observables(#[from] ObservablesError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ils(#[from] IlsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Navigation state with upper-triangular square-root information of the
/// 15-dim error state (truth minus estimate, in position / velocity /
/// attitude small-angle / accel bias / gyro bias order).
#[derive(Debug, Clone, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub sqrt_info: DMatrix<f64>,
}

impl NavState {
    /// Initial state centered on the truth with stock prior sigmas: 5 cm
    /// position, 5 cm/s velocity, 0.01 rad attitude, biases at the grade's
    /// instability scale.
    pub fn at_truth(truth: &TruthState, grade: ImuGradeModel) -> NavState {
        let mut sigmas = [0.0; STATE_DIM];
        for i in 0..3 {
            sigmas[i] = 0.05;
            sigmas[3 + i] = 0.05;
            sigmas[6 + i] = 0.01;
            sigmas[9 + i] = grade.accel_bias_instability.max(1e-6);
            sigmas[12 + i] = grade.gyro_bias_instability.max(1e-8);
        }
        let mut info = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for i in 0..STATE_DIM {
            info[(i, i)] = 1.0 / sigmas[i];
        }
        NavState {
            t: truth.t,
            position: truth.position,
            velocity: truth.velocity,
            attitude: truth.attitude,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            sqrt_info: info,
        }
    }

    /// Error-state covariance implied by the square-root information factor.
    pub fn covariance(&self) -> Result<DMatrix<f64>, FilterError> {
        let inv = invert_upper(&self.sqrt_info)?;
        Ok(&inv * inv.transpose())
    }

    /// Marginal standard deviation of one error-state component.
    pub fn sigma(&self, idx: usize) -> Result<f64, FilterError> {
        Ok(self.covariance()?[(idx, idx)].sqrt())
    }

    /// Apply an error-state correction (truth-minus-estimate convention, so
    /// the correction is added).
    pub fn apply_correction(&mut self, dx: &DVector<f64>) {
        self.position += Vector3::new(dx[0], dx[1], dx[2]);
        self.velocity += Vector3::new(dx[3], dx[4], dx[5]);
        let dtheta = Vector3::new(dx[6], dx[7], dx[8]);
        self.attitude = UnitQuaternion::from_scaled_axis(dtheta) * self.attitude;
        self.accel_bias += Vector3::new(dx[9], dx[10], dx[11]);
        self.gyro_bias += Vector3::new(dx[12], dx[13], dx[14]);
    }
}

fn invert_upper(r: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let n = r.nrows();
    let mut inv = DMatrix::identity(n, n);
    for col in 0..n {
        let mut rhs = inv.column_mut(col);
        if !r.solve_upper_triangular_mut(&mut rhs) {
            return Err(FilterError::BadPrior);
        }
    }
    Ok(inv)
}

/// Upper-triangular square-root information factor of a covariance matrix.
fn sqrt_info_from_cov(p: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let sym = (p + p.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(FilterError::BadPrior)?;
    let p_inv = chol.inverse();
    let sym_inv = (&p_inv + p_inv.transpose()) * 0.5;
    let chol_inv = sym_inv.cholesky().ok_or(FilterError::BadPrior)?;
    Ok(chol_inv.l().transpose())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Strapdown propagation through the IMU samples in `(state.t, epoch_t]`.
///
/// Attitude integrates the bias-compensated body rate, velocity and position
/// integrate the rotated specific force plus gravity. The square-root
/// information factor propagates through the linearized error dynamics with
/// the grade's noise densities; biases are random walks.
pub fn propagate(
    state: &NavState,
    imu: &[ImuSample],
    epoch_t: f64,
    grade: &ImuGradeModel,
) -> Result<NavState, FilterError> {
    let nominal_dt = 1.0 / grade.sample_rate_hz;
    let g = gravity_enu();

    let mut next = state.clone();
    let mut p = state.covariance()?;

    let q_accel = grade.accel_noise_density * grade.accel_noise_density;
    let q_gyro = grade.gyro_noise_density * grade.gyro_noise_density;
    let q_ba = grade.accel_bias_rw() * grade.accel_bias_rw();
    let q_bg = grade.gyro_bias_rw() * grade.gyro_bias_rw();

    for s in imu.iter().filter(|s| s.t > state.t && s.t <= epoch_t + 1e-9) {
        let dt = s.t - next.t;
        if dt <= 0.0 {
            return Err(FilterError::OutOfOrder { prev: next.t, next: s.t });
        }
        if dt > 2.0 * nominal_dt + 1e-9 {
            return Err(FilterError::ImuGap { t: s.t, gap: dt });
        }

        let omega = s.gyro - next.gyro_bias;
        next.attitude = next.attitude * UnitQuaternion::from_scaled_axis(omega * dt);
        let rot = next.attitude.to_rotation_matrix().into_inner();
        let f_nav = rot * (s.accel - next.accel_bias);
        let a_nav = f_nav + g;
        let v_new = next.velocity + a_nav * dt;
        next.position += (next.velocity + v_new) * (0.5 * dt);
        next.velocity = v_new;
        next.t = s.t;

        // First-order transition of the error state.
        let mut phi = DMatrix::identity(STATE_DIM, STATE_DIM);
        let f_skew = skew(&f_nav);
        for r in 0..3 {
            phi[(r, 3 + r)] = dt;
            for c in 0..3 {
                phi[(3 + r, 6 + c)] = -f_skew[(r, c)] * dt;
                phi[(3 + r, 9 + c)] = -rot[(r, c)] * dt;
                phi[(6 + r, 12 + c)] = -rot[(r, c)] * dt;
            }
        }

        let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for r in 0..3 {
            q[(r, r)] = q_accel * dt * dt * dt / 3.0;
            q[(r, 3 + r)] = q_accel * dt * dt / 2.0;
            q[(3 + r, r)] = q_accel * dt * dt / 2.0;
            q[(3 + r, 3 + r)] = q_accel * dt;
            q[(6 + r, 6 + r)] = q_gyro * dt;
            q[(9 + r, 9 + r)] = q_ba * dt;
            q[(12 + r, 12 + r)] = q_bg * dt;
        }

        p = &phi * p * phi.transpose() + q;
    }

    if epoch_t - next.t > 2.0 * nominal_dt + 1e-9 {
        return Err(FilterError::ImuGap { t: epoch_t, gap: epoch_t - next.t });
    }

    next.sqrt_info = sqrt_info_from_cov(&p)?;
    Ok(next)
}

/// The three-block QR decomposition of the normalized measurement-update
/// cost. For any error state dx and integer vector n,
/// `|nu' - H'[dx; n]|^2 = |nu1 - R_xx dx - R_xn n|^2 + |nu2 - R_nn n|^2 + |nu3|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDecomposition {
    pub nu1: DVector<f64>,
    pub nu2: DVector<f64>,
    pub nu3: DVector<f64>,
    pub r_xx: DMatrix<f64>,
    pub r_xn: DMatrix<f64>,
    pub r_nn: DMatrix<f64>,
}

impl CostDecomposition {
    pub fn num_ambiguities(&self) -> usize {
        self.nu2.len()
    }

    /// Irreducible cost; equals the pseudorange NIS under single-epoch
    /// ambiguity resolution.
    pub fn j3(&self) -> f64 {
        self.nu3.norm_squared()
    }

    /// J1 + J2 + J3 evaluated at an explicit (dx, n).
    pub fn total_cost(&self, dx: &DVector<f64>, n: &DVector<f64>) -> f64 {
        let j1 = (&self.nu1 - &self.r_xx * dx - &self.r_xn * n).norm_squared();
        let j2 = (&self.nu2 - &self.r_nn * n).norm_squared();
        j1 + j2 + self.j3()
    }

    /// Float solution zeroing J1 and J2 by backsubstitution.
    pub fn float_solution(&self) -> Result<(DVector<f64>, DVector<f64>), FilterError> {
        let n_float = solve_upper(&self.r_nn, &self.nu2)?;
        let rhs = &self.nu1 - &self.r_xn * &n_float;
        let dx = solve_upper(&self.r_xx, &rhs)?;
        Ok((dx, n_float))
    }

    /// Conditional state correction for a fixed integer vector.
    pub fn fixed_state(&self, n: &[i64]) -> Result<DVector<f64>, FilterError> {
        let n_vec = DVector::from_iterator(n.len(), n.iter().map(|&v| v as f64));
        let rhs = &self.nu1 - &self.r_xn * n_vec;
        solve_upper(&self.r_xx, &rhs)
    }
}

fn solve_upper(r: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, FilterError> {
    let mut x = b.clone();
    if !r.solve_upper_triangular_mut(&mut x) {
        return Err(FilterError::IllConditioned(f64::INFINITY));
    }
    Ok(x)
}

fn condition_guard(r: &DMatrix<f64>) -> Result<(), FilterError> {
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)].abs();
        max = max.max(d);
        min = min.min(d);
    }
    if min == 0.0 || max / min > MAX_CONDITION {
        return Err(FilterError::IllConditioned(if min == 0.0 { f64::INFINITY } else { max / min }));
    }
    Ok(())
}

/// Normalize the innovations model and the prior with Cholesky square-root
/// information factors, then QR-factorize the stacked Jacobian into the
/// three-block cost form.
pub fn cost_decompose(
    lin: &LinearizedMeasurement,
    prior_sqrt_info: &DMatrix<f64>,
) -> Result<CostDecomposition, FilterError> {
    let m = lin.nu.len();
    let n_amb = lin.h_n.ncols();
    let rows = STATE_DIM + m;
    let cols = STATE_DIM + n_amb;

    // Whitening: forward substitution with the lower Cholesky factor of the
    // measurement covariance.
    let chol = lin
        .sigma
        .clone()
        .cholesky()
        .ok_or(FilterError::IllConditioned(f64::INFINITY))?;
    let l = chol.l();
    let mut nu_white = lin.nu.clone();
    l.solve_lower_triangular_mut(&mut nu_white);
    let mut hr_white = lin.h_r.clone();
    let mut hn_white = lin.h_n.clone();
    for c in 0..hr_white.ncols() {
        let mut col = hr_white.column_mut(c);
        l.solve_lower_triangular_mut(&mut col);
    }
    for c in 0..hn_white.ncols() {
        let mut col = hn_white.column_mut(c);
        l.solve_lower_triangular_mut(&mut col);
    }

    let mut stacked = DMatrix::zeros(rows, cols);
    stacked.view_mut((0, 0), (STATE_DIM, STATE_DIM)).copy_from(prior_sqrt_info);
    stacked.view_mut((STATE_DIM, 0), (m, STATE_DIM)).copy_from(&hr_white);
    stacked.view_mut((STATE_DIM, STATE_DIM), (m, n_amb)).copy_from(&hn_white);

    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(STATE_DIM, m).copy_from(&nu_white);

    let qr = stacked.qr();
    qr.q_tr_mul(&mut rhs);
    let mut r = qr.r();

    // Positive diagonal normalization (Householder can flip row signs).
    for i in 0..cols {
        if r[(i, i)] < 0.0 {
            for j in i..cols {
                r[(i, j)] = -r[(i, j)];
            }
            rhs[i] = -rhs[i];
        }
    }

    let r_xx = r.view((0, 0), (STATE_DIM, STATE_DIM)).into_owned();
    let r_xn = r.view((0, STATE_DIM), (STATE_DIM, n_amb)).into_owned();
    let r_nn = r.view((STATE_DIM, STATE_DIM), (n_amb, n_amb)).into_owned();
    condition_guard(&r_xx)?;
    if n_amb > 0 {
        condition_guard(&r_nn)?;
    }

    Ok(CostDecomposition {
        nu1: rhs.rows(0, STATE_DIM).into_owned(),
        nu2: rhs.rows(STATE_DIM, n_amb).into_owned(),
        nu3: rhs.rows(cols, rows - cols).into_owned(),
        r_xx,
        r_xn,
        r_nn,
    })
}

/// Outcome of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct FixResult {
    pub t: f64,
    pub num_pairs: usize,
    /// Integer-fixed carrier-phase residual cost J2 at the ILS optimum.
    pub eps_phi: f64,
    /// Irreducible cost J3.
    pub j3: f64,
    pub fix_applied: bool,
    pub fixed_ambiguities: Vec<i64>,
}

impl FixResult {
    fn empty(t: f64) -> FixResult {
        FixResult {
            t,
            num_pairs: 0,
            eps_phi: 0.0,
            j3: 0.0,
            fix_applied: false,
            fixed_ambiguities: Vec::new(),
        }
    }
}

/// One CDGNSS measurement update: linearize, decompose, fix integers, apply
/// the conditional state correction. The posterior square-root information is
/// the R_xx block conditioned on the fixed integers.
pub fn measurement_update(
    prior: &NavState,
    epoch: &EpochMeasurement,
    sim: &ObservableSim,
) -> Result<(FixResult, NavState), FilterError> {
    if epoch.num_pairs() == 0 {
        return Ok((FixResult::empty(epoch.t), prior.clone()));
    }
    let lin = linearize(epoch, prior, sim)?;
    let decomp = cost_decompose(&lin, &prior.sqrt_info)?;

    let ils = ils_solve(&IlsProblem::new(decomp.nu2.clone(), decomp.r_nn.clone())?)?;
    let dx = decomp.fixed_state(&ils.n)?;

    let mut posterior = prior.clone();
    posterior.apply_correction(&dx);
    posterior.sqrt_info = decomp.r_xx.clone();

    let fix = FixResult {
        t: epoch.t,
        num_pairs: epoch.num_pairs(),
        eps_phi: ils.j2,
        j3: decomp.j3(),
        fix_applied: true,
        fixed_ambiguities: ils.n,
    };
    Ok((fix, posterior))
}

/// Optional vehicle constraints: zero body-frame lateral and vertical
/// velocity pseudo-measurements.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VehicleConstraints {
    pub sigma_lateral_mps: f64,
    pub sigma_vertical_mps: f64,
}

/// Apply the vehicle-constraint pseudo-measurements as a square-root update.
pub fn apply_vehicle_constraints(
    state: &NavState,
    constraints: &VehicleConstraints,
) -> Result<NavState, FilterError> {
    let rot = state.attitude.to_rotation_matrix().into_inner();
    let v_body = rot.transpose() * state.velocity;

    let mut h_r = DMatrix::zeros(2, STATE_DIM);
    let v_skew_map = rot.transpose() * skew(&state.velocity);
    for (row, axis) in [(0usize, 1usize), (1usize, 2usize)] {
        for c in 0..3 {
            h_r[(row, 3 + c)] = rot.transpose()[(axis, c)];
            h_r[(row, 6 + c)] = v_skew_map[(axis, c)];
        }
    }
    let nu = DVector::from_row_slice(&[-v_body.y, -v_body.z]);
    let mut sigma = DMatrix::zeros(2, 2);
    sigma[(0, 0)] = constraints.sigma_lateral_mps * constraints.sigma_lateral_mps;
    sigma[(1, 1)] = constraints.sigma_vertical_mps * constraints.sigma_vertical_mps;

    let lin = LinearizedMeasurement {
        t: state.t,
        nu,
        h_r,
        h_n: DMatrix::zeros(2, 0),
        sigma,
    };
    let decomp = cost_decompose(&lin, &state.sqrt_info)?;
    let dx = decomp.fixed_state(&[])?;
    let mut posterior = state.clone();
    posterior.apply_correction(&dx);
    posterior.sqrt_info = decomp.r_xx.clone();
    Ok(posterior)
}

/// Filter configuration beyond the IMU grade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub grade: ImuGradeModel,
    /// Off by default; the CDGNSS update normally provides the constraint
    /// information itself.
    pub constraints: Option<VehicleConstraints>,
}

impl FilterConfig {
    pub fn new(grade: ImuGradeModel) -> Self {
        FilterConfig { grade, constraints: None }
    }
}

/// Complete filter run output.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub fixes: Vec<FixResult>,
    pub states: Vec<NavState>,
    /// Epochs skipped because the update was ill-conditioned.
    pub skipped_epochs: usize,
}

/// Interleave IMU propagation and measurement updates over time-aligned
/// streams. Ill-conditioned epochs are skipped (prior carried forward) and
/// counted; data-integrity failures abort.
pub fn run_filter(
    imu: &[ImuSample],
    epochs: &[EpochMeasurement],
    initial: NavState,
    sim: &ObservableSim,
    config: &FilterConfig,
) -> Result<FilterRun, FilterError> {
    let mut state = initial;
    let mut fixes = Vec::with_capacity(epochs.len());
    let mut states = Vec::with_capacity(epochs.len());
    let mut skipped = 0usize;

    let mut prev_t = state.t;
    for epoch in epochs {
        if epoch.t < prev_t {
            return Err(FilterError::OutOfOrder { prev: prev_t, next: epoch.t });
        }
        prev_t = epoch.t;

        if epoch.t > state.t {
            state = propagate(&state, imu, epoch.t, &config.grade)?;
        }
        if let Some(c) = &config.constraints {
            state = apply_vehicle_constraints(&state, c)?;
        }
        match measurement_update(&state, epoch, sim) {
            Ok((fix, posterior)) => {
                state = posterior;
                fixes.push(fix);
            }
            Err(
                FilterError::IllConditioned(_)
                | FilterError::Observables(ObservablesError::DegenerateGeometry),
            ) => {
                skipped += 1;
                fixes.push(FixResult::empty(epoch.t));
            }
            Err(e) => return Err(e),
        }
        states.push(state.clone());
    }
    Ok(FilterRun { fixes, states, skipped_epochs: skipped })
}

/// Fix series CSV: `t,N_k,eps_phi,j3,fix_applied`.
pub fn write_fixes_csv<W: Write>(mut w: W, fixes: &[FixResult]) -> Result<(), FilterError> {
    writeln!(w, "t,N_k,eps_phi,j3,fix_applied")?;
    for f in fixes {
        writeln!(
            w,
            "{},{},{},{},{}",
            f.t,
            f.num_pairs,
            f.eps_phi,
            f.j3,
            if f.fix_applied { 1 } else { 0 }
        )?;
    }
    Ok(())
}

pub fn read_fixes_csv<R: BufRead>(r: R) -> Result<Vec<FixResult>, FilterError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(FilterError::Malformed {
                line: idx + 1,
                reason: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| FilterError::Malformed {
                line: idx + 1,
                reason: e.to_string(),
            })
        };
        out.push(FixResult {
            t: parse(parts[0])?,
            num_pairs: parse(parts[1])? as usize,
            eps_phi: parse(parts[2])?,
            j3: parse(parts[3])?,
            fix_applied: parts[4] == "1",
            fixed_ambiguities: Vec::new(),
        });
    }
    Ok(out)
}

/// Navigation solution CSV: pose, velocity and marginal position sigmas.
pub fn write_nav_csv<W: Write>(mut w: W, states: &[NavState]) -> Result<(), FilterError> {
    writeln!(w, "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,sx,sy,sz")?;
    for s in states {
        let q = s.attitude.quaternion();
        let cov = s.covariance()?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t,
            s.position.x,
            s.position.y,
            s.position.z,
            s.velocity.x,
            s.velocity.y,
            s.velocity.z,
            q.w,
            q.i,
            q.j,
            q.k,
            cov[(0, 0)].sqrt(),
            cov[(1, 1)].sqrt(),
            cov[(2, 2)].sqrt()
        )?;
    }
    Ok(())
}
