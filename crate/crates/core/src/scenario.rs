//! Truth trajectory generation and IMU synthesis.
//!
//! The stock scenario is a vehicle holding at a stoplight and then launching
//! with constant longitudinal acceleration. Road irregularities add
//! band-limited centimeter-level vertical and lateral dithering whenever the
//! vehicle moves: motion an IMU senses but an attacker cannot predict. The
//! trajectory is built from closed-form segments so position, velocity and
//! specific force stay exactly consistent, and IMU samples are interval
//! averages (delta-v over the sample period) so noiseless double integration
//! reproduces the truth.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Standard gravity (m/s^2), pointing down the ENU U axis.
pub const GRAVITY: f64 = 9.80665;
/// IMU sample rate (Hz).
pub const IMU_RATE_HZ: f64 = 100.0;
/// GNSS measurement epoch rate (Hz).
pub const EPOCH_RATE_HZ: f64 = 5.0;

/// Gravity vector in the ENU navigation frame.
pub fn gravity_enu() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    BadConfig(String),
    #[error("truth series too short: {got} samples, need at least {need}")]
    TruthTooShort { got: usize, need: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Vehicle truth at one instant. Attitude maps the FRD body frame
/// (forward-right-down) into ENU; specific force is the instantaneous
/// accelerometer-sensed quantity a - g expressed in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthState {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub angular_rate: Vector3<f64>,
    pub specific_force: Vector3<f64>,
}

/// One IMU sample. `accel` is the average specific force over the preceding
/// sample interval (delta-v over dt), `gyro` the average body angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImuGrade {
    Industrial,
    Consumer,
}

impl ImuGrade {
    pub fn model(self) -> ImuGradeModel {
        match self {
            ImuGrade::Industrial => ImuGradeModel {
                grade: self,
                accel_noise_density: 1.0e-3,
                gyro_noise_density: 3.0e-4,
                accel_bias_instability: 1.0e-3,
                gyro_bias_instability: 5.0e-5,
                sample_rate_hz: IMU_RATE_HZ,
            },
            ImuGrade::Consumer => ImuGradeModel {
                grade: self,
                accel_noise_density: 4.0e-3,
                gyro_noise_density: 1.2e-3,
                accel_bias_instability: 4.0e-3,
                gyro_bias_instability: 2.0e-4,
                sample_rate_hz: IMU_RATE_HZ,
            },
        }
    }
}

/// IMU error model. Noise densities are white-noise PSD levels; bias
/// instability is the 100-second random-walk drift scale and also the spread
/// of the initial bias draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuGradeModel {
    pub grade: ImuGrade,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2 over 100 s
    pub accel_bias_instability: f64,
    /// rad/s over 100 s
    pub gyro_bias_instability: f64,
    pub sample_rate_hz: f64,
}

impl ImuGradeModel {
    /// Noise-free model, used by tests and oracles.
    pub fn ideal() -> Self {
        ImuGradeModel {
            grade: ImuGrade::Industrial,
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_instability: 0.0,
            gyro_bias_instability: 0.0,
            sample_rate_hz: IMU_RATE_HZ,
        }
    }

    /// Bias random-walk density (per sqrt(s)) equivalent to the configured
    /// 100-second instability.
    pub fn accel_bias_rw(&self) -> f64 {
        self.accel_bias_instability / 10.0
    }

    pub fn gyro_bias_rw(&self) -> f64 {
        self.gyro_bias_instability / 10.0
    }
}

/// Band-limited road-irregularity dithering. Sinusoid amplitudes fall off as
/// 1/sqrt(f) across the band, normalized to the requested position RMS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitherSpec {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub vertical_rms_m: f64,
    pub lateral_rms_m: f64,
}

impl Default for DitherSpec {
    fn default() -> Self {
        DitherSpec { band_lo_hz: 2.0, band_hi_hz: 15.0, vertical_rms_m: 0.01, lateral_rms_m: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub trajectory: u64,
    pub imu: u64,
    pub observables: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { trajectory: 1, imu: 2, observables: 3 }
    }
}

fn default_base_pos() -> [f64; 3] {
    [220.0, -160.0, 4.0]
}

fn default_lever_arm() -> [f64; 3] {
    [0.5, 0.0, -1.2]
}

/// Scenario description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    /// The vehicle is parked until this time.
    pub stop_until_s: f64,
    /// Constant longitudinal acceleration after launch.
    pub accel_mps2: f64,
    /// Optional speed cap; acceleration stops once reached.
    #[serde(default)]
    pub cruise_speed_mps: Option<f64>,
    #[serde(default)]
    pub dither: DitherSpec,
    pub imu_grade: ImuGrade,
    #[serde(default)]
    pub seeds: Seeds,
    /// Rover start position, ENU meters.
    #[serde(default)]
    pub start_pos_m: [f64; 3],
    /// Reference-station antenna position, ENU meters.
    #[serde(default = "default_base_pos")]
    pub base_pos_m: [f64; 3],
    /// IMU-to-antenna lever arm in the FRD body frame.
    #[serde(default = "default_lever_arm")]
    pub lever_arm_m: [f64; 3],
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ScenarioError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration_s > 0.0) {
            return Err(ScenarioError::BadConfig(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            )));
        }
        if self.stop_until_s < 0.0 || self.accel_mps2 < 0.0 {
            return Err(ScenarioError::BadConfig(
                "stop_until_s and accel_mps2 must be non-negative".into(),
            ));
        }
        if self.dither.band_lo_hz <= 0.0 || self.dither.band_hi_hz <= self.dither.band_lo_hz {
            return Err(ScenarioError::BadConfig("dither band must satisfy 0 < lo < hi".into()));
        }
        Ok(())
    }

    pub fn base_pos(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.base_pos_m)
    }

    pub fn lever_arm(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.lever_arm_m)
    }
}

/// Body FRD to ENU for a vehicle level on the ground, facing East.
pub fn level_attitude_facing_east() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
}

/// Sum of sinusoids with analytic derivatives.
#[derive(Debug, Clone)]
struct SinusoidBank {
    // (angular freq, amplitude, phase)
    terms: Vec<(f64, f64, f64)>,
}

impl SinusoidBank {
    fn band_limited(rng: &mut ChaCha12Rng, spec: &DitherSpec, rms: f64, count: usize) -> Self {
        // Amplitudes fall off as 1/sqrt(f): enough energy sits in the middle
        // of the band that a 50 ms replay of the trajectory no longer
        // matches it, while the worst-case jerk stays integrable at the IMU
        // rate.
        let mut terms: Vec<(f64, f64, f64)> = (0..count)
            .map(|_| {
                let f = rng.gen_range(spec.band_lo_hz..spec.band_hi_hz);
                let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                (2.0 * std::f64::consts::PI * f, 1.0 / f.sqrt(), phase)
            })
            .collect();
        let power: f64 = terms.iter().map(|(_, a, _)| a * a / 2.0).sum();
        let scale = if power > 0.0 { rms / power.sqrt() } else { 0.0 };
        for t in &mut terms {
            t.1 *= scale;
        }
        SinusoidBank { terms }
    }

    /// (value, first, second derivative) at t.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let mut p = 0.0;
        let mut v = 0.0;
        let mut a = 0.0;
        for &(w, amp, ph) in &self.terms {
            let (s, c) = (w * t + ph).sin_cos();
            p += amp * s;
            v += amp * w * c;
            a -= amp * w * w * s;
        }
        (p, v, a)
    }
}

/// Quintic smoothstep and derivatives on [0, 1].
fn smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        let d = u * u * (30.0 + u * (-60.0 + 30.0 * u));
        let dd = u * (60.0 + u * (-180.0 + 120.0 * u));
        (s, d, dd)
    }
}

/// Closed-form longitudinal motion: hold, constant acceleration, optional
/// cruise. Returns (x, v, a) along the launch axis.
fn longitudinal(cfg: &ScenarioConfig, t: f64) -> (f64, f64, f64) {
    let t0 = cfg.stop_until_s;
    if t <= t0 || cfg.accel_mps2 == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let a = cfg.accel_mps2;
    let t_cruise = cfg.cruise_speed_mps.map(|v| t0 + v / a);
    match t_cruise {
        Some(tc) if t > tc => {
            let v = cfg.cruise_speed_mps.unwrap();
            let x_c = 0.5 * a * (tc - t0) * (tc - t0);
            (x_c + v * (t - tc), v, 0.0)
        }
        _ => {
            let dt = t - t0;
            (0.5 * a * dt * dt, a * dt, a)
        }
    }
}

/// Dither gate: ramps 0 -> 1 over a tenth of a second once speed crosses
/// 0.5 m/s.
fn dither_envelope(cfg: &ScenarioConfig, t: f64) -> (f64, f64, f64) {
    const SPEED_ON: f64 = 0.5;
    const RAMP_S: f64 = 0.1;
    if cfg.accel_mps2 == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let t_on = cfg.stop_until_s + SPEED_ON / cfg.accel_mps2;
    let (s, d, dd) = smoothstep((t - t_on) / RAMP_S);
    (s, d / RAMP_S, dd / (RAMP_S * RAMP_S))
}

/// Deterministic truth series at the IMU rate.
pub fn generate_trajectory(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<TruthState>, ScenarioError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let lateral = SinusoidBank::band_limited(&mut rng, &cfg.dither, cfg.dither.lateral_rms_m, 24);
    let vertical = SinusoidBank::band_limited(&mut rng, &cfg.dither, cfg.dither.vertical_rms_m, 24);

    let attitude = level_attitude_facing_east();
    let rot_n2b = attitude.inverse();
    let g = gravity_enu();
    let start = Vector3::from_column_slice(&cfg.start_pos_m);

    let dt = 1.0 / IMU_RATE_HZ;
    let n = (cfg.duration_s * IMU_RATE_HZ).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let (x, vx, ax) = longitudinal(cfg, t);
        let (w, wd, wdd) = dither_envelope(cfg, t);
        let (ly, lyd, lydd) = lateral.eval(t);
        let (vz, vzd, vzdd) = vertical.eval(t);
        // Product rule through the envelope keeps derivatives exact.
        let y = w * ly;
        let vy = wd * ly + w * lyd;
        let ay = wdd * ly + 2.0 * wd * lyd + w * lydd;
        let z = w * vz;
        let vz1 = wd * vz + w * vzd;
        let az = wdd * vz + 2.0 * wd * vzd + w * vzdd;

        let accel_enu = Vector3::new(ax, ay, az);
        out.push(TruthState {
            t,
            position: start + Vector3::new(x, y, z),
            velocity: Vector3::new(vx, vy, vz1),
            attitude,
            angular_rate: Vector3::zeros(),
            specific_force: rot_n2b * (accel_enu - g),
        });
    }
    Ok(out)
}

/// True sensor biases in effect at a sample, for consistency analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuBiasTruth {
    pub t: f64,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

/// Synthesize IMU samples from a truth series.
///
/// Samples are interval averages: accel is (delta velocity over dt) minus
/// gravity in the body frame, gyro the average body rate from the attitude
/// delta. Bias random walks and white noise are layered per the grade model;
/// the initial bias draw has the instability scale.
pub fn synthesize_imu(
    truth: &[TruthState],
    model: &ImuGradeModel,
    seed: u64,
) -> Result<Vec<ImuSample>, ScenarioError> {
    synthesize_imu_detailed(truth, model, seed).map(|(samples, _)| samples)
}

/// Same as [`synthesize_imu`] but also reports the true bias trajectory.
pub fn synthesize_imu_detailed(
    truth: &[TruthState],
    model: &ImuGradeModel,
    seed: u64,
) -> Result<(Vec<ImuSample>, Vec<ImuBiasTruth>), ScenarioError> {
    if truth.len() < 2 {
        return Err(ScenarioError::TruthTooShort { got: truth.len(), need: 2 });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw3 = |rng: &mut ChaCha12Rng, sigma: f64| {
        let v = Vector3::new(
            std_normal.sample(rng),
            std_normal.sample(rng),
            std_normal.sample(rng),
        );
        v * sigma
    };

    let mut accel_bias = draw3(&mut rng, model.accel_bias_instability);
    let mut gyro_bias = draw3(&mut rng, model.gyro_bias_instability);
    let g = gravity_enu();

    let mut out = Vec::with_capacity(truth.len() - 1);
    let mut bias_truth = Vec::with_capacity(truth.len() - 1);
    for pair in truth.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let dt = cur.t - prev.t;
        if !(dt > 0.0) {
            return Err(ScenarioError::Malformed {
                line: out.len() + 1,
                reason: "non-increasing truth timestamps".into(),
            });
        }
        let rot_n2b = cur.attitude.inverse();
        let f_avg = rot_n2b * ((cur.velocity - prev.velocity) / dt - g);
        let w_avg = (prev.attitude.inverse() * cur.attitude).scaled_axis() / dt;

        let sigma_a = model.accel_noise_density / dt.sqrt();
        let sigma_g = model.gyro_noise_density / dt.sqrt();
        let accel = f_avg + accel_bias + draw3(&mut rng, sigma_a);
        let gyro = w_avg + gyro_bias + draw3(&mut rng, sigma_g);
        bias_truth.push(ImuBiasTruth { t: cur.t, accel_bias, gyro_bias });
        accel_bias += draw3(&mut rng, model.accel_bias_rw() * dt.sqrt());
        gyro_bias += draw3(&mut rng, model.gyro_bias_rw() * dt.sqrt());

        out.push(ImuSample { t: cur.t, accel, gyro });
    }
    Ok((out, bias_truth))
}

/// Truth series CSV: `t,px,py,pz,vx,vy,vz,qw,qx,qy,qz`.
pub fn write_truth_csv<W: Write>(mut w: W, truth: &[TruthState]) -> Result<(), ScenarioError> {
    writeln!(w, "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz")?;
    for s in truth {
        let q = s.attitude.quaternion();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
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
            q.k
        )?;
    }
    Ok(())
}

/// Reads the truth CSV back; angular rate and specific force are not part of
/// the format and come back zeroed.
pub fn read_truth_csv<R: BufRead>(r: R) -> Result<Vec<TruthState>, ScenarioError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ScenarioError::Malformed { line: idx + 1, reason: e.to_string() })?;
        if f.len() != 11 {
            return Err(ScenarioError::Malformed {
                line: idx + 1,
                reason: format!("expected 11 fields, got {}", f.len()),
            });
        }
        out.push(TruthState {
            t: f[0],
            position: Vector3::new(f[1], f[2], f[3]),
            velocity: Vector3::new(f[4], f[5], f[6]),
            attitude: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                f[7], f[8], f[9], f[10],
            )),
            angular_rate: Vector3::zeros(),
            specific_force: Vector3::zeros(),
        });
    }
    Ok(out)
}

/// IMU series CSV: `t,ax,ay,az,gx,gy,gz`.
pub fn write_imu_csv<W: Write>(mut w: W, imu: &[ImuSample]) -> Result<(), ScenarioError> {
    writeln!(w, "t,ax,ay,az,gx,gy,gz")?;
    for s in imu {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
        )?;
    }
    Ok(())
}

pub fn read_imu_csv<R: BufRead>(r: R) -> Result<Vec<ImuSample>, ScenarioError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ScenarioError::Malformed { line: idx + 1, reason: e.to_string() })?;
        if f.len() != 7 {
            return Err(ScenarioError::Malformed {
                line: idx + 1,
                reason: format!("expected 7 fields, got {}", f.len()),
            });
        }
        out.push(ImuSample {
            t: f[0],
            accel: Vector3::new(f[1], f[2], f[3]),
            gyro: Vector3::new(f[4], f[5], f[6]),
        });
    }
    Ok(out)
}
