//! Observation-domain attack injectors.
//!
//! Both attacks are pure stream transforms over persisted epoch records.
//! Position-offset spoofing maps a commanded rover displacement through the
//! exact DD geometry of each epoch, so all authentic high-frequency content
//! survives. Timestamp spoofing presents observables borrowed from a shifted
//! time as if measured now, with ephemeris corrections that move the
//! satellite (and clock) contribution back to the claimed epoch; the borrowed
//! rover motion keeps its own dithering, which no longer matches what the
//! IMU senses.


use crate::observables::{EpochMeasurement, ObservableSim, ObservablesError};
use crate::scenario::{ScenarioError, TruthState};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpoofingError {
    #[error("attack window [{start}, {end}] is outside the stream [{lo}, {hi}]")]
    WindowOutsideStream { start: f64, end: f64, lo: f64, hi: f64 },
    #[error("shifted lookup t={0} falls outside the recorded stream")]
    ShiftOutsideStream(f64),
    #[error("truth trajectory does not cover t={0}")]
    TruthOutsideRange(f64),
    #[error("ramp offset must start at zero at the attack start")]
    BadProfile,
    #[error(transparent)]
    Observables(#[from] ObservablesError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse attack spec: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Commanded rover displacement over the attack window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetProfile {
    /// Zero at the attack start, growing linearly to the terminal offset at
    /// the attack end.
    Ramp { terminal: Vector3<f64> },
    /// Constant displacement for the whole window (test oracle profile; the
    /// published interface only exposes the ramp).
    Constant { offset: Vector3<f64> },
}

/// Position-offset attack: observables are shifted to correspond to the
/// authentic position plus delta_r(t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionOffsetAttack {
    pub start_t: f64,
    pub end_t: f64,
    pub profile: OffsetProfile,
}

impl PositionOffsetAttack {
    pub fn delta_r(&self, t: f64) -> Vector3<f64> {
        if t < self.start_t || t > self.end_t {
            return Vector3::zeros();
        }
        match self.profile {
            OffsetProfile::Ramp { terminal } => {
                let span = (self.end_t - self.start_t).max(f64::MIN_POSITIVE);
                terminal * ((t - self.start_t) / span)
            }
            OffsetProfile::Constant { offset } => offset,
        }
    }
}

/// Timestamp attack: observables from t + shift presented at t. Negative
/// shifts borrow from the past.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampAttack {
    pub start_t: f64,
    pub end_t: f64,
    pub shift_s: f64,
}

/// On-disk attack description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttackSpec {
    PositionOffset { start_s: f64, end_s: f64, terminal_offset_m: [f64; 3] },
    Timestamp { start_s: f64, end_s: f64, shift_s: f64 },
}

impl AttackSpec {
    pub fn from_json(text: &str) -> Result<Self, SpoofingError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, SpoofingError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(SpoofingError::Io)?)
    }

    pub fn start_s(&self) -> f64 {
        match self {
            AttackSpec::PositionOffset { start_s, .. } | AttackSpec::Timestamp { start_s, .. } => {
                *start_s
            }
        }
    }
}

/// Non-fatal observations made while injecting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionReport {
    pub warnings: Vec<String>,
    pub dropped_epochs: usize,
}

fn window_check(
    stream: &[EpochMeasurement],
    start: f64,
    end: f64,
) -> Result<(), SpoofingError> {
    let (lo, hi) = match (stream.first(), stream.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => (f64::NAN, f64::NAN),
    };
    // The window must overlap the recorded stream.
    if !(start <= end) || stream.is_empty() || end < lo - 1e-9 || start > hi + 1e-9 {
        return Err(SpoofingError::WindowOutsideStream { start, end, lo, hi });
    }
    Ok(())
}

/// Interpolated truth state at an arbitrary time inside the series.
fn truth_at(truth: &[TruthState], t: f64) -> Result<TruthState, SpoofingError> {
    let first = truth.first().ok_or(SpoofingError::TruthOutsideRange(t))?;
    let last = truth.last().ok_or(SpoofingError::TruthOutsideRange(t))?;
    if t < first.t - 1e-9 || t > last.t + 1e-9 {
        return Err(SpoofingError::TruthOutsideRange(t));
    }
    let idx = truth.partition_point(|s| s.t < t - 1e-9);
    let hi = &truth[idx.min(truth.len() - 1)];
    if (hi.t - t).abs() < 1e-9 || idx == 0 {
        return Ok(hi.clone());
    }
    let lo = &truth[idx - 1];
    let alpha = (t - lo.t) / (hi.t - lo.t);
    Ok(TruthState {
        t,
        position: lo.position.lerp(&hi.position, alpha),
        velocity: lo.velocity.lerp(&hi.velocity, alpha),
        attitude: lo.attitude.slerp(&hi.attitude, alpha),
        angular_rate: lo.angular_rate.lerp(&hi.angular_rate, alpha),
        specific_force: lo.specific_force.lerp(&hi.specific_force, alpha),
    })
}

/// Apply a position-offset attack to an epoch stream.
///
/// Inside the window each pair's pseudorange and phase shift by the exact
/// nonlinear DD offset mapping evaluated at that epoch's geometry; outside
/// the window the stream is untouched.
pub fn apply_position_offset(
    stream: &[EpochMeasurement],
    atk: &PositionOffsetAttack,
    sim: &ObservableSim,
    truth: &[TruthState],
) -> Result<Vec<EpochMeasurement>, SpoofingError> {
    window_check(stream, atk.start_t, atk.end_t)?;
    if let OffsetProfile::Ramp { .. } = atk.profile {
        if atk.delta_r(atk.start_t).norm() > 1e-12 {
            return Err(SpoofingError::BadProfile);
        }
    }

    let mut out = Vec::with_capacity(stream.len());
    for epoch in stream {
        if epoch.t < atk.start_t || epoch.t > atk.end_t || epoch.pairs.is_empty() {
            out.push(epoch.clone());
            continue;
        }
        let delta = atk.delta_r(epoch.t);
        if delta.norm() == 0.0 {
            out.push(epoch.clone());
            continue;
        }
        let truth_state = truth_at(truth, epoch.t)?;
        let antenna = sim.antenna_pos(&truth_state);
        let geom = sim.epoch_geometry(epoch, antenna)?;
        let offsets = geom.dd_offset_mapping(epoch.t, &delta);

        let mut spoofed = epoch.clone();
        for pair in &mut spoofed.pairs {
            let off = offsets
                .iter()
                .find(|o| o.sat_id == pair.sat_id)
                .expect("offset computed for every pair");
            pair.dd_pseudorange_m += off.d_rho_m;
            pair.dd_phase_m += off.d_phi_m;
        }
        out.push(spoofed);
    }
    Ok(out)
}

/// Apply a timestamp attack to an epoch stream.
///
/// For each epoch in the window the injector takes the nearest recorded
/// epoch to t + shift as the carrier of noise and integer ambiguities, then
/// replaces its geometric content with the DD range computed from satellites
/// (and clocks) at t and the rover's true antenna position at t + shift.
/// Satellites that are not visible at the claimed time are dropped; an empty
/// intersection drops the epoch.
pub fn apply_timestamp_shift(
    stream: &[EpochMeasurement],
    atk: &TimestampAttack,
    sim: &ObservableSim,
    truth: &[TruthState],
) -> Result<(Vec<EpochMeasurement>, InjectionReport), SpoofingError> {
    window_check(stream, atk.start_t, atk.end_t)?;
    let mut report = InjectionReport::default();
    let epoch_period = 1.0 / crate::scenario::EPOCH_RATE_HZ;

    let lo = stream.first().expect("nonempty").t;
    let hi = stream.last().expect("nonempty").t;

    let mut out = Vec::with_capacity(stream.len());
    for epoch in stream {
        if epoch.t < atk.start_t || epoch.t > atk.end_t {
            out.push(epoch.clone());
            continue;
        }
        let borrowed_t = epoch.t + atk.shift_s;
        if borrowed_t < lo - 1e-9 || borrowed_t > hi + 1e-9 {
            return Err(SpoofingError::ShiftOutsideStream(borrowed_t));
        }

        // Nearest recorded epoch to the borrowed time.
        let idx = stream.partition_point(|e| e.t < borrowed_t);
        let carrier = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter_map(|i| stream.get(i))
            .min_by(|a, b| {
                let da = (a.t - borrowed_t).abs();
                let db = (b.t - borrowed_t).abs();
                da.partial_cmp(&db).expect("finite times")
            })
            .expect("nonempty stream");
        if (carrier.t - borrowed_t).abs() > epoch_period / 2.0 + 1e-9 {
            report.warnings.push(format!(
                "epoch {:.3}: borrowed epoch at {:.3} missing, substituting nearest {:.3}",
                epoch.t, borrowed_t, carrier.t
            ));
        }
        if carrier.pairs.is_empty() {
            report.dropped_epochs += 1;
            report
                .warnings
                .push(format!("epoch {:.3}: borrowed epoch is empty, dropping", epoch.t));
            out.push(EpochMeasurement {
                t: epoch.t,
                env: epoch.env,
                pivot: 0,
                pairs: Vec::new(),
            });
            continue;
        }

        // Satellite set presented at t: borrowed pairs that are visible now.
        let rover_now = sim.antenna_pos(&truth_at(truth, epoch.t)?);
        let visible_now = sim.constellation.visible_sats(epoch.t, &rover_now);
        let usable: Vec<_> = carrier
            .pairs
            .iter()
            .filter(|p| visible_now.contains(&p.sat_id))
            .cloned()
            .collect();
        if usable.is_empty() || !visible_now.contains(&carrier.pivot) {
            report.dropped_epochs += 1;
            report.warnings.push(format!(
                "epoch {:.3}: no borrowed satellites visible at the claimed time",
                epoch.t
            ));
            out.push(EpochMeasurement {
                t: epoch.t,
                env: epoch.env,
                pivot: 0,
                pairs: Vec::new(),
            });
            continue;
        }

        // Geometry corrections: satellites at t with the rover where it truly
        // was at t + shift, minus the carrier's own modeled content.
        let rover_borrowed = sim.antenna_pos(&truth_at(truth, borrowed_t)?);
        let sat_ids: Vec<_> = usable.iter().map(|p| p.sat_id).collect();
        let geom_now = sim.constellation.dd_geometry_with_pivot(
            rover_borrowed,
            sim.base_pos,
            carrier.pivot,
            &sat_ids,
        )?;
        let geom_carrier = sim.constellation.dd_geometry_with_pivot(
            sim.antenna_pos(&truth_at(truth, carrier.t)?),
            sim.base_pos,
            carrier.pivot,
            &sat_ids,
        )?;

        let mut pairs = Vec::with_capacity(usable.len());
        for pair in &usable {
            let retimed = geom_now.dd_range(pair.sat_id, epoch.t)?;
            let original = geom_carrier.dd_range(pair.sat_id, carrier.t)?;
            let correction = retimed - original;
            pairs.push(crate::observables::DdPair {
                sat_id: pair.sat_id,
                dd_pseudorange_m: pair.dd_pseudorange_m + correction,
                dd_phase_m: pair.dd_phase_m + correction,
                wavelength_m: pair.wavelength_m,
            });
        }
        out.push(EpochMeasurement {
            t: epoch.t,
            env: epoch.env,
            pivot: carrier.pivot,
            pairs,
        });
    }
    Ok((out, report))
}

/// Apply a parsed attack spec.
pub fn apply_attack(
    stream: &[EpochMeasurement],
    spec: &AttackSpec,
    sim: &ObservableSim,
    truth: &[TruthState],
) -> Result<(Vec<EpochMeasurement>, InjectionReport), SpoofingError> {
    match *spec {
        AttackSpec::PositionOffset { start_s, end_s, terminal_offset_m } => {
            let atk = PositionOffsetAttack {
                start_t: start_s,
                end_t: end_s,
                profile: OffsetProfile::Ramp {
                    terminal: Vector3::from_column_slice(&terminal_offset_m),
                },
            };
            Ok((apply_position_offset(stream, &atk, sim, truth)?, InjectionReport::default()))
        }
        AttackSpec::Timestamp { start_s, end_s, shift_s } => {
            let atk = TimestampAttack { start_t: start_s, end_t: end_s, shift_s };
            apply_timestamp_shift(stream, &atk, sim, truth)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Constellation;
    use crate::observables::{AmbiguityLedger, Environment, NoiseModel};
    use crate::scenario::{generate_trajectory, ImuGrade, ScenarioConfig, Seeds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scenario(duration: f64, stop_until: f64, accel: f64) -> ScenarioConfig {
        ScenarioConfig {
            duration_s: duration,
            stop_until_s: stop_until,
            accel_mps2: accel,
            cruise_speed_mps: None,
            dither: Default::default(),
            imu_grade: ImuGrade::Industrial,
            seeds: Seeds::default(),
            start_pos_m: [0.0; 3],
            base_pos_m: [220.0, -160.0, 4.0],
            lever_arm_m: [0.5, 0.0, -1.2],
        }
    }

    fn make_stream(
        cfg: &ScenarioConfig,
        c: &Constellation,
        model: &NoiseModel,
        seed: u64,
    ) -> (Vec<TruthState>, Vec<EpochMeasurement>) {
        let truth = generate_trajectory(cfg, seed).unwrap();
        let sim = ObservableSim::new(c, cfg.base_pos(), cfg.lever_arm());
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed + 1);
        let mut epochs = Vec::new();
        for s in truth.iter().step_by(20).skip(1) {
            let (e, _) = sim
                .synthesize_epoch_with_model(s, &mut ledger, Environment::ShallowUrban, model, &mut rng)
                .unwrap();
            epochs.push(e);
        }
        (truth, epochs)
    }

    #[test]
    fn zero_offset_is_the_identity() {
        let cfg = scenario(10.0, 2.0, 1.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &Environment::ShallowUrban.noise_model(), 5);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let atk = PositionOffsetAttack {
            start_t: 2.0,
            end_t: 8.0,
            profile: OffsetProfile::Ramp { terminal: Vector3::zeros() },
        };
        let spoofed = apply_position_offset(&stream, &atk, &sim, &truth).unwrap();
        assert_eq!(stream, spoofed);
    }

    #[test]
    fn constant_offset_matches_independent_mapping() {
        let cfg = scenario(10.0, 2.0, 1.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &Environment::ShallowUrban.noise_model(), 6);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let delta = Vector3::new(1.0, 0.0, 0.0);
        let atk = PositionOffsetAttack {
            start_t: 0.0,
            end_t: 10.0,
            profile: OffsetProfile::Constant { offset: delta },
        };
        let spoofed = apply_position_offset(&stream, &atk, &sim, &truth).unwrap();
        for (before, after) in stream.iter().zip(&spoofed) {
            let ts = truth.iter().find(|s| (s.t - before.t).abs() < 1e-9).unwrap();
            let geom = sim.epoch_geometry(before, sim.antenna_pos(ts)).unwrap();
            let offsets = geom.dd_offset_mapping(before.t, &delta);
            for (bp, ap) in before.pairs.iter().zip(&after.pairs) {
                let off = offsets.iter().find(|o| o.sat_id == bp.sat_id).unwrap();
                assert!((ap.dd_pseudorange_m - bp.dd_pseudorange_m - off.d_rho_m).abs() < 1e-12);
                assert!((ap.dd_phase_m - bp.dd_phase_m - off.d_phi_m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_is_zero_at_start_and_full_at_end() {
        let atk = PositionOffsetAttack {
            start_t: 10.0,
            end_t: 20.0,
            profile: OffsetProfile::Ramp { terminal: Vector3::new(4.0, 0.0, 0.0) },
        };
        assert_eq!(atk.delta_r(10.0), Vector3::zeros());
        assert_eq!(atk.delta_r(15.0), Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(atk.delta_r(20.0), Vector3::new(4.0, 0.0, 0.0));
        assert_eq!(atk.delta_r(25.0), Vector3::zeros());
    }

    #[test]
    fn window_outside_stream_is_rejected() {
        let cfg = scenario(4.0, 4.0, 0.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &NoiseModel::noiseless(), 7);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let atk = PositionOffsetAttack {
            start_t: 50.0,
            end_t: 60.0,
            profile: OffsetProfile::Ramp { terminal: Vector3::new(1.0, 0.0, 0.0) },
        };
        assert!(matches!(
            apply_position_offset(&stream, &atk, &sim, &truth),
            Err(SpoofingError::WindowOutsideStream { .. })
        ));
    }

    #[test]
    fn zero_shift_is_the_identity() {
        let cfg = scenario(10.0, 2.0, 1.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &Environment::ShallowUrban.noise_model(), 8);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let atk = TimestampAttack { start_t: 2.0, end_t: 8.0, shift_s: 0.0 };
        let (spoofed, report) = apply_timestamp_shift(&stream, &atk, &sim, &truth).unwrap();
        assert_eq!(report.dropped_epochs, 0);
        for (a, b) in stream.iter().zip(&spoofed) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.pivot, b.pivot);
            for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                assert!((pa.dd_pseudorange_m - pb.dd_pseudorange_m).abs() < 1e-9);
                assert!((pa.dd_phase_m - pb.dd_phase_m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn static_receiver_corrections_cancel_satellite_motion() {
        // Parked vehicle, no noise: the borrowed observables differ from the
        // authentic ones only through satellite motion over the shift, which
        // the corrections remove exactly.
        let cfg = scenario(30.0, 30.0, 0.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &NoiseModel::noiseless(), 9);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        for shift in [-0.2, -1.0, 1.0] {
            let atk = TimestampAttack { start_t: 5.0, end_t: 25.0, shift_s: shift };
            let (spoofed, _) = apply_timestamp_shift(&stream, &atk, &sim, &truth).unwrap();
            for (a, b) in stream.iter().zip(&spoofed) {
                assert_eq!(a.pairs.len(), b.pairs.len(), "t={}", a.t);
                for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                    assert!(
                        (pa.dd_pseudorange_m - pb.dd_pseudorange_m).abs() < 1e-6,
                        "t={} sat={} diff={}",
                        a.t,
                        pa.sat_id,
                        pa.dd_pseudorange_m - pb.dd_pseudorange_m
                    );
                    assert!((pa.dd_phase_m - pb.dd_phase_m).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sub_epoch_shift_injects_borrowed_rover_motion() {
        // Moving vehicle: the spoofed geometry at the claimed time must match
        // the rover position from the shifted time, not the current one.
        let cfg = scenario(20.0, 2.0, 1.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &NoiseModel::noiseless(), 10);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let shift = -0.05;
        let atk = TimestampAttack { start_t: 5.0, end_t: 18.0, shift_s: shift };
        let (spoofed, report) = apply_timestamp_shift(&stream, &atk, &sim, &truth).unwrap();
        assert_eq!(report.dropped_epochs, 0);

        for e in spoofed.iter().filter(|e| e.t >= 6.0 && e.t <= 18.0) {
            let rover_then = sim.antenna_pos(&truth_at(&truth, e.t + shift).unwrap());
            let geom = sim.epoch_geometry(e, rover_then).unwrap();
            for p in &e.pairs {
                let expect = geom.dd_range(p.sat_id, e.t).unwrap();
                assert!(
                    (p.dd_pseudorange_m - expect).abs() < 1e-6,
                    "t={} sat={} diff={}",
                    e.t,
                    p.sat_id,
                    p.dd_pseudorange_m - expect
                );
            }
        }
    }

    #[test]
    fn shift_outside_stream_is_rejected() {
        let cfg = scenario(4.0, 4.0, 0.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &NoiseModel::noiseless(), 11);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let atk = TimestampAttack { start_t: 0.2, end_t: 4.0, shift_s: -2.0 };
        assert!(matches!(
            apply_timestamp_shift(&stream, &atk, &sim, &truth),
            Err(SpoofingError::ShiftOutsideStream(_))
        ));
    }

    #[test]
    fn attack_spec_json_round_trip() {
        let spec = AttackSpec::Timestamp { start_s: 163.0, end_s: 175.0, shift_s: -0.05 };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(AttackSpec::from_json(&text).unwrap(), spec);

        let text = r#"{"type":"position_offset","start_s":10.0,"end_s":20.0,"terminal_offset_m":[5.0,0.0,0.0]}"#;
        let parsed = AttackSpec::from_json(text).unwrap();
        assert_eq!(
            parsed,
            AttackSpec::PositionOffset {
                start_s: 10.0,
                end_s: 20.0,
                terminal_offset_m: [5.0, 0.0, 0.0]
            }
        );
    }

    #[test]
    fn injectors_leave_epochs_outside_the_window_untouched() {
        let cfg = scenario(20.0, 2.0, 1.0);
        let c = Constellation::gps_like();
        let (truth, stream) = make_stream(&cfg, &c, &Environment::ShallowUrban.noise_model(), 12);
        let sim = ObservableSim::new(&c, cfg.base_pos(), cfg.lever_arm());
        let atk = TimestampAttack { start_t: 8.0, end_t: 12.0, shift_s: -0.1 };
        let (spoofed, _) = apply_timestamp_shift(&stream, &atk, &sim, &truth).unwrap();
        for (a, b) in stream.iter().zip(&spoofed) {
            if a.t < 8.0 || a.t > 12.0 {
                assert_eq!(a, b);
            }
        }
    }
}
