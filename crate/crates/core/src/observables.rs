//! Double-difference observable synthesis and measurement linearization.
//!
//! Observables follow the short-baseline model: atmospheric, ephemeris and
//! clock errors cancel in the double difference, leaving geometry, integer
//! carrier ambiguities, and an environment-dependent noise mixture (nominal
//! Gaussian noise, occasional inflated-variance outliers, and epoch-level
//! satellite blockage). Streams persist as JSON lines so attack injectors can
//! rewrite them without touching the simulator.

use crate::estimator::NavState;
use crate::geometry::{Constellation, DdGeometry, GeometryError, SatId, L1_WAVELENGTH};
use crate::scenario::TruthState;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObservablesError {
    #[error("epoch time {0} is not on the epoch grid")]
    OffGrid(f64),
    #[error("epoch has no measurement pairs")]
    EmptyEpoch,
    #[error("degenerate geometry: line-of-sight differences carry no position information")]
    DegenerateGeometry,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed epoch record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Multipath environment class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    OpenSky,
    ShallowUrban,
    DeepUrban,
}

impl Environment {
    /// Per-environment observation noise mixture. Outlier probability is per
    /// epoch (one pair inflated when it fires); blockage probability is the
    /// per-epoch chance of dropping satellites.
    pub fn noise_model(self) -> NoiseModel {
        match self {
            Environment::OpenSky => NoiseModel {
                sigma_rho_m: 1.0,
                sigma_phi_m: 0.005,
                outlier_prob: 0.001,
                outlier_factor: 3.0,
                blockage_prob: 0.0,
            },
            Environment::ShallowUrban => NoiseModel {
                sigma_rho_m: 1.0,
                sigma_phi_m: 0.005,
                outlier_prob: 0.02,
                outlier_factor: 5.0,
                blockage_prob: 0.05,
            },
            Environment::DeepUrban => NoiseModel {
                sigma_rho_m: 1.0,
                sigma_phi_m: 0.005,
                outlier_prob: 0.10,
                outlier_factor: 10.0,
                blockage_prob: 0.20,
            },
        }
    }
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Environment::OpenSky => "open_sky",
            Environment::ShallowUrban => "shallow_urban",
            Environment::DeepUrban => "deep_urban",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_rho_m: f64,
    pub sigma_phi_m: f64,
    pub outlier_prob: f64,
    pub outlier_factor: f64,
    pub blockage_prob: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            sigma_rho_m: 0.0,
            sigma_phi_m: 0.0,
            outlier_prob: 0.0,
            outlier_factor: 1.0,
            blockage_prob: 0.0,
        }
    }
}

/// One DD pair of an epoch. `rho`/`phi` are the DD pseudorange and carrier
/// phase, both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdPair {
    #[serde(rename = "sat")]
    pub sat_id: SatId,
    #[serde(rename = "rho")]
    pub dd_pseudorange_m: f64,
    #[serde(rename = "phi")]
    pub dd_phase_m: f64,
    #[serde(rename = "lambda")]
    pub wavelength_m: f64,
}

/// One GNSS measurement epoch. The pivot satellite is part of the record:
/// DD observables are undefined without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMeasurement {
    pub t: f64,
    pub env: Environment,
    pub pivot: SatId,
    pub pairs: Vec<DdPair>,
}

impl EpochMeasurement {
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn sat_ids(&self) -> Vec<SatId> {
        self.pairs.iter().map(|p| p.sat_id).collect()
    }
}

/// Per-satellite integer carrier ambiguities in cycles. Entries persist until
/// a blockage reset removes them; the DD ambiguity of a pair is the entry of
/// its satellite minus the pivot entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AmbiguityLedger {
    entries: BTreeMap<SatId, LedgerEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub cycles: i64,
    pub valid_from: f64,
}

impl AmbiguityLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ledger with zero-cycle entries for the given satellites.
    pub fn with_zeros(sats: &[SatId]) -> Self {
        let mut ledger = Self::new();
        for &s in sats {
            ledger.insert(s, 0, 0.0);
        }
        ledger
    }

    pub fn insert(&mut self, sat: SatId, cycles: i64, valid_from: f64) {
        self.entries.insert(sat, LedgerEntry { cycles, valid_from });
    }

    pub fn get(&self, sat: SatId) -> Option<i64> {
        self.entries.get(&sat).map(|e| e.cycles)
    }

    pub fn reset(&mut self, sat: SatId) {
        self.entries.remove(&sat);
    }

    fn ensure(&mut self, sat: SatId, t: f64, rng: &mut ChaCha12Rng) -> i64 {
        self.entries
            .entry(sat)
            .or_insert_with(|| LedgerEntry { cycles: rng.gen_range(-50..=50), valid_from: t })
            .cycles
    }
}

/// What the synthesizer did besides producing measurements; useful for
/// logging and for frequency-count tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisNote {
    pub outlier_sat: Option<SatId>,
    pub blocked_sats: Vec<SatId>,
}

/// Observable synthesizer bound to a constellation and receiver layout.
#[derive(Debug, Clone)]
pub struct ObservableSim<'a> {
    pub constellation: &'a Constellation,
    pub base_pos: Vector3<f64>,
    /// IMU-to-antenna lever arm, body frame.
    pub lever_arm: Vector3<f64>,
    pub wavelength_m: f64,
}

impl<'a> ObservableSim<'a> {
    pub fn new(constellation: &'a Constellation, base_pos: Vector3<f64>, lever_arm: Vector3<f64>) -> Self {
        ObservableSim { constellation, base_pos, lever_arm, wavelength_m: L1_WAVELENGTH }
    }

    /// Antenna position for a truth state (lever arm through the attitude).
    pub fn antenna_pos(&self, truth: &TruthState) -> Vector3<f64> {
        truth.position + truth.attitude * self.lever_arm
    }

    /// Synthesize one epoch with the environment's stock noise model.
    pub fn synthesize_epoch(
        &self,
        truth: &TruthState,
        ledger: &mut AmbiguityLedger,
        env: Environment,
        rng: &mut ChaCha12Rng,
    ) -> Result<(EpochMeasurement, SynthesisNote), ObservablesError> {
        self.synthesize_epoch_with_model(truth, ledger, env, &env.noise_model(), rng)
    }

    /// Synthesize one epoch with an explicit noise model (tests and oracles).
    pub fn synthesize_epoch_with_model(
        &self,
        truth: &TruthState,
        ledger: &mut AmbiguityLedger,
        env: Environment,
        model: &NoiseModel,
        rng: &mut ChaCha12Rng,
    ) -> Result<(EpochMeasurement, SynthesisNote), ObservablesError> {
        if !is_on_epoch_grid(truth.t) {
            return Err(ObservablesError::OffGrid(truth.t));
        }
        let antenna = self.antenna_pos(truth);
        let mut visible = self.constellation.visible_sats(truth.t, &antenna);
        let mut note = SynthesisNote::default();

        // Epoch-level blockage: drop one or two satellites and reset their
        // ambiguities so they re-enter with fresh integers.
        if model.blockage_prob > 0.0 && rng.gen_range(0.0..1.0) < model.blockage_prob {
            let n_drop = rng.gen_range(1..=2usize).min(visible.len());
            for _ in 0..n_drop {
                if visible.is_empty() {
                    break;
                }
                let idx = rng.gen_range(0..visible.len());
                let sat = visible.remove(idx);
                ledger.reset(sat);
                note.blocked_sats.push(sat);
            }
        }

        if visible.len() < 2 {
            return Ok((
                EpochMeasurement { t: truth.t, env, pivot: 0, pairs: Vec::new() },
                note,
            ));
        }

        let geom = self
            .constellation
            .dd_geometry_for(truth.t, antenna, self.base_pos, &visible)?;
        let pivot = geom.pivot_sat();
        let n_pivot = ledger.ensure(pivot, truth.t, rng);

        // Shared-pivot noise: per-satellite draws differenced against the
        // pivot draw give exactly the 0.5-correlated DD covariance.
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let sqrt_half = 0.5f64.sqrt();
        let u_rho_pivot = normal.sample(rng) * model.sigma_rho_m * sqrt_half;
        let u_phi_pivot = normal.sample(rng) * model.sigma_phi_m * sqrt_half;

        let mut pairs = Vec::with_capacity(geom.num_pairs());
        for sat in geom.other_sats().collect::<Vec<_>>() {
            let dd = geom.dd_range(sat, truth.t)?;
            let n_i = ledger.ensure(sat, truth.t, rng);
            let u_rho = normal.sample(rng) * model.sigma_rho_m * sqrt_half;
            let u_phi = normal.sample(rng) * model.sigma_phi_m * sqrt_half;
            pairs.push(DdPair {
                sat_id: sat,
                dd_pseudorange_m: dd + (u_rho - u_rho_pivot),
                dd_phase_m: dd
                    + self.wavelength_m * (n_i - n_pivot) as f64
                    + (u_phi - u_phi_pivot),
                wavelength_m: self.wavelength_m,
            });
        }

        // Inflated-variance outlier: one pair per affected epoch, its noise
        // variance multiplied by the environment factor.
        if model.outlier_prob > 0.0 && rng.gen_range(0.0..1.0) < model.outlier_prob && !pairs.is_empty()
        {
            let idx = rng.gen_range(0..pairs.len());
            let extra = (model.outlier_factor - 1.0).max(0.0).sqrt();
            pairs[idx].dd_pseudorange_m += normal.sample(rng) * model.sigma_rho_m * extra;
            pairs[idx].dd_phase_m += normal.sample(rng) * model.sigma_phi_m * extra;
            note.outlier_sat = Some(pairs[idx].sat_id);
        }

        Ok((EpochMeasurement { t: truth.t, env, pivot, pairs }, note))
    }

    /// Reconstruct the DD geometry an epoch record implies, with the rover at
    /// `antenna` (truth or prior estimate).
    pub fn epoch_geometry(
        &self,
        epoch: &EpochMeasurement,
        antenna: Vector3<f64>,
    ) -> Result<DdGeometry, ObservablesError> {
        Ok(self.constellation.dd_geometry_with_pivot(
            antenna,
            self.base_pos,
            epoch.pivot,
            &epoch.sat_ids(),
        )?)
    }
}

pub fn is_on_epoch_grid(t: f64) -> bool {
    let k = t * crate::scenario::EPOCH_RATE_HZ;
    (k - k.round()).abs() < 1e-6
}

/// Innovations model linearized about the a-priori state: `nu`, the Jacobians
/// against the 15-dim error state and the integer ambiguities, and the
/// measurement covariance. Rows are pseudoranges then phases.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMeasurement {
    pub t: f64,
    pub nu: DVector<f64>,
    pub h_r: DMatrix<f64>,
    pub h_n: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Linearize an epoch about the prior state.
///
/// The modeled value excludes the ambiguity term, so the phase block of
/// `h_n` (wavelength times identity) explains the integer offset. DD
/// covariance carries the 0.5 off-diagonal correlation from the shared pivot.
pub fn linearize(
    epoch: &EpochMeasurement,
    prior: &NavState,
    sim: &ObservableSim,
) -> Result<LinearizedMeasurement, ObservablesError> {
    let n = epoch.num_pairs();
    if n == 0 {
        return Err(ObservablesError::EmptyEpoch);
    }
    let rot = prior.attitude.to_rotation_matrix().into_inner();
    let antenna = prior.position + rot * sim.lever_arm;
    let geom = sim.epoch_geometry(epoch, antenna)?;
    let (u_pivot, u_others) = geom.unit_los(epoch.t);

    let mut nu = DVector::zeros(2 * n);
    let mut h_r = DMatrix::zeros(2 * n, crate::estimator::STATE_DIM);
    let mut h_n = DMatrix::zeros(2 * n, n);
    let lever_nav = rot * sim.lever_arm;
    let att_map = -skew(&lever_nav);

    let mut max_row_norm = 0.0f64;
    for (i, pair) in epoch.pairs.iter().enumerate() {
        let modeled = geom.dd_range(pair.sat_id, epoch.t)?;
        nu[i] = pair.dd_pseudorange_m - modeled;
        nu[n + i] = pair.dd_phase_m - modeled;

        let row_pos = u_pivot - u_others[i];
        max_row_norm = max_row_norm.max(row_pos.norm());
        let row_att = att_map.transpose() * row_pos;
        for c in 0..3 {
            h_r[(i, c)] = row_pos[c];
            h_r[(n + i, c)] = row_pos[c];
            h_r[(i, 6 + c)] = row_att[c];
            h_r[(n + i, 6 + c)] = row_att[c];
        }
        h_n[(n + i, i)] = pair.wavelength_m;
    }
    if max_row_norm < 1e-9 {
        return Err(ObservablesError::DegenerateGeometry);
    }

    let model = epoch.env.noise_model();
    let mut sigma = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let c = if i == j { 1.0 } else { 0.5 };
            sigma[(i, j)] = c * model.sigma_rho_m * model.sigma_rho_m;
            sigma[(n + i, n + j)] = c * model.sigma_phi_m * model.sigma_phi_m;
        }
    }

    Ok(LinearizedMeasurement { t: epoch.t, nu, h_r, h_n, sigma })
}

/// Write epochs as JSON lines.
pub fn write_epochs_jsonl<W: Write>(mut w: W, epochs: &[EpochMeasurement]) -> Result<(), ObservablesError> {
    for e in epochs {
        let line = serde_json::to_string(e)
            .map_err(|err| ObservablesError::Malformed { line: 0, reason: err.to_string() })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_epochs_jsonl<R: BufRead>(r: R) -> Result<Vec<EpochMeasurement>, ObservablesError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EpochMeasurement = serde_json::from_str(&line)
            .map_err(|err| ObservablesError::Malformed { line: idx + 1, reason: err.to_string() })?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::NavState;
    use crate::scenario::{generate_trajectory, ImuGrade, ScenarioConfig};
    use rand::SeedableRng;

    fn sim_fixture(c: &Constellation) -> ObservableSim<'_> {
        ObservableSim::new(c, Vector3::new(220.0, -160.0, 4.0), Vector3::new(0.5, 0.0, -1.2))
    }

    fn truth_at_rest(t: f64) -> TruthState {
        TruthState {
            t,
            position: Vector3::new(3.0, -2.0, 0.0),
            velocity: Vector3::zeros(),
            attitude: crate::scenario::level_attitude_facing_east(),
            angular_rate: Vector3::zeros(),
            specific_force: Vector3::new(0.0, 0.0, -crate::scenario::GRAVITY),
        }
    }

    #[test]
    fn noiseless_zero_ledger_collapses_to_geometry() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let truth = truth_at_rest(10.0);
        let mut ledger = AmbiguityLedger::with_zeros(&c.visible_sats(10.0, &truth.position));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (epoch, _) = sim
            .synthesize_epoch_with_model(
                &truth,
                &mut ledger,
                Environment::OpenSky,
                &NoiseModel::noiseless(),
                &mut rng,
            )
            .unwrap();
        let geom = sim.epoch_geometry(&epoch, sim.antenna_pos(&truth)).unwrap();
        for p in &epoch.pairs {
            let dd = geom.dd_range(p.sat_id, epoch.t).unwrap();
            assert!((p.dd_pseudorange_m - dd).abs() < 1e-9);
            assert!((p.dd_phase_m - dd).abs() < 1e-9);
        }
    }

    #[test]
    fn five_cycles_offset_the_phase_by_hand_checked_amount() {
        let c = Constellation::gps_like();
        let mut sim = sim_fixture(&c);
        sim.wavelength_m = 0.1903;
        let truth = truth_at_rest(10.0);
        let visible = c.visible_sats(10.0, &truth.position);
        let mut ledger = AmbiguityLedger::with_zeros(&visible);
        let target = visible[1];
        ledger.insert(target, 5, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (epoch, _) = sim
            .synthesize_epoch_with_model(
                &truth,
                &mut ledger,
                Environment::OpenSky,
                &NoiseModel::noiseless(),
                &mut rng,
            )
            .unwrap();
        // If `target` ended up as the pivot every other pair is shifted;
        // the fixture's geometry keeps it as a regular pair.
        assert_ne!(epoch.pivot, target);
        let pair = epoch.pairs.iter().find(|p| p.sat_id == target).unwrap();
        assert!((pair.dd_phase_m - pair.dd_pseudorange_m - 0.9515).abs() < 1e-12);
    }

    #[test]
    fn phase_minus_pseudorange_is_integer_cycles_without_noise() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for k in 0..20 {
            let truth = truth_at_rest(k as f64 * 0.2);
            let (epoch, _) = sim
                .synthesize_epoch_with_model(
                    &truth,
                    &mut ledger,
                    Environment::OpenSky,
                    &NoiseModel::noiseless(),
                    &mut rng,
                )
                .unwrap();
            for p in &epoch.pairs {
                let cycles = (p.dd_phase_m - p.dd_pseudorange_m) / p.wavelength_m;
                assert!((cycles - cycles.round()).abs() < 1e-9, "cycles {cycles}");
            }
        }
    }

    #[test]
    fn deep_urban_outlier_rate_matches_configuration() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n_epochs = 3000;
        let mut hits = 0;
        for k in 0..n_epochs {
            let truth = truth_at_rest(k as f64 * 0.2);
            let (_, note) = sim
                .synthesize_epoch(&truth, &mut ledger, Environment::DeepUrban, &mut rng)
                .unwrap();
            if note.outlier_sat.is_some() {
                hits += 1;
            }
        }
        let p = Environment::DeepUrban.noise_model().outlier_prob;
        let expect = n_epochs as f64 * p;
        let tol = 3.0 * (n_epochs as f64 * p * (1.0 - p)).sqrt();
        assert!(
            ((hits as f64) - expect).abs() < tol,
            "outlier epochs {hits} vs {expect} +/- {tol}"
        );
    }

    #[test]
    fn blockage_resets_ledger_entries() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut saw_reset = false;
        let mut previous: BTreeMap<SatId, i64> = BTreeMap::new();
        for k in 0..400 {
            let truth = truth_at_rest(k as f64 * 0.2);
            let (epoch, note) = sim
                .synthesize_epoch(&truth, &mut ledger, Environment::DeepUrban, &mut rng)
                .unwrap();
            for sat in &note.blocked_sats {
                assert!(ledger.get(*sat).is_none() || epoch.sat_ids().contains(sat));
            }
            for p in &epoch.pairs {
                if let Some(old) = previous.get(&p.sat_id) {
                    if ledger.get(p.sat_id) != Some(*old) {
                        saw_reset = true;
                    }
                }
                previous.insert(p.sat_id, ledger.get(p.sat_id).unwrap());
            }
        }
        assert!(saw_reset, "deep urban run never re-drew an ambiguity");
    }

    #[test]
    fn linearize_at_truth_with_clean_data_gives_zero_innovations() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let truth = truth_at_rest(10.0);
        let mut ledger = AmbiguityLedger::with_zeros(&c.visible_sats(10.0, &truth.position));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (epoch, _) = sim
            .synthesize_epoch_with_model(
                &truth,
                &mut ledger,
                Environment::OpenSky,
                &NoiseModel::noiseless(),
                &mut rng,
            )
            .unwrap();
        let prior = NavState::at_truth(&truth, ImuGrade::Industrial.model());
        let lin = linearize(&epoch, &prior, &sim).unwrap();
        assert!(lin.nu.amax() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let truth = truth_at_rest(10.0);
        let mut ledger = AmbiguityLedger::with_zeros(&c.visible_sats(10.0, &truth.position));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (epoch, _) = sim
            .synthesize_epoch_with_model(
                &truth,
                &mut ledger,
                Environment::OpenSky,
                &NoiseModel::noiseless(),
                &mut rng,
            )
            .unwrap();
        let prior = NavState::at_truth(&truth, ImuGrade::Industrial.model());
        let lin = linearize(&epoch, &prior, &sim).unwrap();

        // A positive position error delta means the truth sits at
        // prior.position + delta, so nu changes by roughly H_r * delta.
        let delta = 1.0e-3;
        for axis in 0..3 {
            let mut shifted = prior.clone();
            let mut d = Vector3::zeros();
            d[axis] = -delta;
            shifted.position += d;
            let lin_shifted = linearize(&epoch, &shifted, &sim).unwrap();
            for row in 0..lin.nu.len() {
                let fd = (lin_shifted.nu[row] - lin.nu[row]) / delta;
                assert!(
                    (fd - lin.h_r[(row, axis)]).abs() < 1e-3,
                    "row {row} axis {axis}: fd {fd} vs {}",
                    lin.h_r[(row, axis)]
                );
            }
        }
    }

    #[test]
    fn h_n_has_wavelength_on_phase_rows_only() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let truth = truth_at_rest(10.0);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (epoch, _) = sim
            .synthesize_epoch(&truth, &mut ledger, Environment::OpenSky, &mut rng)
            .unwrap();
        let prior = NavState::at_truth(&truth, ImuGrade::Industrial.model());
        let lin = linearize(&epoch, &prior, &sim).unwrap();
        let n = epoch.num_pairs();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(lin.h_n[(i, j)], 0.0);
                let expect = if i == j { epoch.pairs[i].wavelength_m } else { 0.0 };
                assert_eq!(lin.h_n[(n + i, j)], expect);
            }
        }
    }

    #[test]
    fn innovation_consistency_against_sigma() {
        // Normalized innovation squared at the truth should average 2N.
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut ledger = AmbiguityLedger::new();
        let mut total_nis = 0.0;
        let mut total_dof = 0.0;
        for k in 0..1000 {
            let truth = truth_at_rest(k as f64 * 0.2);
            let (epoch, _) = sim
                .synthesize_epoch(&truth, &mut ledger, Environment::OpenSky, &mut rng)
                .unwrap();
            let n = epoch.num_pairs();
            let geom = sim.epoch_geometry(&epoch, sim.antenna_pos(&truth)).unwrap();
            let mut nu = DVector::zeros(2 * n);
            for (i, p) in epoch.pairs.iter().enumerate() {
                let dd = geom.dd_range(p.sat_id, epoch.t).unwrap();
                let amb = (ledger.get(p.sat_id).unwrap() - ledger.get(epoch.pivot).unwrap()) as f64;
                nu[i] = p.dd_pseudorange_m - dd;
                nu[n + i] = p.dd_phase_m - dd - p.wavelength_m * amb;
            }
            let prior = NavState::at_truth(&truth, ImuGrade::Industrial.model());
            let lin = linearize(&epoch, &prior, &sim).unwrap();
            let sigma_inv = lin.sigma.clone().try_inverse().unwrap();
            total_nis += (nu.transpose() * sigma_inv * nu)[(0, 0)];
            total_dof += 2.0 * n as f64;
        }
        let ratio = total_nis / total_dof;
        assert!((ratio - 1.0).abs() < 0.05, "NIS ratio {ratio}");
    }

    #[test]
    fn empty_epoch_is_valid_and_linearize_rejects_it() {
        let epoch = EpochMeasurement {
            t: 0.2,
            env: Environment::DeepUrban,
            pivot: 0,
            pairs: Vec::new(),
        };
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let truth = truth_at_rest(0.2);
        let prior = NavState::at_truth(&truth, ImuGrade::Industrial.model());
        assert!(matches!(
            linearize(&epoch, &prior, &sim),
            Err(ObservablesError::EmptyEpoch)
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut epochs = Vec::new();
        for k in 0..25 {
            let truth = truth_at_rest(k as f64 * 0.2);
            let (e, _) = sim
                .synthesize_epoch(&truth, &mut ledger, Environment::ShallowUrban, &mut rng)
                .unwrap();
            epochs.push(e);
        }
        let mut buf = Vec::new();
        write_epochs_jsonl(&mut buf, &epochs).unwrap();
        let back = read_epochs_jsonl(buf.as_slice()).unwrap();
        assert_eq!(epochs, back);
    }

    #[test]
    fn off_grid_times_are_rejected() {
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut t = truth_at_rest(0.0);
        t.t = 0.07;
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(matches!(
            sim.synthesize_epoch(&t, &mut ledger, Environment::OpenSky, &mut rng),
            Err(ObservablesError::OffGrid(_))
        ));
    }

    #[test]
    fn moving_vehicle_epochs_follow_the_trajectory() {
        let cfg = ScenarioConfig {
            duration_s: 20.0,
            stop_until_s: 2.0,
            accel_mps2: 1.0,
            cruise_speed_mps: Some(8.0),
            dither: Default::default(),
            imu_grade: ImuGrade::Industrial,
            seeds: Default::default(),
            start_pos_m: [0.0; 3],
            base_pos_m: [220.0, -160.0, 4.0],
            lever_arm_m: [0.5, 0.0, -1.2],
        };
        let truth = generate_trajectory(&cfg, 3).unwrap();
        let c = Constellation::gps_like();
        let sim = sim_fixture(&c);
        let mut ledger = AmbiguityLedger::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        // Every 20th truth sample sits on the 5 Hz epoch grid.
        for s in truth.iter().step_by(20) {
            let (epoch, _) = sim
                .synthesize_epoch_with_model(
                    s,
                    &mut ledger,
                    Environment::OpenSky,
                    &NoiseModel::noiseless(),
                    &mut rng,
                )
                .unwrap();
            let geom = sim.epoch_geometry(&epoch, sim.antenna_pos(s)).unwrap();
            for p in &epoch.pairs {
                let dd = geom.dd_range(p.sat_id, epoch.t).unwrap();
                assert!((p.dd_pseudorange_m - dd).abs() < 1e-9);
            }
        }
    }
}
