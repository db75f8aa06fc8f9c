//! Satellite constellation, line-of-sight geometry and double-difference
//! ranging.
//!
//! Satellites fly deterministic circular orbits so that every consumer
//! (observable synthesis, attack injection, linearization) sees exactly the
//! same geometry at a given time. Receiver positions live in a local
//! East-North-Up frame anchored to a reference point on the spherical Earth;
//! satellite states are computed in an Earth-centered frame and projected
//! into ENU.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Earth gravitational parameter (m^3/s^2).
pub const MU_EARTH: f64 = 3.986_004_418e14;
/// Spherical Earth radius used by the local frame (m).
pub const EARTH_RADIUS: f64 = 6_371_000.0;
/// Elevation mask applied when selecting visible satellites (rad).
pub const ELEVATION_MASK: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// GPS L1 carrier wavelength (m), c / 1575.42 MHz.
pub const L1_WAVELENGTH: f64 = SPEED_OF_LIGHT / 1_575_420_000.0;

pub type SatId = u32;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("satellite {0} is not part of this geometry")]
    UnknownSat(SatId),
    #[error("fewer than two satellites visible at t={t:.3} s")]
    InsufficientSatellites { t: f64 },
    #[error("orbit radius {0} m is below the Earth surface")]
    OrbitBelowSurface(f64),
    #[error("failed to read constellation: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse constellation: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Circular-orbit ephemeris with a linear clock model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteEphemeris {
    pub sat_id: SatId,
    pub orbit_radius_m: f64,
    pub inclination_rad: f64,
    pub raan_rad: f64,
    /// Argument of latitude at t = 0.
    pub phase_rad: f64,
    pub clock_bias_s: f64,
    pub clock_drift_sps: f64,
}

impl SatelliteEphemeris {
    /// Satellite clock offset at time `t` (seconds).
    pub fn clock_offset_s(&self, t: f64) -> f64 {
        self.clock_bias_s + self.clock_drift_sps * t
    }
}

/// Earth-centered position and velocity of a satellite on its circular orbit.
///
/// The in-plane angle advances at the Keplerian mean motion, so the velocity
/// is the exact time derivative of the position.
pub fn satellite_position(eph: &SatelliteEphemeris, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let n = (MU_EARTH / eph.orbit_radius_m.powi(3)).sqrt();
    let theta = eph.phase_rad + n * t;
    let r = eph.orbit_radius_m;
    let in_plane = Vector3::new(r * theta.cos(), r * theta.sin(), 0.0);
    let in_plane_vel = Vector3::new(-r * n * theta.sin(), r * n * theta.cos(), 0.0);
    let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), eph.raan_rad)
        * nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), eph.inclination_rad);
    (rot * in_plane, rot * in_plane_vel)
}

/// Local East-North-Up tangent frame on the spherical Earth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnuFrame {
    pub lat_rad: f64,
    pub lon_rad: f64,
}

impl EnuFrame {
    fn origin_ecef(&self) -> Vector3<f64> {
        let (sl, cl) = self.lat_rad.sin_cos();
        let (so, co) = self.lon_rad.sin_cos();
        Vector3::new(cl * co, cl * so, sl) * EARTH_RADIUS
    }

    fn rotation_ecef_to_enu(&self) -> Matrix3<f64> {
        let (sl, cl) = self.lat_rad.sin_cos();
        let (so, co) = self.lon_rad.sin_cos();
        Matrix3::new(
            -so, co, 0.0, //
            -sl * co, -sl * so, cl, //
            cl * co, cl * so, sl,
        )
    }

    /// ECEF position/velocity into this ENU frame.
    pub fn to_enu(&self, p_ecef: &Vector3<f64>, v_ecef: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let rot = self.rotation_ecef_to_enu();
        (rot * (p_ecef - self.origin_ecef()), rot * v_ecef)
    }
}

impl Default for EnuFrame {
    /// Reference point in central Austin, TX.
    fn default() -> Self {
        EnuFrame {
            lat_rad: 30.2672_f64.to_radians(),
            lon_rad: (-97.7431_f64).to_radians(),
        }
    }
}

/// A set of satellites plus the local frame they are observed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub sats: Vec<SatelliteEphemeris>,
    #[serde(default)]
    pub frame: EnuFrame,
}

impl Constellation {
    pub fn new(sats: Vec<SatelliteEphemeris>) -> Result<Self, GeometryError> {
        for s in &sats {
            if s.orbit_radius_m <= EARTH_RADIUS {
                return Err(GeometryError::OrbitBelowSurface(s.orbit_radius_m));
            }
        }
        Ok(Constellation { sats, frame: EnuFrame::default() })
    }

    /// Ten GPS-like satellites (26 560 km circular, 55 deg inclination) with
    /// staggered planes and phases; keeps 6-7 above the 10 deg mask at the
    /// default reference point for at least 900 seconds.
    pub fn gps_like() -> Self {
        const PLANE_PHASE: [(f64, f64); 10] = [
            (-0.14, 0.0),
            (0.97, 3.25),
            (2.50, 1.34),
            (3.81, 5.70),
            (5.12, 0.77),
            (0.24, 3.14),
            (1.30, 2.80),
            (2.43, 2.09),
            (3.88, 0.52),
            (4.97, 1.21),
        ];
        let sats = PLANE_PHASE
            .iter()
            .enumerate()
            .map(|(i, &(raan, phase))| SatelliteEphemeris {
                sat_id: i as SatId + 1,
                orbit_radius_m: 26_560_000.0,
                inclination_rad: 55.0_f64.to_radians(),
                raan_rad: raan,
                phase_rad: phase,
                clock_bias_s: (i as f64 - 4.5) * 3.0e-5,
                clock_drift_sps: (i as f64 - 4.5) * 2.0e-11,
            })
            .collect();
        Constellation { sats, frame: EnuFrame::default() }
    }

    /// Load from a JSON array of ephemerides.
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let sats: Vec<SatelliteEphemeris> = serde_json::from_str(text)?;
        Constellation::new(sats)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, GeometryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn sat(&self, id: SatId) -> Result<&SatelliteEphemeris, GeometryError> {
        self.sats
            .iter()
            .find(|s| s.sat_id == id)
            .ok_or(GeometryError::UnknownSat(id))
    }

    /// ENU position/velocity of a satellite at time `t`.
    pub fn sat_enu(&self, id: SatId, t: f64) -> Result<(Vector3<f64>, Vector3<f64>), GeometryError> {
        let eph = self.sat(id)?;
        let (p, v) = satellite_position(eph, t);
        Ok(self.frame.to_enu(&p, &v))
    }

    /// Satellites above the elevation mask as seen from `receiver` (ENU).
    pub fn visible_sats(&self, t: f64, receiver: &Vector3<f64>) -> Vec<SatId> {
        let mut ids: Vec<SatId> = self
            .sats
            .iter()
            .filter(|s| {
                let (p, v) = satellite_position(s, t);
                let (p_enu, _) = self.frame.to_enu(&p, &v);
                elevation(&(p_enu - receiver)) >= ELEVATION_MASK
            })
            .map(|s| s.sat_id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Build the double-difference geometry at time `t`: pivot is the
    /// highest-elevation visible satellite, ties broken by lowest id.
    pub fn dd_geometry(
        &self,
        t: f64,
        rover_pos: Vector3<f64>,
        base_pos: Vector3<f64>,
    ) -> Result<DdGeometry, GeometryError> {
        let visible = self.visible_sats(t, &rover_pos);
        self.dd_geometry_for(t, rover_pos, base_pos, &visible)
    }

    /// Geometry with a caller-chosen pivot, for replaying an epoch whose
    /// pivot is already fixed in the record.
    pub fn dd_geometry_with_pivot(
        &self,
        rover_pos: Vector3<f64>,
        base_pos: Vector3<f64>,
        pivot_id: SatId,
        other_ids: &[SatId],
    ) -> Result<DdGeometry, GeometryError> {
        if other_ids.is_empty() {
            return Err(GeometryError::InsufficientSatellites { t: f64::NAN });
        }
        let pivot = *self.sat(pivot_id)?;
        let mut sorted = other_ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut others = Vec::with_capacity(sorted.len());
        for id in sorted {
            if id == pivot_id {
                return Err(GeometryError::UnknownSat(id));
            }
            others.push(*self.sat(id)?);
        }
        Ok(DdGeometry { pivot, others, rover_pos, base_pos, frame: self.frame })
    }

    /// Same as [`Constellation::dd_geometry`] but with an explicit satellite
    /// set (used when blockage removes satellites from an epoch).
    pub fn dd_geometry_for(
        &self,
        t: f64,
        rover_pos: Vector3<f64>,
        base_pos: Vector3<f64>,
        sat_ids: &[SatId],
    ) -> Result<DdGeometry, GeometryError> {
        if sat_ids.len() < 2 {
            return Err(GeometryError::InsufficientSatellites { t });
        }
        let mut best: Option<(f64, SatId)> = None;
        for &id in sat_ids {
            let (p, _) = self.sat_enu(id, t)?;
            let el = elevation(&(p - rover_pos));
            let better = match best {
                None => true,
                // Strictly higher wins; exact tie falls to the lower id,
                // which the ascending scan already holds.
                Some((b_el, b_id)) => el > b_el || (el == b_el && id < b_id),
            };
            if better {
                best = Some((el, id));
            }
        }
        let pivot_id = best.expect("nonempty satellite set").1;
        let pivot = *self.sat(pivot_id)?;
        let mut others: Vec<SatelliteEphemeris> = Vec::new();
        let mut sorted = sat_ids.to_vec();
        sorted.sort_unstable();
        for id in sorted {
            if id != pivot_id {
                others.push(*self.sat(id)?);
            }
        }
        Ok(DdGeometry { pivot, others, rover_pos, base_pos, frame: self.frame })
    }
}

fn elevation(los: &Vector3<f64>) -> f64 {
    (los.z / los.norm()).asin()
}

/// Double-difference offset of one satellite pair, in meters. Pseudorange and
/// carrier phase shift by the same geometric amount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdOffset {
    pub sat_id: SatId,
    pub d_rho_m: f64,
    pub d_phi_m: f64,
}

/// Snapshot of the receivers plus the satellites forming DD pairs.
///
/// Owns copies of the ephemerides so range evaluation at any time needs no
/// further lookup. All positions are ENU meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DdGeometry {
    pivot: SatelliteEphemeris,
    others: Vec<SatelliteEphemeris>,
    pub rover_pos: Vector3<f64>,
    pub base_pos: Vector3<f64>,
    frame: EnuFrame,
}

impl DdGeometry {
    pub fn pivot_sat(&self) -> SatId {
        self.pivot.sat_id
    }

    pub fn other_sats(&self) -> impl Iterator<Item = SatId> + '_ {
        self.others.iter().map(|s| s.sat_id)
    }

    pub fn num_pairs(&self) -> usize {
        self.others.len()
    }

    fn eph(&self, sat: SatId) -> Result<&SatelliteEphemeris, GeometryError> {
        if sat == self.pivot.sat_id {
            return Ok(&self.pivot);
        }
        self.others
            .iter()
            .find(|s| s.sat_id == sat)
            .ok_or(GeometryError::UnknownSat(sat))
    }

    fn sat_pos_enu(&self, eph: &SatelliteEphemeris, t: f64) -> Vector3<f64> {
        let (p, v) = satellite_position(eph, t);
        self.frame.to_enu(&p, &v).0
    }

    /// One-way range including the satellite clock term scaled by c.
    fn leg_range(&self, receiver: &Vector3<f64>, eph: &SatelliteEphemeris, t: f64) -> f64 {
        (self.sat_pos_enu(eph, t) - receiver).norm() - SPEED_OF_LIGHT * eph.clock_offset_s(t)
    }

    /// Double-difference range of `sat` against the pivot at time `t`:
    /// between-satellite difference at the rover minus the same at the base.
    /// Satellite clock terms cancel pair-wise by construction.
    pub fn dd_range(&self, sat: SatId, t: f64) -> Result<f64, GeometryError> {
        if sat == self.pivot.sat_id {
            return Err(GeometryError::UnknownSat(sat));
        }
        let eph = self.eph(sat)?;
        let rover = (self.leg_range(&self.rover_pos, eph, t), self.leg_range(&self.rover_pos, &self.pivot, t));
        let base = (self.leg_range(&self.base_pos, eph, t), self.leg_range(&self.base_pos, &self.pivot, t));
        Ok((rover.0 - rover.1) - (base.0 - base.1))
    }

    /// Unit line-of-sight vectors from the rover: pivot first, then the other
    /// satellites in id order.
    pub fn unit_los(&self, t: f64) -> (Vector3<f64>, Vec<Vector3<f64>>) {
        let u = |eph: &SatelliteEphemeris| {
            let los = self.sat_pos_enu(eph, t) - self.rover_pos;
            los / los.norm()
        };
        (u(&self.pivot), self.others.iter().map(u).collect())
    }

    /// Copy of this geometry with the rover displaced.
    pub fn with_rover(&self, rover_pos: Vector3<f64>) -> DdGeometry {
        DdGeometry { rover_pos, ..self.clone() }
    }

    /// Exact nonlinear mapping from a rover position offset to the induced
    /// per-pair DD pseudorange and carrier phase offsets (both in meters).
    pub fn dd_offset_mapping(&self, t: f64, delta_r: &Vector3<f64>) -> Vec<DdOffset> {
        let shifted = self.with_rover(self.rover_pos + delta_r);
        self.others
            .iter()
            .map(|s| {
                let d = shifted.dd_range(s.sat_id, t).expect("sat from own set")
                    - self.dd_range(s.sat_id, t).expect("sat from own set");
                DdOffset { sat_id: s.sat_id, d_rho_m: d, d_phi_m: d }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_eph() -> SatelliteEphemeris {
        SatelliteEphemeris {
            sat_id: 7,
            orbit_radius_m: 26_560_000.0,
            inclination_rad: 55.0_f64.to_radians(),
            raan_rad: 1.1,
            phase_rad: 0.3,
            clock_bias_s: 2.0e-5,
            clock_drift_sps: 1.0e-11,
        }
    }

    #[test]
    fn orbit_is_periodic() {
        let eph = test_eph();
        let n = (MU_EARTH / eph.orbit_radius_m.powi(3)).sqrt();
        let period = 2.0 * std::f64::consts::PI / n;
        let (p0, _) = satellite_position(&eph, 100.0);
        let (p1, _) = satellite_position(&eph, 100.0 + period);
        assert!((p0 - p1).norm() < 1e-6, "drift {}", (p0 - p1).norm());
    }

    #[test]
    fn equatorial_orbit_stays_planar() {
        let eph = SatelliteEphemeris { inclination_rad: 0.0, raan_rad: 0.0, ..test_eph() };
        for i in 0..50 {
            let (p, _) = satellite_position(&eph, i as f64 * 137.0);
            assert!(p.z.abs() < 1e-6);
        }
    }

    #[test]
    fn speed_matches_vis_viva_and_finite_difference() {
        let eph = test_eph();
        let (_, v) = satellite_position(&eph, 42.0);
        let vis_viva = (MU_EARTH / eph.orbit_radius_m).sqrt();
        assert!((v.norm() - vis_viva).abs() / vis_viva < 1e-6);

        // C^1 check: central difference against the analytic velocity.
        let h = 1e-3;
        let (pp, _) = satellite_position(&eph, 42.0 + h);
        let (pm, _) = satellite_position(&eph, 42.0 - h);
        let v_fd = (pp - pm) / (2.0 * h);
        assert!((v_fd - v).norm() / v.norm() < 1e-4);
    }

    #[test]
    fn dd_range_zero_baseline_is_zero() {
        let c = Constellation::gps_like();
        let pos = Vector3::new(5.0, -3.0, 1.0);
        let geom = c.dd_geometry(10.0, pos, pos).unwrap();
        for sat in geom.other_sats().collect::<Vec<_>>() {
            assert!(geom.dd_range(sat, 10.0).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn dd_range_matches_explicit_norms() {
        // Clock biases zeroed so the oracle is four plain Euclidean norms.
        let mut c = Constellation::gps_like();
        for s in &mut c.sats {
            s.clock_bias_s = 0.0;
            s.clock_drift_sps = 0.0;
        }
        let rover = Vector3::new(12.0, 7.0, 0.5);
        let base = Vector3::new(-80.0, 40.0, 2.0);
        let t = 33.0;
        let geom = c.dd_geometry(t, rover, base).unwrap();
        let pivot = geom.pivot_sat();
        let sat = geom.other_sats().next().unwrap();

        let p_i = c.sat_enu(sat, t).unwrap().0;
        let p_p = c.sat_enu(pivot, t).unwrap().0;
        let oracle = ((p_i - rover).norm() - (p_p - rover).norm())
            - ((p_i - base).norm() - (p_p - base).norm());
        assert!((geom.dd_range(sat, t).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn dd_range_common_translation_is_second_order() {
        let c = Constellation::gps_like();
        let rover = Vector3::new(0.0, 0.0, 0.0);
        let base = Vector3::new(-150.0, 90.0, 3.0);
        let t = 5.0;
        let geom = c.dd_geometry(t, rover, base).unwrap();
        let sat = geom.other_sats().next().unwrap();
        let before = geom.dd_range(sat, t).unwrap();

        let shift = Vector3::new(300.0, -200.0, 50.0);
        let moved = DdGeometry {
            rover_pos: rover + shift,
            base_pos: base + shift,
            ..geom.clone()
        };
        let after = moved.dd_range(sat, t).unwrap();

        // With satellites at ~2.6e7 m, a common translation changes the DD
        // range only through LOS curvature: bounded by the far-field term
        // |shift| * (|shift| + baseline) / r_min.
        let r_min = 2.0e7;
        let bound = 8.0 * shift.norm() * (shift.norm() + (base - rover).norm()) / r_min;
        assert!((after - before).abs() < bound, "{} vs {}", after - before, bound);
    }

    #[test]
    fn offset_mapping_zero_and_equal_channels() {
        let c = Constellation::gps_like();
        let geom = c
            .dd_geometry(60.0, Vector3::new(1.0, 2.0, 0.0), Vector3::new(-90.0, 55.0, 1.0))
            .unwrap();
        for off in geom.dd_offset_mapping(60.0, &Vector3::zeros()) {
            assert_eq!(off.d_rho_m, 0.0);
            assert_eq!(off.d_phi_m, 0.0);
        }
        let offs = geom.dd_offset_mapping(60.0, &Vector3::new(3.0, -4.0, 1.0));
        for off in &offs {
            assert_eq!(off.d_rho_m, off.d_phi_m);
        }
    }

    #[test]
    fn offset_mapping_matches_linearized_los_model() {
        let c = Constellation::gps_like();
        let t = 60.0;
        let geom = c
            .dd_geometry(t, Vector3::new(1.0, 2.0, 0.0), Vector3::new(-90.0, 55.0, 1.0))
            .unwrap();
        let (u_pivot, u_others) = geom.unit_los(t);
        let delta = Vector3::new(6.0, -5.0, 4.0); // |delta| < 10 m
        let offs = geom.dd_offset_mapping(t, &delta);
        for (off, u_i) in offs.iter().zip(&u_others) {
            let linear = -(u_i - u_pivot).dot(&delta);
            assert!(
                (off.d_rho_m - linear).abs() < 1e-3,
                "sat {}: exact {} vs linear {}",
                off.sat_id,
                off.d_rho_m,
                linear
            );
        }
    }

    #[test]
    fn offset_mapping_composes() {
        let c = Constellation::gps_like();
        let t = 12.0;
        let geom = c
            .dd_geometry(t, Vector3::new(0.0, 0.0, 0.0), Vector3::new(-90.0, 55.0, 1.0))
            .unwrap();
        let a = Vector3::new(2.0, 1.0, -0.5);
        let b = Vector3::new(-1.0, 3.0, 0.7);
        let whole = geom.dd_offset_mapping(t, &(a + b));
        let first = geom.dd_offset_mapping(t, &a);
        let shifted = geom.with_rover(geom.rover_pos + a);
        let second = shifted.dd_offset_mapping(t, &b);
        for ((w, f), s) in whole.iter().zip(&first).zip(&second) {
            assert!((w.d_rho_m - (f.d_rho_m + s.d_rho_m)).abs() < 1e-9);
        }
    }

    #[test]
    fn default_constellation_visibility_band() {
        let c = Constellation::gps_like();
        let origin = Vector3::zeros();
        for i in 0..40 {
            let t = i as f64 * 10.0;
            let n = c.visible_sats(t, &origin).len();
            assert!((6..=10).contains(&n), "t={t}: {n} visible");
        }
    }

    #[test]
    fn unknown_satellite_is_rejected() {
        let c = Constellation::gps_like();
        let geom = c
            .dd_geometry(0.0, Vector3::zeros(), Vector3::new(-90.0, 55.0, 1.0))
            .unwrap();
        assert!(matches!(geom.dd_range(999, 0.0), Err(GeometryError::UnknownSat(999))));
        // The pivot itself is not a DD pair.
        assert!(geom.dd_range(geom.pivot_sat(), 0.0).is_err());
    }

    #[test]
    fn constellation_json_round_trip() {
        let c = Constellation::gps_like();
        let text = serde_json::to_string(&c.sats).unwrap();
        let loaded = Constellation::from_json(&text).unwrap();
        assert_eq!(c.sats, loaded.sats);
    }

    proptest! {
        #[test]
        fn dd_range_antisymmetric_in_receivers(
            rx in -200.0..200.0f64, ry in -200.0..200.0f64,
            bx in -200.0..200.0f64, by in -200.0..200.0f64,
            t in 0.0..500.0f64,
        ) {
            let c = Constellation::gps_like();
            let rover = Vector3::new(rx, ry, 0.0);
            let base = Vector3::new(bx, by, 1.5);
            let geom = c.dd_geometry(t, rover, base).unwrap();
            let swapped = DdGeometry { rover_pos: base, base_pos: rover, ..geom.clone() };
            for sat in geom.other_sats().collect::<Vec<_>>() {
                let d = geom.dd_range(sat, t).unwrap();
                let s = swapped.dd_range(sat, t).unwrap();
                prop_assert!((d + s).abs() < 1e-9);
            }
        }

        #[test]
        fn unit_los_normalized(t in 0.0..500.0f64) {
            let c = Constellation::gps_like();
            let geom = c.dd_geometry(t, Vector3::zeros(), Vector3::new(50.0, -20.0, 0.0)).unwrap();
            let (u_p, us) = geom.unit_los(t);
            prop_assert!((u_p.norm() - 1.0).abs() < 1e-12);
            for u in us {
                prop_assert!((u.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
