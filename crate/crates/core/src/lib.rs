//! Tightly-coupled CDGNSS/IMU estimation with carrier-phase spoofing detection.
//!
//! The crate simulates a ground vehicle carrying a GNSS antenna and an IMU,
//! synthesizes double-difference pseudorange/carrier-phase observables against
//! a deterministic satellite constellation, runs a square-root information
//! filter that resolves integer ambiguities each epoch, and monitors the
//! windowed fixed-ambiguity residual cost (WFARC) for spoofing. Observation-
//! domain attack injectors rewrite observable streams so detection performance
//! can be measured against worst-case position-offset and timestamp attacks.

pub mod detector;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod ils;
pub mod observables;
pub mod scenario;
pub mod spoofing;
