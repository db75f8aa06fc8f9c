//! Windowed fixed-ambiguity residual cost (WFARC) spoofing detection.
//!
//! Each epoch contributes its integer-fixed carrier-phase residual cost and
//! DD pair count to a sliding window; the windowed sum Psi is tested against
//! either the chi-square consistency threshold for the windowed degrees of
//! freedom or an empirical per-environment threshold calibrated as the
//! largest Psi seen on a spoofing-free run (zero false alarms by
//! construction on the calibration data).

use crate::estimator::FixResult;
use crate::observables::Environment;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;
use thiserror::Error;

/// Stock window length: 10 epochs, two seconds at the 5 Hz epoch rate.
pub const DEFAULT_WINDOW_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("false-alarm probability must lie in (0, 1), got {0}")]
    BadProbability(f64),
    #[error("degrees of freedom must be at least 1")]
    BadDof,
    #[error("no threshold available for environment {0}")]
    MissingThreshold(Environment),
    #[error("calibration series has no epochs labeled {0}")]
    MissingEnvironment(Environment),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Threshold source for the decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DetectorMode {
    /// Chi-square consistency test at a fixed false-alarm probability.
    Chi2 { pf: f64 },
    /// Per-environment empirical maxima from a null calibration campaign.
    Empirical,
}

/// Empirical thresholds per environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub open_sky: f64,
    pub shallow: f64,
    pub deep: f64,
}

impl Thresholds {
    pub fn for_env(&self, env: Environment) -> f64 {
        match env {
            Environment::OpenSky => self.open_sky,
            Environment::ShallowUrban => self.shallow,
            Environment::DeepUrban => self.deep,
        }
    }
}

/// Sliding-window detector state.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    window: VecDeque<(f64, usize)>,
    window_len: usize,
    psi: f64,
    n_psi: usize,
    pub mode: DetectorMode,
    pub thresholds: Option<Thresholds>,
}

impl DetectorState {
    pub fn new(window_len: usize, mode: DetectorMode, thresholds: Option<Thresholds>) -> Self {
        assert!(window_len >= 1, "window length must be at least 1");
        DetectorState {
            window: VecDeque::with_capacity(window_len + 1),
            window_len,
            psi: 0.0,
            n_psi: 0,
            mode,
            thresholds,
        }
    }

    /// Windowed fixed-ambiguity residual cost.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// Degrees of freedom of the current window.
    pub fn n_psi(&self) -> usize {
        self.n_psi
    }

    /// Slide the window by one epoch. Epochs without an applied fix
    /// contribute (0, 0) so latency stays wall-clock aligned.
    pub fn update_wfarc(&mut self, fix: &FixResult) {
        let contribution = if fix.fix_applied { (fix.eps_phi, fix.num_pairs) } else { (0.0, 0) };
        self.window.push_back(contribution);
        if self.window.len() > self.window_len {
            self.window.pop_front();
        }
        // Recompute rather than increment: the window is tiny and the sums
        // stay exactly reproducible.
        self.psi = self.window.iter().map(|(e, _)| e).sum();
        self.n_psi = self.window.iter().map(|(_, n)| n).sum();
    }

    /// Decision rule: H1 if Psi >= gamma.
    pub fn decide(&self, t: f64, env: Environment) -> Result<Verdict, DetectorError> {
        let gamma = match self.mode {
            DetectorMode::Chi2 { pf } => {
                if self.n_psi == 0 {
                    // Empty window: no evidence, keep H0 with an infinite bar.
                    f64::INFINITY
                } else {
                    chi2_threshold(self.n_psi as u64, pf)?
                }
            }
            DetectorMode::Empirical => self
                .thresholds
                .ok_or(DetectorError::MissingThreshold(env))?
                .for_env(env),
        };
        Ok(Verdict {
            t,
            psi: self.psi,
            n_psi: self.n_psi,
            gamma,
            env,
            hypothesis: if self.psi >= gamma { Hypothesis::H1 } else { Hypothesis::H0 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

/// Per-epoch detector verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub t: f64,
    pub psi: f64,
    pub n_psi: usize,
    pub gamma: f64,
    pub env: Environment,
    pub hypothesis: Hypothesis,
}

/// Upper-tail chi-square threshold: gamma such that
/// P(chi2(dof) >= gamma) = pf, accurate to 1e-10 relative.
pub fn chi2_threshold(dof: u64, pf: f64) -> Result<f64, DetectorError> {
    if !(pf > 0.0 && pf < 1.0) {
        return Err(DetectorError::BadProbability(pf));
    }
    if dof == 0 {
        return Err(DetectorError::BadDof);
    }
    let k = dof as f64;
    let target = 1.0 - pf;
    let cdf = |x: f64| statrs::function::gamma::gamma_lr(k / 2.0, x / 2.0);
    let ln_pdf = |x: f64| {
        (k / 2.0 - 1.0) * x.ln() - x / 2.0 - (k / 2.0) * 2.0f64.ln()
            - statrs::function::gamma::ln_gamma(k / 2.0)
    };

    // Bracket, then bisect with Newton acceleration.
    let mut lo = 0.0f64;
    let mut hi = (k + 10.0) * 2.0;
    while cdf(hi) < target {
        hi *= 2.0;
    }
    let mut x = k.max(1.0);
    for _ in 0..200 {
        let f = cdf(x) - target;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / ln_pdf(x).exp();
        let newton = x - step;
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo) / x.max(1.0) < 1e-12 {
            break;
        }
    }
    Ok(x)
}

/// Smallest float strictly above `v`.
fn next_above(v: f64) -> f64 {
    if v == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::from_bits(v.to_bits() + 1)
    }
}

/// Largest windowed statistic per environment over one null run, indexed
/// open-sky / shallow / deep. `None` where the run never visits the
/// environment. Building block for threshold calibration, usable on
/// single-environment campaigns.
pub fn windowed_env_maxima(
    fixes: &[FixResult],
    envs: &[Environment],
    window_len: usize,
) -> [Option<f64>; 3] {
    assert_eq!(fixes.len(), envs.len(), "fix and environment series must align");
    let mut maxima: [Option<f64>; 3] = [None, None, None];
    let mut state = DetectorState::new(window_len, DetectorMode::Empirical, None);
    for (fix, env) in fixes.iter().zip(envs) {
        state.update_wfarc(fix);
        let slot = match env {
            Environment::OpenSky => 0,
            Environment::ShallowUrban => 1,
            Environment::DeepUrban => 2,
        };
        let m = maxima[slot].get_or_insert(0.0);
        *m = m.max(state.psi());
    }
    maxima
}

/// Largest windowed statistic per environment over a null run: the empirical
/// zero-false-alarm thresholds. The fix and environment series must be
/// epoch-aligned and must visit both urban environments.
///
/// The returned thresholds sit one ulp above the observed maxima so that the
/// tie-goes-to-H1 decision rule still raises no alarm when the calibration
/// run is replayed.
pub fn calibrate_empirical_threshold(
    fixes: &[FixResult],
    envs: &[Environment],
    window_len: usize,
) -> Result<Thresholds, DetectorError> {
    let maxima = windowed_env_maxima(fixes, envs, window_len);
    let shallow = maxima[1].ok_or(DetectorError::MissingEnvironment(Environment::ShallowUrban))?;
    let deep = maxima[2].ok_or(DetectorError::MissingEnvironment(Environment::DeepUrban))?;
    Ok(Thresholds {
        open_sky: next_above(maxima[0].unwrap_or(0.0)),
        shallow: next_above(shallow),
        deep: next_above(deep),
    })
}

/// First H1 at or after the attack start, as latency in seconds.
pub fn time_to_detect(verdicts: &[Verdict], attack_start: f64) -> Option<f64> {
    verdicts
        .iter()
        .find(|v| v.t >= attack_start && v.hypothesis == Hypothesis::H1)
        .map(|v| v.t - attack_start)
}

/// Verdict series CSV: `t,Psi,N_Psi,gamma,mode,env,hypothesis`.
pub fn write_verdicts_csv<W: Write>(
    mut w: W,
    verdicts: &[Verdict],
    mode: &DetectorMode,
) -> Result<(), DetectorError> {
    writeln!(w, "t,Psi,N_Psi,gamma,mode,env,hypothesis")?;
    let mode_name = match mode {
        DetectorMode::Chi2 { .. } => "chi2",
        DetectorMode::Empirical => "empirical",
    };
    for v in verdicts {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            v.t,
            v.psi,
            v.n_psi,
            v.gamma,
            mode_name,
            v.env,
            match v.hypothesis {
                Hypothesis::H0 => "H0",
                Hypothesis::H1 => "H1",
            }
        )?;
    }
    Ok(())
}

/// Complementary CDF of the windowed statistic on a log-spaced grid:
/// `psi_value,ccdf` rows, monotone non-increasing, starting at 1.
pub fn ccdf_table(psi_values: &[f64], points: usize) -> Vec<(f64, f64)> {
    if psi_values.is_empty() {
        return Vec::new();
    }
    let mut sorted = psi_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite psi"));
    let max = *sorted.last().expect("nonempty");
    let positive_min = sorted.iter().copied().find(|v| *v > 0.0).unwrap_or(1.0);
    let lo = (positive_min * 0.5).max(1e-12);
    let hi = (max * 1.05).max(lo * 10.0);
    let n = psi_values.len() as f64;

    let mut table = vec![(0.0, 1.0)];
    for i in 0..points {
        let frac = i as f64 / (points - 1).max(1) as f64;
        let v = lo * (hi / lo).powf(frac);
        let exceed = sorted.partition_point(|s| *s < v);
        table.push((v, (n - exceed as f64) / n));
    }
    table
}

pub fn write_ccdf_csv<W: Write>(mut w: W, table: &[(f64, f64)]) -> Result<(), DetectorError> {
    writeln!(w, "psi_value,ccdf")?;
    for (v, c) in table {
        writeln!(w, "{v},{c}")?;
    }
    Ok(())
}
