//! Integer least squares over an upper-triangular square-root information
//! factor, plus an exhaustive oracle for testing.
//!
//! The solver finds the exact argmin of ||target - R n||^2 over integer
//! vectors using a depth-first search with shrinking-radius pruning, seeded
//! by the rounded float solution. Equal-cost candidates resolve to the
//! lexicographically smallest vector so results are deterministic.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IlsError {
    #[error("R is singular or ill-conditioned (diag ratio {0:.3e})")]
    IllConditioned(f64),
    #[error("dimension mismatch: target {target} vs R {rows}x{cols}")]
    DimensionMismatch { target: usize, rows: usize, cols: usize },
    #[error("enumeration budget exceeded: {candidates} candidates > {budget}")]
    BudgetExceeded { candidates: u128, budget: u128 },
}

/// Condition-number guard on the triangular factor.
const MAX_DIAG_RATIO: f64 = 1e12;
/// Enumeration cap for the brute-force oracle.
const BRUTE_FORCE_BUDGET: u128 = 20_000_000;

/// The integer subproblem ||target - r_nn n||^2 in normalized units.
#[derive(Debug, Clone)]
pub struct IlsProblem {
    pub target: DVector<f64>,
    pub r_nn: DMatrix<f64>,
}

impl IlsProblem {
    pub fn new(target: DVector<f64>, r_nn: DMatrix<f64>) -> Result<Self, IlsError> {
        let (rows, cols) = r_nn.shape();
        if rows != cols || target.len() != rows {
            return Err(IlsError::DimensionMismatch { target: target.len(), rows, cols });
        }
        let p = IlsProblem { target, r_nn };
        p.check_conditioning()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    fn check_conditioning(&self) -> Result<(), IlsError> {
        let mut max = 0.0f64;
        let mut min = f64::INFINITY;
        for i in 0..self.dim() {
            let d = self.r_nn[(i, i)].abs();
            max = max.max(d);
            min = min.min(d);
        }
        if min == 0.0 || max / min > MAX_DIAG_RATIO {
            return Err(IlsError::IllConditioned(if min == 0.0 { f64::INFINITY } else { max / min }));
        }
        Ok(())
    }

    /// Residual cost of an integer candidate, evaluated one way everywhere so
    /// the solver and the oracle agree bit-for-bit.
    pub fn cost(&self, n: &[i64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.dim() {
            let mut r = self.target[i];
            for j in i..self.dim() {
                r -= self.r_nn[(i, j)] * n[j] as f64;
            }
            total += r * r;
        }
        total
    }
}

/// Integer solution and its residual cost.
#[derive(Debug, Clone, PartialEq)]
pub struct IlsSolution {
    pub n: Vec<i64>,
    pub j2: f64,
}

/// Float (unconstrained) ambiguities by backsubstitution: R n = target.
pub fn float_ambiguities(p: &IlsProblem) -> Result<DVector<f64>, IlsError> {
    p.check_conditioning()?;
    let dim = p.dim();
    let mut n = DVector::zeros(dim);
    for i in (0..dim).rev() {
        let mut r = p.target[i];
        for j in i + 1..dim {
            r -= p.r_nn[(i, j)] * n[j];
        }
        n[i] = r / p.r_nn[(i, i)];
    }
    Ok(n)
}

/// Exact integer least squares by depth-first search with pruning.
///
/// Levels run from the last ambiguity up; at level i the conditional float
/// value given the fixed tail is enumerated outward (nearest integer first),
/// and a branch is cut as soon as its partial cost exceeds the incumbent.
pub fn ils_solve(p: &IlsProblem) -> Result<IlsSolution, IlsError> {
    p.check_conditioning()?;
    let dim = p.dim();
    if dim == 0 {
        return Ok(IlsSolution { n: Vec::new(), j2: 0.0 });
    }

    let float = float_ambiguities(p)?;
    let seed: Vec<i64> = float.iter().map(|&v| v.round() as i64).collect();
    let mut best = seed.clone();
    let mut best_cost = p.cost(&seed);

    let mut candidate = seed.clone();
    search_level(p, dim - 1, 0.0, &mut candidate, &mut best, &mut best_cost);

    // Recompute through the canonical path so callers comparing against the
    // oracle see identical floating-point results.
    let j2 = p.cost(&best);
    Ok(IlsSolution { n: best, j2 })
}

fn search_level(
    p: &IlsProblem,
    level: usize,
    partial: f64,
    candidate: &mut [i64],
    best: &mut Vec<i64>,
    best_cost: &mut f64,
) {
    let dim = p.dim();
    // Conditional float value of this level given the already-fixed tail.
    let mut r = p.target[level];
    for j in level + 1..dim {
        r -= p.r_nn[(level, j)] * candidate[j] as f64;
    }
    let center = r / p.r_nn[(level, level)];

    // Enumerate integers by increasing distance from the center. The residual
    // term grows monotonically with that distance, so the first pruned value
    // on each side ends that side.
    let base = center.round() as i64;
    for step in 0..=enum_span(center, *best_cost, partial, p.r_nn[(level, level)]) {
        for cand in candidates_at(base, step) {
            let term = r - p.r_nn[(level, level)] * cand as f64;
            let cost = partial + term * term;
            if cost > *best_cost {
                continue;
            }
            candidate[level] = cand;
            if level == 0 {
                let full = cost;
                if full < *best_cost || (full == *best_cost && *candidate < **best) {
                    *best_cost = full;
                    best.copy_from_slice(candidate);
                }
            } else {
                search_level(p, level - 1, cost, candidate, best, best_cost);
            }
        }
    }
}

/// Worst-case number of steps away from the rounded center that can still
/// beat the incumbent cost.
fn enum_span(center: f64, best_cost: f64, partial: f64, diag: f64) -> i64 {
    let head = (best_cost - partial).max(0.0);
    let reach = head.sqrt() / diag.abs() + (center - center.round()).abs() + 1.0;
    reach.ceil() as i64
}

fn candidates_at(base: i64, step: i64) -> impl Iterator<Item = i64> {
    let items: [Option<i64>; 2] = if step == 0 {
        [Some(base), None]
    } else {
        [Some(base - step), Some(base + step)]
    };
    items.into_iter().flatten()
}

/// Result of the exhaustive search, including how many candidates were
/// evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceSolution {
    pub n: Vec<i64>,
    pub j2: f64,
    pub candidates: u128,
}

/// Exhaustive minimum over the integer box `center +/- radius` around the
/// rounded float solution. Test oracle; intentionally simple.
pub fn brute_force_ils(p: &IlsProblem, radius: i64) -> Result<BruteForceSolution, IlsError> {
    p.check_conditioning()?;
    let dim = p.dim();
    let width = 2 * radius as u128 + 1;
    let candidates = width.pow(dim as u32);
    if dim > 8 || radius > 8 || candidates > BRUTE_FORCE_BUDGET {
        return Err(IlsError::BudgetExceeded { candidates, budget: BRUTE_FORCE_BUDGET });
    }

    let float = float_ambiguities(p)?;
    let center: Vec<i64> = float.iter().map(|&v| v.round() as i64).collect();

    let mut best: Option<Vec<i64>> = None;
    let mut best_cost = f64::INFINITY;
    let mut n = vec![0i64; dim];
    let mut idx = vec![0i64; dim];
    loop {
        for k in 0..dim {
            n[k] = center[k] - radius + idx[k];
        }
        let cost = p.cost(&n);
        let better = match &best {
            None => true,
            Some(b) => cost < best_cost || (cost == best_cost && n < *b),
        };
        if better {
            best_cost = cost;
            best = Some(n.clone());
        }
        // Odometer increment over the box.
        let mut k = 0;
        loop {
            if k == dim {
                let b = best.expect("at least one candidate");
                let j2 = p.cost(&b);
                return Ok(BruteForceSolution { n: b, j2, candidates });
            }
            idx[k] += 1;
            if idx[k] < width as i64 {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
