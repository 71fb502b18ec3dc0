//! Brute-force oracles. Slow and simple on purpose; they share no code with
//! the solvers they are used to check.

use itertools::Itertools;
use ndarray::{Array1, Array2};

use crate::error::{invalid, OtError, Result};

/// Largest `n` accepted by [`exact_lp_uniform`] (`n!` permutations).
pub const MAX_LP_ORACLE_SIZE: usize = 7;

const GW_GRID_POINTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub enum Argmin {
    /// `x_i` is matched to `y_{sigma[i]}`.
    Permutation(Vec<usize>),
    /// Free parameter `p = P[0][0]` of a 2x2 coupling.
    CouplingParameter(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub argmin: Argmin,
}

/// Exact optimum of the uniform-marginal linear problem by enumerating all
/// permutations; the optimum over `U(1/n, 1/n)` is attained at one.
pub fn exact_lp_uniform(cost: &Array2<f64>) -> Result<OracleResult> {
    let n = cost.nrows();
    if n != cost.ncols() || n == 0 {
        return Err(invalid("exact_lp_uniform needs a non-empty square cost matrix"));
    }
    if n > MAX_LP_ORACLE_SIZE {
        return Err(OtError::TooLarge {
            what: "permutation enumeration",
            size: n,
            limit: MAX_LP_ORACLE_SIZE,
        });
    }
    let mut best = (f64::INFINITY, Vec::new());
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if total < best.0 {
            best = (total, perm);
        }
    }
    Ok(OracleResult {
        value: best.0 / n as f64,
        argmin: Argmin::Permutation(best.1),
    })
}

/// Literal quartic GW objective `sum (Cx_ii' - Cy_jj')^2 P_ij P_i'j'`.
pub fn gw_quartic(cx: &Array2<f64>, cy: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let (n, m) = p.dim();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..n {
            for j in 0..m {
                for l in 0..m {
                    let d = cx[[i, k]] - cy[[j, l]];
                    total += d * d * p[[i, j]] * p[[k, l]];
                }
            }
        }
    }
    total
}

fn coupling_2x2(p: f64, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    ndarray::array![[p, a[0] - p], [b[0] - p, 1.0 - a[0] - b[0] + p]]
}

/// Exact GW optimum for `n = m = 2`.
///
/// `U(a, b)` is the segment `P(p) = [[p, a0 - p], [b0 - p, 1 - a0 - b0 + p]]`
/// and the objective is quadratic in `p`. The quadratic is recovered from
/// three literal quartic evaluations and minimized in closed form over the
/// endpoints and the stationary point; a 10^4-point grid search is run as a
/// cross-check and can only lower the reported value.
pub fn exact_gw_2x2(
    cx: &Array2<f64>,
    cy: &Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<OracleResult> {
    if cx.dim() != (2, 2) || cy.dim() != (2, 2) || a.len() != 2 || b.len() != 2 {
        return Err(invalid("exact_gw_2x2 needs 2x2 cost matrices and length-2 weights"));
    }
    let lo = (a[0] + b[0] - 1.0).max(0.0);
    let hi = a[0].min(b[0]);
    if lo > hi {
        return Err(invalid("empty transportation polytope"));
    }
    let energy = |p: f64| gw_quartic(cx, cy, &coupling_2x2(p, a, b));

    let mut best = (energy(lo), lo);
    let mut consider = |p: f64| {
        let e = energy(p);
        if e < best.0 {
            best = (e, p);
        }
    };
    consider(hi);
    if hi > lo {
        // E(p) = alpha p^2 + beta p + gamma through three evaluations
        let mid = 0.5 * (lo + hi);
        let (e0, e1, e2) = (energy(lo), energy(mid), energy(hi));
        let h = mid - lo;
        let alpha = (e2 - 2.0 * e1 + e0) / (2.0 * h * h);
        let slope_mid = (e2 - e0) / (2.0 * h);
        if alpha > 0.0 {
            let stationary = mid - slope_mid / (2.0 * alpha);
            if stationary > lo && stationary < hi {
                consider(stationary);
            }
        }
        for k in 0..=GW_GRID_POINTS {
            consider(lo + (hi - lo) * k as f64 / GW_GRID_POINTS as f64);
        }
    }
    Ok(OracleResult {
        value: best.0,
        argmin: Argmin::CouplingParameter(best.1),
    })
}

/// Central finite differences of `func` at `point`, one coordinate at a time.
pub fn finite_diff(func: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let up = func(&x);
        x[k] = point[k] - step;
        let down = func(&x);
        x[k] = point[k];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
