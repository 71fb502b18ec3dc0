//! Problem definitions and the coupling type shared by the solvers.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{invalid, OtError, Result};
use crate::geometry::Geometry;

/// Tolerance on `sum(a) == 1` for marginal histograms.
pub const SIMPLEX_TOL: f64 = 1e-8;

/// Checks that `v` is a probability vector: finite, nonnegative, sums to 1.
pub fn validate_histogram(v: ArrayView1<f64>, what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!("{what} must be finite and nonnegative")));
    }
    let s = v.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("{what} must sum to 1 (got {s})")));
    }
    Ok(())
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Linear (Kantorovich) problem: a geometry and two marginal histograms.
#[derive(Clone, Debug)]
pub struct LinearProblem {
    geom: Geometry,
    a: Array1<f64>,
    b: Array1<f64>,
}

impl LinearProblem {
    pub fn new(geom: Geometry, a: Array1<f64>, b: Array1<f64>) -> Result<Self> {
        let (n, m) = geom.shape();
        if a.len() != n {
            return Err(OtError::DimensionMismatch { what: "a", expected: n, found: a.len() });
        }
        if b.len() != m {
            return Err(OtError::DimensionMismatch { what: "b", expected: m, found: b.len() });
        }
        validate_histogram(a.view(), "a")?;
        validate_histogram(b.view(), "b")?;
        Ok(Self { geom, a, b })
    }

    /// Problem with uniform marginals.
    pub fn uniform(geom: Geometry) -> Self {
        let (n, m) = geom.shape();
        Self { geom, a: uniform(n), b: uniform(m) }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn a(&self) -> &Array1<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn shape(&self) -> (usize, usize) {
        self.geom.shape()
    }
}

/// A transport plan `P` (`n x m`, nonnegative).
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling(Array2<f64>);

impl Coupling {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("coupling entries must be finite and nonnegative"));
        }
        Ok(Self(matrix))
    }

    pub(crate) fn from_raw(matrix: Array2<f64>) -> Self {
        Self(matrix)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.0.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.0.sum_axis(ndarray::Axis(0))
    }

    /// `(|P 1 - a|_1, |P^T 1 - b|_1)`.
    pub fn marginal_errors(&self, a: &Array1<f64>, b: &Array1<f64>) -> (f64, f64) {
        let l1 = |x: Array1<f64>, y: &Array1<f64>| (x - y).mapv(f64::abs).sum();
        (l1(self.row_sums(), a), l1(self.col_sums(), b))
    }

    /// `sum_ij C_ij P_ij`.
    pub fn transport_cost(&self, cost: &Array2<f64>) -> f64 {
        (&self.0 * cost).sum()
    }

    /// For each row, the column holding the most mass and that mass.
    pub fn row_argmax(&self) -> Vec<(usize, f64)> {
        self.0
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, p)| if p > best.1 { (j, p) } else { best })
            })
            .collect()
    }
}

/// Rounds an approximately feasible coupling onto `U(a, b)` exactly: scale
/// down overfull rows, then overfull columns, then add the rank-one
/// correction `err_r err_c^T / |err_r|_1`.
pub fn round_to_polytope(p: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut p = p.clone();
    let rows = p.sum_axis(ndarray::Axis(1));
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        if rows[i] > a[i] {
            row *= a[i] / rows[i];
        }
    }
    let cols = p.sum_axis(ndarray::Axis(0));
    for (j, mut col) in p.columns_mut().into_iter().enumerate() {
        if cols[j] > b[j] {
            col *= b[j] / cols[j];
        }
    }
    let err_r = (a - &p.sum_axis(ndarray::Axis(1))).mapv(|v| v.max(0.0));
    let err_c = (b - &p.sum_axis(ndarray::Axis(0))).mapv(|v| v.max(0.0));
    let mass = err_r.sum();
    if mass > 0.0 {
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                p[[i, j]] += err_r[i] * err_c[j] / mass;
            }
        }
    }
    p
}
