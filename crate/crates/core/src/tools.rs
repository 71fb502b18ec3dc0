//! Soft sorting and ranking through 1-D entropic transport, and a
//! transport distance between Gaussian mixtures.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{invalid, OtError, Result};
use crate::geometry::Geometry;
use crate::problem::{round_to_polytope, uniform, validate_histogram, LinearProblem};
use crate::sinkhorn::{solve_sinkhorn, EpsilonSchedule, SinkhornOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Squash {
    /// Affine map of the input onto `[0, 1]`; a constant input maps to 0.5.
    #[default]
    MinMaxRescale,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftSortSpec {
    /// Number of sorted targets; `None` uses the input length.
    pub num_targets: Option<usize>,
    /// Regularization in squashed units.
    pub eps: f64,
    pub squash: Squash,
    pub sinkhorn: SinkhornOptions,
}

impl Default for SoftSortSpec {
    fn default() -> Self {
        Self {
            num_targets: None,
            eps: 1e-2,
            squash: Squash::MinMaxRescale,
            sinkhorn: SinkhornOptions { threshold: 1e-6, max_iters: 100_000, inner_iters: 10 },
        }
    }
}

fn squash(x: &Array1<f64>, mode: Squash) -> Array1<f64> {
    match mode {
        Squash::None => x.clone(),
        Squash::MinMaxRescale => {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                x.mapv(|v| (v - lo) / (hi - lo))
            } else {
                Array1::from_elem(x.len(), 0.5)
            }
        }
    }
}

/// `m` equally spaced points in `[0, 1]`; a single target sits at 0.5.
fn targets(m: usize) -> Array1<f64> {
    if m == 1 {
        Array1::from_elem(1, 0.5)
    } else {
        Array1::linspace(0.0, 1.0, m)
    }
}

/// Entropic coupling between the squashed input and `m` sorted targets.
fn sort_coupling(x: &Array1<f64>, m: usize, spec: &SoftSortSpec) -> Result<Array2<f64>> {
    if x.is_empty() {
        return Err(invalid("cannot sort an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(OtError::NonFinite("soft-sort input"));
    }
    if m == 0 {
        return Err(invalid("num_targets must be at least 1"));
    }
    if !(spec.eps > 0.0 && spec.eps.is_finite()) {
        return Err(invalid("epsilon must be positive and finite"));
    }
    let xs = squash(x, spec.squash);
    let t = targets(m);
    let cost = Array2::from_shape_fn((x.len(), m), |(i, j)| (xs[i] - t[j]).powi(2));
    let range = cost.iter().copied().fold(0.0f64, f64::max);
    // anneal from the cost range down to eps
    let schedule = EpsilonSchedule::new(spec.eps, (range / spec.eps).max(1.0), 0.9)?;
    let prob = LinearProblem::new(Geometry::dense(cost)?, uniform(x.len()), uniform(m))?;
    let out = solve_sinkhorn(&prob, schedule, &spec.sinkhorn)?;
    if !out.converged {
        return Err(OtError::NotConverged);
    }
    Ok(out.transport_matrix(&prob)?.into_matrix())
}

/// Soft order statistics: `m P^T x`, the barycentric projection of the input
/// values onto each sorted target.
pub fn soft_sort(x: &Array1<f64>, spec: &SoftSortSpec) -> Result<Array1<f64>> {
    let m = spec.num_targets.unwrap_or(x.len());
    let p = sort_coupling(x, m, spec)?;
    Ok(p.t().dot(x) * m as f64)
}

/// Soft ranks in `[0, n - 1]`: `n P (0, 1, ..., n - 1)`.
pub fn soft_rank(x: &Array1<f64>, spec: &SoftSortSpec) -> Result<Array1<f64>> {
    let n = x.len();
    let p = sort_coupling(x, n, spec)?;
    let ranks = Array1::from_shape_fn(n, |j| j as f64);
    Ok(p.dot(&ranks) * n as f64)
}

const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mean: Array1<f64>,
    cov: Array2<f64>,
}

impl Gaussian {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(invalid("Gaussian dimension must be positive"));
        }
        if cov.dim() != (d, d) {
            return Err(OtError::DimensionMismatch { what: "covariance side", expected: d, found: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(OtError::NonFinite("Gaussian parameters"));
        }
        let scale = cov.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > PSD_TOL * scale {
                    return Err(invalid("covariance must be symmetric"));
                }
            }
        }
        let eig = SymmetricEigen::new(to_na(&cov));
        if eig.eigenvalues.iter().any(|l| *l < -PSD_TOL * scale) {
            return Err(invalid("covariance must be positive semidefinite"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn sqrtm(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between Gaussians:
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn bures_w2(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(OtError::DimensionMismatch { what: "Gaussian dimension", expected: g1.dim(), found: g2.dim() });
    }
    let dm = &g1.mean - &g2.mean;
    let s1 = to_na(&g1.cov);
    let s2 = to_na(&g2.cov);
    let r1 = sqrtm(s1.clone());
    let cross = sqrtm(&r1 * &s2 * &r1);
    let value = dm.dot(&dm) + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Array1<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Array1<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("a mixture needs at least one component"));
        }
        if weights.len() != components.len() {
            return Err(OtError::DimensionMismatch {
                what: "mixture weights",
                expected: components.len(),
                found: weights.len(),
            });
        }
        validate_histogram(weights.view(), "mixture weights")?;
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(OtError::DimensionMismatch { what: "component dimension", expected: d, found: c.dim() });
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmOptions {
    /// Entropic regularization relative to the mean component cost.
    pub eps_rel: f64,
    pub sinkhorn: SinkhornOptions,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { eps_rel: 1e-4, sinkhorn: SinkhornOptions { threshold: 1e-10, max_iters: 1_000_000, inner_iters: 10 } }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmDistance {
    pub value: f64,
    /// Mass sent from component `i` of the first mixture to component `j` of
    /// the second.
    pub coupling: Array2<f64>,
    /// Pairwise `bures_w2` between components.
    pub cost: Array2<f64>,
}

/// Transport between mixture weights with the Gaussian `W2^2` as ground cost.
///
/// The pair is put in a canonical order before solving and the result is
/// transposed back, so swapping the arguments gives exactly the transposed
/// coupling even when the inner solve stops short of convergence.
pub fn gmm_distance(m1: &GaussianMixture, m2: &GaussianMixture, opts: &GmmOptions) -> Result<GmmDistance> {
    if m1.dim() != m2.dim() {
        return Err(OtError::DimensionMismatch { what: "mixture dimension", expected: m1.dim(), found: m2.dim() });
    }
    if !(opts.eps_rel > 0.0 && opts.eps_rel.is_finite()) {
        return Err(invalid("eps_rel must be positive and finite"));
    }
    if canonical_order(m1, m2).is_gt() {
        let d = solve_mixture_transport(m2, m1, opts)?;
        return Ok(GmmDistance { value: d.value, coupling: d.coupling.reversed_axes(), cost: d.cost.reversed_axes() });
    }
    solve_mixture_transport(m1, m2, opts)
}

fn parameters(m: &GaussianMixture) -> Vec<f64> {
    let mut key = vec![m.components.len() as f64];
    key.extend(m.weights.iter());
    for c in &m.components {
        key.extend(c.mean.iter().chain(c.cov.iter()));
    }
    key
}

/// Lexicographic order of the flattened parameters under `total_cmp`.
fn canonical_order(m1: &GaussianMixture, m2: &GaussianMixture) -> Ordering {
    let (k1, k2) = (parameters(m1), parameters(m2));
    k1.iter()
        .zip(&k2)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| k1.len().cmp(&k2.len()))
}

fn solve_mixture_transport(m1: &GaussianMixture, m2: &GaussianMixture, opts: &GmmOptions) -> Result<GmmDistance> {
    let (k1, k2) = (m1.components.len(), m2.components.len());
    let mut cost = Array2::zeros((k1, k2));
    for (i, gi) in m1.components.iter().enumerate() {
        for (j, gj) in m2.components.iter().enumerate() {
            cost[[i, j]] = bures_w2(gi, gj)?;
        }
    }
    let (a, b) = (&m1.weights, &m2.weights);
    let mean = cost.mean().unwrap_or(0.0);
    let coupling = if mean > 0.0 {
        let eps = opts.eps_rel * mean;
        let range = cost.iter().copied().fold(0.0f64, f64::max);
        let schedule = EpsilonSchedule::new(eps, (range / eps).max(1.0), 0.9)?;
        let prob = LinearProblem::new(Geometry::dense(cost.clone())?, a.clone(), b.clone())?;
        let out = solve_sinkhorn(&prob, schedule, &opts.sinkhorn)?;
        if !out.converged {
            log::warn!("mixture transport did not converge; rounding the last iterate");
        }
        round_to_polytope(out.transport_matrix(&prob)?.matrix(), a, b)
    } else {
        // every pair costs nothing, any coupling is optimal
        Array2::from_shape_fn((k1, k2), |(i, j)| a[i] * b[j])
    };
    let value = (&coupling * &cost).sum();
    Ok(GmmDistance { value, coupling, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn spec(eps: f64) -> SoftSortSpec {
        SoftSortSpec { eps, ..Default::default() }
    }

    fn g1d(m: f64, var: f64) -> Gaussian {
        Gaussian::new(array![m], array![[var]]).unwrap()
    }

    #[test]
    fn soft_sort_hard_limit() {
        let x = array![1.0, 5.0, 4.0, 8.0, 12.0];
        let s = soft_sort(&x, &spec(1e-3)).unwrap();
        for (v, e) in s.iter().zip([1.0, 4.0, 5.0, 8.0, 12.0]) {
            assert!((v - e).abs() <= 1e-2, "{s}");
        }
        let r = soft_rank(&x, &spec(1e-3)).unwrap();
        for (v, e) in r.iter().zip([0.0, 2.0, 1.0, 3.0, 4.0]) {
            assert!((v - e).abs() <= 1e-2, "{r}");
        }
    }

    #[test]
    fn soft_sort_flat_limit() {
        let x = array![1.0, 5.0, 4.0, 8.0, 12.0];
        for v in soft_sort(&x, &spec(1e3)).unwrap() {
            assert!((v - 6.0).abs() <= 1e-2);
        }
    }

    #[test]
    fn soft_sort_small_cases() {
        assert_eq!(soft_sort(&array![7.0], &spec(1e-3)).unwrap(), array![7.0]);
        let sorted = array![-2.0, 0.5, 3.0, 3.5];
        let s = soft_sort(&sorted, &spec(1e-3)).unwrap();
        for (a, b) in s.iter().zip(&sorted) {
            assert!((a - b).abs() <= 1e-2);
        }
        assert!(soft_sort(&array![], &spec(1e-3)).is_err());
        assert!(soft_sort(&array![1.0, f64::NAN], &spec(1e-3)).is_err());
        assert!(soft_sort(&array![1.0], &spec(0.0)).is_err());
    }

    #[test]
    fn soft_sort_with_fewer_targets() {
        let x = array![3.0, 1.0, 2.0, 0.0];
        let s = soft_sort(&x, &SoftSortSpec { num_targets: Some(2), ..spec(1e-3) }).unwrap();
        assert_eq!(s.len(), 2);
        // lower and upper halves
        assert!((s[0] - 0.5).abs() < 1e-2 && (s[1] - 2.5).abs() < 1e-2, "{s}");
    }

    #[test]
    fn soft_rank_constant_and_reversed() {
        let c = array![2.0, 2.0, 2.0, 2.0];
        for v in soft_rank(&c, &spec(1e-2)).unwrap() {
            assert_relative_eq!(v, 1.5, epsilon = 1e-6);
        }
        let rev = array![9.0, 7.0, 4.0, 1.0];
        let r = soft_rank(&rev, &spec(1e-3)).unwrap();
        for (v, e) in r.iter().zip([3.0, 2.0, 1.0, 0.0]) {
            assert!((v - e).abs() <= 1e-2, "{r}");
        }
    }

    #[test]
    fn bures_closed_forms() {
        assert_eq!(bures_w2(&g1d(0.3, 2.0), &g1d(0.3, 2.0)).unwrap(), 0.0);
        assert_relative_eq!(bures_w2(&g1d(0.0, 1.0), &g1d(2.0, 4.0)).unwrap(), 5.0, epsilon = 1e-12);
        let a = Gaussian::new(array![0.0, 0.0], array![[1.0, 0.0], [0.0, 4.0]]).unwrap();
        let b = Gaussian::new(array![0.0, 0.0], array![[4.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_relative_eq!(bures_w2(&a, &b).unwrap(), 2.0, epsilon = 1e-12);
        assert!(bures_w2(&a, &g1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn gaussian_validation() {
        assert!(Gaussian::new(array![0.0, 0.0], array![[1.0, 0.5], [0.4, 1.0]]).is_err());
        assert!(Gaussian::new(array![0.0, 0.0], array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(Gaussian::new(array![0.0], array![[1.0, 0.0], [0.0, 1.0]]).is_err());
        // tiny negative eigenvalue is tolerated and clamped
        let g = Gaussian::new(array![0.0], array![[-1e-12]]).unwrap();
        assert_eq!(bures_w2(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn gmm_examples() {
        let single1 = GaussianMixture::new(array![1.0], vec![g1d(0.0, 1.0)]).unwrap();
        let single2 = GaussianMixture::new(array![1.0], vec![g1d(2.0, 4.0)]).unwrap();
        let d = gmm_distance(&single1, &single2, &GmmOptions::default()).unwrap();
        assert_relative_eq!(d.value, 5.0, epsilon = 1e-12);

        let m1 = GaussianMixture::new(array![0.4, 0.6], vec![g1d(0.0, 1.0), g1d(10.0, 1.0)]).unwrap();
        let m2 = GaussianMixture::new(array![0.6, 0.4], vec![g1d(10.5, 1.0), g1d(0.5, 1.0)]).unwrap();
        let d = gmm_distance(&m1, &m2, &GmmOptions::default()).unwrap();
        assert!(d.coupling[[0, 1]] + d.coupling[[1, 0]] >= 0.99);
        let back = gmm_distance(&m2, &m1, &GmmOptions::default()).unwrap();
        assert_eq!(back.value, d.value);
        assert_eq!(back.coupling, d.coupling.t());
        let same = gmm_distance(&m1, &m1, &GmmOptions::default()).unwrap();
        assert!(same.value <= 1e-6);
        assert!((same.coupling[[0, 0]] - 0.4).abs() < 1e-9 && (same.coupling[[1, 1]] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn gmm_validation() {
        assert!(GaussianMixture::new(array![], vec![]).is_err());
        assert!(GaussianMixture::new(array![0.5, 0.6], vec![g1d(0.0, 1.0), g1d(1.0, 1.0)]).is_err());
        let two_d = Gaussian::new(array![0.0, 0.0], Array2::eye(2)).unwrap();
        assert!(GaussianMixture::new(array![0.5, 0.5], vec![g1d(0.0, 1.0), two_d]).is_err());
    }
}
