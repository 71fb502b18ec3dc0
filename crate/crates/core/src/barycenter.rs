//! Entropic Wasserstein barycenters on a fixed support, by iterative Bregman
//! projections in the log domain.

use ndarray::{Array1, Zip};
use rayon::prelude::*;

use crate::error::{invalid, OtError, Result};
use crate::geometry::{Geometry, KernelAxis};
use crate::problem::validate_histogram;

#[derive(Clone, Debug)]
pub struct BarycenterProblem {
    geom: Geometry,
    histograms: Vec<Array1<f64>>,
    weights: Array1<f64>,
}

impl BarycenterProblem {
    /// `geom` is the support-to-support cost (`N x N`); every histogram lives
    /// on that support.
    pub fn new(geom: Geometry, histograms: Vec<Array1<f64>>, weights: Array1<f64>) -> Result<Self> {
        let (n, m) = geom.shape();
        if n != m {
            return Err(OtError::DimensionMismatch { what: "support cost columns", expected: n, found: m });
        }
        if histograms.is_empty() {
            return Err(invalid("at least one histogram is required"));
        }
        for (k, h) in histograms.iter().enumerate() {
            if h.len() != n {
                return Err(OtError::DimensionMismatch { what: "histogram length", expected: n, found: h.len() });
            }
            validate_histogram(h.view(), &format!("histogram {k}"))?;
        }
        if weights.len() != histograms.len() {
            return Err(OtError::DimensionMismatch {
                what: "barycenter weights",
                expected: histograms.len(),
                found: weights.len(),
            });
        }
        validate_histogram(weights.view(), "barycenter weights")?;
        Ok(Self { geom, histograms, weights })
    }

    /// Equal weights.
    pub fn uniform(geom: Geometry, histograms: Vec<Array1<f64>>) -> Result<Self> {
        let k = histograms.len().max(1);
        Self::new(geom, histograms, Array1::from_elem(k, 1.0 / k as f64))
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn histograms(&self) -> &[Array1<f64>] {
        &self.histograms
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn support_size(&self) -> usize {
        self.geom.shape().0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarycenterOptions {
    /// Largest L1 gap between any coupling's support marginal and the barycenter.
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for BarycenterOptions {
    fn default() -> Self {
        Self { threshold: 1e-4, max_iters: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarycenterOutput {
    /// Normalized to sum to 1.
    pub barycenter: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal gap after each sweep.
    pub errors: Vec<f64>,
}

fn check_finite(v: &Array1<f64>, iteration: usize) -> Result<()> {
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(OtError::NumericalFailure {
            iteration,
            what: "NaN in barycenter potentials; epsilon is likely too small".into(),
        });
    }
    Ok(())
}

pub fn solve_barycenter(bp: &BarycenterProblem, eps: f64, opts: &BarycenterOptions) -> Result<BarycenterOutput> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("epsilon must be positive and finite"));
    }
    if opts.threshold.is_nan() || opts.threshold <= 0.0 || opts.max_iters == 0 {
        return Err(invalid("threshold and max_iters must be positive"));
    }
    let geom = &bp.geom;
    let n = bp.support_size();
    let zeros = Array1::<f64>::zeros(n);
    let log_hists: Vec<Array1<f64>> = bp.histograms.iter().map(|h| h.mapv(f64::ln)).collect();
    // coupling k has rows on histogram k (potential f_k) and columns on the
    // barycenter (potential g_k)
    let mut g: Vec<Array1<f64>> = vec![zeros.clone(); bp.histograms.len()];
    let mut log_p = zeros.clone();
    let mut errors = Vec::new();
    let mut converged = false;
    let mut iterations = opts.max_iters;

    for it in 0..opts.max_iters {
        // h_k = eps * log(K^T u_k), independent across k
        let h: Vec<Array1<f64>> = log_hists
            .par_iter()
            .zip(g.par_iter())
            .map(|(log_b, gk)| -> Result<Array1<f64>> {
                let lse = geom.apply_lse_kernel(zeros.view(), gk.view(), eps, KernelAxis::Rows)?;
                let f = eps * log_b - &lse;
                check_finite(&f, it)?;
                geom.apply_lse_kernel(f.view(), zeros.view(), eps, KernelAxis::Cols)
            })
            .collect::<Result<_>>()?;

        log_p.fill(0.0);
        for (hk, &wk) in h.iter().zip(&bp.weights) {
            if wk > 0.0 {
                log_p.scaled_add(wk / eps, hk);
            }
        }
        check_finite(&log_p, it)?;

        let mut err = 0.0f64;
        for (gk, hk) in g.iter_mut().zip(&h) {
            let mut gap = 0.0;
            Zip::from(&*gk).and(hk).and(&log_p).for_each(|&gj, &hj, &lp| {
                gap += (((gj + hj) / eps).exp() - lp.exp()).abs();
            });
            err = err.max(gap);
            *gk = eps * &log_p - hk;
        }
        if !err.is_finite() {
            return Err(OtError::NumericalFailure { iteration: it, what: "non-finite marginal gap".into() });
        }
        errors.push(err);
        log::trace!("barycenter it={} err={err:.3e}", it + 1);
        // the first sweep compares against the zero initialization
        if it > 0 && err <= opts.threshold {
            converged = true;
            iterations = it + 1;
            break;
        }
    }
    let mut p = log_p.mapv(f64::exp);
    let mass = p.sum();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(OtError::NumericalFailure { iteration: iterations, what: "barycenter has no mass".into() });
    }
    p /= mass;
    Ok(BarycenterOutput { barycenter: p, converged, iterations, errors })
}
