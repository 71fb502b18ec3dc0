//! Entropic optimal transport solved by log-domain Sinkhorn iterations.
//!
//! The solver alternates the dual updates
//!
//! ```text
//! f <- eps log a - eps log K exp(g / eps)
//! g <- eps log b - eps log K^T exp(f / eps)
//! ```
//!
//! through [`Geometry::apply_lse_kernel`], so the cost matrix is never
//! exponentiated directly. Every `inner_iters` iterations the L1 deviation of
//! the row marginal from `a` is recorded together with the dual objective;
//! the column marginal is exact after each `g` update.
//!
//! With an annealed [`EpsilonSchedule`], checkpoints are only taken once the
//! schedule has reached its target, so the recorded dual objectives are all
//! evaluated at the same regularization.

use ndarray::{Array1, Array2, Zip};

use crate::error::{invalid, OtError, Result};
use crate::geometry::{CostFn, Geometry, KernelAxis};
use crate::problem::{Coupling, LinearProblem};

/// `eps_t = max(target, target * init_scale * decay^t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub target: f64,
    pub init_scale: f64,
    pub decay: f64,
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self { target: eps, init_scale: 1.0, decay: 1.0 }
    }

    pub fn new(target: f64, init_scale: f64, decay: f64) -> Result<Self> {
        let s = Self { target, init_scale, decay };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target.is_finite()) {
            return Err(invalid(format!("epsilon must be positive and finite, got {}", self.target)));
        }
        if !(self.init_scale >= 1.0 && self.init_scale.is_finite()) {
            return Err(invalid("epsilon init_scale must be >= 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid("epsilon decay must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn at(&self, t: usize) -> f64 {
        (self.target * self.init_scale * self.decay.powf(t as f64)).max(self.target)
    }
}

impl From<f64> for EpsilonSchedule {
    fn from(eps: f64) -> Self {
        Self::constant(eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Stop once the L1 row-marginal error is at or below this value.
    pub threshold: f64,
    pub max_iters: usize,
    /// Marginal error is measured every `inner_iters` iterations.
    pub inner_iters: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { threshold: 1e-3, max_iters: 2000, inner_iters: 10 }
    }
}

impl SinkhornOptions {
    fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(invalid("threshold must be positive"));
        }
        if self.max_iters == 0 || self.inner_iters == 0 {
            return Err(invalid("max_iters and inner_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Dual potentials and convergence trace of a Sinkhorn run.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOutput {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    /// L1 row-marginal deviation at each checkpoint.
    pub errors: Vec<f64>,
    /// Dual objective at each checkpoint.
    pub dual_objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final (target) regularization.
    pub eps: f64,
}

/// Transport cost and dual objective of an entropic solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegOtCost {
    pub transport_cost: f64,
    pub dual_objective: f64,
}

/// `<pot, w>` with the convention `0 * -inf = 0`.
fn weighted_dot(pot: &Array1<f64>, w: &Array1<f64>) -> f64 {
    pot.iter()
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|(p, wi)| p * wi)
        .sum()
}

fn check_potential(p: &Array1<f64>, iteration: usize, which: &str) -> Result<()> {
    if p.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(OtError::NumericalFailure {
            iteration,
            what: format!("NaN in potential {which}; epsilon is likely too small for the cost scale"),
        });
    }
    Ok(())
}

pub fn solve_sinkhorn(
    prob: &LinearProblem,
    eps: impl Into<EpsilonSchedule>,
    opts: &SinkhornOptions,
) -> Result<SinkhornOutput> {
    solve_sinkhorn_warm(prob, eps, opts, None)
}

/// Sinkhorn with optional initial potentials `(f, g)`; `None` starts from zero.
pub fn solve_sinkhorn_warm(
    prob: &LinearProblem,
    eps: impl Into<EpsilonSchedule>,
    opts: &SinkhornOptions,
    init: Option<(&Array1<f64>, &Array1<f64>)>,
) -> Result<SinkhornOutput> {
    let schedule = eps.into();
    schedule.validate()?;
    opts.validate()?;
    let geom = prob.geom();
    let (n, m) = geom.shape();
    let (a, b) = (prob.a(), prob.b());
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let zeros_n = Array1::<f64>::zeros(n);
    let zeros_m = Array1::<f64>::zeros(m);

    let (mut f, mut g) = match init {
        Some((f0, g0)) => {
            if f0.len() != n || g0.len() != m {
                return Err(invalid("warm-start potentials do not match the problem shape"));
            }
            (f0.clone(), g0.clone())
        }
        None => (zeros_n.clone(), zeros_m.clone()),
    };
    // potentials of zero-weight points are -inf; anything else non-finite is reset
    f.zip_mut_with(a, |fi, &ai| if ai > 0.0 && !fi.is_finite() { *fi = 0.0 });
    g.zip_mut_with(b, |gj, &bj| if bj > 0.0 && !gj.is_finite() { *gj = 0.0 });

    let mut errors = Vec::new();
    let mut duals = Vec::new();
    let mut converged = false;
    let mut iterations = opts.max_iters;

    for it in 0..opts.max_iters {
        let eps_t = schedule.at(it);

        let lse_rows = geom.apply_lse_kernel(zeros_n.view(), g.view(), eps_t, KernelAxis::Rows)?;
        f = eps_t * &log_a - &lse_rows;
        check_potential(&f, it, "f")?;

        let lse_cols = geom.apply_lse_kernel(f.view(), zeros_m.view(), eps_t, KernelAxis::Cols)?;
        g = eps_t * &log_b - &lse_cols;
        check_potential(&g, it, "g")?;

        let at_target = eps_t == schedule.target;
        let checkpoint = it == 0 || (it + 1) % opts.inner_iters == 0 || it + 1 == opts.max_iters;
        if checkpoint && at_target {
            let row = geom
                .apply_lse_kernel(f.view(), g.view(), eps_t, KernelAxis::Rows)?
                .mapv(|v| (v / eps_t).exp());
            let err: f64 = row.iter().zip(a).map(|(r, ai)| (r - ai).abs()).sum();
            if !err.is_finite() {
                return Err(OtError::NumericalFailure {
                    iteration: it,
                    what: "non-finite marginal error".into(),
                });
            }
            let mass = row.sum();
            duals.push(weighted_dot(&f, a) + weighted_dot(&g, b) - eps_t * (mass - 1.0));
            errors.push(err);
            log::trace!("sinkhorn it={} eps={eps_t:.3e} err={err:.3e}", it + 1);
            if err <= opts.threshold {
                converged = true;
                iterations = it + 1;
                break;
            }
        }
    }
    log::debug!(
        "sinkhorn finished: iterations={iterations} converged={converged} err={:?}",
        errors.last()
    );
    Ok(SinkhornOutput {
        f,
        g,
        errors,
        dual_objectives: duals,
        iterations,
        converged,
        eps: schedule.target,
    })
}

impl SinkhornOutput {
    fn check_shape(&self, prob: &LinearProblem) -> Result<()> {
        let (n, m) = prob.shape();
        if self.f.len() != n || self.g.len() != m {
            return Err(invalid("solver output does not match the problem shape"));
        }
        Ok(())
    }

    /// `P_ij = exp((f_i + g_j - C_ij) / eps)`.
    pub fn transport_matrix(&self, prob: &LinearProblem) -> Result<Coupling> {
        self.check_shape(prob)?;
        let mut p = prob.geom().cost_matrix()?;
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let fi = self.f[i];
            Zip::from(&mut row)
                .and(&self.g)
                .for_each(|c, &gj| *c = ((fi + gj - *c) / self.eps).exp());
        }
        Ok(Coupling::from_raw(p))
    }

    pub fn reg_ot_cost(&self, prob: &LinearProblem) -> Result<RegOtCost> {
        let p = self.transport_matrix(prob)?;
        let cost = prob.geom().cost_matrix()?;
        let mass = p.matrix().sum();
        Ok(RegOtCost {
            transport_cost: p.transport_cost(&cost),
            dual_objective: weighted_dot(&self.f, prob.a()) + weighted_dot(&self.g, prob.b())
                - self.eps * (mass - 1.0),
        })
    }

    /// Gradient of the regularized OT value with respect to `a`: the potential
    /// `f`, centered to zero mean to remove the additive gauge.
    pub fn grad_weights(&self, prob: &LinearProblem) -> Result<Array1<f64>> {
        self.check_shape(prob)?;
        if !self.converged {
            return Err(OtError::NotConverged);
        }
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gradient with respect to zero-weight entries is unbounded"));
        }
        let mean = self.f.mean().unwrap_or(0.0);
        Ok(self.f.mapv(|v| v - mean))
    }

    /// Gradient of the regularized OT value with respect to the source points
    /// of a squared-Euclidean point cloud, with the coupling held fixed:
    /// row `i` is `sum_j P_ij * 2 (x_i - y_j)`.
    pub fn grad_points(&self, prob: &LinearProblem) -> Result<Array2<f64>> {
        self.check_shape(prob)?;
        if !self.converged {
            return Err(OtError::NotConverged);
        }
        let pc = match prob.geom() {
            Geometry::PointCloud(pc) if pc.cost_fn() == CostFn::SqEuclidean => pc,
            Geometry::PointCloud(pc) => {
                return Err(OtError::Unsupported(format!(
                    "point gradients need the squared Euclidean cost, got {:?}",
                    pc.cost_fn()
                )))
            }
            _ => return Err(OtError::Unsupported("point gradients need a point-cloud geometry".into())),
        };
        let p = self.transport_matrix(prob)?;
        let row_mass = p.row_sums();
        let mut grad = pc.x().clone();
        for (mut r, &w) in grad.rows_mut().into_iter().zip(&row_mass) {
            r *= w;
        }
        grad = 2.0 * (grad - p.matrix().dot(pc.y()));
        Ok(grad)
    }
}
