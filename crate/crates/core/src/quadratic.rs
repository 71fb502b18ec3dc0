//! Entropic Gromov-Wasserstein with squared discrepancy, solved by iterated
//! linearization: each outer step solves a linear entropic problem whose cost
//! is the gradient of the quadratic objective at the current coupling.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, OtError, Result};
use crate::geometry::{CostFn, Geometry};
use crate::problem::{round_to_polytope, uniform, validate_histogram, Coupling, LinearProblem};
use crate::reference::gw_quartic;
use crate::sinkhorn::{solve_sinkhorn_warm, EpsilonSchedule, SinkhornOptions};

/// Largest side accepted by the literal quartic evaluation.
pub const MAX_LITERAL_SIZE: usize = 8;

const SYMMETRY_TOL: f64 = 1e-9;
const INIT_SCALING_ITERS: usize = 1000;

/// Gromov-Wasserstein problem between two spaces given by their intra-space
/// cost matrices.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    cx: Array2<f64>,
    cy: Array2<f64>,
    a: Array1<f64>,
    b: Array1<f64>,
}

fn check_space(c: &Array2<f64>, what: &'static str) -> Result<()> {
    let (r, k) = c.dim();
    if r != k {
        return Err(OtError::DimensionMismatch { what, expected: r, found: k });
    }
    let scale = c.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..r {
        for j in 0..i {
            if (c[[i, j]] - c[[j, i]]).abs() > SYMMETRY_TOL * scale.max(1.0) {
                return Err(invalid(format!("{what} must be symmetric")));
            }
        }
    }
    Ok(())
}

impl QuadraticProblem {
    pub fn new(geom_x: &Geometry, geom_y: &Geometry, a: Array1<f64>, b: Array1<f64>) -> Result<Self> {
        Self::from_costs(geom_x.cost_matrix()?, geom_y.cost_matrix()?, a, b)
    }

    pub fn from_costs(cx: Array2<f64>, cy: Array2<f64>, a: Array1<f64>, b: Array1<f64>) -> Result<Self> {
        check_space(&cx, "cost matrix of X")?;
        check_space(&cy, "cost matrix of Y")?;
        if a.len() != cx.nrows() {
            return Err(OtError::DimensionMismatch { what: "a", expected: cx.nrows(), found: a.len() });
        }
        if b.len() != cy.nrows() {
            return Err(OtError::DimensionMismatch { what: "b", expected: cy.nrows(), found: b.len() });
        }
        validate_histogram(a.view(), "a")?;
        validate_histogram(b.view(), "b")?;
        Ok(Self { cx, cy, a, b })
    }

    /// Self-costs of two point clouds under `cost_fn`, uniform weights.
    pub fn from_point_clouds(x: Array2<f64>, y: Array2<f64>, cost_fn: CostFn) -> Result<Self> {
        let gx = Geometry::point_cloud(x.clone(), x, cost_fn)?;
        let gy = Geometry::point_cloud(y.clone(), y, cost_fn)?;
        let (n, m) = (gx.shape().0, gy.shape().0);
        Self::new(&gx, &gy, uniform(n), uniform(m))
    }

    /// The same problem with the roles of X and Y exchanged.
    pub fn swapped(&self) -> Self {
        Self { cx: self.cy.clone(), cy: self.cx.clone(), a: self.b.clone(), b: self.a.clone() }
    }

    pub fn cx(&self) -> &Array2<f64> {
        &self.cx
    }

    pub fn cy(&self) -> &Array2<f64> {
        &self.cy
    }

    pub fn a(&self) -> &Array1<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.cx.nrows(), self.cy.nrows())
    }

    fn check_coupling(&self, p: &Array2<f64>) -> Result<()> {
        let (n, m) = self.shape();
        if p.nrows() != n {
            return Err(OtError::DimensionMismatch { what: "coupling rows", expected: n, found: p.nrows() });
        }
        if p.ncols() != m {
            return Err(OtError::DimensionMismatch { what: "coupling columns", expected: m, found: p.ncols() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GwEvaluation {
    /// `p1' Cx^2 p1 + p2' Cy^2 p2 - 2 <Cx P Cy, P>` with `p1, p2` the marginals of `P`.
    #[default]
    Expanded,
    /// The four-fold sum; only for sides up to [`MAX_LITERAL_SIZE`].
    Literal,
}

/// `sum (Cx_ii' - Cy_jj')^2 P_ij P_i'j'`.
pub fn gw_objective(qp: &QuadraticProblem, p: &Coupling) -> Result<f64> {
    gw_objective_with(qp, p, GwEvaluation::Expanded)
}

pub fn gw_objective_with(qp: &QuadraticProblem, p: &Coupling, mode: GwEvaluation) -> Result<f64> {
    let p = p.matrix();
    qp.check_coupling(p)?;
    match mode {
        GwEvaluation::Expanded => Ok(expanded_objective(qp, p)),
        GwEvaluation::Literal => {
            let (n, m) = qp.shape();
            if n.max(m) > MAX_LITERAL_SIZE {
                return Err(OtError::TooLarge {
                    what: "literal quartic evaluation",
                    size: n.max(m),
                    limit: MAX_LITERAL_SIZE,
                });
            }
            Ok(gw_quartic(&qp.cx, &qp.cy, p))
        }
    }
}

fn expanded_objective(qp: &QuadraticProblem, p: &Array2<f64>) -> f64 {
    let p1 = p.sum_axis(Axis(1));
    let p2 = p.sum_axis(Axis(0));
    let cx2 = qp.cx.mapv(|v| v * v);
    let cy2 = qp.cy.mapv(|v| v * v);
    let cross = qp.cx.dot(p).dot(&qp.cy);
    p1.dot(&cx2.dot(&p1)) + p2.dot(&cy2.dot(&p2)) - 2.0 * (&cross * p).sum()
}

/// Cost of the linear problem obtained by linearizing the objective at `P`:
/// `(Cx^2 p1) 1' + 1 (Cy^2 p2)' - 2 Cx P Cy`, where `p1, p2` are the
/// marginals of `P` (equal to `a, b` on the transportation polytope). This is
/// half the gradient of the expanded objective with respect to `P`.
pub fn gw_linearized_cost(qp: &QuadraticProblem, p: &Coupling) -> Result<Array2<f64>> {
    let p = p.matrix();
    qp.check_coupling(p)?;
    Ok(linearized(qp, p))
}

fn linearized(qp: &QuadraticProblem, p: &Array2<f64>) -> Array2<f64> {
    let row = qp.cx.mapv(|v| v * v).dot(&p.sum_axis(Axis(1)));
    let col = qp.cy.mapv(|v| v * v).dot(&p.sum_axis(Axis(0)));
    let mut lin = qp.cx.dot(p).dot(&qp.cy) * -2.0;
    for ((i, j), v) in lin.indexed_iter_mut() {
        *v += row[i] + col[j];
    }
    lin
}

/// How the inner entropic regularization is chosen at each outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GwEpsilon {
    /// Multiple of the mean entry of the current linearized cost.
    Relative(f64),
    Absolute(f64),
}

impl Default for GwEpsilon {
    fn default() -> Self {
        GwEpsilon::Relative(1e-2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GwOptions {
    pub eps: GwEpsilon,
    pub outer_iters: usize,
    /// Stop when `|cost_t - cost_{t-1}| <= outer_threshold * (1 + |cost_t|)`.
    pub outer_threshold: f64,
    pub sinkhorn: SinkhornOptions,
    /// Each inner solve starts at `inner_init_scale * eps` and decays
    /// geometrically by `inner_decay` down to `eps`.
    pub inner_init_scale: f64,
    pub inner_decay: f64,
    /// Log-scale of the multiplicative perturbation of the initial coupling.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for GwOptions {
    fn default() -> Self {
        Self {
            eps: GwEpsilon::default(),
            outer_iters: 20,
            outer_threshold: 1e-5,
            sinkhorn: SinkhornOptions { threshold: 1e-6, max_iters: 10_000, inner_iters: 10 },
            inner_init_scale: 100.0,
            inner_decay: 0.8,
            init_noise: 1e-2,
            seed: 0,
        }
    }
}

impl GwOptions {
    fn validate(&self) -> Result<()> {
        let eps = match self.eps {
            GwEpsilon::Relative(e) | GwEpsilon::Absolute(e) => e,
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("epsilon must be positive and finite"));
        }
        EpsilonSchedule::new(1.0, self.inner_init_scale, self.inner_decay)?;
        if self.outer_iters == 0 {
            return Err(invalid("outer_iters must be positive"));
        }
        if self.outer_threshold.is_nan() || self.outer_threshold < 0.0 {
            return Err(invalid("outer_threshold must be nonnegative"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(invalid("init_noise must be nonnegative and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwOutput {
    /// Lowest-objective coupling seen over the outer iterations.
    pub coupling: Coupling,
    pub gw_cost: f64,
    pub outer_iterations: usize,
    /// Objective after each outer step.
    pub cost_trace: Vec<f64>,
    /// Inner regularization used at each outer step.
    pub eps_trace: Vec<f64>,
    pub converged: bool,
    /// Outer steps whose inner Sinkhorn solve hit its iteration cap.
    pub inner_unconverged: usize,
}

/// `a b'` perturbed entrywise by `exp(noise * z_ij)` and scaled back onto
/// `U(a, b)`. `z_ij` depends only on the unordered pair `{i, j}`, so the
/// swapped problem starts from the transposed coupling.
fn initial_coupling(a: &Array1<f64>, b: &Array1<f64>, noise: f64, seed: u64) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
        let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((lo << 32) | hi);
        a[i] * b[j] * (noise * (2.0 * rng.gen::<f64>() - 1.0)).exp()
    });
    if noise > 0.0 {
        for _ in 0..INIT_SCALING_ITERS {
            let rows = p.sum_axis(Axis(1));
            for (mut r, (&s, &ai)) in p.rows_mut().into_iter().zip(rows.iter().zip(a)) {
                if s > 0.0 {
                    r *= ai / s;
                }
            }
            let cols = p.sum_axis(Axis(0));
            for (mut c, (&s, &bj)) in p.columns_mut().into_iter().zip(cols.iter().zip(b)) {
                if s > 0.0 {
                    c *= bj / s;
                }
            }
            let err: f64 = p.sum_axis(Axis(1)).iter().zip(a).map(|(s, ai)| (s - ai).abs()).sum();
            if err < 1e-15 {
                break;
            }
        }
        p = round_to_polytope(&p, a, b);
    }
    p
}

fn inner_epsilon(rule: GwEpsilon, lin: &Array2<f64>) -> f64 {
    match rule {
        GwEpsilon::Absolute(e) => e,
        GwEpsilon::Relative(r) => {
            let mean = lin.mean().unwrap_or(0.0);
            let scale = if mean > 0.0 && mean.is_finite() {
                mean
            } else {
                lin.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
            };
            if scale > 0.0 {
                r * scale
            } else {
                r
            }
        }
    }
}

/// Whether the solver should run on the swapped problem. Inner Sinkhorn solves
/// that stop at their cap depend on which side is scaled first, so both
/// argument orders are mapped to one orientation.
fn solve_swapped(qp: &QuadraticProblem) -> bool {
    let key = |c: &Array2<f64>, w: &Array1<f64>| {
        std::iter::once(c.nrows() as f64).chain(c.iter().copied()).chain(w.iter().copied()).collect::<Vec<f64>>()
    };
    let (kx, ky) = (key(&qp.cx, &qp.a), key(&qp.cy, &qp.b));
    kx.iter()
        .zip(&ky)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .is_some_and(|o| o.is_gt())
}

pub fn solve_gw(qp: &QuadraticProblem, opts: &GwOptions) -> Result<GwOutput> {
    opts.validate()?;
    if solve_swapped(qp) {
        let mut out = solve_oriented(&qp.swapped(), opts)?;
        out.coupling = Coupling::from_raw(out.coupling.matrix().t().to_owned());
        return Ok(out);
    }
    solve_oriented(qp, opts)
}

fn solve_oriented(qp: &QuadraticProblem, opts: &GwOptions) -> Result<GwOutput> {
    let (a, b) = (qp.a(), qp.b());
    let mut p = initial_coupling(a, b, opts.init_noise, opts.seed);
    let mut best = (f64::INFINITY, p.clone());
    let mut potentials: Option<(Array1<f64>, Array1<f64>)> = None;
    let mut trace = Vec::with_capacity(opts.outer_iters);
    let mut eps_trace = Vec::with_capacity(opts.outer_iters);
    let mut converged = false;
    let mut unconverged = 0;
    let mut prev = expanded_objective(qp, &p);

    for t in 0..opts.outer_iters {
        let lin = linearized(qp, &p);
        let eps = inner_epsilon(opts.eps, &lin);
        let outer = |source: OtError| OtError::Outer { outer_iteration: t, source: Box::new(source) };
        let lp = LinearProblem::new(Geometry::dense(lin).map_err(outer)?, a.clone(), b.clone()).map_err(outer)?;
        let warm = potentials.as_ref().map(|(f, g)| (f, g));
        let schedule = EpsilonSchedule::new(eps, opts.inner_init_scale, opts.inner_decay).map_err(outer)?;
        let out = solve_sinkhorn_warm(&lp, schedule, &opts.sinkhorn, warm).map_err(outer)?;
        if !out.converged {
            unconverged += 1;
        }
        p = round_to_polytope(out.transport_matrix(&lp).map_err(outer)?.matrix(), a, b);
        potentials = Some((out.f, out.g));

        let cost = expanded_objective(qp, &p);
        if !cost.is_finite() {
            return Err(outer(OtError::NonFinite("GW objective")));
        }
        log::debug!("gw outer={} eps={eps:.3e} cost={cost:.6e}", t + 1);
        trace.push(cost);
        eps_trace.push(eps);
        if cost < best.0 {
            best = (cost, p.clone());
        }
        if (cost - prev).abs() <= opts.outer_threshold * (1.0 + cost.abs()) {
            converged = true;
            break;
        }
        prev = cost;
    }
    if unconverged > 0 {
        log::warn!("{unconverged} inner Sinkhorn solves hit their iteration cap");
    }
    Ok(GwOutput {
        coupling: Coupling::from_raw(best.1),
        gw_cost: best.0,
        outer_iterations: trace.len(),
        cost_trace: trace,
        eps_trace,
        converged,
        inner_unconverged: unconverged,
    })
}
