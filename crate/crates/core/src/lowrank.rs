//! Linear OT restricted to couplings of nonnegative rank `r`,
//! `P = Q diag(1/g) R^T`.
//!
//! Each outer step is a mirror-descent (multiplicative) update of the three
//! factors against the partial gradients of `<C, P>`, followed by a KL
//! projection onto
//!
//! ```text
//! Q 1 = a,  R 1 = b,  Q^T 1 = R^T 1 = g,  g >= floor
//! ```
//!
//! computed by alternating scalings in the log domain. The two affine sets
//! are projected exactly (row scaling; geometric-mean column balancing) and
//! the floor on `g` carries a Dykstra correction.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, OtError, Result};
use crate::geometry::{logsumexp, Geometry, KernelAxis};
use crate::problem::{round_to_polytope, Coupling, LinearProblem};

/// Lower bound on the entries of `g`.
pub const G_FLOOR: f64 = 1e-10;

const BURN_IN: usize = 50;
const DESCENT_SLACK: f64 = 1e-7;

/// Factors of a rank-`r` coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    pub g: Array1<f64>,
}

impl LowRankFactors {
    pub fn new(q: Array2<f64>, r: Array2<f64>, g: Array1<f64>) -> Result<Self> {
        if q.ncols() != g.len() || r.ncols() != g.len() {
            return Err(invalid("factor ranks disagree"));
        }
        if q.iter().chain(r.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("factors must be finite and nonnegative"));
        }
        Ok(Self { q, r, g })
    }

    pub fn rank(&self) -> usize {
        self.g.len()
    }

    /// `(|Q1 - a|_1, |R1 - b|_1, |Q^T 1 - g|_1, |R^T 1 - g|_1)`.
    pub fn marginal_errors(&self, a: &Array1<f64>, b: &Array1<f64>) -> [f64; 4] {
        let l1 = |x: Array1<f64>, y: &Array1<f64>| (x - y).mapv(f64::abs).sum();
        [
            l1(self.q.sum_axis(Axis(1)), a),
            l1(self.r.sum_axis(Axis(1)), b),
            l1(self.q.sum_axis(Axis(0)), &self.g),
            l1(self.r.sum_axis(Axis(0)), &self.g),
        ]
    }

    /// `<C, Q diag(1/g) R^T>` without forming the coupling.
    pub fn transport_cost(&self, geom: &Geometry) -> Result<f64> {
        let (n, m) = geom.shape();
        if self.q.nrows() != n || self.r.nrows() != m {
            return Err(invalid("factors do not match the geometry shape"));
        }
        let cr = cost_times(geom, &self.r, KernelAxis::Rows)?;
        Ok(diag_over_g(&self.q, &cr, &self.g).sum())
    }
}

/// Materializes `P = Q diag(1/g) R^T`.
pub fn lr_coupling(factors: &LowRankFactors) -> Result<Coupling> {
    if factors.g.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(invalid("every entry of g must be positive"));
    }
    let mut scaled = factors.q.clone();
    for (mut col, &gk) in scaled.columns_mut().into_iter().zip(&factors.g) {
        col /= gk;
    }
    Ok(Coupling::from_raw(scaled.dot(&factors.r.t())))
}

/// `(Q^T C R)_kk / g_k` for each `k`, given `CR = C R`.
fn diag_over_g(q: &Array2<f64>, cr: &Array2<f64>, g: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(
        q.columns()
            .into_iter()
            .zip(cr.columns())
            .zip(g)
            .map(|((qk, ck), gk)| qk.dot(&ck) / gk),
    )
}

/// `C M` (rows) or `C^T M` (cols), column by column through the geometry.
fn cost_times(geom: &Geometry, mat: &Array2<f64>, axis: KernelAxis) -> Result<Array2<f64>> {
    let (n, m) = geom.shape();
    let out_len = match axis {
        KernelAxis::Rows => n,
        KernelAxis::Cols => m,
    };
    let mut out = Array2::zeros((out_len, mat.ncols()));
    for (k, col) in mat.columns().into_iter().enumerate() {
        out.column_mut(k).assign(&geom.apply_cost(col, axis)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrOptions {
    /// Mirror-descent step; `None` uses `10 / max|grad|` at the first iterate.
    pub gamma: Option<f64>,
    /// Relative change of the objective over one check window.
    pub threshold: f64,
    pub max_iters: usize,
    /// Length of the check window.
    pub inner_iters: usize,
    pub seed: u64,
    /// Independent random starts (seeds `seed, seed + 1, ...`); the run with
    /// the lowest final objective is returned. The objective is non-convex
    /// and single starts occasionally stall in a poor local minimum.
    pub restarts: usize,
    pub max_projection_sweeps: usize,
    pub projection_tol: f64,
}

impl Default for LrOptions {
    fn default() -> Self {
        Self {
            gamma: None,
            threshold: 1e-6,
            max_iters: 2000,
            inner_iters: 10,
            seed: 0,
            restarts: 4,
            max_projection_sweeps: 100,
            projection_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrOutput {
    pub factors: LowRankFactors,
    /// Objective after each projected step, starting with the initial iterate.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gamma: f64,
    /// Steps after burn-in where the objective rose by more than `1e-7`.
    pub descent_violations: usize,
    /// Largest residual left by the alternating scalings of any projection,
    /// before the exact feasibility pass.
    pub max_projection_error: f64,
}

impl LrOutput {
    pub fn coupling(&self) -> Result<Coupling> {
        lr_coupling(&self.factors)
    }

    pub fn transport_cost(&self) -> f64 {
        *self.costs.last().expect("at least the initial cost is recorded")
    }
}

/// Log-domain factors.
struct LogFactors {
    q: Array2<f64>,
    r: Array2<f64>,
    g: Array1<f64>,
}

impl LogFactors {
    fn exp(&self) -> LowRankFactors {
        LowRankFactors {
            q: self.q.mapv(f64::exp),
            r: self.r.mapv(f64::exp),
            g: self.g.mapv(f64::exp),
        }
    }

    fn has_nan(&self) -> bool {
        self.q.iter().chain(self.r.iter()).chain(self.g.iter()).any(|v| v.is_nan())
    }
}

fn scale_rows(lmat: &mut Array2<f64>, log_w: &Array1<f64>) {
    for (mut row, &lw) in lmat.rows_mut().into_iter().zip(log_w) {
        if lw == f64::NEG_INFINITY {
            row.fill(f64::NEG_INFINITY);
            continue;
        }
        let s = logsumexp(row.as_slice().expect("standard layout"));
        row += lw - s;
    }
}

fn col_lse(lmat: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(lmat.columns().into_iter().map(|c| logsumexp(&c.to_vec())))
}

/// KL projection onto the marginal constraints by alternating scalings,
/// followed by an exact feasibility pass. Returns the marginal residual left
/// by the scalings (before the feasibility pass).
fn project(
    lf: &mut LogFactors,
    log_a: &Array1<f64>,
    log_b: &Array1<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    sweeps: usize,
    tol: f64,
) -> f64 {
    let log_floor = G_FLOOR.ln();
    let mut correction = Array1::<f64>::zeros(lf.g.len());
    let mut err = f64::INFINITY;
    for _ in 0..sweeps {
        scale_rows(&mut lf.q, log_a);
        scale_rows(&mut lf.r, log_b);

        let s1 = col_lse(&lf.q);
        let s2 = col_lse(&lf.r);
        let lg = (&lf.g + &s1 + &s2) / 3.0;
        for k in 0..lg.len() {
            lf.q.column_mut(k).mapv_inplace(|v| v + lg[k] - s1[k]);
            lf.r.column_mut(k).mapv_inplace(|v| v + lg[k] - s2[k]);
        }
        let shifted = &lg + &correction;
        lf.g = shifted.mapv(|v| v.max(log_floor));
        correction = &shifted - &lf.g;

        err = lf.exp().marginal_errors(a, b).into_iter().fold(0.0, f64::max);
        if err <= tol {
            return err;
        }
    }
    make_feasible(lf, log_a, a, b);
    err
}

/// Scalings converge only sublinearly when the optimal factors are sparse.
/// Close the remaining gap exactly: rescale the rows of `Q` to `a`, take
/// `g = Q^T 1`, and round `R` onto `U(b, g)`.
fn make_feasible(lf: &mut LogFactors, log_a: &Array1<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    scale_rows(&mut lf.q, log_a);
    let q = lf.q.mapv(f64::exp);
    let g = q.sum_axis(Axis(0)).mapv(|v| v.max(G_FLOOR));
    let g = &g * (a.sum() / g.sum());
    let r = round_to_polytope(&lf.r.mapv(f64::exp), b, &g);
    lf.r = r.mapv(|v| v.max(f64::MIN_POSITIVE).ln());
    lf.g = g.mapv(f64::ln);
}

/// Low-rank Sinkhorn by mirror descent.
pub fn solve_lr_sinkhorn(prob: &LinearProblem, rank: usize, opts: &LrOptions) -> Result<LrOutput> {
    let geom = prob.geom();
    let (n, m) = geom.shape();
    if rank == 0 {
        return Err(invalid("rank must be >= 1"));
    }
    if rank > n.min(m) {
        return Err(OtError::RankTooLarge { rank, max: n.min(m) });
    }
    if let Some(gamma) = opts.gamma {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
    }
    if opts.threshold.is_nan() || opts.threshold <= 0.0
        || opts.max_iters == 0
        || opts.inner_iters == 0
        || opts.max_projection_sweeps == 0
        || opts.restarts == 0
    {
        return Err(invalid("threshold, max_iters, inner_iters, restarts and projection sweeps must be positive"));
    }
    let mut best: Option<LrOutput> = None;
    for start in 0..opts.restarts {
        let out = solve_from_seed(prob, rank, opts, opts.seed.wrapping_add(start as u64))?;
        if best.as_ref().is_none_or(|b| out.transport_cost() < b.transport_cost()) {
            best = Some(out);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn solve_from_seed(prob: &LinearProblem, rank: usize, opts: &LrOptions, seed: u64) -> Result<LrOutput> {
    let geom = prob.geom();
    let (n, m) = geom.shape();
    let (a, b) = (prob.a(), prob.b());
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);

    // Feasible random start: rows of Q and R proportional to a and b with
    // random positive profiles, then projected.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Array1::from_shape_fn(rank, |_| -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln());
    u /= u.sum();
    let lu = u.mapv(f64::ln);
    let mut lf = LogFactors {
        q: Array2::from_shape_fn((n, rank), |(i, k)| log_a[i] + lu[k] + rng.gen::<f64>()),
        r: Array2::from_shape_fn((m, rank), |(j, k)| log_b[j] + lu[k] + rng.gen::<f64>()),
        g: lu,
    };
    let mut max_proj_err = project(&mut lf, &log_a, &log_b, a, b, opts.max_projection_sweeps, opts.projection_tol);

    let mut factors = lf.exp();
    let mut cr = cost_times(geom, &factors.r, KernelAxis::Rows)?;
    let mut costs = vec![diag_over_g(&factors.q, &cr, &factors.g).sum()];
    let mut gamma = opts.gamma.unwrap_or(0.0);
    let mut converged = false;
    let mut iterations = opts.max_iters;
    let mut violations = 0;

    for it in 0..opts.max_iters {
        let ctq = cost_times(geom, &factors.q, KernelAxis::Cols)?;
        let mut grad_q = cr.clone();
        let mut grad_r = ctq;
        for k in 0..rank {
            grad_q.column_mut(k).mapv_inplace(|v| v / factors.g[k]);
            grad_r.column_mut(k).mapv_inplace(|v| v / factors.g[k]);
        }
        let grad_g = Array1::from_iter(
            diag_over_g(&factors.q, &cr, &factors.g)
                .iter()
                .zip(&factors.g)
                .map(|(d, gk)| -d / gk),
        );
        if it == 0 && opts.gamma.is_none() {
            let max_grad = grad_q
                .iter()
                .chain(grad_r.iter())
                .chain(grad_g.iter())
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            gamma = if max_grad > 0.0 { 10.0 / max_grad } else { 10.0 };
        }

        lf.q.scaled_add(-gamma, &grad_q);
        lf.r.scaled_add(-gamma, &grad_r);
        lf.g.scaled_add(-gamma, &grad_g);
        let err = project(&mut lf, &log_a, &log_b, a, b, opts.max_projection_sweeps, opts.projection_tol);
        if lf.has_nan() || !err.is_finite() {
            return Err(OtError::NumericalFailure {
                iteration: it,
                what: "NaN in low-rank factors; gamma is likely too large".into(),
            });
        }
        max_proj_err = max_proj_err.max(err);

        factors = lf.exp();
        cr = cost_times(geom, &factors.r, KernelAxis::Rows)?;
        let cost = diag_over_g(&factors.q, &cr, &factors.g).sum();
        let prev = *costs.last().expect("non-empty");
        if it >= BURN_IN && cost > prev + DESCENT_SLACK {
            violations += 1;
        }
        costs.push(cost);

        if (it + 1) % opts.inner_iters == 0 {
            let before = costs[costs.len() - 1 - opts.inner_iters];
            if (cost - before).abs() <= opts.threshold * cost.abs().max(1e-12) {
                converged = true;
                iterations = it + 1;
                break;
            }
        }
    }
    if violations > 0 {
        log::warn!("low-rank objective increased on {violations} steps after burn-in (gamma = {gamma:.3e})");
    }
    Ok(LrOutput {
        factors,
        costs,
        iterations,
        converged,
        gamma,
        descent_violations: violations,
        max_projection_error: max_proj_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CostFn;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn rank_one_is_independent_coupling() {
        let c = array![[0.3, 1.2, 0.5], [2.0, 0.1, 0.7]];
        let a = array![0.4, 0.6];
        let b = array![0.2, 0.3, 0.5];
        let prob = LinearProblem::new(Geometry::dense(c.clone()).unwrap(), a.clone(), b.clone()).unwrap();
        let out = solve_lr_sinkhorn(&prob, 1, &LrOptions::default()).unwrap();
        assert_relative_eq!(out.transport_cost(), a.dot(&c.dot(&b)), epsilon = 1e-6);
    }

    #[test]
    fn singleton_factors() {
        let prob = LinearProblem::uniform(Geometry::dense(array![[2.0]]).unwrap());
        let out = solve_lr_sinkhorn(&prob, 1, &LrOptions::default()).unwrap();
        assert_relative_eq!(out.factors.q[[0, 0]], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.factors.r[[0, 0]], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.factors.g[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.coupling().unwrap().matrix()[[0, 0]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn full_rank_two_point_example() {
        let g = Geometry::point_cloud(array![[0.0], [1.0]], array![[0.5], [2.0]], CostFn::SqEuclidean).unwrap();
        let prob = LinearProblem::uniform(g);
        let out = solve_lr_sinkhorn(&prob, 2, &LrOptions::default()).unwrap();
        assert!(out.transport_cost() <= 0.625 + 0.05, "{}", out.transport_cost());
    }

    #[test]
    fn rank_one_coupling_from_factors() {
        let a = array![0.25, 0.75];
        let b = array![0.5, 0.1, 0.4];
        let f = LowRankFactors::new(
            a.clone().insert_axis(Axis(1)),
            b.clone().insert_axis(Axis(1)),
            array![1.0],
        )
        .unwrap();
        let p = lr_coupling(&f).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_relative_eq!(p.matrix()[[i, j]], a[i] * b[j]);
            }
        }
    }

    #[test]
    fn constructed_factors_have_exact_marginals() {
        // Q = diag(a) W with rows of W on the simplex, R built so R^T 1 = g.
        let a = array![0.2, 0.3, 0.5];
        let w = array![[0.5, 0.5], [0.25, 0.75], [1.0, 0.0]];
        let mut q = w.clone();
        for (mut row, ai) in q.rows_mut().into_iter().zip(&a) {
            row *= *ai;
        }
        let g = q.sum_axis(Axis(0));
        // R_jk = b_j-independent split: R = v g^T with v on the simplex
        let v = array![0.1, 0.6, 0.3];
        let r = Array2::from_shape_fn((3, 2), |(j, k)| v[j] * g[k]);
        let f = LowRankFactors::new(q, r, g).unwrap();
        let errs = f.marginal_errors(&a, &v);
        for e in errs {
            assert!(e < 1e-15, "{errs:?}");
        }
        let p = lr_coupling(&f).unwrap();
        let (er, ec) = p.marginal_errors(&a, &v);
        assert!(er < 1e-15 && ec < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let prob = LinearProblem::uniform(Geometry::dense(Array2::zeros((2, 3))).unwrap());
        assert!(matches!(
            solve_lr_sinkhorn(&prob, 3, &LrOptions::default()),
            Err(OtError::RankTooLarge { rank: 3, max: 2 })
        ));
        assert!(solve_lr_sinkhorn(&prob, 0, &LrOptions::default()).is_err());
        let bad = LrOptions { gamma: Some(-1.0), ..Default::default() };
        assert!(solve_lr_sinkhorn(&prob, 1, &bad).is_err());
        let f = LowRankFactors::new(Array2::ones((2, 1)), Array2::ones((3, 1)), array![0.0]).unwrap();
        assert!(lr_coupling(&f).is_err());
    }

    #[test]
    fn projection_keeps_marginals() {
        let x = array![[0.0, 0.1], [1.0, 0.3], [0.4, 0.9], [0.7, 0.2]];
        let y = array![[0.2, 0.2], [0.8, 0.8], [0.5, 0.1]];
        let prob = LinearProblem::new(
            Geometry::point_cloud(x, y, CostFn::SqEuclidean).unwrap(),
            array![0.1, 0.2, 0.3, 0.4],
            array![0.3, 0.3, 0.4],
        )
        .unwrap();
        let out = solve_lr_sinkhorn(&prob, 2, &LrOptions::default()).unwrap();
        for e in out.factors.marginal_errors(prob.a(), prob.b()) {
            assert!(e <= 1e-6, "{e}");
        }
        let p = out.coupling().unwrap();
        let (er, ec) = p.marginal_errors(prob.a(), prob.b());
        assert!(er <= 1e-6 && ec <= 1e-6);
    }

    #[test]
    fn deterministic_given_seed() {
        let x = array![[0.0], [1.0], [2.5]];
        let prob = LinearProblem::uniform(Geometry::point_cloud(x.clone(), x, CostFn::SqEuclidean).unwrap());
        let o1 = solve_lr_sinkhorn(&prob, 2, &LrOptions::default()).unwrap();
        let o2 = solve_lr_sinkhorn(&prob, 2, &LrOptions::default()).unwrap();
        assert_eq!(o1, o2);
    }
}
