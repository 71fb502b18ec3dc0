mod common;

use ndarray::{Array1, Array2};
use otkit::problem::round_to_polytope;
use otkit::quadratic::{gw_objective_with, GwEvaluation};
use otkit::reference::{exact_lp_uniform, finite_diff, gw_quartic};
use otkit::{
    bures_w2, gw_objective, solve_barycenter, solve_gw, solve_lr_sinkhorn, solve_sinkhorn, soft_rank, soft_sort,
    BarycenterOptions, BarycenterProblem, CostFn, Coupling, Gaussian, Geometry, GwOptions, LinearProblem, LrOptions,
    QuadraticProblem, SinkhornOptions, SoftSortSpec,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

use common::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn permuted_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]])
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn sinkhorn_coupling_is_feasible_and_duals_ascend(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, d in 1usize..4) {
        let mut rng = rng(seed);
        let x = random_points(&mut rng, n, d);
        let y = random_points(&mut rng, m, d);
        let a = random_simplex(&mut rng, n);
        let b = random_simplex(&mut rng, m);
        let c = sq_dist(&x, &y);
        let prob = LinearProblem::new(Geometry::point_cloud(x, y, CostFn::SqEuclidean).unwrap(), a.clone(), b.clone()).unwrap();
        let eps = 0.1 * mean(&c) + 1e-12;
        let opts = SinkhornOptions { threshold: 1e-8, max_iters: 20_000, inner_iters: 10 };
        let out = solve_sinkhorn(&prob, eps, &opts).unwrap();
        prop_assert!(out.converged);
        let p = out.transport_matrix(&prob).unwrap();
        prop_assert!(p.matrix().iter().all(|&v| v >= 0.0));
        let (er, ec) = p.marginal_errors(&a, &b);
        prop_assert!(er <= 1e-8 && ec <= 1e-12, "{er} {ec}");
        prop_assert!(out.dual_objectives.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        // weak duality: the dual objective never exceeds the primal value
        let cost = out.reg_ot_cost(&prob).unwrap();
        let pm = p.matrix();
        let entropy: f64 = pm.iter().filter(|&&v| v > 0.0).map(|&v| v * (v.ln() - 1.0)).sum();
        let primal = cost.transport_cost + eps * (entropy + 1.0);
        prop_assert!(cost.dual_objective <= primal + 1e-7 * (1.0 + primal.abs()));
    }

    #[test]
    fn sinkhorn_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, d in 1usize..4) {
        let mut rng = rng(seed);
        let x = random_points(&mut rng, n, d);
        let y = random_points(&mut rng, n, d);
        let a = random_simplex(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let xp = permuted_rows(&x, &perm);
        let ap = Array1::from_shape_fn(n, |i| a[perm[i]]);
        let eps = 0.1 * mean(&sq_dist(&x, &y));
        let opts = SinkhornOptions { threshold: 1e-11, max_iters: 50_000, inner_iters: 10 };
        let solve = |x: Array2<f64>, a: Array1<f64>| {
            let prob = LinearProblem::new(Geometry::point_cloud(x, y.clone(), CostFn::SqEuclidean).unwrap(), a, otkit::problem::uniform(n)).unwrap();
            solve_sinkhorn(&prob, eps, &opts).unwrap().transport_matrix(&prob).unwrap().into_matrix()
        };
        let p = solve(x.clone(), a.clone());
        let pp = solve(xp, ap);
        prop_assert!(max_abs_diff(&permuted_rows(&p, &perm), &pp) < 1e-9);
    }

    #[test]
    fn rounding_lands_on_the_polytope(seed in any::<u64>(), n in 1usize..8, m in 1usize..8) {
        let mut rng = rng(seed);
        let a = random_simplex(&mut rng, n);
        let b = random_simplex(&mut rng, m);
        let raw = random_points(&mut rng, n, m);
        let p = round_to_polytope(&(&raw / raw.sum()), &a, &b);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let c = Coupling::new(p).unwrap();
        let (er, ec) = c.marginal_errors(&a, &b);
        prop_assert!(er <= 1e-12 && ec <= 1e-12, "{er} {ec}");
    }

    #[test]
    fn streamed_point_cloud_matches_single_block(seed in any::<u64>(), n in 1usize..40, m in 1usize..40, block in 1usize..9) {
        let mut rng = rng(seed);
        let x = random_points(&mut rng, n, 2);
        let y = random_points(&mut rng, m, 2);
        let v = Array1::from_iter(random_points(&mut rng, m, 1));
        let whole = Geometry::point_cloud(x.clone(), y.clone(), CostFn::Euclidean).unwrap();
        let streamed = Geometry::PointCloud(otkit::PointCloudGeometry::new(x, y, CostFn::Euclidean).unwrap().with_block_rows(block));
        let k1 = whole.apply_kernel(v.view(), 0.3, otkit::KernelAxis::Rows).unwrap();
        let k2 = streamed.apply_kernel(v.view(), 0.3, otkit::KernelAxis::Rows).unwrap();
        prop_assert!(max_abs_diff(&k1, &k2) <= 1e-14 * max_abs(&k1).max(1.0));
    }

    #[test]
    fn soft_sort_is_monotone_and_order_free(values in prop::collection::vec(-50.0..50.0f64, 1..10), eps_exp in -2.0..2.0f64, seed in any::<u64>()) {
        let x = Array1::from(values);
        let spec = SoftSortSpec { eps: 10f64.powf(eps_exp), ..SoftSortSpec::default() };
        let s = soft_sort(&x, &spec).unwrap();
        prop_assert!(s.windows(2).into_iter().all(|w| w[0] <= w[1] + 1e-9));
        let (lo, hi) = (x.iter().copied().fold(f64::INFINITY, f64::min), x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        prop_assert!(s.iter().all(|&v| v >= lo - 1e-6 * (1.0 + lo.abs()) && v <= hi + 1e-6 * (1.0 + hi.abs())));
        let mut shuffled = x.to_vec();
        shuffled.shuffle(&mut rng(seed));
        let s2 = soft_sort(&Array1::from(shuffled), &spec).unwrap();
        prop_assert!(max_abs_diff(&s, &s2) <= 1e-6 * (1.0 + hi - lo));
    }

    #[test]
    fn soft_ranks_sum_to_the_hard_total(values in prop::collection::vec(-50.0..50.0f64, 1..10), eps_exp in -2.0..2.0f64) {
        let x = Array1::from(values);
        let n = x.len() as f64;
        let r = soft_rank(&x, &SoftSortSpec { eps: 10f64.powf(eps_exp), ..SoftSortSpec::default() }).unwrap();
        prop_assert!((r.sum() - n * (n - 1.0) / 2.0).abs() <= 1e-4 * n * n);
        prop_assert!(r.iter().all(|&v| v >= -1e-9 && v <= n - 1.0 + 1e-9));
    }

    #[test]
    fn bures_is_a_symmetric_squared_metric(seed in any::<u64>(), d in 1usize..4) {
        let mut rng = rng(seed);
        let gauss = |rng: &mut rand_chacha::ChaCha8Rng| {
            let f = random_points(rng, d, d);
            Gaussian::new(Array1::from_iter(random_points(rng, d, 1)), f.dot(&f.t()) + Array2::<f64>::eye(d) * 0.05).unwrap()
        };
        let (g1, g2) = (gauss(&mut rng), gauss(&mut rng));
        let d12 = bures_w2(&g1, &g2).unwrap();
        prop_assert!(d12 >= 0.0);
        prop_assert!((d12 - bures_w2(&g2, &g1).unwrap()).abs() <= 1e-9 * (1.0 + d12));
        prop_assert!(bures_w2(&g1, &g1).unwrap().abs() <= 1e-9);
        // equal covariances leave only the mean displacement
        let shifted = Gaussian::new(g2.mean().clone(), g1.cov().clone()).unwrap();
        let dm = (g1.mean() - g2.mean()).mapv(|v| v * v).sum();
        prop_assert!((bures_w2(&g1, &shifted).unwrap() - dm).abs() <= 1e-9 * (1.0 + dm));
    }

    #[test]
    fn gw_expansion_matches_the_literal_sum(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, d in 1usize..4) {
        let mut rng = rng(seed);
        let qp = QuadraticProblem::from_point_clouds(random_points(&mut rng, n, d), random_points(&mut rng, m, d), CostFn::SqEuclidean).unwrap();
        let raw = random_points(&mut rng, n, m);
        let p = &raw / raw.sum();
        let literal = gw_quartic(qp.cx(), qp.cy(), &p);
        let coupling = Coupling::new(p).unwrap();
        let expanded = gw_objective(&qp, &coupling).unwrap();
        prop_assert!((expanded - literal).abs() <= 1e-9 * literal.max(1.0));
        let internal = gw_objective_with(&qp, &coupling, GwEvaluation::Literal).unwrap();
        prop_assert!((internal - literal).abs() <= 1e-12 * literal.max(1.0));
    }

    #[test]
    fn gw_objective_ignores_relabeling(seed in any::<u64>(), n in 1usize..7, m in 1usize..7) {
        let mut rng = rng(seed);
        let x = random_points(&mut rng, n, 2);
        let y = random_points(&mut rng, m, 2);
        let raw = random_points(&mut rng, n, m);
        let p = &raw / raw.sum();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let qp = QuadraticProblem::from_point_clouds(x.clone(), y.clone(), CostFn::SqEuclidean).unwrap();
        let qp2 = QuadraticProblem::from_point_clouds(permuted_rows(&x, &perm), y, CostFn::SqEuclidean).unwrap();
        let e1 = gw_objective(&qp, &Coupling::new(p.clone()).unwrap()).unwrap();
        let e2 = gw_objective(&qp2, &Coupling::new(permuted_rows(&p, &perm)).unwrap()).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-12 * e1.max(1.0));
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn gw_solution_is_feasible_and_no_worse_than_the_start(seed in any::<u64>(), n in 2usize..7, m in 2usize..7) {
        let mut rng = rng(seed);
        let qp = QuadraticProblem::from_point_clouds(random_points(&mut rng, n, 2), random_points(&mut rng, m, 3), CostFn::SqEuclidean).unwrap();
        let out = solve_gw(&qp, &GwOptions::default()).unwrap();
        let (er, ec) = out.coupling.marginal_errors(qp.a(), qp.b());
        prop_assert!(er <= 1e-12 && ec <= 1e-12);
        prop_assert!((out.gw_cost - gw_objective(&qp, &out.coupling).unwrap()).abs() <= 1e-12 * out.gw_cost.max(1.0));
        prop_assert!(out.cost_trace.iter().all(|&c| out.gw_cost <= c + 1e-15));
        // the independent coupling is always feasible
        let flat = Coupling::new(Array2::from_shape_fn((n, m), |(i, j)| qp.a()[i] * qp.b()[j])).unwrap();
        prop_assert!(out.gw_cost <= gw_objective(&qp, &flat).unwrap() + 1e-9);
    }

    #[test]
    fn gw_swapped_problem_gives_the_transpose(seed in any::<u64>(), n in 2usize..6, m in 2usize..6) {
        let mut rng = rng(seed);
        let qp = QuadraticProblem::from_point_clouds(random_points(&mut rng, n, 2), random_points(&mut rng, m, 2), CostFn::SqEuclidean).unwrap();
        let o1 = solve_gw(&qp, &GwOptions::default()).unwrap();
        let o2 = solve_gw(&qp.swapped(), &GwOptions::default()).unwrap();
        prop_assert!((o1.gw_cost - o2.gw_cost).abs() <= 1e-6 * o1.gw_cost.max(1.0), "{} {}", o1.gw_cost, o2.gw_cost);
        let t = o2.coupling.matrix().t().to_owned();
        prop_assert!(max_abs_diff(o1.coupling.matrix(), &t) <= 1e-6);
    }

    #[test]
    fn low_rank_is_feasible_and_bounded_by_the_lp(seed in any::<u64>(), n in 2usize..6, rank in 1usize..6) {
        let mut rng = rng(seed);
        let x = random_points(&mut rng, n, 2);
        let y = random_points(&mut rng, n, 2);
        let c = sq_dist(&x, &y);
        let prob = LinearProblem::uniform(Geometry::point_cloud(x, y, CostFn::SqEuclidean).unwrap());
        let rank = rank.min(n);
        let out = solve_lr_sinkhorn(&prob, rank, &LrOptions::default()).unwrap();
        prop_assert!(out.factors.marginal_errors(prob.a(), prob.b()).iter().all(|&e| e <= 1e-6));
        let p = out.coupling().unwrap();
        prop_assert!((p.transport_cost(&c) - out.transport_cost()).abs() <= 1e-9);
        let lp = exact_lp_uniform(&c).unwrap().value;
        prop_assert!(out.transport_cost() >= lp - 1e-9);
        prop_assert!(out.transport_cost() <= prob.a().dot(&c.dot(prob.b())) + 1e-9);
    }

    #[test]
    fn restarts_never_hurt(seed in any::<u64>(), n in 2usize..5, m in 2usize..5) {
        let mut rng = rng(seed);
        let prob = LinearProblem::uniform(Geometry::point_cloud(random_points(&mut rng, n, 2), random_points(&mut rng, m, 2), CostFn::SqEuclidean).unwrap());
        let single = solve_lr_sinkhorn(&prob, n.min(m), &LrOptions { restarts: 1, ..LrOptions::default() }).unwrap();
        let multi = solve_lr_sinkhorn(&prob, n.min(m), &LrOptions::default()).unwrap();
        prop_assert!(multi.transport_cost() <= single.transport_cost());
    }

    #[test]
    fn barycenter_ignores_histogram_order(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = rng(seed);
        let geom = Geometry::grid(vec![(0..12).map(|i| i as f64 / 11.0).collect()]).unwrap();
        let hs: Vec<Array1<f64>> = (0..k).map(|_| random_simplex(&mut rng, 12)).collect();
        let w = random_simplex(&mut rng, k);
        let eps = 0.05 * geom.mean_cost();
        let opts = BarycenterOptions { threshold: 1e-12, max_iters: 5000 };
        let out = solve_barycenter(&BarycenterProblem::new(geom.clone(), hs.clone(), w.clone()).unwrap(), eps, &opts).unwrap();
        prop_assert!(out.converged);
        prop_assert!((out.barycenter.sum() - 1.0).abs() <= 1e-12 && out.barycenter.iter().all(|&v| v >= 0.0));
        let rev_h: Vec<_> = hs.into_iter().rev().collect();
        let rev_w = Array1::from_iter(w.iter().rev().copied());
        let back = solve_barycenter(&BarycenterProblem::new(geom, rev_h, rev_w).unwrap(), eps, &opts).unwrap();
        prop_assert!(l1(&out.barycenter, &back.barycenter) <= 1e-9);
    }
}

fn dirac(n: usize, i: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |k| if k == i { 1.0 } else { 0.0 })
}

#[test]
fn barycenter_moves_monotonically_with_the_weight() {
    let n = 61;
    let geom = Geometry::grid(vec![(0..n).map(|i| i as f64 / (n - 1) as f64).collect()]).unwrap();
    let eps = 1e-3 * geom.mean_cost();
    let mut last = 0.0;
    for k in 0..=10 {
        let w1 = k as f64 / 10.0;
        let w = Array1::from(vec![w1, 1.0 - w1]);
        let bp = BarycenterProblem::new(geom.clone(), vec![dirac(n, 10), dirac(n, 50)], w).unwrap();
        let p = solve_barycenter(&bp, eps, &BarycenterOptions::default()).unwrap().barycenter;
        let center: f64 = p.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
        let expected = 10.0 * w1 + 50.0 * (1.0 - w1);
        assert!((center - expected).abs() < 0.5, "w1 {w1}: center {center}, expected {expected}");
        if k > 0 {
            assert!(center < last);
        }
        last = center;
    }
}

#[test]
fn gradients_match_finite_differences_on_three_points() {
    let mut rng = rng(31);
    let x = random_points(&mut rng, 3, 2);
    let y = random_points(&mut rng, 3, 2);
    let a = random_simplex(&mut rng, 3);
    let b = random_simplex(&mut rng, 3);
    let eps = 0.1 * mean(&sq_dist(&x, &y));
    let opts = SinkhornOptions { threshold: 1e-12, max_iters: 100_000, inner_iters: 10 };
    let value = |x: &Array2<f64>| {
        let prob = LinearProblem::new(Geometry::point_cloud(x.clone(), y.clone(), CostFn::SqEuclidean).unwrap(), a.clone(), b.clone()).unwrap();
        solve_sinkhorn(&prob, eps, &opts).unwrap().reg_ot_cost(&prob).unwrap().dual_objective
    };
    let prob = LinearProblem::new(Geometry::point_cloud(x.clone(), y.clone(), CostFn::SqEuclidean).unwrap(), a.clone(), b.clone()).unwrap();
    let grad = solve_sinkhorn(&prob, eps, &opts).unwrap().grad_points(&prob).unwrap();
    let flat: Vec<f64> = x.iter().copied().collect();
    let fd = finite_diff(|p| value(&Array2::from_shape_vec((3, 2), p.to_vec()).unwrap()), &flat, 1e-5).unwrap();
    assert!(max_abs_diff(grad.iter(), &fd) <= 1e-4 * max_abs(&fd), "{grad} vs {fd:?}");
}
