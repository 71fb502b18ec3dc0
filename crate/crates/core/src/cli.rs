//! File-driven command-line front end. Each `run_*` function parses its
//! inputs, calls the library, writes the requested files and returns the
//! summary that was written as JSON.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::barycenter::{solve_barycenter, BarycenterOptions, BarycenterProblem};
use crate::error::OtError;
use crate::geometry::{CostFn, Geometry};
use crate::lowrank::{solve_lr_sinkhorn, LrOptions};
use crate::problem::{Coupling, LinearProblem, SIMPLEX_TOL};
use crate::quadratic::{solve_gw, GwEpsilon, GwOptions, QuadraticProblem};
use crate::reference::{exact_gw_2x2, exact_lp_uniform, MAX_LP_ORACLE_SIZE};
use crate::sinkhorn::{solve_sinkhorn, SinkhornOptions};
use crate::tools::{gmm_distance, soft_rank, soft_sort, Gaussian, GaussianMixture, GmmOptions, SoftSortSpec, Squash};

/// Weights whose sum is this close to 1 are rescaled with a warning.
pub const WEIGHT_RESCALE_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "otkit", version, about = "Optimal transport solvers driven by CSV and JSON files")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Linear (Kantorovich) transport between two point clouds or for a cost matrix.
    Lin(LinArgs),
    /// Gromov-Wasserstein matching between two point clouds.
    Quad(QuadArgs),
    /// Fixed-support barycenter of histograms.
    Barycenter(BarycenterArgs),
    /// Soft sorting and ranking of a vector.
    Softsort(SoftsortArgs),
    /// Transport distance between two Gaussian mixtures.
    Gmm(GmmArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Sqeucl,
    Eucl,
    Cosine,
}

impl From<CostArg> for CostFn {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Sqeucl => CostFn::SqEuclidean,
            CostArg::Eucl => CostFn::Euclidean,
            CostArg::Cosine => CostFn::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Sinkhorn,
    Lr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SquashArg {
    Minmax,
    None,
}

#[derive(Clone, Debug, Default, Args)]
pub struct EpsArgs {
    /// Absolute entropic regularization.
    #[arg(long, conflicts_with = "eps_rel")]
    pub eps: Option<f64>,
    /// Regularization as a multiple of the mean cost.
    #[arg(long)]
    pub eps_rel: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct LinArgs {
    /// Source points (CSV, one point per row).
    #[arg(required_unless_present = "cost_matrix")]
    pub x: Option<PathBuf>,
    /// Target points (CSV, one point per row).
    #[arg(required_unless_present = "cost_matrix")]
    pub y: Option<PathBuf>,
    /// Use this cost matrix (CSV) instead of point clouds.
    #[arg(long, conflicts_with_all = ["x", "y"])]
    pub cost_matrix: Option<PathBuf>,
    /// Source weights (CSV, one value per row); uniform if omitted.
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Target weights; uniform if omitted.
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sinkhorn")]
    pub solver: SolverArg,
    /// Rank of the low-rank solver; defaults to min(n, m).
    #[arg(long)]
    pub rank: Option<usize>,
    #[command(flatten)]
    pub eps: EpsArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_enum, default_value = "sqeucl")]
    pub cost: CostArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON summary; printed to stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub coupling_out: Option<PathBuf>,
    /// Compare with the exact permutation optimum (uniform weights, n = m <= 7).
    #[arg(long)]
    pub verify: bool,
}

#[derive(Clone, Debug, Args)]
pub struct QuadArgs {
    pub x: PathBuf,
    pub y: PathBuf,
    #[arg(long, value_enum, default_value = "sqeucl")]
    pub cost: CostArg,
    /// Inner regularization, absolute or relative to the mean linearized cost.
    #[command(flatten)]
    pub eps: EpsArgs,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub outer_threshold: Option<f64>,
    /// Inner Sinkhorn threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Inner Sinkhorn iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub coupling_out: Option<PathBuf>,
    /// CSV of `source,target,mass` with each source's heaviest target.
    #[arg(long)]
    pub correspondence_out: Option<PathBuf>,
    /// Compare with the exact optimum when n = m = 2.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Clone, Debug, Args)]
pub struct BarycenterArgs {
    /// Histogram files (one value per row), all on the same support.
    #[arg(required = true)]
    pub histograms: Vec<PathBuf>,
    /// Support points (CSV, one point per row).
    #[arg(long, required_unless_present = "grid", conflicts_with = "grid")]
    pub support: Option<PathBuf>,
    /// Grid axis file (one coordinate per row); repeat once per axis.
    #[arg(long)]
    pub grid: Vec<PathBuf>,
    /// Barycenter weights; uniform if omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sqeucl")]
    pub cost: CostArg,
    #[command(flatten)]
    pub eps: EpsArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// The barycenter as CSV, one value per row.
    #[arg(long)]
    pub barycenter_out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct SoftsortArgs {
    /// Input values (CSV, one value per row).
    #[arg(required_unless_present = "values", conflicts_with = "values")]
    pub input: Option<PathBuf>,
    /// Inline comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    pub values: Option<String>,
    #[arg(long, default_value_t = 1e-2)]
    pub eps: f64,
    #[arg(long)]
    pub num_targets: Option<usize>,
    #[arg(long, value_enum, default_value = "minmax")]
    pub squash: SquashArg,
    /// Comma-separated list of eps values; one sorted row per value.
    #[arg(long)]
    pub eps_sweep: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// The sweep as CSV rows `eps,v_1,...,v_m`.
    #[arg(long)]
    pub sweep_out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct GmmArgs {
    /// Mixture file: JSON with "weights", "means" and "covs".
    pub first: PathBuf,
    pub second: PathBuf,
    #[arg(long)]
    pub eps_rel: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub oracle: String,
    pub value: Option<f64>,
    /// Solver value minus oracle value.
    pub gap: Option<f64>,
    pub note: Option<String>,
}

impl Verification {
    fn skipped(oracle: &str, note: impl Into<String>) -> Self {
        Self { oracle: oracle.into(), value: None, gap: None, note: Some(note.into()) }
    }

    fn checked(oracle: &str, value: f64, solver_value: f64) -> Self {
        Self { oracle: oracle.into(), value: Some(value), gap: Some(solver_value - value), note: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinReport {
    pub solver: String,
    pub transport_cost: f64,
    /// Entropic dual objective; absent for the low-rank solver.
    pub dual_objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Absent for the low-rank solver.
    pub eps: Option<f64>,
    pub rank: Option<usize>,
    /// `[|P 1 - a|_1, |P^T 1 - b|_1]`.
    pub marginal_errors: [f64; 2],
    pub verify: Option<Verification>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadReport {
    pub gw_cost: f64,
    pub cost_trace: Vec<f64>,
    pub eps_trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub inner_unconverged: usize,
    pub verify: Option<Verification>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarycenterReport {
    pub barycenter: Vec<f64>,
    pub argmax: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_error: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub sorted_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftsortReport {
    pub sorted_values: Vec<f64>,
    pub ranks: Vec<f64>,
    pub eps: f64,
    pub sweep: Option<Vec<SweepRow>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmReport {
    pub value: f64,
    pub coupling: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub eps_rel: f64,
}

/// Mixture file layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmFile {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

/// Reads a numeric CSV: comma-separated, no header, `#` comments.
pub fn read_matrix(path: &Path) -> anyhow::Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .with_context(|| format!("{}: row {}: cannot parse {field:?}", path.display(), k + 1))
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!("{}: row {} has {} fields, expected {}", path.display(), k + 1, row.len(), first.len());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        bail!("{}: no data", path.display());
    }
    let (n, d) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        bail!("{}: non-finite value", path.display());
    }
    Ok(Array2::from_shape_vec((n, d), flat)?)
}

/// Reads a vector stored as a single column or a single row.
pub fn read_vector(path: &Path) -> anyhow::Result<Array1<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(Array1::from_iter(m.iter().copied()))
    } else {
        bail!("{}: expected a single column or row, got {}x{}", path.display(), m.nrows(), m.ncols())
    }
}

/// Checks a weight vector of length `n`, rescaling it onto the simplex when
/// its sum is within [`WEIGHT_RESCALE_TOL`] of 1.
pub fn normalize_weights(w: Array1<f64>, n: usize, what: &str) -> anyhow::Result<Array1<f64>> {
    if w.len() != n {
        bail!("{what}: expected {n} weights, got {}", w.len());
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!("{what}: weights must be finite and nonnegative");
    }
    let s = w.sum();
    if (s - 1.0).abs() > WEIGHT_RESCALE_TOL {
        bail!("{what}: weights sum to {s}, not 1");
    }
    if s == 1.0 {
        return Ok(w);
    }
    if (s - 1.0).abs() > SIMPLEX_TOL {
        log::warn!("{what}: weights sum to {s}; rescaling");
    }
    Ok(w / s)
}

fn read_weights(path: Option<&Path>, n: usize, what: &str) -> anyhow::Result<Array1<f64>> {
    match path {
        Some(p) => normalize_weights(read_vector(p)?, n, what),
        None => Ok(crate::problem::uniform(n)),
    }
}

pub fn read_gmm(path: &Path) -> anyhow::Result<GaussianMixture> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: GmmFile = serde_json::from_str(&text).with_context(|| format!("{}: invalid mixture JSON", path.display()))?;
    let k = file.weights.len();
    if file.means.len() != k || file.covs.len() != k {
        bail!("{}: weights, means and covs must have the same length", path.display());
    }
    let mut components = Vec::with_capacity(k);
    for (mean, cov) in file.means.iter().zip(&file.covs) {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            bail!("{}: covariance shape does not match the mean dimension {d}", path.display());
        }
        let cov = Array2::from_shape_fn((d, d), |(i, j)| cov[i][j]);
        components.push(Gaussian::new(Array1::from(mean.clone()), cov)?);
    }
    let weights = normalize_weights(Array1::from(file.weights), k, &path.display().to_string())?;
    Ok(GaussianMixture::new(weights, components)?)
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_positive(v: Option<f64>, what: &str) -> anyhow::Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => bail!("{what} must be positive and finite"),
        _ => Ok(()),
    }
}

fn check_count(v: Option<usize>, what: &str) -> anyhow::Result<()> {
    match v {
        Some(0) => bail!("{what} must be at least 1"),
        _ => Ok(()),
    }
}

fn check_eps(eps: &EpsArgs) -> anyhow::Result<()> {
    check_positive(eps.eps, "--eps")?;
    check_positive(eps.eps_rel, "--eps-rel")
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Builds the geometry of `otkit lin` from its arguments.
pub fn lin_geometry(args: &LinArgs) -> anyhow::Result<Geometry> {
    if let Some(c) = &args.cost_matrix {
        return Ok(Geometry::dense(read_matrix(c)?)?);
    }
    let (x, y) = match (&args.x, &args.y) {
        (Some(x), Some(y)) => (read_matrix(x)?, read_matrix(y)?),
        _ => bail!("two point files or --cost-matrix are required"),
    };
    Ok(Geometry::point_cloud(x, y, args.cost.into())?)
}

pub fn lin_sinkhorn_options(args: &LinArgs) -> SinkhornOptions {
    let d = SinkhornOptions::default();
    SinkhornOptions {
        threshold: args.threshold.unwrap_or(d.threshold),
        max_iters: args.max_iters.unwrap_or(d.max_iters),
        ..d
    }
}

pub fn lin_lr_options(args: &LinArgs) -> LrOptions {
    let d = LrOptions::default();
    LrOptions {
        threshold: args.threshold.unwrap_or(d.threshold),
        max_iters: args.max_iters.unwrap_or(d.max_iters),
        seed: args.seed,
        ..d
    }
}

pub fn run_lin(args: &LinArgs) -> anyhow::Result<LinReport> {
    check_eps(&args.eps)?;
    check_positive(args.threshold, "--threshold")?;
    check_count(args.max_iters, "--max-iters")?;
    check_count(args.rank, "--rank")?;
    let geom = lin_geometry(args)?;
    let (n, m) = geom.shape();
    let a = read_weights(args.a.as_deref(), n, "source weights")?;
    let b = read_weights(args.b.as_deref(), m, "target weights")?;
    let prob = LinearProblem::new(geom, a, b)?;

    let (mut report, coupling) = match args.solver {
        SolverArg::Sinkhorn => {
            let geom = prob.geom();
            let eps = match (args.eps.eps, args.eps.eps_rel) {
                (Some(e), _) => e,
                (None, Some(r)) => geom.relative_epsilon(r),
                (None, None) => geom.epsilon_default(),
            };
            let out = solve_sinkhorn(&prob, eps, &lin_sinkhorn_options(args))?;
            let cost = out.reg_ot_cost(&prob)?;
            let p = out.transport_matrix(&prob)?;
            let (er, ec) = p.marginal_errors(prob.a(), prob.b());
            let report = LinReport {
                solver: "sinkhorn".into(),
                transport_cost: cost.transport_cost,
                dual_objective: Some(cost.dual_objective),
                iterations: out.iterations,
                converged: out.converged,
                eps: Some(out.eps),
                rank: None,
                marginal_errors: [er, ec],
                verify: None,
            };
            (report, p)
        }
        SolverArg::Lr => {
            if args.eps.eps.is_some() || args.eps.eps_rel.is_some() {
                log::warn!("--eps and --eps-rel are ignored by the low-rank solver");
            }
            let rank = args.rank.unwrap_or(n.min(m));
            let out = solve_lr_sinkhorn(&prob, rank, &lin_lr_options(args))?;
            let p = out.coupling()?;
            let (er, ec) = p.marginal_errors(prob.a(), prob.b());
            let report = LinReport {
                solver: "lr".into(),
                transport_cost: out.transport_cost(),
                dual_objective: None,
                iterations: out.iterations,
                converged: out.converged,
                eps: None,
                rank: Some(rank),
                marginal_errors: [er, ec],
                verify: None,
            };
            (report, p)
        }
    };
    if args.verify {
        report.verify = Some(verify_lin(&prob, report.transport_cost)?);
    }
    if let Some(path) = &args.coupling_out {
        write_atomic(path, matrix_csv(coupling.matrix()).as_bytes())?;
    }
    emit_json(&report, args.out.as_deref())?;
    Ok(report)
}

fn verify_lin(prob: &LinearProblem, value: f64) -> anyhow::Result<Verification> {
    const ORACLE: &str = "exact_lp_uniform";
    let (n, m) = prob.shape();
    let uniform = |w: &Array1<f64>| w.iter().all(|v| (v - 1.0 / w.len() as f64).abs() <= SIMPLEX_TOL);
    if n != m || n > MAX_LP_ORACLE_SIZE || !uniform(prob.a()) || !uniform(prob.b()) {
        return Ok(Verification::skipped(
            ORACLE,
            format!("needs uniform weights and n = m <= {MAX_LP_ORACLE_SIZE}"),
        ));
    }
    let oracle = exact_lp_uniform(&prob.geom().cost_matrix()?)?;
    Ok(Verification::checked(ORACLE, oracle.value, value))
}

/// Builds the problem of `otkit quad` from its arguments.
pub fn quad_problem(args: &QuadArgs) -> anyhow::Result<QuadraticProblem> {
    Ok(QuadraticProblem::from_point_clouds(read_matrix(&args.x)?, read_matrix(&args.y)?, args.cost.into())?)
}

pub fn quad_options(args: &QuadArgs) -> GwOptions {
    let d = GwOptions::default();
    let eps = match (args.eps.eps, args.eps.eps_rel) {
        (Some(e), _) => GwEpsilon::Absolute(e),
        (None, Some(r)) => GwEpsilon::Relative(r),
        (None, None) => d.eps,
    };
    GwOptions {
        eps,
        outer_iters: args.outer_iters.unwrap_or(d.outer_iters),
        outer_threshold: args.outer_threshold.unwrap_or(d.outer_threshold),
        sinkhorn: SinkhornOptions {
            threshold: args.threshold.unwrap_or(d.sinkhorn.threshold),
            max_iters: args.max_iters.unwrap_or(d.sinkhorn.max_iters),
            ..d.sinkhorn
        },
        seed: args.seed,
        ..d
    }
}

pub fn run_quad(args: &QuadArgs) -> anyhow::Result<QuadReport> {
    check_eps(&args.eps)?;
    check_positive(args.threshold, "--threshold")?;
    check_count(args.max_iters, "--max-iters")?;
    check_count(args.outer_iters, "--outer-iters")?;
    if let Some(t) = args.outer_threshold {
        if !(t >= 0.0 && t.is_finite()) {
            bail!("--outer-threshold must be nonnegative and finite");
        }
    }
    let qp = quad_problem(args)?;
    let out = solve_gw(&qp, &quad_options(args))?;
    let verify = if args.verify {
        Some(if qp.shape() == (2, 2) {
            let oracle = exact_gw_2x2(qp.cx(), qp.cy(), qp.a(), qp.b())?;
            Verification::checked("exact_gw_2x2", oracle.value, out.gw_cost)
        } else {
            Verification::skipped("exact_gw_2x2", "needs n = m = 2")
        })
    } else {
        None
    };
    if let Some(path) = &args.coupling_out {
        write_atomic(path, matrix_csv(out.coupling.matrix()).as_bytes())?;
    }
    if let Some(path) = &args.correspondence_out {
        write_atomic(path, correspondence_csv(&out.coupling).as_bytes())?;
    }
    let report = QuadReport {
        gw_cost: out.gw_cost,
        cost_trace: out.cost_trace,
        eps_trace: out.eps_trace,
        outer_iterations: out.outer_iterations,
        converged: out.converged,
        inner_unconverged: out.inner_unconverged,
        verify,
    };
    emit_json(&report, args.out.as_deref())?;
    Ok(report)
}

fn correspondence_csv(p: &Coupling) -> String {
    let mut s = String::from("source,target,mass\n");
    for (i, (j, mass)) in p.row_argmax().into_iter().enumerate() {
        s.push_str(&format!("{i},{j},{mass}\n"));
    }
    s
}

/// Builds the problem of `otkit barycenter` from its arguments.
pub fn barycenter_problem(args: &BarycenterArgs) -> anyhow::Result<BarycenterProblem> {
    let geom = if !args.grid.is_empty() {
        let axes = args
            .grid
            .iter()
            .map(|p| read_vector(p).map(|v| v.to_vec()))
            .collect::<anyhow::Result<Vec<_>>>()?;
        Geometry::grid(axes)?
    } else {
        let s = args.support.as_ref().ok_or_else(|| anyhow!("--support or --grid is required"))?;
        let pts = read_matrix(s)?;
        Geometry::point_cloud(pts.clone(), pts, args.cost.into())?
    };
    let n = geom.shape().0;
    let hists = args
        .histograms
        .iter()
        .map(|p| normalize_weights(read_vector(p)?, n, &p.display().to_string()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let w = read_weights(args.weights.as_deref(), hists.len(), "barycenter weights")?;
    Ok(BarycenterProblem::new(geom, hists, w)?)
}

pub fn barycenter_eps(args: &BarycenterArgs, bp: &BarycenterProblem) -> f64 {
    match (args.eps.eps, args.eps.eps_rel) {
        (Some(e), _) => e,
        (None, Some(r)) => bp.geom().relative_epsilon(r),
        (None, None) => bp.geom().epsilon_default(),
    }
}

pub fn barycenter_options(args: &BarycenterArgs) -> BarycenterOptions {
    let d = BarycenterOptions::default();
    BarycenterOptions {
        threshold: args.threshold.unwrap_or(d.threshold),
        max_iters: args.max_iters.unwrap_or(d.max_iters),
    }
}

pub fn run_barycenter(args: &BarycenterArgs) -> anyhow::Result<BarycenterReport> {
    check_eps(&args.eps)?;
    check_positive(args.threshold, "--threshold")?;
    check_count(args.max_iters, "--max-iters")?;
    let bp = barycenter_problem(args)?;
    let eps = barycenter_eps(args, &bp);
    let out = solve_barycenter(&bp, eps, &barycenter_options(args))?;
    let argmax = out
        .barycenter
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    if let Some(path) = &args.barycenter_out {
        let text: String = out.barycenter.iter().map(|v| format!("{v}\n")).collect();
        write_atomic(path, text.as_bytes())?;
    }
    let report = BarycenterReport {
        barycenter: out.barycenter.to_vec(),
        argmax,
        converged: out.converged,
        iterations: out.iterations,
        final_error: out.errors.last().copied().unwrap_or(f64::NAN),
        eps,
    };
    emit_json(&report, args.out.as_deref())?;
    Ok(report)
}

fn parse_list(text: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().with_context(|| format!("{what}: cannot parse {t:?}"))?;
            if !v.is_finite() {
                bail!("{what}: non-finite value {t:?}");
            }
            Ok(v)
        })
        .collect()
}

pub fn softsort_input(args: &SoftsortArgs) -> anyhow::Result<Array1<f64>> {
    match (&args.values, &args.input) {
        (Some(v), _) => Ok(Array1::from(parse_list(v, "--values")?)),
        (None, Some(p)) => read_vector(p),
        (None, None) => bail!("an input file or --values is required"),
    }
}

pub fn softsort_spec(args: &SoftsortArgs, eps: f64) -> SoftSortSpec {
    SoftSortSpec {
        num_targets: args.num_targets,
        eps,
        squash: match args.squash {
            SquashArg::Minmax => Squash::MinMaxRescale,
            SquashArg::None => Squash::None,
        },
        ..SoftSortSpec::default()
    }
}

pub fn run_softsort(args: &SoftsortArgs) -> anyhow::Result<SoftsortReport> {
    check_positive(Some(args.eps), "--eps")?;
    check_count(args.num_targets, "--num-targets")?;
    let x = softsort_input(args)?;
    let spec = softsort_spec(args, args.eps);
    let sorted = soft_sort(&x, &spec)?;
    let ranks = soft_rank(&x, &spec)?;
    let sweep = match &args.eps_sweep {
        Some(list) => {
            let mut rows = Vec::new();
            for eps in parse_list(list, "--eps-sweep")? {
                check_positive(Some(eps), "--eps-sweep entries")?;
                rows.push(SweepRow { eps, sorted_values: soft_sort(&x, &softsort_spec(args, eps))?.to_vec() });
            }
            Some(rows)
        }
        None => None,
    };
    if let (Some(path), Some(rows)) = (&args.sweep_out, &sweep) {
        let mut text = String::new();
        for r in rows {
            let cells: Vec<String> = std::iter::once(r.eps).chain(r.sorted_values.iter().copied()).map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
    }
    let report = SoftsortReport { sorted_values: sorted.to_vec(), ranks: ranks.to_vec(), eps: args.eps, sweep };
    emit_json(&report, args.out.as_deref())?;
    Ok(report)
}

pub fn gmm_options(args: &GmmArgs) -> GmmOptions {
    let d = GmmOptions::default();
    GmmOptions {
        eps_rel: args.eps_rel.unwrap_or(d.eps_rel),
        sinkhorn: SinkhornOptions {
            threshold: args.threshold.unwrap_or(d.sinkhorn.threshold),
            max_iters: args.max_iters.unwrap_or(d.sinkhorn.max_iters),
            ..d.sinkhorn
        },
    }
}

pub fn run_gmm(args: &GmmArgs) -> anyhow::Result<GmmReport> {
    check_positive(args.eps_rel, "--eps-rel")?;
    check_positive(args.threshold, "--threshold")?;
    check_count(args.max_iters, "--max-iters")?;
    let m1 = read_gmm(&args.first)?;
    let m2 = read_gmm(&args.second)?;
    let opts = gmm_options(args);
    let d = gmm_distance(&m1, &m2, &opts)?;
    let report = GmmReport { value: d.value, coupling: to_rows(&d.coupling), cost: to_rows(&d.cost), eps_rel: opts.eps_rel };
    emit_json(&report, args.out.as_deref())?;
    Ok(report)
}

/// Runs one command; `Ok(false)` means results were written but the solver
/// did not converge.
pub fn run(cli: &Cli) -> anyhow::Result<bool> {
    Ok(match &cli.command {
        Command::Lin(a) => run_lin(a)?.converged,
        Command::Quad(a) => run_quad(a)?.converged,
        Command::Barycenter(a) => run_barycenter(a)?.converged,
        Command::Softsort(a) => {
            run_softsort(a)?;
            true
        }
        Command::Gmm(a) => {
            run_gmm(a)?;
            true
        }
    })
}

pub const EXIT_INPUT_ERROR: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;

fn is_convergence_failure(e: &OtError) -> bool {
    match e {
        OtError::NotConverged | OtError::NumericalFailure { .. } => true,
        OtError::Outer { source, .. } => is_convergence_failure(source),
        _ => false,
    }
}

/// Exit code for an error: 2 for solver failures, 1 for everything else.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<OtError>() {
        Some(e) if is_convergence_failure(e) => EXIT_NOT_CONVERGED,
        _ => EXIT_INPUT_ERROR,
    }
}

pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OTKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT_ERROR } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::warn!("solver stopped at its iteration cap before converging");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_file(&dir, "m.csv", "# points\n0.5, 1\n\n2,3e-1\n");
        let m = read_matrix(&p).unwrap();
        assert_eq!(m, ndarray::array![[0.5, 1.0], [2.0, 0.3]]);
        let bad = tmp_file(&dir, "bad.csv", "1,2\n3\n");
        let err = read_matrix(&bad).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        let nan = tmp_file(&dir, "nan.csv", "1\nx\n");
        assert!(read_matrix(&nan).is_err());
        let row = tmp_file(&dir, "row.csv", "0.25,0.75\n");
        assert_eq!(read_vector(&row).unwrap(), ndarray::array![0.25, 0.75]);
        let block = tmp_file(&dir, "block.csv", "1,2\n3,4\n");
        assert!(read_vector(&block).is_err());
    }

    #[test]
    fn weight_rescaling() {
        let w = normalize_weights(ndarray::array![0.5, 0.5000005], 2, "w").unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-15);
        assert!(normalize_weights(ndarray::array![0.5, 0.6], 2, "w").is_err());
        assert!(normalize_weights(ndarray::array![1.5, -0.5], 2, "w").is_err());
        assert!(normalize_weights(ndarray::array![1.0], 2, "w").is_err());
        let exact = ndarray::array![0.25, 0.75];
        assert_eq!(normalize_weights(exact.clone(), 2, "w").unwrap(), exact);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&anyhow::Error::new(OtError::NotConverged)), 2);
        let nested = OtError::Outer {
            outer_iteration: 3,
            source: Box::new(OtError::NumericalFailure { iteration: 1, what: String::new() }),
        };
        assert_eq!(exit_code_for(&anyhow::Error::new(nested)), 2);
        assert_eq!(exit_code_for(&anyhow::Error::new(OtError::InvalidInput("x".into()))), 1);
        assert_eq!(exit_code_for(&anyhow!("cannot open file")), 1);
    }

    #[test]
    fn clap_definition_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_inline_lists() {
        assert_eq!(parse_list("1, 5,4", "v").unwrap(), vec![1.0, 5.0, 4.0]);
        assert!(parse_list("1,,2", "v").is_err());
        assert!(parse_list("inf", "v").is_err());
    }
}
