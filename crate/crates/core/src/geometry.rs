//! Cost structures between two discrete supports.
//!
//! A [`Geometry`] answers "apply the cost, the Gibbs kernel `exp(-C/eps)`, or
//! its log-sum-exp counterpart to a vector" without necessarily storing the
//! `n x m` cost matrix. Three backends are provided:
//!
//! - [`DenseGeometry`]: an explicit cost matrix.
//! - [`PointCloudGeometry`]: two point clouds and a ground cost, streamed row
//!   by row.
//! - [`GridGeometry`]: a Cartesian product of 1-D discretizations with a
//!   separable cost, applied axis by axis in `O(d N n)` instead of `O(N^2)`.
//!
//! Grid multi-indices are unraveled in row-major order (last axis fastest).
//! Couplings on grids are reported in that order.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, OtError, Result};

/// Refuse to materialize cost matrices with more entries than this.
pub const DEFAULT_MATERIALIZE_CAP: usize = 1 << 26;

/// Rows per streamed block for point clouds. Performance only.
pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// `epsilon_default = DEFAULT_EPSILON_FACTOR * mean(C)`.
pub const DEFAULT_EPSILON_FACTOR: f64 = 0.05;

const MEAN_SUBSAMPLE_PAIRS: usize = 1000;

/// Which side of the kernel a vector is applied on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelAxis {
    /// `K v`: input has length `m`, output has length `n`.
    Rows,
    /// `K^T v`: input has length `n`, output has length `m`.
    Cols,
}

/// Ground cost between points of a [`PointCloudGeometry`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostFn {
    #[default]
    SqEuclidean,
    Euclidean,
    /// `1 - <x, y> / (|x| |y|)`. Zero vectors are rejected.
    Cosine,
}

impl CostFn {
    fn eval(self, x: &[f64], y: &[f64], norm_x: f64, norm_y: f64) -> f64 {
        match self {
            CostFn::SqEuclidean => sq_dist(x, y),
            CostFn::Euclidean => sq_dist(x, y).sqrt(),
            CostFn::Cosine => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                1.0 - dot / (norm_x * norm_y)
            }
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Explicit `n x m` cost matrix.
#[derive(Clone, Debug)]
pub struct DenseGeometry {
    cost: Array2<f64>,
}

impl DenseGeometry {
    pub fn new(cost: Array2<f64>) -> Result<Self> {
        if cost.nrows() == 0 || cost.ncols() == 0 {
            return Err(invalid("cost matrix must be non-empty"));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(OtError::NonFinite("cost matrix"));
        }
        Ok(Self {
            cost: cost.as_standard_layout().into_owned(),
        })
    }

    pub fn cost(&self) -> &Array2<f64> {
        &self.cost
    }
}

/// Two point clouds `x` (`n x d`) and `y` (`m x d`) with a ground cost.
#[derive(Clone, Debug)]
pub struct PointCloudGeometry {
    x: Array2<f64>,
    y: Array2<f64>,
    cost_fn: CostFn,
    norms_x: Vec<f64>,
    norms_y: Vec<f64>,
    block_rows: usize,
}

impl PointCloudGeometry {
    pub fn new(x: Array2<f64>, y: Array2<f64>, cost_fn: CostFn) -> Result<Self> {
        if x.nrows() == 0 || y.nrows() == 0 {
            return Err(invalid("point clouds must be non-empty"));
        }
        if x.ncols() == 0 {
            return Err(invalid("points must have dimension >= 1"));
        }
        if x.ncols() != y.ncols() {
            return Err(OtError::DimensionMismatch {
                what: "point dimension",
                expected: x.ncols(),
                found: y.ncols(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(OtError::NonFinite("point coordinates"));
        }
        let x = x.as_standard_layout().into_owned();
        let y = y.as_standard_layout().into_owned();
        let norms = |p: &Array2<f64>| -> Vec<f64> {
            p.rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let norms_x = norms(&x);
        let norms_y = norms(&y);
        if cost_fn == CostFn::Cosine && norms_x.iter().chain(&norms_y).any(|&n| n == 0.0) {
            return Err(invalid("cosine cost is undefined for zero vectors"));
        }
        Ok(Self {
            x,
            y,
            cost_fn,
            norms_x,
            norms_y,
            block_rows: DEFAULT_BLOCK_ROWS,
        })
    }

    /// Sets the streaming block size. Results do not depend on it.
    pub fn with_block_rows(mut self, block_rows: usize) -> Self {
        self.block_rows = block_rows.max(1);
        self
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn cost_fn(&self) -> CostFn {
        self.cost_fn
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        let xi = self.x.row(i);
        let yj = self.y.row(j);
        self.cost_fn.eval(
            xi.as_slice().expect("standard layout"),
            yj.as_slice().expect("standard layout"),
            self.norms_x[i],
            self.norms_y[j],
        )
    }
}

/// Product grid with a separable cost `c(i, j) = sum_k c_k(i_k, j_k)`.
///
/// Both marginals live on the same grid, so the geometry is `N x N` with
/// `N = prod n_k`.
#[derive(Clone, Debug)]
pub struct GridGeometry {
    axes: Option<Vec<Array1<f64>>>,
    axis_costs: Vec<Array2<f64>>,
    dims: Vec<usize>,
    size: usize,
}

impl GridGeometry {
    /// Grid from coordinate axes with per-axis cost `(s - t)^2`, so the total
    /// cost is the squared Euclidean distance between grid points.
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("grid needs at least one axis"));
        }
        let mut costs = Vec::with_capacity(axes.len());
        for axis in &axes {
            if axis.is_empty() {
                return Err(invalid("grid axes must be non-empty"));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(OtError::NonFinite("grid axis"));
            }
            let n = axis.len();
            costs.push(Array2::from_shape_fn((n, n), |(i, j)| {
                (axis[i] - axis[j]) * (axis[i] - axis[j])
            }));
        }
        let mut grid = Self::from_axis_costs(costs)?;
        grid.axes = Some(axes.into_iter().map(Array1::from).collect());
        Ok(grid)
    }

    /// Grid defined directly by its per-axis `n_k x n_k` cost matrices.
    pub fn from_axis_costs(axis_costs: Vec<Array2<f64>>) -> Result<Self> {
        if axis_costs.is_empty() {
            return Err(invalid("grid needs at least one axis"));
        }
        let mut dims = Vec::with_capacity(axis_costs.len());
        for c in &axis_costs {
            if c.nrows() == 0 || c.nrows() != c.ncols() {
                return Err(invalid("per-axis cost matrices must be square and non-empty"));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(OtError::NonFinite("per-axis cost"));
            }
            dims.push(c.nrows());
        }
        let size = dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| invalid("grid size overflows usize"))?;
        Ok(Self {
            axes: None,
            axis_costs: axis_costs
                .into_iter()
                .map(|c| c.as_standard_layout().into_owned())
                .collect(),
            dims,
            size,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn axis_costs(&self) -> &[Array2<f64>] {
        &self.axis_costs
    }

    /// Row-major multi-index of flat index `idx`.
    pub fn unravel(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (k, &n) in self.dims.iter().enumerate().rev() {
            out[k] = idx % n;
            idx /= n;
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Enumerates the grid points (`N x d`) in row-major order, if the grid was
    /// built from coordinate axes.
    pub fn points(&self) -> Option<Array2<f64>> {
        let axes = self.axes.as_ref()?;
        let d = axes.len();
        Some(Array2::from_shape_fn((self.size, d), |(i, k)| {
            axes[k][self.unravel(i)[k]]
        }))
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        let (mi, mj) = (self.unravel(i), self.unravel(j));
        self.axis_costs
            .iter()
            .enumerate()
            .map(|(k, c)| c[[mi[k], mj[k]]])
            .sum()
    }

    fn per_axis(&self, axis: KernelAxis, map: impl Fn(f64) -> f64) -> Vec<Array2<f64>> {
        self.axis_costs
            .iter()
            .map(|c| {
                let c = match axis {
                    KernelAxis::Rows => c.view(),
                    KernelAxis::Cols => c.t(),
                };
                c.mapv(&map).as_standard_layout().into_owned()
            })
            .collect()
    }
}

/// Contracts `data` (row-major with shape `dims`) along `axis`:
/// `out[p, i, q] = reduce_j(mat[i, j], data[p, j, q])`.
fn contract_axis(
    data: &[f64],
    dims: &[usize],
    axis: usize,
    mat: &Array2<f64>,
    mut reduce: impl FnMut(ArrayView1<f64>, &[f64]) -> f64,
) -> Vec<f64> {
    let n = dims[axis];
    let pre: usize = dims[..axis].iter().product();
    let post: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut fiber = vec![0.0; n];
    for p in 0..pre {
        for q in 0..post {
            let base = p * n * post + q;
            for (j, slot) in fiber.iter_mut().enumerate() {
                *slot = data[base + j * post];
            }
            for i in 0..n {
                out[base + i * post] = reduce(mat.row(i), &fiber);
            }
        }
    }
    out
}

/// Max-shifted log-sum-exp. Returns `-inf` when every entry is `-inf`.
pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// A cost structure between supports of sizes `n` and `m`.
#[derive(Clone, Debug)]
pub enum Geometry {
    Dense(DenseGeometry),
    PointCloud(PointCloudGeometry),
    Grid(GridGeometry),
}

impl From<DenseGeometry> for Geometry {
    fn from(g: DenseGeometry) -> Self {
        Geometry::Dense(g)
    }
}

impl From<PointCloudGeometry> for Geometry {
    fn from(g: PointCloudGeometry) -> Self {
        Geometry::PointCloud(g)
    }
}

impl From<GridGeometry> for Geometry {
    fn from(g: GridGeometry) -> Self {
        Geometry::Grid(g)
    }
}

impl Geometry {
    pub fn dense(cost: Array2<f64>) -> Result<Self> {
        DenseGeometry::new(cost).map(Into::into)
    }

    pub fn point_cloud(x: Array2<f64>, y: Array2<f64>, cost_fn: CostFn) -> Result<Self> {
        PointCloudGeometry::new(x, y, cost_fn).map(Into::into)
    }

    pub fn grid(axes: Vec<Vec<f64>>) -> Result<Self> {
        GridGeometry::new(axes).map(Into::into)
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Geometry::Dense(g) => g.cost.dim(),
            Geometry::PointCloud(g) => (g.x.nrows(), g.y.nrows()),
            Geometry::Grid(g) => (g.size, g.size),
        }
    }

    /// Single cost entry `c(x_i, y_j)`.
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        match self {
            Geometry::Dense(g) => g.cost[[i, j]],
            Geometry::PointCloud(g) => g.entry(i, j),
            Geometry::Grid(g) => g.entry(i, j),
        }
    }

    pub fn cost_matrix(&self) -> Result<Array2<f64>> {
        self.cost_matrix_capped(DEFAULT_MATERIALIZE_CAP)
    }

    /// Materializes the cost matrix, refusing when `n * m > cap`.
    pub fn cost_matrix_capped(&self, cap: usize) -> Result<Array2<f64>> {
        let (n, m) = self.shape();
        let entries = n.saturating_mul(m);
        if entries > cap {
            return Err(OtError::MaterializationTooLarge { entries, cap });
        }
        Ok(match self {
            Geometry::Dense(g) => g.cost.clone(),
            _ => Array2::from_shape_fn((n, m), |(i, j)| self.cost(i, j)),
        })
    }

    /// Mean cost entry. Exact for dense and grid backends and for small point
    /// clouds; larger point clouds use a fixed-seed subsample of pairs.
    pub fn mean_cost(&self) -> f64 {
        let (n, m) = self.shape();
        match self {
            Geometry::Dense(g) => g.cost.mean().unwrap_or(0.0),
            Geometry::Grid(g) => g
                .axis_costs
                .iter()
                .map(|c| c.mean().unwrap_or(0.0))
                .sum(),
            Geometry::PointCloud(g) => {
                if n * m <= MEAN_SUBSAMPLE_PAIRS {
                    let mut total = 0.0;
                    for i in 0..n {
                        for j in 0..m {
                            total += g.entry(i, j);
                        }
                    }
                    total / (n * m) as f64
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let total: f64 = (0..MEAN_SUBSAMPLE_PAIRS)
                        .map(|_| g.entry(rng.gen_range(0..n), rng.gen_range(0..m)))
                        .sum();
                    total / MEAN_SUBSAMPLE_PAIRS as f64
                }
            }
        }
    }

    /// `factor * mean(C)`, falling back to `factor` itself when the mean cost
    /// is not positive (e.g. all-zero costs).
    pub fn relative_epsilon(&self, factor: f64) -> f64 {
        let mean = self.mean_cost();
        if mean > 0.0 && mean.is_finite() {
            factor * mean
        } else {
            factor
        }
    }

    pub fn epsilon_default(&self) -> f64 {
        self.relative_epsilon(DEFAULT_EPSILON_FACTOR)
    }

    fn input_len(&self, axis: KernelAxis) -> usize {
        let (n, m) = self.shape();
        match axis {
            KernelAxis::Rows => m,
            KernelAxis::Cols => n,
        }
    }

    fn check_vec(&self, v: ArrayView1<f64>, len: usize, what: &'static str) -> Result<()> {
        if v.len() != len {
            return Err(OtError::DimensionMismatch {
                what,
                expected: len,
                found: v.len(),
            });
        }
        Ok(())
    }

    fn check_eps(eps: f64) -> Result<()> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid(format!("epsilon must be positive and finite, got {eps}")));
        }
        Ok(())
    }

    /// Streams `out[o] = reduce(o, c(o, .))` over output indices for the
    /// dense and point-cloud backends. Each output is a sequential reduction,
    /// so results do not depend on blocking or thread count.
    fn stream<F>(&self, axis: KernelAxis, reduce: F) -> Array1<f64>
    where
        F: Fn(&mut dyn FnMut(usize) -> f64, usize) -> f64 + Sync,
    {
        let (n, m) = self.shape();
        let (n_out, block) = match (axis, self) {
            (KernelAxis::Rows, Geometry::PointCloud(g)) => (n, g.block_rows),
            (KernelAxis::Cols, Geometry::PointCloud(g)) => (m, g.block_rows),
            (KernelAxis::Rows, _) => (n, DEFAULT_BLOCK_ROWS),
            (KernelAxis::Cols, _) => (m, DEFAULT_BLOCK_ROWS),
        };
        let mut out = vec![0.0; n_out];
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(b, chunk)| {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let o = b * block + k;
                    let mut cost_at = |p: usize| match axis {
                        KernelAxis::Rows => self.cost(o, p),
                        KernelAxis::Cols => self.cost(p, o),
                    };
                    *slot = reduce(&mut cost_at, o);
                }
            });
        Array1::from(out)
    }

    /// `K v` (rows) or `K^T v` (cols) with `K = exp(-C / eps)`.
    pub fn apply_kernel(&self, v: ArrayView1<f64>, eps: f64, axis: KernelAxis) -> Result<Array1<f64>> {
        Self::check_eps(eps)?;
        self.check_vec(v, self.input_len(axis), "kernel input")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(OtError::NonFinite("kernel input"));
        }
        if let Geometry::Grid(g) = self {
            let kernels = g.per_axis(axis, |c| (-c / eps).exp());
            let mut data = v.to_vec();
            for (k, mat) in kernels.iter().enumerate() {
                data = contract_axis(&data, &g.dims, k, mat, |row, fiber| {
                    row.iter().zip(fiber).map(|(a, b)| a * b).sum()
                });
            }
            return Ok(Array1::from(data));
        }
        let len = v.len();
        Ok(self.stream(axis, |cost_at, _| {
            (0..len).map(|p| (-cost_at(p) / eps).exp() * v[p]).sum()
        }))
    }

    /// Log-domain kernel application.
    ///
    /// Rows: `out_i = eps * log sum_j exp((f_i + g_j - C_ij) / eps)`.
    /// Cols: `out_j = eps * log sum_i exp((f_i + g_j - C_ij) / eps)`.
    ///
    /// Potentials may contain `-inf` (zero-weight points); `NaN` and `+inf`
    /// are rejected.
    pub fn apply_lse_kernel<'a>(
        &self,
        f: ArrayView1<'a, f64>,
        g: ArrayView1<'a, f64>,
        eps: f64,
        axis: KernelAxis,
    ) -> Result<Array1<f64>> {
        Self::check_eps(eps)?;
        let (n, m) = self.shape();
        self.check_vec(f, n, "row potential")?;
        self.check_vec(g, m, "column potential")?;
        if f.iter().chain(g.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(OtError::NonFinite("potentials"));
        }
        let (own, other) = match axis {
            KernelAxis::Rows => (f, g),
            KernelAxis::Cols => (g, f),
        };
        if let Geometry::Grid(grid) = self {
            let scaled = grid.per_axis(axis, |c| c / eps);
            let mut data: Vec<f64> = other.iter().map(|x| x / eps).collect();
            for (k, mat) in scaled.iter().enumerate() {
                let mut buf = vec![0.0; grid.dims[k]];
                data = contract_axis(&data, &grid.dims, k, mat, |row, fiber| {
                    for ((slot, c), h) in buf.iter_mut().zip(row).zip(fiber) {
                        *slot = h - c;
                    }
                    logsumexp(&buf)
                });
            }
            return Ok(Array1::from_iter(
                own.iter().zip(data).map(|(o, h)| o + eps * h),
            ));
        }
        let len = other.len();
        Ok(self.stream(axis, |cost_at, o| {
            if own[o] == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let buf: Vec<f64> = (0..len).map(|p| (other[p] - cost_at(p)) / eps).collect();
            own[o] + eps * logsumexp(&buf)
        }))
    }

    /// `C v` (rows) or `C^T v` (cols), matrix-free.
    pub fn apply_cost(&self, v: ArrayView1<f64>, axis: KernelAxis) -> Result<Array1<f64>> {
        self.check_vec(v, self.input_len(axis), "cost input")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(OtError::NonFinite("cost input"));
        }
        if let Geometry::Grid(g) = self {
            let costs = g.per_axis(axis, |c| c);
            let mut total = vec![0.0; g.size];
            for (k, cost_k) in costs.iter().enumerate() {
                let mut data = v.to_vec();
                for (l, &n_l) in g.dims.iter().enumerate() {
                    let ones;
                    let mat = if l == k {
                        cost_k
                    } else {
                        ones = Array2::ones((n_l, n_l));
                        &ones
                    };
                    data = contract_axis(&data, &g.dims, l, mat, |row, fiber| {
                        row.iter().zip(fiber).map(|(a, b)| a * b).sum()
                    });
                }
                for (t, d) in total.iter_mut().zip(data) {
                    *t += d;
                }
            }
            return Ok(Array1::from(total));
        }
        let len = v.len();
        Ok(self.stream(axis, |cost_at, _| (0..len).map(|p| cost_at(p) * v[p]).sum()))
    }
}
