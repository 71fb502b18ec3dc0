//! Optimal transport solvers: entropic and low-rank Sinkhorn for linear
//! problems, Gromov-Wasserstein for quadratic problems, fixed-support
//! barycenters, soft sorting and Gaussian-mixture transport.

pub mod barycenter;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod lowrank;
pub mod problem;
pub mod quadratic;
pub mod reference;
pub mod sinkhorn;
pub mod tools;

pub use barycenter::{solve_barycenter, BarycenterOptions, BarycenterOutput, BarycenterProblem};
pub use error::{OtError, Result};
pub use geometry::{CostFn, DenseGeometry, Geometry, GridGeometry, KernelAxis, PointCloudGeometry};
pub use lowrank::{lr_coupling, solve_lr_sinkhorn, LowRankFactors, LrOptions, LrOutput};
pub use problem::{Coupling, LinearProblem};
pub use quadratic::{gw_linearized_cost, gw_objective, solve_gw, GwEpsilon, GwOptions, GwOutput, QuadraticProblem};
pub use sinkhorn::{solve_sinkhorn, EpsilonSchedule, RegOtCost, SinkhornOptions, SinkhornOutput};
pub use tools::{bures_w2, gmm_distance, soft_rank, soft_sort, Gaussian, GaussianMixture, GmmDistance, GmmOptions, SoftSortSpec, Squash};
