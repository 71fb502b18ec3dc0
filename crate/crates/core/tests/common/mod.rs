#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen::<f64>())
}

/// Strictly positive weights summing to 1.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w = Array1::from_shape_fn(n, |_| 0.1 + rng.gen::<f64>());
    &w / w.sum()
}

/// Squared Euclidean distances computed entry by entry.
pub fn sq_dist(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

pub fn mean(m: &Array2<f64>) -> f64 {
    m.sum() / m.len() as f64
}

pub fn l1(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    (x - y).mapv(f64::abs).sum()
}

pub fn max_abs_diff<'a>(x: impl IntoIterator<Item = &'a f64>, y: impl IntoIterator<Item = &'a f64>) -> f64 {
    x.into_iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn max_abs<'a>(x: impl IntoIterator<Item = &'a f64>) -> f64 {
    x.into_iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// `d x d` rotation in the plane of the first two coordinates.
pub fn rotation(d: usize, angle: f64) -> Array2<f64> {
    let mut r = Array2::eye(d);
    let (s, c) = angle.sin_cos();
    r[[0, 0]] = c;
    r[[0, 1]] = -s;
    r[[1, 0]] = s;
    r[[1, 1]] = c;
    r
}
