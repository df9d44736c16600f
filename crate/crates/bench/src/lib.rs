//! Fixtures shared by the benchmarks.

use diva_core::dpmm::{global_step, local_step, summarize, DpmmModel, DpmmPrior};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `n` rows of dimension `d` drawn around `k` random centres.
pub fn mixture(n: usize, d: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = Array2::from_shape_simple_fn((k, d), || 8.0 * rng.random::<f64>() - 4.0);
    Array2::from_shape_fn((n, d), |(i, j)| {
        let e: f64 = rng.sample(StandardNormal);
        centres[(i % k, j)] + 0.5 * e
    })
}

/// A `k`-cluster model after one round of updates on `data`.
pub fn fitted_model(data: &Array2<f64>, k: usize) -> DpmmModel {
    let d = data.ncols();
    let prior = DpmmPrior::new(d, 1.0, 1e-4, 0.1, d as f64 + 2.0).unwrap();
    let mut model = DpmmModel::with_components(prior, k).unwrap();
    for c in 0..k {
        model.nw.mu_hat.row_mut(c).assign(&data.row(c));
    }
    let resp = local_step(data.view(), &model).unwrap();
    global_step(&model, &summarize(data.view(), &resp).unwrap()).unwrap()
}
