//! Independent reference computations shared by the module tests and the
//! acceptance target.

use nalgebra::{DMatrix, DVector};
use pipebo::gp::{kernel, kernel_matrix, random_params, KernelLayout, KernelParams, SurrogateModel};
use pipebo::space::SearchSpace;
use pipebo::structure::{gumbel_max, Decomposition};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{inputs, random_configs, rng, uniform};

pub fn model_for(seed: u64, n: usize) -> (SurrogateModel, SearchSpace, Vec<f64>) {
    let space = SearchSpace::miniature();
    let mut r = rng(seed);
    let layout = KernelLayout::new(&space);
    let z = Decomposition::random(space.n_algorithms(), 4, &mut r);
    let params = random_params(4, space.n_hyperparams(), &mut r);
    let configs = random_configs(&space, n, &mut r);
    let x = inputs(&space, &configs);
    let y: Vec<f64> = (0..n).map(|_| uniform(&mut r)).collect();
    (SurrogateModel::condition(layout, z, params, x, y.clone(), None).unwrap(), space, y)
}

/// Largest deviation of the posterior mean and variance from an LU-inverse
/// solve, over fresh queries and a few training points.
pub fn posterior_deviation(seed: u64) -> f64 {
    let (model, space, y) = model_for(seed, 20);
    assert_eq!(model.jitter(), 0.0);
    let p = model.params().clone();
    let x = model.inputs().to_vec();
    let n = x.len();
    let mut k = kernel_matrix(model.layout(), model.decomposition(), &p, &x);
    for i in 0..n {
        k[(i, i)] += p.noise_variance;
    }
    let kinv = k.clone().try_inverse().expect("LU inverse");
    let mut r = rng(1000 + seed);
    let queries = inputs(&space, &random_configs(&space, 5, &mut r));
    let y = DVector::from_iterator(n, y.iter().map(|v| v - p.mean));
    let mut worst: f64 = 0.0;
    for q in queries.iter().chain(x.iter().take(3)) {
        let ks = DVector::from_iterator(n, x.iter().map(|xi| kernel(model.layout(), model.decomposition(), &p, xi, q)));
        let kss = kernel(model.layout(), model.decomposition(), &p, q, q);
        let mean = p.mean + (ks.transpose() * &kinv * &y)[0];
        let var = kss - (ks.transpose() * &kinv * &ks)[0];
        let (m, v) = model.posterior(q);
        worst = worst.max((m - mean).abs()).max((v - var.max(0.0)).abs());
    }
    worst
}

/// Relative error of the analytic evidence gradient against central
/// differences with step `h` in the unconstrained parameters.
pub fn gradient_error(seed: u64, h: f64) -> f64 {
    let (model, space, _) = model_for(100 + seed, 20);
    let (_, grad) = model.log_marginal_likelihood_with_gradient();
    let theta = model.params().to_unconstrained();
    let hp = space.n_hyperparams();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut t = theta.clone();
                t[i] += d;
                model.with_params(KernelParams::from_unconstrained(&t, 4, hp)).unwrap().log_marginal_likelihood()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    let diff = grad.iter().zip(&fd).map(|(g, f)| (g - f).abs()).fold(0.0, f64::max);
    let scale = fd.iter().map(|f| f.abs()).fold(1.0, f64::max);
    diff / scale
}

/// Smallest eigenvalue over trace of a random 20-point kernel matrix.
pub fn min_eigen_ratio(seed: u64) -> f64 {
    let space = SearchSpace::miniature();
    let mut r = rng(seed);
    let m = 1 + (seed as usize % 5);
    let z = Decomposition::random(space.n_algorithms(), m, &mut r);
    let params = random_params(m, space.n_hyperparams(), &mut r);
    let x = inputs(&space, &random_configs(&space, 20, &mut r));
    let k: DMatrix<f64> = kernel_matrix(&KernelLayout::new(&space), &z, &params, &x);
    let eig = k.clone().symmetric_eigen().eigenvalues;
    eig.min() / k.trace()
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub const GUMBEL_CASES: [&[f64]; 4] =
    [&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 0.5, 0.1, -1.0], &[10.0, 9.0]];

/// Total variation between Gumbel-max argmax frequencies and the softmax.
pub fn gumbel_tv(scores: &[f64], seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut counts = vec![0usize; scores.len()];
    for _ in 0..n {
        counts[gumbel_max(scores, &mut r)] += 1;
    }
    let p = softmax(scores);
    0.5 * counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / n as f64 - q).abs()).sum::<f64>()
}

/// (m1, m2, v1, v2, cov) pairs for the two-point exceedance check.
pub const BIVARIATE_CASES: [(f64, f64, f64, f64, f64); 3] =
    [(0.2, 0.0, 1.0, 0.5, 0.3), (0.0, 0.1, 0.04, 0.09, -0.02), (1.0, 0.4, 2.0, 1.0, 1.2)];

/// P(f1 > f2) for jointly normal (f1, f2).
pub fn exceedance(m1: f64, m2: f64, v1: f64, v2: f64, c: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf((m1 - m2) / f64::sqrt(v1 + v2 - 2.0 * c))
}
