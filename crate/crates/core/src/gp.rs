//! Gaussian-process surrogate with a sparse additive kernel.
//!
//! The kernel is a sum of one component per subspace of a
//! [`Decomposition`]. Component `m` is
//!
//! ```text
//! k_m(a, b) = s2_m * agree_m(a, b) * (rho_m + (1 - rho_m) * matern52(r_m(a, b)))
//! ```
//!
//! `agree_m` is 1 when, at every stage where either point chose an
//! algorithm owned by `m`, both points chose the same algorithm, and 0
//! otherwise. `r_m` is the lengthscale-scaled distance over the
//! hyperparameters of the `m`-owned algorithms active in both points
//! (numeric dims contribute `(xa - xb)^2 / l^2`, categorical dims
//! `[xa != xb] / l^2`). A component whose algorithms neither point uses
//! contributes `s2_m`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{maximize_in_box, AscentOptions};
use crate::rng::Rng;
use crate::space::{EncodedPoint, SearchSpace};
use crate::structure::Decomposition;

pub const NOISE_FLOOR: f64 = 1e-6;
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
const SQRT5: f64 = 2.236_067_977_499_79;

const LOG_SIGNAL_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, 4.605_170_185_988_092); // [1e-6, 100]
const LOGIT_RHO_BOUNDS: (f64, f64) = (-8.0, 4.0);
const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 2.995_732_273_553_991); // [0.01, 20]
const LOG_NOISE_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, std::f64::consts::LN_10); // [1e-6, 10]
const MEAN_BOUNDS: (f64, f64) = (-100.0, 100.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// One per subspace.
    pub signal_variance: Vec<f64>,
    /// Shared correlation floor within a component, one per subspace.
    pub rho: Vec<f64>,
    /// One per hyperparameter dimension, in encoding order. Each dimension
    /// belongs to the subspace of its algorithm.
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
    pub mean: f64,
}

impl KernelParams {
    pub fn new(n_subspaces: usize, n_hyperparams: usize) -> Self {
        KernelParams {
            signal_variance: vec![1.0 / n_subspaces as f64; n_subspaces],
            rho: vec![0.1; n_subspaces],
            lengthscales: vec![0.5; n_hyperparams],
            noise_variance: 1e-3,
            mean: 0.0,
        }
    }

    /// Data-scaled starting point for fitting.
    pub fn initial(n_subspaces: usize, n_hyperparams: usize, y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-4);
        KernelParams {
            signal_variance: vec![var / n_subspaces as f64; n_subspaces],
            rho: vec![0.2; n_subspaces],
            lengthscales: vec![0.5; n_hyperparams],
            noise_variance: (0.01 * var).max(NOISE_FLOOR),
            mean,
        }
    }

    pub fn n_subspaces(&self) -> usize {
        self.signal_variance.len()
    }

    pub fn total_signal_variance(&self) -> f64 {
        self.signal_variance.iter().sum()
    }

    pub fn validate(&self, n_subspaces: usize, n_hyperparams: usize) -> Result<()> {
        if self.signal_variance.len() != n_subspaces || self.rho.len() != n_subspaces {
            return Err(Error::DimensionMismatch { expected: n_subspaces, got: self.signal_variance.len() });
        }
        if self.lengthscales.len() != n_hyperparams {
            return Err(Error::DimensionMismatch { expected: n_hyperparams, got: self.lengthscales.len() });
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.signal_variance.iter().all(|&v| positive(v))
            || !self.lengthscales.iter().all(|&v| positive(v))
            || !self.rho.iter().all(|&r| (0.0..1.0).contains(&r))
            || !(self.noise_variance.is_finite() && self.noise_variance >= NOISE_FLOOR)
            || !self.mean.is_finite()
        {
            return Err(Error::InvalidArgument("kernel parameters outside their valid ranges".into()));
        }
        Ok(())
    }

    /// Unconstrained coordinates: log signal variances, logit rhos, log
    /// lengthscales, log noise, mean.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.n_subspaces() + self.lengthscales.len() + 2);
        v.extend(self.signal_variance.iter().map(|s| s.ln()));
        v.extend(self.rho.iter().map(|r| (r / (1.0 - r)).ln()));
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v.push(self.mean);
        v
    }

    pub fn from_unconstrained(theta: &[f64], n_subspaces: usize, n_hyperparams: usize) -> Self {
        let m = n_subspaces;
        let h = n_hyperparams;
        debug_assert_eq!(theta.len(), 2 * m + h + 2);
        KernelParams {
            signal_variance: theta[..m].iter().map(|v| v.exp()).collect(),
            rho: theta[m..2 * m].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            lengthscales: theta[2 * m..2 * m + h].iter().map(|v| v.exp()).collect(),
            noise_variance: theta[2 * m + h].exp().max(NOISE_FLOOR),
            mean: theta[2 * m + h + 1],
        }
    }

    pub fn unconstrained_bounds(n_subspaces: usize, n_hyperparams: usize) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(2 * n_subspaces + n_hyperparams + 2);
        b.extend(std::iter::repeat_n(LOG_SIGNAL_BOUNDS, n_subspaces));
        b.extend(std::iter::repeat_n(LOGIT_RHO_BOUNDS, n_subspaces));
        b.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS, n_hyperparams));
        b.push(LOG_NOISE_BOUNDS);
        b.push(MEAN_BOUNDS);
        b
    }

    /// Clamps every parameter into its fitting box.
    pub fn clamped(&self) -> Self {
        let m = self.n_subspaces();
        let h = self.lengthscales.len();
        let mut theta = self.to_unconstrained();
        for (v, (lo, hi)) in theta.iter_mut().zip(Self::unconstrained_bounds(m, h)) {
            *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        }
        Self::from_unconstrained(&theta, m, h)
    }
}

/// The parts of a [`SearchSpace`] the kernel needs.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    n_stages: usize,
    stage_offsets: Vec<usize>,
    /// Per algorithm: (first hyperparameter dim, count), relative to the
    /// hyperparameter block of the encoding.
    alg_dims: Vec<(usize, usize)>,
    categorical: Vec<bool>,
}

impl KernelLayout {
    pub fn new(space: &SearchSpace) -> Self {
        let s = space.n_stages();
        let alg_dims = (0..space.n_algorithms())
            .map(|g| {
                let r = space.algorithm_ref(g);
                (r.first_dim - s, r.n_dims)
            })
            .collect();
        let categorical = space.dim_info()[s..].iter().map(|d| d.categorical).collect();
        let stage_offsets = (0..s).map(|si| space.global_index(si, 0)).collect();
        KernelLayout { n_stages: s, stage_offsets, alg_dims, categorical }
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn n_algorithms(&self) -> usize {
        self.alg_dims.len()
    }

    pub fn n_hyperparams(&self) -> usize {
        self.categorical.len()
    }

    pub fn input(&self, point: &EncodedPoint) -> Result<GpInput> {
        let expected = self.n_stages + self.categorical.len();
        if point.values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: point.values.len() });
        }
        let choices = (0..self.n_stages).map(|si| self.stage_offsets[si] + point.values[si].round() as usize).collect();
        Ok(GpInput { choices, x: point.values[self.n_stages..].to_vec() })
    }

    fn sq_dist(&self, d: usize, a: f64, b: f64) -> f64 {
        if self.categorical[d] {
            if a == b {
                0.0
            } else {
                1.0
            }
        } else {
            (a - b) * (a - b)
        }
    }
}

/// A point as seen by the kernel: chosen algorithm per stage (global
/// indices) and the hyperparameter block of its encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct GpInput {
    pub choices: Vec<usize>,
    pub x: Vec<f64>,
}

fn matern52(r: f64) -> f64 {
    let sr = SQRT5 * r;
    (1.0 + sr + sr * sr / 3.0) * (-sr).exp()
}

/// `-(dM/dr) / r`, finite at `r = 0`.
fn matern52_grad_over_r(r: f64) -> f64 {
    let sr = SQRT5 * r;
    (5.0 / 3.0) * (1.0 + sr) * (-sr).exp()
}

/// Per-component agreement flags and squared scaled distances for one pair,
/// reusable across pairs.
struct PairTerms {
    agree: Vec<bool>,
    r2: Vec<f64>,
}

impl PairTerms {
    fn new(m: usize) -> Self {
        PairTerms { agree: vec![true; m], r2: vec![0.0; m] }
    }

    fn fill(&mut self, layout: &KernelLayout, z: &Decomposition, params: &KernelParams, a: &GpInput, b: &GpInput) {
        self.agree.fill(true);
        self.r2.fill(0.0);
        for (&ga, &gb) in a.choices.iter().zip(&b.choices) {
            if ga != gb {
                self.agree[z.get(ga)] = false;
                self.agree[z.get(gb)] = false;
            }
        }
        for (&ga, &gb) in a.choices.iter().zip(&b.choices) {
            if ga == gb {
                let c = z.get(ga);
                if self.agree[c] {
                    let (start, len) = layout.alg_dims[ga];
                    for d in start..start + len {
                        let l = params.lengthscales[d];
                        self.r2[c] += layout.sq_dist(d, a.x[d], b.x[d]) / (l * l);
                    }
                }
            }
        }
    }

    fn component(&self, params: &KernelParams, c: usize) -> f64 {
        if self.agree[c] {
            let rho = params.rho[c];
            params.signal_variance[c] * (rho + (1.0 - rho) * matern52(self.r2[c].sqrt()))
        } else {
            0.0
        }
    }

    fn total(&self, params: &KernelParams) -> f64 {
        (0..self.agree.len()).map(|c| self.component(params, c)).sum()
    }
}

/// Kernel value and its per-component terms.
pub fn kernel_components(
    layout: &KernelLayout,
    z: &Decomposition,
    params: &KernelParams,
    a: &GpInput,
    b: &GpInput,
) -> Vec<f64> {
    let mut t = PairTerms::new(z.n_subspaces());
    t.fill(layout, z, params, a, b);
    (0..z.n_subspaces()).map(|c| t.component(params, c)).collect()
}

pub fn kernel(layout: &KernelLayout, z: &Decomposition, params: &KernelParams, a: &GpInput, b: &GpInput) -> f64 {
    let mut t = PairTerms::new(z.n_subspaces());
    t.fill(layout, z, params, a, b);
    t.total(params)
}

/// Kernel value between two encoded points of `space`.
pub fn kernel_value(
    space: &SearchSpace,
    z: &Decomposition,
    params: &KernelParams,
    a: &EncodedPoint,
    b: &EncodedPoint,
) -> Result<f64> {
    z.check_space(space)?;
    params.validate(z.n_subspaces(), space.n_hyperparams())?;
    let layout = KernelLayout::new(space);
    Ok(kernel(&layout, z, params, &layout.input(a)?, &layout.input(b)?))
}

pub fn kernel_matrix(
    layout: &KernelLayout,
    z: &Decomposition,
    params: &KernelParams,
    inputs: &[GpInput],
) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    let mut t = PairTerms::new(z.n_subspaces());
    for i in 0..n {
        for j in 0..=i {
            t.fill(layout, z, params, &inputs[i], &inputs[j]);
            let v = t.total(params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(mut k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let scale = (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut added = 0.0;
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Factorization { n, jitter: added })
}

/// A GP conditioned on observations under a fixed decomposition and
/// fixed kernel parameters. Immutable once built.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    layout: KernelLayout,
    z: Decomposition,
    params: KernelParams,
    inputs: Vec<GpInput>,
    y: Vec<f64>,
    extra_noise: Option<Vec<f64>>,
    factor: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl SurrogateModel {
    /// Conditions the GP on `(inputs, y)`. `extra_noise`, when given, adds a
    /// per-observation variance on top of the global noise.
    pub fn condition(
        layout: KernelLayout,
        z: Decomposition,
        params: KernelParams,
        inputs: Vec<GpInput>,
        y: Vec<f64>,
        extra_noise: Option<Vec<f64>>,
    ) -> Result<Self> {
        if inputs.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: y.len() });
        }
        if let Some(e) = &extra_noise {
            if e.len() != y.len() {
                return Err(Error::DimensionMismatch { expected: y.len(), got: e.len() });
            }
        }
        if z.n_algorithms() != layout.n_algorithms() {
            return Err(Error::DimensionMismatch { expected: layout.n_algorithms(), got: z.n_algorithms() });
        }
        params.validate(z.n_subspaces(), layout.n_hyperparams())?;
        let n = y.len();
        if n == 0 {
            return Ok(SurrogateModel {
                layout,
                z,
                params,
                inputs,
                y,
                extra_noise,
                factor: None,
                alpha: DVector::zeros(0),
                jitter: 0.0,
            });
        }
        let mut k = kernel_matrix(&layout, &z, &params, &inputs);
        for i in 0..n {
            k[(i, i)] += params.noise_variance + extra_noise.as_ref().map_or(0.0, |e| e[i]);
        }
        let (factor, jitter) = factorize(k)?;
        let resid = DVector::from_iterator(n, y.iter().map(|v| v - params.mean));
        let alpha = factor.solve(&resid);
        Ok(SurrogateModel { layout, z, params, inputs, y, extra_noise, factor: Some(factor), alpha, jitter })
    }

    /// Replaces the constant mean by its generalized least-squares estimate
    /// under the current covariance, which maximizes the evidence over it.
    pub fn profile_mean(&mut self) {
        let Some(factor) = &self.factor else { return };
        let n = self.y.len();
        let ky = factor.solve(&DVector::from_column_slice(&self.y));
        let k1 = factor.solve(&DVector::from_element(n, 1.0));
        let mean = (ky.sum() / k1.sum()).clamp(MEAN_BOUNDS.0, MEAN_BOUNDS.1);
        if mean.is_finite() {
            self.params.mean = mean;
            self.alpha = ky - k1 * mean;
        }
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.z
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn inputs(&self) -> &[GpInput] {
        &self.inputs
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Log evidence `log N(y; mean, K + noise)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(factor) = &self.factor else { return 0.0 };
        let n = self.y.len() as f64;
        let resid = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - self.params.mean));
        let log_det: f64 = factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * resid.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Log evidence and its gradient with respect to
    /// [`KernelParams::to_unconstrained`] coordinates.
    pub fn log_marginal_likelihood_with_gradient(&self) -> (f64, Vec<f64>) {
        let m = self.z.n_subspaces();
        let h = self.layout.n_hyperparams();
        let mut grad = vec![0.0; 2 * m + h + 2];
        let Some(factor) = &self.factor else { return (0.0, grad) };
        let value = self.log_marginal_likelihood();
        let n = self.y.len();
        let kinv = factor.inverse();
        let p = &self.params;
        let alpha = &self.alpha;
        let mut t = PairTerms::new(m);

        for i in 0..n {
            for j in 0..=i {
                let w = alpha[i] * alpha[j] - kinv[(i, j)];
                // Off-diagonal pairs appear twice in the trace.
                let w = if i == j { 0.5 * w } else { w };
                let a = &self.inputs[i];
                let b = &self.inputs[j];
                t.fill(&self.layout, &self.z, p, a, b);
                for c in 0..m {
                    if !t.agree[c] {
                        continue;
                    }
                    let r = t.r2[c].sqrt();
                    let mat = matern52(r);
                    let (s2, rho) = (p.signal_variance[c], p.rho[c]);
                    grad[c] += w * s2 * (rho + (1.0 - rho) * mat);
                    grad[m + c] += w * s2 * (1.0 - mat) * rho * (1.0 - rho);
                }
                for (&ga, &gb) in a.choices.iter().zip(&b.choices) {
                    if ga != gb {
                        continue;
                    }
                    let c = self.z.get(ga);
                    if !t.agree[c] {
                        continue;
                    }
                    let factor_c = w * p.signal_variance[c] * (1.0 - p.rho[c]) * matern52_grad_over_r(t.r2[c].sqrt());
                    let (start, len) = self.layout.alg_dims[ga];
                    for d in start..start + len {
                        let l2 = p.lengthscales[d] * p.lengthscales[d];
                        grad[2 * m + d] += factor_c * self.layout.sq_dist(d, a.x[d], b.x[d]) / l2;
                    }
                }
            }
        }
        // d/dlog(noise): noise * tr(W) / 2
        let mut trace_w = 0.0;
        for i in 0..n {
            trace_w += alpha[i] * alpha[i] - kinv[(i, i)];
        }
        grad[2 * m + h] = 0.5 * p.noise_variance * trace_w;
        grad[2 * m + h + 1] = alpha.sum();
        (value, grad)
    }

    fn cross_covariance(&self, query: &GpInput, component: Option<usize>) -> DVector<f64> {
        let mut t = PairTerms::new(self.z.n_subspaces());
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| {
                t.fill(&self.layout, &self.z, &self.params, query, xi);
                match component {
                    None => t.total(&self.params),
                    Some(c) => t.component(&self.params, c),
                }
            }),
        )
    }

    /// Predictive mean and variance of the latent function.
    pub fn posterior(&self, query: &GpInput) -> (f64, f64) {
        let prior_var = kernel(&self.layout, &self.z, &self.params, query, query);
        let Some(factor) = &self.factor else { return (self.params.mean, prior_var) };
        let ks = self.cross_covariance(query, None);
        let mean = self.params.mean + ks.dot(&self.alpha);
        let v = factor.l_dirty().solve_lower_triangular(&ks).expect("triangular factor is nonsingular");
        (mean, (prior_var - v.dot(&v)).max(0.0))
    }

    pub fn posterior_at(&self, query: &EncodedPoint) -> Result<(f64, f64)> {
        Ok(self.posterior(&self.layout.input(query)?))
    }

    /// Posterior of the additive component `c` given all observations.
    pub fn component_posterior(&self, c: usize, query: &GpInput) -> Result<(f64, f64)> {
        if c >= self.z.n_subspaces() {
            return Err(Error::InvalidArgument(format!(
                "subspace index {c} out of range (M = {})",
                self.z.n_subspaces()
            )));
        }
        let prior_var = kernel_components(&self.layout, &self.z, &self.params, query, query)[c];
        let Some(factor) = &self.factor else { return Ok((0.0, prior_var)) };
        let ks = self.cross_covariance(query, Some(c));
        let mean = ks.dot(&self.alpha);
        let v = factor.l_dirty().solve_lower_triangular(&ks).expect("triangular factor is nonsingular");
        Ok((mean, (prior_var - v.dot(&v)).max(0.0)))
    }

    /// Joint posterior mean and covariance of the latent function at
    /// `queries`.
    pub fn joint_posterior(&self, queries: &[GpInput]) -> (DVector<f64>, DMatrix<f64>) {
        let q = queries.len();
        let prior = kernel_matrix(&self.layout, &self.z, &self.params, queries);
        let Some(factor) = &self.factor else {
            return (DVector::from_element(q, self.params.mean), prior);
        };
        let n = self.inputs.len();
        let mut kx = DMatrix::zeros(n, q);
        let mut t = PairTerms::new(self.z.n_subspaces());
        for (j, qj) in queries.iter().enumerate() {
            for (i, xi) in self.inputs.iter().enumerate() {
                t.fill(&self.layout, &self.z, &self.params, xi, qj);
                kx[(i, j)] = t.total(&self.params);
            }
        }
        let mean = kx.transpose() * &self.alpha + DVector::from_element(q, self.params.mean);
        let v = factor.l_dirty().solve_lower_triangular(&kx).expect("triangular factor is nonsingular");
        let mut cov = prior - v.transpose() * v;
        // symmetrize round-off
        for i in 0..q {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        (mean, cov)
    }

    /// Same data, different parameters.
    pub fn with_params(&self, params: KernelParams) -> Result<Self> {
        Self::condition(
            self.layout.clone(),
            self.z.clone(),
            params,
            self.inputs.clone(),
            self.y.clone(),
            self.extra_noise.clone(),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { restarts: 3, max_iter: 60 }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: KernelParams,
    pub log_marginal_likelihood: f64,
    /// Objective trace of the winning restart.
    pub trace: Vec<f64>,
}

/// Maximizes the log marginal likelihood over kernel parameters from
/// `options.restarts` starting points: `init` (or a data-scaled default)
/// first, the data-scaled default second when `init` was given, then seeded
/// perturbations of `init`. The constant mean is profiled out at every
/// step. Returns the best restart.
#[allow(clippy::too_many_arguments)]
pub fn fit_params(
    layout: &KernelLayout,
    z: &Decomposition,
    inputs: &[GpInput],
    y: &[f64],
    extra_noise: Option<&[f64]>,
    init: Option<&KernelParams>,
    options: FitOptions,
    rng: &mut Rng,
) -> Result<FitResult> {
    if y.len() < 2 {
        return Err(Error::InsufficientData("fitting kernel parameters needs at least 2 observations".into()));
    }
    let m = z.n_subspaces();
    let h = layout.n_hyperparams();
    let base = match init {
        Some(p) => {
            p.validate(m, h)?;
            p.clamped()
        }
        None => KernelParams::initial(m, h, y),
    };
    let bounds = KernelParams::unconstrained_bounds(m, h);
    let theta0 = base.to_unconstrained();

    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let params = KernelParams::from_unconstrained(theta, m, h);
        let mut model = SurrogateModel::condition(
            layout.clone(),
            z.clone(),
            params,
            inputs.to_vec(),
            y.to_vec(),
            extra_noise.map(|e| e.to_vec()),
        )
        .ok()?;
        model.profile_mean();
        let (v, mut g) = model.log_marginal_likelihood_with_gradient();
        // the mean coordinate is profiled out
        g[2 * m + h + 1] = 0.0;
        v.is_finite().then_some((v, g))
    };
    let profiled = |theta: &[f64]| -> Option<(KernelParams, f64)> {
        let mut model = SurrogateModel::condition(
            layout.clone(),
            z.clone(),
            KernelParams::from_unconstrained(theta, m, h),
            inputs.to_vec(),
            y.to_vec(),
            extra_noise.map(|e| e.to_vec()),
        )
        .ok()?;
        model.profile_mean();
        Some((model.params.clone(), model.log_marginal_likelihood()))
    };

    let mut best: Option<FitResult> = None;
    let mut last_error = None;
    for restart in 0..options.restarts.max(1) {
        let start: Vec<f64> = if restart == 0 {
            theta0.clone()
        } else if restart == 1 && init.is_some() {
            KernelParams::initial(m, h, y).to_unconstrained()
        } else {
            theta0
                .iter()
                .zip(&bounds)
                .enumerate()
                .map(|(i, (&v, &(lo, hi)))| {
                    let noise: f64 = StandardNormal.sample(rng);
                    // perturb everything but the mean in log/logit space
                    let scale = if i == bounds.len() - 1 { 0.0 } else { 1.0 };
                    (v + scale * noise).clamp(lo, hi)
                })
                .collect()
        };
        let opts = AscentOptions { max_iter: options.max_iter, ..Default::default() };
        match maximize_in_box(objective, &start, &bounds, opts) {
            Some(r) => {
                if best.as_ref().is_none_or(|b| r.value > b.log_marginal_likelihood) {
                    if let Some((params, value)) = profiled(&r.x) {
                        best = Some(FitResult { params, log_marginal_likelihood: value, trace: r.trace });
                    }
                }
            }
            None => last_error = Some(restart),
        }
    }
    best.ok_or_else(|| {
        log::warn!("all {} fitting restarts failed (last: {:?})", options.restarts, last_error);
        Error::Factorization { n: y.len(), jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] }
    })
}

/// Draws a random valid parameter set (used by tests and benchmarks).
pub fn random_params(n_subspaces: usize, n_hyperparams: usize, rng: &mut Rng) -> KernelParams {
    KernelParams {
        signal_variance: (0..n_subspaces).map(|_| rng.random_range(0.05..2.0)).collect(),
        rho: (0..n_subspaces).map(|_| rng.random_range(0.0..0.9)).collect(),
        lengthscales: (0..n_hyperparams).map(|_| rng.random_range(0.05..2.0)).collect(),
        noise_variance: rng.random_range(1e-4..1e-1),
        mean: rng.random_range(-1.0..1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::space::SearchSpace;

    pub(crate) fn toy_space() -> SearchSpace {
        SearchSpace::from_toml(
            r#"
            [[stages]]
            stage = "feature_processing"
            [[stages.algorithms]]
            name = "pca"
            hyperparams = [
              { name = "keep", kind = "continuous", bounds = [0.0, 1.0], default = 0.5 },
              { name = "whiten", kind = "categorical", choices = ["no", "yes"], default = "no" },
            ]
            [[stages.algorithms]]
            name = "none"
            [[stages]]
            stage = "prediction"
            [[stages.algorithms]]
            name = "forest"
            hyperparams = [
              { name = "depth", kind = "integer", bounds = [1, 10], default = 3 },
              { name = "frac", kind = "continuous", bounds = [0.1, 1.0], default = 0.5 },
            ]
            [[stages.algorithms]]
            name = "knn"
            hyperparams = [ { name = "k", kind = "integer", bounds = [1, 50], default = 5 } ]
            [[stages.algorithms]]
            name = "logreg"
            "#,
        )
        .unwrap()
    }

    fn random_inputs(space: &SearchSpace, n: usize, rng: &mut Rng) -> (KernelLayout, Vec<GpInput>) {
        let layout = KernelLayout::new(space);
        let inputs = (0..n).map(|_| layout.input(&space.encode(&space.sample_with(rng)).unwrap()).unwrap()).collect();
        (layout, inputs)
    }

    #[test]
    fn self_covariance_is_total_signal_variance() {
        let space = toy_space();
        let mut r = rng::from_seed(1);
        let z = Decomposition::random(space.n_algorithms(), 3, &mut r);
        let p = random_params(3, space.n_hyperparams(), &mut r);
        for _ in 0..20 {
            let a = space.encode(&space.sample_with(&mut r)).unwrap();
            let k = kernel_value(&space, &z, &p, &a, &a).unwrap();
            assert!((k - p.total_signal_variance()).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_choices_zero_out_component() {
        let space = toy_space();
        // pca, forest in subspace 0; everything else in 1
        let z = Decomposition::new(vec![0, 1, 0, 1, 1], 2).unwrap();
        let mut p = KernelParams::new(2, space.n_hyperparams());
        p.rho = vec![0.0, 0.0];
        let a = space.encode(&space.default_config(&[0, 2])).unwrap(); // pca, forest
        let b = space.encode(&space.default_config(&[1, 3])).unwrap(); // none, knn
        let layout = KernelLayout::new(&space);
        let comps = kernel_components(&layout, &z, &p, &layout.input(&a).unwrap(), &layout.input(&b).unwrap());
        assert_eq!(comps[0], 0.0);
        assert_eq!(comps[1], 0.0, "none vs knn disagree at stages owned by 1 in both points");
    }

    #[test]
    fn relabeling_subspaces_leaves_kernel_unchanged() {
        let space = toy_space();
        let mut r = rng::from_seed(2);
        let z = Decomposition::random(space.n_algorithms(), 3, &mut r);
        let p = random_params(3, space.n_hyperparams(), &mut r);
        let perm = [2usize, 0, 1];
        let z2 = Decomposition::new(z.assignment().iter().map(|&c| perm[c]).collect(), 3).unwrap();
        let mut p2 = p.clone();
        for (c, &to) in perm.iter().enumerate() {
            p2.signal_variance[to] = p.signal_variance[c];
            p2.rho[to] = p.rho[c];
        }
        let (layout, xs) = random_inputs(&space, 10, &mut r);
        for a in &xs {
            for b in &xs {
                let k1 = kernel(&layout, &z, &p, a, b);
                let k2 = kernel(&layout, &z2, &p2, a, b);
                assert!((k1 - k2).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_observation_evidence_is_closed_form() {
        let space = toy_space();
        let layout = KernelLayout::new(&space);
        let z = Decomposition::single(space.n_algorithms());
        let mut p = KernelParams::new(1, space.n_hyperparams());
        p.signal_variance = vec![0.7];
        p.noise_variance = 0.05;
        p.mean = 0.2;
        let x = layout.input(&space.encode(&space.sample_config(3)).unwrap()).unwrap();
        let y = 0.9;
        let model = SurrogateModel::condition(layout, z, p, vec![x], vec![y], None).unwrap();
        let v: f64 = 0.7 + 0.05;
        let expected = -0.5 * (y - 0.2f64).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        assert!((model.log_marginal_likelihood() - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_observation_does_not_increase_evidence_per_point() {
        let space = toy_space();
        let layout = KernelLayout::new(&space);
        let z = Decomposition::single(space.n_algorithms());
        let mut p = KernelParams::new(1, space.n_hyperparams());
        p.noise_variance = NOISE_FLOOR;
        let x = layout.input(&space.encode(&space.sample_config(4)).unwrap()).unwrap();
        let one =
            SurrogateModel::condition(layout.clone(), z.clone(), p.clone(), vec![x.clone()], vec![0.3], None).unwrap();
        let two = SurrogateModel::condition(layout, z, p, vec![x.clone(), x], vec![0.3, 0.3], None).unwrap();
        assert!(two.log_marginal_likelihood().is_finite());
        assert!(two.log_marginal_likelihood() >= one.log_marginal_likelihood());
    }

    #[test]
    fn empty_history_gives_prior() {
        let space = toy_space();
        let layout = KernelLayout::new(&space);
        let z = Decomposition::stage_aligned(&space, 3);
        let mut p = KernelParams::new(3, space.n_hyperparams());
        p.signal_variance = vec![0.2, 0.3, 0.5];
        p.mean = 0.4;
        let model = SurrogateModel::condition(layout, z, p, vec![], vec![], None).unwrap();
        let q = space.encode(&space.sample_config(5)).unwrap();
        let (mean, var) = model.posterior_at(&q).unwrap();
        assert_eq!(mean, 0.4);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_observed_point_with_small_noise() {
        let space = toy_space();
        let mut r = rng::from_seed(9);
        let (layout, xs) = random_inputs(&space, 8, &mut r);
        let z = Decomposition::stage_aligned(&space, 2);
        let mut p = KernelParams::new(2, space.n_hyperparams());
        p.noise_variance = 1e-6;
        let y: Vec<f64> = (0..xs.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let model = SurrogateModel::condition(layout, z, p.clone(), xs.clone(), y.clone(), None).unwrap();
        for (x, yi) in xs.iter().zip(&y) {
            let (mean, var) = model.posterior(x);
            // duplicate configs with different y can't be interpolated
            if xs.iter().filter(|o| *o == x).count() == 1 {
                assert!((mean - yi).abs() < 1e-3, "{mean} vs {yi}");
            }
            assert!(var <= p.noise_variance + 1e-6);
        }
    }

    #[test]
    fn component_means_sum_to_joint_mean() {
        let space = toy_space();
        let mut r = rng::from_seed(10);
        let (layout, xs) = random_inputs(&space, 12, &mut r);
        let z = Decomposition::random(space.n_algorithms(), 3, &mut r);
        let p = random_params(3, space.n_hyperparams(), &mut r);
        let y: Vec<f64> = (0..xs.len()).map(|_| r.random_range(0.0..1.0)).collect();
        let model = SurrogateModel::condition(layout.clone(), z, p.clone(), xs, y, None).unwrap();
        for _ in 0..20 {
            let q = layout.input(&space.encode(&space.sample_with(&mut r)).unwrap()).unwrap();
            let (mean, _) = model.posterior(&q);
            let sum: f64 = (0..3).map(|c| model.component_posterior(c, &q).unwrap().0).sum();
            assert!((sum + p.mean - mean).abs() < 1e-8);
        }
        assert!(model.component_posterior(3, &xs_first(&space)).is_err());
    }

    fn xs_first(space: &SearchSpace) -> GpInput {
        KernelLayout::new(space).input(&space.encode(&space.sample_config(0)).unwrap()).unwrap()
    }

    #[test]
    fn single_component_posterior_is_shifted_joint() {
        let space = toy_space();
        let mut r = rng::from_seed(11);
        let (layout, xs) = random_inputs(&space, 6, &mut r);
        let z = Decomposition::single(space.n_algorithms());
        let p = random_params(1, space.n_hyperparams(), &mut r);
        let y: Vec<f64> = (0..xs.len()).map(|_| r.random_range(0.0..1.0)).collect();
        let model = SurrogateModel::condition(layout.clone(), z, p.clone(), xs, y, None).unwrap();
        let q = layout.input(&space.encode(&space.sample_with(&mut r)).unwrap()).unwrap();
        let (mean, var) = model.posterior(&q);
        let (cm, cv) = model.component_posterior(0, &q).unwrap();
        assert!((cm + p.mean - mean).abs() < 1e-12);
        assert!((cv - var).abs() < 1e-12);
    }

    #[test]
    fn unobserved_subspace_keeps_prior_component() {
        let space = toy_space();
        let layout = KernelLayout::new(&space);
        // knn alone in subspace 2; observations never choose knn
        let z = Decomposition::new(vec![0, 0, 1, 2, 1], 3).unwrap();
        let mut p = KernelParams::new(3, space.n_hyperparams());
        p.signal_variance = vec![0.3, 0.3, 0.4];
        let mut r = rng::from_seed(12);
        let xs: Vec<GpInput> = (0..10)
            .map(|i| {
                let choices = [if i % 2 == 0 { 0 } else { 1 }, if i % 3 == 0 { 2 } else { 4 }];
                layout.input(&space.encode(&space.sample_with_choices(&choices, &mut r)).unwrap()).unwrap()
            })
            .collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let model = SurrogateModel::condition(layout.clone(), z, p, xs, y, None).unwrap();
        let q = layout.input(&space.encode(&space.sample_with_choices(&[0, 3], &mut r)).unwrap()).unwrap();
        let (mean, var) = model.component_posterior(2, &q).unwrap();
        assert!(mean.abs() < 1e-12);
        assert!((var - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let space = toy_space();
        let mut r = rng::from_seed(13);
        let (layout, xs) = random_inputs(&space, 15, &mut r);
        let z = Decomposition::stage_aligned(&space, 2);
        let y: Vec<f64> = xs.iter().map(|x| x.x[0] * 0.5 + x.choices[1] as f64 * 0.1).collect();
        let fit = |seed| {
            fit_params(
                &layout,
                &z,
                &xs,
                &y,
                None,
                None,
                FitOptions { restarts: 1, max_iter: 40 },
                &mut rng::from_seed(seed),
            )
            .unwrap()
        };
        let a = fit(1);
        let b = fit(1);
        assert_eq!(a.params, b.params);
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
        let bounds = KernelParams::unconstrained_bounds(2, space.n_hyperparams());
        for (v, (lo, hi)) in a.params.to_unconstrained().iter().zip(bounds) {
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn constant_targets_still_fit() {
        let space = toy_space();
        let mut r = rng::from_seed(14);
        let (layout, xs) = random_inputs(&space, 12, &mut r);
        let z = Decomposition::stage_aligned(&space, 2);
        let y = vec![0.7; xs.len()];
        let fit = fit_params(&layout, &z, &xs, &y, None, None, FitOptions::default(), &mut r).unwrap();
        assert!(fit.params.total_signal_variance() < 1e-2, "{:?}", fit.params.signal_variance);
        assert!((fit.params.mean - 0.7).abs() < 0.1);
    }

    #[test]
    fn fit_needs_two_points() {
        let space = toy_space();
        let mut r = rng::from_seed(15);
        let (layout, xs) = random_inputs(&space, 1, &mut r);
        let z = Decomposition::single(space.n_algorithms());
        let err = fit_params(&layout, &z, &xs, &[0.5], None, None, FitOptions::default(), &mut r);
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }
}
