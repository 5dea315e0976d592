//! Projected L-BFGS ascent inside a box.
//!
//! Every accepted step satisfies an Armijo condition along the projected
//! path, so the objective never decreases and iterates never leave the box.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct AscentOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when an iteration improves the objective by less than this.
    pub f_tol: f64,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub g_tol: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions { max_iter: 100, memory: 8, f_tol: 1e-9, g_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective value after each accepted iteration, starting at `x0`.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Components of the gradient that can still move `x` inside the box.
fn free_gradient(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| if (xi <= lo && gi < 0.0) || (xi >= hi && gi > 0.0) { 0.0 } else { gi })
        .collect()
}

/// Maximizes `f` over the box. `f` returns `None` where it cannot be
/// evaluated; such points are treated as infeasible by the line search.
/// Returns `None` only if `f` fails at the (projected) starting point.
pub fn maximize_in_box<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: AscentOptions) -> Option<AscentResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let mut trace = vec![fx];
    // Stored pairs for the minimization of -f: s = dx, y = d(-g).
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let free = free_gradient(&x, &g, bounds);
        if free.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.g_tol {
            break;
        }

        // Two-loop recursion on the descent problem; d ascends f.
        let mut q: Vec<f64> = free.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        // Freeze coordinates pinned at a bound.
        for (i, di) in d.iter_mut().enumerate() {
            if free[i] == 0.0 && ((x[i] <= bounds[i].0 && *di < 0.0) || (x[i] >= bounds[i].1 && *di > 0.0)) {
                *di = 0.0;
            }
        }
        if dot(&d, &free) <= 0.0 {
            memory.clear();
            d = free.clone();
        }
        if memory.is_empty() {
            // Unscaled gradient steps can be wildly off; cap the first move.
            let norm = dot(&d, &d).sqrt();
            if norm > 1.0 {
                d.iter_mut().for_each(|v| *v /= norm);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut trial, bounds);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let predicted = dot(&g, &moved);
            if predicted <= 0.0 && dot(&moved, &moved) == 0.0 {
                break;
            }
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft >= fx + 1e-4 * predicted.max(0.0) {
                    accepted = Some((trial, ft, gt, moved));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gn, s)) = accepted else { break };
        iterations += 1;
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| b - a).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let improvement = fxn - fx;
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(fx);
        if improvement < opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    Some(AscentResult { x, value: fx, iterations, trace })
}
