use rayon::prelude::*;

use super::{
    log_sum_exp, row_term_and_residual, BiasedLogRegProblem, Classifier, FitConfig, LinearModel, CHUNK,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConfig {
    /// Quasi-Newton iterations per fit (warm starts continue from the last fit).
    pub max_iters: usize,
    /// Iterations for the constant classifier, whose problem is tiny.
    pub constant_max_iters: usize,
    pub memory: usize,
    /// Stop once the largest gradient entry falls below this.
    pub grad_tol: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { max_iters: 50, constant_max_iters: 200, memory: 10, grad_tol: 1e-10 }
    }
}

pub(crate) fn value_and_gradient(model: &LinearModel, problem: &BiasedLogRegProblem) -> (f64, Vec<f64>) {
    let (l, d) = (model.num_labels, model.dim);
    let parts: Vec<(f64, Vec<f64>)> = (0..problem.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![0.0; l * d];
            let mut z = vec![0.0; l];
            let mut value = 0.0;
            for k in c * CHUNK..((c + 1) * CHUNK).min(problem.len()) {
                let x = problem.features(k);
                for (y, v) in z.iter_mut().enumerate() {
                    *v = super::dot(&model.weights[y * d..(y + 1) * d], x) + problem.bias(k)[y];
                }
                value += row_term_and_residual(&mut z, problem.gold(k));
                for (y, r) in z.iter().enumerate() {
                    for (g, xi) in grad[y * d..(y + 1) * d].iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
            }
            (value, grad)
        })
        .collect();
    reduce(parts, l * d)
}

pub(crate) fn constant_value_and_gradient(offsets: &[f64], problem: &BiasedLogRegProblem) -> (f64, Vec<f64>) {
    let l = offsets.len();
    let parts: Vec<(f64, Vec<f64>)> = (0..problem.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![0.0; l];
            let mut z = vec![0.0; l];
            let mut value = 0.0;
            for k in c * CHUNK..((c + 1) * CHUNK).min(problem.len()) {
                for (y, v) in z.iter_mut().enumerate() {
                    *v = offsets[y] + problem.bias(k)[y];
                }
                value += row_term_and_residual(&mut z, problem.gold(k));
                for (g, r) in grad.iter_mut().zip(&z) {
                    *g += r;
                }
            }
            (value, grad)
        })
        .collect();
    reduce(parts, l)
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, n: usize) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (v, g) in parts {
        value += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (value, grad)
}

/// Limited-memory BFGS ascent with backtracking line search. Every accepted
/// step strictly increases the objective.
pub(crate) fn lbfgs_maximize<F>(
    start: Vec<f64>,
    max_iters: usize,
    memory: usize,
    grad_tol: f64,
    mut eval: F,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = start.len();
    let mut x = start;
    // Work with the minimization of -objective.
    let (v, g) = eval(&x);
    let mut fx = -v;
    let mut gx: Vec<f64> = g.iter().map(|g| -g).collect();
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite logistic objective at the starting point".into()));
    }
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();

    for iter in 0..max_iters {
        let gmax = gx.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= grad_tol {
            break;
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * super::dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = super::dot(s, y) / super::dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * super::dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = super::dot(&dir, &gx);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            dir = gx.iter().map(|g| -g).collect();
            slope = -super::dot(&gx, &gx);
        }

        let mut step = if iter == 0 && history.is_empty() {
            1.0 / super::dot(&gx, &gx).sqrt().max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let reach = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..60 {
            // A step that cannot move `x` in floating point ends the search.
            if step * reach <= f64::EPSILON * scale {
                break;
            }
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (v, g) = eval(&trial);
            let ft = -v;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope && ft < fx {
                accepted = Some((trial, ft, g));
                break;
            }
            // Minimizer of the quadratic through f(0), f'(0) and f(step),
            // kept within [0.1, 0.5] of the current step.
            let curvature = ft - fx - slope * step;
            let guess = if ft.is_finite() && curvature > 0.0 { -slope * step * step / (2.0 * curvature) } else { 0.0 };
            step = guess.clamp(0.1 * step, 0.5 * step);
        }
        let Some((trial, ft, g)) = accepted else { break };
        let gt: Vec<f64> = g.iter().map(|g| -g).collect();
        if gt.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient after quasi-Newton step {iter}")));
        }
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = super::dot(&s, &y);
        if sy > 1e-12 * super::dot(&y, &y).max(f64::MIN_POSITIVE) {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let stalled = fx - ft <= f64::EPSILON * fx.abs();
        x = trial;
        fx = ft;
        gx = gt;
        if stalled {
            break;
        }
    }
    debug_assert_eq!(x.len(), n);
    Ok((x, -fx))
}

fn zero_objective(problem: &BiasedLogRegProblem) -> f64 {
    (0..problem.len())
        .map(|k| {
            let b = problem.bias(k);
            b[problem.gold(k)] - log_sum_exp(b)
        })
        .sum()
}

/// Picks the better of the warm start and the all-zero parameters.
fn starting_point<F>(warm: Option<Vec<f64>>, n: usize, mut eval: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let zero = vec![0.0; n];
    match warm {
        Some(w) if w.len() == n && eval(&w) >= eval(&zero) => w,
        _ => zero,
    }
}

pub(crate) fn fit_linear(
    problem: &BiasedLogRegProblem,
    config: &FitConfig,
    previous: Option<&Classifier>,
) -> Result<Classifier> {
    let (l, d) = (problem.num_labels(), problem.dim());
    let mut model = LinearModel { num_labels: l, dim: d, weights: vec![0.0; l * d] };
    let warm = previous.and_then(|c| match c {
        Classifier::Linear(m) if m.num_labels == l && m.dim == d => Some(m.weights.clone()),
        _ => None,
    });
    let mut probe = model.clone();
    let start = starting_point(warm, l * d, |w| {
        probe.weights.copy_from_slice(w);
        value_and_gradient(&probe, problem).0
    });
    let cfg = &config.linear;
    let (weights, value) = lbfgs_maximize(start, cfg.max_iters, cfg.memory, cfg.grad_tol, |w| {
        probe.weights.copy_from_slice(w);
        value_and_gradient(&probe, problem)
    })?;
    if !value.is_finite() {
        return Err(Error::Numerical("linear fit produced a non-finite objective".into()));
    }
    debug_assert!(value >= zero_objective(problem) - 1e-9 * value.abs().max(1.0));
    model.weights = weights;
    Ok(Classifier::Linear(model))
}

pub(crate) fn fit_constant(
    problem: &BiasedLogRegProblem,
    config: &FitConfig,
    previous: Option<&Classifier>,
) -> Result<Classifier> {
    let l = problem.num_labels();
    let warm = previous.and_then(|c| match c {
        Classifier::Constant { offsets, .. } if offsets.len() == l => Some(offsets.clone()),
        _ => None,
    });
    let start = starting_point(warm, l, |c| constant_value_and_gradient(c, problem).0);
    let cfg = &config.linear;
    let (mut offsets, _) = lbfgs_maximize(start, cfg.constant_max_iters, cfg.memory, cfg.grad_tol, |c| {
        constant_value_and_gradient(c, problem)
    })?;
    let mean = offsets.iter().sum::<f64>() / l as f64;
    offsets.iter_mut().for_each(|c| *c -= mean);
    Ok(Classifier::Constant { dim: problem.dim(), offsets })
}
