//! Single-hidden-layer perceptron `f(x, y) = (W sigmoid(U x))_y` fitted by
//! minibatch gradient ascent with momentum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{row_term_and_residual, BiasedLogRegProblem, Classifier, FitConfig, MlpModel, CHUNK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the fresh minibatch gradient in each step.
    pub gradient_weight: f64,
    /// Weight of the previous step.
    pub momentum: f64,
    /// Input weights start uniform in `[-init_scale, init_scale]`; output
    /// weights start at zero, so a fresh network scores every label 0.
    pub init_scale: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 5,
            batch_size: 1000,
            learning_rate: 0.25,
            gradient_weight: 0.1,
            momentum: 0.9,
            init_scale: 1.0,
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

impl MlpModel {
    pub(crate) fn forward(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (d, h) = (self.dim, self.hidden);
        for (j, a) in hidden.iter_mut().enumerate() {
            *a = sigmoid(super::dot(&self.input_weights[j * d..(j + 1) * d], x));
        }
        for (y, o) in out.iter_mut().enumerate() {
            *o = super::dot(&self.output_weights[y * h..(y + 1) * h], hidden);
        }
    }

    fn num_params(&self) -> usize {
        self.input_weights.len() + self.output_weights.len()
    }
}

/// Objective and gradient (`U` then `W`) summed over the given rows.
pub(crate) fn value_and_gradient<I>(model: &MlpModel, problem: &BiasedLogRegProblem, rows: I) -> (f64, Vec<f64>)
where
    I: IntoIterator<Item = usize>,
{
    let rows: Vec<usize> = rows.into_iter().collect();
    let n = model.num_params();
    let parts: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n];
            let mut acc = Accumulator::new(model);
            let mut value = 0.0;
            for &k in chunk {
                value += acc.add_row(model, problem, k, &mut grad);
            }
            (value, grad)
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (v, g) in parts {
        value += v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (value, grad)
}

struct Accumulator {
    hidden: Vec<f64>,
    z: Vec<f64>,
    back: Vec<f64>,
}

impl Accumulator {
    fn new(model: &MlpModel) -> Self {
        Self { hidden: vec![0.0; model.hidden], z: vec![0.0; model.num_labels], back: vec![0.0; model.hidden] }
    }

    fn add_row(&mut self, model: &MlpModel, problem: &BiasedLogRegProblem, k: usize, grad: &mut [f64]) -> f64 {
        let (d, h) = (model.dim, model.hidden);
        let x = problem.features(k);
        model.forward(x, &mut self.hidden, &mut self.z);
        for (v, b) in self.z.iter_mut().zip(problem.bias(k)) {
            *v += b;
        }
        let term = row_term_and_residual(&mut self.z, problem.gold(k));
        let (grad_u, grad_w) = grad.split_at_mut(h * d);
        self.back.iter_mut().for_each(|v| *v = 0.0);
        for (y, r) in self.z.iter().enumerate() {
            let w_row = &model.output_weights[y * h..(y + 1) * h];
            for j in 0..h {
                grad_w[y * h + j] += r * self.hidden[j];
                self.back[j] += r * w_row[j];
            }
        }
        for j in 0..h {
            let delta = self.back[j] * self.hidden[j] * (1.0 - self.hidden[j]);
            for (g, xi) in grad_u[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += delta * xi;
            }
        }
        term
    }
}

fn fresh_model(problem: &BiasedLogRegProblem, cfg: &MlpConfig, rng: &mut ChaCha8Rng) -> MlpModel {
    let (l, d, h) = (problem.num_labels(), problem.dim(), cfg.hidden);
    MlpModel {
        num_labels: l,
        dim: d,
        hidden: h,
        input_weights: (0..h * d).map(|_| rng.gen_range(-cfg.init_scale..=cfg.init_scale)).collect(),
        output_weights: vec![0.0; l * h],
    }
}

pub(crate) fn fit_mlp(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    let cfg = &config.mlp;
    if cfg.hidden == 0 || problem.dim() == 0 {
        return Err(crate::error::invalid("MLP needs at least one input and one hidden unit"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match previous {
        Some(Classifier::Mlp(m))
            if m.num_labels == problem.num_labels() && m.dim == problem.dim() && m.hidden == cfg.hidden =>
        {
            m.clone()
        }
        _ => fresh_model(problem, cfg, &mut rng),
    };

    let mut velocity = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..problem.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(batch) {
            let (_, grad) = value_and_gradient(&model, problem, rows.iter().copied());
            let scale = 1.0 / rows.len() as f64;
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v + cfg.gradient_weight * g * scale;
            }
            let split = model.input_weights.len();
            for (p, v) in model.input_weights.iter_mut().zip(&velocity[..split]) {
                *p += cfg.learning_rate * v;
            }
            for (p, v) in model.output_weights.iter_mut().zip(&velocity[split..]) {
                *p += cfg.learning_rate * v;
            }
        }
        if model.input_weights.iter().chain(&model.output_weights).any(|p| !p.is_finite()) {
            return Err(Error::Numerical("MLP parameters became non-finite".into()));
        }
    }

    // A zero output layer reproduces the zero classifier; fall back to it if
    // stochastic steps ended below that baseline.
    let fitted = Classifier::Mlp(model.clone());
    let value = super::logistic_objective(&fitted, problem)?;
    let mut zeroed = model;
    zeroed.output_weights.iter_mut().for_each(|w| *w = 0.0);
    let zeroed = Classifier::Mlp(zeroed);
    if value < super::logistic_objective(&zeroed, problem)? {
        return Ok(zeroed);
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::super::{fit_linear, logistic_objective};
    use super::*;

    fn xor_problem() -> BiasedLogRegProblem {
        let mut p = BiasedLogRegProblem::new(2, 3).unwrap();
        for (a, b) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let y = ((a as u8) ^ (b as u8)) as usize;
            p.push_row(&[a, b, 1.0], y, &[0.0, 0.0]).unwrap();
        }
        p
    }

    fn accuracy(c: &Classifier, p: &BiasedLogRegProblem) -> f64 {
        let hits = (0..p.len())
            .filter(|&k| crate::inference::argmax(&c.predict_scores(p.features(k)).unwrap()) == p.gold(k))
            .count();
        hits as f64 / p.len() as f64
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let p = xor_problem();
        let mut cfg = FitConfig::default();
        cfg.mlp.hidden = 4;
        cfg.mlp.learning_rate = 0.0;
        let first = fit_mlp(&p, &cfg, None).unwrap();
        let second = fit_mlp(&p, &cfg, Some(&first)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn learns_xor_where_linear_cannot() {
        let p = xor_problem();
        let mut cfg = FitConfig { seed: 1, ..FitConfig::default() };
        cfg.mlp.hidden = 8;
        cfg.mlp.epochs = 20000;
        cfg.mlp.learning_rate = 2.0;
        cfg.mlp.init_scale = 3.0;
        let mlp = fit_mlp(&p, &cfg, None).unwrap();
        assert_eq!(accuracy(&mlp, &p), 1.0);

        cfg.linear.max_iters = 500;
        let lin = fit_linear(&p, &cfg, None).unwrap();
        assert!(accuracy(&lin, &p) < 1.0);
        assert!(logistic_objective(&mlp, &p).unwrap() > logistic_objective(&lin, &p).unwrap());
    }
}
