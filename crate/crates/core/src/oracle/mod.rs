//! Biased multi-class logistic regression and the fitters that maximize it.
//!
//! Every row carries features `x`, a gold label, and a bias vector `b`; the
//! objective is `sum_k [f(x_k, y_k) + b_k(y_k) - log sum_y exp(f(x_k, y) + b_k(y))]`
//! and higher is better. Objective and gradient sums are accumulated over
//! fixed-size chunks in a fixed order so results do not depend on the
//! thread count.

mod codec;
mod gbt;
mod linear;
mod mlp;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use codec::{read_classifier, write_classifier, CLASSIFIER_MAGIC, CLASSIFIER_VERSION};
pub use gbt::{Ensemble, GbtConfig, Tree, TreeNode};
pub use linear::LinearConfig;
pub use mlp::MlpConfig;

use crate::error::{invalid, mismatch, Error, Result};

pub(crate) const CHUNK: usize = 4096;

/// Rows of a biased logistic regression problem, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedLogRegProblem {
    num_labels: usize,
    dim: usize,
    features: Vec<f64>,
    gold: Vec<usize>,
    bias: Vec<f64>,
}

impl BiasedLogRegProblem {
    pub fn new(num_labels: usize, dim: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(invalid(format!("need at least 2 labels, got {num_labels}")));
        }
        Ok(Self { num_labels, dim, features: Vec::new(), gold: Vec::new(), bias: Vec::new() })
    }

    pub fn with_capacity(num_labels: usize, dim: usize, rows: usize) -> Result<Self> {
        let mut p = Self::new(num_labels, dim)?;
        p.features.reserve(rows * dim);
        p.gold.reserve(rows);
        p.bias.reserve(rows * num_labels);
        Ok(p)
    }

    pub fn push_row(&mut self, features: &[f64], gold: usize, bias: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(mismatch(format!("row has {} features, problem has {}", features.len(), self.dim)));
        }
        if bias.len() != self.num_labels {
            return Err(mismatch(format!("bias has {} entries, problem has {} labels", bias.len(), self.num_labels)));
        }
        if gold >= self.num_labels {
            return Err(Error::OutOfRange { index: gold, len: self.num_labels });
        }
        if bias.iter().chain(features).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature or bias"));
        }
        self.features.extend_from_slice(features);
        self.gold.push(gold);
        self.bias.extend_from_slice(bias);
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn features(&self, row: usize) -> &[f64] {
        &self.features[row * self.dim..(row + 1) * self.dim]
    }

    pub fn gold(&self, row: usize) -> usize {
        self.gold[row]
    }

    pub fn bias(&self, row: usize) -> &[f64] {
        &self.bias[row * self.num_labels..(row + 1) * self.num_labels]
    }

    /// Adds `shift` to every bias entry of `row`.
    pub fn shift_bias(&mut self, row: usize, shift: f64) {
        let l = self.num_labels;
        self.bias[row * l..(row + 1) * l].iter_mut().for_each(|b| *b += shift);
    }
}

/// Function class fitted by an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleKind {
    Zero,
    Constant,
    Linear,
    Boost,
    Mlp,
}

impl OracleKind {
    pub const ALL: [OracleKind; 5] =
        [OracleKind::Zero, OracleKind::Constant, OracleKind::Linear, OracleKind::Boost, OracleKind::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::Zero => "zero",
            OracleKind::Constant => "const",
            OracleKind::Linear => "linear",
            OracleKind::Boost => "boost",
            OracleKind::Mlp => "mlp",
        }
    }

    /// Column/row heading used in error tables.
    pub fn heading(self) -> &'static str {
        match self {
            OracleKind::Zero => "Zero",
            OracleKind::Constant => "Const.",
            OracleKind::Linear => "Linear",
            OracleKind::Boost => "Boost.",
            OracleKind::Mlp => "MLP",
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(OracleKind::Zero),
            "const" | "constant" => Ok(OracleKind::Constant),
            "linear" => Ok(OracleKind::Linear),
            "boost" | "gbt" | "boosting" => Ok(OracleKind::Boost),
            "mlp" => Ok(OracleKind::Mlp),
            other => Err(invalid(format!(
                "unknown oracle kind `{other}` (valid kinds: zero, const, linear, boost, mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub num_labels: usize,
    pub dim: usize,
    /// `num_labels x dim`, row-major.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub num_labels: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `hidden x dim`, row-major.
    pub input_weights: Vec<f64>,
    /// `num_labels x hidden`, row-major.
    pub output_weights: Vec<f64>,
}

/// A fitted scoring function `f(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Zero { num_labels: usize, dim: usize },
    Constant { dim: usize, offsets: Vec<f64> },
    Linear(LinearModel),
    Mlp(MlpModel),
    Boosted(Ensemble),
}

impl Classifier {
    pub fn zero(num_labels: usize, dim: usize) -> Self {
        Classifier::Zero { num_labels, dim }
    }

    pub fn kind(&self) -> OracleKind {
        match self {
            Classifier::Zero { .. } => OracleKind::Zero,
            Classifier::Constant { .. } => OracleKind::Constant,
            Classifier::Linear(_) => OracleKind::Linear,
            Classifier::Mlp(_) => OracleKind::Mlp,
            Classifier::Boosted(_) => OracleKind::Boost,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Classifier::Zero { num_labels, .. } => *num_labels,
            Classifier::Constant { offsets, .. } => offsets.len(),
            Classifier::Linear(m) => m.num_labels,
            Classifier::Mlp(m) => m.num_labels,
            Classifier::Boosted(e) => e.num_labels(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Classifier::Zero { dim, .. } | Classifier::Constant { dim, .. } => *dim,
            Classifier::Linear(m) => m.dim,
            Classifier::Mlp(m) => m.dim,
            Classifier::Boosted(e) => e.dim(),
        }
    }

    /// Scores `f(x, y)` for every label.
    pub fn predict_scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(mismatch(format!(
                "classifier expects {} features, got {}",
                self.dim(),
                features.len()
            )));
        }
        let mut out = vec![0.0; self.num_labels()];
        self.predict_into(features, &mut out);
        Ok(out)
    }

    pub(crate) fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Classifier::Zero { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            Classifier::Constant { offsets, .. } => out.copy_from_slice(offsets),
            Classifier::Linear(m) => {
                for (y, o) in out.iter_mut().enumerate() {
                    *o = dot(&m.weights[y * m.dim..(y + 1) * m.dim], x);
                }
            }
            Classifier::Mlp(m) => m.forward(x, &mut vec![0.0; m.hidden], out),
            Classifier::Boosted(e) => e.predict_into(x, out),
        }
    }

    /// Flat trainable parameters: `W` for linear, `U` then `W` for MLP,
    /// offsets for constant.
    pub fn parameters(&self) -> Option<Vec<f64>> {
        match self {
            Classifier::Constant { offsets, .. } => Some(offsets.clone()),
            Classifier::Linear(m) => Some(m.weights.clone()),
            Classifier::Mlp(m) => Some([m.input_weights.as_slice(), m.output_weights.as_slice()].concat()),
            _ => None,
        }
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.parameters().map(|p| p.len());
        if expected != Some(params.len()) {
            return Err(mismatch(format!("expected {expected:?} parameters, got {}", params.len())));
        }
        match self {
            Classifier::Constant { offsets, .. } => offsets.copy_from_slice(params),
            Classifier::Linear(m) => m.weights.copy_from_slice(params),
            Classifier::Mlp(m) => {
                let split = m.input_weights.len();
                m.input_weights.copy_from_slice(&params[..split]);
                m.output_weights.copy_from_slice(&params[split..]);
            }
            _ => unreachable!("checked above"),
        }
        Ok(())
    }

    fn check_problem(&self, problem: &BiasedLogRegProblem) -> Result<()> {
        if self.num_labels() != problem.num_labels() || self.dim() != problem.dim() {
            return Err(mismatch(format!(
                "classifier is {}x{} (labels x dim), problem is {}x{}",
                self.num_labels(),
                self.dim(),
                problem.num_labels(),
                problem.dim()
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Turns `scores + bias` (already summed in `z`) into the row's objective
/// term, and overwrites `z` with the residual `indicator - softmax`.
pub(crate) fn row_term_and_residual(z: &mut [f64], gold: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let term = z[gold] - max;
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in z.iter_mut() {
        *v *= -inv;
    }
    z[gold] += 1.0;
    term - total.ln()
}

/// Sums `f(row)` over all rows with deterministic chunked reduction.
pub(crate) fn chunked_sum<F>(rows: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync,
{
    let chunks: Vec<f64> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(rows)))
        .collect();
    chunks.iter().sum()
}

/// Objective of precomputed per-row scores (`rows x L`, row-major).
pub(crate) fn objective_of_scores(problem: &BiasedLogRegProblem, scores: &[f64]) -> f64 {
    let l = problem.num_labels();
    chunked_sum(problem.len(), |range| {
        let mut z = vec![0.0; l];
        range
            .map(|k| {
                for (y, v) in z.iter_mut().enumerate() {
                    *v = scores[k * l + y] + problem.bias[k * l + y];
                }
                z[problem.gold[k]] - log_sum_exp(&z)
            })
            .sum()
    })
}

/// The biased logistic objective; higher is better.
pub fn logistic_objective(classifier: &Classifier, problem: &BiasedLogRegProblem) -> Result<f64> {
    classifier.check_problem(problem)?;
    let l = problem.num_labels();
    let value = chunked_sum(problem.len(), |range| {
        let mut z = vec![0.0; l];
        range
            .map(|k| {
                classifier.predict_into(problem.features(k), &mut z);
                for (v, b) in z.iter_mut().zip(problem.bias(k)) {
                    *v += b;
                }
                z[problem.gold(k)] - log_sum_exp(&z)
            })
            .sum()
    });
    Ok(value)
}

/// Objective and its gradient with respect to [`Classifier::parameters`].
/// Supported for constant, linear and MLP classifiers.
pub fn logistic_value_and_gradient(classifier: &Classifier, problem: &BiasedLogRegProblem) -> Result<(f64, Vec<f64>)> {
    classifier.check_problem(problem)?;
    match classifier {
        Classifier::Linear(m) => Ok(linear::value_and_gradient(m, problem)),
        Classifier::Mlp(m) => Ok(mlp::value_and_gradient(m, problem, 0..problem.len())),
        Classifier::Constant { offsets, .. } => {
            let (v, g) = linear::constant_value_and_gradient(offsets, problem);
            Ok((v, g))
        }
        other => Err(invalid(format!("no parametric gradient for the {} classifier", other.kind()))),
    }
}

pub fn logistic_gradient(classifier: &Classifier, problem: &BiasedLogRegProblem) -> Result<Vec<f64>> {
    Ok(logistic_value_and_gradient(classifier, problem)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub seed: u64,
    pub warm_start: bool,
    pub linear: LinearConfig,
    pub mlp: MlpConfig,
    pub gbt: GbtConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            warm_start: true,
            linear: LinearConfig::default(),
            mlp: MlpConfig::default(),
            gbt: GbtConfig::default(),
        }
    }
}

pub fn fit_zero(problem: &BiasedLogRegProblem) -> Classifier {
    Classifier::zero(problem.num_labels(), problem.dim())
}

pub fn fit_constant(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    linear::fit_constant(problem, config, warm(config, previous, OracleKind::Constant))
}

pub fn fit_linear(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    linear::fit_linear(problem, config, warm(config, previous, OracleKind::Linear))
}

pub fn fit_mlp(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    mlp::fit_mlp(problem, config, warm(config, previous, OracleKind::Mlp))
}

pub fn fit_gbt(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    gbt::fit_gbt(problem, config, warm(config, previous, OracleKind::Boost))
}

/// Fits the requested function class, warm-starting from `previous` when
/// it has the same kind and shape and `config.warm_start` is set.
pub fn fit(
    kind: OracleKind,
    problem: &BiasedLogRegProblem,
    config: &FitConfig,
    previous: Option<&Classifier>,
) -> Result<Classifier> {
    match kind {
        OracleKind::Zero => Ok(fit_zero(problem)),
        OracleKind::Constant => fit_constant(problem, config, previous),
        OracleKind::Linear => fit_linear(problem, config, previous),
        OracleKind::Mlp => fit_mlp(problem, config, previous),
        OracleKind::Boost => fit_gbt(problem, config, previous),
    }
}

fn warm<'a>(config: &FitConfig, previous: Option<&'a Classifier>, kind: OracleKind) -> Option<&'a Classifier> {
    previous.filter(|c| config.warm_start && c.kind() == kind)
}
