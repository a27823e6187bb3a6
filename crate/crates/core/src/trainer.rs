//! The outer learning loop: alternate tied logistic-regression fits of the
//! unary and pairwise classifiers with warm-started message passing on every
//! training example.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Example};
use crate::error::{invalid, mismatch, Error, Result};
use crate::graph::RegionGraph;
use crate::inference::{self, Messages, Potentials, SmoothingConfig};
use crate::loss::{build_theta, energy, hamming_tables, LossTables};
use crate::oracle::{
    self, read_classifier, write_classifier, BiasedLogRegProblem, Classifier, FitConfig, OracleKind,
};

/// Which tied factor family a step acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Unary,
    Pairwise,
}

/// Tied unary classifier `u` (L outputs) and pairwise classifier `v`
/// (L^2 outputs, index `L * y_i + y_j`).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    unary: Classifier,
    pairwise: Classifier,
    epsilon: f64,
    num_labels: usize,
}

pub const MODEL_MAGIC: &[u8; 4] = b"SLRM";
pub const MODEL_VERSION: u32 = 1;

impl Model {
    pub fn new(unary: Classifier, pairwise: Classifier, epsilon: f64) -> Result<Self> {
        let l = unary.num_labels();
        if pairwise.num_labels() != l * l {
            return Err(mismatch(format!(
                "pairwise classifier has {} outputs, expected {}",
                pairwise.num_labels(),
                l * l
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { unary, pairwise, epsilon, num_labels: l })
    }

    pub fn zero(num_labels: usize, d_unary: usize, d_pairwise: usize, epsilon: f64) -> Result<Self> {
        Self::new(
            Classifier::zero(num_labels, d_unary),
            Classifier::zero(num_labels * num_labels, d_pairwise),
            epsilon,
        )
    }

    pub fn unary(&self) -> &Classifier {
        &self.unary
    }

    pub fn pairwise(&self) -> &Classifier {
        &self.pairwise
    }

    pub fn classifier(&self, kind: FactorKind) -> &Classifier {
        match kind {
            FactorKind::Unary => &self.unary,
            FactorKind::Pairwise => &self.pairwise,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn d_unary(&self) -> usize {
        self.unary.dim()
    }

    pub fn d_pairwise(&self) -> usize {
        self.pairwise.dim()
    }

    fn check_example(&self, example: &Example) -> Result<()> {
        if example.graph().num_labels() != self.num_labels
            || example.d_unary() != self.d_unary()
            || example.d_pairwise() != self.d_pairwise()
        {
            return Err(mismatch(format!(
                "model expects L={}, d_unary={}, d_pairwise={}; example has L={}, d_unary={}, d_pairwise={}",
                self.num_labels,
                self.d_unary(),
                self.d_pairwise(),
                example.graph().num_labels(),
                example.d_unary(),
                example.d_pairwise()
            )));
        }
        Ok(())
    }

    /// Unscaled classifier outputs `g` for every region of the example.
    pub fn score_tables(&self, example: &Example) -> Result<Potentials> {
        self.check_example(example)?;
        let graph = example.graph();
        let mut values = vec![0.0; graph.table_len()];
        fill_scores(graph, example, &self.unary, FactorKind::Unary, &mut values);
        fill_scores(graph, example, &self.pairwise, FactorKind::Pairwise, &mut values);
        Potentials::from_vec(graph, values)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&self.epsilon.to_le_bytes())?;
        for v in [self.num_labels, self.d_unary(), self.d_pairwise()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        write_classifier(w, &self.unary)?;
        write_classifier(w, &self.pairwise)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(invalid("not a model file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != MODEL_VERSION {
            return Err(invalid(format!("unsupported model version {version} (expected {MODEL_VERSION})")));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let epsilon = f64::from_le_bytes(buf);
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut buf)?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        let unary = read_classifier(r)?;
        let pairwise = read_classifier(r)?;
        let model = Self::new(unary, pairwise, epsilon)?;
        if [model.num_labels, model.d_unary(), model.d_pairwise()] != dims {
            return Err(mismatch("model header disagrees with its classifiers"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn fill_scores(graph: &RegionGraph, example: &Example, classifier: &Classifier, kind: FactorKind, out: &mut [f64]) {
    match kind {
        FactorKind::Unary => {
            for i in 0..graph.num_vars() {
                let range = graph.table_range(i);
                classifier.predict_into(example.unary_features(i), &mut out[range]);
            }
        }
        FactorKind::Pairwise => {
            for e in 0..graph.num_edges() {
                let range = graph.table_range(graph.edge_region(e));
                classifier.predict_into(example.pairwise_features(e), &mut out[range]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub outer_iters: usize,
    /// Sweeps after each classifier update.
    pub mp_iters: usize,
    /// Sweeps for plain inference when reporting errors and predicting.
    pub test_mp_iters: usize,
    /// Sweeping stops early once the agreement residual falls below this.
    pub agreement_tol: f64,
    pub unary: OracleKind,
    pub pairwise: OracleKind,
    pub unary_fit: FitConfig,
    pub pairwise_fit: FitConfig,
    pub seed: u64,
    /// Record train and test error after every outer iteration.
    pub record_curve: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut pairwise_fit = FitConfig::default();
        pairwise_fit.mlp.learning_rate = 0.05;
        Self {
            epsilon: 0.1,
            outer_iters: 20,
            mp_iters: 25,
            test_mp_iters: 200,
            agreement_tol: 1e-6,
            unary: OracleKind::Linear,
            pairwise: OracleKind::Linear,
            unary_fit: FitConfig::default(),
            pairwise_fit,
            seed: 0,
            record_curve: true,
        }
    }
}

impl TrainConfig {
    fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig::new(self.epsilon, self.mp_iters).with_tolerance(self.agreement_tol)
    }
}

/// Errors after one outer iteration (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_error: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub train_error: f64,
    pub test_error: Option<f64>,
}

/// Comma-separated `iteration,train_error,test_error` rows with a header.
pub fn format_curve(curve: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,train_error,test_error\n");
    for p in curve {
        let test = p.test_error.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.iteration, p.train_error, test));
    }
    out
}

/// Per-example state carried across outer iterations.
#[derive(Debug, Clone)]
pub struct ExampleState {
    /// Unscaled classifier outputs `g`.
    pub scores: Potentials,
    /// `eps * g + Delta`.
    pub theta: Potentials,
    pub messages: Messages,
    pub loss: LossTables,
}

/// `b_a(y_a) = (Delta_a(y_a) + sum_{b < a} lambda_a(y_b) - sum_{c > a} lambda_c(y_a)) / eps`
/// for every region, laid out like the potentials.
pub fn compute_biases(graph: &RegionGraph, messages: &Messages, loss: &LossTables, epsilon: f64) -> Result<Vec<f64>> {
    if messages.len() != graph.message_len() || loss.as_slice().len() != graph.table_len() {
        return Err(mismatch("messages and loss tables must match the graph"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let l = graph.num_labels();
    let mut bias = loss.as_slice().to_vec();
    for e in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(e);
        let (to_i, to_j) = (messages.get(graph, e, 0), messages.get(graph, e, 1));
        for y in 0..l {
            bias[graph.table_range(i).start + y] -= to_i[y];
            bias[graph.table_range(j).start + y] -= to_j[y];
        }
        let start = graph.table_range(graph.edge_region(e)).start;
        for yi in 0..l {
            for yj in 0..l {
                bias[start + yi * l + yj] += to_i[yi] + to_j[yj];
            }
        }
    }
    bias.iter_mut().for_each(|b| *b /= epsilon);
    Ok(bias)
}

fn gold_of(example: &Example) -> Result<&[usize]> {
    example.labels().ok_or_else(|| invalid("training examples need gold labels"))
}

/// One row per (example, region of `kind`), example-major and in region
/// order, with the gold configuration and the region's bias vector.
pub fn assemble_tied_problem(dataset: &Dataset, biases: &[Vec<f64>], kind: FactorKind) -> Result<BiasedLogRegProblem> {
    if biases.len() != dataset.len() {
        return Err(mismatch(format!("{} bias sets for {} examples", biases.len(), dataset.len())));
    }
    let l = dataset.num_labels();
    let (outputs, dim) = match kind {
        FactorKind::Unary => (l, dataset.d_unary()),
        FactorKind::Pairwise => (l * l, dataset.d_pairwise()),
    };
    let rows = dataset
        .examples()
        .iter()
        .map(|ex| match kind {
            FactorKind::Unary => ex.graph().num_vars(),
            FactorKind::Pairwise => ex.graph().num_edges(),
        })
        .sum();
    let mut problem = BiasedLogRegProblem::with_capacity(outputs, dim, rows)?;
    for (ex, bias) in dataset.examples().iter().zip(biases) {
        let graph = ex.graph();
        if bias.len() != graph.table_len() {
            return Err(mismatch("bias tables must match the example's graph"));
        }
        let gold = gold_of(ex)?;
        match kind {
            FactorKind::Unary => {
                for i in 0..graph.num_vars() {
                    problem.push_row(ex.unary_features(i), gold[i], &bias[graph.table_range(i)])?;
                }
            }
            FactorKind::Pairwise => {
                for e in 0..graph.num_edges() {
                    let alpha = graph.edge_region(e);
                    let config = graph.config_of(alpha, gold);
                    problem.push_row(ex.pairwise_features(e), config, &bias[graph.table_range(alpha)])?;
                }
            }
        }
    }
    Ok(problem)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stateful driver for the outer loop, exposing each sub-step.
pub struct Trainer<'a> {
    data: &'a Dataset,
    config: TrainConfig,
    model: Model,
    states: Vec<ExampleState>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let model = Model::zero(data.num_labels(), data.d_unary(), data.d_pairwise(), config.epsilon)?;
        let states = data
            .examples()
            .iter()
            .map(|ex| {
                let graph = ex.graph();
                let loss = hamming_tables(graph, gold_of(ex)?)?;
                let scores = model.score_tables(ex)?;
                let theta = build_theta(graph, &scores, &loss, config.epsilon)?;
                Ok(ExampleState { scores, theta, messages: Messages::zeros(graph), loss })
            })
            .collect::<Result<_>>()?;
        Ok(Self { data, config, model, states })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn states(&self) -> &[ExampleState] {
        &self.states
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn biases(&self) -> Result<Vec<Vec<f64>>> {
        self.data
            .examples()
            .par_iter()
            .zip(&self.states)
            .map(|(ex, s)| compute_biases(ex.graph(), &s.messages, &s.loss, self.config.epsilon))
            .collect()
    }

    pub fn tied_problem(&self, kind: FactorKind) -> Result<BiasedLogRegProblem> {
        assemble_tied_problem(self.data, &self.biases()?, kind)
    }

    /// Replaces one classifier and refreshes `g` and `theta` on every example;
    /// messages are left alone.
    pub fn set_classifier(&mut self, kind: FactorKind, classifier: Classifier) -> Result<()> {
        let (unary, pairwise) = match kind {
            FactorKind::Unary => (classifier, self.model.pairwise.clone()),
            FactorKind::Pairwise => (self.model.unary.clone(), classifier),
        };
        let model = Model::new(unary, pairwise, self.config.epsilon)?;
        if model.d_unary() != self.data.d_unary()
            || model.d_pairwise() != self.data.d_pairwise()
            || model.num_labels() != self.data.num_labels()
        {
            return Err(mismatch("classifier does not fit the training data"));
        }
        self.model = model;
        let (model, eps) = (&self.model, self.config.epsilon);
        self.data.examples().par_iter().zip(&mut self.states).try_for_each(|(ex, s)| -> Result<()> {
            let graph = ex.graph();
            let mut values = s.scores.as_slice().to_vec();
            fill_scores(graph, ex, model.classifier(kind), kind, &mut values);
            s.scores = Potentials::from_vec(graph, values)?;
            s.theta = build_theta(graph, &s.scores, &s.loss, eps)?;
            Ok(())
        })
    }

    /// Fits the `kind` classifier to the current biases.
    pub fn fit(&mut self, kind: FactorKind, iteration: usize) -> Result<()> {
        let problem = self.tied_problem(kind)?;
        let (oracle_kind, base) = match kind {
            FactorKind::Unary => (self.config.unary, &self.config.unary_fit),
            FactorKind::Pairwise => (self.config.pairwise, &self.config.pairwise_fit),
        };
        let mut fit_config = base.clone();
        let stream = 2 * iteration as u64 + u64::from(kind == FactorKind::Pairwise);
        fit_config.seed = splitmix(self.config.seed ^ splitmix(stream));
        let classifier = oracle::fit(oracle_kind, &problem, &fit_config, Some(self.model.classifier(kind)))?;
        self.set_classifier(kind, classifier)
    }

    /// Runs `mp_iters` warm-started sweeps on every example.
    pub fn message_passing(&mut self) -> Result<()> {
        let smoothing = self.config.smoothing();
        self.data.examples().par_iter().zip(&mut self.states).try_for_each(|(ex, s)| {
            inference::passes(ex.graph(), s.theta.as_slice(), s.messages.as_mut_slice(), &smoothing).map(|_| ())
        })
    }

    /// One outer iteration: unary fit, sweeps, pairwise fit, sweeps.
    pub fn outer_iteration(&mut self, iteration: usize) -> Result<()> {
        let wrap = |source: Error| Error::Training { iteration, source: Box::new(source) };
        self.fit(FactorKind::Unary, iteration).map_err(wrap)?;
        self.message_passing().map_err(wrap)?;
        self.fit(FactorKind::Pairwise, iteration).map_err(wrap)?;
        self.message_passing().map_err(wrap)
    }

    /// `sum_k [-F(x^k, y^k) + A(lambda^k, theta^k)]` at the current state.
    pub fn joint_objective(&self) -> Result<f64> {
        let eps = self.config.epsilon;
        let parts: Vec<f64> = self
            .data
            .examples()
            .par_iter()
            .zip(&self.states)
            .map(|(ex, s)| {
                let graph = ex.graph();
                let dual = inference::dual_objective(graph, &s.theta, &s.messages, eps)?;
                Ok(dual - energy(graph, &s.scores, gold_of(ex)?, eps))
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }
}

/// Plain inference: `theta = eps * g`, messages from zero, node-marginal
/// decoding.
pub fn predict(model: &Model, example: &Example, mp_iters: usize) -> Result<Vec<usize>> {
    predict_with(model, example, &SmoothingConfig::new(model.epsilon, mp_iters))
}

fn predict_with(model: &Model, example: &Example, smoothing: &SmoothingConfig) -> Result<Vec<usize>> {
    let graph = example.graph();
    let scores = model.score_tables(example)?;
    let theta: Vec<f64> = scores.as_slice().iter().map(|g| model.epsilon * g).collect();
    let mut messages = vec![0.0; graph.message_len()];
    inference::passes(graph, &theta, &mut messages, smoothing)?;
    Ok(inference::decode_from_messages(graph, &theta, &messages))
}

/// Predictions for every example, in order.
pub fn predict_dataset(model: &Model, dataset: &Dataset, mp_iters: usize, agreement_tol: f64) -> Result<Vec<Vec<usize>>> {
    let smoothing = SmoothingConfig::new(model.epsilon, mp_iters).with_tolerance(agreement_tol);
    dataset.examples().par_iter().map(|ex| predict_with(model, ex, &smoothing)).collect()
}

/// Fraction of mislabeled variables over all examples (variable-weighted).
pub fn univariate_error(predicted: &[Vec<usize>], gold: &[&[usize]]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(mismatch(format!("{} predictions for {} labelings", predicted.len(), gold.len())));
    }
    let (mut wrong, mut total) = (0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(mismatch(format!("labeling of length {} against gold of length {}", p.len(), g.len())));
        }
        wrong += p.iter().zip(g.iter()).filter(|(a, b)| a != b).count();
        total += g.len();
    }
    if total == 0 {
        return Err(invalid("no variables to score"));
    }
    Ok(wrong as f64 / total as f64)
}

/// Univariate error of plain inference over a labeled dataset.
pub fn dataset_error(model: &Model, dataset: &Dataset, mp_iters: usize, agreement_tol: f64) -> Result<f64> {
    let predicted = predict_dataset(model, dataset, mp_iters, agreement_tol)?;
    let gold: Vec<&[usize]> = dataset.examples().iter().map(gold_of).collect::<Result<_>>()?;
    univariate_error(&predicted, &gold)
}

/// Trains on `train`, reporting errors on `test` when given.
pub fn train(train_set: &Dataset, test_set: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(train_set, test_set, config, |_| {})
}

/// As [`train`], calling `observe` with each curve point as it is recorded.
pub fn train_with_observer(
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut observe: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    if let Some(test) = test_set {
        if test.num_labels() != train_set.num_labels()
            || test.d_unary() != train_set.d_unary()
            || test.d_pairwise() != train_set.d_pairwise()
        {
            return Err(mismatch("test set dimensions differ from the training set"));
        }
    }
    let mut trainer = Trainer::new(train_set, config.clone())?;
    let tol = config.agreement_tol;
    let evaluate = |model: &Model| -> Result<(f64, Option<f64>)> {
        let train_error = dataset_error(model, train_set, config.test_mp_iters, tol)?;
        let test_error = test_set.map(|t| dataset_error(model, t, config.test_mp_iters, tol)).transpose()?;
        Ok((train_error, test_error))
    };
    let mut curve = Vec::new();
    let mut last = None;
    for iteration in 1..=config.outer_iters {
        trainer.outer_iteration(iteration)?;
        if config.record_curve {
            let (train_error, test_error) = evaluate(trainer.model())?;
            let point = CurvePoint { iteration, train_error, test_error };
            observe(&point);
            curve.push(point);
            last = Some((train_error, test_error));
        }
    }
    let (train_error, test_error) = match last {
        Some(errors) => errors,
        None => evaluate(trainer.model())?,
    };
    Ok(TrainOutcome { model: trainer.into_model(), curve, train_error, test_error })
}
