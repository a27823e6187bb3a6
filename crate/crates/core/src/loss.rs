//! Loss-augmented potentials, the smoothed structured loss, and the
//! enumeration oracle it is sandwiched against.
//!
//! Classifier outputs `g` are stored unscaled; the energy is `F = eps * g`
//! and the loss-augmented potentials are `theta = eps * g + Delta`.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{mismatch, Error, Result};
use crate::graph::RegionGraph;
use crate::inference::{dual_objective, run_message_passing, Messages, Potentials, SmoothingConfig};
use crate::trainer::Model;

/// Per-region task loss against a fixed gold labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTables {
    values: Vec<f64>,
}

impl LossTables {
    pub fn zeros(graph: &RegionGraph) -> Self {
        Self { values: vec![0.0; graph.table_len()] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn region<'a>(&'a self, graph: &RegionGraph, alpha: usize) -> &'a [f64] {
        &self.values[graph.table_range(alpha)]
    }

    /// `sum_a Delta_a(y_a)`.
    pub fn total(&self, graph: &RegionGraph, labeling: &[usize]) -> f64 {
        (0..graph.num_regions())
            .map(|alpha| self.values[graph.table_range(alpha).start + graph.config_of(alpha, labeling)])
            .sum()
    }
}

/// Hamming loss placed on node regions; edge tables are identically zero.
pub fn hamming_tables(graph: &RegionGraph, gold: &[usize]) -> Result<LossTables> {
    graph.check_labeling(gold)?;
    let mut values = vec![0.0; graph.table_len()];
    for (i, &y) in gold.iter().enumerate() {
        let range = graph.table_range(i);
        for (label, v) in values[range].iter_mut().enumerate() {
            *v = if label == y { 0.0 } else { 1.0 };
        }
    }
    Ok(LossTables { values })
}

/// `theta = eps * g + Delta`, elementwise.
pub fn build_theta(graph: &RegionGraph, scores: &Potentials, loss: &LossTables, epsilon: f64) -> Result<Potentials> {
    if scores.len() != graph.table_len() || loss.values.len() != graph.table_len() {
        return Err(mismatch("score and loss tables must match the graph"));
    }
    let values = scores.as_slice().iter().zip(&loss.values).map(|(g, d)| epsilon * g + d).collect();
    Potentials::from_vec(graph, values)
}

/// Energy `F(x, y) = eps * sum_a g_a(y_a)`.
pub fn energy(graph: &RegionGraph, scores: &Potentials, labeling: &[usize], epsilon: f64) -> f64 {
    epsilon * scores.score(graph, labeling)
}

/// `sum_a log |y_a|`, the largest total entropy any pseudomarginal can have.
pub fn entropy_cap(graph: &RegionGraph) -> f64 {
    (0..graph.num_regions())
        .map(|alpha| (graph.table_range(alpha).len() as f64).ln())
        .sum()
}

/// Smoothed loss `-F(x, y_gold) + A(theta)` with Hamming augmentation, where
/// `A` is approximated by the dual value after message passing from zero.
pub fn smoothed_loss(
    graph: &RegionGraph,
    gold: &[usize],
    scores: &Potentials,
    budget: &SmoothingConfig,
) -> Result<f64> {
    let loss = hamming_tables(graph, gold)?;
    smoothed_loss_with(graph, gold, scores, &loss, budget)
}

/// [`smoothed_loss`] for an arbitrary decomposed loss.
pub fn smoothed_loss_with(
    graph: &RegionGraph,
    gold: &[usize],
    scores: &Potentials,
    loss: &LossTables,
    budget: &SmoothingConfig,
) -> Result<f64> {
    graph.check_labeling(gold)?;
    let theta = build_theta(graph, scores, loss, budget.epsilon)?;
    let outcome = run_message_passing(graph, &theta, Messages::zeros(graph), budget)?;
    let dual = dual_objective(graph, &theta, &outcome.messages, budget.epsilon)?;
    Ok(dual - energy(graph, scores, gold, budget.epsilon))
}

/// Sum of smoothed losses over a labeled dataset.
pub fn empirical_risk(dataset: &Dataset, model: &Model, budget: &SmoothingConfig) -> Result<f64> {
    let per_example: Result<Vec<f64>> = dataset
        .examples()
        .par_iter()
        .map(|example| {
            let gold = example
                .labels()
                .ok_or_else(|| crate::error::invalid("empirical risk needs gold labels"))?;
            let scores = model.score_tables(example)?;
            smoothed_loss(example.graph(), gold, &scores, budget)
        })
        .collect();
    Ok(per_example?.iter().sum())
}

const EXHAUSTIVE_MAX_VARS: usize = 12;

/// `-F(gold) + max_y (F(y) + Delta(gold, y))` by enumerating every labeling.
/// Only defined on forests, where the LP relaxation is tight.
pub fn exhaustive_l1(graph: &RegionGraph, gold: &[usize], scores: &Potentials, epsilon: f64) -> Result<f64> {
    if graph.num_vars() > EXHAUSTIVE_MAX_VARS {
        return Err(Error::Refused {
            what: "exhaustive loss",
            reason: format!("{} variables exceeds the limit of {EXHAUSTIVE_MAX_VARS}", graph.num_vars()),
        });
    }
    if !graph.is_forest() {
        return Err(Error::Refused { what: "exhaustive loss", reason: "graph has a cycle".into() });
    }
    let loss = hamming_tables(graph, gold)?;
    let theta = build_theta(graph, scores, &loss, epsilon)?;
    let best = max_over_labelings(graph, |y| theta.score(graph, y));
    Ok(best - energy(graph, scores, gold, epsilon))
}

/// Maximum of `f` over all labelings of a small graph.
pub(crate) fn max_over_labelings(graph: &RegionGraph, mut f: impl FnMut(&[usize]) -> f64) -> f64 {
    let n = graph.num_vars();
    let labels = graph.num_labels();
    let mut labeling = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    loop {
        best = best.max(f(&labeling));
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labeling[pos] += 1;
            if labeling[pos] < labels {
                break;
            }
            labeling[pos] = 0;
            pos += 1;
        }
    }
}
