//! Entropy-smoothed inference in dual form.
//!
//! For messages `lambda` the region logits are
//! `theta_a(y_a) + sum_{b in a} lambda_a(y_b) - sum_{g contains a} lambda_g(y_a)`.
//! Dividing by `epsilon` and normalizing per region gives the maximizing
//! pseudomarginals, and `epsilon * logsumexp` of them summed over regions is
//! the dual objective, an upper bound on the smoothed LP value for any
//! messages. Star updates are exact block-coordinate minimizations of that
//! bound over all messages touching one variable.

mod brute;

pub use brute::{brute_smoothed_value, lse_by_simplex_maximization};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, mismatch, Error, Result};
use crate::graph::{Region, RegionGraph};

/// Per-region score tables, flat in graph table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    values: Vec<f64>,
}

/// One vector per (edge, child node) pair, flat in graph message order.
#[derive(Debug, Clone, PartialEq)]
pub struct Messages {
    values: Vec<f64>,
}

/// Per-region probability tables, flat in graph table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudomarginals {
    values: Vec<f64>,
}

macro_rules! flat_table {
    ($ty:ident, $len:ident) => {
        impl $ty {
            pub fn zeros(graph: &RegionGraph) -> Self {
                Self { values: vec![0.0; graph.$len()] }
            }

            pub fn from_vec(graph: &RegionGraph, values: Vec<f64>) -> Result<Self> {
                if values.len() != graph.$len() {
                    return Err(mismatch(format!(
                        "{} needs {} entries, got {}",
                        stringify!($ty),
                        graph.$len(),
                        values.len()
                    )));
                }
                Ok(Self { values })
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.values
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }
        }
    };
}

flat_table!(Potentials, table_len);
flat_table!(Messages, message_len);
flat_table!(Pseudomarginals, table_len);

impl Potentials {
    pub fn region<'a>(&'a self, graph: &RegionGraph, alpha: usize) -> &'a [f64] {
        &self.values[graph.table_range(alpha)]
    }

    /// Sum of the table entries selected by `labeling`.
    pub fn score(&self, graph: &RegionGraph, labeling: &[usize]) -> f64 {
        (0..graph.num_regions())
            .map(|alpha| self.values[graph.table_range(alpha).start + graph.config_of(alpha, labeling)])
            .sum()
    }
}

impl Messages {
    pub fn get<'a>(&'a self, graph: &RegionGraph, edge: usize, slot: usize) -> &'a [f64] {
        &self.values[graph.message_range(edge, slot)]
    }
}

impl Pseudomarginals {
    pub fn region<'a>(&'a self, graph: &RegionGraph, alpha: usize) -> &'a [f64] {
        &self.values[graph.table_range(alpha)]
    }

    /// Point mass on a labeling.
    pub fn indicator(graph: &RegionGraph, labeling: &[usize]) -> Self {
        let mut values = vec![0.0; graph.table_len()];
        for alpha in 0..graph.num_regions() {
            values[graph.table_range(alpha).start + graph.config_of(alpha, labeling)] = 1.0;
        }
        Self { values }
    }
}

/// Order in which node regions are visited during a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    RowMajor,
    /// A fresh seeded permutation every sweep.
    Shuffled { seed: u64 },
    /// Nodes sorted by decreasing local disagreement at the start of each sweep.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub agreement_tol: f64,
    pub schedule: Schedule,
}

impl SmoothingConfig {
    pub fn new(epsilon: f64, max_iters: usize) -> Self {
        Self { epsilon, max_iters, agreement_tol: 1e-6, schedule: Schedule::RowMajor }
    }

    pub fn with_tolerance(mut self, agreement_tol: f64) -> Self {
        self.agreement_tol = agreement_tol;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.agreement_tol.is_nan() || self.agreement_tol < 0.0 {
            return Err(invalid(format!("agreement_tol must be >= 0, got {}", self.agreement_tol)));
        }
        Ok(())
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self::new(0.1, 25)
    }
}

#[derive(Debug, Clone)]
pub struct MessagePassingOutcome {
    pub messages: Messages,
    pub iterations: usize,
    pub residual: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

fn check_inputs(graph: &RegionGraph, theta: &Potentials, messages: &Messages, epsilon: f64) -> Result<()> {
    check_epsilon(epsilon)?;
    if theta.len() != graph.table_len() {
        return Err(mismatch(format!(
            "potentials have {} entries, graph needs {}",
            theta.len(),
            graph.table_len()
        )));
    }
    if messages.len() != graph.message_len() {
        return Err(mismatch(format!(
            "messages have {} entries, graph needs {}",
            messages.len(),
            graph.message_len()
        )));
    }
    if theta.values.iter().chain(&messages.values).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite entry in potentials or messages"));
    }
    Ok(())
}

/// Writes the logits of region `alpha` into `out`.
pub(crate) fn region_logits(
    graph: &RegionGraph,
    theta: &[f64],
    messages: &[f64],
    alpha: usize,
    out: &mut [f64],
) {
    let range = graph.table_range(alpha);
    out.copy_from_slice(&theta[range]);
    let labels = graph.num_labels();
    match graph.region(alpha) {
        Region::Node(i) => {
            for &(edge, slot) in graph.node_links(i) {
                let msg = &messages[graph.message_range(edge, slot)];
                for (o, m) in out.iter_mut().zip(msg) {
                    *o -= m;
                }
            }
        }
        Region::Edge(..) => {
            let edge = alpha - graph.num_vars();
            let first = &messages[graph.message_range(edge, 0)];
            let second = &messages[graph.message_range(edge, 1)];
            for (yi, a) in first.iter().enumerate() {
                for (yj, b) in second.iter().enumerate() {
                    out[yi * labels + yj] += a + b;
                }
            }
        }
    }
}

/// `log sum exp(values / epsilon)`.
pub(crate) fn log_sum_exp_scaled(values: &[f64], epsilon: f64) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / epsilon).exp()).sum();
    max / epsilon + sum.ln()
}

/// Replaces `logits` with `logits / epsilon - log Z` in place.
fn normalize_log(logits: &mut [f64], epsilon: f64) {
    let lse = log_sum_exp_scaled(logits, epsilon);
    for v in logits.iter_mut() {
        *v = *v / epsilon - lse;
    }
}

/// Log of an edge's normalized marginal on one of its child slots.
/// `log_mu` holds the edge's normalized log-probabilities.
fn edge_log_marginal(log_mu: &[f64], labels: usize, slot: usize, out: &mut [f64]) {
    for (y, o) in out.iter_mut().enumerate() {
        let entry = |other: usize| {
            if slot == 0 {
                log_mu[y * labels + other]
            } else {
                log_mu[other * labels + y]
            }
        };
        let max = (0..labels).map(entry).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..labels).map(|o| (entry(o) - max).exp()).sum();
        *o = max + sum.ln();
    }
}

/// Writes `exp((logits - max) / epsilon)` into `probs` and returns the sum.
fn scaled_exp(logits: &[f64], epsilon: f64, probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inv = 1.0 / epsilon;
    let mut total = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = ((l - max) * inv).exp();
        total += *p;
    }
    total
}

fn child_sum(probs: &[f64], labels: usize, slot: usize, y: usize) -> f64 {
    if slot == 0 {
        probs[y * labels..(y + 1) * labels].iter().sum()
    } else {
        (0..labels).map(|o| probs[o * labels + y]).sum()
    }
}

/// Normalized log-marginal on one child slot of an edge, from the edge's
/// unnormalized logits. Uses probabilities, falling back to the log domain
/// if a marginal underflows; `logits` is clobbered in that case.
fn edge_child_log_marginal(
    logits: &mut [f64],
    labels: usize,
    slot: usize,
    epsilon: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let total = scaled_exp(logits, epsilon, probs);
    for (y, o) in out.iter_mut().enumerate() {
        let row = child_sum(probs, labels, slot, y);
        if row < f64::MIN_POSITIVE {
            normalize_log(logits, epsilon);
            edge_log_marginal(logits, labels, slot, out);
            return;
        }
        *o = (row / total).ln();
    }
}

/// Normalized log-pseudomarginals for every region.
pub(crate) fn log_marginals_unchecked(
    graph: &RegionGraph,
    theta: &[f64],
    messages: &[f64],
    epsilon: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; graph.table_len()];
    for alpha in 0..graph.num_regions() {
        let range = graph.table_range(alpha);
        let slice = &mut out[range];
        region_logits(graph, theta, messages, alpha, slice);
        normalize_log(slice, epsilon);
    }
    out
}

/// Maximizing pseudomarginals of the dual for fixed messages.
pub fn compute_marginals(
    graph: &RegionGraph,
    theta: &Potentials,
    messages: &Messages,
    epsilon: f64,
) -> Result<Pseudomarginals> {
    check_inputs(graph, theta, messages, epsilon)?;
    let mut values = log_marginals_unchecked(graph, &theta.values, &messages.values, epsilon);
    for v in values.iter_mut() {
        *v = v.exp();
    }
    Ok(Pseudomarginals { values })
}

/// Closed-form dual `A(lambda, theta)`.
pub fn dual_objective(graph: &RegionGraph, theta: &Potentials, messages: &Messages, epsilon: f64) -> Result<f64> {
    check_inputs(graph, theta, messages, epsilon)?;
    Ok(dual_objective_unchecked(graph, &theta.values, &messages.values, epsilon))
}

pub(crate) fn dual_objective_unchecked(graph: &RegionGraph, theta: &[f64], messages: &[f64], epsilon: f64) -> f64 {
    let mut buf = vec![0.0; graph.num_labels() * graph.num_labels()];
    (0..graph.num_regions())
        .map(|alpha| {
            let logits = &mut buf[..graph.table_range(alpha).len()];
            region_logits(graph, theta, messages, alpha, logits);
            epsilon * log_sum_exp_scaled(logits, epsilon)
        })
        .sum()
}

/// Scratch buffers reused across star updates.
pub(crate) struct StarScratch {
    node_log: Vec<f64>,
    edge_log: Vec<f64>,
    /// Log-marginal of each parent edge on the updated node, parent-major.
    parent_logs: Vec<f64>,
    total: Vec<f64>,
    edge_prob: Vec<f64>,
}

impl StarScratch {
    pub(crate) fn new(graph: &RegionGraph) -> Self {
        let labels = graph.num_labels();
        Self {
            node_log: vec![0.0; labels],
            edge_log: vec![0.0; labels * labels],
            parent_logs: Vec::new(),
            total: vec![0.0; labels],
            edge_prob: vec![0.0; labels * labels],
        }
    }
}

pub(crate) fn star_update_unchecked(
    graph: &RegionGraph,
    theta: &[f64],
    messages: &mut [f64],
    node: usize,
    epsilon: f64,
    scratch: &mut StarScratch,
) {
    let links = graph.node_links(node);
    if links.is_empty() {
        return;
    }
    let labels = graph.num_labels();
    region_logits(graph, theta, messages, node, &mut scratch.node_log);
    normalize_log(&mut scratch.node_log, epsilon);
    scratch.total.copy_from_slice(&scratch.node_log);

    scratch.parent_logs.clear();
    scratch.parent_logs.resize(links.len() * labels, 0.0);
    for (p, &(edge, slot)) in links.iter().enumerate() {
        let alpha = graph.edge_region(edge);
        region_logits(graph, theta, messages, alpha, &mut scratch.edge_log);
        let out = &mut scratch.parent_logs[p * labels..(p + 1) * labels];
        edge_child_log_marginal(&mut scratch.edge_log, labels, slot, epsilon, &mut scratch.edge_prob, out);
        for (t, v) in scratch.total.iter_mut().zip(out.iter()) {
            *t += v;
        }
    }

    let share = epsilon / (1.0 + links.len() as f64);
    for (p, &(edge, slot)) in links.iter().enumerate() {
        let own = &scratch.parent_logs[p * labels..(p + 1) * labels];
        let msg = &mut messages[graph.message_range(edge, slot)];
        for y in 0..labels {
            msg[y] += share * scratch.total[y] - epsilon * own[y];
        }
    }
}

/// Exact block minimization of the dual over all messages from edges
/// containing `node` into `node`. Isolated nodes are left untouched.
pub fn star_update(
    graph: &RegionGraph,
    theta: &Potentials,
    messages: &mut Messages,
    node: usize,
    epsilon: f64,
) -> Result<()> {
    check_inputs(graph, theta, messages, epsilon)?;
    if node >= graph.num_vars() {
        return Err(Error::OutOfRange { index: node, len: graph.num_vars() });
    }
    let mut scratch = StarScratch::new(graph);
    star_update_unchecked(graph, &theta.values, &mut messages.values, node, epsilon, &mut scratch);
    Ok(())
}

/// Max over (edge, child, label) of the gap between the edge's marginal on
/// the child and the child's own table.
pub fn agreement_residual(graph: &RegionGraph, mu: &Pseudomarginals) -> f64 {
    let labels = graph.num_labels();
    let mut worst = 0.0f64;
    for edge in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(edge);
        let table = mu.region(graph, graph.edge_region(edge));
        let (mi, mj) = (mu.region(graph, i), mu.region(graph, j));
        for y in 0..labels {
            let row: f64 = (0..labels).map(|o| table[y * labels + o]).sum();
            let col: f64 = (0..labels).map(|o| table[o * labels + y]).sum();
            worst = worst.max((row - mi[y]).abs()).max((col - mj[y]).abs());
        }
    }
    worst
}

/// Residual of the marginals implied by `messages`, without materializing them.
pub(crate) fn residual_unchecked(graph: &RegionGraph, theta: &[f64], messages: &[f64], epsilon: f64) -> f64 {
    let labels = graph.num_labels();
    let mut node_mu = vec![0.0; graph.num_vars() * labels];
    let mut logits = vec![0.0; labels * labels];
    for i in 0..graph.num_vars() {
        let slice = &mut node_mu[i * labels..(i + 1) * labels];
        region_logits(graph, theta, messages, i, &mut logits[..labels]);
        let total = scaled_exp(&logits[..labels], epsilon, slice);
        slice.iter_mut().for_each(|v| *v /= total);
    }
    let mut probs = vec![0.0; labels * labels];
    let mut worst = 0.0f64;
    for edge in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(edge);
        region_logits(graph, theta, messages, graph.edge_region(edge), &mut logits);
        let total = scaled_exp(&logits, epsilon, &mut probs);
        for (slot, var) in [(0, i), (1, j)] {
            let node = &node_mu[var * labels..(var + 1) * labels];
            for (y, n) in node.iter().enumerate() {
                worst = worst.max((child_sum(&probs, labels, slot, y) / total - n).abs());
            }
        }
    }
    worst
}

/// Local disagreement at each node: max gap between the node's table and
/// the marginals of its parent edges.
fn node_residuals(graph: &RegionGraph, theta: &[f64], messages: &[f64], epsilon: f64) -> Vec<f64> {
    let labels = graph.num_labels();
    let mut node_log = vec![0.0; labels];
    let mut edge_log = vec![0.0; labels * labels];
    let mut marg = vec![0.0; labels];
    (0..graph.num_vars())
        .map(|node| {
            region_logits(graph, theta, messages, node, &mut node_log);
            normalize_log(&mut node_log, epsilon);
            let mut worst = 0.0f64;
            for &(edge, slot) in graph.node_links(node) {
                region_logits(graph, theta, messages, graph.edge_region(edge), &mut edge_log);
                normalize_log(&mut edge_log, epsilon);
                edge_log_marginal(&edge_log, labels, slot, &mut marg);
                for (m, n) in marg.iter().zip(&node_log) {
                    worst = worst.max((m.exp() - n.exp()).abs());
                }
            }
            worst
        })
        .collect()
}

/// Runs up to `config.max_iters` sweeps of star updates, stopping early once
/// the agreement residual is within `config.agreement_tol`. The residual is
/// checked before every sweep, so a graph that already agrees uses zero sweeps.
pub fn run_message_passing(
    graph: &RegionGraph,
    theta: &Potentials,
    initial: Messages,
    config: &SmoothingConfig,
) -> Result<MessagePassingOutcome> {
    config.validate()?;
    check_inputs(graph, theta, &initial, config.epsilon)?;
    let mut messages = initial;
    let outcome = passes(graph, &theta.values, &mut messages.values, config);
    let (iterations, residual) = outcome?;
    Ok(MessagePassingOutcome { messages, iterations, residual })
}

pub(crate) fn passes(
    graph: &RegionGraph,
    theta: &[f64],
    messages: &mut [f64],
    config: &SmoothingConfig,
) -> Result<(usize, f64)> {
    let eps = config.epsilon;
    let mut scratch = StarScratch::new(graph);
    let mut order: Vec<usize> = (0..graph.num_vars()).collect();
    let mut rng = match config.schedule {
        Schedule::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut iterations = 0;
    let mut residual = residual_unchecked(graph, theta, messages, eps);
    while iterations < config.max_iters && residual > config.agreement_tol {
        match config.schedule {
            Schedule::RowMajor => {}
            Schedule::Shuffled { .. } => order.shuffle(rng.as_mut().expect("seeded above")),
            Schedule::Greedy => {
                let local = node_residuals(graph, theta, messages, eps);
                order.sort_by(|&a, &b| local[b].total_cmp(&local[a]).then(a.cmp(&b)));
            }
        }
        for &node in &order {
            star_update_unchecked(graph, theta, messages, node, eps, &mut scratch);
        }
        iterations += 1;
        residual = residual_unchecked(graph, theta, messages, eps);
        if !residual.is_finite() {
            return Err(Error::Numerical(format!("non-finite agreement residual after sweep {iterations}")));
        }
    }
    Ok((iterations, residual))
}

/// `theta . mu + epsilon * sum_a H(mu_a)` with `0 log 0 = 0`.
pub fn primal_objective(graph: &RegionGraph, mu: &Pseudomarginals, theta: &Potentials, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if mu.len() != graph.table_len() || theta.len() != graph.table_len() {
        return Err(mismatch("pseudomarginals and potentials must match the graph"));
    }
    if mu.values.iter().any(|&p| p < 0.0 || p.is_nan()) {
        return Err(invalid("pseudomarginals must be nonnegative"));
    }
    let linear: f64 = mu.values.iter().zip(&theta.values).map(|(p, t)| p * t).sum();
    let entropy: f64 = mu.values.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok(linear + epsilon * entropy)
}

/// Per-variable argmax of the node tables, ties toward the smaller label.
pub fn decode(graph: &RegionGraph, mu: &Pseudomarginals) -> Vec<usize> {
    (0..graph.num_vars()).map(|i| argmax(mu.region(graph, i))).collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (y, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = y;
        }
    }
    best
}

/// Node decoding straight from messages (node logits share the argmax of
/// their normalized marginals).
pub(crate) fn decode_from_messages(graph: &RegionGraph, theta: &[f64], messages: &[f64]) -> Vec<usize> {
    let mut logits = vec![0.0; graph.num_labels()];
    (0..graph.num_vars())
        .map(|i| {
            region_logits(graph, theta, messages, i, &mut logits);
            argmax(&logits)
        })
        .collect()
}
