//! Stochastic gradient boosting of regression trees on the biased logistic
//! objective.
//!
//! Each round draws a seeded row subsample and, for every class, grows a
//! least-squares tree on the residual `indicator - softmax`. Every leaf must
//! hold at least `min_leaf_fraction` of all rows. Leaf values are then set by
//! damped Newton iterations on the logistic objective restricted to the
//! leaf's rows, shrunk, and appended to the class's ensemble.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{log_sum_exp, objective_of_scores, BiasedLogRegProblem, Classifier, FitConfig};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GbtConfig {
    /// Boosting rounds per fit; warm starts keep adding to the ensemble.
    pub rounds: usize,
    pub max_depth: usize,
    pub min_leaf_fraction: f64,
    pub shrinkage: f64,
    pub subsample: f64,
    pub newton_steps: usize,
    /// Bound on a leaf's unshrunk Newton value.
    pub max_leaf_value: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            max_depth: 4,
            min_leaf_fraction: 0.05,
            shrinkage: 0.25,
            subsample: 0.5,
            newton_steps: 20,
            max_leaf_value: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Regression tree stored in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("tree has no nodes"));
        }
        for (i, node) in nodes.iter().enumerate() {
            if let TreeNode::Split { left, right, .. } = node {
                if *left <= i || *right <= i || *left >= nodes.len() || *right >= nodes.len() {
                    return Err(invalid(format!("tree node {i} has invalid children")));
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_of(x)] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn leaf_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i], TreeNode::Leaf { .. })).collect()
    }

    fn set_leaf(&mut self, index: usize, v: f64) {
        self.nodes[index] = TreeNode::Leaf { value: v };
    }
}

/// Per-class tree sequences; leaf values already include shrinkage.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    num_labels: usize,
    dim: usize,
    shrinkage: f64,
    trees: Vec<Vec<Tree>>,
}

impl Ensemble {
    pub fn new(num_labels: usize, dim: usize, shrinkage: f64) -> Self {
        Self { num_labels, dim, shrinkage, trees: vec![Vec::new(); num_labels] }
    }

    pub fn from_trees(dim: usize, shrinkage: f64, trees: Vec<Vec<Tree>>) -> Result<Self> {
        if trees.len() < 2 {
            return Err(invalid("ensemble needs at least 2 classes"));
        }
        for tree in trees.iter().flatten() {
            for node in tree.nodes() {
                if let TreeNode::Split { feature, .. } = node {
                    if *feature >= dim {
                        return Err(Error::OutOfRange { index: *feature, len: dim });
                    }
                }
            }
        }
        Ok(Self { num_labels: trees.len(), dim, shrinkage, trees })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn class_trees(&self, class: usize) -> &[Tree] {
        &self.trees[class]
    }

    /// Boosting rounds accumulated so far.
    pub fn rounds(&self) -> usize {
        self.trees[0].len()
    }

    pub(crate) fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, trees) in out.iter_mut().zip(&self.trees) {
            *o = trees.iter().map(|t| t.predict(x)).sum();
        }
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

struct Grower<'a> {
    problem: &'a BiasedLogRegProblem,
    residual: &'a [f64],
    min_leaf: usize,
    max_depth: usize,
    nodes: Vec<TreeNode>,
    /// Scratch: rows sent left by the split being applied.
    goes_left: Vec<bool>,
}

impl Grower<'_> {
    /// `sorted[f]` lists the node's rows ordered by feature `f` (ties by row).
    fn grow(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let index = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let n = sorted[0].len();
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return index;
        }
        let Some((feature, threshold, split)) = self.best_split(&sorted) else {
            return index;
        };
        for (p, &k) in sorted[feature].iter().enumerate() {
            self.goes_left[k] = p < split;
        }
        let (mut lower, mut upper) = (Vec::with_capacity(sorted.len()), Vec::with_capacity(sorted.len()));
        for rows in &sorted {
            let (a, b): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&k| self.goes_left[k]);
            lower.push(a);
            upper.push(b);
        }
        drop(sorted);
        let left = self.grow(lower, depth + 1);
        let right = self.grow(upper, depth + 1);
        self.nodes[index] = TreeNode::Split { feature, threshold, left, right };
        index
    }

    /// Best least-squares split as (feature, threshold, rows on the left).
    fn best_split(&self, sorted: &[Vec<usize>]) -> Option<(usize, f64, usize)> {
        let n = sorted[0].len();
        let total: f64 = sorted[0].iter().map(|&k| self.residual[k]).sum();
        let base = total * total / n as f64;
        let mut best: Option<(f64, usize, f64, usize)> = None;
        for (feature, rows) in sorted.iter().enumerate() {
            let value = |k: usize| self.problem.features(k)[feature];
            if value(rows[0]) == value(rows[n - 1]) {
                continue;
            }
            let mut left_sum = 0.0;
            for p in 1..n {
                left_sum += self.residual[rows[p - 1]];
                if p < self.min_leaf || n - p < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (value(rows[p - 1]), value(rows[p]));
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / p as f64 + right_sum * right_sum / (n - p) as f64 - base;
                if best.is_none_or(|b| gain > b.0) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((gain, feature, threshold, p));
                }
            }
        }
        best.filter(|b| b.0 > 1e-12).map(|(_, f, t, p)| (f, t, p))
    }
}

/// Value, first and second derivative in `v` of
/// `sum_i [v * [y_i = c] - log(1 + exp(z_i + v))]`.
fn leaf_objective(z: &[f64], is_gold: &[bool], v: f64) -> (f64, f64, f64) {
    let (mut value, mut grad, mut curv) = (0.0, 0.0, 0.0);
    for (zi, &g) in z.iter().zip(is_gold) {
        let t = zi + v;
        let e = (-t.abs()).exp();
        let (soft, p) = if t > 0.0 { (t + e.ln_1p(), 1.0 / (1.0 + e)) } else { (e.ln_1p(), e / (1.0 + e)) };
        let indicator = if g { 1.0 } else { 0.0 };
        value += indicator * v - soft;
        grad += indicator - p;
        curv += p * (1.0 - p);
    }
    (value, grad, curv)
}

/// Maximizes the leaf objective above by damped Newton steps, where `z_i`
/// is the class-`c` logit minus the log-sum-exp of the other classes.
fn newton_leaf_value(z: &[f64], is_gold: &[bool], steps: usize, bound: f64) -> f64 {
    let mut v = 0.0;
    let (mut current, mut grad, mut curv) = leaf_objective(z, is_gold, v);
    for _ in 0..steps {
        if grad.abs() <= 1e-8 * z.len() as f64 {
            break;
        }
        let mut step = if curv > 1e-12 { grad / curv } else { grad.signum() * bound };
        step = (v + step).clamp(-bound, bound) - v;
        if step.abs() <= 1e-10 {
            break;
        }
        let slack = 1e-12 * current.abs();
        let mut moved = false;
        for _ in 0..30 {
            let (value, g, c) = leaf_objective(z, is_gold, v + step);
            if value >= current - slack {
                v += step;
                (current, grad, curv) = (value, g, c);
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    v
}

fn fit_class_tree(
    problem: &BiasedLogRegProblem,
    logits: &[f64],
    sample_sorted: &[Vec<usize>],
    class: usize,
    min_leaf: usize,
    cfg: &GbtConfig,
) -> Tree {
    let l = problem.num_labels();
    let n = problem.len();
    let mut residual = vec![0.0; n];
    let mut others = vec![0.0; n];
    let mut buf = vec![0.0; l - 1];
    for k in 0..n {
        let row = &logits[k * l..(k + 1) * l];
        let mut j = 0;
        for (y, &v) in row.iter().enumerate() {
            if y != class {
                buf[j] = v;
                j += 1;
            }
        }
        others[k] = row[class] - log_sum_exp(&buf);
    }
    for &k in &sample_sorted[0] {
        let gold = if problem.gold(k) == class { 1.0 } else { 0.0 };
        residual[k] = gold - logistic(others[k]);
    }

    let mut grower = Grower {
        problem,
        residual: &residual,
        min_leaf,
        max_depth: cfg.max_depth,
        nodes: Vec::new(),
        goes_left: vec![false; n],
    };
    grower.grow(sample_sorted.to_vec(), 0);
    let mut tree = Tree { nodes: grower.nodes };

    let leaves = tree.leaf_indices();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
    for k in 0..n {
        members[tree.leaf_of(problem.features(k))].push(k);
    }
    for leaf in leaves {
        let z: Vec<f64> = members[leaf].iter().map(|&k| others[k]).collect();
        let gold: Vec<bool> = members[leaf].iter().map(|&k| problem.gold(k) == class).collect();
        let v = newton_leaf_value(&z, &gold, cfg.newton_steps, cfg.max_leaf_value);
        tree.set_leaf(leaf, cfg.shrinkage * v);
    }
    tree
}

pub(crate) fn fit_gbt(problem: &BiasedLogRegProblem, config: &FitConfig, previous: Option<&Classifier>) -> Result<Classifier> {
    const MIN_ROWS: usize = 20;
    if problem.len() < MIN_ROWS {
        return Err(invalid(format!(
            "gradient boosting needs at least {MIN_ROWS} rows, got {}",
            problem.len()
        )));
    }
    let cfg = &config.gbt;
    let (l, n) = (problem.num_labels(), problem.len());
    let mut ensemble = match previous {
        Some(Classifier::Boosted(e)) if e.num_labels() == l && e.dim() == problem.dim() => e.clone(),
        _ => Ensemble::new(l, problem.dim(), cfg.shrinkage),
    };

    let mut scores = vec![0.0; n * l];
    scores.par_chunks_mut(l).enumerate().for_each(|(k, out)| ensemble.predict_into(problem.features(k), out));

    let min_leaf = ((cfg.min_leaf_fraction * n as f64).ceil() as usize).max(1);
    let sample_size = ((cfg.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(ensemble.rounds() as u64));
    let mut order: Vec<usize> = (0..n).collect();
    let by_feature: Vec<Vec<usize>> = (0..problem.dim())
        .map(|f| {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.sort_by(|&a, &b| problem.features(a)[f].total_cmp(&problem.features(b)[f]).then(a.cmp(&b)));
            rows
        })
        .collect();
    let mut in_sample = vec![false; n];

    for _ in 0..cfg.rounds {
        order.shuffle(&mut rng);
        in_sample.iter_mut().for_each(|v| *v = false);
        for &k in &order[..sample_size] {
            in_sample[k] = true;
        }
        let sample_sorted: Vec<Vec<usize>> =
            by_feature.iter().map(|rows| rows.iter().copied().filter(|&k| in_sample[k]).collect()).collect();

        let logits: Vec<f64> = scores.iter().enumerate().map(|(i, s)| s + problem.bias(i / l)[i % l]).collect();
        let before = objective_of_scores(problem, &scores);
        let mut trees: Vec<Tree> = (0..l)
            .into_par_iter()
            .map(|class| fit_class_tree(problem, &logits, &sample_sorted, class, min_leaf, cfg))
            .collect();

        let mut updated = apply(problem, &scores, &trees);
        let mut after = objective_of_scores(problem, &updated);
        let mut halvings = 0;
        while after < before && halvings < 40 {
            for tree in &mut trees {
                for node in &mut tree.nodes {
                    if let TreeNode::Leaf { value } = node {
                        *value *= 0.5;
                    }
                }
            }
            updated = apply(problem, &scores, &trees);
            after = objective_of_scores(problem, &updated);
            halvings += 1;
        }
        if !after.is_finite() {
            return Err(Error::Numerical("boosting produced a non-finite objective".into()));
        }
        if after < before {
            continue;
        }
        scores = updated;
        for (class, tree) in trees.into_iter().enumerate() {
            ensemble.trees[class].push(tree);
        }
    }

    let fitted = Classifier::Boosted(ensemble);
    if objective_of_scores(problem, &scores) < objective_of_scores(problem, &vec![0.0; n * l]) {
        return Ok(Classifier::Boosted(Ensemble::new(l, problem.dim(), cfg.shrinkage)));
    }
    Ok(fitted)
}

fn apply(problem: &BiasedLogRegProblem, scores: &[f64], trees: &[Tree]) -> Vec<f64> {
    let l = trees.len();
    let mut out = scores.to_vec();
    out.par_chunks_mut(l).enumerate().for_each(|(k, row)| {
        let x = problem.features(k);
        for (v, t) in row.iter_mut().zip(trees) {
            *v += t.predict(x);
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::super::{fit_gbt, logistic_objective};
    use super::*;
    use rand::Rng;

    fn random_problem(rows: usize, l: usize, seed: u64) -> BiasedLogRegProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BiasedLogRegProblem::new(l, 3).unwrap();
        for _ in 0..rows {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 1.0];
            let y = if x[0] + 0.3 * rng.gen_range(-1.0..1.0) > 0.5 { 1 } else { 0 } % l;
            let b: Vec<f64> = (0..l).map(|_| rng.gen_range(-0.5..0.5)).collect();
            p.push_row(&x, y, &b).unwrap();
        }
        p
    }

    #[test]
    fn zero_rounds_is_zero_classifier() {
        let p = random_problem(40, 2, 1);
        let mut cfg = FitConfig::default();
        cfg.gbt.rounds = 0;
        let c = fit_gbt(&p, &cfg, None).unwrap();
        for k in 0..p.len() {
            assert_eq!(c.predict_scores(p.features(k)).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let p = random_problem(19, 2, 1);
        assert!(matches!(fit_gbt(&p, &FitConfig::default(), None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn leaves_hold_five_percent_and_objective_rises() {
        for l in [2, 4] {
            let p = random_problem(100, l, 7);
            let mut cfg = FitConfig::default();
            cfg.gbt.rounds = 1;
            let mut prev = logistic_objective(&Classifier::zero(l, 3), &p).unwrap();
            let mut model: Option<Classifier> = None;
            for _ in 0..15 {
                let c = fit_gbt(&p, &cfg, model.as_ref()).unwrap();
                let v = logistic_objective(&c, &p).unwrap();
                assert!(v >= prev, "objective fell from {prev} to {v}");
                prev = v;
                model = Some(c);
            }
            let Some(Classifier::Boosted(e)) = model else { panic!() };
            let need = (0.05 * p.len() as f64).ceil() as usize;
            for class in 0..l {
                for tree in e.class_trees(class) {
                    let mut counts = vec![0usize; tree.nodes().len()];
                    for k in 0..p.len() {
                        counts[tree.leaf_of(p.features(k))] += 1;
                    }
                    for leaf in tree.leaf_indices() {
                        assert!(counts[leaf] >= need);
                    }
                }
            }
        }
    }

    #[test]
    fn stump_is_piecewise_constant() {
        let mut p = BiasedLogRegProblem::new(2, 1).unwrap();
        for k in 0..40 {
            let x = k as f64 / 40.0;
            p.push_row(&[x], usize::from(x >= 0.5), &[0.0, 0.0]).unwrap();
        }
        let mut cfg = FitConfig::default();
        cfg.gbt.rounds = 1;
        cfg.gbt.max_depth = 1;
        cfg.gbt.subsample = 1.0;
        let Classifier::Boosted(e) = fit_gbt(&p, &cfg, None).unwrap() else { panic!() };
        let tree = &e.class_trees(1)[0];
        let TreeNode::Split { threshold, .. } = tree.nodes()[0] else { panic!("expected a split") };
        assert!(threshold > 0.475 && threshold < 0.5);
        let delta = 1e-3;
        let below = tree.predict(&[threshold - delta]);
        let above = tree.predict(&[threshold + delta]);
        assert_eq!(below, tree.predict(&[0.0]));
        assert_eq!(above, tree.predict(&[1.0]));
        assert!(above > 0.0 && below < 0.0);
    }

    #[test]
    fn newton_leaf_solves_one_dimensional_problem() {
        // Two rows with z = 0: optimum at sigmoid(v) = fraction of gold rows.
        let v = newton_leaf_value(&[0.0, 0.0, 0.0, 0.0], &[true, true, true, false], 50, 20.0);
        assert!((logistic(v) - 0.75).abs() < 1e-9);
        let v = newton_leaf_value(&[0.0, 1.0], &[true, true], 50, 20.0);
        assert!(v > 5.0 && v <= 20.0);
    }
}
