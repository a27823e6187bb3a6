//! Independent primal solver for the smoothed LP, used as a test oracle.
//!
//! Maximizes `theta . mu + epsilon * sum_a H(mu_a)` directly over the local
//! polytope with Newton ascent restricted to the polytope's affine hull. The
//! entropy Hessian is diagonal, so every step only needs the small system
//! `(A D A^T) nu = A D g` with `D = mu / epsilon`. Steps are truncated to stay
//! strictly positive and backtracked until the objective increases.

use crate::error::{invalid, Error, Result};
use crate::graph::RegionGraph;

use super::{check_epsilon, Potentials, Pseudomarginals};

const MAX_VARS: usize = 8;
const MAX_NEWTON_STEPS: usize = 5000;

/// Smoothed LP value `max_{mu in M} theta . mu + epsilon * sum H(mu_a)`.
/// Refuses graphs with more than 8 variables.
pub fn brute_smoothed_value(graph: &RegionGraph, theta: &Potentials, epsilon: f64) -> Result<f64> {
    Ok(brute_smoothed_solution(graph, theta, epsilon)?.0)
}

pub(crate) fn brute_smoothed_solution(
    graph: &RegionGraph,
    theta: &Potentials,
    epsilon: f64,
) -> Result<(f64, Pseudomarginals)> {
    check_epsilon(epsilon)?;
    if graph.num_vars() > MAX_VARS {
        return Err(Error::Refused {
            what: "brute smoothed solver",
            reason: format!("{} variables exceeds the limit of {MAX_VARS}", graph.num_vars()),
        });
    }
    if theta.len() != graph.table_len() || theta.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(invalid("potentials must be finite and match the graph"));
    }
    let constraints = local_polytope_constraints(graph);
    let mut x = vec![0.0; graph.table_len()];
    for alpha in 0..graph.num_regions() {
        let range = graph.table_range(alpha);
        let n = range.len() as f64;
        x[range].iter_mut().for_each(|v| *v = 1.0 / n);
    }
    let value = newton_ascent(theta.as_slice(), epsilon, &constraints, &mut x)?;
    Ok((value, Pseudomarginals::from_vec(graph, x)?))
}

/// `max_{x in simplex} theta . x - rho * sum x log x`, solved numerically.
pub fn lse_by_simplex_maximization(theta: &[f64], rho: f64) -> Result<f64> {
    check_epsilon(rho)?;
    match theta.len() {
        0 => Err(invalid("empty score vector")),
        1 => Ok(theta[0]),
        d => {
            let graph = RegionGraph::from_edges(1, d, &[])?;
            brute_smoothed_value(&graph, &Potentials::from_vec(&graph, theta.to_vec())?, rho)
        }
    }
}

/// Sparse row: `(column, coefficient)` pairs with a right-hand side.
struct Constraint {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

/// Normalization of each node plus edge-to-node agreement. Edge
/// normalization follows from these, and one agreement row per edge is
/// dropped so the rows stay linearly independent.
fn local_polytope_constraints(graph: &RegionGraph) -> Vec<Constraint> {
    let labels = graph.num_labels();
    let mut rows = Vec::new();
    for i in 0..graph.num_vars() {
        rows.push(Constraint { terms: graph.table_range(i).map(|c| (c, 1.0)).collect(), rhs: 1.0 });
    }
    for k in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(k);
        let base = graph.table_range(graph.edge_region(k)).start;
        for y in 0..labels {
            let mut terms: Vec<_> = (0..labels).map(|o| (base + y * labels + o, 1.0)).collect();
            terms.push((graph.table_range(i).start + y, -1.0));
            rows.push(Constraint { terms, rhs: 0.0 });
        }
        for y in 0..labels - 1 {
            let mut terms: Vec<_> = (0..labels).map(|o| (base + o * labels + y, 1.0)).collect();
            terms.push((graph.table_range(j).start + y, -1.0));
            rows.push(Constraint { terms, rhs: 0.0 });
        }
    }
    rows
}

fn objective(theta: &[f64], epsilon: f64, x: &[f64]) -> f64 {
    theta
        .iter()
        .zip(x)
        .map(|(t, &p)| t * p - if p > 0.0 { epsilon * p * p.ln() } else { 0.0 })
        .sum()
}

fn newton_ascent(theta: &[f64], epsilon: f64, rows: &[Constraint], x: &mut [f64]) -> Result<f64> {
    let n = x.len();
    let m = rows.len();
    let mut value = objective(theta, epsilon, x);
    for _ in 0..MAX_NEWTON_STEPS {
        let grad: Vec<f64> = theta.iter().zip(x.iter()).map(|(t, p)| t - epsilon * (p.ln() + 1.0)).collect();
        let scale: Vec<f64> = x.iter().map(|p| p / epsilon).collect();

        // Normal equations (A D A^T) nu = A D g.
        let mut normal = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for (r, row) in rows.iter().enumerate() {
            rhs[r] = row.terms.iter().map(|&(c, a)| a * scale[c] * grad[c]).sum();
            for (s, other) in rows.iter().enumerate().skip(r) {
                let mut acc = 0.0;
                for &(c, a) in &row.terms {
                    for &(c2, a2) in &other.terms {
                        if c == c2 {
                            acc += a * a2 * scale[c];
                        }
                    }
                }
                normal[r * m + s] = acc;
                normal[s * m + r] = acc;
            }
        }
        let nu = solve_spd(&mut normal, &mut rhs, m)?;

        let mut step = grad.clone();
        for (row, mult) in rows.iter().zip(&nu) {
            for &(c, a) in &row.terms {
                step[c] -= a * mult;
            }
        }
        for (s, d) in step.iter_mut().zip(&scale) {
            *s *= d;
        }
        let decrement: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        if decrement <= 2e-14 {
            break;
        }

        let mut t: f64 = 1.0;
        for (p, s) in x.iter().zip(&step) {
            if *s < 0.0 {
                t = t.min(0.99 * p / -s);
            }
        }
        let mut trial = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..80 {
            for ((tr, p), s) in trial.iter_mut().zip(x.iter()).zip(&step) {
                *tr = p + t * s;
            }
            let candidate = objective(theta, epsilon, &trial);
            if candidate >= value + 0.25 * t * decrement {
                value = candidate;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        x.copy_from_slice(&trial);
    }

    let violation = rows
        .iter()
        .map(|row| (row.terms.iter().map(|&(c, a)| a * x[c]).sum::<f64>() - row.rhs).abs())
        .fold(0.0, f64::max);
    if violation > 1e-9 {
        return Err(Error::Numerical(format!("primal iterate left the polytope by {violation:e}")));
    }
    Ok(value)
}

/// Jacobi-scaled Cholesky solve of a symmetric positive definite system.
fn solve_spd(matrix: &mut [f64], rhs: &mut [f64], n: usize) -> Result<Vec<f64>> {
    let diag: Vec<f64> = (0..n).map(|i| matrix[i * n + i].sqrt()).collect();
    if diag.iter().any(|d| d.is_nan() || *d <= 0.0) {
        return Err(Error::Numerical("singular constraint system".into()));
    }
    for i in 0..n {
        for j in 0..n {
            matrix[i * n + j] /= diag[i] * diag[j];
        }
        rhs[i] /= diag[i];
    }
    for j in 0..n {
        let mut d = matrix[j * n + j];
        for k in 0..j {
            d -= matrix[j * n + k] * matrix[j * n + k];
        }
        if d <= 1e-300 {
            return Err(Error::Numerical("constraint system is not positive definite".into()));
        }
        let d = d.sqrt();
        matrix[j * n + j] = d;
        for i in j + 1..n {
            let mut v = matrix[i * n + j];
            for k in 0..j {
                v -= matrix[i * n + k] * matrix[j * n + k];
            }
            matrix[i * n + j] = v / d;
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= matrix[i * n + k] * y[k];
        }
        y[i] /= matrix[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= matrix[k * n + i] * y[k];
        }
        y[i] /= matrix[i * n + i];
    }
    Ok(y.iter().zip(&diag).map(|(v, d)| v / d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::agreement_residual;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_node_values() {
        let g = RegionGraph::grid(1, 1, 2).unwrap();
        let eps = 0.1;
        let v = brute_smoothed_value(&g, &Potentials::zeros(&g), eps).unwrap();
        assert_abs_diff_eq!(v, eps * 2f64.ln(), epsilon = 1e-10);
        let theta = Potentials::from_vec(&g, vec![1.0, 2.0]).unwrap();
        let v = brute_smoothed_value(&g, &theta, 1.0).unwrap();
        assert_abs_diff_eq!(v, (1f64.exp() + 2f64.exp()).ln(), epsilon = 1e-10);
    }

    #[test]
    fn refuses_large_graphs() {
        let g = RegionGraph::grid(3, 3, 2).unwrap();
        let err = brute_smoothed_value(&g, &Potentials::zeros(&g), 0.1).unwrap_err();
        assert!(matches!(err, Error::Refused { .. }));
    }

    #[test]
    fn solution_lies_in_local_polytope() {
        let g = RegionGraph::grid(2, 2, 3).unwrap();
        let theta = Potentials::from_vec(&g, (0..g.table_len()).map(|x| ((x * 7) % 5) as f64 - 2.0).collect())
            .unwrap();
        let (_, mu) = brute_smoothed_solution(&g, &theta, 0.5).unwrap();
        assert!(agreement_residual(&g, &mu) < 1e-9);
        for alpha in 0..g.num_regions() {
            assert_abs_diff_eq!(mu.region(&g, alpha).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }
}
