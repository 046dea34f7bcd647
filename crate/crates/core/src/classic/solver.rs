//! Least squares over the probability simplex.

use nalgebra::{DMatrix, DVector};

use crate::diffcore::Tensor;

pub const SOLVER_TOL: f64 = 1e-10;
pub const SOLVER_MAX_ITER: usize = 100_000;

/// Euclidean projection onto `{p : p ≥ 0, Σp = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("NaN in simplex projection"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexLsSolution {
    pub p: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn residual_sq(c: &Tensor, p: &[f64], q: &[f64]) -> f64 {
    (0..c.rows())
        .map(|i| {
            let r: f64 = c.row(i).iter().zip(p).map(|(a, b)| a * b).sum::<f64>() - q[i];
            r * r
        })
        .sum()
}

/// Minimizes `‖C p − q‖²` over the simplex.
///
/// Accelerated projected gradient, then an exact equality-constrained solve on
/// the support of the iterate, kept when it stays feasible and does not
/// increase the objective.
pub fn solve_simplex_ls(c: &Tensor, q: &[f64]) -> SimplexLsSolution {
    let (rows, l) = (c.rows(), c.cols());
    assert_eq!(rows, q.len(), "system has {} rows, right-hand side has {}", rows, q.len());
    let cm = DMatrix::from_row_slice(rows, l, c.data());
    let qv = DVector::from_column_slice(q);
    let ctc = cm.transpose() * &cm;
    let ctq = cm.transpose() * &qv;
    let lip = 2.0 * ctc.symmetric_eigenvalues().max().max(1e-12);
    let grad = |p: &DVector<f64>| 2.0 * (&ctc * p - &ctq);

    let mut p = DVector::from_element(l, 1.0 / l as f64);
    let mut y = p.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < SOLVER_MAX_ITER {
        iterations += 1;
        let step = &y - grad(&y) / lip;
        let next = DVector::from_vec(project_simplex(step.as_slice()));
        let change = (&next - &p).amax();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &p) * ((t - 1.0) / t_next);
        p = next;
        t = t_next;
        if change < SOLVER_TOL {
            converged = true;
            break;
        }
    }
    let mut best = p.as_slice().to_vec();
    let mut objective = residual_sq(c, &best, q);
    if let Some(polished) = polish(&ctc, &ctq, &best) {
        let obj = residual_sq(c, &polished, q);
        if obj <= objective + 1e-15 {
            best = polished;
            objective = obj;
        }
    }
    if !converged {
        log::warn!("simplex least squares stopped after {} iterations without converging", iterations);
    }
    SimplexLsSolution { p: best, objective, iterations, converged }
}

fn polish(ctc: &DMatrix<f64>, ctq: &DVector<f64>, p: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 1e-9).collect();
    let s = support.len();
    if s == 0 {
        return None;
    }
    let mut kkt = DMatrix::zeros(s + 1, s + 1);
    let mut rhs = DVector::zeros(s + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = ctc[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
        rhs[a] = ctq[i];
    }
    rhs[s] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if (0..s).any(|a| !sol[a].is_finite() || sol[a] < 0.0) {
        return None;
    }
    let mut out = vec![0.0; p.len()];
    for (a, &i) in support.iter().enumerate() {
        out[i] = sol[a];
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_system_returns_rhs() {
        let p = solve_simplex_ls(&Tensor::identity(3), &[0.2, 0.3, 0.5]).p;
        assert!(p.iter().zip([0.2, 0.3, 0.5]).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
