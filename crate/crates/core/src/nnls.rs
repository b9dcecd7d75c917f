//! Nonnegative least squares, Lawson–Hanson active-set method.
//!
//! The solver works on the normal equations `G = AᵀA`, `h = Aᵀb` so that
//! callers with structured `A` can assemble the Gram matrix directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes `½xᵀGx − hᵀx` over `x ≥ 0`.
pub fn nnls_gram(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<NnlsSolution> {
    let n = h.len();
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::invalid(format!("gram matrix is {}x{}, rhs has {n}", g.nrows(), g.ncols())));
    }
    let max_iter = 30 * n.max(1) + 100;
    let scale = h.amax().max(g.diagonal().amax()).max(f64::MIN_POSITIVE);
    let tol = 1e-13 * scale;

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;

    loop {
        let grad = h - g * &x;
        let entering = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(t) = entering.filter(|&t| grad[t] > tol) else {
            break;
        };
        passive[t] = true;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::NnlsNoConvergence {
                    iterations,
                    passive: passive.iter().filter(|&&p| p).count(),
                });
            }
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let s = solve_passive(g, h, &idx);
            if s.iter().all(|&v| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&s) {
                    x[j] = v;
                }
                break;
            }
            // step back toward the feasible region until a variable hits 0
            let alpha = idx
                .iter()
                .zip(&s)
                .filter(|(_, &v)| v <= 0.0)
                .map(|(&j, &v)| x[j] / (x[j] - v))
                .fold(f64::INFINITY, f64::min);
            for (&j, &v) in idx.iter().zip(&s) {
                let old = x[j];
                x[j] += alpha * (v - old);
                if x[j] <= 0.0 || (v <= 0.0 && x[j] <= 1e-12 * old) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Ok(NnlsSolution {
        x: x.iter().copied().collect(),
        iterations,
    })
}

fn solve_passive(g: &DMatrix<f64>, h: &DVector<f64>, idx: &[usize]) -> Vec<f64> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |r, c| g[(idx[r], idx[c])]);
    let rhs = DVector::from_fn(k, |r, _| h[idx[r]]);
    if let Some(ch) = sub.clone().cholesky() {
        return ch.solve(&rhs).iter().copied().collect();
    }
    // rank-deficient passive block: minimum-norm solution
    let svd = sub.svd(true, true);
    let eps = 1e-12 * svd.singular_values.amax();
    svd.solve(&rhs, eps)
        .map(|s| s.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; k])
}

/// Minimizes `‖Ax − b‖` over `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    if a.nrows() != b.len() {
        return Err(Error::invalid("row count of A differs from length of b"));
    }
    nnls_gram(&(a.transpose() * a), &(a.transpose() * b))
}
