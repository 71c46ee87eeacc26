//! Row-wise non-negative least squares against a fixed dictionary,
//! `min_{v ≥ 0} ‖p − D v‖²`, by the Lawson–Hanson active-set method on the
//! normal equations.

use ndarray::Array2;
use rayon::prelude::*;

use super::nmf::dot;
use crate::error::{AmdError, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct FixedDictionaryFit {
    /// `N_p × N_m`.
    pub v: Array2<f64>,
    /// `‖p_i − D v_i‖₂` per row.
    pub residuals: Vec<f64>,
}

impl FixedDictionaryFit {
    pub fn total_objective(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }
}

/// Solves `min_{v ≥ 0} vᵀ G v − 2 cᵀ v` for SPD `G` (`n×n`, row-major).
/// If `trace` is given, the objective is appended after every change of `v`.
pub fn nnls_gram(g: &[f64], c: &[f64], mut trace: Option<&mut Vec<f64>>) -> Result<Vec<f64>> {
    let n = c.len();
    let cmax = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * cmax.max(f64::MIN_POSITIVE) * n as f64;
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let obj = |x: &[f64]| {
        let mut q = 0.0;
        for i in 0..n {
            q += x[i] * (dot(&g[i * n..(i + 1) * n], x) - 2.0 * c[i]);
        }
        q
    };
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj(&x));
    }
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| c[i] - dot(&g[i * n..(i + 1) * n], x))
            .collect()
    };

    for _outer in 0..3 * n + 10 {
        let w = grad(&x);
        let pick = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let m = idx.len();
            let mut sub = vec![0.0; m * m];
            let mut z: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            for (a, &i) in idx.iter().enumerate() {
                for (b, &k) in idx.iter().enumerate() {
                    sub[a * m + b] = g[i * n + k];
                }
            }
            let l = linalg::cholesky(&sub, m).ok_or_else(|| {
                AmdError::invalid("dictionary is rank deficient on the active set")
            })?;
            linalg::chol_solve(&l, m, &mut z);
            if z.iter().all(|&v| v > 0.0) {
                for i in 0..n {
                    x[i] = 0.0;
                }
                for (a, &i) in idx.iter().enumerate() {
                    x[i] = z[a];
                }
                break;
            }
            // step toward z until the first passive variable hits zero
            let (mut alpha, mut block) = (f64::INFINITY, usize::MAX);
            for (a, &i) in idx.iter().enumerate() {
                if z[a] <= 0.0 {
                    let r = x[i] / (x[i] - z[a]);
                    if r < alpha {
                        alpha = r;
                        block = i;
                    }
                }
            }
            for (a, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z[a] - x[i]);
                if i == block || x[i] <= 1e-15 * cmax.max(1.0) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(obj(&x));
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(obj(&x));
        }
    }
    Ok(x)
}

/// Per-row NNLS of `P` (`N_p × N_k`) against the columns of `D` (`N_k × N_m`).
pub fn nmf_fixed_dictionary(p: &Array2<f64>, d: &Array2<f64>) -> Result<FixedDictionaryFit> {
    let (n_p, n_k) = p.dim();
    if d.nrows() != n_k {
        return Err(AmdError::shape(format!(
            "dictionary has {} rows, density matrix has {n_k} columns",
            d.nrows()
        )));
    }
    let n_m = d.ncols();
    if n_m == 0 {
        return Err(AmdError::invalid("dictionary has no columns"));
    }
    if d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(AmdError::invalid(
            "dictionary must be finite and non-negative",
        ));
    }
    for m in 0..n_m {
        if d.column(m).iter().all(|&x| x == 0.0) {
            return Err(AmdError::invalid(format!(
                "dictionary column {m} is all zero"
            )));
        }
    }
    let mut dt = vec![0.0; n_m * n_k];
    for k in 0..n_k {
        for m in 0..n_m {
            dt[m * n_k + k] = d[[k, m]];
        }
    }
    let mut g = vec![0.0; n_m * n_m];
    for a in 0..n_m {
        for b in 0..n_m {
            g[a * n_m + b] = dot(&dt[a * n_k..(a + 1) * n_k], &dt[b * n_k..(b + 1) * n_k]);
        }
    }
    if linalg::cholesky(&g, n_m).is_none() {
        return Err(AmdError::invalid(
            "dictionary columns are linearly dependent",
        ));
    }

    let p_owned;
    let p = if p.is_standard_layout() {
        p
    } else {
        p_owned = p.as_standard_layout().into_owned();
        &p_owned
    };
    let rows: Vec<Result<(Vec<f64>, f64)>> = p
        .as_slice()
        .expect("standard layout")
        .par_chunks(n_k)
        .map(|row| {
            let c: Vec<f64> = (0..n_m)
                .map(|m| dot(&dt[m * n_k..(m + 1) * n_k], row))
                .collect();
            let x = nnls_gram(&g, &c, None)?;
            let mut r2 = 0.0;
            for k in 0..n_k {
                let mut e = -row[k];
                for m in 0..n_m {
                    e += dt[m * n_k + k] * x[m];
                }
                r2 += e * e;
            }
            Ok((x, r2.sqrt()))
        })
        .collect();
    let mut v = Array2::zeros((n_p, n_m));
    let mut residuals = Vec::with_capacity(n_p);
    for (i, r) in rows.into_iter().enumerate() {
        let (x, res) = r?;
        for m in 0..n_m {
            v[[i, m]] = x[m];
        }
        residuals.push(res);
    }
    Ok(FixedDictionaryFit { v, residuals })
}
