//! Multiplicative-update NMF, `min ‖P₊ − V Dᵀ‖²_F` over `V, D ≥ 0`, where
//! `P₊ = max(P, 0)` elementwise.
//!
//! One outer iteration is a single streaming pass over `P`: each row of `V` is
//! updated from `P_i D` (rows of `V` are independent, so this is exactly the
//! alternating scheme), and `Pᵀ V` and `Vᵀ V` are accumulated from the new rows
//! for the following `D` update. Each factor update may be repeated on the
//! cached products; every repetition is itself a majorize-minimize step, so the
//! objective never increases.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};

const EPS: f64 = 1e-300;
const ROW_BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfOptions {
    pub max_iter: usize,
    /// Stop once the objective fell by less than this fraction over `window` iterations.
    pub tol: f64,
    pub window: usize,
    pub seed: u64,
    /// Multiplicative updates applied to each factor per pass over `P`.
    pub inner_updates: usize,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            window: 10,
            seed: 0,
            inner_updates: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    /// `N_p × N_s` coefficients.
    pub v: Array2<f64>,
    /// `N_k × N_s` dictionary; each nonzero column has unit max.
    pub d: Array2<f64>,
    /// `‖P₊ − V Dᵀ‖²_F` after each iteration, starting with the initial guess.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Negative mass of `P` removed by clamping, relative to `Σ|P|`.
    pub clamped_fraction: f64,
}

impl Factorization {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

fn clamp_row(src: &[f64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.max(0.0);
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Repeated `x ← x ∘ a / (G x)`; `G` is `n×n` row-major.
fn mu_steps(x: &mut [f64], a: &[f64], g: &[f64], steps: usize, scratch: &mut [f64]) {
    let n = x.len();
    for _ in 0..steps {
        for i in 0..n {
            scratch[i] = dot(&g[i * n..(i + 1) * n], x);
        }
        for i in 0..n {
            x[i] *= a[i] / (scratch[i] + EPS);
        }
    }
}

fn gram_of_rows(m: &Array2<f64>) -> Vec<f64> {
    let n = m.ncols();
    let mut g = vec![0.0; n * n];
    for row in m.rows() {
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] += row[i] * row[j];
            }
        }
    }
    g
}

struct PassSums {
    /// `N_s × N_k`, `(P₊ᵀ V)ᵀ`.
    b: Vec<f64>,
    /// `N_s × N_s`, `Vᵀ V`.
    h: Vec<f64>,
}

/// Updates every row of `v` and returns the products needed by the `D` step.
fn v_pass(p: &Array2<f64>, v: &mut Array2<f64>, dt: &[f64], g: &[f64], steps: usize) -> PassSums {
    let (n_k, n_s) = (p.ncols(), v.ncols());
    let p_slice = p.as_slice().expect("standard layout");
    let v_slice = v.as_slice_mut().expect("standard layout");
    let partials: Vec<PassSums> = p_slice
        .par_chunks(ROW_BLOCK * n_k)
        .zip(v_slice.par_chunks_mut(ROW_BLOCK * n_s))
        .map(|(p_blk, v_blk)| {
            let mut sums = PassSums {
                b: vec![0.0; n_s * n_k],
                h: vec![0.0; n_s * n_s],
            };
            let mut q = vec![0.0; n_k];
            let mut a = vec![0.0; n_s];
            let mut scratch = vec![0.0; n_s];
            for (p_row, v_row) in p_blk.chunks(n_k).zip(v_blk.chunks_mut(n_s)) {
                clamp_row(p_row, &mut q);
                for s in 0..n_s {
                    a[s] = dot(&dt[s * n_k..(s + 1) * n_k], &q);
                }
                mu_steps(v_row, &a, g, steps, &mut scratch);
                for s in 0..n_s {
                    if v_row[s] != 0.0 {
                        axpy(v_row[s], &q, &mut sums.b[s * n_k..(s + 1) * n_k]);
                    }
                    for t in 0..n_s {
                        sums.h[s * n_s + t] += v_row[s] * v_row[t];
                    }
                }
            }
            sums
        })
        .collect();
    let mut total = PassSums {
        b: vec![0.0; n_s * n_k],
        h: vec![0.0; n_s * n_s],
    };
    for part in partials {
        axpy(1.0, &part.b, &mut total.b);
        axpy(1.0, &part.h, &mut total.h);
    }
    total
}

/// Squared Frobenius norm of `max(P, 0)` and the clamped negative fraction.
fn clamped_norms(p: &Array2<f64>) -> (f64, f64) {
    let parts: Vec<(f64, f64, f64)> = p
        .as_slice()
        .expect("standard layout")
        .par_chunks(1 << 16)
        .map(|c| {
            let (mut sq, mut neg, mut abs) = (0.0, 0.0, 0.0);
            for &x in c {
                if x > 0.0 {
                    sq += x * x;
                } else {
                    neg -= x;
                }
                abs += x.abs();
            }
            (sq, neg, abs)
        })
        .collect();
    let (sq, neg, abs) = parts
        .into_iter()
        .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    (sq, if abs > 0.0 { neg / abs } else { 0.0 })
}

fn sum_clamped(p: &Array2<f64>) -> f64 {
    p.as_slice()
        .expect("standard layout")
        .par_chunks(1 << 16)
        .map(|c| c.iter().map(|x| x.max(0.0)).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Factors `P₊ ≈ V Dᵀ` with `N_s = n_components`.
pub fn nmf(p: &Array2<f64>, n_components: usize, opts: &NmfOptions) -> Result<Factorization> {
    let (n_p, n_k) = p.dim();
    let n_s = n_components;
    if n_s == 0 || n_s > n_p.min(n_k) {
        return Err(AmdError::invalid(format!(
            "n_components must be in 1..={} for a {n_p}x{n_k} matrix, got {n_s}",
            n_p.min(n_k)
        )));
    }
    if opts.window == 0 || opts.inner_updates == 0 {
        return Err(AmdError::invalid(
            "window and inner_updates must be positive",
        ));
    }
    if !p.is_standard_layout() {
        return Err(AmdError::invalid(
            "density matrix must be row-major contiguous",
        ));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite()) {
        return Err(AmdError::invalid(format!("density matrix holds {x}")));
    }
    let (p_norm2, clamped_fraction) = clamped_norms(p);
    if p_norm2 == 0.0 {
        return Err(AmdError::invalid("density matrix has no positive entries"));
    }
    if clamped_fraction > 0.0 {
        log::info!(
            "nmf: clamped {:.3}% of density mass (negative entries)",
            100.0 * clamped_fraction
        );
    }

    // E[(V Dᵀ)_ij] = N_s · (s/2)² = mean(P₊)
    let mean = sum_clamped(p) / (n_p * n_k) as f64;
    let scale = 2.0 * (mean / n_s as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut v = Array2::from_shape_simple_fn((n_p, n_s), || scale * rng.random::<f64>());
    let mut d = Array2::from_shape_simple_fn((n_k, n_s), || scale * rng.random::<f64>());

    let objective = |b: &[f64], h: &[f64], d: &Array2<f64>| {
        let mut cross = 0.0;
        for k in 0..n_k {
            for s in 0..n_s {
                cross += b[s * n_k + k] * d[[k, s]];
            }
        }
        let dd = gram_of_rows(d);
        let quad: f64 = h.iter().zip(&dd).map(|(x, y)| x * y).sum();
        (p_norm2 - 2.0 * cross + quad).max(0.0)
    };

    let transpose = |d: &Array2<f64>| {
        let mut dt = vec![0.0; n_s * n_k];
        for k in 0..n_k {
            for s in 0..n_s {
                dt[s * n_k + k] = d[[k, s]];
            }
        }
        dt
    };

    let mut trace = Vec::with_capacity(opts.max_iter + 1);
    {
        // initial objective from a zero-step pass
        let dt = transpose(&d);
        let g = gram_of_rows(&d);
        let sums = v_pass(p, &mut v, &dt, &g, 0);
        trace.push(objective(&sums.b, &sums.h, &d));
    }

    let mut converged = false;
    let mut iterations = 0;
    let mut scratch = vec![0.0; n_s];
    for it in 1..=opts.max_iter {
        let dt = transpose(&d);
        let g = gram_of_rows(&d);
        let sums = v_pass(p, &mut v, &dt, &g, opts.inner_updates);
        let mut row = vec![0.0; n_s];
        let mut num = vec![0.0; n_s];
        for k in 0..n_k {
            for s in 0..n_s {
                row[s] = d[[k, s]];
                num[s] = sums.b[s * n_k + k];
            }
            mu_steps(&mut row, &num, &sums.h, opts.inner_updates, &mut scratch);
            for s in 0..n_s {
                d[[k, s]] = row[s];
            }
        }
        trace.push(objective(&sums.b, &sums.h, &d));
        iterations = it;
        let last = *trace.last().unwrap();
        if last <= 1e-28 * p_norm2 {
            converged = true;
            break;
        }
        if it >= opts.window {
            let past = trace[it - opts.window];
            if (past - last) / past < opts.tol {
                converged = true;
                break;
            }
        }
    }
    log::debug!(
        "nmf: {iterations} iterations, objective {:.6e} -> {:.6e}",
        trace[0],
        trace.last().unwrap()
    );

    for s in 0..n_s {
        let m = d.column(s).iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            d.column_mut(s).mapv_inplace(|x| x / m);
            v.column_mut(s).mapv_inplace(|x| x * m);
        }
    }
    Ok(Factorization {
        v,
        d,
        objective_trace: trace,
        converged,
        iterations,
        clamped_fraction,
    })
}
