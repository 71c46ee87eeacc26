//! Full-covariance Gaussian mixtures fitted by EM.
//!
//! Covariances carry a fixed inverse-scale prior `−(a/2)·tr(Σ⁻¹)` with
//! `a = ridge · tr(Σ_global)/d · N/K`, so each M-step is an exact MAP update
//! (`Σ_k = S_k + (a/N_k) I`) and the traced penalized log-likelihood is
//! non-decreasing. For `K = 1` the ridge is exactly `ridge · tr/d`.

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::linalg;
use crate::tensor_io::{AxisLabel, HyperTensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop when the per-point objective gains less than this.
    pub tol: f64,
    /// Relative ridge; scaled by `tr(Σ_global)/d`.
    pub ridge: f64,
    pub seed: u64,
    pub n_init: usize,
    /// Points beyond this count are uniformly subsampled for fitting.
    pub max_fit_samples: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-9,
            ridge: 1e-4,
            seed: 0,
            n_init: 3,
            max_fit_samples: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `K × d`.
    pub means: Array2<f64>,
    /// `K × d × d`.
    pub covariances: Array3<f64>,
    /// Penalized mean log-likelihood per point after each M-step.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

impl GmmModel {
    pub fn n_clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-cluster `(log w_k − ½ log det Σ_k − ½ d log 2π, L_k)`.
    pub(crate) fn factors(&self) -> Result<Vec<(f64, Vec<f64>)>> {
        let d = self.dim();
        (0..self.n_clusters())
            .map(|k| {
                let cov: Vec<f64> = self
                    .covariances
                    .index_axis(ndarray::Axis(0), k)
                    .iter()
                    .cloned()
                    .collect();
                let l = linalg::cholesky(&cov, d).ok_or_else(|| {
                    AmdError::invalid(format!(
                        "covariance of cluster {k} is not positive definite"
                    ))
                })?;
                let c = self.weights[k].ln()
                    - 0.5 * linalg::chol_logdet(&l, d)
                    - 0.5 * d as f64 * LN_2PI;
                Ok((c, l))
            })
            .collect()
    }

    /// Unnormalized log posteriors `log w_k + log N(x | μ_k, Σ_k)` into `out`.
    pub(crate) fn log_joint(
        &self,
        factors: &[(f64, Vec<f64>)],
        x: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        let d = self.dim();
        for (k, (c, l)) in factors.iter().enumerate() {
            for j in 0..d {
                scratch[j] = x[j] - self.means[[k, j]];
            }
            linalg::forward_sub(l, d, scratch);
            let m: f64 = scratch.iter().map(|z| z * z).sum();
            out[k] = c - 0.5 * m;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Points of a `[slice,row,col,subspace]` tensor as an `N × d` view.
pub fn voxel_points(x_s: &HyperTensor) -> Result<ArrayView2<'_, f64>> {
    x_s.expect_layout(
        &[
            AxisLabel::Slice,
            AxisLabel::Row,
            AxisLabel::Col,
            AxisLabel::Subspace,
        ],
        "subspace volume",
    )?;
    let d = x_s.dims()[3];
    ArrayView2::from_shape((x_s.len() / d.max(1), d), x_s.data())
        .map_err(|e| AmdError::shape(e.to_string()))
}

pub fn fit_gmm(x_s: &HyperTensor, n_clusters: usize, opts: &GmmOptions) -> Result<GmmModel> {
    fit_gmm_points(voxel_points(x_s)?, n_clusters, opts)
}

struct Stats {
    nk: Vec<f64>,
    sum: Vec<f64>,
    outer: Vec<f64>,
    objective: f64,
}

fn e_step(x: ArrayView2<f64>, model: &GmmModel, factors: &[(f64, Vec<f64>)]) -> Stats {
    let (n, d) = x.dim();
    let k_n = model.n_clusters();
    let data = x.as_slice().expect("standard layout");
    let parts: Vec<Stats> = data
        .par_chunks(BLOCK * d)
        .map(|blk| {
            let mut st = Stats {
                nk: vec![0.0; k_n],
                sum: vec![0.0; k_n * d],
                outer: vec![0.0; k_n * d * d],
                objective: 0.0,
            };
            let mut lj = vec![0.0; k_n];
            let mut scratch = vec![0.0; d];
            for p in blk.chunks(d) {
                model.log_joint(factors, p, &mut lj, &mut scratch);
                let lse = log_sum_exp(&lj);
                st.objective += lse;
                for k in 0..k_n {
                    let r = (lj[k] - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    st.nk[k] += r;
                    for a in 0..d {
                        st.sum[k * d + a] += r * p[a];
                        for b in 0..=a {
                            st.outer[(k * d + a) * d + b] += r * p[a] * p[b];
                        }
                    }
                }
            }
            st
        })
        .collect();
    let mut total = Stats {
        nk: vec![0.0; k_n],
        sum: vec![0.0; k_n * d],
        outer: vec![0.0; k_n * d * d],
        objective: 0.0,
    };
    for p in parts {
        total.objective += p.objective;
        for (a, b) in total.nk.iter_mut().zip(&p.nk) {
            *a += b;
        }
        for (a, b) in total.sum.iter_mut().zip(&p.sum) {
            *a += b;
        }
        for (a, b) in total.outer.iter_mut().zip(&p.outer) {
            *a += b;
        }
    }
    total.objective /= n as f64;
    total
}

/// `(weight, mean, row-major covariance)` of one mixture component.
type Component = (f64, Vec<f64>, Vec<f64>);

/// MAP M-step; `None` for a component whose responsibility mass is below one point.
fn m_step(st: &Stats, n: usize, d: usize, prior: f64) -> Vec<Option<Component>> {
    (0..st.nk.len())
        .map(|k| {
            let nk = st.nk[k];
            if nk < 1.0 {
                return None;
            }
            let mean: Vec<f64> = (0..d).map(|a| st.sum[k * d + a] / nk).collect();
            let mut cov = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..=a {
                    let c = st.outer[(k * d + a) * d + b] / nk - mean[a] * mean[b];
                    cov[a * d + b] = c;
                    cov[b * d + a] = c;
                }
                cov[a * d + a] += prior / nk;
            }
            Some((nk / n as f64, mean, cov))
        })
        .collect()
}

fn log_prior(model: &GmmModel, prior: f64, n: usize) -> Result<f64> {
    let d = model.dim();
    let mut s = 0.0;
    for k in 0..model.n_clusters() {
        let cov: Vec<f64> = model
            .covariances
            .index_axis(ndarray::Axis(0), k)
            .iter()
            .cloned()
            .collect();
        let l = linalg::cholesky(&cov, d)
            .ok_or_else(|| AmdError::invalid("covariance lost positive definiteness"))?;
        // tr(Σ⁻¹) = Σ_j ‖L⁻¹ e_j‖²
        let mut tr = 0.0;
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            linalg::forward_sub(&l, d, &mut e);
            tr += e.iter().map(|z| z * z).sum::<f64>();
        }
        s -= 0.5 * prior * tr;
    }
    Ok(s / n as f64)
}

fn global_moments(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mut mean = vec![0.0; d];
    for p in x.rows() {
        for a in 0..d {
            mean[a] += p[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for p in x.rows() {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    (mean, cov)
}

fn kmeans_pp(x: ArrayView2<f64>, k_n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let dist2 = |i: usize, j: usize| -> f64 {
        x.row(i)
            .iter()
            .zip(x.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut centers = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| dist2(i, centers[0])).collect();
    while centers.len() < k_n {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    pick = i;
                    break;
                }
                u -= b;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for i in 0..n {
            best[i] = best[i].min(dist2(i, next));
        }
    }
    centers
}

fn model_from(params: &[(f64, Vec<f64>, Vec<f64>)], d: usize) -> GmmModel {
    let k_n = params.len();
    let mut means = Array2::zeros((k_n, d));
    let mut covs = Array3::zeros((k_n, d, d));
    let mut weights = Vec::with_capacity(k_n);
    for (k, (w, m, c)) in params.iter().enumerate() {
        weights.push(*w);
        for a in 0..d {
            means[[k, a]] = m[a];
            for b in 0..d {
                covs[[k, a, b]] = c[a * d + b];
            }
        }
    }
    GmmModel {
        weights,
        means,
        covariances: covs,
        log_likelihood_trace: Vec::new(),
        converged: false,
    }
}

const LLOYD_ITERS: usize = 100;

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.iter().enumerate() {
        let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.0 {
            best = (d2, k);
        }
    }
    best.1
}

/// Hard-assignment sufficient statistics of `labels`, in the E-step layout.
fn hard_stats(x: ArrayView2<f64>, labels: &[usize], k_n: usize) -> Stats {
    let d = x.ncols();
    let mut st = Stats {
        nk: vec![0.0; k_n],
        sum: vec![0.0; k_n * d],
        outer: vec![0.0; k_n * d * d],
        objective: 0.0,
    };
    for (p, &k) in x.rows().into_iter().zip(labels) {
        st.nk[k] += 1.0;
        for a in 0..d {
            st.sum[k * d + a] += p[a];
            for b in 0..=a {
                st.outer[(k * d + a) * d + b] += p[a] * p[b];
            }
        }
    }
    st
}

/// k-means++ seeds refined by Lloyd iterations; each component starts from
/// the MAP moments of its k-means partition. Empty partitions keep their seed
/// with the global covariance.
fn kmeans_init(
    x: ArrayView2<f64>,
    k_n: usize,
    rng: &mut ChaCha8Rng,
    global_cov: &[f64],
    prior: f64,
) -> Vec<Component> {
    let (n, d) = x.dim();
    let mut centers: Vec<Vec<f64>> = kmeans_pp(x, k_n, rng)
        .into_iter()
        .map(|c| x.row(c).to_vec())
        .collect();
    let data = x.as_slice().expect("standard layout");
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..LLOYD_ITERS {
        let next: Vec<usize> = data.par_chunks(d).map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
        let st = hard_stats(x, &labels, k_n);
        for k in 0..k_n {
            if st.nk[k] > 0.0 {
                for a in 0..d {
                    centers[k][a] = st.sum[k * d + a] / st.nk[k];
                }
            }
        }
    }
    let st = hard_stats(x, &labels, k_n);
    m_step(&st, n, d, prior)
        .into_iter()
        .zip(centers)
        .map(|(p, c)| p.unwrap_or_else(|| (1.0 / k_n as f64, c, global_cov.to_vec())))
        .collect()
}

fn run_em(
    x: ArrayView2<f64>,
    k_n: usize,
    opts: &GmmOptions,
    rng: &mut ChaCha8Rng,
    global_cov: &[f64],
    prior: f64,
) -> Result<GmmModel> {
    let (n, d) = x.dim();
    let init = kmeans_init(x, k_n, rng, global_cov, prior);
    let mut model = model_from(&init, d);
    let mut reinitialized = vec![false; k_n];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..=opts.max_iter {
        let factors = model.factors()?;
        let st = e_step(x, &model, &factors);
        let obj = st.objective + log_prior(&model, prior, n)?;
        let gain = trace.last().map(|&p| obj - p);
        trace.push(obj);
        if gain.is_some_and(|g| g.abs() < opts.tol) {
            converged = true;
            break;
        }
        if trace.len() > opts.max_iter {
            break;
        }
        let updated = m_step(&st, n, d, prior);
        if let Some(k) = updated.iter().position(|u| u.is_none()) {
            if reinitialized[k] {
                return Err(AmdError::DegenerateCluster {
                    cluster: k,
                    weight: st.nk[k] / n as f64,
                });
            }
            reinitialized[k] = true;
            log::warn!("gmm: cluster {k} collapsed; re-initializing it at a random point");
            let c = rng.random_range(0..n);
            model.means.row_mut(k).assign(&x.row(c));
            for a in 0..d {
                for b in 0..d {
                    model.covariances[[k, a, b]] = global_cov[a * d + b];
                }
            }
            model.weights.iter_mut().for_each(|w| *w = 1.0 / k_n as f64);
            trace.clear();
            continue;
        }
        let params: Vec<_> = updated.into_iter().map(Option::unwrap).collect();
        model = model_from(&params, d);
    }
    model.log_likelihood_trace = trace;
    model.converged = converged;
    Ok(model)
}

/// EM on the rows of `x` (`N × d`), best of `n_init` k-means++ starts.
pub fn fit_gmm_points(
    x: ArrayView2<f64>,
    n_clusters: usize,
    opts: &GmmOptions,
) -> Result<GmmModel> {
    let (n, d) = x.dim();
    if n_clusters == 0 || d == 0 {
        return Err(AmdError::invalid(
            "need at least one cluster and one dimension",
        ));
    }
    if n < n_clusters {
        return Err(AmdError::invalid(format!(
            "{n} points cannot support {n_clusters} clusters"
        )));
    }
    if opts.n_init == 0 || !(opts.ridge > 0.0) {
        return Err(AmdError::invalid("n_init must be positive and ridge > 0"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AmdError::invalid("points must be finite"));
    }
    let sample: Array2<f64> = if n > opts.max_fit_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(u64::MAX);
        let mut idx = index::sample(&mut rng, n, opts.max_fit_samples).into_vec();
        idx.sort_unstable();
        Array2::from_shape_fn((idx.len(), d), |(i, j)| x[[idx[i], j]])
    } else {
        x.as_standard_layout().into_owned()
    };
    let x = sample.view();
    let n = x.nrows();
    let (_, global_cov) = global_moments(x);
    let tr: f64 = (0..d).map(|a| global_cov[a * d + a]).sum();
    let ridge = opts.ridge * (tr / d as f64).max(f64::MIN_POSITIVE);
    let prior = ridge * n as f64 / n_clusters as f64;
    let mut best: Option<GmmModel> = None;
    let mut last_err = None;
    for start in 0..opts.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(start as u64);
        match run_em(x, n_clusters, opts, &mut rng, &global_cov, prior) {
            Ok(m) => {
                let score = m
                    .log_likelihood_trace
                    .last()
                    .cloned()
                    .unwrap_or(f64::NEG_INFINITY);
                let better = best.as_ref().is_none_or(|b| {
                    score
                        > b.log_likelihood_trace
                            .last()
                            .cloned()
                            .unwrap_or(f64::NEG_INFINITY)
                });
                if better {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("gmm: start {start} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap())
}
