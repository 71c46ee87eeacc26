use ndarray::Array2;
use rayon::prelude::*;

use super::gmm::{voxel_points, GmmModel};
use crate::error::{AmdError, Result};
use crate::simulation::SpectraTable;
use crate::tensor_io::{AxisLabel, HyperTensor, WavelengthGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Cluster id per voxel, `[slice,row,col]`.
    pub labels: HyperTensor,
    /// `T`: per-cluster mean of `x^s`, `K × N_s`.
    pub cluster_means: Array2<f64>,
    /// Voxels per cluster (after erosion, if enabled).
    pub counts: Vec<usize>,
    /// `false` for clusters with no voxels; their `T` row is zero.
    pub valid: Vec<bool>,
    pub background_cluster_id: usize,
}

impl Segmentation {
    pub fn n_clusters(&self) -> usize {
        self.valid.len()
    }

    /// Non-background cluster ids in ascending order.
    pub fn material_clusters(&self) -> Vec<usize> {
        (0..self.n_clusters())
            .filter(|&k| k != self.background_cluster_id)
            .collect()
    }
}

/// Assigns each voxel to its maximum-posterior cluster (lowest id on ties)
/// and computes `T` over all labeled voxels.
pub fn segment(x_s: &HyperTensor, model: &GmmModel) -> Result<Segmentation> {
    segment_with(x_s, model, false)
}

/// As [`segment`]; with `erode`, `T` is computed only from voxels whose six
/// face neighbours share their label (falling back to the whole region when
/// erosion would empty it).
pub fn segment_with(x_s: &HyperTensor, model: &GmmModel, erode: bool) -> Result<Segmentation> {
    let pts = voxel_points(x_s)?;
    let d = pts.ncols();
    if d != model.dim() {
        return Err(AmdError::shape(format!(
            "model has dimension {}, volume has {d}",
            model.dim()
        )));
    }
    let factors = model.factors()?;
    let k_n = model.n_clusters();
    let data = pts.as_slice().expect("standard layout");
    let labels: Vec<usize> = data
        .par_chunks(d)
        .map_init(
            || (vec![0.0; k_n], vec![0.0; d]),
            |(lj, scratch), p| {
                model.log_joint(&factors, p, lj, scratch);
                let mut best = 0;
                for k in 1..k_n {
                    if lj[k] > lj[best] {
                        best = k;
                    }
                }
                best
            },
        )
        .collect();
    let dims = &x_s.dims()[..3];
    let shape = [dims[0], dims[1], dims[2]];
    let label_tensor = HyperTensor::new(
        shape.to_vec(),
        vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
        labels.iter().map(|&l| l as f64).collect(),
    )?;
    let (cluster_means, counts) = cluster_means(x_s, &labels, k_n, erode)?;
    Ok(finish(label_tensor, cluster_means, counts))
}

fn finish(labels: HyperTensor, cluster_means: Array2<f64>, counts: Vec<usize>) -> Segmentation {
    let valid: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let norm = |k: usize| cluster_means.row(k).iter().map(|v| v * v).sum::<f64>();
    let background_cluster_id = (0..valid.len())
        .filter(|&k| valid[k])
        .min_by(|&a, &b| norm(a).total_cmp(&norm(b)))
        .unwrap_or(0);
    for (k, ok) in valid.iter().enumerate() {
        if !ok {
            log::warn!("segmentation: cluster {k} received no voxels");
        }
    }
    Segmentation {
        labels,
        cluster_means,
        counts,
        valid,
        background_cluster_id,
    }
}

/// Per-label means of `x^s`; returns `(T, counts)`.
pub fn cluster_means(
    x_s: &HyperTensor,
    labels: &[usize],
    n_clusters: usize,
    erode: bool,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let pts = voxel_points(x_s)?;
    let d = pts.ncols();
    if labels.len() != pts.nrows() {
        return Err(AmdError::shape("one label per voxel required"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_clusters) {
        return Err(AmdError::invalid(format!("label {l} out of range")));
    }
    let accumulate = |keep: &dyn Fn(usize) -> bool| {
        let mut sums = Array2::<f64>::zeros((n_clusters, d));
        let mut counts = vec![0usize; n_clusters];
        for (i, &l) in labels.iter().enumerate() {
            if keep(i) {
                counts[l] += 1;
                for a in 0..d {
                    sums[[l, a]] += pts[[i, a]];
                }
            }
        }
        (sums, counts)
    };
    let (mut sums, mut counts) = accumulate(&|_| true);
    if erode {
        let dims = x_s.dims();
        let (n_s, n_r, n_c) = (dims[0], dims[1], dims[2]);
        let interior = |i: usize| {
            let (s, r, c) = (i / (n_r * n_c), (i / n_c) % n_r, i % n_c);
            let l = labels[i];
            let same = |j: usize| labels[j] == l;
            (s == 0 || same(i - n_r * n_c))
                && (s + 1 == n_s || same(i + n_r * n_c))
                && (r == 0 || same(i - n_c))
                && (r + 1 == n_r || same(i + n_c))
                && (c == 0 || same(i - 1))
                && (c + 1 == n_c || same(i + 1))
        };
        let (es, ec) = accumulate(&interior);
        for k in 0..n_clusters {
            if ec[k] > 0 {
                sums.row_mut(k).assign(&es.row(k));
                counts[k] = ec[k];
            } else if counts[k] > 0 {
                log::warn!("segmentation: erosion empties cluster {k}; using the full region");
            }
        }
    }
    for k in 0..n_clusters {
        if counts[k] > 0 {
            let n = counts[k] as f64;
            sums.row_mut(k).mapv_inplace(|v| v / n);
        }
    }
    Ok((sums, counts))
}

#[derive(Debug, Clone)]
pub struct MaterialDictionary {
    /// `D^m = D^s Tᵀ`, `N_k × N_m`, clamped at zero.
    pub d_m: Array2<f64>,
    pub spectra: SpectraTable,
    /// Cluster id behind each material column.
    pub clusters: Vec<usize>,
    /// Negative mass removed from `D^m`, relative to `Σ|D^m|`.
    pub clamped_fraction: f64,
}

/// Drops the background row of `T`, forms `D^m = D^s Tᵀ` and `μ = D^mᵀ/δ`.
pub fn material_dictionary(
    d_s: &Array2<f64>,
    seg: &Segmentation,
    delta: f64,
    grid: &WavelengthGrid,
) -> Result<MaterialDictionary> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(AmdError::invalid(format!(
            "voxel pitch must be positive, got {delta}"
        )));
    }
    let (n_k, n_s) = d_s.dim();
    if seg.cluster_means.ncols() != n_s {
        return Err(AmdError::shape(format!(
            "T has {} columns, D^s has {n_s}",
            seg.cluster_means.ncols()
        )));
    }
    if n_k != grid.n_bins {
        return Err(AmdError::shape(format!(
            "D^s has {n_k} bins, grid has {}",
            grid.n_bins
        )));
    }
    let clusters = seg.material_clusters();
    if let Some(&k) = clusters.iter().find(|&&k| !seg.valid[k]) {
        return Err(AmdError::invalid(format!(
            "cluster {k} is empty; cannot form its material spectrum"
        )));
    }
    let n_m = clusters.len();
    let mut d_m = Array2::zeros((n_k, n_m));
    for (m, &k) in clusters.iter().enumerate() {
        let t = seg.cluster_means.row(k);
        for kk in 0..n_k {
            d_m[[kk, m]] = (0..n_s).map(|s| d_s[[kk, s]] * t[s]).sum::<f64>();
        }
    }
    let abs: f64 = d_m.iter().map(|v: &f64| v.abs()).sum();
    let neg = d_m.iter().filter(|v| **v < 0.0).fold(0.0, |a, v| a - v);
    let clamped_fraction = if abs > 0.0 { neg / abs } else { 0.0 };
    if clamped_fraction > 0.0 {
        log::info!(
            "material dictionary: clamped {:.3}% negative mass",
            100.0 * clamped_fraction
        );
    }
    d_m.mapv_inplace(|v| v.max(0.0));
    let mu = d_m.t().mapv(|v| v / delta);
    let names = clusters.iter().map(|k| format!("material_{k}")).collect();
    Ok(MaterialDictionary {
        spectra: SpectraTable::new(names, *grid, mu)?,
        d_m,
        clusters,
        clamped_fraction,
    })
}
