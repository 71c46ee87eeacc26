//! Parallel-beam forward projector and its exact adjoint.
//!
//! Each square voxel projects onto the detector as a trapezoid (the exact
//! line-integral profile of a square at that angle). A detector bin records
//! the average of that profile over the bin width, scaled by the pitch so
//! that sinogram values are path length times voxel value. The system matrix
//! of one slice is stored column-wise (per voxel); every slice of a volume
//! shares it.

use rayon::prelude::*;

use super::geometry::ScanGeometry;
use crate::error::{AmdError, Result};
use crate::tensor_io::{AxisLabel, HyperTensor};

#[derive(Debug, Clone)]
pub struct Projector {
    geom: ScanGeometry,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    weights: Vec<f64>,
    col_norm2: Vec<f64>,
}

impl Projector {
    pub fn new(geom: &ScanGeometry) -> Result<Self> {
        geom.validate()?;
        let [_, n_rows, n_cols] = geom.volume_dims;
        let n_det = geom.n_det_cols;
        let n_vox = n_rows * n_cols;
        let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| (a.cos(), a.sin())).collect();
        let mut col_ptr = Vec::with_capacity(n_vox + 1);
        let mut row_idx = Vec::with_capacity(n_vox * geom.n_views() * 3);
        let mut weights = Vec::with_capacity(n_vox * geom.n_views() * 3);
        col_ptr.push(0);
        let vol_rc = (n_rows as f64 - 1.0) / 2.0;
        let vol_cc = (n_cols as f64 - 1.0) / 2.0;
        let det_c = (n_det as f64 - 1.0) / 2.0;
        for r in 0..n_rows {
            let y = vol_rc - r as f64;
            for c in 0..n_cols {
                let x = c as f64 - vol_cc;
                for (v, &(cos, sin)) in trig.iter().enumerate() {
                    let fp = Trapezoid::new(cos, sin);
                    // detector coordinate of the voxel center, in bins from bin 0
                    let t0 = x * cos + y * sin + det_c;
                    let lo = (t0 - fp.outer + 0.5).floor() as i64;
                    let hi = (t0 + fp.outer + 0.5).floor() as i64;
                    for j in lo.max(0)..=hi.min(n_det as i64 - 1) {
                        let a = j as f64 - 0.5 - t0;
                        let w = fp.cdf(a + 1.0) - fp.cdf(a);
                        if w > 1e-14 {
                            row_idx.push((v * n_det + j as usize) as u32);
                            weights.push(w * geom.pixel_pitch);
                        }
                    }
                }
                col_ptr.push(row_idx.len());
            }
        }
        let col_norm2 = (0..n_vox)
            .map(|i| {
                weights[col_ptr[i]..col_ptr[i + 1]]
                    .iter()
                    .map(|w| w * w)
                    .sum()
            })
            .collect();
        Ok(Self {
            geom: geom.clone(),
            col_ptr,
            row_idx,
            weights,
            col_norm2,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    pub fn voxels_per_slice(&self) -> usize {
        self.geom.volume_dims[1] * self.geom.volume_dims[2]
    }

    /// Number of entries in one slice sinogram (`views × detector columns`).
    pub fn bins_per_slice(&self) -> usize {
        self.geom.n_views() * self.geom.n_det_cols
    }

    /// Nonzero entries of the system-matrix column of in-slice voxel `voxel`
    /// as (slice-sinogram index, weight).
    #[inline]
    pub fn column(&self, voxel: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.col_ptr[voxel], self.col_ptr[voxel + 1]);
        (&self.row_idx[a..b], &self.weights[a..b])
    }

    #[inline]
    pub fn column_norm2(&self, voxel: usize) -> f64 {
        self.col_norm2[voxel]
    }

    /// Projects one slice (`rows × cols`) into a `views × det_cols` buffer.
    pub fn project_slice(&self, slice: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (vox, &x) in slice.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let (idx, w) = self.column(vox);
            for (&i, &wi) in idx.iter().zip(w) {
                out[i as usize] += wi * x;
            }
        }
    }

    pub fn backproject_slice(&self, sino: &[f64], out: &mut [f64]) {
        for (vox, o) in out.iter_mut().enumerate() {
            let (idx, w) = self.column(vox);
            *o = idx
                .iter()
                .zip(w)
                .map(|(&i, &wi)| wi * sino[i as usize])
                .sum();
        }
    }

    /// Volume `[slice,row,col]` to sinogram `[view,row,col]`.
    pub fn project(&self, x: &HyperTensor) -> Result<HyperTensor> {
        x.expect_layout(
            &[AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
            "project",
        )?;
        if x.dims() != self.geom.volume_dims {
            return Err(AmdError::shape(format!(
                "volume dims {:?} do not match geometry {:?}",
                x.dims(),
                self.geom.volume_dims
            )));
        }
        let n_vox = self.voxels_per_slice();
        let per_slice: Vec<Vec<f64>> = x
            .data()
            .par_chunks(n_vox)
            .map(|slice| {
                let mut buf = vec![0.0; self.bins_per_slice()];
                self.project_slice(slice, &mut buf);
                buf
            })
            .collect();
        Ok(self.slices_to_sinogram(&per_slice))
    }

    /// Sinogram `[view,row,col]` to volume `[slice,row,col]`.
    pub fn backproject(&self, s: &HyperTensor) -> Result<HyperTensor> {
        s.expect_layout(
            &[AxisLabel::View, AxisLabel::Row, AxisLabel::Col],
            "backproject",
        )?;
        if s.dims() != self.geom.sinogram_dims() {
            return Err(AmdError::shape(format!(
                "sinogram dims {:?} do not match geometry {:?}",
                s.dims(),
                self.geom.sinogram_dims()
            )));
        }
        let n_vox = self.voxels_per_slice();
        let mut data = vec![0.0; self.geom.volume_dims[0] * n_vox];
        data.par_chunks_mut(n_vox)
            .enumerate()
            .for_each(|(row, out)| {
                let sino = self.slice_sinogram(s, row);
                self.backproject_slice(&sino, out);
            });
        Ok(HyperTensor::from_parts_unchecked(
            self.geom.volume_dims.to_vec(),
            vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
            data,
        ))
    }

    /// Extracts detector row `row` of a `[view,row,col]` sinogram as a
    /// `views × cols` buffer.
    pub fn slice_sinogram(&self, s: &HyperTensor, row: usize) -> Vec<f64> {
        sinogram_row(s.data(), self.geom.sinogram_dims(), row)
    }

    pub fn slices_to_sinogram(&self, per_slice: &[Vec<f64>]) -> HyperTensor {
        let [n_v, n_r, n_c] = self.geom.sinogram_dims();
        let mut data = vec![0.0; n_v * n_r * n_c];
        for (r, buf) in per_slice.iter().enumerate() {
            for v in 0..n_v {
                data[(v * n_r + r) * n_c..(v * n_r + r + 1) * n_c]
                    .copy_from_slice(&buf[v * n_c..(v + 1) * n_c]);
            }
        }
        HyperTensor::from_parts_unchecked(
            vec![n_v, n_r, n_c],
            vec![AxisLabel::View, AxisLabel::Row, AxisLabel::Col],
            data,
        )
    }
}

pub(crate) fn sinogram_row(data: &[f64], dims: [usize; 3], row: usize) -> Vec<f64> {
    let [n_v, n_r, n_c] = dims;
    let mut out = Vec::with_capacity(n_v * n_c);
    for v in 0..n_v {
        let start = (v * n_r + row) * n_c;
        out.extend_from_slice(&data[start..start + n_c]);
    }
    out
}

pub fn project(x: &HyperTensor, geom: &ScanGeometry) -> Result<HyperTensor> {
    Projector::new(geom)?.project(x)
}

pub fn backproject(s: &HyperTensor, geom: &ScanGeometry) -> Result<HyperTensor> {
    Projector::new(geom)?.backproject(s)
}

/// Projection profile of a unit square at one angle, in units of the pitch.
/// Unit area; flat top of half-width `inner`, support half-width `outer`.
#[derive(Debug, Clone, Copy)]
struct Trapezoid {
    inner: f64,
    outer: f64,
    height: f64,
}

impl Trapezoid {
    fn new(cos: f64, sin: f64) -> Self {
        let (c, s) = (cos.abs(), sin.abs());
        Self {
            inner: (c - s).abs() / 2.0,
            outer: (c + s) / 2.0,
            height: 1.0 / c.max(s),
        }
    }

    /// ∫_{-∞}^{u} profile.
    fn cdf(&self, u: f64) -> f64 {
        let a = u.abs();
        let half = if a <= self.inner {
            self.height * a
        } else if a < self.outer {
            let ramp = self.outer - self.inner;
            self.height * self.inner
                + self.height * (ramp * ramp - (self.outer - a).powi(2)) / (2.0 * ramp)
        } else {
            0.5
        };
        0.5 + half.min(0.5).copysign(u)
    }
}
