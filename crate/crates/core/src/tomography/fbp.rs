//! Filtered back-projection with a Ram-Lak ramp filter.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::geometry::ScanGeometry;
use super::projector::sinogram_row;
use crate::error::{AmdError, Result};
use crate::tensor_io::{AxisLabel, HyperTensor};

/// Reusable FBP operator: the ramp filter spectrum, FFT plans and
/// per-voxel interpolation taps are built once per geometry.
pub struct Fbp {
    geom: ScanGeometry,
    pad: usize,
    filter: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    // per (voxel, view): left detector bin and linear weight of the right one
    taps: Vec<(i32, f64)>,
}

impl Fbp {
    pub fn new(geom: &ScanGeometry) -> Result<Self> {
        geom.validate()?;
        if geom.n_views() < 2 {
            return Err(AmdError::invalid(format!(
                "FBP needs at least 2 views, got {}",
                geom.n_views()
            )));
        }
        let n_det = geom.n_det_cols;
        let pad = (2 * n_det).next_power_of_two();
        let tau = geom.pixel_pitch;

        // spatial-domain Ram-Lak kernel, wrapped for circular convolution
        let mut kernel = vec![Complex64::new(0.0, 0.0); pad];
        kernel[0].re = 1.0 / (4.0 * tau * tau);
        for n in 1..pad / 2 {
            if n % 2 == 1 {
                let v = -1.0 / ((n * n) as f64 * PI * PI * tau * tau);
                kernel[n].re = v;
                kernel[pad - n].re = v;
            }
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(pad);
        let inv = planner.plan_fft_inverse(pad);
        fwd.process(&mut kernel);
        // the kernel is real and even, so its spectrum is real
        let filter = kernel.iter().map(|c| c.re * tau / pad as f64).collect();

        let [_, n_rows, n_cols] = geom.volume_dims;
        let vol_rc = (n_rows as f64 - 1.0) / 2.0;
        let vol_cc = (n_cols as f64 - 1.0) / 2.0;
        let det_c = (n_det as f64 - 1.0) / 2.0;
        let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| (a.cos(), a.sin())).collect();
        let mut taps = Vec::with_capacity(n_rows * n_cols * trig.len());
        for r in 0..n_rows {
            let y = vol_rc - r as f64;
            for c in 0..n_cols {
                let x = c as f64 - vol_cc;
                for &(cos, sin) in &trig {
                    let t = x * cos + y * sin + det_c;
                    let left = t.floor();
                    taps.push((left as i32, t - left));
                }
            }
        }
        Ok(Self {
            geom: geom.clone(),
            pad,
            filter,
            fwd,
            inv,
            taps,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    /// Reconstructs one slice from a `views × det_cols` sinogram buffer.
    pub fn reconstruct_slice(&self, sino: &[f64]) -> Vec<f64> {
        let n_det = self.geom.n_det_cols;
        let n_views = self.geom.n_views();
        let mut filtered = vec![0.0; n_views * n_det];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.pad];
        let mut scratch = vec![
            Complex64::new(0.0, 0.0);
            self.fwd
                .get_inplace_scratch_len()
                .max(self.inv.get_inplace_scratch_len())
        ];
        for v in 0..n_views {
            let row = &sino[v * n_det..(v + 1) * n_det];
            if row.iter().all(|&x| x == 0.0) {
                continue;
            }
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (b, &x) in buf.iter_mut().zip(row) {
                b.re = x;
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for (b, &h) in buf.iter_mut().zip(&self.filter) {
                *b *= h;
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            for (f, b) in filtered[v * n_det..(v + 1) * n_det].iter_mut().zip(&buf) {
                *f = b.re;
            }
        }

        let scale = PI / n_views as f64;
        let n_vox = self.geom.volume_dims[1] * self.geom.volume_dims[2];
        let mut out = vec![0.0; n_vox];
        for (vox, o) in out.iter_mut().enumerate() {
            let taps = &self.taps[vox * n_views..(vox + 1) * n_views];
            let mut acc = 0.0;
            for (v, &(left, frac)) in taps.iter().enumerate() {
                let q = &filtered[v * n_det..(v + 1) * n_det];
                let at = |j: i32| {
                    if j >= 0 && (j as usize) < n_det {
                        q[j as usize]
                    } else {
                        0.0
                    }
                };
                acc += (1.0 - frac) * at(left) + frac * at(left + 1);
            }
            *o = acc * scale;
        }
        out
    }

    pub fn reconstruct(&self, s: &HyperTensor) -> Result<HyperTensor> {
        s.expect_layout(&[AxisLabel::View, AxisLabel::Row, AxisLabel::Col], "fbp")?;
        if s.dims() != self.geom.sinogram_dims() {
            return Err(AmdError::shape(format!(
                "sinogram dims {:?} do not match geometry {:?}",
                s.dims(),
                self.geom.sinogram_dims()
            )));
        }
        let n_vox = self.geom.volume_dims[1] * self.geom.volume_dims[2];
        let mut data = vec![0.0; self.geom.volume_dims[0] * n_vox];
        data.par_chunks_mut(n_vox)
            .enumerate()
            .for_each(|(row, out)| {
                let sino = sinogram_row(s.data(), self.geom.sinogram_dims(), row);
                out.copy_from_slice(&self.reconstruct_slice(&sino));
            });
        Ok(HyperTensor::from_parts_unchecked(
            self.geom.volume_dims.to_vec(),
            vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
            data,
        ))
    }
}

pub fn fbp(s: &HyperTensor, geom: &ScanGeometry) -> Result<HyperTensor> {
    Fbp::new(geom)?.reconstruct(s)
}
