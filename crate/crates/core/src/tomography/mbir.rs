//! MAP reconstruction by iterative coordinate descent (ICD).
//!
//! Minimizes `1/(2σ_v²)‖y − A x‖² + Σ_{pairs} w ρ(x_s − x_r)` one voxel at a
//! time. The QGGMRF term is replaced by its symmetric quadratic majorizer at
//! the current point, so every voxel update is closed form and can only
//! lower the objective.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fbp::Fbp;
use super::geometry::ScanGeometry;
use super::prior::{qggmrf_potential, surrogate_coefficient, PriorParams};
use super::projector::{sinogram_row, Projector};
use crate::error::{AmdError, Result};
use crate::tensor_io::{AxisLabel, HyperTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MbirInit {
    Zero,
    Fbp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbirOptions {
    /// Maximum number of full ICD passes.
    pub max_iter: usize,
    /// Relative objective change below which iteration stops.
    pub stop_tol: f64,
    /// Seed of the per-pass random voxel order.
    pub seed: u64,
    /// Clamp voxels at zero.
    pub positivity: bool,
    pub init: MbirInit,
}

impl Default for MbirOptions {
    fn default() -> Self {
        Self {
            max_iter: 40,
            stop_tol: 1e-5,
            seed: 0,
            positivity: false,
            init: MbirInit::Fbp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    /// `[slice,row,col]`.
    pub volume: HyperTensor,
    /// Objective before the first pass followed by one entry per pass.
    pub objective_trace: Vec<f64>,
    pub noise_sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Data-fit weight and prior for one reconstructed component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSettings {
    pub sigma_v: f64,
    pub prior: PriorParams,
}

#[derive(Debug, Clone)]
pub struct StackResult {
    /// `[slice,row,col,component]`.
    pub volume: HyperTensor,
    pub components: Vec<ReconResult>,
}

/// Geometry-bound reconstructor; the system matrix and FBP tables are built
/// once and reused across components.
pub struct Mbir {
    projector: Projector,
    fbp: Option<Fbp>,
}

impl Mbir {
    pub fn new(geom: &ScanGeometry) -> Result<Self> {
        let projector = Projector::new(geom)?;
        let fbp = if geom.n_views() >= 2 {
            Some(Fbp::new(geom)?)
        } else {
            None
        };
        Ok(Self { projector, fbp })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn fbp(&self) -> Option<&Fbp> {
        self.fbp.as_ref()
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.projector.geometry()
    }

    pub fn reconstruct(
        &self,
        sino: &HyperTensor,
        sigma_v: f64,
        pp: &PriorParams,
        opts: &MbirOptions,
    ) -> Result<ReconResult> {
        sino.expect_layout(&[AxisLabel::View, AxisLabel::Row, AxisLabel::Col], "mbir")?;
        if sino.dims() != self.geometry().sinogram_dims() {
            return Err(AmdError::shape(format!(
                "sinogram dims {:?} do not match geometry {:?}",
                sino.dims(),
                self.geometry().sinogram_dims()
            )));
        }
        self.reconstruct_raw(sino.data(), sigma_v, pp, opts)
    }

    /// `sino` is a `[view,row,col]` buffer for this geometry.
    pub fn reconstruct_raw(
        &self,
        sino: &[f64],
        sigma_v: f64,
        pp: &PriorParams,
        opts: &MbirOptions,
    ) -> Result<ReconResult> {
        if !(sigma_v > 0.0 && sigma_v.is_finite()) {
            return Err(AmdError::invalid(format!(
                "noise sigma must be positive, got {sigma_v}"
            )));
        }
        pp.validate()?;
        let geom = self.geometry();
        let [n_s, n_r, n_c] = geom.volume_dims;
        let n_vox = n_r * n_c;
        let sdims = geom.sinogram_dims();

        let y: Vec<Vec<f64>> = (0..n_s).map(|s| sinogram_row(sino, sdims, s)).collect();
        let mut x: Vec<f64> = match (opts.init, &self.fbp) {
            (MbirInit::Fbp, Some(fbp)) => y
                .par_iter()
                .flat_map_iter(|ys| fbp.reconstruct_slice(ys))
                .collect(),
            _ => vec![0.0; n_s * n_vox],
        };
        if opts.positivity {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut err: Vec<Vec<f64>> = y
            .par_iter()
            .enumerate()
            .map(|(s, ys)| {
                let mut ax = vec![0.0; ys.len()];
                self.projector
                    .project_slice(&x[s * n_vox..(s + 1) * n_vox], &mut ax);
                ys.iter().zip(&ax).map(|(a, b)| a - b).collect()
            })
            .collect();

        let inv_s2 = 1.0 / (sigma_v * sigma_v);
        let neighbors = pp.all_neighbors();
        let fwd = pp.forward_neighbors();
        let mut trace = vec![objective(&x, &err, [n_s, n_r, n_c], inv_s2, pp, &fwd)];
        let slack = 1e-9 * trace[0].abs().max(f64::MIN_POSITIVE);
        let mut order: Vec<usize> = (0..n_vox).collect();
        let mut converged = false;
        let mut iterations = 0;

        for pass in 0..opts.max_iter {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(pass as u64);
            order.shuffle(&mut rng);
            for s in 0..n_s {
                let e = &mut err[s];
                for &j in &order {
                    let (r, c) = (j / n_c, j % n_c);
                    let at = s * n_vox + j;
                    let xs = x[at];
                    let (idx, w) = self.projector.column(j);
                    let mut dot = 0.0;
                    for (&i, &wi) in idx.iter().zip(w) {
                        dot += wi * e[i as usize];
                    }
                    let theta2 = self.projector.column_norm2(j) * inv_s2;
                    let mut num = theta2 * xs + dot * inv_s2;
                    let mut den = theta2;
                    for &((ds, dr, dc), wt) in &neighbors {
                        if wt == 0.0 {
                            continue;
                        }
                        let (ss, rr, cc) = (s as i32 + ds, r as i32 + dr, c as i32 + dc);
                        if ss < 0
                            || rr < 0
                            || cc < 0
                            || ss >= n_s as i32
                            || rr >= n_r as i32
                            || cc >= n_c as i32
                        {
                            continue;
                        }
                        let xr = x[(ss as usize * n_r + rr as usize) * n_c + cc as usize];
                        let b = 2.0 * wt * surrogate_coefficient(xs - xr, pp);
                        num += b * xr;
                        den += b;
                    }
                    if den <= 0.0 {
                        continue;
                    }
                    let mut u = num / den;
                    if opts.positivity && u < 0.0 {
                        u = 0.0;
                    }
                    let d = u - xs;
                    if d != 0.0 {
                        x[at] = u;
                        for (&i, &wi) in idx.iter().zip(w) {
                            e[i as usize] -= wi * d;
                        }
                    }
                }
            }
            iterations = pass + 1;
            let obj = objective(&x, &err, [n_s, n_r, n_c], inv_s2, pp, &fwd);
            let prev = *trace.last().unwrap();
            trace.push(obj);
            if obj > prev + slack {
                return Err(AmdError::Divergence {
                    iteration: iterations,
                    previous: prev,
                    current: obj,
                });
            }
            let rel = if prev > 0.0 { (prev - obj) / prev } else { 0.0 };
            if rel < opts.stop_tol {
                converged = true;
                break;
            }
        }

        Ok(ReconResult {
            volume: HyperTensor::new(
                geom.volume_dims.to_vec(),
                vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
                x,
            )?,
            objective_trace: trace,
            noise_sigma: sigma_v,
            iterations,
            converged,
        })
    }
}

fn objective(
    x: &[f64],
    err: &[Vec<f64>],
    [n_s, n_r, n_c]: [usize; 3],
    inv_s2: f64,
    pp: &PriorParams,
    fwd: &[((i32, i32, i32), f64); 5],
) -> f64 {
    let data: f64 = err
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * 0.5
        * inv_s2;
    let mut prior = 0.0;
    for s in 0..n_s {
        for r in 0..n_r {
            for c in 0..n_c {
                let xs = x[(s * n_r + r) * n_c + c];
                for &((ds, dr, dc), wt) in fwd {
                    if wt == 0.0 {
                        continue;
                    }
                    let (ss, rr, cc) = (s as i32 + ds, r as i32 + dr, c as i32 + dc);
                    if ss >= n_s as i32 || rr >= n_r as i32 || cc < 0 || cc >= n_c as i32 {
                        continue;
                    }
                    let xr = x[(ss as usize * n_r + rr as usize) * n_c + cc as usize];
                    prior += wt * qggmrf_potential(xs - xr, pp);
                }
            }
        }
    }
    data + prior
}

pub fn mbir_reconstruct(
    v_col: &HyperTensor,
    geom: &ScanGeometry,
    sigma_v: f64,
    pp: &PriorParams,
    opts: &MbirOptions,
) -> Result<ReconResult> {
    Mbir::new(geom)?.reconstruct(v_col, sigma_v, pp, opts)
}

/// Reconstructs every column of `v` (rows ordered view, row, col) as an
/// independent sinogram. `component_label` names the last output axis.
pub fn reconstruct_stack(
    mbir: &Mbir,
    v: ArrayView2<f64>,
    settings: &[ComponentSettings],
    opts: &MbirOptions,
    component_label: AxisLabel,
) -> Result<StackResult> {
    let geom = mbir.geometry();
    let [n_v, n_r, n_c] = geom.sinogram_dims();
    let (n_p, n_j) = v.dim();
    if n_p != n_v * n_r * n_c {
        return Err(AmdError::shape(format!(
            "coefficient matrix has {n_p} rows, geometry needs {}",
            n_v * n_r * n_c
        )));
    }
    if settings.len() != n_j {
        return Err(AmdError::shape(format!(
            "{} component settings for {n_j} columns",
            settings.len()
        )));
    }
    let components = (0..n_j)
        .map(|j| {
            let col: Vec<f64> = v.column(j).to_vec();
            mbir.reconstruct_raw(&col, settings[j].sigma_v, &settings[j].prior, opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let [n_s, vr, vc] = geom.volume_dims;
    let n_vol = n_s * vr * vc;
    let mut data = vec![0.0; n_vol * n_j];
    for (j, res) in components.iter().enumerate() {
        for (i, &val) in res.volume.data().iter().enumerate() {
            data[i * n_j + j] = val;
        }
    }
    Ok(StackResult {
        volume: HyperTensor::new(
            vec![n_s, vr, vc, n_j],
            vec![
                AxisLabel::Slice,
                AxisLabel::Row,
                AxisLabel::Col,
                component_label,
            ],
            data,
        )?,
        components,
    })
}

/// Regularization scale from a pilot reconstruction: 0.2 × IQR, with the
/// IQR floored at a tenth of the 1st–99th percentile range so that volumes
/// dominated by empty space still get a usable scale.
pub fn auto_sigma_x(pilot: &[f64]) -> f64 {
    let mut v: Vec<f64> = pilot.to_vec();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let wide = q(0.99) - q(0.01);
    let s = 0.2 * iqr.max(0.1 * wide);
    if s > 0.0 && s.is_finite() {
        s
    } else {
        let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if m > 0.0 {
            0.02 * m
        } else {
            1.0
        }
    }
}

/// Noise standard deviation of a `[view,row,col]` sinogram over detector
/// pixels flagged in `mask` (`row × col`, true = outside the sample).
pub fn estimate_sigma_v(sino: &[f64], dims: [usize; 3], mask: &[bool]) -> Result<f64> {
    let [n_v, n_r, n_c] = dims;
    if mask.len() != n_r * n_c || sino.len() != n_v * n_r * n_c {
        return Err(AmdError::shape("sinogram/mask size mismatch"));
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for v in 0..n_v {
        for (pix, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let val = sino[v * n_r * n_c + pix];
            n += 1;
            sum += val;
            sum2 += val * val;
        }
    }
    if n < 2 {
        return Err(AmdError::EmptyMask(
            "need at least two background samples to estimate noise".into(),
        ));
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sino(g: &ScanGeometry, data: Vec<f64>) -> HyperTensor {
        HyperTensor::new(
            g.sinogram_dims().to_vec(),
            vec![AxisLabel::View, AxisLabel::Row, AxisLabel::Col],
            data,
        )
        .unwrap()
    }

    #[test]
    fn zero_sinogram_reconstructs_to_zero() {
        let g = ScanGeometry::parallel(8, 2, 12, 1.0).unwrap();
        let r = mbir_reconstruct(
            &sino(&g, vec![0.0; 8 * 2 * 12]),
            &g,
            0.3,
            &PriorParams::default(),
            &MbirOptions::default(),
        )
        .unwrap();
        assert!(r.volume.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_pass_descends_on_random_data() {
        let g = ScanGeometry::parallel(10, 2, 12, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..10 * 2 * 12).map(|_| rng.random::<f64>()).collect();
        let opts = MbirOptions {
            max_iter: 1,
            init: MbirInit::Zero,
            ..Default::default()
        };
        let pp = PriorParams {
            sigma_x: 0.5,
            ..Default::default()
        };
        let r = mbir_reconstruct(&sino(&g, data), &g, 0.1, &pp, &opts).unwrap();
        assert_eq!(r.objective_trace.len(), 2);
        assert!(r.objective_trace[1] < r.objective_trace[0]);
    }

    #[test]
    fn positivity_clamps() {
        let g = ScanGeometry::parallel(10, 1, 12, 1.0).unwrap();
        let data = (0..10 * 12).map(|i| -((i % 5) as f64)).collect();
        let opts = MbirOptions {
            positivity: true,
            ..Default::default()
        };
        let r = mbir_reconstruct(&sino(&g, data), &g, 0.1, &PriorParams::default(), &opts).unwrap();
        assert!(r.volume.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bad_inputs_rejected() {
        let g = ScanGeometry::parallel(4, 1, 6, 1.0).unwrap();
        let s = sino(&g, vec![0.0; 24]);
        let pp = PriorParams::default();
        assert!(mbir_reconstruct(&s, &g, 0.0, &pp, &MbirOptions::default()).is_err());
        let wrong = HyperTensor::zeros(
            vec![4, 1, 5],
            vec![AxisLabel::View, AxisLabel::Row, AxisLabel::Col],
        )
        .unwrap();
        assert!(mbir_reconstruct(&wrong, &g, 1.0, &pp, &MbirOptions::default()).is_err());
    }

    #[test]
    fn sigma_x_from_quartiles_with_floor() {
        let pilot: Vec<f64> = (0..101).map(|i| i as f64).collect();
        assert!((auto_sigma_x(&pilot) - 0.2 * 50.0).abs() < 1e-12);
        // mostly empty: IQR is 0, the percentile range takes over
        let mut sparse = vec![0.0; 90];
        sparse.extend(vec![10.0; 10]);
        assert!((auto_sigma_x(&sparse) - 0.2 * 0.1 * 10.0).abs() < 1e-12);
        assert_eq!(auto_sigma_x(&[0.0; 8]), 1.0);
    }

    #[test]
    fn sigma_v_is_the_masked_sample_std() {
        // background pixel 0 alternates ±1 over four views, pixel 1 is object
        let dims = [4, 1, 2];
        let s = [1.0, 50.0, -1.0, 60.0, 1.0, 70.0, -1.0, 80.0];
        let sv = estimate_sigma_v(&s, dims, &[true, false]).unwrap();
        assert!((sv - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(estimate_sigma_v(&s, dims, &[false, false]).is_err());
    }
}
