//! Reconstruction-domain baseline: one single-slice reconstruction per
//! wavelength bin, spectra from masked means, then the same material
//! decomposition and reconstruction as AMD.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use super::amd::{finish, nrmse_entries, MATERIAL_VOLUME_FILE, REFERENCE_FILE, SPECTRA_FILE};
use super::common::{
    acquire, component_settings, matrix_to_tensor, mbir_metrics, preprocess, setup, write_spectra,
    Output, Setup,
};
use super::config::{PerBinMethod, PipelineConfig};
use super::report::{MaterialMetrics, RdmdMetrics, RunReport, RunStatus};
use crate::clustering::match_materials;
use crate::error::{AmdError, Result};
use crate::factorization::{flatten_tensor, nmf_fixed_dictionary, unflatten};
use crate::preprocessing::BackgroundMask;
use crate::simulation::SpectraTable;
use crate::tensor_io::{load_tensor, AxisLabel, HyperTensor};
use crate::tomography::{auto_sigma_x, estimate_sigma_v, reconstruct_stack, Fbp, Mbir};

pub const RDMD_STAGES: [&str; 5] = [
    "preprocess",
    "per_bin",
    "spectra",
    "material_nnls",
    "material_mbir",
];

const BIN_SLICES_FILE: &str = "bin_slices.amdt";
const MASKS_FILE: &str = "rdmd_masks.amdt";
const D_M_FILE: &str = "material_dictionary.amdt";
const V_M_FILE: &str = "material_coefficients.amdt";

/// One in-plane region per material on the reconstructed slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub names: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    /// `names.len()` masks of `rows × cols`, row-major.
    pub masks: Vec<Vec<bool>>,
}

impl RegionMasks {
    pub fn counts(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .collect()
    }

    fn to_tensor(&self) -> HyperTensor {
        HyperTensor::new(
            vec![self.masks.len(), self.rows, self.cols],
            vec![AxisLabel::Material, AxisLabel::Row, AxisLabel::Col],
            self.masks
                .iter()
                .flatten()
                .map(|&b| b as u8 as f64)
                .collect(),
        )
        .expect("finite mask")
    }
}

/// Removes pixels with a 4-neighbour outside the mask, `iterations` times.
/// Pixels on the image border count as having outside neighbours.
pub fn erode_2d(mask: &[bool], rows: usize, cols: usize, iterations: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..iterations {
        let prev = cur.clone();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if prev[i] {
                    let keep = r > 0
                        && r + 1 < rows
                        && c > 0
                        && c + 1 < cols
                        && prev[i - cols]
                        && prev[i + cols]
                        && prev[i - 1]
                        && prev[i + 1];
                    cur[i] = keep;
                }
            }
        }
    }
    cur
}

fn region_masks(cfg: &PipelineConfig, setup: &Setup, slice: usize) -> Result<RegionMasks> {
    let [_, rows, cols] = setup.recon_geometry().volume_dims;
    let rm = if cfg.rdmd.masks == "phantom" {
        let ph = setup.phantom.as_ref().ok_or_else(|| {
            AmdError::Config("rdmd.masks = \"phantom\" needs a simulated experiment".into())
        })?;
        let labels = ph.label_volume.data();
        let plane = &labels[slice * rows * cols..(slice + 1) * rows * cols];
        let masks = (0..ph.material_names.len())
            .map(|m| {
                let raw: Vec<bool> = plane.iter().map(|&l| l == (m + 1) as f64).collect();
                erode_2d(&raw, rows, cols, cfg.rdmd.mask_erosion)
            })
            .collect();
        RegionMasks {
            names: ph.material_names.clone(),
            rows,
            cols,
            masks,
        }
    } else {
        let t = load_tensor(Path::new(&cfg.rdmd.masks))?;
        t.expect_layout(
            &[AxisLabel::Material, AxisLabel::Row, AxisLabel::Col],
            "rdmd masks",
        )?;
        let d = t.dims();
        if d[1] != rows || d[2] != cols {
            return Err(AmdError::shape(format!(
                "rdmd masks are {}x{}, slices are {rows}x{cols}",
                d[1], d[2]
            )));
        }
        let masks = t
            .data()
            .chunks(rows * cols)
            .map(|m| m.iter().map(|&v| v != 0.0).collect())
            .collect();
        RegionMasks {
            names: (0..d[0]).map(|m| format!("material_{m}")).collect(),
            rows,
            cols,
            masks,
        }
    };
    if rm.masks.is_empty() {
        return Err(AmdError::EmptyMask("no material regions supplied".into()));
    }
    if let Some(m) = rm.counts().iter().position(|&n| n == 0) {
        return Err(AmdError::EmptyMask(format!(
            "region of material {} is empty on slice {slice}",
            rm.names[m]
        )));
    }
    Ok(rm)
}

/// `[view,col]` sinogram of detector row `row` for every bin, bin-major.
fn slice_sinograms(p: &Array2<f64>, dims: [usize; 3], row: usize) -> Vec<Vec<f64>> {
    let [n_v, n_r, n_c] = dims;
    let n_k = p.ncols();
    let mut out = vec![vec![0.0; n_v * n_c]; n_k];
    for v in 0..n_v {
        for c in 0..n_c {
            let src = p.row((v * n_r + row) * n_c + c);
            for (k, &val) in src.iter().enumerate() {
                out[k][v * n_c + c] = val;
            }
        }
    }
    out
}

fn per_bin_slices(
    cfg: &PipelineConfig,
    setup: &Setup,
    sinos: &[Vec<f64>],
    mask: &BackgroundMask,
    row: usize,
) -> Result<Vec<Vec<f64>>> {
    let geom = setup.recon_geometry().single_slice();
    let fbp = Fbp::new(&geom)?;
    match cfg.rdmd.per_bin {
        PerBinMethod::Fbp => Ok(sinos.par_iter().map(|s| fbp.reconstruct_slice(s)).collect()),
        PerBinMethod::Mbir => {
            let mbir = Mbir::new(&geom)?;
            let [n_v, _, n_c] = geom.sinogram_dims();
            let row_mask = &mask.pixels[row * mask.cols..(row + 1) * mask.cols];
            let opts = cfg.mbir.options(cfg.seed);
            sinos
                .par_iter()
                .map(|s| {
                    let scale = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    let sigma_v = match cfg.mbir.sigma_v {
                        Some(v) => v,
                        None => estimate_sigma_v(s, [n_v, 1, n_c], row_mask)?
                            .max(1e-6 * scale)
                            .max(1e-12),
                    };
                    let sigma_x = cfg
                        .mbir
                        .sigma_x
                        .unwrap_or_else(|| auto_sigma_x(&fbp.reconstruct_slice(s)));
                    let r = mbir.reconstruct_raw(s, sigma_v, &cfg.mbir.prior(sigma_x), &opts)?;
                    Ok(r.volume.into_data())
                })
                .collect()
        }
    }
}

/// `D^m` (`N_k × N_m`, unit-pitch attenuation) from region means of each
/// bin's slice; negative means are clamped to zero.
pub fn masked_mean_dictionary(slices: &[Vec<f64>], masks: &RegionMasks) -> Array2<f64> {
    let n_m = masks.masks.len();
    let counts = masks.counts();
    let mut d = Array2::zeros((slices.len(), n_m));
    for (k, img) in slices.iter().enumerate() {
        for (m, mask) in masks.masks.iter().enumerate() {
            let s: f64 = img
                .iter()
                .zip(mask)
                .filter(|(_, &b)| b)
                .map(|(v, _)| v)
                .sum();
            d[[k, m]] = (s / counts[m] as f64).max(0.0);
        }
    }
    d
}

struct Rdmd {
    density: Option<Array2<f64>>,
    mask: Option<BackgroundMask>,
    sinos: Vec<Vec<f64>>,
    slices: Vec<Vec<f64>>,
    d_m: Option<(Array2<f64>, SpectraTable)>,
    v_m: Option<Array2<f64>>,
}

/// Runs the baseline on the configured slice (default mid-volume).
pub fn run_rdmd(cfg: &PipelineConfig) -> Result<RunReport> {
    let stage_err = |stage: &str| {
        let stage = stage.to_string();
        move |e: AmdError| AmdError::Stage {
            stage,
            source: Box::new(e),
        }
    };
    let setup = setup(cfg).map_err(stage_err("setup"))?;
    let n_s = setup.recon_geometry().volume_dims[0];
    let slice = cfg.rdmd.slice.unwrap_or(n_s / 2);
    if slice >= n_s {
        return Err(stage_err("setup")(AmdError::Config(format!(
            "rdmd.slice {slice} outside 0..{n_s}"
        ))));
    }
    let masks = region_masks(cfg, &setup, slice).map_err(stage_err("setup"))?;
    let mut out =
        Output::create(&cfg.output_dir, cfg.persist.intermediates).map_err(stage_err("setup"))?;
    let mut report = RunReport::new("rdmd", cfg.clone());
    if let Some(r) = &setup.reference {
        out.product("setup", REFERENCE_FILE, |p| write_spectra(r, p))
            .map_err(stage_err("setup"))?;
    }
    out.tensor("setup", MASKS_FILE, &masks.to_tensor())
        .map_err(stage_err("setup"))?;

    let mut st = Rdmd {
        density: None,
        mask: None,
        sinos: Vec::new(),
        slices: Vec::new(),
        d_m: None,
        v_m: None,
    };
    let dims = setup.projection_dims();
    for &name in RDMD_STAGES.iter() {
        log::info!("rdmd stage {name}");
        let t = Instant::now();
        let res: Result<()> = (|| {
            match name {
                "preprocess" => {
                    let (counts, openbeams) = acquire(cfg, &setup)?;
                    let (ds, metrics) = preprocess(cfg, counts, &openbeams)?;
                    let [n_v, n_r, n_c, n_k] = ds.dims();
                    let d = &mut report.metrics.dims;
                    d.n_views = n_v;
                    d.n_rows = n_r;
                    d.n_cols = n_c;
                    d.n_bins = n_k;
                    d.n_materials = masks.masks.len();
                    report.metrics.preprocessing = Some(metrics);
                    st.mask = Some(ds.background_mask);
                    let p = flatten_tensor(ds.p)?;
                    st.sinos = slice_sinograms(&p, dims, slice);
                    st.density = Some(p);
                }
                "per_bin" => {
                    let mask = st.mask.as_ref().unwrap();
                    st.slices = per_bin_slices(cfg, &setup, &st.sinos, mask, slice)?;
                    st.sinos = Vec::new();
                    let [_, rows, cols] = setup.recon_geometry().volume_dims;
                    out.tensor(
                        "per_bin",
                        BIN_SLICES_FILE,
                        &HyperTensor::new(
                            vec![st.slices.len(), rows, cols],
                            vec![AxisLabel::Wavelength, AxisLabel::Row, AxisLabel::Col],
                            st.slices.concat(),
                        )?,
                    )?;
                }
                "spectra" => {
                    let d_m = masked_mean_dictionary(&st.slices, &masks);
                    st.slices = Vec::new();
                    let mu = d_m.t().mapv(|v| v / setup.pitch());
                    let spectra = SpectraTable::new(masks.names.clone(), setup.grid, mu)?;
                    report.metrics.material = Some(MaterialMetrics {
                        names: spectra.names.clone(),
                        dictionary_clamped_fraction: 0.0,
                        nnls_rms_residual: f64::NAN,
                    });
                    if let Some(reference) = &setup.reference {
                        if reference.n_materials() == spectra.n_materials() {
                            let m = match_materials(&spectra, reference)?;
                            report.metrics.spectra_nrmse =
                                nrmse_entries(reference, &spectra, &m.permutation, &m.nrmse);
                        }
                    }
                    out.tensor(
                        "spectra",
                        D_M_FILE,
                        &matrix_to_tensor(&d_m, [AxisLabel::Wavelength, AxisLabel::Material]),
                    )?;
                    out.product("spectra", SPECTRA_FILE, |p| write_spectra(&spectra, p))?;
                    st.d_m = Some((d_m, spectra));
                }
                "material_nnls" => {
                    let (d_m, _) = st.d_m.as_ref().unwrap();
                    let p = st.density.take().unwrap();
                    let fit = nmf_fixed_dictionary(&p, d_m)?;
                    drop(p);
                    let n = fit.residuals.len() as f64;
                    let rms = (fit.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
                    if let Some(m) = &mut report.metrics.material {
                        m.nnls_rms_residual = rms;
                    }
                    let v_t = unflatten(fit.v, dims, AxisLabel::Material)?;
                    out.tensor("material_nnls", V_M_FILE, &v_t)?;
                    let n_m = v_t.dims()[3];
                    st.v_m = Some(
                        Array2::from_shape_vec((v_t.len() / n_m, n_m), v_t.into_data())
                            .map_err(|e| AmdError::shape(e.to_string()))?,
                    );
                }
                _ => {
                    let v_m = st.v_m.take().unwrap();
                    let mbir = Mbir::new(&setup.recon_geometry())?;
                    let mask = st.mask.as_ref().unwrap();
                    let settings = component_settings(&mbir, v_m.view(), mask, cfg)?;
                    let stack = reconstruct_stack(
                        &mbir,
                        v_m.view(),
                        &settings,
                        &cfg.mbir.options(cfg.seed),
                        AxisLabel::Material,
                    )?;
                    report.metrics.material_mbir = mbir_metrics(&stack, &settings);
                    out.product("material_mbir", MATERIAL_VOLUME_FILE, |p| {
                        crate::tensor_io::save_tensor(&stack.volume, p)
                    })?;
                }
            }
            Ok(())
        })();
        report
            .timings
            .insert(name.into(), t.elapsed().as_secs_f64());
        if let Err(e) = res {
            log::error!("rdmd stage {name} failed: {e}");
            report.status = RunStatus::Partial;
            report.failed_stage = Some(name.into());
            report.error = Some(e.to_string());
            finish(&mut report, &out)?;
            return Err(stage_err(name)(e));
        }
    }
    let n_k = setup.grid.n_bins;
    report.metrics.rdmd = Some(RdmdMetrics {
        slice,
        per_bin: match cfg.rdmd.per_bin {
            PerBinMethod::Fbp => "fbp".into(),
            PerBinMethod::Mbir => "mbir".into(),
        },
        mask_voxels: masks.counts(),
    });
    report.metrics.n_reconstructions = n_k + report.metrics.material_mbir.len();
    report.status = RunStatus::Complete;
    finish(&mut report, &out)?;
    Ok(report)
}
