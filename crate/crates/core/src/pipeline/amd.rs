//! The AMD run: preprocessing, subspace NMF, subspace MBIR, clustering,
//! fixed-dictionary NMF, material MBIR.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{
    acquire, coefficients_from_tensor, component_settings, matrix_to_tensor, mbir_metrics,
    orthonormal_basis, preprocess, segmentation_accuracy, setup, tensor_to_matrix, write_spectra,
    Output, Setup,
};
use super::config::PipelineConfig;
use super::report::{
    ClusteringMetrics, MaterialMetrics, NmfMetrics, NrmseEntry, RunReport, RunStatus,
};
use crate::clustering::{
    fit_gmm, match_materials, material_dictionary, segment_with, GmmModel, MaterialDictionary,
};
use crate::error::{AmdError, Result};
use crate::factorization::{flatten_tensor, nmf, nmf_fixed_dictionary, unflatten};
use crate::preprocessing::BackgroundMask;
use crate::simulation::SpectraTable;
use crate::tensor_io::{import_spectra_csv, AxisLabel, HyperTensor};
use crate::tomography::{reconstruct_stack, Mbir};

/// Stage names in execution order; any of them is a valid resume point.
pub const AMD_STAGES: [&str; 6] = [
    "preprocess",
    "subspace_nmf",
    "subspace_mbir",
    "clustering",
    "material_nnls",
    "material_mbir",
];

pub const REPORT_FILE: &str = "report.json";
pub const SPECTRA_FILE: &str = "spectra.csv";
pub const REFERENCE_FILE: &str = "reference_spectra.csv";
pub const MATERIAL_VOLUME_FILE: &str = "material_volume.amdt";

const MASK_FILE: &str = "background_mask.amdt";
const OFFSETS_FILE: &str = "offsets.amdt";
const DENSITY_FILE: &str = "density.amdt";
const D_S_FILE: &str = "subspace_dictionary.amdt";
const V_S_FILE: &str = "subspace_coefficients.amdt";
const BASIS_FILE: &str = "subspace_basis.amdt";
const X_S_FILE: &str = "subspace_volume.amdt";
const LABELS_FILE: &str = "segmentation.amdt";
const SEGMENTATION_FILE: &str = "segmentation.json";
const GMM_FILE: &str = "gmm.json";
const D_M_FILE: &str = "material_dictionary.amdt";
const V_M_FILE: &str = "material_coefficients.amdt";

/// Cluster bookkeeping persisted next to the label volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentationRecord {
    cluster_means: Array2<f64>,
    counts: Vec<usize>,
    valid: Vec<bool>,
    background_cluster_id: usize,
    material_clusters: Vec<usize>,
    material_names: Vec<String>,
}

/// Values handed between stages; each is loaded from the output directory
/// on first use when its producing stage was skipped.
struct State<'a> {
    cfg: &'a PipelineConfig,
    setup: &'a Setup,
    density: Option<Array2<f64>>,
    mask: Option<BackgroundMask>,
    d_s: Option<Array2<f64>>,
    v_s: Option<Array2<f64>>,
    x_s: Option<HyperTensor>,
    dictionary: Option<(Array2<f64>, Vec<String>)>,
    v_m: Option<Array2<f64>>,
    mbir: Option<Mbir>,
}

impl<'a> State<'a> {
    fn new(cfg: &'a PipelineConfig, setup: &'a Setup) -> Self {
        Self {
            cfg,
            setup,
            density: None,
            mask: None,
            d_s: None,
            v_s: None,
            x_s: None,
            dictionary: None,
            v_m: None,
            mbir: None,
        }
    }

    fn density(&mut self, out: &mut Output, report: &mut RunReport) -> Result<&Array2<f64>> {
        if self.density.is_none() {
            let path = out.path(DENSITY_FILE);
            if path.exists() {
                self.density = Some(flatten_tensor(out.load(DENSITY_FILE)?)?);
            } else {
                // preprocessing is deterministic, so recomputing equals reloading
                log::info!("density stack not persisted; recomputing it");
                run_preprocess(self, out, report)?;
            }
        }
        Ok(self.density.as_ref().unwrap())
    }

    fn mask(&mut self, out: &Output) -> Result<&BackgroundMask> {
        if self.mask.is_none() {
            self.mask = Some(BackgroundMask::from_tensor(&out.load(MASK_FILE)?)?);
        }
        Ok(self.mask.as_ref().unwrap())
    }

    fn d_s(&mut self, out: &Output) -> Result<&Array2<f64>> {
        if self.d_s.is_none() {
            self.d_s = Some(tensor_to_matrix(
                out.load(D_S_FILE)?,
                [AxisLabel::Wavelength, AxisLabel::Subspace],
                D_S_FILE,
            )?);
        }
        Ok(self.d_s.as_ref().unwrap())
    }

    fn mbir(&mut self) -> Result<&Mbir> {
        if self.mbir.is_none() {
            self.mbir = Some(Mbir::new(&self.setup.recon_geometry())?);
        }
        Ok(self.mbir.as_ref().unwrap())
    }
}

fn run_preprocess(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let (counts, openbeams) = acquire(st.cfg, st.setup)?;
    let (ds, metrics) = preprocess(st.cfg, counts, &openbeams)?;
    drop(openbeams);
    let [n_v, n_r, n_c, n_k] = ds.dims();
    let dims = &mut report.metrics.dims;
    dims.n_views = n_v;
    dims.n_rows = n_r;
    dims.n_cols = n_c;
    dims.n_bins = n_k;
    dims.n_subspace = st.cfg.subspace_dim();
    dims.n_materials = st.cfg.n_materials;
    report.metrics.preprocessing = Some(metrics);
    out.tensor("preprocess", MASK_FILE, &ds.background_mask.to_tensor())?;
    out.tensor(
        "preprocess",
        OFFSETS_FILE,
        &matrix_to_tensor(&ds.offsets, [AxisLabel::View, AxisLabel::Wavelength]),
    )?;
    if st.cfg.persist.density {
        save_density(&ds.p, out)?;
    }
    st.mask = Some(ds.background_mask);
    st.density = Some(flatten_tensor(ds.p)?);
    Ok(())
}

fn save_density(p: &HyperTensor, out: &mut Output) -> Result<()> {
    let path = out.path(DENSITY_FILE);
    crate::tensor_io::save_tensor(p, &path)?;
    out.manifest.retain(|e| e.file != DENSITY_FILE);
    out.manifest.push(super::report::ManifestEntry {
        stage: "preprocess".into(),
        file: DENSITY_FILE.into(),
    });
    Ok(())
}

fn clamped_norm2(p: &Array2<f64>) -> f64 {
    p.as_slice()
        .expect("standard layout")
        .par_chunks(1 << 16)
        .map(|c| c.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

fn run_subspace_nmf(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let n_s = st.cfg.subspace_dim();
    let opts = st.cfg.nmf.options(st.cfg.seed);
    let p = st.density(out, report)?;
    let f = nmf(p, n_s, &opts)?;
    let p_norm2 = clamped_norm2(p);
    report.metrics.nmf = Some(NmfMetrics {
        iterations: f.iterations,
        converged: f.converged,
        initial_objective: f.objective_trace[0],
        final_objective: f.final_objective(),
        relative_residual: (f.final_objective().max(0.0) / p_norm2).sqrt(),
        clamped_fraction: f.clamped_fraction,
    });
    if !f.converged {
        log::warn!(
            "subspace NMF stopped at max_iter={} before converging",
            f.iterations
        );
    }
    out.tensor(
        "subspace_nmf",
        D_S_FILE,
        &matrix_to_tensor(&f.d, [AxisLabel::Wavelength, AxisLabel::Subspace]),
    )?;
    let dims = st.setup.projection_dims();
    let v_t = unflatten(f.v, dims, AxisLabel::Subspace)?;
    out.tensor("subspace_nmf", V_S_FILE, &v_t)?;
    st.v_s = Some(coefficients_from_tensor(
        v_t,
        AxisLabel::Subspace,
        "subspace coefficients",
    )?);
    st.d_s = Some(f.d);
    Ok(())
}

/// Reconstructs the subspace coefficients expressed in an orthonormal basis
/// of `span(D^s)`. The NMF columns themselves are not individually
/// consistent projections, while the rotated ones split signal and noise
/// evenly enough for a per-component prior; `x^s` is therefore stored in
/// the coordinates of `subspace_basis.amdt`.
fn run_subspace_mbir(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let v_s = match st.v_s.take() {
        Some(v) => v,
        None => coefficients_from_tensor(out.load(V_S_FILE)?, AxisLabel::Subspace, V_S_FILE)?,
    };
    let (r, u) = orthonormal_basis(st.d_s(out)?);
    let v_rot = v_s.dot(&r);
    drop(v_s);
    let mask = st.mask(out)?.clone();
    let cfg = st.cfg;
    let mbir = st.mbir()?;
    let settings = component_settings(mbir, v_rot.view(), &mask, cfg)?;
    let stack = reconstruct_stack(
        mbir,
        v_rot.view(),
        &settings,
        &cfg.mbir.options(cfg.seed),
        AxisLabel::Subspace,
    )?;
    report.metrics.subspace_mbir = mbir_metrics(&stack, &settings);
    out.tensor(
        "subspace_mbir",
        BASIS_FILE,
        &matrix_to_tensor(&u, [AxisLabel::Wavelength, AxisLabel::Subspace]),
    )?;
    out.tensor("subspace_mbir", X_S_FILE, &stack.volume)?;
    st.x_s = Some(stack.volume);
    Ok(())
}

fn run_clustering(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let x_s = match st.x_s.take() {
        Some(x) => x,
        None => out.load(X_S_FILE)?,
    };
    // x^s lives in the orthonormal basis; recomputing it equals reloading
    let (_, basis) = orthonormal_basis(st.d_s(out)?);
    let cfg = st.cfg;
    let k = cfg.n_materials + 1;
    let model: GmmModel = fit_gmm(&x_s, k, &cfg.clustering.options(cfg.seed))?;
    let seg = segment_with(&x_s, &model, cfg.clustering.erode)?;
    let dict: MaterialDictionary =
        material_dictionary(&basis, &seg, st.setup.pitch(), &st.setup.grid)?;

    report.metrics.clustering = Some(ClusteringMetrics {
        n_clusters: k,
        background_cluster: seg.background_cluster_id,
        counts: seg.counts.clone(),
        weights: model.weights.clone(),
        em_iterations: model.log_likelihood_trace.len(),
        final_log_likelihood: *model.log_likelihood_trace.last().unwrap_or(&f64::NAN),
    });
    report.metrics.material = Some(MaterialMetrics {
        names: dict.spectra.names.clone(),
        dictionary_clamped_fraction: dict.clamped_fraction,
        nnls_rms_residual: f64::NAN,
    });
    report.metrics.spectra_nrmse.clear();
    if let Some(reference) = &st.setup.reference {
        if reference.n_materials() == dict.spectra.n_materials() {
            let m = match_materials(&dict.spectra, reference)?;
            report.metrics.spectra_nrmse =
                nrmse_entries(reference, &dict.spectra, &m.permutation, &m.nrmse);
            if let Some(ph) = &st.setup.phantom {
                let cluster_of: Vec<Option<usize>> = ph
                    .material_names
                    .iter()
                    .map(|n| {
                        reference
                            .names
                            .iter()
                            .position(|r| r == n)
                            .map(|r| dict.clusters[m.permutation[r]])
                    })
                    .collect();
                report.metrics.segmentation_accuracy = Some(segmentation_accuracy(
                    ph,
                    &seg.labels,
                    &cluster_of,
                    seg.background_cluster_id,
                )?);
            }
        } else {
            log::warn!(
                "{} reference spectra for {} estimated materials; skipping NRMSE",
                reference.n_materials(),
                dict.spectra.n_materials()
            );
        }
    }

    out.tensor("clustering", LABELS_FILE, &seg.labels)?;
    out.json("clustering", GMM_FILE, &model)?;
    out.json(
        "clustering",
        SEGMENTATION_FILE,
        &SegmentationRecord {
            cluster_means: seg.cluster_means.clone(),
            counts: seg.counts.clone(),
            valid: seg.valid.clone(),
            background_cluster_id: seg.background_cluster_id,
            material_clusters: dict.clusters.clone(),
            material_names: dict.spectra.names.clone(),
        },
    )?;
    out.tensor(
        "clustering",
        D_M_FILE,
        &matrix_to_tensor(&dict.d_m, [AxisLabel::Wavelength, AxisLabel::Material]),
    )?;
    out.product("clustering", SPECTRA_FILE, |p| {
        write_spectra(&dict.spectra, p)
    })?;
    st.dictionary = Some((dict.d_m, dict.spectra.names));
    st.x_s = Some(x_s);
    Ok(())
}

pub(crate) fn nrmse_entries(
    reference: &SpectraTable,
    estimated: &SpectraTable,
    permutation: &[usize],
    nrmse: &[f64],
) -> Vec<NrmseEntry> {
    reference
        .names
        .iter()
        .enumerate()
        .map(|(r, name)| NrmseEntry {
            reference: name.clone(),
            estimated: estimated.names[permutation[r]].clone(),
            nrmse: nrmse[r],
        })
        .collect()
}

fn run_material_nnls(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let (d_m, names) = match st.dictionary.take() {
        Some(d) => d,
        None => {
            let d_m = tensor_to_matrix(
                out.load(D_M_FILE)?,
                [AxisLabel::Wavelength, AxisLabel::Material],
                D_M_FILE,
            )?;
            let names = import_spectra_csv(&out.path(SPECTRA_FILE))?.names;
            (d_m, names)
        }
    };
    let p = st.density(out, report)?;
    let fit = nmf_fixed_dictionary(p, &d_m)?;
    let n = fit.residuals.len() as f64;
    let rms = (fit.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    match &mut report.metrics.material {
        Some(m) => m.nnls_rms_residual = rms,
        None => {
            report.metrics.material = Some(MaterialMetrics {
                names: names.clone(),
                dictionary_clamped_fraction: f64::NAN,
                nnls_rms_residual: rms,
            })
        }
    }
    // the density stack is not needed past this point
    st.density = None;
    let v_t = unflatten(fit.v, st.setup.projection_dims(), AxisLabel::Material)?;
    out.tensor("material_nnls", V_M_FILE, &v_t)?;
    st.v_m = Some(coefficients_from_tensor(
        v_t,
        AxisLabel::Material,
        "material coefficients",
    )?);
    st.dictionary = Some((d_m, names));
    Ok(())
}

fn run_material_mbir(st: &mut State, out: &mut Output, report: &mut RunReport) -> Result<()> {
    let v_m = match st.v_m.take() {
        Some(v) => v,
        None => coefficients_from_tensor(out.load(V_M_FILE)?, AxisLabel::Material, V_M_FILE)?,
    };
    let mask = st.mask(out)?.clone();
    let cfg = st.cfg;
    let mbir = st.mbir()?;
    let settings = component_settings(mbir, v_m.view(), &mask, cfg)?;
    let stack = reconstruct_stack(
        mbir,
        v_m.view(),
        &settings,
        &cfg.mbir.options(cfg.seed),
        AxisLabel::Material,
    )?;
    report.metrics.material_mbir = mbir_metrics(&stack, &settings);
    out.product("material_mbir", MATERIAL_VOLUME_FILE, |p| {
        crate::tensor_io::save_tensor(&stack.volume, p)
    })?;
    Ok(())
}

/// Runs every stage.
pub fn run_amd(cfg: &PipelineConfig) -> Result<RunReport> {
    run_amd_from(cfg, None)
}

/// Runs from `start` (a name in [`AMD_STAGES`]) onward, reading earlier
/// results from the output directory. On failure the report is written with
/// status `partial` and the error names the failing stage.
pub fn run_amd_from(cfg: &PipelineConfig, start: Option<&str>) -> Result<RunReport> {
    let first = match start {
        None => 0,
        Some(s) => AMD_STAGES.iter().position(|n| *n == s).ok_or_else(|| {
            AmdError::Config(format!(
                "unknown stage {s:?}; expected one of {AMD_STAGES:?}"
            ))
        })?,
    };
    let stage_err = |stage: &str| {
        let stage = stage.to_string();
        move |e: AmdError| AmdError::Stage {
            stage,
            source: Box::new(e),
        }
    };
    let setup = setup(cfg).map_err(stage_err("setup"))?;
    let mut out =
        Output::create(&cfg.output_dir, cfg.persist.intermediates).map_err(stage_err("setup"))?;
    let mut report = RunReport::new("amd", cfg.clone());
    if first > 0 {
        let prev = RunReport::load(&out.path(REPORT_FILE)).map_err(stage_err(AMD_STAGES[first]))?;
        report.metrics = prev.metrics;
        report.timings = prev.timings;
        report
            .timings
            .retain(|k, _| AMD_STAGES[..first].contains(&k.as_str()));
        out.manifest = prev.manifest;
        out.manifest
            .retain(|e| AMD_STAGES[..first].contains(&e.stage.as_str()));
    }
    if let Some(r) = &setup.reference {
        out.product("setup", REFERENCE_FILE, |p| write_spectra(r, p))
            .map_err(stage_err("setup"))?;
    }

    let mut st = State::new(cfg, &setup);
    for (i, &name) in AMD_STAGES.iter().enumerate().skip(first) {
        log::info!("stage {name}");
        let t = Instant::now();
        let res = match i {
            0 => run_preprocess(&mut st, &mut out, &mut report),
            1 => run_subspace_nmf(&mut st, &mut out, &mut report),
            2 => run_subspace_mbir(&mut st, &mut out, &mut report),
            3 => run_clustering(&mut st, &mut out, &mut report),
            4 => run_material_nnls(&mut st, &mut out, &mut report),
            _ => run_material_mbir(&mut st, &mut out, &mut report),
        };
        report
            .timings
            .insert(name.into(), t.elapsed().as_secs_f64());
        if let Err(e) = res {
            log::error!("stage {name} failed: {e}");
            report.status = RunStatus::Partial;
            report.failed_stage = Some(name.into());
            report.error = Some(e.to_string());
            finish(&mut report, &out)?;
            return Err(stage_err(name)(e));
        }
    }
    report.metrics.n_reconstructions =
        report.metrics.subspace_mbir.len() + report.metrics.material_mbir.len();
    report.status = RunStatus::Complete;
    finish(&mut report, &out)?;
    Ok(report)
}

/// Totals the timings, copies the manifest and writes the report.
pub(crate) fn finish(report: &mut RunReport, out: &Output) -> Result<()> {
    let total: f64 = report
        .timings
        .iter()
        .filter(|(k, _)| k.as_str() != "total")
        .map(|(_, v)| v)
        .sum();
    report.timings.insert("total".into(), total);
    report.manifest = out.manifest.clone();
    report.manifest.push(super::report::ManifestEntry {
        stage: "report".into(),
        file: REPORT_FILE.into(),
    });
    report.save(&out.path(REPORT_FILE))
}
