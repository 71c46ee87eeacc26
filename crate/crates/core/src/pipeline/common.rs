//! Plumbing shared by the AMD and RDMD runs.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use super::config::PipelineConfig;
use super::report::{ManifestEntry, MbirMetrics, PreprocessMetrics, SegmentationAccuracy};
use crate::error::{AmdError, Result};
use crate::preprocessing::{
    auto_background_mask, average_openbeams, compute_density, correct_background, smooth_openbeam,
    BackgroundMask, DensityStack,
};
use crate::simulation::{
    build_phantom, default_phantom_spec, simulate_openbeam, simulate_radiographs,
    spectra_from_models, Phantom, PhantomSpec, Primitive, RadiographParams, SpectraTable,
};
use crate::tensor_io::{
    import_spectra_csv, load_tensor, read_header, save_tensor, AxisLabel, HyperTensor,
    WavelengthGrid,
};
use crate::tomography::{
    auto_sigma_x, estimate_sigma_v, ComponentSettings, Mbir, ScanGeometry, StackResult,
};

/// Everything about an experiment that is known without reading the counts.
#[derive(Debug, Clone)]
pub struct Setup {
    /// Physical-pitch scan geometry.
    pub geometry: ScanGeometry,
    pub grid: WavelengthGrid,
    pub reference: Option<SpectraTable>,
    pub phantom: Option<Phantom>,
}

impl Setup {
    pub fn pitch(&self) -> f64 {
        self.geometry.pixel_pitch
    }

    /// Reconstructions run on a unit-pitch grid, so volumes hold
    /// attenuation × pitch per voxel.
    pub fn recon_geometry(&self) -> ScanGeometry {
        self.geometry.with_pitch(1.0)
    }

    pub fn projection_dims(&self) -> [usize; 3] {
        self.geometry.sinogram_dims()
    }
}

fn simulation_phantom(cfg: &PipelineConfig) -> Result<PhantomSpec> {
    let sim = cfg.simulation.as_ref().expect("simulation config");
    if let Some(spec) = &sim.phantom {
        return Ok(spec.clone());
    }
    let [rows, cols] = sim.detector;
    let mut spec = default_phantom_spec([rows, cols, cols], sim.voxel_pitch);
    if sim.materials.len() != spec.materials.len() {
        return Err(AmdError::Config(format!(
            "the built-in phantom has {} materials but {} models are configured; supply [simulation.phantom]",
            spec.materials.len(),
            sim.materials.len()
        )));
    }
    // the built-in phantom takes its material names from the configured models
    let rename: Vec<(String, String)> = spec
        .materials
        .iter()
        .cloned()
        .zip(sim.materials.iter().map(|m| m.name.clone()))
        .collect();
    let lookup = |n: &str| rename.iter().find(|(a, _)| a == n).unwrap().1.clone();
    for p in &mut spec.primitives {
        match p {
            Primitive::Cylinder { material, .. } | Primitive::Box { material, .. } => {
                *material = lookup(material)
            }
        }
    }
    spec.materials = sim.materials.iter().map(|m| m.name.clone()).collect();
    Ok(spec)
}

pub fn setup(cfg: &PipelineConfig) -> Result<Setup> {
    cfg.validate()?;
    if let Some(sim) = &cfg.simulation {
        let [rows, cols] = sim.detector;
        let geometry = ScanGeometry::parallel(sim.n_views, rows, cols, sim.voxel_pitch)?;
        let grid = WavelengthGrid::new(sim.lambda_min, sim.lambda_max, sim.n_bins)?;
        let spectra = spectra_from_models(&sim.materials, &grid)?;
        let phantom = build_phantom(&simulation_phantom(cfg)?)?;
        if phantom.material_names != spectra.names {
            return Err(AmdError::Config(format!(
                "phantom materials {:?} must match the model names {:?}",
                phantom.material_names, spectra.names
            )));
        }
        return Ok(Setup {
            geometry,
            grid,
            reference: Some(spectra),
            phantom: Some(phantom),
        });
    }
    let m = cfg.measured.as_ref().expect("validated config");
    let (dims, labels) = read_header(&m.counts)?;
    let want = [
        AxisLabel::View,
        AxisLabel::Row,
        AxisLabel::Col,
        AxisLabel::Wavelength,
    ];
    if labels != want {
        return Err(AmdError::shape(format!(
            "{}: counts must be [view,row,col,wavelength], found {labels:?}",
            m.counts.display()
        )));
    }
    let (n_v, n_r, n_c, n_k) = (dims[0], dims[1], dims[2], dims[3]);
    let mut geometry = ScanGeometry::parallel(n_v, n_r, n_c, m.voxel_pitch)?;
    if let Some(deg) = &m.angles_deg {
        if deg.len() != n_v {
            return Err(AmdError::Config(format!(
                "{} angles given for {n_v} views",
                deg.len()
            )));
        }
        geometry.angles = deg
            .iter()
            .map(|d| d.to_radians().rem_euclid(2.0 * std::f64::consts::PI))
            .collect();
        geometry.validate()?;
    }
    let grid = WavelengthGrid::new(m.lambda_min, m.lambda_max, n_k)?;
    let reference = match &m.reference_spectra {
        Some(p) => {
            let r = import_spectra_csv(p)?;
            if r.grid.n_bins != n_k {
                return Err(AmdError::shape(format!(
                    "reference spectra have {} bins, counts have {n_k}",
                    r.grid.n_bins
                )));
            }
            Some(SpectraTable::new(r.names, grid, r.mu)?)
        }
        None => None,
    };
    Ok(Setup {
        geometry,
        grid,
        reference,
        phantom: None,
    })
}

/// Raw counts and open-beam exposures of the configured experiment.
pub fn acquire(cfg: &PipelineConfig, setup: &Setup) -> Result<(HyperTensor, HyperTensor)> {
    if let Some(sim) = &cfg.simulation {
        let phantom = setup.phantom.as_ref().expect("simulated phantom");
        let spectra = setup.reference.as_ref().expect("simulated spectra");
        let params = RadiographParams {
            openbeam_rate: sim.openbeam_rate,
            seed: cfg.seed,
            dose_factors: sim.dose_factors.clone(),
        };
        let (y, _) = simulate_radiographs(phantom, spectra, &setup.geometry, &params)?;
        let ob = simulate_openbeam(
            sim.openbeam_rate,
            &setup.geometry,
            setup.grid.n_bins,
            sim.openbeam_sets,
            cfg.seed,
        )?;
        return Ok((y, ob));
    }
    let m = cfg.measured.as_ref().expect("validated config");
    let y = load_tensor(&m.counts)?;
    let ob = load_tensor(&m.openbeams)?;
    Ok((y, ob))
}

/// Open-beam averaging and smoothing, densities, background correction.
pub fn preprocess(
    cfg: &PipelineConfig,
    counts: HyperTensor,
    openbeams: &HyperTensor,
) -> Result<(DensityStack, PreprocessMetrics)> {
    let pc = &cfg.preprocessing;
    let y_o = smooth_openbeam(&average_openbeams(openbeams)?, pc.kernel_size)?;
    let p_meas = compute_density(counts, &y_o, pc.floor)?;
    let mask = if pc.mask == "auto" {
        auto_background_mask(&p_meas, pc.mask_quantile)?
    } else {
        BackgroundMask::from_tensor(&load_tensor(Path::new(&pc.mask))?)?
    };
    let ds = correct_background(p_meas, &mask)?;
    let n = ds.offsets.len() as f64;
    let metrics = PreprocessMetrics {
        mask_pixels: mask.count(),
        offset_mean: ds.offsets.sum() / n,
        offset_max_abs: ds.offsets.iter().fold(0.0, |m, v| m.max(v.abs())),
    };
    Ok((ds, metrics))
}

/// Output directory with a running manifest.
pub struct Output {
    pub dir: PathBuf,
    pub persist: bool,
    pub manifest: Vec<ManifestEntry>,
}

impl Output {
    pub fn create(dir: &Path, persist: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| AmdError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            persist,
            manifest: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, stage: &str, name: &str) {
        self.manifest.retain(|e| e.file != name);
        self.manifest.push(ManifestEntry {
            stage: stage.into(),
            file: name.into(),
        });
    }

    /// Saves an intermediate tensor when persistence is on.
    pub fn tensor(&mut self, stage: &str, name: &str, t: &HyperTensor) -> Result<()> {
        if self.persist {
            save_tensor(t, &self.path(name))?;
            self.record(stage, name);
        }
        Ok(())
    }

    /// Always writes; used for final products.
    pub fn product(
        &mut self,
        stage: &str,
        name: &str,
        write: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        write(&self.path(name))?;
        self.record(stage, name);
        Ok(())
    }

    pub fn json(&mut self, stage: &str, name: &str, value: &impl serde::Serialize) -> Result<()> {
        if self.persist {
            let p = self.path(name);
            let text = serde_json::to_string_pretty(value)
                .map_err(|e| AmdError::invalid(format!("{name}: {e}")))?;
            std::fs::write(&p, text).map_err(|e| AmdError::io(&p, e))?;
            self.record(stage, name);
        }
        Ok(())
    }

    pub fn load(&self, name: &str) -> Result<HyperTensor> {
        load_tensor(&self.path(name))
    }
}

pub fn matrix_to_tensor(m: &Array2<f64>, labels: [AxisLabel; 2]) -> HyperTensor {
    HyperTensor::new(
        vec![m.nrows(), m.ncols()],
        labels.to_vec(),
        m.as_standard_layout().iter().cloned().collect(),
    )
    .expect("finite matrix")
}

pub fn tensor_to_matrix(t: HyperTensor, labels: [AxisLabel; 2], what: &str) -> Result<Array2<f64>> {
    t.expect_layout(&labels, what)?;
    let (r, c) = (t.dims()[0], t.dims()[1]);
    Array2::from_shape_vec((r, c), t.into_data()).map_err(|e| AmdError::shape(e.to_string()))
}

/// `[view,row,col,last]` tensor back to the `N_p × N` coefficient matrix.
pub fn coefficients_from_tensor(
    t: HyperTensor,
    last: AxisLabel,
    what: &str,
) -> Result<Array2<f64>> {
    t.expect_layout(
        &[AxisLabel::View, AxisLabel::Row, AxisLabel::Col, last],
        what,
    )?;
    let n = t.dims()[3];
    let rows = t.len() / n.max(1);
    Array2::from_shape_vec((rows, n), t.into_data()).map_err(|e| AmdError::shape(e.to_string()))
}

/// Change of basis within `span(D)` to orthonormal dictionary columns.
///
/// With `DᵀD = Q S² Qᵀ` it returns `R = Q S` and `U = D Q S⁻¹`, so `UᵀU = I`
/// and `(V R) Uᵀ = V Dᵀ`. Columns are ordered by decreasing singular value
/// and signed so that their largest `Q` entry is positive; singular values
/// are floored at `1e-12 · s_max`.
pub fn orthonormal_basis(d: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = d.ncols();
    let g = d.t().dot(d);
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(n, n, |i, j| g[[i, j]]));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s_max = eig.eigenvalues.max().max(0.0).sqrt();
    let mut r = Array2::zeros((n, n));
    let mut r_inv_t = Array2::zeros((n, n));
    for (k, &j) in order.iter().enumerate() {
        let q = eig.eigenvectors.column(j);
        let pivot = q
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let s = eig.eigenvalues[j]
            .max(0.0)
            .sqrt()
            .max(1e-12 * s_max)
            .max(f64::MIN_POSITIVE);
        for i in 0..n {
            r[[i, k]] = sign * q[i] * s;
            r_inv_t[[i, k]] = sign * q[i] / s;
        }
    }
    let u = d.dot(&r_inv_t);
    (r, u)
}

/// Noise and prior scales for reconstructing each column of `v`.
pub fn component_settings(
    mbir: &Mbir,
    v: ArrayView2<f64>,
    mask: &BackgroundMask,
    cfg: &PipelineConfig,
) -> Result<Vec<ComponentSettings>> {
    let dims = mbir.geometry().sinogram_dims();
    (0..v.ncols())
        .map(|j| {
            let col: Vec<f64> = v.column(j).to_vec();
            let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let sigma_v = match cfg.mbir.sigma_v {
                Some(s) => s,
                None => {
                    let s = estimate_sigma_v(&col, dims, &mask.pixels)?;
                    // noiseless components still need a finite data weight
                    s.max(1e-6 * scale).max(1e-12)
                }
            };
            let sigma_x = match cfg.mbir.sigma_x {
                Some(s) => s,
                None => {
                    let fbp = mbir.fbp().ok_or_else(|| {
                        AmdError::invalid("automatic sigma_x needs at least two views")
                    })?;
                    let n_s = mbir.geometry().volume_dims[0];
                    let mut pilot = Vec::new();
                    for s in 0..n_s {
                        let sino = crate::tomography::sinogram_row(&col, dims, s);
                        pilot.extend(fbp.reconstruct_slice(&sino));
                    }
                    auto_sigma_x(&pilot)
                }
            };
            Ok(ComponentSettings {
                sigma_v,
                prior: cfg.mbir.prior(sigma_x),
            })
        })
        .collect()
}

pub fn mbir_metrics(stack: &StackResult, settings: &[ComponentSettings]) -> Vec<MbirMetrics> {
    stack
        .components
        .iter()
        .zip(settings)
        .enumerate()
        .map(|(j, (r, s))| MbirMetrics {
            component: j,
            sigma_v: s.sigma_v,
            sigma_x: s.prior.sigma_x,
            iterations: r.iterations,
            converged: r.converged,
            initial_objective: r.objective_trace[0],
            final_objective: *r.objective_trace.last().unwrap(),
        })
        .collect()
}

/// Writes a spectra table as CSV.
pub fn write_spectra(s: &SpectraTable, path: &Path) -> Result<()> {
    crate::tensor_io::export_spectra_csv(s, path)
}

/// Label accuracy against the phantom, excluding voxels that have a
/// differently labeled face neighbour in the ground truth. `cluster_of[m]` is
/// the cluster matched to phantom material `m`; unmatched materials count as
/// misclassified.
pub fn segmentation_accuracy(
    phantom: &Phantom,
    labels: &HyperTensor,
    cluster_of: &[Option<usize>],
    background: usize,
) -> Result<SegmentationAccuracy> {
    let truth = phantom.label_volume.data();
    let pred = labels.data();
    if truth.len() != pred.len() {
        return Err(AmdError::shape(format!(
            "segmentation has {} voxels, phantom has {}",
            pred.len(),
            truth.len()
        )));
    }
    if cluster_of.len() != phantom.material_names.len() {
        return Err(AmdError::shape(
            "one cluster slot per phantom material required",
        ));
    }
    let [n_s, n_r, n_c] = phantom.shape();
    let expected = |t: f64| -> Option<usize> {
        let m = t as usize;
        if m == 0 {
            Some(background)
        } else {
            cluster_of[m - 1]
        }
    };
    let (mut interior, mut correct, mut void, mut void_hit) = (0usize, 0usize, 0usize, 0usize);
    for s in 0..n_s {
        for r in 0..n_r {
            for c in 0..n_c {
                let i = (s * n_r + r) * n_c + c;
                let t = truth[i];
                let p = pred[i] as usize;
                if t == 0.0 {
                    void += 1;
                    void_hit += (p == background) as usize;
                }
                let same = |j: usize| truth[j] == t;
                let inside = (s == 0 || same(i - n_r * n_c))
                    && (s + 1 == n_s || same(i + n_r * n_c))
                    && (r == 0 || same(i - n_c))
                    && (r + 1 == n_r || same(i + n_c))
                    && (c == 0 || same(i - 1))
                    && (c + 1 == n_c || same(i + 1));
                if inside {
                    interior += 1;
                    correct += (expected(t) == Some(p)) as usize;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    };
    Ok(SegmentationAccuracy {
        interior_accuracy: ratio(correct, interior),
        background_recall: ratio(void_hit, void),
    })
}
