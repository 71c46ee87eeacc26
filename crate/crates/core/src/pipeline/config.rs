use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::GmmOptions;
use crate::error::{AmdError, Result};
use crate::factorization::NmfOptions;
use crate::simulation::{default_edge_models, EdgeModel, PhantomSpec};
use crate::tomography::{MbirInit, MbirOptions, PriorParams};

/// Whole-run configuration. Exactly one of `simulation` / `measured` is set.
/// The top-level `seed` drives every random stream of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_materials: usize,
    /// Overrides the `3·N_m` subspace dimension.
    pub subspace_dim: Option<usize>,
    pub output_dir: PathBuf,
    pub simulation: Option<SimulationConfig>,
    pub measured: Option<MeasuredConfig>,
    pub preprocessing: PreprocessingConfig,
    pub nmf: NmfConfig,
    pub mbir: MbirConfig,
    pub clustering: ClusteringConfig,
    pub rdmd: RdmdConfig,
    pub persist: PersistConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_materials: 3,
            subspace_dim: None,
            output_dir: PathBuf::from("amd_out"),
            simulation: Some(SimulationConfig::default()),
            measured: None,
            preprocessing: PreprocessingConfig::default(),
            nmf: NmfConfig::default(),
            mbir: MbirConfig::default(),
            clustering: ClusteringConfig::default(),
            rdmd: RdmdConfig::default(),
            persist: PersistConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// `[rows, cols]`; rows are also the number of reconstructed slices.
    pub detector: [usize; 2],
    pub n_views: usize,
    /// Voxel and detector pitch in cm.
    pub voxel_pitch: f64,
    /// Wavelength grid in Å.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_bins: usize,
    /// Expected open-beam counts per pixel per bin.
    pub openbeam_rate: f64,
    pub openbeam_sets: usize,
    /// Attenuation models in 1/cm; order defines phantom material names.
    pub materials: Vec<EdgeModel>,
    /// Replaces the built-in phantom when set.
    pub phantom: Option<PhantomSpec>,
    pub dose_factors: Option<Vec<f64>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            detector: [64, 64],
            n_views: 32,
            voxel_pitch: 0.05,
            lambda_min: 1.5,
            lambda_max: 4.5,
            n_bins: 1200,
            openbeam_rate: 1e4,
            openbeam_sets: 4,
            materials: default_edge_models(),
            phantom: None,
            dose_factors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredConfig {
    /// `[view,row,col,wavelength]` counts.
    pub counts: PathBuf,
    /// `[set,row,col,wavelength]` open-beam exposures.
    pub openbeams: PathBuf,
    pub voxel_pitch: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// View angles in degrees; uniform over 180° when absent.
    #[serde(default)]
    pub angles_deg: Option<Vec<f64>>,
    /// Spectra CSV for NRMSE reporting.
    #[serde(default)]
    pub reference_spectra: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessingConfig {
    pub kernel_size: usize,
    pub floor: f64,
    /// `"auto"` or the path of a `[row,col]` 0/1 tensor.
    pub mask: String,
    pub mask_quantile: f64,
}

impl Default for PreprocessingConfig {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            floor: 1e-6,
            mask: "auto".into(),
            mask_quantile: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub window: usize,
    pub inner_updates: usize,
}

impl Default for NmfConfig {
    fn default() -> Self {
        let o = NmfOptions::default();
        Self {
            max_iter: o.max_iter,
            tol: o.tol,
            window: o.window,
            inner_updates: o.inner_updates,
        }
    }
}

impl NmfConfig {
    pub fn options(&self, seed: u64) -> NmfOptions {
        NmfOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            window: self.window,
            seed,
            inner_updates: self.inner_updates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbirConfig {
    pub max_iter: usize,
    pub stop_tol: f64,
    pub positivity: bool,
    pub init: MbirInit,
    pub p_exp: f64,
    pub q_exp: f64,
    pub t_thresh: f64,
    pub across_slice: bool,
    /// Fixed prior scale; estimated per component from an FBP pilot when absent.
    pub sigma_x: Option<f64>,
    /// Fixed noise level; estimated per component from the background mask when absent.
    pub sigma_v: Option<f64>,
}

impl Default for MbirConfig {
    fn default() -> Self {
        let o = MbirOptions::default();
        let p = PriorParams::default();
        Self {
            max_iter: o.max_iter,
            stop_tol: o.stop_tol,
            positivity: o.positivity,
            init: o.init,
            p_exp: p.p_exp,
            q_exp: p.q_exp,
            t_thresh: p.t_thresh,
            across_slice: p.across_slice,
            sigma_x: None,
            sigma_v: None,
        }
    }
}

impl MbirConfig {
    pub fn options(&self, seed: u64) -> MbirOptions {
        MbirOptions {
            max_iter: self.max_iter,
            stop_tol: self.stop_tol,
            seed,
            positivity: self.positivity,
            init: self.init,
        }
    }

    pub fn prior(&self, sigma_x: f64) -> PriorParams {
        PriorParams {
            p_exp: self.p_exp,
            q_exp: self.q_exp,
            t_thresh: self.t_thresh,
            sigma_x,
            across_slice: self.across_slice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
    pub n_init: usize,
    pub max_fit_samples: usize,
    /// Compute cluster means from 1-voxel-eroded regions.
    pub erode: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let o = GmmOptions::default();
        Self {
            max_iter: o.max_iter,
            tol: o.tol,
            ridge: o.ridge,
            n_init: o.n_init,
            max_fit_samples: o.max_fit_samples,
            erode: false,
        }
    }
}

impl ClusteringConfig {
    pub fn options(&self, seed: u64) -> GmmOptions {
        GmmOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            ridge: self.ridge,
            seed,
            n_init: self.n_init,
            max_fit_samples: self.max_fit_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerBinMethod {
    Fbp,
    Mbir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdmdConfig {
    /// Reconstructed slice; mid-volume when absent.
    pub slice: Option<usize>,
    pub per_bin: PerBinMethod,
    /// `"phantom"` (simulation ground truth) or the path of a
    /// `[material,row,col]` 0/1 tensor.
    pub masks: String,
    /// In-plane erosion applied to phantom-derived masks, in voxels.
    pub mask_erosion: usize,
}

impl Default for RdmdConfig {
    fn default() -> Self {
        Self {
            slice: None,
            per_bin: PerBinMethod::Fbp,
            masks: "phantom".into(),
            mask_erosion: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersistConfig {
    /// Write every intermediate listed in the report manifest.
    pub intermediates: bool,
    /// Also write the full density stack (large; speeds up resuming late stages).
    pub density: bool,
}

impl Default for PersistConfig {
    fn default() -> Self {
        Self {
            intermediates: true,
            density: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AmdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AmdError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            AmdError::Config(m) => AmdError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AmdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmdError::Config(m));
        match (&self.simulation, &self.measured) {
            (Some(_), Some(_)) => return bad("set only one of [simulation] and [measured]".into()),
            (None, None) => return bad("one of [simulation] or [measured] is required".into()),
            _ => {}
        }
        if self.n_materials == 0 {
            return bad("n_materials must be at least 1".into());
        }
        if self.subspace_dim == Some(0) {
            return bad("subspace_dim must be positive".into());
        }
        if let Some(s) = &self.simulation {
            if s.detector.contains(&0) || s.n_views == 0 || s.n_bins == 0 {
                return bad("simulation dimensions must be positive".into());
            }
            if s.openbeam_sets == 0 {
                return bad("openbeam_sets must be positive".into());
            }
            if s.materials.is_empty() {
                return bad("simulation needs at least one material model".into());
            }
        }
        if self.preprocessing.kernel_size.is_multiple_of(2) {
            return bad(format!(
                "preprocessing.kernel_size must be odd, got {}",
                self.preprocessing.kernel_size
            ));
        }
        Ok(())
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim.unwrap_or(3 * self.n_materials)
    }

    pub fn voxel_pitch(&self) -> f64 {
        match (&self.simulation, &self.measured) {
            (Some(s), _) => s.voxel_pitch,
            (_, Some(m)) => m.voxel_pitch,
            _ => f64::NAN,
        }
    }
}

/// Commented configuration carrying every default.
pub const REFERENCE_CONFIG: &str = r#"# AMD pipeline configuration.
# The top-level seed drives the simulator, NMF initialization, MBIR visit
# order and GMM initialization.
seed = 0
# Number of materials N_m (background is handled as an extra cluster).
n_materials = 3
# Subspace dimension N_s; defaults to 3 * n_materials when omitted.
# subspace_dim = 9
output_dir = "amd_out"

# Synthetic experiment. Replace with a [measured] block for real data.
[simulation]
detector = [64, 64]        # rows (= slices), cols
n_views = 32               # angles k*180/n_views degrees
voxel_pitch = 0.05         # cm
lambda_min = 1.5           # Angstrom
lambda_max = 4.5
n_bins = 1200
openbeam_rate = 10000.0    # expected counts per pixel per bin
openbeam_sets = 4
# dose_factors = [...]     # optional per-view beam-intensity multipliers
# Material models default to Ni, Cu, Al-like Bragg-edge spectra in 1/cm;
# override with [[simulation.materials]] tables (name, baseline, slope,
# edges = [{ lambda, height, width }]).
# A custom phantom may be given as [simulation.phantom] (shape, voxel_pitch,
# materials, primitives).

# [measured]
# counts = "counts.amdt"         # [view,row,col,wavelength]
# openbeams = "openbeams.amdt"   # [set,row,col,wavelength]
# voxel_pitch = 0.05
# lambda_min = 1.5
# lambda_max = 4.5
# angles_deg = [...]             # uniform over 180 degrees when omitted
# reference_spectra = "reference.csv"

[preprocessing]
kernel_size = 5            # odd Hamming kernel size for open-beam smoothing
floor = 1e-6               # counts floored at floor * open-beam
mask = "auto"              # or path to a [row,col] 0/1 tensor
mask_quantile = 0.2        # level used by the automatic background mask

[nmf]
max_iter = 500
tol = 1e-5                 # relative objective decrease over `window` iterations
window = 10
inner_updates = 4          # repeated factor updates per pass over the data

[mbir]
max_iter = 40
stop_tol = 1e-5
positivity = false
init = "fbp"               # or "zero"
p_exp = 2.0
q_exp = 1.2
t_thresh = 1.0
across_slice = true
# sigma_x = 0.01           # estimated from an FBP pilot when omitted
# sigma_v = 0.01           # estimated from the background mask when omitted

[clustering]
max_iter = 300
tol = 1e-9
ridge = 1e-4               # times trace(global covariance) / N_s
n_init = 3
max_fit_samples = 2000000
erode = false

[rdmd]
# slice = 32               # mid-volume when omitted
per_bin = "fbp"            # or "mbir"
masks = "phantom"          # or path to a [material,row,col] 0/1 tensor
mask_erosion = 1

[persist]
intermediates = true
density = false
"#;
