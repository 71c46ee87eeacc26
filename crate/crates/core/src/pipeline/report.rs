use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::error::{AmdError, Result};
use crate::simulation::RNG_ALGORITHM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftwareInfo {
    pub name: String,
    pub version: String,
    pub rng: String,
}

impl Default for SoftwareInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            rng: RNG_ALGORITHM.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    /// Relative to the output directory.
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n_views: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_bins: usize,
    pub n_subspace: usize,
    pub n_materials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessMetrics {
    pub mask_pixels: usize,
    pub offset_mean: f64,
    pub offset_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfMetrics {
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// `‖P₊ − V Dᵀ‖_F / ‖P₊‖_F`.
    pub relative_residual: f64,
    pub clamped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbirMetrics {
    pub component: usize,
    pub sigma_v: f64,
    pub sigma_x: f64,
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub n_clusters: usize,
    pub background_cluster: usize,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub em_iterations: usize,
    pub final_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationAccuracy {
    /// Voxel accuracy after cluster-to-material matching, excluding voxels
    /// with a differently labeled face neighbour in the ground truth.
    pub interior_accuracy: f64,
    /// Fraction of true-void voxels assigned to the background cluster.
    pub background_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMetrics {
    pub names: Vec<String>,
    pub dictionary_clamped_fraction: f64,
    pub nnls_rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseEntry {
    pub reference: String,
    pub estimated: String,
    pub nrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdmdMetrics {
    pub slice: usize,
    pub per_bin: String,
    pub mask_voxels: Vec<usize>,
}

/// Everything in a report that must be reproducible from (config, seed).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_reconstructions: usize,
    pub dims: Dims,
    pub preprocessing: Option<PreprocessMetrics>,
    pub nmf: Option<NmfMetrics>,
    pub subspace_mbir: Vec<MbirMetrics>,
    pub clustering: Option<ClusteringMetrics>,
    pub segmentation_accuracy: Option<SegmentationAccuracy>,
    pub material: Option<MaterialMetrics>,
    pub material_mbir: Vec<MbirMetrics>,
    pub rdmd: Option<RdmdMetrics>,
    pub spectra_nrmse: Vec<NrmseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub software: SoftwareInfo,
    pub config: PipelineConfig,
    pub metrics: Metrics,
    /// Wall-clock seconds per stage, plus `total`.
    pub timings: BTreeMap<String, f64>,
    pub manifest: Vec<ManifestEntry>,
}

impl RunReport {
    pub fn new(method: &str, config: PipelineConfig) -> Self {
        Self {
            method: method.into(),
            status: RunStatus::Partial,
            failed_stage: None,
            error: None,
            software: SoftwareInfo::default(),
            config,
            metrics: Metrics::default(),
            timings: BTreeMap::new(),
            manifest: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| AmdError::invalid(format!("report serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| AmdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AmdError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| AmdError::invalid(format!("{}: {e}", path.display())))
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.get("total").copied().unwrap_or(f64::NAN)
    }

    pub fn nrmse_of(&self, reference: &str) -> Option<f64> {
        self.metrics
            .spectra_nrmse
            .iter()
            .find(|e| e.reference == reference)
            .map(|e| e.nrmse)
    }
}

/// Compares two metric sections field by field; numbers must agree to
/// `rel` relative. Returns the first mismatch as `path: a vs b`.
pub fn metrics_agree(a: &Metrics, b: &Metrics, rel: f64) -> std::result::Result<(), String> {
    let va = serde_json::to_value(a).map_err(|e| e.to_string())?;
    let vb = serde_json::to_value(b).map_err(|e| e.to_string())?;
    compare_values(&va, &vb, rel, "metrics")
}

fn compare_values(
    a: &serde_json::Value,
    b: &serde_json::Value,
    rel: f64,
    path: &str,
) -> std::result::Result<(), String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (
                x.as_f64().unwrap_or(f64::NAN),
                y.as_f64().unwrap_or(f64::NAN),
            );
            let scale = x.abs().max(y.abs());
            if x == y || (x - y).abs() <= rel * scale {
                Ok(())
            } else {
                Err(format!("{path}: {x} vs {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                return Err(format!("{path}: length {} vs {}", x.len(), y.len()));
            }
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                compare_values(u, v, rel, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        (Value::Object(x), Value::Object(y)) => {
            for (k, u) in x {
                let v = y.get(k).ok_or_else(|| format!("{path}.{k}: missing"))?;
                compare_values(u, v, rel, &format!("{path}.{k}"))?;
            }
            if let Some(k) = y.keys().find(|k| !x.contains_key(*k)) {
                return Err(format!("{path}.{k}: missing"));
            }
            Ok(())
        }
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} vs {b}")),
    }
}
