use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::tensor_io::WavelengthGrid;

/// Per-material linear attenuation spectra on one wavelength grid.
/// `mu[[m, k]]` is in 1/length, the reciprocal of the voxel pitch unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraTable {
    pub names: Vec<String>,
    pub grid: WavelengthGrid,
    pub mu: Array2<f64>,
}

impl SpectraTable {
    pub fn new(names: Vec<String>, grid: WavelengthGrid, mu: Array2<f64>) -> Result<Self> {
        let t = Self { names, grid, mu };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.mu.nrows() != self.names.len() {
            return Err(AmdError::shape(format!(
                "{} names for {} spectra",
                self.names.len(),
                self.mu.nrows()
            )));
        }
        if self.mu.ncols() != self.grid.n_bins {
            return Err(AmdError::shape(format!(
                "spectra have {} bins, grid has {}",
                self.mu.ncols(),
                self.grid.n_bins
            )));
        }
        if let Some(v) = self.mu.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(AmdError::invalid(format!(
                "attenuation values must be finite and non-negative, found {v}"
            )));
        }
        Ok(())
    }

    pub fn n_materials(&self) -> usize {
        self.names.len()
    }
}

/// One smoothed Bragg edge: a logistic step of `height` centered at
/// `lambda` with scale `width` (Å).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BraggEdge {
    pub lambda: f64,
    pub height: f64,
    pub width: f64,
}

/// Parametric μ(λ) = baseline + slope·λ + Σ height·σ((λ − λ_e)/width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeModel {
    pub name: String,
    pub baseline: f64,
    pub slope: f64,
    #[serde(default)]
    pub edges: Vec<BraggEdge>,
}

impl EdgeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.baseline.is_finite() && self.slope.is_finite()) {
            return Err(AmdError::invalid(format!(
                "{}: baseline and slope must be finite",
                self.name
            )));
        }
        for e in &self.edges {
            if !(e.height >= 0.0 && e.height.is_finite()) {
                return Err(AmdError::invalid(format!(
                    "{}: edge at {} has negative height",
                    self.name, e.lambda
                )));
            }
            if !(e.width > 0.0 && e.width.is_finite()) {
                return Err(AmdError::invalid(format!(
                    "{}: edge at {} needs a positive width",
                    self.name, e.lambda
                )));
            }
        }
        Ok(())
    }

    /// Unclamped model value.
    pub fn eval(&self, lambda: f64) -> f64 {
        self.baseline
            + self.slope * lambda
            + self
                .edges
                .iter()
                .map(|e| e.height * logistic((lambda - e.lambda) / e.width))
                .sum::<f64>()
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Samples the edge model at the grid's bin centers, clamped at zero.
pub fn synth_mu_spectrum(m: &EdgeModel, grid: &WavelengthGrid) -> Result<Vec<f64>> {
    m.validate()?;
    grid.validate()?;
    let raw: Vec<f64> = grid.centers().into_iter().map(|l| m.eval(l)).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(hi.abs());
    if lo < 0.0 && -lo > 0.01 * range {
        log::warn!(
            "{}: model dips to {lo:.4e} before clamping (range {range:.4e}); check baseline/slope",
            m.name
        );
    }
    Ok(raw.into_iter().map(|v| v.max(0.0)).collect())
}

pub fn spectra_from_models(models: &[EdgeModel], grid: &WavelengthGrid) -> Result<SpectraTable> {
    let mut mu = Array2::zeros((models.len(), grid.n_bins));
    for (i, m) in models.iter().enumerate() {
        let s = synth_mu_spectrum(m, grid)?;
        mu.row_mut(i).assign(&ndarray::Array1::from(s));
    }
    SpectraTable::new(models.iter().map(|m| m.name.clone()).collect(), *grid, mu)
}

fn edge(lambda: f64, height: f64) -> BraggEdge {
    BraggEdge {
        lambda,
        height,
        width: 0.01,
    }
}

/// Nickel-like model (1/cm), fcc Bragg edges in 1.5–4.5 Å.
pub fn default_nickel() -> EdgeModel {
    EdgeModel {
        name: "Ni".into(),
        baseline: 0.9,
        slope: 0.2,
        edges: vec![
            edge(2.035, 0.12),
            edge(2.492, 0.18),
            edge(3.524, 0.30),
            edge(4.069, 0.40),
        ],
    }
}

/// Copper-like model (1/cm).
pub fn default_copper() -> EdgeModel {
    EdgeModel {
        name: "Cu".into(),
        baseline: 0.6,
        slope: 0.15,
        edges: vec![
            edge(2.180, 0.08),
            edge(2.556, 0.14),
            edge(3.615, 0.25),
            edge(4.174, 0.32),
        ],
    }
}

/// Weakly attenuating aluminium-like model (1/cm).
pub fn default_aluminium() -> EdgeModel {
    EdgeModel {
        name: "Al".into(),
        baseline: 0.08,
        slope: 0.02,
        edges: vec![edge(2.338, 0.03), edge(2.863, 0.04), edge(4.049, 0.06)],
    }
}

pub fn default_edge_models() -> Vec<EdgeModel> {
    vec![default_nickel(), default_copper(), default_aluminium()]
}
