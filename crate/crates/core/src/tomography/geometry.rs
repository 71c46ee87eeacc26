use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};

/// Parallel-beam scan geometry.
///
/// Detector rows are aligned with volume slices; the in-slice volume grid and
/// the detector columns share the pitch `pixel_pitch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    /// View angles in radians, each in `[0, 2π)`.
    pub angles: Vec<f64>,
    pub n_det_rows: usize,
    pub n_det_cols: usize,
    pub pixel_pitch: f64,
    /// `[slices, rows, cols]`.
    pub volume_dims: [usize; 3],
}

impl ScanGeometry {
    /// `n_views` angles evenly spaced over a half rotation, square in-slice
    /// volume matching the detector width.
    pub fn parallel(
        n_views: usize,
        n_det_rows: usize,
        n_det_cols: usize,
        pixel_pitch: f64,
    ) -> Result<Self> {
        let angles = (0..n_views)
            .map(|v| v as f64 * PI / n_views as f64)
            .collect();
        let g = Self {
            angles,
            n_det_rows,
            n_det_cols,
            pixel_pitch,
            volume_dims: [n_det_rows, n_det_cols, n_det_cols],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(AmdError::invalid("geometry has no views"));
        }
        if let Some(a) = self
            .angles
            .iter()
            .find(|a| !(a.is_finite() && **a >= 0.0 && **a < 2.0 * PI))
        {
            return Err(AmdError::invalid(format!("view angle {a} outside [0, 2π)")));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(AmdError::invalid(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        if self.n_det_rows == 0 || self.n_det_cols == 0 || self.volume_dims.contains(&0) {
            return Err(AmdError::invalid("geometry has a zero-length axis"));
        }
        if self.n_det_rows != self.volume_dims[0] {
            return Err(AmdError::invalid(format!(
                "detector rows ({}) must equal volume slices ({})",
                self.n_det_rows, self.volume_dims[0]
            )));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn sinogram_dims(&self) -> [usize; 3] {
        [self.n_views(), self.n_det_rows, self.n_det_cols]
    }

    pub fn with_pitch(&self, pixel_pitch: f64) -> Self {
        Self {
            pixel_pitch,
            ..self.clone()
        }
    }

    /// Same scan restricted to one detector row / volume slice.
    pub fn single_slice(&self) -> Self {
        Self {
            n_det_rows: 1,
            volume_dims: [1, self.volume_dims[1], self.volume_dims[2]],
            ..self.clone()
        }
    }
}
