//! q-generalized Gaussian Markov random field (QGGMRF) prior.

use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// Shape exponent near zero.
    pub p_exp: f64,
    /// Exponent of the large-difference (edge) regime.
    pub q_exp: f64,
    /// Transition threshold, in units of `sigma_x`.
    pub t_thresh: f64,
    /// Regularization scale, in units of the reconstructed values.
    pub sigma_x: f64,
    /// Include the two across-slice neighbors. When false the prior, and
    /// therefore the whole problem, decouples slice by slice.
    pub across_slice: bool,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            p_exp: 2.0,
            q_exp: 1.2,
            t_thresh: 1.0,
            sigma_x: 1.0,
            across_slice: true,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(1.0 <= self.q_exp && self.q_exp <= self.p_exp && self.p_exp <= 2.0) {
            return Err(AmdError::invalid(format!(
                "prior exponents need 1 <= q <= p <= 2, got p={} q={}",
                self.p_exp, self.q_exp
            )));
        }
        if !(self.sigma_x > 0.0 && self.sigma_x.is_finite()) {
            return Err(AmdError::invalid(format!(
                "sigma_x must be positive, got {}",
                self.sigma_x
            )));
        }
        if !(self.t_thresh > 0.0 && self.t_thresh.is_finite()) {
            return Err(AmdError::invalid(format!(
                "T threshold must be positive, got {}",
                self.t_thresh
            )));
        }
        Ok(())
    }

    /// `(slice, row, col)` offsets of the five "forward" neighbors with their
    /// normalized weights. Each unordered neighbor pair is visited once by
    /// iterating every voxel's forward offsets.
    pub fn forward_neighbors(&self) -> [((i32, i32, i32), f64); 5] {
        let w = neighbor_weights(self.across_slice);
        [
            ((0, 0, 1), w.edge),
            ((0, 1, -1), w.diagonal),
            ((0, 1, 0), w.edge),
            ((0, 1, 1), w.diagonal),
            ((1, 0, 0), w.slice),
        ]
    }

    /// All ten neighbors of a voxel.
    pub fn all_neighbors(&self) -> [((i32, i32, i32), f64); 10] {
        let f = self.forward_neighbors();
        let mut out = [((0, 0, 0), 0.0); 10];
        for (i, &((a, b, c), w)) in f.iter().enumerate() {
            out[2 * i] = ((a, b, c), w);
            out[2 * i + 1] = ((-a, -b, -c), w);
        }
        out
    }
}

struct NeighborWeights {
    edge: f64,
    diagonal: f64,
    slice: f64,
}

/// Inverse-distance weights of the 10-voxel neighborhood, normalized to sum 1.
fn neighbor_weights(across_slice: bool) -> NeighborWeights {
    let total = 4.0 + 4.0 / 2f64.sqrt() + 2.0;
    NeighborWeights {
        edge: 1.0 / total,
        diagonal: 1.0 / 2f64.sqrt() / total,
        slice: if across_slice { 1.0 / total } else { 0.0 },
    }
}

/// ρ(Δ) = |Δ|^p / (p σ^p) · u^(q-p) / (1 + u^(q-p)), u = |Δ / (T σ)|.
pub fn qggmrf_potential(delta: f64, pp: &PriorParams) -> f64 {
    let a = delta.abs();
    if a == 0.0 {
        return 0.0;
    }
    let w = transition(a, pp);
    a.powf(pp.p_exp) / (pp.p_exp * pp.sigma_x.powf(pp.p_exp) * (1.0 + w))
}

/// dρ/dΔ.
pub fn qggmrf_influence(delta: f64, pp: &PriorParams) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    delta * surrogate_coefficient(delta, pp) * 2.0
}

/// ρ'(Δ) / (2Δ): curvature of the symmetric quadratic majorizer of ρ that
/// touches it at Δ. Finite at Δ = 0 for p = 2.
pub fn surrogate_coefficient(delta: f64, pp: &PriorParams) -> f64 {
    let mut a = delta.abs();
    if a == 0.0 {
        if pp.p_exp == 2.0 {
            return 1.0 / (2.0 * pp.sigma_x * pp.sigma_x);
        }
        a = 1e-12 * pp.sigma_x;
    }
    let w = transition(a, pp);
    let base = if pp.p_exp == 2.0 {
        1.0 / (pp.sigma_x * pp.sigma_x)
    } else {
        a.powf(pp.p_exp - 2.0) / pp.sigma_x.powf(pp.p_exp)
    };
    0.5 * base * (1.0 + pp.q_exp / pp.p_exp * w) / ((1.0 + w) * (1.0 + w))
}

/// (|Δ| / (T σ))^(p - q).
#[inline]
fn transition(a: f64, pp: &PriorParams) -> f64 {
    let s = pp.p_exp - pp.q_exp;
    if s == 0.0 {
        1.0
    } else {
        (a / (pp.t_thresh * pp.sigma_x)).powf(s)
    }
}
