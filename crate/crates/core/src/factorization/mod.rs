//! Non-negative factorizations of the density matrix, which holds one
//! hyperspectral projection per row.

mod nmf;
mod nnls;

use ndarray::Array2;

pub use nmf::{nmf, Factorization, NmfOptions};
pub use nnls::{nmf_fixed_dictionary, nnls_gram, FixedDictionaryFit};

use crate::error::{AmdError, Result};
use crate::preprocessing::DensityStack;
use crate::tensor_io::{AxisLabel, HyperTensor};

/// `[view,row,col,wavelength]` → `N_p × N_k` with rows ordered view, row, col.
/// Reuses the tensor's buffer.
pub fn flatten_densities(d: DensityStack) -> Result<Array2<f64>> {
    flatten_tensor(d.p)
}

pub fn flatten_tensor(p: HyperTensor) -> Result<Array2<f64>> {
    p.expect_layout(
        &[
            AxisLabel::View,
            AxisLabel::Row,
            AxisLabel::Col,
            AxisLabel::Wavelength,
        ],
        "density",
    )?;
    let n_k = p.dims()[3];
    let n_p = p.len() / n_k.max(1);
    Array2::from_shape_vec((n_p, n_k), p.into_data()).map_err(|e| AmdError::shape(e.to_string()))
}

/// Inverse of [`flatten_tensor`] for a matrix whose columns are indexed by
/// `last`; `projection_dims` is `[views, rows, cols]`.
pub fn unflatten(
    m: Array2<f64>,
    projection_dims: [usize; 3],
    last: AxisLabel,
) -> Result<HyperTensor> {
    let [n_v, n_r, n_c] = projection_dims;
    if m.nrows() != n_v * n_r * n_c {
        return Err(AmdError::shape(format!(
            "{} rows cannot form {n_v}x{n_r}x{n_c} projections",
            m.nrows()
        )));
    }
    let n = m.ncols();
    let data = if m.is_standard_layout() {
        m.into_raw_vec_and_offset().0
    } else {
        m.iter().cloned().collect()
    };
    HyperTensor::new(
        vec![n_v, n_r, n_c, n],
        vec![AxisLabel::View, AxisLabel::Row, AxisLabel::Col, last],
        data,
    )
}

/// Subspace dimension `N_s = 3·N_m`.
pub fn choose_subspace_dim(n_materials: usize) -> Result<usize> {
    if n_materials == 0 {
        return Err(AmdError::invalid("need at least one material"));
    }
    Ok(3 * n_materials)
}
