//! Hyperspectral neutron computed tomography by attenuation-mode
//! decomposition: the projection stack is factored into a few spectral
//! components, each component is reconstructed tomographically, and voxels
//! are clustered into materials whose attenuation spectra are then estimated.

pub mod clustering;
pub mod error;
pub mod factorization;
mod linalg;
pub mod pipeline;
pub mod preprocessing;
pub mod simulation;
pub mod tensor_io;
pub mod tomography;

pub use error::{AmdError, Result};
