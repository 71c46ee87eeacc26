//! Parallel-beam tomography: projector/backprojector, FBP, and MBIR with a
//! QGGMRF prior.

mod fbp;
mod geometry;
mod mbir;
mod prior;
mod projector;

pub use fbp::{fbp, Fbp};
pub use geometry::ScanGeometry;
pub use mbir::{
    auto_sigma_x, estimate_sigma_v, mbir_reconstruct, reconstruct_stack, ComponentSettings, Mbir,
    MbirInit, MbirOptions, ReconResult, StackResult,
};
pub use prior::{qggmrf_influence, qggmrf_potential, surrogate_coefficient, PriorParams};
pub(crate) use projector::sinogram_row;
pub use projector::{backproject, project, Projector};
