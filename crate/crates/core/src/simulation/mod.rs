//! Synthetic experiments: parametric Bragg-edge spectra, voxel phantoms and
//! Poisson-noised hyperspectral radiographs.

mod phantom;
mod radiographs;
mod spectra;

pub use phantom::{build_phantom, default_phantom_spec, Phantom, PhantomSpec, Primitive};
pub use radiographs::{
    ideal_density, material_path_lengths, simulate_openbeam, simulate_radiographs,
    RadiographParams, RNG_ALGORITHM,
};
pub use spectra::{
    default_aluminium, default_copper, default_edge_models, default_nickel, spectra_from_models,
    synth_mu_spectrum, BraggEdge, EdgeModel, SpectraTable,
};
