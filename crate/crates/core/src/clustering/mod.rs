//! Gaussian-mixture segmentation of the subspace volume and assembly of
//! material spectra from per-cluster subspace means.

mod gmm;
mod matching;
mod segmentation;

pub use gmm::{fit_gmm, fit_gmm_points, voxel_points, GmmModel, GmmOptions};
pub use matching::{adjusted_rand_index, hungarian, match_materials, nrmse, MaterialMatch};
pub use segmentation::{
    cluster_means, material_dictionary, segment, segment_with, MaterialDictionary, Segmentation,
};
