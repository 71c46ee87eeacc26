//! Config-driven AMD and RDMD runs with persisted intermediates and a JSON
//! report per run.

mod amd;
mod common;
mod compare;
mod config;
mod rdmd;
mod report;

pub use amd::{
    run_amd, run_amd_from, AMD_STAGES, MATERIAL_VOLUME_FILE, REFERENCE_FILE, REPORT_FILE,
    SPECTRA_FILE,
};
pub use common::{acquire, preprocess, segmentation_accuracy, setup, Setup};
pub use compare::{
    compare_runs, export_plot_data, load_reference, load_run, Comparison, ComparisonRow,
};
pub use config::{
    ClusteringConfig, MbirConfig, MeasuredConfig, NmfConfig, PerBinMethod, PersistConfig,
    PipelineConfig, PreprocessingConfig, RdmdConfig, SimulationConfig, REFERENCE_CONFIG,
};
pub use rdmd::{erode_2d, masked_mean_dictionary, run_rdmd, RegionMasks, RDMD_STAGES};
pub use report::{
    metrics_agree, ClusteringMetrics, Dims, ManifestEntry, MaterialMetrics, MbirMetrics, Metrics,
    NmfMetrics, NrmseEntry, PreprocessMetrics, RdmdMetrics, RunReport, RunStatus,
    SegmentationAccuracy, SoftwareInfo,
};

use std::path::Path;

use crate::error::Result;
use crate::tensor_io::{export_spectra_csv, save_tensor};

/// Files written by [`write_simulation`].
pub const SIM_COUNTS_FILE: &str = "counts.amdt";
pub const SIM_OPENBEAMS_FILE: &str = "openbeams.amdt";
pub const SIM_PHANTOM_FILE: &str = "phantom_labels.amdt";

/// Writes the simulated counts, open-beam sets, phantom labels and reference
/// spectra of `cfg` to `dir`; the result can be fed back through a
/// `[measured]` section.
pub fn write_simulation(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    let s = setup(cfg)?;
    if cfg.simulation.is_none() {
        return Err(crate::error::AmdError::Config(
            "simulate needs a [simulation] section".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| crate::error::AmdError::io(dir, e))?;
    let (counts, openbeams) = acquire(cfg, &s)?;
    save_tensor(&counts, &dir.join(SIM_COUNTS_FILE))?;
    drop(counts);
    save_tensor(&openbeams, &dir.join(SIM_OPENBEAMS_FILE))?;
    let ph = s.phantom.as_ref().expect("simulated phantom");
    save_tensor(&ph.label_volume, &dir.join(SIM_PHANTOM_FILE))?;
    export_spectra_csv(
        s.reference.as_ref().expect("simulated spectra"),
        &dir.join(REFERENCE_FILE),
    )?;
    Ok(vec![
        SIM_COUNTS_FILE.into(),
        SIM_OPENBEAMS_FILE.into(),
        SIM_PHANTOM_FILE.into(),
        REFERENCE_FILE.into(),
    ])
}
