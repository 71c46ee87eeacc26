//! Side-by-side evaluation of an AMD and an RDMD run.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::amd::{REFERENCE_FILE, REPORT_FILE, SPECTRA_FILE};
use super::report::RunReport;
use crate::clustering::match_materials;
use crate::error::{AmdError, Result};
use crate::simulation::SpectraTable;
use crate::tensor_io::{format_sig9, import_spectra_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub material: String,
    pub amd_nrmse: f64,
    pub rdmd_nrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub amd_reconstructions: usize,
    pub rdmd_reconstructions: usize,
    pub amd_seconds: f64,
    pub rdmd_seconds: f64,
    /// RDMD wall-clock over AMD wall-clock.
    pub wall_clock_ratio: f64,
}

/// Report and spectra of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(RunReport, SpectraTable)> {
    let report = RunReport::load(&dir.join(REPORT_FILE))?;
    let spectra = import_spectra_csv(&dir.join(SPECTRA_FILE))?;
    Ok((report, spectra))
}

/// Reference spectra saved by a simulated run, if any.
pub fn load_reference(dir: &Path) -> Result<Option<SpectraTable>> {
    let p = dir.join(REFERENCE_FILE);
    if p.exists() {
        import_spectra_csv(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Per-material NRMSE of both methods after optimal matching, with the
/// reconstruction counts and wall-clock ratio of the two runs.
pub fn compare_runs(
    amd: &RunReport,
    amd_spectra: &SpectraTable,
    rdmd: &RunReport,
    rdmd_spectra: &SpectraTable,
    reference: &SpectraTable,
) -> Result<Comparison> {
    let a = match_materials(amd_spectra, reference)?;
    let r = match_materials(rdmd_spectra, reference)?;
    let rows = reference
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| ComparisonRow {
            material: n.clone(),
            amd_nrmse: a.nrmse[i],
            rdmd_nrmse: r.nrmse[i],
        })
        .collect();
    let (ta, tr) = (amd.total_seconds(), rdmd.total_seconds());
    Ok(Comparison {
        rows,
        amd_reconstructions: amd.metrics.n_reconstructions,
        rdmd_reconstructions: rdmd.metrics.n_reconstructions,
        amd_seconds: ta,
        rdmd_seconds: tr,
        wall_clock_ratio: tr / ta,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>12}",
            "material", "AMD NRMSE", "RDMD NRMSE"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>11.3}% {:>11.3}%",
                r.material,
                100.0 * r.amd_nrmse,
                100.0 * r.rdmd_nrmse
            )?;
        }
        writeln!(
            f,
            "{:<12} {:>12} {:>12}",
            "recons", self.amd_reconstructions, self.rdmd_reconstructions
        )?;
        writeln!(
            f,
            "{:<12} {:>12.2} {:>12.2}",
            "seconds", self.amd_seconds, self.rdmd_seconds
        )?;
        write!(
            f,
            "wall-clock ratio (RDMD/AMD): {:.2}",
            self.wall_clock_ratio
        )
    }
}

/// One CSV with a wavelength column and a column per spectrum. When a
/// reference is given, every estimated table is reordered to match it and its
/// columns are named `<method>_<reference name>`.
pub fn export_plot_data(
    runs: &[(&str, &SpectraTable)],
    reference: Option<&SpectraTable>,
    path: &Path,
) -> Result<()> {
    let grid = match (reference, runs.first()) {
        (Some(r), _) => r.grid,
        (None, Some((_, s))) => s.grid,
        (None, None) => return Err(AmdError::invalid("nothing to export")),
    };
    let mut header = vec!["lambda_angstrom".to_string()];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if let Some(r) = reference {
        for (i, n) in r.names.iter().enumerate() {
            header.push(format!("reference_{n}"));
            cols.push(r.mu.row(i).to_vec());
        }
    }
    for (method, s) in runs {
        if s.grid != grid {
            return Err(AmdError::shape(format!(
                "{method} spectra use a different grid"
            )));
        }
        match reference {
            Some(r) => {
                let m = match_materials(s, r)?;
                for (i, n) in r.names.iter().enumerate() {
                    header.push(format!("{method}_{n}"));
                    cols.push(s.mu.row(m.permutation[i]).to_vec());
                }
            }
            None => {
                for (i, n) in s.names.iter().enumerate() {
                    header.push(format!("{method}_{n}"));
                    cols.push(s.mu.row(i).to_vec());
                }
            }
        }
    }
    let csv_err = |e: csv::Error| AmdError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..grid.n_bins {
        let mut row = vec![format_sig9(grid.center(k))];
        row.extend(cols.iter().map(|c| format_sig9(c[k])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| AmdError::io(path, e))
}
