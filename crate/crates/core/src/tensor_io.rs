//! Dense float64 tensors with labeled axes, the `.amdt` binary format, and
//! the spectra CSV format.
//!
//! `.amdt` layout (all integers little-endian):
//!
//! ```text
//! "AMDT"            4 bytes magic
//! version   u16     currently 1
//! n_axes    u16
//! n_axes × (label code u8, length u64)
//! payload   f64 LE  row-major, last axis fastest
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::simulation::SpectraTable;

pub const MAGIC: [u8; 4] = *b"AMDT";
pub const FORMAT_VERSION: u16 = 1;

/// Semantic role of a tensor axis. The discriminant is the on-disk code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum AxisLabel {
    View = 0,
    Row = 1,
    Col = 2,
    Wavelength = 3,
    Subspace = 4,
    Material = 5,
    Slice = 6,
    /// Repeated acquisition index, e.g. open-beam sets.
    Set = 7,
}

impl AxisLabel {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use AxisLabel::*;
        Some(match code {
            0 => View,
            1 => Row,
            2 => Col,
            3 => Wavelength,
            4 => Subspace,
            5 => Material,
            6 => Slice,
            7 => Set,
            _ => return None,
        })
    }
}

/// Dense row-major tensor of `f64` with one label per axis.
///
/// Values are finite and `dims.iter().product() == data.len()` for every
/// tensor that can be observed outside this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperTensor {
    dims: Vec<usize>,
    labels: Vec<AxisLabel>,
    data: Vec<f64>,
}

impl HyperTensor {
    pub fn new(dims: Vec<usize>, labels: Vec<AxisLabel>, data: Vec<f64>) -> Result<Self> {
        check_layout(&dims, &labels, data.len())?;
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(AmdError::NonFinite { offset });
        }
        Ok(Self { dims, labels, data })
    }

    pub fn zeros(dims: Vec<usize>, labels: Vec<AxisLabel>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, labels, vec![0.0; n])
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee finite data.
    pub(crate) fn from_parts_unchecked(
        dims: Vec<usize>,
        labels: Vec<AxisLabel>,
        data: Vec<f64>,
    ) -> Self {
        debug_assert!(check_layout(&dims, &labels, data.len()).is_ok());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { dims, labels, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[AxisLabel] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn axis_of(&self, label: AxisLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.dims)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            assert!(
                ix < d,
                "index {ix} out of bounds for axis {i} of length {d}"
            );
            off = off * d + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Same data with new dims/labels; element count must match.
    pub fn reshape(self, dims: Vec<usize>, labels: Vec<AxisLabel>) -> Result<Self> {
        check_layout(&dims, &labels, self.data.len())?;
        Ok(Self {
            dims,
            labels,
            data: self.data,
        })
    }

    /// Checks dims and labels against an expected layout.
    pub fn expect_layout(&self, labels: &[AxisLabel], what: &str) -> Result<()> {
        if self.labels != labels {
            return Err(AmdError::shape(format!(
                "{what}: expected axes {labels:?}, got {:?}",
                self.labels
            )));
        }
        Ok(())
    }
}

pub fn strides_for(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

fn check_layout(dims: &[usize], labels: &[AxisLabel], len: usize) -> Result<()> {
    if dims.len() != labels.len() {
        return Err(AmdError::shape(format!(
            "{} dims but {} axis labels",
            dims.len(),
            labels.len()
        )));
    }
    for (i, a) in labels.iter().enumerate() {
        if labels[..i].contains(a) {
            return Err(AmdError::shape(format!("duplicate axis label {a:?}")));
        }
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(AmdError::shape(format!(
            "dims {dims:?} hold {n} elements but data has {len}"
        )));
    }
    Ok(())
}

/// Uniform wavelength grid. `lambda_min`/`lambda_max` bound the covered range;
/// bin `i` is centered at `lambda_min + (i + 0.5) * width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_bins: usize,
}

impl WavelengthGrid {
    pub fn new(lambda_min: f64, lambda_max: f64, n_bins: usize) -> Result<Self> {
        let g = Self {
            lambda_min,
            lambda_max,
            n_bins,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min.is_finite() && self.lambda_max.is_finite())
            || self.lambda_min >= self.lambda_max
        {
            return Err(AmdError::invalid(format!(
                "wavelength range [{}, {}] is empty",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.n_bins == 0 {
            return Err(AmdError::invalid("wavelength grid needs at least one bin"));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / self.n_bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lambda_min + (i as f64 + 0.5) * self.bin_width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.center(i)).collect()
    }

    /// Index of the bin whose center is nearest to `lambda`.
    pub fn nearest_bin(&self, lambda: f64) -> usize {
        let x = (lambda - self.lambda_min) / self.bin_width() - 0.5;
        x.round().clamp(0.0, (self.n_bins - 1) as f64) as usize
    }
}

pub fn save_tensor(t: &HyperTensor, path: &Path) -> Result<()> {
    if let Some(offset) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(AmdError::NonFinite { offset });
    }
    let file = File::create(path).map_err(|e| AmdError::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| AmdError::io(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    let n_axes = u16::try_from(t.dims.len())
        .map_err(|_| AmdError::shape("too many axes for the .amdt header"))?;
    w.write_all(&n_axes.to_le_bytes()).map_err(io)?;
    for (&d, &l) in t.dims.iter().zip(&t.labels) {
        w.write_all(&[l.code()]).map_err(io)?;
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    for chunk in t.data.chunks(8192) {
        let mut buf = Vec::with_capacity(chunk.len() * 8);
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Dimensions and labels of a stored tensor, validated against the file size.
pub fn read_header(path: &Path) -> Result<(Vec<usize>, Vec<AxisLabel>)> {
    let file = File::open(path).map_err(|e| AmdError::io(path, e))?;
    let mut r = BufReader::new(file);
    let (dims, labels, _) = parse_header(path, &mut r)?;
    Ok((dims, labels))
}

fn parse_header(path: &Path, r: &mut BufReader<File>) -> Result<(Vec<usize>, Vec<AxisLabel>, u64)> {
    let actual = r
        .get_ref()
        .metadata()
        .map_err(|e| AmdError::io(path, e))?
        .len();
    let truncated = |expected: u64| AmdError::Truncated {
        path: path.to_path_buf(),
        expected,
        actual,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated(8))?;
    if magic != MAGIC {
        return Err(AmdError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|_| truncated(8))?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(AmdError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    r.read_exact(&mut b2).map_err(|_| truncated(8))?;
    let n_axes = u16::from_le_bytes(b2) as usize;
    let header_len = 8 + 9 * n_axes as u64;

    let mut dims = Vec::with_capacity(n_axes);
    let mut labels = Vec::with_capacity(n_axes);
    for _ in 0..n_axes {
        let mut code = [0u8; 1];
        let mut len = [0u8; 8];
        r.read_exact(&mut code).map_err(|_| truncated(header_len))?;
        r.read_exact(&mut len).map_err(|_| truncated(header_len))?;
        let label = AxisLabel::from_code(code[0]).ok_or(AmdError::BadAxisLabel {
            path: path.to_path_buf(),
            code: code[0],
        })?;
        labels.push(label);
        dims.push(u64::from_le_bytes(len) as usize);
    }
    let n: u64 = dims.iter().map(|&d| d as u64).product();
    let expected = header_len + 8 * n;
    if actual < expected {
        return Err(truncated(expected));
    }
    if actual > expected {
        return Err(AmdError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok((dims, labels, expected))
}

pub fn load_tensor(path: &Path) -> Result<HyperTensor> {
    let file = File::open(path).map_err(|e| AmdError::io(path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let (dims, labels, _) = parse_header(path, &mut r)?;
    let n: usize = dims.iter().product();

    let mut data = Vec::with_capacity(n);
    let mut buf = vec![0u8; 8 * 8192];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(8192);
        let bytes = &mut buf[..take * 8];
        r.read_exact(bytes).map_err(|e| AmdError::io(path, e))?;
        data.extend(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        remaining -= take;
    }
    HyperTensor::new(dims, labels, data)
}

/// Formats a value with nine significant digits, trimming trailing zeros.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

pub fn export_spectra_csv(s: &SpectraTable, path: &Path) -> Result<()> {
    s.validate()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["lambda_angstrom".to_string()];
    header.extend(s.names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for k in 0..s.grid.n_bins {
        let mut row = Vec::with_capacity(s.names.len() + 1);
        row.push(format_sig9(s.grid.center(k)));
        for m in 0..s.names.len() {
            row.push(format_sig9(s.mu[[m, k]]));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AmdError::io(path, e))
}

/// Reads a spectra CSV written by [`export_spectra_csv`] or by an external
/// tool using the same header convention. The grid is inferred from the
/// (uniformly spaced) wavelength column.
pub fn import_spectra_csv(path: &Path) -> Result<SpectraTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("lambda_angstrom") || header.len() < 2 {
        return Err(AmdError::Csv {
            path: path.to_path_buf(),
            message: "header must start with lambda_angstrom and name at least one material".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut lambdas = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != names.len() + 1 {
            return Err(AmdError::Csv {
                path: path.to_path_buf(),
                message: format!("row {} has {} fields", line + 2, rec.len()),
            });
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| AmdError::Csv {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", line + 2),
            })
        };
        lambdas.push(parse(&rec[0])?);
        for (m, col) in cols.iter_mut().enumerate() {
            col.push(parse(&rec[m + 1])?);
        }
    }
    let grid = grid_from_centers(&lambdas).map_err(|e| AmdError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let n_k = lambdas.len();
    let mut mu = ndarray::Array2::zeros((names.len(), n_k));
    for (m, col) in cols.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            mu[[m, k]] = v;
        }
    }
    SpectraTable::new(names, grid, mu)
}

fn grid_from_centers(centers: &[f64]) -> Result<WavelengthGrid> {
    match centers.len() {
        0 => Err(AmdError::invalid("no wavelength rows")),
        1 => Err(AmdError::invalid(
            "a single wavelength row does not determine the bin width",
        )),
        n => {
            let width = (centers[n - 1] - centers[0]) / (n - 1) as f64;
            if !(width > 0.0) {
                return Err(AmdError::invalid("wavelengths must increase"));
            }
            for (i, &c) in centers.iter().enumerate() {
                let want = centers[0] + i as f64 * width;
                if (c - want).abs() > 1e-6 * width.max(1e-12) + 1e-9 * c.abs() {
                    return Err(AmdError::invalid(format!(
                        "wavelength row {i} ({c}) breaks uniform spacing"
                    )));
                }
            }
            WavelengthGrid::new(centers[0] - width / 2.0, centers[n - 1] + width / 2.0, n)
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AmdError {
    AmdError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
