//! Open-beam processing, projection densities and background-offset
//! correction.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{AmdError, Result};
use crate::tensor_io::{AxisLabel, HyperTensor};

const COUNTS: [AxisLabel; 4] = [
    AxisLabel::View,
    AxisLabel::Row,
    AxisLabel::Col,
    AxisLabel::Wavelength,
];
const FIELD: [AxisLabel; 3] = [AxisLabel::Row, AxisLabel::Col, AxisLabel::Wavelength];

/// Detector pixels known to lie outside the sample in every view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `true` = background.
    pub pixels: Vec<bool>,
}

impl BackgroundMask {
    pub fn new(rows: usize, cols: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(AmdError::shape(format!(
                "mask of {}x{} needs {} pixels, got {}",
                rows,
                cols,
                rows * cols,
                pixels.len()
            )));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            pixels: vec![true; rows * cols],
        }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> HyperTensor {
        HyperTensor::from_parts_unchecked(
            vec![self.rows, self.cols],
            vec![AxisLabel::Row, AxisLabel::Col],
            self.pixels
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn from_tensor(t: &HyperTensor) -> Result<Self> {
        t.expect_layout(&[AxisLabel::Row, AxisLabel::Col], "background mask")?;
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(AmdError::invalid(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Self::new(
            t.dims()[0],
            t.dims()[1],
            t.data().iter().map(|&v| v == 1.0).collect(),
        )
    }
}

/// Background-corrected projection densities.
#[derive(Debug, Clone)]
pub struct DensityStack {
    /// `[view,row,col,wavelength]`.
    pub p: HyperTensor,
    /// Offsets `b[view, wavelength]` that were subtracted.
    pub offsets: Array2<f64>,
    pub background_mask: BackgroundMask,
}

impl DensityStack {
    pub fn dims(&self) -> [usize; 4] {
        let d = self.p.dims();
        [d[0], d[1], d[2], d[3]]
    }
}

/// Mean over the set axis of `[set,row,col,wavelength]`.
pub fn average_openbeams(stacks: &HyperTensor) -> Result<HyperTensor> {
    stacks.expect_layout(
        &[
            AxisLabel::Set,
            AxisLabel::Row,
            AxisLabel::Col,
            AxisLabel::Wavelength,
        ],
        "open-beam stack",
    )?;
    let n_sets = stacks.dims()[0];
    if n_sets == 0 {
        return Err(AmdError::invalid("no open-beam sets"));
    }
    let per = stacks.len() / n_sets;
    let mut mean = vec![0.0; per];
    for set in stacks.data().chunks(per) {
        for (m, v) in mean.iter_mut().zip(set) {
            *m += v;
        }
    }
    let inv = 1.0 / n_sets as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    HyperTensor::new(stacks.dims()[1..].to_vec(), FIELD.to_vec(), mean)
}

/// Normalized 1-D Hamming window of odd length `k`.
pub fn hamming_window(k: usize) -> Result<Vec<f64>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(AmdError::invalid(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let w: Vec<f64> = (0..k)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (k - 1) as f64).cos())
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

/// Per-wavelength 2-D convolution with the normalized separable Hamming
/// kernel; borders replicate the edge pixels.
pub fn smooth_openbeam(ybar: &HyperTensor, kernel_size: usize) -> Result<HyperTensor> {
    ybar.expect_layout(&FIELD, "open-beam field")?;
    let h = hamming_window(kernel_size)?;
    if kernel_size == 1 {
        return Ok(ybar.clone());
    }
    let (n_r, n_c, n_k) = (ybar.dims()[0], ybar.dims()[1], ybar.dims()[2]);
    let half = (kernel_size / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = ybar.data();

    let mut tmp = vec![0.0; src.len()];
    tmp.par_chunks_mut(n_c * n_k)
        .enumerate()
        .for_each(|(r, out)| {
            for c in 0..n_c {
                let o = &mut out[c * n_k..(c + 1) * n_k];
                for (t, &w) in h.iter().enumerate() {
                    let cc = clamp(c as isize + t as isize - half, n_c);
                    let s = &src[(r * n_c + cc) * n_k..(r * n_c + cc + 1) * n_k];
                    for (a, b) in o.iter_mut().zip(s) {
                        *a += w * b;
                    }
                }
            }
        });
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(n_c * n_k)
        .enumerate()
        .for_each(|(r, o)| {
            for (t, &w) in h.iter().enumerate() {
                let rr = clamp(r as isize + t as isize - half, n_r);
                let s = &tmp[rr * n_c * n_k..(rr + 1) * n_c * n_k];
                for (a, b) in o.iter_mut().zip(s) {
                    *a += w * b;
                }
            }
        });
    HyperTensor::new(ybar.dims().to_vec(), FIELD.to_vec(), out)
}

/// `p = −ln(max(y, floor·y_o) / y_o)`. Consumes the counts to reuse their buffer.
pub fn compute_density(y: HyperTensor, y_o: &HyperTensor, floor: f64) -> Result<HyperTensor> {
    y.expect_layout(&COUNTS, "counts")?;
    y_o.expect_layout(&FIELD, "open-beam field")?;
    if y.dims()[1..] != *y_o.dims() {
        return Err(AmdError::shape(format!(
            "counts {:?} and open-beam {:?} disagree on (row, col, wavelength)",
            y.dims(),
            y_o.dims()
        )));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(AmdError::invalid(format!(
            "count floor must be in (0, 1), got {floor}"
        )));
    }
    if let Some(pos) = y_o.data().iter().position(|&v| !(v > 0.0)) {
        return Err(AmdError::invalid(format!(
            "open-beam must be positive, found {} at flat offset {pos}",
            y_o.data()[pos]
        )));
    }
    let dims = y.dims().to_vec();
    let mut data = y.into_data();
    let yo = y_o.data();
    data.par_chunks_mut(yo.len()).for_each(|view| {
        for (v, &o) in view.iter_mut().zip(yo) {
            *v = -(v.max(floor * o) / o).ln();
        }
    });
    HyperTensor::new(dims, COUNTS.to_vec(), data)
}

/// Subtracts `b[v,k]`, the mean of `p_meas[v,·,·,k]` over the mask.
pub fn correct_background(p_meas: HyperTensor, mask: &BackgroundMask) -> Result<DensityStack> {
    p_meas.expect_layout(&COUNTS, "density")?;
    let [n_v, n_r, n_c, n_k] = [
        p_meas.dims()[0],
        p_meas.dims()[1],
        p_meas.dims()[2],
        p_meas.dims()[3],
    ];
    if mask.rows != n_r || mask.cols != n_c {
        return Err(AmdError::shape(format!(
            "mask {}x{} does not match detector {n_r}x{n_c}",
            mask.rows, mask.cols
        )));
    }
    let n_mask = mask.count();
    if n_mask == 0 {
        return Err(AmdError::EmptyMask(
            "background mask selects no pixels".into(),
        ));
    }
    let masked: Vec<usize> = (0..n_r * n_c).filter(|&i| mask.pixels[i]).collect();
    let mut data = p_meas.into_data();
    let per_view = n_r * n_c * n_k;
    let offsets: Vec<Vec<f64>> = data
        .par_chunks_mut(per_view)
        .map(|view| {
            let mut b = vec![0.0; n_k];
            for &pix in &masked {
                for (bk, v) in b.iter_mut().zip(&view[pix * n_k..(pix + 1) * n_k]) {
                    *bk += v;
                }
            }
            b.iter_mut().for_each(|x| *x /= n_mask as f64);
            for px in view.chunks_mut(n_k) {
                for (v, bk) in px.iter_mut().zip(&b) {
                    *v -= bk;
                }
            }
            b
        })
        .collect();
    let mut b = Array2::zeros((n_v, n_k));
    for (v, row) in offsets.iter().enumerate() {
        for (k, &x) in row.iter().enumerate() {
            b[[v, k]] = x;
        }
    }
    Ok(DensityStack {
        p: HyperTensor::new(vec![n_v, n_r, n_c, n_k], COUNTS.to_vec(), data)?,
        offsets: b,
        background_mask: mask.clone(),
    })
}

/// Density averaged over views and wavelengths, one value per detector pixel.
pub fn mean_density_image(p_meas: &HyperTensor) -> Result<Vec<f64>> {
    p_meas.expect_layout(&COUNTS, "density")?;
    let [n_v, n_r, n_c, n_k] = [
        p_meas.dims()[0],
        p_meas.dims()[1],
        p_meas.dims()[2],
        p_meas.dims()[3],
    ];
    let mut img = vec![0.0; n_r * n_c];
    for view in p_meas.data().chunks(n_r * n_c * n_k) {
        for (pix, px) in view.chunks(n_k).enumerate() {
            img[pix] += px.iter().sum::<f64>();
        }
    }
    let inv = 1.0 / (n_v * n_k) as f64;
    img.iter_mut().for_each(|v| *v *= inv);
    Ok(img)
}

/// Background mask from the data: pixels whose view- and wavelength-averaged
/// density is at most the `quantile` level plus 5% of the level-to-maximum
/// span, restricted to the largest 4-connected component touching the border.
pub fn auto_background_mask(p_meas: &HyperTensor, quantile: f64) -> Result<BackgroundMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(AmdError::invalid(format!(
            "quantile must be in (0, 1), got {quantile}"
        )));
    }
    let (n_r, n_c) = (p_meas.dims()[1], p_meas.dims()[2]);
    let img = mean_density_image(p_meas)?;
    let mut sorted = img.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let level = sorted[((sorted.len() - 1) as f64 * quantile).round() as usize];
    let top = *sorted.last().unwrap();
    let threshold = level + 0.05 * (top - level);
    let below: Vec<bool> = img.iter().map(|&v| v <= threshold).collect();

    // label 4-connected components of `below`
    let mut comp = vec![usize::MAX; n_r * n_c];
    let mut best: Option<(usize, usize)> = None; // (component, size)
    let mut n_comp = 0;
    for start in 0..n_r * n_c {
        if !below[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = n_comp;
        n_comp += 1;
        let mut stack = vec![start];
        comp[start] = id;
        let (mut size, mut touches) = (0usize, false);
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = (i / n_c, i % n_c);
            touches |= r == 0 || c == 0 || r == n_r - 1 || c == n_c - 1;
            let mut push = |j: usize| {
                if below[j] && comp[j] == usize::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - n_c);
            }
            if r + 1 < n_r {
                push(i + n_c);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < n_c {
                push(i + 1);
            }
        }
        if touches && best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    let (id, _) = best.ok_or_else(|| {
        AmdError::EmptyMask(
            "no low-density region touches the detector border; supply a mask file".into(),
        )
    })?;
    BackgroundMask::new(n_r, n_c, comp.iter().map(|&c| c == id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(
        n_r: usize,
        n_c: usize,
        n_k: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> HyperTensor {
        let mut d = Vec::new();
        for r in 0..n_r {
            for c in 0..n_c {
                for k in 0..n_k {
                    d.push(f(r, c, k));
                }
            }
        }
        HyperTensor::new(vec![n_r, n_c, n_k], FIELD.to_vec(), d).unwrap()
    }

    fn counts(
        n_v: usize,
        n_r: usize,
        n_c: usize,
        n_k: usize,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> HyperTensor {
        let mut d = Vec::new();
        for v in 0..n_v {
            for r in 0..n_r {
                for c in 0..n_c {
                    for k in 0..n_k {
                        d.push(f(v, r, c, k));
                    }
                }
            }
        }
        HyperTensor::new(vec![n_v, n_r, n_c, n_k], COUNTS.to_vec(), d).unwrap()
    }

    fn sets(values: &[f64], n_r: usize, n_c: usize, n_k: usize) -> HyperTensor {
        let per = n_r * n_c * n_k;
        let data = values
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, per))
            .collect();
        HyperTensor::new(
            vec![values.len(), n_r, n_c, n_k],
            vec![
                AxisLabel::Set,
                AxisLabel::Row,
                AxisLabel::Col,
                AxisLabel::Wavelength,
            ],
            data,
        )
        .unwrap()
    }

    #[test]
    fn single_set_average_is_identity() {
        let s = sets(&[3.0], 2, 3, 4);
        let a = average_openbeams(&s).unwrap();
        assert_eq!(a.dims(), &[2, 3, 4]);
        assert!(a.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn two_set_average() {
        let a = average_openbeams(&sets(&[0.0, 2.0], 2, 2, 2)).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hamming_weights() {
        assert!(hamming_window(4).is_err());
        assert!(hamming_window(0).is_err());
        assert_eq!(hamming_window(1).unwrap(), vec![1.0]);
        let w = hamming_window(5).unwrap();
        let raw = [0.08, 0.54, 1.0, 0.54, 0.08];
        let s: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(raw) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_one_is_identity() {
        let f = field(4, 5, 2, |r, c, k| (r * 7 + c * 3 + k) as f64);
        assert_eq!(smooth_openbeam(&f, 1).unwrap(), f);
    }

    #[test]
    fn even_kernel_rejected() {
        let f = field(4, 4, 1, |_, _, _| 1.0);
        assert!(smooth_openbeam(&f, 4).is_err());
    }

    #[test]
    fn constant_field_unchanged() {
        let f = field(9, 7, 3, |_, _, k| 100.0 + k as f64);
        let s = smooth_openbeam(&f, 5).unwrap();
        for (a, b) in s.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
    }

    #[test]
    fn impulse_response_is_kernel() {
        let f = field(
            11,
            11,
            1,
            |r, c, _| if r == 5 && c == 5 { 1.0 } else { 0.0 },
        );
        let s = smooth_openbeam(&f, 5).unwrap();
        // closed-form Hamming weights, independent of hamming_window()
        let raw: Vec<f64> = (0..5)
            .map(|n| 0.54 - 0.46 * (std::f64::consts::PI * n as f64 / 2.0).cos())
            .collect();
        let sum: f64 = raw.iter().sum();
        for i in 0..5 {
            for j in 0..5 {
                let want = raw[i] * raw[j] / (sum * sum);
                let got = s.get(&[3 + i, 3 + j, 0]);
                assert!((got - want).abs() < 1e-14);
            }
        }
        assert!((s.get(&[5, 5, 0]) - 1.0 / (2.24 * 2.24)).abs() < 1e-12);
    }

    #[test]
    fn unit_transmission_gives_zero_density() {
        let yo = field(2, 2, 3, |_, _, _| 500.0);
        let y = counts(2, 2, 2, 3, |_, _, _, _| 500.0);
        let p = compute_density(y, &yo, 1e-6).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_density() {
        let yo = field(1, 1, 1, |_, _, _| 1000.0);
        let y = counts(1, 1, 1, 1, |_, _, _, _| 1000.0 * (-2.0f64).exp());
        let p = compute_density(y, &yo, 1e-6).unwrap();
        assert!((p.data()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_counts_hit_the_floor() {
        let yo = field(1, 1, 1, |_, _, _| 1000.0);
        let y = counts(1, 1, 1, 1, |_, _, _, _| 0.0);
        let p = compute_density(y, &yo, 1e-6).unwrap();
        assert!((p.data()[0] - 13.815510557964274).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_openbeam_rejected() {
        let yo = field(1, 2, 1, |_, c, _| c as f64);
        let y = counts(1, 1, 2, 1, |_, _, _, _| 1.0);
        assert!(compute_density(y, &yo, 1e-6).is_err());
    }

    #[test]
    fn constant_density_full_mask() {
        let p = counts(3, 4, 4, 2, |_, _, _, _| 0.3);
        let d = correct_background(p, &BackgroundMask::full(4, 4)).unwrap();
        assert!(d.p.data().iter().all(|v| v.abs() < 1e-15));
        assert!(d.offsets.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn per_view_offset_recovered() {
        let truth = |v: usize, r: usize, c: usize, k: usize| {
            if r >= 1 && c >= 1 {
                0.1 * (r + c + k) as f64 + 0.01 * v as f64
            } else {
                0.0
            }
        };
        let b = |v: usize, k: usize| 0.05 * v as f64 - 0.02 * k as f64;
        let p = counts(3, 4, 4, 2, |v, r, c, k| truth(v, r, c, k) + b(v, k));
        let mut mask = vec![false; 16];
        for i in 0..16 {
            mask[i] = i / 4 == 0 || i % 4 == 0;
        }
        let d = correct_background(p, &BackgroundMask::new(4, 4, mask).unwrap()).unwrap();
        for v in 0..3 {
            for k in 0..2 {
                assert!((d.offsets[[v, k]] - b(v, k)).abs() < 1e-14);
                for r in 0..4 {
                    for c in 0..4 {
                        assert!((d.p.get(&[v, r, c, k]) - truth(v, r, c, k)).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn correction_is_idempotent() {
        let p = counts(2, 5, 5, 3, |v, r, c, k| {
            ((v * 31 + r * 7 + c * 3 + k) % 11) as f64 * 0.1
        });
        let mask = BackgroundMask::new(5, 5, (0..25).map(|i| i % 3 == 0).collect()).unwrap();
        let once = correct_background(p, &mask).unwrap();
        let twice = correct_background(once.p.clone(), &mask).unwrap();
        assert!(twice.offsets.iter().all(|b| b.abs() < 1e-12));
        for (a, b) in once.p.data().iter().zip(twice.p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let p = counts(1, 2, 2, 1, |_, _, _, _| 0.0);
        let mask = BackgroundMask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(
            correct_background(p, &mask),
            Err(AmdError::EmptyMask(_))
        ));
    }

    #[test]
    fn auto_mask_on_zero_density_covers_frame() {
        let p = counts(2, 6, 6, 2, |_, _, _, _| 0.0);
        let m = auto_background_mask(&p, 0.2).unwrap();
        assert_eq!(m.count(), 36);
    }

    #[test]
    fn auto_mask_rejects_degenerate_quantile() {
        let p = counts(1, 3, 3, 1, |_, _, _, _| 0.0);
        assert!(auto_background_mask(&p, 0.0).is_err());
        assert!(auto_background_mask(&p, 1.0).is_err());
    }

    #[test]
    fn mask_tensor_round_trip() {
        let m = BackgroundMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(BackgroundMask::from_tensor(&m.to_tensor()).unwrap(), m);
    }
}
