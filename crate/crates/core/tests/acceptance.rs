//! Acceptance criteria on the default simulated experiment. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any check fails.

use std::path::Path;
use std::time::Instant;

use amd_core::clustering::{
    adjusted_rand_index, fit_gmm_points, match_materials, segment, GmmOptions,
};
use amd_core::factorization::{nmf, nmf_fixed_dictionary, NmfOptions};
use amd_core::pipeline::{
    acquire, load_run, metrics_agree, preprocess, run_amd, run_rdmd, setup, PipelineConfig,
    RunReport,
};
use amd_core::simulation::{default_edge_models, spectra_from_models};
use amd_core::tensor_io::{load_tensor, AxisLabel, HyperTensor};
use amd_core::tomography::{
    auto_sigma_x, backproject, estimate_sigma_v, project, qggmrf_influence, Mbir, MbirOptions,
    PriorParams, ScanGeometry,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const STRONG_NRMSE: f64 = 0.02;
const WEAK_NRMSE: f64 = 0.15;
const MAX_RUNTIME_S: f64 = 15.0 * 60.0;
const AMD_RECONS: usize = 12;
const RDMD_RECONS: usize = 1203;
const MIN_SPEEDUP: f64 = 10.0;
const EDGE_TOL_BINS: usize = 2;
/// Half-width of the search window around each configured edge.
const EDGE_WINDOW_BINS: usize = 20;
/// Derivative-of-Gaussian scale for the gradient estimate.
const EDGE_SIGMA_BINS: f64 = 2.0;
const KERNEL_BUDGET_S: f64 = 120.0;
const MIN_ACCURACY: f64 = 0.95;
const MIN_RECALL: f64 = 0.95;
const MAX_DICT_CLAMP: f64 = 0.01;
const DETERMINISM_RTOL: f64 = 1e-9;

struct Verdicts {
    failed: usize,
}

impl Verdicts {
    fn check(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "[{}] {id} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn main() {
    let mut v = Verdicts { failed: 0 };
    let work = tempfile::tempdir().expect("temp dir");

    kernel_suite(&mut v);

    let mut cfg = PipelineConfig::default();
    cfg.output_dir = work.path().join("amd");
    let amd = match run_amd(&cfg) {
        Ok(r) => Some(r),
        Err(e) => {
            v.check("C1", "default AMD run", false, format!("run failed: {e}"));
            None
        }
    };
    if let Some(amd) = &amd {
        spectra_recovery(&mut v, amd, &cfg);
        edge_localization(&mut v, &cfg.output_dir);
        segmentation(&mut v, amd);
    }

    let mut rcfg = PipelineConfig::default();
    rcfg.output_dir = work.path().join("rdmd");
    match run_rdmd(&rcfg) {
        Ok(rd) => cost_asymmetry(&mut v, amd.as_ref(), &rd, &cfg),
        Err(e) => v.check(
            "C2",
            "cost asymmetry",
            false,
            format!("RDMD run failed: {e}"),
        ),
    }

    if let Some(amd) = &amd {
        let mut again = PipelineConfig::default();
        again.output_dir = work.path().join("amd_again");
        match run_amd(&again) {
            Ok(r2) => {
                let res = metrics_agree(&amd.metrics, &r2.metrics, DETERMINISM_RTOL);
                v.check(
                    "C6",
                    "determinism",
                    res.is_ok(),
                    match res {
                        Ok(()) => format!("every metric of two seeded runs agrees to {DETERMINISM_RTOL:e} relative"),
                        Err(e) => e.to_string(),
                    },
                );
            }
            Err(e) => v.check(
                "C6",
                "determinism",
                false,
                format!("second run failed: {e}"),
            ),
        }
    }

    println!(
        "[SKIP] C7 measured-data results: excluded, the experimental dataset is not published"
    );
    println!("acceptance: {} check(s) failed", v.failed);
    if v.failed > 0 {
        std::process::exit(1);
    }
}

fn spectra_recovery(v: &mut Verdicts, amd: &RunReport, cfg: &PipelineConfig) {
    let strong = ["Ni", "Cu"];
    let mut pass = amd.metrics.spectra_nrmse.len() == cfg.n_materials;
    let mut parts = Vec::new();
    for e in &amd.metrics.spectra_nrmse {
        let limit = if strong.contains(&e.reference.as_str()) {
            STRONG_NRMSE
        } else {
            WEAK_NRMSE
        };
        pass &= e.nrmse < limit;
        parts.push(format!(
            "{} {:.3}% (< {:.0}%)",
            e.reference,
            100.0 * e.nrmse,
            100.0 * limit
        ));
    }
    let secs = amd.total_seconds();
    pass &= secs < MAX_RUNTIME_S;
    v.check(
        "C1",
        "spectra recovery",
        pass,
        format!(
            "{}; runtime {secs:.0} s (< {MAX_RUNTIME_S:.0} s)",
            parts.join(", ")
        ),
    );
}

/// Index of the largest derivative-of-Gaussian response in `lo..=hi`.
fn max_gradient_bin(s: &[f64], lo: usize, hi: usize) -> usize {
    let r = (4.0 * EDGE_SIGMA_BINS).ceil() as isize;
    let n = s.len() as isize;
    let grad = |k: usize| -> f64 {
        (-r..=r)
            .map(|j| {
                let w = -(j as f64)
                    * (-(j * j) as f64 / (2.0 * EDGE_SIGMA_BINS * EDGE_SIGMA_BINS)).exp();
                w * s[(k as isize - j).clamp(0, n - 1) as usize]
            })
            .sum()
    };
    (lo..=hi)
        .max_by(|&a, &b| grad(a).total_cmp(&grad(b)))
        .expect("non-empty window")
}

fn edge_localization(v: &mut Verdicts, dir: &Path) {
    let (_, est) = match load_run(dir) {
        Ok(r) => r,
        Err(e) => return v.check("C3", "Bragg-edge localization", false, e.to_string()),
    };
    let grid = est.grid;
    let models = default_edge_models();
    let truth = spectra_from_models(&models, &grid).expect("model spectra");
    let m = match match_materials(&est, &truth) {
        Ok(m) => m,
        Err(e) => return v.check("C3", "Bragg-edge localization", false, e.to_string()),
    };
    let mut worst = 0usize;
    let mut pass = true;
    let mut misses = Vec::new();
    let mut n_edges = 0;
    for (r, model) in models.iter().enumerate() {
        let spec: Vec<f64> = est.mu.row(m.permutation[r]).to_vec();
        let reference: Vec<f64> = truth.mu.row(r).to_vec();
        for e in &model.edges {
            n_edges += 1;
            let centre = grid.nearest_bin(e.lambda);
            let lo = centre.saturating_sub(EDGE_WINDOW_BINS);
            let hi = (centre + EDGE_WINDOW_BINS).min(grid.n_bins - 1);
            // the estimator must place the noiseless edge exactly
            assert!(max_gradient_bin(&reference, lo, hi).abs_diff(centre) <= 1);
            let off = max_gradient_bin(&spec, lo, hi).abs_diff(centre);
            worst = worst.max(off);
            if off > EDGE_TOL_BINS {
                pass = false;
                misses.push(format!("{} {:.3} Å off by {off}", model.name, e.lambda));
            }
        }
    }
    let detail = if misses.is_empty() {
        format!("{n_edges} edges, worst offset {worst} bin(s) (≤ {EDGE_TOL_BINS})")
    } else {
        format!("{n_edges} edges, misses: {}", misses.join("; "))
    };
    v.check("C3", "Bragg-edge localization", pass, detail);
}

fn segmentation(v: &mut Verdicts, amd: &RunReport) {
    match &amd.metrics.segmentation_accuracy {
        Some(a) => v.check(
            "C5",
            "segmentation accuracy",
            a.interior_accuracy > MIN_ACCURACY && a.background_recall >= MIN_RECALL,
            format!(
                "interior accuracy {:.4} (> {MIN_ACCURACY}), background recall {:.4} (≥ {MIN_RECALL})",
                a.interior_accuracy, a.background_recall
            ),
        ),
        None => v.check("C5", "segmentation accuracy", false, "no accuracy in report".into()),
    }
    match &amd.metrics.material {
        Some(m) => v.check(
            "C5b",
            "clamped material-dictionary mass",
            m.dictionary_clamped_fraction < MAX_DICT_CLAMP,
            format!(
                "{:.3}% of |D^m| mass (< {}%)",
                100.0 * m.dictionary_clamped_fraction,
                100.0 * MAX_DICT_CLAMP
            ),
        ),
        None => v.check(
            "C5b",
            "clamped material-dictionary mass",
            false,
            "no material metrics".into(),
        ),
    }
}

/// Row `row` of a `[view,row,col,last]` tensor, component `k`, as a
/// single-slice `[view,col]` sinogram.
fn slice_sinogram(t: &HyperTensor, row: usize, k: usize) -> Vec<f64> {
    let [n_v, n_r, n_c, n_l] = [t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]];
    let d = t.data();
    let mut s = Vec::with_capacity(n_v * n_c);
    for vi in 0..n_v {
        for c in 0..n_c {
            s.push(d[((vi * n_r + row) * n_c + c) * n_l + k]);
        }
    }
    s
}

/// Seconds spent reconstructing every sinogram with per-sinogram noise and
/// prior scales, the way both pipelines set them.
fn time_reconstructions(mbir: &Mbir, sinos: &[Vec<f64>], mask: &[bool]) -> f64 {
    let dims = mbir.geometry().sinogram_dims();
    let fbp = mbir.fbp().expect("parallel geometry has FBP");
    let t0 = Instant::now();
    for s in sinos {
        let peak = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let sigma_v = estimate_sigma_v(s, dims, mask)
            .unwrap_or(1e-6 * peak)
            .max((1e-6 * peak).max(1e-12));
        let pp = PriorParams {
            sigma_x: auto_sigma_x(&fbp.reconstruct_slice(s)),
            ..Default::default()
        };
        mbir.reconstruct_raw(s, sigma_v, &pp, &MbirOptions::default())
            .expect("single-slice reconstruction");
    }
    t0.elapsed().as_secs_f64()
}

fn cost_asymmetry(
    v: &mut Verdicts,
    amd: Option<&RunReport>,
    rdmd: &RunReport,
    cfg: &PipelineConfig,
) {
    let amd_n = amd.map(|r| r.metrics.n_reconstructions);
    let rdmd_n = rdmd.metrics.n_reconstructions;
    let counts_ok = amd_n == Some(AMD_RECONS) && rdmd_n == RDMD_RECONS;

    // same reconstructor, same slice: 1200 bin sinograms + 3 material
    // sinograms against 9 subspace + 3 material sinograms
    let s = setup(cfg).expect("setup");
    let (counts, ob) = acquire(cfg, &s).expect("acquire");
    let (ds, _) = preprocess(cfg, counts, &ob).expect("preprocess");
    drop(ob);
    let [n_v, n_r, n_c, n_k] = ds.dims();
    let row = n_r / 2;
    let geom = ScanGeometry::parallel(n_v, 1, n_c, 1.0).expect("slice geometry");
    let mbir = Mbir::new(&geom).expect("reconstructor");
    let mask = ds.background_mask.pixels[row * n_c..(row + 1) * n_c].to_vec();
    let amd_dir = &cfg.output_dir;
    let v_s =
        load_tensor(&amd_dir.join("subspace_coefficients.amdt")).expect("subspace coefficients");
    let v_m =
        load_tensor(&amd_dir.join("material_coefficients.amdt")).expect("material coefficients");
    let mut amd_sinos: Vec<Vec<f64>> = (0..v_s.dims()[3])
        .map(|k| slice_sinogram(&v_s, row, k))
        .collect();
    let material: Vec<Vec<f64>> = (0..v_m.dims()[3])
        .map(|k| slice_sinogram(&v_m, row, k))
        .collect();
    amd_sinos.extend(material.iter().cloned());
    let mut rdmd_sinos: Vec<Vec<f64>> = (0..n_k).map(|k| slice_sinogram(&ds.p, row, k)).collect();
    rdmd_sinos.extend(material);
    drop(ds);
    let t_amd = time_reconstructions(&mbir, &amd_sinos, &mask);
    let t_rdmd = time_reconstructions(&mbir, &rdmd_sinos, &mask);
    let speedup = t_rdmd / t_amd;
    let pipeline_clock = match amd {
        Some(a) => format!(
            "; full runs for reference: AMD {:.0} s over {n_r} slices, RDMD {:.0} s with FBP per bin",
            a.total_seconds(),
            rdmd.total_seconds()
        ),
        None => String::new(),
    };
    v.check(
        "C2",
        "cost asymmetry",
        counts_ok && speedup >= MIN_SPEEDUP && amd_sinos.len() == AMD_RECONS && rdmd_sinos.len() == RDMD_RECONS,
        format!(
            "reconstructions AMD {} / RDMD {rdmd_n} (want {AMD_RECONS} / {RDMD_RECONS}); \
             single-slice MBIR wall-clock {t_amd:.2} s vs {t_rdmd:.2} s, {speedup:.1}x (≥ {MIN_SPEEDUP}x){pipeline_clock}",
            amd_n.map_or("n/a".to_string(), |n| n.to_string())
        ),
    );
}

fn kernel_suite(v: &mut Verdicts) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    // projector adjoint identity
    let geom = ScanGeometry::parallel(8, 16, 16, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = HyperTensor::new(
            vec![16, 16, 16],
            vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
            (0..16 * 16 * 16).map(|_| normal(&mut rng)).collect(),
        )
        .unwrap();
        let y = HyperTensor::new(
            vec![8, 16, 16],
            vec![AxisLabel::View, AxisLabel::Row, AxisLabel::Col],
            (0..8 * 16 * 16).map(|_| normal(&mut rng)).collect(),
        )
        .unwrap();
        let ax = project(&x, &geom).unwrap();
        let aty = backproject(&y, &geom).unwrap();
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    v.check(
        "C4a",
        "projector adjoint",
        worst < 1e-6,
        format!("worst relative discrepancy {worst:.2e} over 20 trials (< 1e-6)"),
    );

    // NMF objective trace
    let p = Array2::from_shape_fn((50, 30), |_| rng.random::<f64>());
    let f = nmf(&p, 5, &NmfOptions::default()).unwrap();
    let rise = f
        .objective_trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(
        "C4b",
        "NMF objective non-increasing",
        rise <= 1e-10,
        format!(
            "largest step increase {rise:.2e} over {} steps (≤ 1e-10)",
            f.objective_trace.len() - 1
        ),
    );

    // MBIR objective trace on a noisy disk
    let g = ScanGeometry::parallel(16, 2, 24, 1.0).unwrap();
    let disk = HyperTensor::new(
        vec![2, 24, 24],
        vec![AxisLabel::Slice, AxisLabel::Row, AxisLabel::Col],
        (0..2 * 24 * 24)
            .map(|i| {
                let (r, c) = (((i / 24) % 24) as f64 - 11.5, (i % 24) as f64 - 11.5);
                if r * r + c * c < 64.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )
    .unwrap();
    let clean = project(&disk, &g).unwrap();
    let sino = HyperTensor::new(
        clean.dims().to_vec(),
        clean.labels().to_vec(),
        clean
            .data()
            .iter()
            .map(|s| s + 0.05 * normal(&mut rng))
            .collect(),
    )
    .unwrap();
    let mbir = Mbir::new(&g).unwrap();
    let pp = PriorParams {
        sigma_x: 0.2,
        ..Default::default()
    };
    let rec = mbir
        .reconstruct(
            &sino,
            0.05,
            &pp,
            &MbirOptions {
                max_iter: 30,
                stop_tol: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
    let init = rec.objective_trace[0];
    let rise = rec
        .objective_trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(
        "C4c",
        "MBIR objective non-increasing",
        rise <= 1e-9 * init.abs(),
        format!("largest step increase {rise:.2e} (≤ 1e-9 × {init:.3e})"),
    );

    // QGGMRF influence against central finite differences
    let pp = PriorParams {
        sigma_x: 0.7,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = (rng.random::<f64>() * 2.0 + 0.05) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let h = 1e-5 * d.abs();
        let fd = (amd_core::tomography::qggmrf_potential(d + h, &pp)
            - amd_core::tomography::qggmrf_potential(d - h, &pp))
            / (2.0 * h);
        worst = worst.max((qggmrf_influence(d, &pp) - fd).abs() / fd.abs());
    }
    let at_zero = qggmrf_influence(0.0, &pp);
    v.check(
        "C4d",
        "QGGMRF influence",
        worst < 1e-6 && at_zero == 0.0,
        format!("worst relative error {worst:.2e} at 20 points (< 1e-6), ρ'(0) = {at_zero}"),
    );

    // NNLS KKT conditions
    let d = Array2::from_shape_fn((60, 4), |_| rng.random::<f64>());
    let p = Array2::from_shape_fn((40, 60), |(i, _)| {
        if i % 3 == 0 {
            -rng.random::<f64>()
        } else {
            normal(&mut rng) + 1.0
        }
    });
    let fit = nmf_fixed_dictionary(&p, &d).unwrap();
    let (mut worst_active, mut worst_free) = (0.0f64, 0.0f64);
    for (i, vrow) in fit.v.rows().into_iter().enumerate() {
        let prow = p.row(i);
        let resid = d.dot(&vrow) - prow;
        let grad = d.t().dot(&resid);
        let scale = d
            .t()
            .dot(&prow)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(f64::MIN_POSITIVE);
        for (j, &g) in grad.iter().enumerate() {
            if vrow[j] == 0.0 {
                worst_active = worst_active.max(-g);
            } else {
                worst_free = worst_free.max(g.abs() / scale);
            }
        }
    }
    v.check(
        "C4e",
        "NNLS KKT",
        worst_active <= 1e-6 && worst_free <= 1e-6,
        format!("min gradient on bound −{worst_active:.1e} (≥ −1e-6), free |g|/‖Dᵗp‖∞ {worst_free:.1e} (≤ 1e-6)"),
    );

    // EM monotonicity and planted clusters 10σ apart
    let per = 500;
    let centres = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
    let mut truth = Vec::new();
    let x = Array2::from_shape_fn((3 * per, 3), |(i, a)| {
        centres[i / per][a] + normal(&mut rng)
    });
    for c in 0..3 {
        truth.extend(std::iter::repeat_n(c, per));
    }
    let model = fit_gmm_points(x.view(), 3, &GmmOptions::default()).unwrap();
    let drop_ = model
        .log_likelihood_trace
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(
        "C4f",
        "EM log-likelihood non-decreasing",
        drop_ <= 1e-8,
        format!("largest step decrease {drop_:.2e} (≤ 1e-8)"),
    );
    let volume = HyperTensor::new(
        vec![1, 1, 3 * per, 3],
        vec![
            AxisLabel::Slice,
            AxisLabel::Row,
            AxisLabel::Col,
            AxisLabel::Subspace,
        ],
        x.iter().cloned().collect(),
    )
    .unwrap();
    let seg = segment(&volume, &model).unwrap();
    let labels: Vec<usize> = seg.labels.data().iter().map(|&l| l as usize).collect();
    let ari = adjusted_rand_index(&labels, &truth);
    v.check(
        "C4g",
        "GMM planted clusters",
        ari > 0.99,
        format!("ARI {ari:.4} (> 0.99)"),
    );

    let secs = t0.elapsed().as_secs_f64();
    v.check(
        "C4",
        "kernel suite runtime",
        secs < KERNEL_BUDGET_S,
        format!("{secs:.1} s (< {KERNEL_BUDGET_S:.0} s)"),
    );
}
