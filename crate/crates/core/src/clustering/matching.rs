use crate::error::{AmdError, Result};
use crate::simulation::SpectraTable;

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMatch {
    /// `permutation[r]` is the estimated material matched to reference `r`.
    pub permutation: Vec<usize>,
    /// `‖μ_est − μ_ref‖₂ / ‖μ_ref‖₂` per reference material.
    pub nrmse: Vec<f64>,
}

pub fn nrmse(est: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = est
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Minimum-total-NRMSE assignment of estimated to reference spectra.
pub fn match_materials(spectra: &SpectraTable, reference: &SpectraTable) -> Result<MaterialMatch> {
    let n = reference.n_materials();
    if spectra.n_materials() != n {
        return Err(AmdError::shape(format!(
            "{} estimated spectra vs {n} reference spectra",
            spectra.n_materials()
        )));
    }
    if spectra.grid != reference.grid {
        return Err(AmdError::shape(
            "spectra live on different wavelength grids",
        ));
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let rr = reference.mu.row(r).to_vec();
            (0..n)
                .map(|e| nrmse(&spectra.mu.row(e).to_vec(), &rr))
                .collect()
        })
        .collect();
    let permutation = hungarian(&cost);
    let nrmse = (0..n).map(|r| cost[r][permutation[r]]).collect();
    Ok(MaterialMatch { permutation, nrmse })
}

/// Minimum-cost perfect matching on a square cost matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // potentials, 1-based with a virtual column 0
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; na * nb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * nb + y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let rows: f64 = (0..na)
        .map(|i| c2(table[i * nb..(i + 1) * nb].iter().sum()))
        .sum();
    let cols: f64 = (0..nb)
        .map(|j| c2((0..na).map(|i| table[i * nb + j]).sum()))
        .sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::WavelengthGrid;
    use ndarray::array;

    fn table(mu: ndarray::Array2<f64>) -> SpectraTable {
        let n = mu.nrows();
        SpectraTable::new(
            (0..n).map(|i| format!("m{i}")).collect(),
            WavelengthGrid::new(1.0, 2.0, mu.ncols()).unwrap(),
            mu,
        )
        .unwrap()
    }

    #[test]
    fn identical_tables() {
        let t = table(array![[1.0, 2.0, 3.0], [0.5, 0.1, 0.2], [0.0, 1.0, 0.0]]);
        let m = match_materials(&t, &t).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2]);
        assert!(m.nrmse.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn permuted_copy() {
        let r = table(array![[1.0, 2.0, 3.0], [0.5, 0.1, 0.2], [0.0, 1.0, 0.0]]);
        // estimated order: ref 2, ref 0, ref 1
        let e = table(array![[0.0, 1.0, 0.0], [1.0, 2.0, 3.0], [0.5, 0.1, 0.2]]);
        let m = match_materials(&e, &r).unwrap();
        assert_eq!(m.permutation, vec![1, 2, 0]);
        assert!(m.nrmse.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaled_reference() {
        let e = table(array![[1.0, 2.0, 3.0], [0.5, 0.1, 0.2]]);
        let r = table(array![[1.2, 2.4, 3.6], [0.5, 0.1, 0.2]]);
        let m = match_materials(&e, &r).unwrap();
        assert!((m.nrmse[0] - 0.2 / 1.2).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch() {
        let e = table(array![[1.0, 2.0]]);
        let r = table(array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(match_materials(&e, &r).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let cost = vec![
            vec![4.0, 1.0, 3.0, 2.0],
            vec![2.0, 0.0, 5.0, 3.0],
            vec![3.0, 2.0, 2.0, 4.0],
            vec![1.0, 3.0, 4.0, 0.5],
        ];
        let a = hungarian(&cost);
        let total = |p: &[usize]| (0..4).map(|i| cost[i][p[i]]).sum::<f64>();
        let mut best = f64::INFINITY;
        let mut perm = vec![0, 1, 2, 3];
        // Heap's algorithm over all 24 permutations
        fn heap(k: usize, p: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
            if k == 1 {
                f(p);
                return;
            }
            for i in 0..k {
                heap(k - 1, p, f);
                let j = if k.is_multiple_of(2) { i } else { 0 };
                p.swap(j, k - 1);
            }
        }
        heap(4, &mut perm, &mut |p| best = best.min(total(p)));
        assert!((total(&a) - best).abs() < 1e-12);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // contingency [[2,1],[0,1]]: index 1, row pairs 3, column pairs 1+1,
        // expected 3·2/6 = 1 → chance level
        let ari = adjusted_rand_index(&[0, 0, 0, 1], &[0, 0, 1, 1]);
        assert!(ari.abs() < 1e-12);
        // contingency [[2,0],[1,2]]: index 2, rows 1+3, cols 3+1, total 10,
        // expected 1.6, max 4 → 0.4/2.4
        let ari = adjusted_rand_index(&[0, 0, 1, 1, 1], &[0, 0, 0, 1, 1]);
        assert!((ari - 1.0 / 6.0).abs() < 1e-12);
    }
}
