//! Verification instruments: energy-capture curves, Monte-Carlo risk,
//! randomized range-finder trials and subspace-alignment heatmaps.

use serde::{Deserialize, Serialize};

use crate::calib::{CovarianceEstimate, SpectrumModel};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, orth, projector_distance, psd_sqrt, random_orthogonal, svd, GaussianStream, Matrix, RootMode};
use crate::solver::{covariance_roots, range_finder, SharedFactors, StackedError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub ranks: Vec<usize>,
    pub capture: Vec<f64>,
    pub whitened: bool,
}

/// Fraction of squared singular-value mass of `E_cat` (or `E_cat Σ^{1/2}`)
/// kept by the best rank-`r` approximation, for each `r` in `ranks`.
pub fn energy_capture_curve(
    se: &StackedError,
    cov: Option<&CovarianceEstimate>,
    ranks: &[usize],
) -> Result<EnergyCurve> {
    let max = se.total_rows().min(se.input_dim());
    if ranks.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("ranks must be sorted ascending"));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r > max) {
        return Err(Error::invalid(format!("rank {r} exceeds {max}")));
    }
    let target = match cov {
        Some(c) => se.concat().matmul(&covariance_roots(c, se.input_dim(), None)?.sqrt),
        None => se.concat(),
    };
    let total = target.frobenius_norm_sq();
    let sigma = svd(&target)?.sigma;
    let capture = ranks
        .iter()
        .map(|&r| {
            if total == 0.0 {
                0.0
            } else {
                (sigma.iter().take(r).map(|s| s * s).sum::<f64>() / total).min(1.0)
            }
        })
        .collect();
    Ok(EnergyCurve { ranks: ranks.to_vec(), capture, whitened: cov.is_some() })
}

/// `1 − ‖(E_cat − AB) Σ^{1/2}‖² / ‖E_cat Σ^{1/2}‖²` for arbitrary factors,
/// used as they are (no refit of `A`).
pub fn whitened_capture_of_factors(se: &StackedError, cov: &CovarianceEstimate, factors: &SharedFactors) -> Result<f64> {
    let sqrt = covariance_roots(cov, se.input_dim(), None)?.sqrt;
    let total = se.concat().matmul(&sqrt).frobenius_norm_sq();
    if total == 0.0 {
        return Ok(0.0);
    }
    let resid = crate::solver::weighted_residual(se, &sqrt, factors)?;
    Ok(1.0 - resid * resid / total)
}

/// `(1/n) Σ ‖M x_k‖²` over `x_k ~ N(0, Σ)`.
pub fn mc_risk(m: &Matrix, cov: &Matrix, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    if !cov.is_square() || cov.rows() != m.cols() {
        return Err(Error::shape(format!("M is {:?}, covariance {:?}", m.shape(), cov.shape())));
    }
    let root = psd_sqrt(cov, RootMode::Sqrt, None)?;
    let d = cov.rows();
    let mut stream = GaussianStream::new(seed);
    let chunk = 4096;
    let mut total = 0.0;
    let mut done = 0;
    while done < n_samples {
        let rows = chunk.min(n_samples - done);
        let z = Matrix::from_fn(rows, d, |_, _| stream.next_normal());
        total += z.matmul(&root).matmul_t(m).frobenius_norm_sq();
        done += rows;
    }
    Ok(total / n_samples as f64)
}

/// A synthetic core `U diag(σ) Vᵀ` with `σ_j² = j^(−α)` and Haar `U`, `V`.
pub fn power_law_core(model: &SpectrumModel, seed: u64) -> Result<(Matrix, Vec<f64>)> {
    model.validate()?;
    let sigma: Vec<f64> = model.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let u = random_orthogonal(model.dim, derive_seed(seed, 1))?;
    let v = random_orthogonal(model.dim, derive_seed(seed, 2))?;
    Ok((u.scale_columns(&sigma).matmul_t(&v), sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsvdTrialRow {
    pub p: usize,
    pub q: usize,
    pub mean_error: f64,
    pub eym_tail: f64,
    /// `(1 + r/(p−1))^{1/2} · tail`, present for `p ≥ 2`.
    pub bound: Option<f64>,
}

/// Range-finder error `‖M − Q Qᵀ M‖_F` of a width-`(r + p)` sketch,
/// averaged over `trials`. Trial `t` uses the same sketch seed for every
/// `(p, q)`, so comparisons across the grid are paired.
pub fn rsvd_bound_trial(
    core: &Matrix,
    r: usize,
    ps: &[usize],
    qs: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<RsvdTrialRow>> {
    if trials < 50 {
        return Err(Error::invalid(format!("need at least 50 trials, got {trials}")));
    }
    let k = core.rows().min(core.cols());
    if r == 0 || r > k {
        return Err(Error::invalid(format!("rank {r} outside 1..={k}")));
    }
    if let Some(p) = ps.iter().find(|&&p| r + p > k) {
        return Err(Error::invalid(format!("r + p = {} exceeds {k}", r + p)));
    }
    let tail = svd(core)?.tail_energy(r);
    let mut rows = Vec::with_capacity(ps.len() * qs.len());
    for &p in ps {
        for &q in qs {
            let mut sum = 0.0;
            for t in 0..trials {
                let (_, basis) = range_finder(core, r + p, q, derive_seed(seed, t as u64))?;
                sum += core.sub(&basis.matmul(&basis.t_matmul(core))).frobenius_norm();
            }
            let bound = (p >= 2).then(|| (1.0 + r as f64 / (p as f64 - 1.0)).sqrt() * tail);
            rows.push(RsvdTrialRow { p, q, mean_error: sum / trials as f64, eym_tail: tail, bound });
        }
    }
    Ok(rows)
}

/// Assignment maximizing `Σ_j C[j, π(j)]`; returns `π` with `π[row] = col`.
///
/// Kuhn-Munkres with row/column potentials on `−C`, `O(n³)`.
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(Error::shape(format!("assignment needs a square matrix, got {:?}", cost.shape())));
    }
    let n = cost.rows();
    let a = |i: usize, j: usize| -cost[(i - 1, j - 1)];
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
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
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub module_id: String,
    /// Absolute cross-basis cosines with columns reordered by `permutation`.
    pub c: Matrix,
    /// `permutation[j]` is the module-basis index matched to shared index `j`.
    pub permutation: Vec<usize>,
    /// Mean of the matched diagonal.
    pub diag_mean: f64,
    /// `‖P_shared − P_module‖_max`; basis-independent.
    pub subspace_distance: f64,
}

fn orthonormal_rows(b: &Matrix) -> Result<Matrix> {
    if b.matmul_t(b).max_abs_diff(&Matrix::identity(b.rows())) <= 1e-10 {
        return Ok(b.clone());
    }
    Ok(orth(&b.transpose())?.transpose())
}

/// `C = |V_s V_mᵀ|` between two `r × d` row bases, Hungarian-reordered.
pub fn alignment_heatmap(module_id: &str, shared_basis: &Matrix, module_basis: &Matrix) -> Result<AlignmentMap> {
    if shared_basis.shape() != module_basis.shape() {
        return Err(Error::shape(format!(
            "basis shapes differ: {:?} vs {:?}",
            shared_basis.shape(),
            module_basis.shape()
        )));
    }
    let s = orthonormal_rows(shared_basis)?;
    let m = orthonormal_rows(module_basis)?;
    if s.rows() != m.rows() || s.rows() != shared_basis.rows() {
        return Err(Error::invalid("bases are rank deficient"));
    }
    let raw = s.matmul_t(&m).map(f64::abs);
    let permutation = hungarian(&raw)?;
    let r = raw.rows();
    let c = Matrix::from_fn(r, r, |i, j| raw[(i, permutation[j])]);
    let diag_mean = (0..r).map(|j| raw[(j, permutation[j])]).sum::<f64>() / r as f64;
    let subspace_distance = projector_distance(&s.transpose(), &m.transpose());
    Ok(AlignmentMap { module_id: module_id.to_string(), c, permutation, diag_mean, subspace_distance })
}

/// Top-`r` right singular vectors as rows.
fn top_right_basis(m: &Matrix, r: usize) -> Result<Matrix> {
    Ok(svd(m)?.v.columns(0, r).transpose())
}

/// Alignment of each module's top-`r` right basis with the stacked basis,
/// both computed on whitened errors when `cov` is given.
pub fn alignment_maps(se: &StackedError, cov: Option<&CovarianceEstimate>, r: usize) -> Result<Vec<AlignmentMap>> {
    let sqrt = match cov {
        Some(c) => Some(covariance_roots(c, se.input_dim(), None)?.sqrt),
        None => None,
    };
    let prep = |e: &Matrix| match &sqrt {
        Some(s) => e.matmul(s),
        None => e.clone(),
    };
    let shared = top_right_basis(&prep(&se.concat()), r)?;
    se.blocks()
        .iter()
        .map(|b| {
            if r > b.error.rows().min(b.error.cols()) {
                return Err(Error::invalid(format!("rank {r} too large for module {}", b.module_id)));
            }
            alignment_heatmap(&b.module_id, &shared, &top_right_basis(&prep(&b.error), r)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::synth_covariance;
    use crate::linalg::gaussian_matrix;
    use crate::oracle;
    use crate::select::score_energy_capture;
    use crate::solver::{solve_unweighted, solve_whitened_exact, whitened_core};
    use proptest::prelude::*;

    fn cov(d: usize, alpha: f64, seed: u64) -> CovarianceEstimate {
        CovarianceEstimate::exact(synth_covariance(&SpectrumModel::new(d, alpha, 1.0).unwrap(), seed).unwrap()).unwrap()
    }

    fn stack(seed: u64) -> StackedError {
        StackedError::stack(vec![
            ("a".into(), gaussian_matrix(10, 8, seed).unwrap()),
            ("b".into(), gaussian_matrix(6, 8, seed + 1).unwrap()),
        ])
        .unwrap()
    }

    fn brute_force_best(c: &Matrix) -> f64 {
        fn rec(c: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == c.rows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..c.cols() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(c[(row, j)] + rec(c, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(c, 0, &mut vec![false; c.cols()])
    }

    #[test]
    fn energy_curve_basics() {
        let se = stack(1);
        let curve = energy_capture_curve(&se, None, &[1, 2, 4, 8]).unwrap();
        assert!(curve.capture.windows(2).all(|w| w[1] >= w[0]));
        assert!((curve.capture[3] - 1.0).abs() < 1e-12);
        let iso = energy_capture_curve(&se, Some(&CovarianceEstimate::exact(Matrix::identity(8).scale(3.0)).unwrap()), &[1, 2, 4]).unwrap();
        let plain = energy_capture_curve(&se, None, &[1, 2, 4]).unwrap();
        for (a, b) in iso.capture.iter().zip(&plain.capture) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(energy_capture_curve(&se, None, &[2, 1]).is_err());
        assert!(energy_capture_curve(&se, None, &[9]).is_err());
    }

    #[test]
    fn energy_curve_agrees_with_score() {
        let se = stack(2);
        let c = cov(8, 1.19, 3);
        let curve = energy_capture_curve(&se, Some(&c), &[1, 3, 5]).unwrap();
        let core = whitened_core(&se, Some(&c), None).unwrap();
        for (r, v) in curve.ranks.iter().zip(&curve.capture) {
            assert!((score_energy_capture(&core, *r).unwrap() - v).abs() < 1e-9);
        }
    }

    #[test]
    fn whitened_factors_capture_at_least_unweighted() {
        let se = stack(4);
        let c = cov(8, 1.19, 5);
        for r in [1, 2, 4] {
            let w = whitened_capture_of_factors(&se, &c, &solve_whitened_exact(&se, &c, r, None).unwrap()).unwrap();
            let u = whitened_capture_of_factors(&se, &c, &solve_unweighted(&se, r).unwrap()).unwrap();
            assert!(w >= u - 1e-12);
            let curve = energy_capture_curve(&se, Some(&c), &[r]).unwrap();
            assert!((curve.capture[0] - w).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_risk_matches_frobenius() {
        assert_eq!(mc_risk(&Matrix::zeros(3, 4), &Matrix::identity(4), 100, 1).unwrap(), 0.0);
        let d = 6;
        let est = mc_risk(&Matrix::identity(d), &Matrix::identity(d), 100_000, 2).unwrap();
        assert!((est - d as f64).abs() / d as f64 <= 0.03);
        let m = gaussian_matrix(4, d, 3).unwrap();
        let c = cov(d, 1.19, 4);
        let exact = m.matmul(&oracle::sqrtm(&c.sigma)).frobenius_norm_sq();
        let est = mc_risk(&m, &c.sigma, 100_000, 5).unwrap();
        assert!((est - exact).abs() / exact <= 0.02);
        assert!(mc_risk(&m, &c.sigma, 0, 5).is_err());
    }

    #[test]
    fn rsvd_trials_follow_the_bound() {
        let (core, sigma) = power_law_core(&SpectrumModel::new(48, 1.19, 1.0).unwrap(), 7).unwrap();
        let rows = rsvd_bound_trial(&core, 6, &[4, 8], &[0, 1, 2], 50, 9).unwrap();
        for row in &rows {
            if row.q == 0 {
                assert!(row.mean_error <= row.bound.unwrap() * 1.05);
            }
            // a width-(r + p) basis can do no better than the rank-(r + p) tail
            let floor = sigma[6 + row.p..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!(row.mean_error >= floor * (1.0 - 1e-12));
        }
        for p_rows in rows.chunks(3) {
            assert!(p_rows.windows(2).all(|w| w[1].mean_error <= w[0].mean_error));
        }
        assert!(rsvd_bound_trial(&core, 6, &[4], &[0], 10, 1).is_err());
    }

    #[test]
    fn rsvd_trials_exact_on_low_rank_core() {
        let core = gaussian_matrix(20, 3, 1).unwrap().matmul(&gaussian_matrix(3, 20, 2).unwrap());
        let rows = rsvd_bound_trial(&core, 3, &[2], &[0, 1], 50, 3).unwrap();
        for row in rows {
            assert!(row.mean_error < 1e-10 * core.frobenius_norm());
        }
    }

    #[test]
    fn hungarian_simple_cases() {
        assert_eq!(hungarian(&Matrix::identity(4)).unwrap(), vec![0, 1, 2, 3]);
        let perm = [2usize, 0, 3, 1];
        let c = Matrix::from_fn(4, 4, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        assert_eq!(hungarian(&c).unwrap(), perm.to_vec());
        assert!(hungarian(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_6x6() {
        for seed in 0..20 {
            let c = gaussian_matrix(6, 6, seed).unwrap();
            let perm = hungarian(&c).unwrap();
            let got: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
            assert!((got - brute_force_best(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_extremes() {
        let q = random_orthogonal(8, 3).unwrap().transpose();
        let b = q.row_block(0, 3);
        let same = alignment_heatmap("m", &b, &b).unwrap();
        assert!((same.diag_mean - 1.0).abs() < 1e-12);
        assert!(same.c.max_abs_diff(&Matrix::identity(3)) < 1e-12);
        let rot = random_orthogonal(3, 4).unwrap().matmul(&b);
        let rotated = alignment_heatmap("m", &b, &rot).unwrap();
        assert!(rotated.subspace_distance < 1e-12);
        assert!(rotated.diag_mean <= 1.0 + 1e-12);
        let other = q.row_block(3, 6);
        let orth_map = alignment_heatmap("m", &b, &other).unwrap();
        assert!(orth_map.diag_mean < 1e-12);
        assert!(alignment_heatmap("m", &b, &q.row_block(0, 2)).is_err());
    }

    #[test]
    fn alignment_maps_shapes() {
        let se = stack(8);
        let maps = alignment_maps(&se, Some(&cov(8, 1.19, 1)), 3).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.c.shape(), (3, 3));
            assert!(m.c.as_slice().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            let mut p = m.permutation.clone();
            p.sort();
            assert_eq!(p, vec![0, 1, 2]);
        }
    }

    #[test]
    fn matrix_json_roundtrip() {
        let m = gaussian_matrix(2, 3, 1).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Matrix>(&text).unwrap(), m);
        assert!(serde_json::from_str::<Matrix>("[[1.0],[1.0,2.0]]").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hungarian_optimal_small(n in 1usize..6, seed in any::<u64>()) {
            let c = gaussian_matrix(n, n, seed).unwrap();
            let perm = hungarian(&c).unwrap();
            let got: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
            prop_assert!((got - brute_force_best(&c)).abs() < 1e-12);
        }
    }
}
