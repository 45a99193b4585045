//! Named invariant suites run by `glowq verify`.
//!
//! Every suite draws its instances from the config seed, so a report is a
//! pure function of the effective config (and of the factor files, when
//! given). Reports carry no timings.

use std::collections::BTreeMap;
use std::path::Path;

use glowq::analysis::{hungarian, mc_risk, power_law_core, rsvd_bound_trial};
use glowq::calib::{shrink, synth_covariance, CovarianceEstimate, ShrinkageOptions, SpectrumModel};
use glowq::linalg::{derive_seed, gaussian_matrix, label_tag, psd_roots, random_orthogonal, svd};
use glowq::runtime::{
    cached_forward, layerwise_forward, param_count, planned_cost, CorrectionMode, CostLedger, LayerGroup,
    LayerwiseModule,
};
use glowq::solver::{
    balanced_recovery, block_recovery, left_given_right_weighted, load_factors, qr_reduced_rsvd, solve_core_exact,
    solve_unweighted, solve_whitened_exact, weighted_residual, SolveConfig, StackedError,
};
use glowq::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::pipeline::{load_problem, RunLayout, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    /// Passes when `measured <= tolerance`.
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: measured <= tolerance, measured, tolerance, detail: detail.into() }
    }

    fn failed(name: &str, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: false, measured: f64::NAN, tolerance: 0.0, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub manifest: RunManifest,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed)
    }
}

fn seed_for(cfg: &PipelineConfig, suite: &str, i: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, label_tag(suite)), i as u64)
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Stacked error with `blocks` blocks of `rows` rows each.
fn random_stack(blocks: usize, rows: usize, d: usize, seed: u64) -> Result<StackedError> {
    let parts = (0..blocks)
        .map(|b| Ok((format!("m{b}"), gaussian_matrix(rows, d, derive_seed(seed, b as u64))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StackedError::stack(parts)?)
}

/// A power-law covariance, or a rank-deficient Gram matrix when `deficit > 0`.
fn random_cov(d: usize, deficit: usize, seed: u64) -> Result<CovarianceEstimate> {
    let sigma = if deficit == 0 {
        synth_covariance(&SpectrumModel::new(d, 1.19, 1.0)?, seed)?
    } else {
        let g = gaussian_matrix(d, d - deficit, seed)?;
        g.matmul_t(&g).symmetrize()
    };
    Ok(CovarianceEstimate::exact(sigma)?)
}

/// `E_cat` with whitened spectrum `head` followed by a tail at `tail_scale`:
/// `E_cat Σ^{1/2} = U diag(s) Vᵀ`.
fn gapped_stack(
    blocks: usize,
    rows: usize,
    d: usize,
    head: &[f64],
    tail_scale: f64,
    cov: &CovarianceEstimate,
    seed: u64,
) -> Result<StackedError> {
    let m = blocks * rows;
    let k = m.min(d);
    let s: Vec<f64> = (0..k)
        .map(|j| head.get(j).copied().unwrap_or_else(|| tail_scale * 0.9f64.powi((j - head.len()) as i32)))
        .collect();
    let u = random_orthogonal(m, derive_seed(seed, 1))?.columns(0, k);
    let v = random_orthogonal(d, derive_seed(seed, 2))?.columns(0, k);
    let inv = psd_roots(&cov.sigma, None)?.inv_sqrt;
    let e = u.scale_columns(&s).matmul_t(&v).matmul(&inv);
    Ok(StackedError::stack((0..blocks).map(|b| (format!("m{b}"), e.row_block(b * rows, (b + 1) * rows))).collect())?)
}

fn eym_optimality(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "eym_shared_optimality";
    let (mut worst, mut violations) = (0.0f64, 0usize);
    for i in 0..cfg.verify.instances {
        let seed = seed_for(cfg, name, i);
        let d = 6 + i % 11;
        let se = random_stack(2 + i % 3, 4 + i % 9, d, seed)?;
        let r = 1 + i % 6.min(d - 1);
        let f = solve_unweighted(&se, r)?;
        let tail = svd(&se.concat())?.tail_energy(r);
        worst = worst.max(rel(f.residual_unweighted, tail));
        for p in 0..20 {
            let b = gaussian_matrix(r, d, derive_seed(seed, 100 + p))?;
            let a = block_recovery(&se.concat(), &b, None)?;
            let probe = se.concat().sub(&a.matmul(&b)).frobenius_norm();
            if probe < f.residual_unweighted * (1.0 - 1e-12) {
                violations += 1;
            }
        }
    }
    let mut s = SuiteResult::at_most(name, worst, 1e-8, format!("{violations} probes beat the solve"));
    s.passed &= violations == 0;
    Ok(s)
}

fn bridge_algebraic(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "bridge_algebraic";
    let mut worst = 0.0f64;
    for i in 0..cfg.verify.instances {
        let seed = seed_for(cfg, name, i);
        let d = 4 + i % 13;
        let m = gaussian_matrix(3 + i % 7, d, seed)?;
        let cov = random_cov(d, if i % 3 == 2 { 2.min(d - 1) } else { 0 }, derive_seed(seed, 1))?;
        let lhs = m.matmul(&cov.sigma).matmul_t(&m).trace();
        let rhs = m.matmul(&psd_roots(&cov.sigma, None)?.sqrt).frobenius_norm_sq();
        worst = worst.max(rel(lhs, rhs));
    }
    Ok(SuiteResult::at_most(name, worst, 1e-9, "tr(MΣMᵀ) vs ‖MΣ^½‖²"))
}

fn bridge_monte_carlo(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "bridge_monte_carlo";
    let seed = seed_for(cfg, name, 0);
    let m = gaussian_matrix(6, 8, seed)?;
    let cov = random_cov(8, 0, derive_seed(seed, 1))?;
    let exact = m.matmul(&psd_roots(&cov.sigma, None)?.sqrt).frobenius_norm_sq();
    let mc = mc_risk(&m, &cov.sigma, cfg.verify.mc_samples, derive_seed(seed, 2))?;
    Ok(SuiteResult::at_most(name, rel(mc, exact), 0.02, format!("n = {}", cfg.verify.mc_samples)))
}

fn core_equivalence(cfg: &PipelineConfig) -> Result<(SuiteResult, SuiteResult)> {
    let (name, sv_name) = ("core_equivalence", "singular_value_preservation");
    let (mut worst, mut worst_sv) = (0.0f64, 0.0f64);
    for i in 0..cfg.verify.instances {
        let seed = seed_for(cfg, name, i);
        let d = 5 + i % 10;
        let se = random_stack(2 + i % 2, 3 + i % 8, d, seed)?;
        let deficient = i % 3 == 2;
        let cov = random_cov(d, if deficient { 2 } else { 0 }, derive_seed(seed, 7))?;
        let tol = deficient.then_some(1e-10);
        let r = 1 + i % 4.min(d - 3);
        let direct = solve_whitened_exact(&se, &cov, r, tol)?;
        let (lifted, core) = solve_core_exact(&se, &cov, r, tol)?;
        worst = worst.max(rel(direct.residual_weighted, lifted.residual_weighted));

        let target = se.concat().matmul(&psd_roots(&cov.sigma, tol)?.sqrt);
        let (a, b) = (svd(&core)?.sigma, svd(&target)?.sigma);
        let cut = 1e-6 * a[0];
        for (x, y) in a.iter().zip(&b).filter(|(x, _)| **x > cut) {
            worst_sv = worst_sv.max(rel(*x, *y));
        }
    }
    Ok((
        SuiteResult::at_most(name, worst, 1e-8, "lifted core optimum vs direct whitened solve"),
        SuiteResult::at_most(sv_name, worst_sv, 1e-9, "σ(M) vs σ(E_cat Σ^½)"),
    ))
}

fn rsvd_expectation_bound(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "rsvd_expectation_bound";
    let mut worst = 0.0f64;
    for (k, alpha) in [0.77, 1.19].into_iter().enumerate() {
        let seed = seed_for(cfg, name, k);
        let (core, _) = power_law_core(&SpectrumModel::new(48, alpha, 1.0)?, seed)?;
        for row in rsvd_bound_trial(&core, 8, &[4, 8, 16], &[0], cfg.verify.rsvd_trials, derive_seed(seed, 1))? {
            let bound = row.bound.expect("p >= 2");
            worst = worst.max(row.mean_error / bound);
        }
    }
    Ok(SuiteResult::at_most(name, worst, 1.05, "max mean error / bound"))
}

fn power_iterations(cfg: &PipelineConfig) -> Result<(SuiteResult, SuiteResult)> {
    let (name, parity_name) = ("power_iteration_monotone", "power_iteration_exact_parity");
    let d = 32;
    let seed = seed_for(cfg, name, 0);
    let cov = random_cov(d, 0, seed)?;
    let se = random_stack(3, 16, d, derive_seed(seed, 1))?;
    let trials = cfg.verify.instances;
    let mut means = [0.0f64; 3];
    for t in 0..trials {
        for (q, mean) in means.iter_mut().enumerate() {
            let sc = SolveConfig { rank: 4, oversampling: 16, power_iters: q, whiten: true, seed: t as u64, rank_tol: None };
            *mean += qr_reduced_rsvd(&se, &cov, &sc)?.0.residual_weighted / trials as f64;
        }
    }
    let rise = means.windows(2).map(|w| (w[1] - w[0]) / w[0]).fold(f64::NEG_INFINITY, f64::max);
    let monotone = SuiteResult::at_most(
        name,
        rise.max(0.0),
        1e-12,
        format!("mean residual q=0,1,2: {:.6e} {:.6e} {:.6e}", means[0], means[1], means[2]),
    );

    let head = [10.0, 8.0, 6.0, 4.0];
    let gapped = gapped_stack(3, 16, d, &head, 1e-3, &cov, derive_seed(seed, 2))?;
    let exact = solve_whitened_exact(&gapped, &cov, 4, None)?.residual_weighted;
    let mut worst = 0.0f64;
    for q in 1..=2 {
        let sc = SolveConfig { rank: 4, oversampling: 16, power_iters: q, whiten: true, seed: cfg.seed, rank_tol: None };
        worst = worst.max(rel(qr_reduced_rsvd(&gapped, &cov, &sc)?.0.residual_weighted, exact));
    }
    Ok((monotone, SuiteResult::at_most(parity_name, worst, 1e-6, "q ∈ {1, 2} vs exact, gapped spectrum")))
}

fn diag_deviation(gram: &Matrix, sigma: &[f64]) -> f64 {
    gram.max_abs_diff(&Matrix::from_diag(sigma)) / sigma.first().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE)
}

fn balanced_and_lifted(cfg: &PipelineConfig) -> Result<Vec<SuiteResult>> {
    let name = "balanced_identities";
    let (mut bal, mut gram, mut weighted, mut qless) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..cfg.verify.instances {
        let seed = seed_for(cfg, name, i);
        let d = 6 + i % 8;
        let r = 1 + i % 4;
        let se = random_stack(2 + i % 2, 5 + i % 6, d, seed)?;
        let s = svd(&se.concat())?;
        let (u, sigma, v) = s.truncate(r);
        let (a_hat, b_hat) = balanced_recovery(&u, &sigma, &v)?;
        bal = bal.max(diag_deviation(&a_hat.t_matmul(&a_hat), &sigma));
        bal = bal.max(diag_deviation(&b_hat.matmul_t(&b_hat), &sigma));

        let cov = random_cov(d, 0, derive_seed(seed, 3))?;
        let f = solve_whitened_exact(&se, &cov, r, None)?;
        let roots = psd_roots(&cov.sigma, None)?;
        let sigma_w: Vec<f64> = svd(&se.concat().matmul(&roots.sqrt))?.sigma.into_iter().take(r).collect();
        gram = gram.max(diag_deviation(&f.b_shared.matmul(&cov.sigma).matmul_t(&f.b_shared), &sigma_w));
        for (id, a) in &f.a_blocks {
            let e = &se.blocks().iter().find(|b| &b.module_id == id).expect("block").error;
            let fit = left_given_right_weighted(e, &cov, &f.b_shared)?;
            weighted = weighted.max(fit.max_abs_diff(a) / a.max_abs().max(1.0));
        }

        let plain = solve_unweighted(&se, r)?;
        for (id, a) in &plain.a_blocks {
            let e = &se.blocks().iter().find(|b| &b.module_id == id).expect("block").error;
            let fit = block_recovery(e, &plain.b_shared, None)?;
            qless = qless.max(fit.max_abs_diff(a) / a.max_abs().max(1.0));
        }
    }
    Ok(vec![
        SuiteResult::at_most(name, bal, 1e-9, "ÂᵀÂ and B̂B̂ᵀ vs Σ_r"),
        SuiteResult::at_most("lifted_gram", gram, 1e-8, "B*Σ(B*)ᵀ vs Σ_r"),
        SuiteResult::at_most("weighted_block_recovery", weighted, 1e-6, "E_iΣBᵀ(BΣBᵀ)† vs lifted A*_i"),
        SuiteResult::at_most("qless_block_recovery_identity_metric", qless, 1e-6, "E_iBᵀ(BBᵀ)† vs A*_i at Σ = I"),
    ])
}

fn cache_equivalence(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "cache_equivalence";
    let mut worst = 0.0f64;
    for i in 0..cfg.verify.instances.min(10) {
        let seed = seed_for(cfg, name, i);
        let d = 8 + i;
        let ids = ["q", "k", "v"];
        let se = random_stack(3, 6, d, seed)?;
        let f = solve_unweighted(&StackedError::stack(
            se.blocks().iter().zip(ids).map(|(b, id)| (id.to_string(), b.error.clone())).collect(),
        )?, 3)?;
        let weights: BTreeMap<String, Matrix> = ids
            .iter()
            .enumerate()
            .map(|(k, id)| Ok((id.to_string(), gaussian_matrix(6, d, derive_seed(seed, 50 + k as u64))?)))
            .collect::<Result<_>>()?;
        let x = gaussian_matrix(5, d, derive_seed(seed, 99))?;
        let group = LayerGroup {
            group_id: "g".into(),
            anchor: "q".into(),
            consumers: vec!["k".into(), "v".into()],
            solo: false,
        };
        let out = cached_forward(&x, &group, &weights, &f, true, &mut CostLedger::default())?;
        let modules: Vec<LayerwiseModule<'_>> = f
            .a_blocks
            .iter()
            .map(|(id, a)| LayerwiseModule { id, w_q: &weights[id], a, b: &f.b_shared })
            .collect();
        for (id, y) in layerwise_forward(&x, &modules, true, &mut CostLedger::default())? {
            worst = worst.max(out.output(&id).map_or(f64::INFINITY, |c| c.max_abs_diff(&y)));
        }
    }
    Ok(SuiteResult::at_most(name, worst, 1e-12, "cached vs layerwise outputs, shared factors"))
}

fn cost_ratios(cfg: &PipelineConfig) -> Vec<SuiteResult> {
    let m = &cfg.model;
    let (r, t) = (cfg.solve.rank, cfg.sweep.tokens);
    let ratio = |outs: &[usize]| {
        let shared = planned_cost(outs, m.hidden, r, t, CorrectionMode::Shared, true).flops_right_proj;
        let layer = planned_cost(outs, m.hidden, r, t, CorrectionMode::Layerwise, true).flops_right_proj;
        (shared, layer)
    };
    let (qs, ql) = ratio(&[m.hidden, m.kv_dim, m.kv_dim]);
    let (ms, ml) = ratio(&[m.ffn, m.ffn]);
    let flop_dev = ((3 * qs) as f64 - ql as f64).abs() + ((2 * ms) as f64 - ml as f64).abs();
    let shared = param_count(&[m.hidden; 3], m.hidden, r, CorrectionMode::Shared);
    let layer = param_count(&[m.hidden; 3], m.hidden, r, CorrectionMode::Layerwise);
    let param_dev = ((3 * shared) as f64 - (2 * layer) as f64).abs();
    vec![
        SuiteResult::at_most("right_projection_flop_ratio", flop_dev, 0.0, format!("qkv {qs}:{ql}, gate/up {ms}:{ml}")),
        SuiteResult::at_most("shared_param_ratio", param_dev, 0.0, format!("equal-O qkv {shared}:{layer}")),
    ]
}

fn shrinkage_trace(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "shrinkage_trace";
    let mut worst = 0.0f64;
    for i in 0..cfg.verify.instances.min(10) {
        let g = gaussian_matrix(12, 7, seed_for(cfg, name, i))?;
        let sample = g.t_matmul(&g).scale(1.0 / 12.0).symmetrize();
        for alpha in [0.0, 0.02, 0.05, 1.0] {
            let opts = ShrinkageOptions { shrink_alpha: alpha, ridge_eps: Some(0.0), ..ShrinkageOptions::default() };
            let est = shrink(&sample, &opts, 12)?;
            worst = worst.max(rel(est.sigma.trace(), sample.trace()));
            if alpha == 0.0 {
                worst = worst.max(est.sigma.max_abs_diff(&sample));
            }
        }
    }
    Ok(SuiteResult::at_most(name, worst, 1e-9, "trace under α ∈ {0, 0.02, 0.05, 1}; α = 0 exact"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_bruteforce(cfg: &PipelineConfig) -> Result<SuiteResult> {
    let name = "hungarian_bruteforce";
    let mut worst = 0.0f64;
    for i in 0..cfg.verify.instances {
        let n = 1 + i % 6;
        let c = gaussian_matrix(n, n, seed_for(cfg, name, i))?;
        let value = |p: &[usize]| p.iter().enumerate().map(|(row, &col)| c[(row, col)]).sum::<f64>();
        let best = permutations(n).iter().map(|p| value(p)).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(best - value(&hungarian(&c)?));
    }
    Ok(SuiteResult::at_most(name, worst, 1e-12, "optimal value minus assignment value"))
}

/// Factor files under `dir` against the run they came from (`dir/..`).
fn factor_suites(cfg: &PipelineConfig, dir: &Path) -> Vec<SuiteResult> {
    let (read, consistency) = ("factor_files_readable", "factor_residual_consistency");
    let layout = RunLayout::new(dir.parent().unwrap_or(Path::new(".")));
    let problem = match load_problem(cfg, &layout) {
        Ok(p) => p,
        Err(e) => return vec![SuiteResult::failed(read, format!("cannot load run: {e}"))],
    };
    let mut loaded = Vec::new();
    for unit in &problem.units {
        match load_factors(&dir.join(unit.id())) {
            Ok(f) => loaded.push((unit, f)),
            Err(e) => return vec![SuiteResult::failed(read, format!("{}: {e}", unit.id()))],
        }
    }
    let mut worst = 0.0f64;
    let mut worst_unit = String::new();
    for (unit, (factors, manifest)) in &loaded {
        let dev = problem
            .stacked(unit)
            .ok()
            .and_then(|se| weighted_residual(&se, problem.cov_sqrt(unit), factors).ok())
            .map_or(f64::INFINITY, |r| rel(r, manifest.residual_weighted));
        if dev > worst || dev.is_nan() {
            worst = if dev.is_nan() { f64::INFINITY } else { dev };
            worst_unit = unit.id().to_string();
        }
    }
    vec![
        SuiteResult::at_most(read, 0.0, 0.0, format!("{} units", loaded.len())),
        SuiteResult::at_most(consistency, worst, 1e-9, format!("worst unit {worst_unit}")),
    ]
}

pub fn run_suites(cfg: &PipelineConfig, factors: Option<&Path>) -> Result<VerifyReport> {
    let mut suites = vec![eym_optimality(cfg)?, bridge_algebraic(cfg)?, bridge_monte_carlo(cfg)?];
    let (core, sv) = core_equivalence(cfg)?;
    suites.extend([core, sv, rsvd_expectation_bound(cfg)?]);
    let (mono, parity) = power_iterations(cfg)?;
    suites.extend([mono, parity]);
    suites.extend(balanced_and_lifted(cfg)?);
    suites.push(cache_equivalence(cfg)?);
    suites.extend(cost_ratios(cfg));
    suites.push(shrinkage_trace(cfg)?);
    suites.push(hungarian_bruteforce(cfg)?);
    if let Some(dir) = factors {
        suites.extend(factor_suites(cfg, dir));
    }
    Ok(VerifyReport { manifest: RunManifest::new(cfg), passed: suites.iter().all(|s| s.passed), suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_enumerate_all() {
        assert_eq!(permutations(4).len(), 24);
        let mut p = permutations(3);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn at_most_compares_inclusively() {
        assert!(SuiteResult::at_most("x", 1.0, 1.0, "").passed);
        assert!(!SuiteResult::at_most("x", f64::NAN, 1.0, "").passed);
        assert!(!SuiteResult::failed("x", "").passed);
    }

    #[test]
    fn gapped_stack_has_the_requested_whitened_head() {
        let cov = random_cov(10, 0, 1).unwrap();
        let se = gapped_stack(2, 6, 10, &[5.0, 3.0], 1e-2, &cov, 2).unwrap();
        let w = se.concat().matmul(&psd_roots(&cov.sigma, None).unwrap().sqrt);
        let s = svd(&w).unwrap().sigma;
        assert!((s[0] - 5.0).abs() < 1e-9 && (s[1] - 3.0).abs() < 1e-9);
        assert!(s[2] <= 1e-2 + 1e-12);
    }
}
