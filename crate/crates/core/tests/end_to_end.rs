use std::collections::BTreeMap;

use glowq::calib::{sample_inputs, synth_covariance, CovarianceAccumulator, ShrinkageOptions, SpectrumModel};
use glowq::linalg::{gaussian_matrix, psd_roots};
use glowq::quant::{dequantize, error_matrix, quantize, QuantConfig};
use glowq::runtime::{cached_forward, plan_groups, planned_cost, CorrectionMode, CostLedger, ModuleKind, ModuleSpec};
use glowq::select::{restoration_sweep, Metric, UnitEvaluation};
use glowq::solver::{
    layerwise_solve, load_factors, qr_reduced_rsvd, save_factors, solve_whitened_exact, SolveConfig, StackedError,
};
use glowq::Matrix;

const D: usize = 48;

fn specs() -> Vec<ModuleSpec> {
    [(ModuleKind::Q, 48), (ModuleKind::K, 16), (ModuleKind::V, 16)]
        .into_iter()
        .map(|(kind, out_dim)| ModuleSpec { id: format!("L0.{kind}"), kind, layer: 0, in_dim: D, out_dim })
        .collect()
}

struct Fixture {
    weights: BTreeMap<String, Matrix>,
    dequantized: BTreeMap<String, Matrix>,
    stack: StackedError,
    sigma: Matrix,
}

fn fixture() -> Fixture {
    let qc = QuantConfig::new(3, 16).unwrap();
    let mut weights = BTreeMap::new();
    let mut dequantized = BTreeMap::new();
    let mut blocks = Vec::new();
    for (k, spec) in specs().iter().enumerate() {
        let w = gaussian_matrix(spec.out_dim, D, 100 + k as u64).unwrap().scale(1.0 / (D as f64).sqrt());
        let q = quantize(&w, &qc).unwrap();
        blocks.push((spec.id.clone(), error_matrix(&w, &q).unwrap()));
        dequantized.insert(spec.id.clone(), dequantize(&q));
        weights.insert(spec.id.clone(), w);
    }
    let sigma = synth_covariance(&SpectrumModel::new(D, 1.19, 1.0).unwrap(), 7).unwrap();
    Fixture { weights, dequantized, stack: StackedError::stack(blocks).unwrap(), sigma }
}

#[test]
fn calibrated_correction_reduces_output_error() {
    let fx = fixture();
    let x = sample_inputs(&fx.sigma, 4096, 1).unwrap();
    let mut acc = CovarianceAccumulator::new(D).unwrap();
    for start in (0..4096).step_by(512) {
        acc.accumulate(&x.row_block(start, start + 512)).unwrap();
    }
    let est = acc.finalize(&ShrinkageOptions::default()).unwrap();
    assert_eq!(est.sample_count, 4096);

    let cfg = SolveConfig { rank: 8, oversampling: 8, power_iters: 2, whiten: true, seed: 3, rank_tol: None };
    let (factors, _) = qr_reduced_rsvd(&fx.stack, &est, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_factors(dir.path(), "L0.attn", &factors, Some(cfg)).unwrap();
    let (loaded, manifest) = load_factors(dir.path()).unwrap();
    assert_eq!(loaded, factors);
    assert_eq!(manifest.config, Some(cfg));

    let groups = plan_groups(&specs()).unwrap();
    assert_eq!(groups.len(), 1);
    let fresh = sample_inputs(&fx.sigma, 64, 2).unwrap();
    let mut ledger = CostLedger::default();
    let out = cached_forward(&fresh, &groups[0], &fx.dequantized, &loaded, true, &mut ledger).unwrap();
    let outs: Vec<usize> = specs().iter().map(|s| s.out_dim).collect();
    assert_eq!(ledger, planned_cost(&outs, D, 8, 64, CorrectionMode::Shared, true));

    for spec in specs() {
        let exact = fresh.matmul_t(&fx.weights[&spec.id]);
        let plain = fresh.matmul_t(&fx.dequantized[&spec.id]);
        let corrected = out.output(&spec.id).unwrap();
        let before = exact.sub(&plain).frobenius_norm();
        let after = exact.sub(corrected).frobenius_norm();
        assert!(after < 0.9 * before, "{}: {after} vs {before}", spec.id);
    }
}

#[test]
fn layerwise_baseline_fits_at_least_as_well_with_more_parameters() {
    let fx = fixture();
    let cov = glowq::calib::CovarianceEstimate::exact(fx.sigma.clone()).unwrap();
    let shared = solve_whitened_exact(&fx.stack, &cov, 8, None).unwrap();
    let layer = layerwise_solve(&fx.stack, Some(&cov), 8, None).unwrap();
    let layer_sq: f64 = layer.iter().map(|l| l.residual_weighted.powi(2)).sum();
    assert!(layer_sq <= shared.residual_weighted.powi(2) * (1.0 + 1e-12));

    let sqrt = psd_roots(&fx.sigma, None).unwrap().sqrt;
    for l in &layer {
        let e = &fx.stack.blocks().iter().find(|b| b.module_id == l.module_id).unwrap().error;
        let direct = e.sub(&l.a.matmul(&l.b)).matmul(&sqrt).frobenius_norm();
        assert!((direct - l.residual_weighted).abs() <= 1e-10 * direct.max(1.0));
    }
    let shared_params = shared.a_stacked().as_slice().len() + shared.b_shared.as_slice().len();
    let layer_params: usize = layer.iter().map(|l| l.a.as_slice().len() + l.b.as_slice().len()).sum();
    assert!(shared_params < layer_params);
}

#[test]
fn sweep_endpoints_match_unit_totals() {
    let units: Vec<UnitEvaluation> = (0..6)
        .map(|i| {
            let unc = 10.0 + i as f64;
            UnitEvaluation {
                unit_id: format!("L{i}.attn"),
                layer: i,
                uncorrected_sq: unc,
                corrected_sq: unc * (0.2 + 0.1 * i as f64),
                energy_capture: 0.9 - 0.1 * i as f64,
                ner: 0.01 * (6 - i) as f64,
                frobenius: unc.sqrt(),
                cosine: 0.99 + 0.001 * i as f64,
                cost_active: planned_cost(&[64, 32, 32], 64, 8, 16, CorrectionMode::Shared, true),
                cost_inactive: planned_cost(&[64, 32, 32], 64, 8, 16, CorrectionMode::Shared, false),
            }
        })
        .collect();
    let fractions = [0.0, 0.5, 1.0];
    let corrected: f64 = units.iter().map(|u| u.corrected_sq).sum();
    let uncorrected: f64 = units.iter().map(|u| u.uncorrected_sq).sum();
    for metric in Metric::ALL {
        let points = restoration_sweep(&units, &fractions, metric).unwrap();
        assert!((points[0].weighted_residual_total - uncorrected).abs() < 1e-12);
        assert!((points[2].weighted_residual_total - corrected).abs() < 1e-12);
        assert_eq!(points[0].params_total, 0);
        assert!(points[1].flops_total < points[2].flops_total);
    }
}
