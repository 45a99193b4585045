//! Selective restore: saliency scores, budgeted top-k plans and
//! restoration sweeps.
//!
//! A unit is a group or a solo module. Sweep residuals are totals of squared
//! whitened Frobenius energies: restored units contribute their corrected
//! residual, the rest their uncorrected error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::runtime::CostLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EnergyCapture,
    Ner,
    Frobenius,
    Cosine,
    LayerOrder,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Self::EnergyCapture, Self::Ner, Self::Frobenius, Self::Cosine, Self::LayerOrder];

    /// Short CLI name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EnergyCapture => "ec",
            Self::Ner => "ner",
            Self::Frobenius => "fro",
            Self::Cosine => "cos",
            Self::LayerOrder => "order",
        }
    }

    /// Larger is restored first. Cosine ranks by `1 − cos`; layer order
    /// restores low layer indices first.
    pub fn priority(self, value: f64) -> f64 {
        match self {
            Self::EnergyCapture | Self::Ner | Self::Frobenius => value,
            Self::Cosine => 1.0 - value,
            Self::LayerOrder => -value,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ec" | "energy_capture" => Ok(Self::EnergyCapture),
            "ner" => Ok(Self::Ner),
            "fro" | "frobenius" => Ok(Self::Frobenius),
            "cos" | "cosine" => Ok(Self::Cosine),
            "order" | "layer_order" => Ok(Self::LayerOrder),
            _ => Err(Error::invalid(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub unit_id: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorePlan {
    /// In restore-priority order.
    pub active_units: Vec<String>,
    pub budget_fraction: f64,
    pub metric_used: Metric,
}

impl RestorePlan {
    pub fn is_active(&self, unit_id: &str) -> bool {
        self.active_units.iter().any(|u| u == unit_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub weighted_residual_total: f64,
    pub flops_total: u64,
    pub params_total: u64,
}

/// `Σ_{j≤r} σ_j² / ‖M‖_F²`; 0 for the zero matrix.
pub fn score_energy_capture(core_m: &Matrix, r: usize) -> Result<f64> {
    let k = core_m.rows().min(core_m.cols());
    if r > k {
        return Err(Error::invalid(format!("rank {r} exceeds min dimension {k}")));
    }
    let total = core_m.frobenius_norm_sq();
    if total == 0.0 {
        return Ok(0.0);
    }
    let s = svd(core_m)?;
    let head: f64 = s.sigma.iter().take(r).map(|x| x * x).sum();
    Ok((head / total).clamp(0.0, 1.0))
}

/// `‖E‖_F² / ‖W‖_F²`
pub fn score_ner(e: &Matrix, w: &Matrix) -> Result<f64> {
    if e.shape() != w.shape() {
        return Err(Error::shape(format!("error {:?} vs weight {:?}", e.shape(), w.shape())));
    }
    let wn = w.frobenius_norm_sq();
    if wn == 0.0 {
        return Err(Error::invalid("normalized error ratio of a zero weight"));
    }
    Ok(e.frobenius_norm_sq() / wn)
}

pub fn score_frobenius(e: &Matrix) -> f64 {
    e.frobenius_norm()
}

/// Cosine similarity of the flattened weights.
pub fn score_cosine(w: &Matrix, w_q: &Matrix) -> Result<f64> {
    if w.shape() != w_q.shape() {
        return Err(Error::shape(format!("weights {:?} vs {:?}", w.shape(), w_q.shape())));
    }
    let (a, b) = (w.frobenius_norm(), w_q.frobenius_norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::invalid("cosine similarity with a zero matrix"));
    }
    let dot: f64 = w.as_slice().iter().zip(w_q.as_slice()).map(|(x, y)| x * y).sum();
    Ok((dot / (a * b)).clamp(-1.0, 1.0))
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("budget fraction {f} outside [0, 1]")));
    }
    Ok(())
}

/// Units sorted by restore priority (ties by `unit_id`), top
/// `round(fraction · n)` kept. Rounding is half away from zero.
pub fn select_topk(scores: &[UnitScore], budget_fraction: f64) -> Result<RestorePlan> {
    check_fraction(budget_fraction)?;
    let metric = scores.first().map(|s| s.metric).ok_or_else(|| Error::invalid("no scores to select from"))?;
    let mut order: Vec<&UnitScore> = scores.iter().collect();
    for s in &order {
        if s.metric != metric {
            return Err(Error::invalid("scores mix metrics"));
        }
        if !s.value.is_finite() {
            return Err(Error::invalid(format!("score of {} is not finite", s.unit_id)));
        }
    }
    order.sort_by(|a, b| {
        metric
            .priority(b.value)
            .total_cmp(&metric.priority(a.value))
            .then_with(|| a.unit_id.cmp(&b.unit_id))
    });
    if has_duplicates(&order) {
        return Err(Error::invalid("one score per unit expected"));
    }
    let k = (budget_fraction * order.len() as f64).round() as usize;
    Ok(RestorePlan {
        active_units: order[..k].iter().map(|s| s.unit_id.clone()).collect(),
        budget_fraction,
        metric_used: metric,
    })
}

fn has_duplicates(order: &[&UnitScore]) -> bool {
    let mut ids: Vec<&str> = order.iter().map(|s| s.unit_id.as_str()).collect();
    ids.sort_unstable();
    ids.windows(2).any(|w| w[0] == w[1])
}

/// Everything a sweep needs about one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEvaluation {
    pub unit_id: String,
    pub layer: usize,
    /// `‖E_u Σ^{1/2}‖_F²`
    pub uncorrected_sq: f64,
    /// `‖(E_u − A_u B_u) Σ^{1/2}‖_F²`
    pub corrected_sq: f64,
    pub energy_capture: f64,
    pub ner: f64,
    pub frobenius: f64,
    pub cosine: f64,
    pub cost_active: CostLedger,
    pub cost_inactive: CostLedger,
}

impl UnitEvaluation {
    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::EnergyCapture => self.energy_capture,
            Metric::Ner => self.ner,
            Metric::Frobenius => self.frobenius,
            Metric::Cosine => self.cosine,
            Metric::LayerOrder => self.layer as f64,
        }
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.uncorrected_sq, self.corrected_sq, self.energy_capture, self.ner, self.frobenius, self.cosine];
        if vals.iter().any(|v| !v.is_finite()) || self.uncorrected_sq < 0.0 || self.corrected_sq < 0.0 {
            return Err(Error::invalid(format!("unit {} has invalid evaluation values", self.unit_id)));
        }
        Ok(())
    }
}

pub fn unit_scores(units: &[UnitEvaluation], metric: Metric) -> Vec<UnitScore> {
    units
        .iter()
        .map(|u| UnitScore { unit_id: u.unit_id.clone(), metric, value: u.score(metric) })
        .collect()
}

/// Residual and cost totals at each budget fraction.
pub fn restoration_sweep(units: &[UnitEvaluation], fractions: &[f64], metric: Metric) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::invalid("sweep needs at least one fraction"));
    }
    for f in fractions {
        check_fraction(*f)?;
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sweep fractions must be strictly increasing"));
    }
    for u in units {
        u.validate()?;
    }
    let scores = unit_scores(units, metric);
    fractions
        .iter()
        .map(|&fraction| {
            let plan = select_topk(&scores, fraction)?;
            let mut residual = 0.0;
            let mut cost = CostLedger::default();
            for u in units {
                if plan.is_active(&u.unit_id) {
                    residual += u.corrected_sq;
                    cost += u.cost_active;
                } else {
                    residual += u.uncorrected_sq;
                    cost += u.cost_inactive;
                }
            }
            Ok(SweepPoint {
                fraction,
                weighted_residual_total: residual,
                flops_total: cost.total_flops(),
                params_total: cost.params_lowrank,
            })
        })
        .collect()
}

/// Sweeps for several metrics over the same units, in the given order.
pub fn compare_sweeps(
    units: &[UnitEvaluation],
    fractions: &[f64],
    metrics: &[Metric],
) -> Result<Vec<(Metric, Vec<SweepPoint>)>> {
    metrics.iter().map(|&m| Ok((m, restoration_sweep(units, fractions, m)?))).collect()
}

/// Trapezoidal area under residual-vs-fraction.
pub fn sweep_auc(points: &[SweepPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fraction - w[0].fraction) * (w[0].weighted_residual_total + w[1].weighted_residual_total) / 2.0)
        .sum()
}

/// Index of the largest discrete second derivative of residual vs fraction,
/// a max-curvature heuristic for the operating point. `None` with fewer
/// than three points.
pub fn elbow_index(points: &[SweepPoint]) -> Option<usize> {
    if points.len() < 3 {
        return None;
    }
    let curvature = |i: usize| {
        let (f0, f1, f2) = (points[i - 1].fraction, points[i].fraction, points[i + 1].fraction);
        let (r0, r1, r2) = (
            points[i - 1].weighted_residual_total,
            points[i].weighted_residual_total,
            points[i + 1].weighted_residual_total,
        );
        2.0 * ((r2 - r1) / (f2 - f1) - (r1 - r0) / (f1 - f0)) / (f2 - f0)
    };
    (1..points.len() - 1).max_by(|&a, &b| curvature(a).total_cmp(&curvature(b)).then(b.cmp(&a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::oracle;
    use crate::quant::{error_matrix, quantize, QuantConfig};
    use proptest::prelude::*;

    fn score(id: &str, v: f64, metric: Metric) -> UnitScore {
        UnitScore { unit_id: id.into(), metric, value: v }
    }

    fn unit(id: &str, layer: usize, unc: f64, cor: f64, ec: f64) -> UnitEvaluation {
        UnitEvaluation {
            unit_id: id.into(),
            layer,
            uncorrected_sq: unc,
            corrected_sq: cor,
            energy_capture: ec,
            ner: unc / 10.0,
            frobenius: unc.sqrt(),
            cosine: 1.0 - unc / 100.0,
            cost_active: CostLedger { flops_right_proj: 10, flops_left_apply: 5, params_lowrank: 7, ..Default::default() },
            cost_inactive: CostLedger::default(),
        }
    }

    #[test]
    fn energy_capture_values() {
        let low = gaussian_matrix(8, 2, 1).unwrap().matmul(&gaussian_matrix(2, 6, 2).unwrap());
        assert!((score_energy_capture(&low, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!((score_energy_capture(&Matrix::identity(6), 2).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(score_energy_capture(&Matrix::zeros(3, 3), 1).unwrap(), 0.0);
        assert!(score_energy_capture(&Matrix::identity(3), 4).is_err());
        let m = gaussian_matrix(9, 7, 3).unwrap();
        let s = oracle::singular_values(&m);
        let expect = 1.0 - s[3..].iter().map(|x| x * x).sum::<f64>() / m.frobenius_norm_sq();
        assert!((score_energy_capture(&m, 3).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ner_values() {
        let w = gaussian_matrix(4, 6, 1).unwrap();
        assert_eq!(score_ner(&Matrix::zeros(4, 6), &w).unwrap(), 0.0);
        assert!((score_ner(&w, &w).unwrap() - 1.0).abs() < 1e-15);
        assert!(score_ner(&w, &Matrix::zeros(4, 6)).is_err());
        for seed in 0..50 {
            let w = gaussian_matrix(6, 32, seed).unwrap();
            let ner = |bits| {
                let q = quantize(&w, &QuantConfig::new(bits, 16).unwrap()).unwrap();
                score_ner(&error_matrix(&w, &q).unwrap(), &w).unwrap()
            };
            assert!(ner(2) >= ner(4));
        }
    }

    #[test]
    fn frobenius_and_cosine() {
        assert_eq!(score_frobenius(&Matrix::zeros(2, 2)), 0.0);
        let e = gaussian_matrix(3, 4, 2).unwrap();
        let direct = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((score_frobenius(&e) - direct).abs() < 1e-14);
        assert!((score_frobenius(&e.scale(-3.0)) - 3.0 * direct).abs() < 1e-12);
        assert!((score_cosine(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!((score_cosine(&e, &e.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let f = gaussian_matrix(3, 4, 3).unwrap();
        let na = oracle::to_na(&e);
        let nb = oracle::to_na(&f);
        let expect = na.dot(&nb) / (na.norm() * nb.norm());
        assert!((score_cosine(&e, &f).unwrap() - expect).abs() < 1e-12);
        assert!(score_cosine(&e, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn topk_edges_and_ties() {
        let m = Metric::EnergyCapture;
        let scores = vec![score("d", 0.1, m), score("c", 0.7, m), score("b", 0.7, m), score("a", 0.9, m)];
        assert!(select_topk(&scores, 0.0).unwrap().active_units.is_empty());
        assert_eq!(select_topk(&scores, 1.0).unwrap().active_units.len(), 4);
        assert_eq!(select_topk(&scores, 0.5).unwrap().active_units, vec!["a", "b"]);
        assert!(select_topk(&scores, 1.5).is_err());
        assert!(select_topk(&[], 0.5).is_err());
        let dup = vec![score("a", 0.1, m), score("a", 0.2, m)];
        assert!(select_topk(&dup, 0.5).is_err());
    }

    #[test]
    fn priority_directions() {
        let cos = vec![score("a", 0.99, Metric::Cosine), score("b", 0.5, Metric::Cosine)];
        assert_eq!(select_topk(&cos, 0.5).unwrap().active_units, vec!["b"]);
        let order = vec![score("x", 3.0, Metric::LayerOrder), score("y", 0.0, Metric::LayerOrder)];
        assert_eq!(select_topk(&order, 0.5).unwrap().active_units, vec!["y"]);
        let ner = vec![score("a", 0.01, Metric::Ner), score("b", 0.2, Metric::Ner)];
        assert_eq!(select_topk(&ner, 0.5).unwrap().active_units, vec!["b"]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let m = Metric::Ner;
        let s: Vec<UnitScore> = (0..5).map(|i| score(&format!("u{i}"), i as f64, m)).collect();
        assert_eq!(select_topk(&s, 0.5).unwrap().active_units.len(), 3);
        assert_eq!(select_topk(&s, 0.3).unwrap().active_units.len(), 2);
    }

    #[test]
    fn sweep_is_monotone_and_exact_at_ends() {
        let units = vec![unit("a", 0, 4.0, 1.0, 0.9), unit("b", 1, 9.0, 0.0, 0.5), unit("c", 2, 1.0, 0.5, 0.2)];
        let fractions = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for m in Metric::ALL {
            let pts = restoration_sweep(&units, &fractions, m).unwrap();
            assert_eq!(pts[0].weighted_residual_total, 14.0);
            assert_eq!(pts[3].weighted_residual_total, 1.5);
            assert_eq!(pts[3].flops_total, 45);
            assert_eq!(pts[3].params_total, 21);
            assert!(pts.windows(2).all(|w| w[1].weighted_residual_total <= w[0].weighted_residual_total));
        }
        assert!(restoration_sweep(&units, &[0.5, 0.5], Metric::Ner).is_err());
        assert!(restoration_sweep(&units, &[], Metric::Ner).is_err());
    }

    #[test]
    fn auc_and_elbow() {
        let pt = |f: f64, r: f64| SweepPoint { fraction: f, weighted_residual_total: r, flops_total: 0, params_total: 0 };
        let pts = vec![pt(0.0, 10.0), pt(0.25, 2.0), pt(0.5, 1.5), pt(0.75, 1.2), pt(1.0, 1.0)];
        assert!((sweep_auc(&pts) - 0.25 * (6.0 + 1.75 + 1.35 + 1.1)).abs() < 1e-12);
        assert_eq!(elbow_index(&pts), Some(1));
        assert_eq!(elbow_index(&pts[..2]), None);
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("gsvd".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_scale_equivariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let errs: Vec<Matrix> = (0..6).map(|i| gaussian_matrix(5, 4, seed.wrapping_add(i)).unwrap()).collect();
            let weights: Vec<Matrix> = (0..6).map(|i| gaussian_matrix(5, 4, seed ^ (i + 100)).unwrap()).collect();
            for metric in [Metric::EnergyCapture, Metric::Ner, Metric::Frobenius] {
                let plan = |scale: f64| {
                    let scores: Vec<UnitScore> = errs.iter().zip(&weights).enumerate().map(|(i, (e, w))| {
                        let e = e.scale(scale);
                        let v = match metric {
                            Metric::EnergyCapture => score_energy_capture(&e, 2).unwrap(),
                            Metric::Ner => score_ner(&e, w).unwrap(),
                            _ => score_frobenius(&e),
                        };
                        score(&format!("u{i}"), v, metric)
                    }).collect();
                    select_topk(&scores, 1.0).unwrap().active_units
                };
                prop_assert_eq!(plan(1.0), plan(c));
            }
        }

        #[test]
        fn energy_capture_bounds(seed in any::<u64>(), r in 1usize..5) {
            let m = gaussian_matrix(6, 5, seed).unwrap();
            let g = score_energy_capture(&m, r).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(g < 1.0);
        }

        #[test]
        fn topk_is_deterministic(values in prop::collection::vec(0.0f64..1.0, 1..12), f in 0.0f64..=1.0) {
            let s: Vec<UnitScore> = values.iter().enumerate().map(|(i, &v)| score(&format!("u{i:02}"), v, Metric::Ner)).collect();
            let a = select_topk(&s, f).unwrap();
            let mut rev = s.clone();
            rev.reverse();
            prop_assert_eq!(a, select_topk(&rev, f).unwrap());
        }
    }
}
