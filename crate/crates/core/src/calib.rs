//! Input statistics: second-moment accumulation, shrinkage + ridge,
//! synthetic power-law covariances and spectrum fitting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{psd_sqrt, random_orthogonal, GaussianStream, Matrix, RootMode};

/// Running `Σ xxᵀ`, `Σ x` and sample count for one input site.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    sum_outer: Matrix,
    sum: Vec<f64>,
    count: u64,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("covariance dimension must be positive"));
        }
        Ok(Self { dim, sum_outer: Matrix::zeros(dim, dim), sum: vec![0.0; dim], count: 0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::shape(format!(
                "batch has {} features, accumulator expects {}",
                batch.cols(),
                self.dim
            )));
        }
        self.accumulate_rows((0..batch.rows()).map(|i| batch.row(i)))
    }

    /// Feeds rows one at a time; an empty iterator leaves the state unchanged.
    pub fn accumulate_rows<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let d = self.dim;
        for x in rows {
            if x.len() != d {
                return Err(Error::shape(format!("row has {} features, expected {d}", x.len())));
            }
            for i in 0..d {
                if x[i] == 0.0 {
                    continue;
                }
                let row = self.sum_outer.row_mut(i);
                for j in i..d {
                    row[j] += x[i] * x[j];
                }
            }
            self.sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
            self.count += 1;
        }
        // mirror the upper triangle so the stored matrix stays exactly symmetric
        for i in 0..d {
            for j in (i + 1)..d {
                self.sum_outer[(j, i)] = self.sum_outer[(i, j)];
            }
        }
        Ok(())
    }

    /// Combines two shards of the same site.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape("cannot merge accumulators of different dimension"));
        }
        self.sum_outer = self.sum_outer.add(&other.sum_outer);
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }

    pub fn finalize(&self, opts: &ShrinkageOptions) -> Result<CovarianceEstimate> {
        if self.count == 0 {
            return Err(Error::invalid("cannot finalize a covariance with no samples"));
        }
        opts.validate()?;
        let n = self.count as f64;
        let mut sample = self.sum_outer.scale(1.0 / n);
        if opts.moment == MomentKind::Centered {
            let mu = self.mean().expect("count > 0");
            for i in 0..self.dim {
                for j in 0..self.dim {
                    sample[(i, j)] -= mu[i] * mu[j];
                }
            }
        }
        shrink(&sample, opts, self.count)
    }
}

/// Which second-order statistic the accumulator finalizes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    /// `(1/N) Σ xxᵀ`: the centered covariance plus `μμᵀ`, the matrix the
    /// expected output risk actually depends on.
    #[default]
    SecondMoment,
    /// `(1/N) Σ xxᵀ − μμᵀ`.
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageOptions {
    pub shrink_alpha: f64,
    /// Absolute ridge; `None` means `1e-6 · tr(Σ̂)/d`.
    pub ridge_eps: Option<f64>,
    #[serde(default)]
    pub moment: MomentKind,
}

impl Default for ShrinkageOptions {
    fn default() -> Self {
        Self { shrink_alpha: 0.02, ridge_eps: None, moment: MomentKind::SecondMoment }
    }
}

impl ShrinkageOptions {
    pub fn plain() -> Self {
        Self { shrink_alpha: 0.0, ridge_eps: Some(0.0), moment: MomentKind::SecondMoment }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shrink_alpha) {
            return Err(Error::invalid(format!("shrink_alpha {} outside [0, 1]", self.shrink_alpha)));
        }
        if let Some(eps) = self.ridge_eps {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::invalid(format!("ridge_eps {eps} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `(1−α)·Σ̂ + α·(tr Σ̂ / d)·I + ε·I`
pub fn shrink(sample: &Matrix, opts: &ShrinkageOptions, sample_count: u64) -> Result<CovarianceEstimate> {
    opts.validate()?;
    if !sample.is_square() {
        return Err(Error::shape("covariance must be square"));
    }
    let d = sample.rows();
    let mean_eig = sample.trace() / d as f64;
    let eps = opts.ridge_eps.unwrap_or(1e-6 * mean_eig.max(0.0));
    let alpha = opts.shrink_alpha;
    let mut sigma = sample.scale(1.0 - alpha);
    for i in 0..d {
        sigma[(i, i)] += alpha * mean_eig + eps;
    }
    Ok(CovarianceEstimate { sigma, shrink_alpha: alpha, ridge_eps: eps, sample_count })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: Matrix,
    pub shrink_alpha: f64,
    pub ridge_eps: f64,
    /// 0 for analytic (synthetic) covariances.
    pub sample_count: u64,
}

#[derive(Serialize, Deserialize)]
struct CovarianceSidecar {
    dim: usize,
    shrink_alpha: f64,
    ridge_eps: f64,
    sample_count: u64,
}

impl CovarianceEstimate {
    /// Wraps an exact covariance.
    pub fn exact(sigma: Matrix) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::shape("covariance must be square"));
        }
        Ok(Self { sigma, shrink_alpha: 0.0, ridge_eps: 0.0, sample_count: 0 })
    }

    pub fn identity(d: usize) -> Self {
        Self { sigma: Matrix::identity(d), shrink_alpha: 0.0, ridge_eps: 0.0, sample_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    /// Writes `<stem>.glxm` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        io::write_matrix(&io::with_suffix(stem, ".glxm"), &self.sigma)?;
        io::write_json(
            &io::with_suffix(stem, ".json"),
            &CovarianceSidecar {
                dim: self.dim(),
                shrink_alpha: self.shrink_alpha,
                ridge_eps: self.ridge_eps,
                sample_count: self.sample_count,
            },
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side: CovarianceSidecar = io::read_json(&io::with_suffix(stem, ".json"))?;
        let sigma = io::read_matrix(&io::with_suffix(stem, ".glxm"))?;
        if sigma.shape() != (side.dim, side.dim) {
            return Err(Error::Format(format!(
                "covariance is {:?}, sidecar says {}",
                sigma.shape(),
                side.dim
            )));
        }
        Ok(Self {
            sigma,
            shrink_alpha: side.shrink_alpha,
            ridge_eps: side.ridge_eps,
            sample_count: side.sample_count,
        })
    }
}

/// Power-law eigenvalue profile `λ_r = scale · r^(−exponent)`, r = 1..=dim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub dim: usize,
    pub exponent: f64,
    pub scale: f64,
}

impl SpectrumModel {
    pub fn new(dim: usize, exponent: f64, scale: f64) -> Result<Self> {
        let m = Self { dim, exponent, scale };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("spectrum dimension must be positive"));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::invalid(format!("spectrum exponent {} must be > 0", self.exponent)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("spectrum scale {} must be > 0", self.scale)));
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.dim).map(|r| self.scale * (r as f64).powf(-self.exponent)).collect()
    }
}

/// `Q · diag(λ) · Qᵀ` with `Q` a seeded random orthogonal matrix.
pub fn synth_covariance(model: &SpectrumModel, seed: u64) -> Result<Matrix> {
    model.validate()?;
    let q = random_orthogonal(model.dim, seed)?;
    Ok(q.scale_columns(&model.eigenvalues()).matmul_t(&q).symmetrize())
}

/// `n` rows `Σ^{1/2} z`, `z ~ N(0, I)`.
pub fn sample_inputs(cov: &Matrix, n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let root = psd_sqrt(cov, RootMode::Sqrt, None)?;
    let d = cov.rows();
    let mut stream = GaussianStream::new(seed);
    let z = Matrix::from_fn(n, d, |_, _| stream.next_normal());
    // root is symmetric, so rows of Z·root are (root·z)ᵀ
    Ok(z.matmul(&root))
}

/// 1-based inclusive rank interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRange {
    pub first: usize,
    pub last: usize,
}

impl RankRange {
    pub fn full(d: usize) -> Self {
        Self { first: 1, last: d }
    }

    /// `[d/8, d/2]`, widened to at least two points.
    pub fn default_tail(d: usize) -> Self {
        let first = (d / 8).max(1);
        let last = (d / 2).max(first + 1).min(d.max(2));
        Self { first, last }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub r2: f64,
}

/// Least-squares line through `(log₁₀ r, log₁₀ λ_r)`; `alpha = −slope`.
pub fn fit_power_law(eigenvalues: &[f64], range: Option<RankRange>) -> Result<PowerLawFit> {
    let range = range.unwrap_or_else(|| RankRange::default_tail(eigenvalues.len()));
    if range.first == 0 || range.last > eigenvalues.len() || range.last < range.first + 1 {
        return Err(Error::invalid(format!(
            "fit range {}..={} needs at least two ranks within 1..={}",
            range.first,
            range.last,
            eigenvalues.len()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in range.first..=range.last {
        let l = eigenvalues[r - 1];
        if !(l > 0.0) {
            return Err(Error::invalid(format!("eigenvalue {l} at rank {r} is not positive")));
        }
        xs.push((r as f64).log10());
        ys.push(l.log10());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(PowerLawFit { alpha: -slope, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, sym_eig};

    fn accumulate(x: &Matrix) -> CovarianceAccumulator {
        let mut acc = CovarianceAccumulator::new(x.cols()).unwrap();
        acc.accumulate(x).unwrap();
        acc
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut acc = accumulate(&gaussian_matrix(3, 4, 1).unwrap());
        let before = acc.sum_outer().clone();
        acc.accumulate_rows(std::iter::empty()).unwrap();
        assert_eq!(acc.sum_outer(), &before);
        assert_eq!(acc.count(), 3);
    }

    #[test]
    fn single_sample_is_outer_product() {
        let x = Matrix::new(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let acc = accumulate(&x);
        assert_eq!(acc.sum_outer(), &x.t_matmul(&x));
    }

    #[test]
    fn batches_concatenate() {
        let a = gaussian_matrix(5, 4, 2).unwrap();
        let b = gaussian_matrix(7, 4, 3).unwrap();
        let mut split = accumulate(&a);
        split.accumulate(&b).unwrap();
        let joined = accumulate(&Matrix::vstack(&[&a, &b]).unwrap());
        assert!(split.sum_outer().max_abs_diff(joined.sum_outer()) < 1e-10);
        assert_eq!(split.count(), 12);
        let mut merged = accumulate(&a);
        merged.merge(&accumulate(&b)).unwrap();
        assert!(merged.sum_outer().max_abs_diff(joined.sum_outer()) < 1e-10);
    }

    #[test]
    fn dim_mismatch_and_empty_finalize() {
        let mut acc = CovarianceAccumulator::new(3).unwrap();
        assert!(acc.accumulate(&Matrix::zeros(2, 4)).is_err());
        assert!(acc.finalize(&ShrinkageOptions::default()).is_err());
    }

    #[test]
    fn shrinkage_extremes() {
        let acc = accumulate(&gaussian_matrix(20, 4, 5).unwrap());
        let sample = acc.sum_outer().scale(1.0 / 20.0);
        let plain = acc.finalize(&ShrinkageOptions::plain()).unwrap();
        assert_eq!(plain.sigma, sample);
        let full = acc
            .finalize(&ShrinkageOptions { shrink_alpha: 1.0, ridge_eps: Some(0.0), ..Default::default() })
            .unwrap();
        let iso = Matrix::identity(4).scale(sample.trace() / 4.0);
        assert!(full.sigma.max_abs_diff(&iso) < 1e-15);
    }

    #[test]
    fn shrinkage_preserves_trace_and_adds_ridge() {
        let acc = accumulate(&gaussian_matrix(30, 6, 7).unwrap());
        let sample_trace = acc.sum_outer().trace() / 30.0;
        for alpha in [0.0, 0.02, 0.05, 1.0] {
            let est = acc
                .finalize(&ShrinkageOptions { shrink_alpha: alpha, ridge_eps: Some(0.0), ..Default::default() })
                .unwrap();
            assert!((est.sigma.trace() - sample_trace).abs() <= 1e-9 * sample_trace);
            let ridged = acc
                .finalize(&ShrinkageOptions { shrink_alpha: alpha, ridge_eps: Some(0.1), ..Default::default() })
                .unwrap();
            assert!((ridged.sigma.trace() - sample_trace - 0.6).abs() <= 1e-9 * sample_trace);
            let min_eig = *sym_eig(&ridged.sigma).unwrap().values.last().unwrap();
            assert!(min_eig >= 0.1 - 1e-9);
        }
    }

    #[test]
    fn default_ridge_is_relative() {
        let acc = accumulate(&gaussian_matrix(10, 3, 8).unwrap());
        let est = acc.finalize(&ShrinkageOptions::default()).unwrap();
        let mean_eig = acc.sum_outer().trace() / 10.0 / 3.0;
        assert!((est.ridge_eps - 1e-6 * mean_eig).abs() < 1e-18);
        assert_eq!(est.shrink_alpha, 0.02);
    }

    #[test]
    fn centered_moment_subtracts_mean() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        let acc = accumulate(&x);
        let raw = acc.finalize(&ShrinkageOptions::plain()).unwrap().sigma;
        let centered = acc
            .finalize(&ShrinkageOptions { moment: MomentKind::Centered, ..ShrinkageOptions::plain() })
            .unwrap()
            .sigma;
        // mean (2, 2); centered rows (-1, 0), (1, 0)
        assert!(centered.max_abs_diff(&Matrix::from_diag(&[1.0, 0.0])) < 1e-15);
        assert!(raw.sub(&centered).max_abs_diff(&Matrix::new(2, 2, vec![4.0; 4]).unwrap()) < 1e-15);
    }

    #[test]
    fn synthetic_spectrum_is_recovered() {
        let model = SpectrumModel::new(4, 0.9, 2.0).unwrap();
        let sigma = synth_covariance(&model, 3).unwrap();
        let eig = sym_eig(&sigma).unwrap();
        for (got, want) in eig.values.iter().zip(model.eigenvalues()) {
            assert!((got - want).abs() <= 1e-8 * want);
        }
    }

    #[test]
    fn power_law_fits() {
        let exact: Vec<f64> = (1..=32).map(|r| (r as f64).powf(-0.77)).collect();
        let fit = fit_power_law(&exact, Some(RankRange::full(32))).unwrap();
        assert!((fit.alpha - 0.77).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let flat = vec![3.0; 16];
        let fit = fit_power_law(&flat, None).unwrap();
        assert!(fit.alpha.abs() < 1e-12);
    }

    #[test]
    fn power_law_errors() {
        assert!(fit_power_law(&[1.0], Some(RankRange::full(1))).is_err());
        assert!(fit_power_law(&[1.0, 0.0, 0.5], Some(RankRange::full(3))).is_err());
    }

    #[test]
    fn fit_recovers_synthetic_exponent() {
        for alpha in [1.19, 0.77] {
            let model = SpectrumModel::new(64, alpha, 1.0).unwrap();
            let eig = sym_eig(&synth_covariance(&model, 11).unwrap()).unwrap();
            let fit = fit_power_law(&eig.values, Some(RankRange::full(64))).unwrap();
            assert!((fit.alpha - alpha).abs() < 1e-6, "{alpha}: {}", fit.alpha);
        }
    }

    #[test]
    fn sampled_identity_covariance_converges() {
        let x = sample_inputs(&Matrix::identity(4), 100_000, 5).unwrap();
        let est = accumulate(&x).finalize(&ShrinkageOptions::plain()).unwrap();
        let rel = est.sigma.sub(&Matrix::identity(4)).frobenius_norm() / 2.0;
        assert!(rel < 0.05, "{rel}");
        assert!(sample_inputs(&Matrix::identity(2), 0, 1).is_err());
        assert_eq!(sample_inputs(&Matrix::identity(2), 3, 9).unwrap(), sample_inputs(&Matrix::identity(2), 3, 9).unwrap());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let acc = accumulate(&gaussian_matrix(8, 3, 1).unwrap());
        let est = acc.finalize(&ShrinkageOptions::default()).unwrap();
        let stem = dir.path().join("attn_in");
        est.save(&stem).unwrap();
        assert_eq!(CovarianceEstimate::load(&stem).unwrap(), est);
    }
}
