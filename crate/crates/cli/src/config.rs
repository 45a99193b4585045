//! Pipeline configuration: one JSON document, schema version 1.

use std::path::{Path, PathBuf};

use glowq::calib::ShrinkageOptions;
use glowq::quant::QuantConfig;
use glowq::runtime::ModuleKind;
use glowq::select::Metric;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub covariance: CovarianceSource,
    pub solve: SolveSection,
    pub sweep: SweepSection,
    pub simulate: SimulateSection,
    pub analyze: AnalyzeSection,
    pub verify: VerifySection,
}

/// A decoder stack: every layer carries the listed module kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Output width of k and v.
    pub kv_dim: usize,
    pub ffn: usize,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<ModuleKind>,
    /// Input channels per site carrying activation and weight outliers.
    pub outlier_channels: usize,
    /// Per-layer outlier gain, drawn log-uniformly from `[lo, hi]`.
    pub outlier_gain: [f64; 2],
}

fn all_kinds() -> Vec<ModuleKind> {
    ModuleKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSource {
    /// Power-law covariances, estimated back from `calib_tokens` samples.
    Synthetic {
        attn_alpha: f64,
        mlp_alpha: f64,
        calib_tokens: usize,
        shrinkage: ShrinkageOptions,
    },
    /// `<dir>/<site>.glxm` holds a tokens × dim input matrix per site.
    File { dir: PathBuf, shrinkage: ShrinkageOptions },
}

impl CovarianceSource {
    pub fn shrinkage(&self) -> &ShrinkageOptions {
        match self {
            Self::Synthetic { shrinkage, .. } | Self::File { shrinkage, .. } => shrinkage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Exact,
    Rsvd,
}

impl std::str::FromStr for SolveMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "rsvd" => Ok(Self::Rsvd),
            _ => Err(CliError::config(format!("unknown solve mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub mode: SolveMode,
    pub whiten: bool,
    pub rank: usize,
    pub oversampling: usize,
    pub power_iters: usize,
    pub rank_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub metrics: Vec<Metric>,
    /// Token count the cost columns are priced at.
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub tokens: usize,
    pub selective_fraction: f64,
    pub selective_metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub ranks: Vec<usize>,
    pub alignment_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub instances: usize,
    pub mc_samples: usize,
    pub rsvd_trials: usize,
}

/// Command-line overrides, applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<SolveMode>,
    pub whiten: Option<bool>,
    pub metrics: Option<Vec<Metric>>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::config(msg)
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(mode) = o.mode {
            self.solve.mode = mode;
        }
        if let Some(whiten) = o.whiten {
            self.solve.whiten = whiten;
        }
        if let Some(metrics) = &o.metrics {
            self.sweep.metrics = metrics.clone();
        }
        self
    }

    /// Smallest `(rows, input_dim)` over correction units.
    fn unit_bounds(&self) -> (usize, usize) {
        let m = &self.model;
        let kinds = &m.kinds;
        let has = |k: ModuleKind| kinds.contains(&k);
        let mut rows = usize::MAX;
        let mut dims = usize::MAX;
        let mut unit = |r: usize, d: usize| {
            rows = rows.min(r);
            dims = dims.min(d);
        };
        let attn: usize = [ModuleKind::Q, ModuleKind::K, ModuleKind::V]
            .iter()
            .filter(|&&k| has(k))
            .map(|&k| if k == ModuleKind::Q { m.hidden } else { m.kv_dim })
            .sum();
        if attn > 0 {
            unit(attn, m.hidden);
        }
        if has(ModuleKind::O) {
            unit(m.hidden, m.hidden);
        }
        let mlp = [ModuleKind::Gate, ModuleKind::Up].iter().filter(|&&k| has(k)).count() * m.ffn;
        if mlp > 0 {
            unit(mlp, m.hidden);
        }
        if has(ModuleKind::Down) {
            unit(m.hidden, m.ffn);
        }
        (rows, dims)
    }

    /// Schema and cross-section consistency; touches no files.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(bad("output_dir is empty"));
        }
        let m = &self.model;
        if m.layers == 0 || m.hidden == 0 || m.kv_dim == 0 || m.ffn == 0 {
            return Err(bad("model dimensions must be positive"));
        }
        if m.kinds.is_empty() {
            return Err(bad("model.kinds is empty"));
        }
        let mut kinds = m.kinds.clone();
        kinds.sort_by_key(|k| k.as_str());
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("model.kinds has duplicates"));
        }
        if m.outlier_channels > m.hidden.min(m.ffn) {
            return Err(bad("outlier_channels exceeds a site dimension"));
        }
        let [lo, hi] = m.outlier_gain;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(bad(format!("outlier_gain [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
        }
        self.quant.validate().map_err(|e| bad(format!("quant: {e}")))?;
        match &self.covariance {
            CovarianceSource::Synthetic { attn_alpha, mlp_alpha, calib_tokens, shrinkage } => {
                for a in [attn_alpha, mlp_alpha] {
                    if !(*a > 0.0 && a.is_finite()) {
                        return Err(bad(format!("spectrum exponent {a} must be > 0")));
                    }
                }
                if *calib_tokens == 0 {
                    return Err(bad("calib_tokens must be positive"));
                }
                shrinkage.validate().map_err(|e| bad(format!("shrinkage: {e}")))?;
            }
            CovarianceSource::File { dir, shrinkage } => {
                if dir.as_os_str().is_empty() {
                    return Err(bad("covariance dir is empty"));
                }
                shrinkage.validate().map_err(|e| bad(format!("shrinkage: {e}")))?;
            }
        }
        let s = &self.solve;
        let (rows, dims) = self.unit_bounds();
        if s.rank == 0 || s.rank > rows.min(dims) {
            return Err(bad(format!("solve.rank {} outside 1..={}", s.rank, rows.min(dims))));
        }
        if s.mode == SolveMode::Rsvd && s.rank + s.oversampling > dims {
            return Err(bad(format!(
                "rank + oversampling = {} exceeds smallest input dim {dims}",
                s.rank + s.oversampling
            )));
        }
        if let Some(t) = s.rank_tol {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(bad(format!("rank_tol {t} must be finite and >= 0")));
            }
        }
        let f = &self.sweep.fractions;
        if f.is_empty() || f.iter().any(|x| !(0.0..=1.0).contains(x)) || f.windows(2).any(|w| w[1] <= w[0]) {
            return Err(bad("sweep.fractions must be strictly increasing within [0, 1]"));
        }
        if self.sweep.metrics.is_empty() {
            return Err(bad("sweep.metrics is empty"));
        }
        if self.sweep.tokens == 0 || self.simulate.tokens == 0 {
            return Err(bad("token counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.simulate.selective_fraction) {
            return Err(bad("simulate.selective_fraction outside [0, 1]"));
        }
        let a = &self.analyze;
        if a.ranks.is_empty() || a.ranks.windows(2).any(|w| w[1] <= w[0]) || a.ranks[0] == 0 {
            return Err(bad("analyze.ranks must be positive and strictly increasing"));
        }
        if a.alignment_rank == 0 || a.alignment_rank > rows.min(dims) {
            return Err(bad(format!("analyze.alignment_rank outside 1..={}", rows.min(dims))));
        }
        let v = &self.verify;
        if v.instances == 0 || v.mc_samples == 0 {
            return Err(bad("verify.instances and verify.mc_samples must be positive"));
        }
        if v.rsvd_trials < 50 {
            return Err(bad("verify.rsvd_trials must be at least 50"));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON of the effective config with
    /// `output_dir` blanked, so runs differing only in location agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../../../configs/default.json");

    fn default() -> PipelineConfig {
        PipelineConfig::from_json(DEFAULT).unwrap()
    }

    #[test]
    fn shipped_default_validates() {
        default().validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT).unwrap();
        v["solve"]["ranks"] = serde_json::json!(3);
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut c = default();
        c.schema_version = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rank_must_fit_the_smallest_unit() {
        let mut c = default();
        c.solve.rank = c.model.hidden + 1;
        assert!(c.validate().is_err());
        let mut c = default();
        c.solve.mode = SolveMode::Rsvd;
        c.solve.oversampling = c.model.hidden;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fractions_must_increase() {
        let mut c = default();
        c.sweep.fractions = vec![0.0, 0.5, 0.5, 1.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_apply_and_change_the_hash() {
        let c = default();
        let o = Overrides { seed: Some(99), whiten: Some(false), ..Default::default() };
        let d = c.clone().apply(&o);
        assert_eq!(d.seed, 99);
        assert!(!d.solve.whiten);
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let c = default();
        let o = Overrides { out: Some("/elsewhere".into()), ..Default::default() };
        assert_eq!(c.hash(), c.clone().apply(&o).hash());
        assert_eq!(c.hash().len(), 64);
    }
}
