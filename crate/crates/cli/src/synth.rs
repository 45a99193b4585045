//! Synthetic decoder stack.
//!
//! Every layer draws an outlier gain `g` log-uniformly from the configured
//! range. At each input site a few channels are outliers: their activation
//! scale is multiplied by `g` (`Σ ← D Σ D`, `D = diag(g on outliers, 1)`)
//! and the matching weight columns of every module reading the site by
//! `g^WEIGHT_GAIN_EXPONENT`. Base covariances follow a power law with the
//! configured exponent.

use std::collections::BTreeMap;

use glowq::calib::{synth_covariance, SpectrumModel};
use glowq::linalg::{counter_word, derive_seed, gaussian_matrix, label_tag, GaussianStream};
use glowq::runtime::{ModuleKind, ModuleSpec};
use glowq::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::{CovarianceSource, ModelConfig, PipelineConfig};
use crate::error::Result;

pub const WEIGHT_GAIN_EXPONENT: f64 = 0.5;

/// One input tensor shared by the modules that read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub layer: usize,
    pub dim: usize,
    /// Power-law exponent of the base covariance; `None` for file inputs.
    pub alpha: Option<f64>,
    pub gain: f64,
    pub outliers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub specs: Vec<ModuleSpec>,
    pub sites: Vec<Site>,
    pub weights: BTreeMap<String, Matrix>,
    /// Population covariance per site id.
    pub covariances: BTreeMap<String, Matrix>,
}

fn site_suffix(kind: ModuleKind) -> &'static str {
    match kind {
        ModuleKind::Q | ModuleKind::K | ModuleKind::V => "attn_in",
        ModuleKind::O => "o_in",
        ModuleKind::Gate | ModuleKind::Up => "mlp_in",
        ModuleKind::Down => "down_in",
    }
}

pub fn site_id(spec: &ModuleSpec) -> String {
    format!("L{}.{}", spec.layer, site_suffix(spec.kind))
}

/// Modules ordered by layer, then by kind in canonical order.
pub fn module_specs(model: &ModelConfig) -> Vec<ModuleSpec> {
    let mut specs = Vec::new();
    for layer in 0..model.layers {
        for kind in ModuleKind::ALL.into_iter().filter(|k| model.kinds.contains(k)) {
            let (in_dim, out_dim) = match kind {
                ModuleKind::Q | ModuleKind::O => (model.hidden, model.hidden),
                ModuleKind::K | ModuleKind::V => (model.hidden, model.kv_dim),
                ModuleKind::Gate | ModuleKind::Up => (model.hidden, model.ffn),
                ModuleKind::Down => (model.ffn, model.hidden),
            };
            specs.push(ModuleSpec { id: format!("L{layer}.{kind}"), kind, layer, in_dim, out_dim });
        }
    }
    specs
}

pub fn layer_gain(seed: u64, layer: usize, [lo, hi]: [f64; 2]) -> f64 {
    let u = GaussianStream::new(derive_seed(seed, label_tag("gain"))).uniform(layer as u64);
    lo * (hi / lo).powf(u)
}

/// `count` distinct channels in `0..dim`, sorted.
pub fn outlier_channels(seed: u64, site: &str, dim: usize, count: usize) -> Vec<usize> {
    let stream = derive_seed(seed, label_tag(&format!("outliers/{site}")));
    let mut idx: Vec<usize> = (0..dim).collect();
    for i in 0..count.min(dim) {
        let j = i + (counter_word(stream, i as u64) % (dim - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..count.min(dim)].to_vec();
    chosen.sort_unstable();
    chosen
}

fn site_alpha(cfg: &PipelineConfig, suffix: &str) -> Option<f64> {
    match &cfg.covariance {
        CovarianceSource::Synthetic { attn_alpha, mlp_alpha, .. } => {
            Some(if suffix == "attn_in" || suffix == "o_in" { *attn_alpha } else { *mlp_alpha })
        }
        CovarianceSource::File { .. } => None,
    }
}

/// Sites in first-use order.
pub fn sites(cfg: &PipelineConfig, specs: &[ModuleSpec]) -> Vec<Site> {
    let mut out: Vec<Site> = Vec::new();
    for spec in specs {
        let id = site_id(spec);
        if out.iter().any(|s| s.id == id) {
            continue;
        }
        let gain = layer_gain(cfg.seed, spec.layer, cfg.model.outlier_gain);
        out.push(Site {
            outliers: outlier_channels(cfg.seed, &id, spec.in_dim, cfg.model.outlier_channels),
            alpha: site_alpha(cfg, site_suffix(spec.kind)),
            id,
            layer: spec.layer,
            dim: spec.in_dim,
            gain,
        });
    }
    out
}

fn outlier_scales(site: &Site, gain: f64) -> Vec<f64> {
    let mut d = vec![1.0; site.dim];
    for &j in &site.outliers {
        d[j] = gain;
    }
    d
}

/// `D Σ_α D` with `Σ_α` unit-scale power law.
pub fn site_covariance(site: &Site, alpha: f64, seed: u64) -> Result<Matrix> {
    let base = synth_covariance(
        &SpectrumModel::new(site.dim, alpha, 1.0)?,
        derive_seed(seed, label_tag(&format!("cov/{}", site.id))),
    )?;
    let d = outlier_scales(site, site.gain);
    Ok(base.scale_rows(&d).scale_columns(&d).symmetrize())
}

/// `N(0, 1/in_dim)` entries with outlier columns scaled by `√g`.
pub fn module_weight(spec: &ModuleSpec, site: &Site, seed: u64) -> Result<Matrix> {
    let w = gaussian_matrix(spec.out_dim, spec.in_dim, derive_seed(seed, label_tag(&format!("weight/{}", spec.id))))?;
    let scale = 1.0 / (spec.in_dim as f64).sqrt();
    let cols: Vec<f64> = outlier_scales(site, site.gain.powf(WEIGHT_GAIN_EXPONENT)).iter().map(|g| g * scale).collect();
    Ok(w.scale_columns(&cols))
}

/// Weights for every module and, for a synthetic source, population
/// covariances for every site.
pub fn generate(cfg: &PipelineConfig) -> Result<SyntheticModel> {
    let specs = module_specs(&cfg.model);
    let sites = sites(cfg, &specs);
    let mut weights = BTreeMap::new();
    for spec in &specs {
        let site = sites.iter().find(|s| s.id == site_id(spec)).expect("site exists");
        weights.insert(spec.id.clone(), module_weight(spec, site, cfg.seed)?);
    }
    let mut covariances = BTreeMap::new();
    for site in &sites {
        if let Some(alpha) = site.alpha {
            covariances.insert(site.id.clone(), site_covariance(site, alpha, cfg.seed)?);
        }
    }
    Ok(SyntheticModel { specs, sites, weights, covariances })
}
