//! Pipeline stages and their run-directory artifacts.
//!
//! ```text
//! <out>/manifest.json
//! <out>/model/{modules,sites}.json, W_<module>.glxm, cov_<site>.glxm
//! <out>/quant/<module>.{codes.glxm,scales.glxm,quant.json}
//! <out>/calib/<site>.{glxm,json}
//! <out>/factors/index.json, factors/<unit>/...
//! <out>/sweep.csv, sweep_summary.json
//! <out>/ledger.csv, simulate_summary.json
//! <out>/analysis/...
//! ```
//!
//! CSV floats use Rust's `Debug` formatting of `f64`, which is the shortest
//! decimal that round-trips.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glowq::calib::{fit_power_law, sample_inputs, CovarianceAccumulator, CovarianceEstimate, PowerLawFit};
use glowq::io;
use glowq::linalg::{derive_seed, label_tag, psd_roots, sym_eig, PsdRoots};
use glowq::quant::{dequantize, quantize, QuantizedLinear};
use glowq::runtime::{
    cached_forward, layerwise_forward, plan_groups, planned_cost, CorrectionMode, CostLedger, LayerGroup,
    LayerwiseModule, ModuleSpec,
};
use glowq::select::{
    compare_sweeps, elbow_index, score_cosine, score_energy_capture, score_ner, select_topk, sweep_auc,
    unit_scores, Metric, SweepPoint, UnitEvaluation,
};
use glowq::solver::{
    layerwise_solve, load_factors, qr_reduced_rsvd, save_factors, solve_unweighted,
    solve_whitened_exact, weighted_residual, whitened_core, SharedFactors, SolveConfig, StackedError,
};
use glowq::analysis::{alignment_maps, energy_capture_curve, whitened_capture_of_factors};
use glowq::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CovarianceSource, PipelineConfig, SolveMode};
use crate::error::{CliError, Context, Result};
use crate::synth::{self, Site};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            tool: "glowq".into(),
            version: glowq::VERSION.into(),
            schema_version: cfg.schema_version,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        }
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn weight(&self, module: &str) -> PathBuf {
        self.model().join(format!("W_{module}.glxm"))
    }
    pub fn true_cov(&self, site: &str) -> PathBuf {
        self.model().join(format!("cov_{site}.glxm"))
    }
    pub fn quant_stem(&self, module: &str) -> PathBuf {
        self.root.join("quant").join(module)
    }
    pub fn calib_stem(&self, site: &str) -> PathBuf {
        self.root.join("calib").join(site)
    }
    pub fn factors(&self) -> PathBuf {
        self.root.join("factors")
    }
    pub fn unit_factors(&self, unit: &str) -> PathBuf {
        self.factors().join(unit)
    }
    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }
    pub fn verify_report(&self) -> PathBuf {
        self.root.join("verify_report.json")
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { path: path.to_path_buf(), what: what.into() })
    }
}

fn write_manifest(cfg: &PipelineConfig, layout: &RunLayout) -> Result<()> {
    io::write_json(&layout.manifest(), &RunManifest::new(cfg)).context(|| "writing manifest".into())
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io { context: "csv buffer".into(), source: e.into_error() })?;
    io::write_atomic(path, &bytes).context(|| format!("writing {}", path.display()))
}

/// A correction unit: a shared-input group or a solo module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub group: LayerGroup,
    pub site: String,
    pub layer: usize,
}

impl Unit {
    pub fn id(&self) -> &str {
        &self.group.group_id
    }
}

pub fn plan_units(specs: &[ModuleSpec]) -> Result<Vec<Unit>> {
    let by_id: BTreeMap<&str, &ModuleSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    plan_groups(specs)?
        .into_iter()
        .map(|group| {
            let anchor = by_id[group.anchor.as_str()];
            Ok(Unit { site: synth::site_id(anchor), layer: anchor.layer, group })
        })
        .collect()
}

/// Everything downstream of quantization and calibration.
#[derive(Debug, Clone)]
pub struct Problem {
    pub specs: Vec<ModuleSpec>,
    pub sites: Vec<Site>,
    pub units: Vec<Unit>,
    pub weights: BTreeMap<String, Matrix>,
    pub dequantized: BTreeMap<String, Matrix>,
    pub covariances: BTreeMap<String, CovarianceEstimate>,
    /// Roots of each site covariance at the solve's rank tolerance.
    pub roots: BTreeMap<String, PsdRoots>,
}

impl Problem {
    pub fn error(&self, module: &str) -> Matrix {
        self.weights[module].sub(&self.dequantized[module])
    }

    pub fn stacked(&self, unit: &Unit) -> Result<StackedError> {
        Ok(StackedError::stack(unit.group.members().map(|id| (id.to_string(), self.error(id))).collect())?)
    }

    pub fn covariance(&self, unit: &Unit) -> &CovarianceEstimate {
        &self.covariances[&unit.site]
    }

    pub fn cov_sqrt(&self, unit: &Unit) -> &Matrix {
        &self.roots[&unit.site].sqrt
    }

    fn stacked_weights(&self, unit: &Unit, dequantized: bool) -> Result<Matrix> {
        let src = if dequantized { &self.dequantized } else { &self.weights };
        let blocks: Vec<&Matrix> = unit.group.members().map(|id| &src[id]).collect();
        Ok(Matrix::vstack(&blocks)?)
    }
}

pub fn quantize_all(cfg: &PipelineConfig, weights: &BTreeMap<String, Matrix>) -> Result<BTreeMap<String, QuantizedLinear>> {
    weights
        .par_iter()
        .map(|(id, w)| Ok((id.clone(), quantize(w, &cfg.quant).context(|| format!("quantizing {id}"))?)))
        .collect()
}

/// Calibration inputs for one site: synthetic draws from the population
/// covariance, or the file `<dir>/<site>.glxm`.
fn site_inputs(cfg: &PipelineConfig, site: &Site, population: Option<&Matrix>) -> Result<Matrix> {
    match &cfg.covariance {
        CovarianceSource::Synthetic { calib_tokens, .. } => {
            let cov = population.ok_or_else(|| CliError::MissingInput {
                path: PathBuf::from(&site.id),
                what: "population covariance".into(),
            })?;
            let seed = derive_seed(cfg.seed, label_tag(&format!("calib/{}", site.id)));
            sample_inputs(cov, *calib_tokens, seed).context(|| format!("sampling {}", site.id))
        }
        CovarianceSource::File { dir, .. } => {
            let path = dir.join(format!("{}.glxm", site.id));
            require(&path, "calibration inputs")?;
            io::read_matrix(&path).context(|| format!("reading {}", path.display()))
        }
    }
}

pub fn calibrate_sites(
    cfg: &PipelineConfig,
    sites: &[Site],
    population: &BTreeMap<String, Matrix>,
) -> Result<BTreeMap<String, CovarianceEstimate>> {
    sites
        .par_iter()
        .map(|site| {
            let x = site_inputs(cfg, site, population.get(&site.id))?;
            if x.cols() != site.dim {
                return Err(CliError::config(format!(
                    "inputs for {} have {} columns, expected {}",
                    site.id,
                    x.cols(),
                    site.dim
                )));
            }
            let mut acc = CovarianceAccumulator::new(site.dim)?;
            acc.accumulate(&x)?;
            let est = acc.finalize(cfg.covariance.shrinkage()).context(|| format!("calibrating {}", site.id))?;
            Ok((site.id.clone(), est))
        })
        .collect()
}

/// Generate, quantize and calibrate without touching the filesystem
/// (a file covariance source still reads its inputs).
pub fn build_problem(cfg: &PipelineConfig) -> Result<Problem> {
    let model = synth::generate(cfg)?;
    let quant = quantize_all(cfg, &model.weights)?;
    let covariances = calibrate_sites(cfg, &model.sites, &model.covariances)?;
    Ok(Problem {
        roots: site_roots(cfg, &covariances)?,
        units: plan_units(&model.specs)?,
        specs: model.specs,
        sites: model.sites,
        dequantized: quant.iter().map(|(id, q)| (id.clone(), dequantize(q))).collect(),
        weights: model.weights,
        covariances,
    })
}

fn site_roots(
    cfg: &PipelineConfig,
    covariances: &BTreeMap<String, CovarianceEstimate>,
) -> Result<BTreeMap<String, PsdRoots>> {
    covariances
        .par_iter()
        .map(|(site, c)| Ok((site.clone(), psd_roots(&c.sigma, cfg.solve.rank_tol).context(|| format!("roots of {site}"))?)))
        .collect()
}

pub fn solve_config(cfg: &PipelineConfig, unit_id: &str) -> SolveConfig {
    let s = &cfg.solve;
    SolveConfig {
        rank: s.rank,
        oversampling: s.oversampling,
        power_iters: s.power_iters,
        whiten: s.whiten,
        seed: derive_seed(cfg.seed, label_tag(unit_id)),
        rank_tol: s.rank_tol,
    }
}

/// Factors for one unit. Residuals are always recorded under the
/// calibrated covariance, whitened solve or not.
pub fn solve_unit(cfg: &PipelineConfig, problem: &Problem, unit: &Unit) -> Result<SharedFactors> {
    let se = problem.stacked(unit)?;
    let cov = problem.covariance(unit);
    let s = &cfg.solve;
    let ctx = || format!("solving {}", unit.id());
    let factors = match (s.mode, s.whiten) {
        (SolveMode::Exact, true) => solve_whitened_exact(&se, cov, s.rank, s.rank_tol).context(ctx)?,
        (SolveMode::Exact, false) => solve_unweighted(&se, s.rank).context(ctx)?,
        (SolveMode::Rsvd, _) => qr_reduced_rsvd(&se, cov, &solve_config(cfg, unit.id())).context(ctx)?.0,
    };
    factors.evaluate(&se, problem.cov_sqrt(unit)).context(ctx)
}

pub fn solve_units(cfg: &PipelineConfig, problem: &Problem) -> Result<Vec<SharedFactors>> {
    problem.units.par_iter().map(|u| solve_unit(cfg, problem, u)).collect()
}

pub fn evaluate_unit(cfg: &PipelineConfig, problem: &Problem, unit: &Unit, factors: &SharedFactors) -> Result<UnitEvaluation> {
    let se = problem.stacked(unit)?;
    let sqrt = problem.cov_sqrt(unit);
    let e_cat = se.concat();
    let uncorrected_sq = e_cat.matmul(sqrt).frobenius_norm_sq();
    let corrected_sq = weighted_residual(&se, sqrt, factors)?.powi(2);
    // the whitened core R_e Σ^{1/2}
    let core = whitened_core(&se, None, None)?.matmul(sqrt);
    let w = problem.stacked_weights(unit, false)?;
    let w_q = problem.stacked_weights(unit, true)?;
    let out_dims: Vec<usize> = se.blocks().iter().map(|b| b.error.rows()).collect();
    let (d, r, t) = (se.input_dim(), factors.rank, cfg.sweep.tokens);
    Ok(UnitEvaluation {
        unit_id: unit.id().to_string(),
        layer: unit.layer,
        uncorrected_sq,
        corrected_sq,
        energy_capture: score_energy_capture(&core, r)?,
        ner: score_ner(&e_cat, &w)?,
        frobenius: e_cat.frobenius_norm(),
        cosine: score_cosine(&w, &w_q)?,
        cost_active: planned_cost(&out_dims, d, r, t, CorrectionMode::Shared, true),
        cost_inactive: planned_cost(&out_dims, d, r, t, CorrectionMode::Shared, false),
    })
}

pub fn evaluate_units(cfg: &PipelineConfig, problem: &Problem, factors: &[SharedFactors]) -> Result<Vec<UnitEvaluation>> {
    problem
        .units
        .par_iter()
        .zip(factors.par_iter())
        .map(|(u, f)| evaluate_unit(cfg, problem, u, f))
        .collect()
}

pub fn load_problem(cfg: &PipelineConfig, layout: &RunLayout) -> Result<Problem> {
    let (specs, sites) = read_model(layout)?;
    let mut weights = BTreeMap::new();
    let mut dequantized = BTreeMap::new();
    for spec in &specs {
        let wp = layout.weight(&spec.id);
        require(&wp, "weight (run `gen`)")?;
        weights.insert(spec.id.clone(), io::read_matrix(&wp).context(|| format!("reading {}", wp.display()))?);
        let stem = layout.quant_stem(&spec.id);
        require(&io::with_suffix(&stem, ".quant.json"), "quantized weight (run `quantize`)")?;
        let q = QuantizedLinear::load(&stem).context(|| format!("loading quantized {}", spec.id))?;
        if q.config() != cfg.quant {
            return Err(CliError::config(format!("quant/{} was produced with a different quant config", spec.id)));
        }
        dequantized.insert(spec.id.clone(), dequantize(&q));
    }
    let mut covariances = BTreeMap::new();
    for site in &sites {
        let stem = layout.calib_stem(&site.id);
        require(&io::with_suffix(&stem, ".json"), "covariance (run `calibrate`)")?;
        covariances.insert(
            site.id.clone(),
            CovarianceEstimate::load(&stem).context(|| format!("loading covariance {}", site.id))?,
        );
    }
    Ok(Problem { units: plan_units(&specs)?, roots: site_roots(cfg, &covariances)?, specs, sites, weights, dequantized, covariances })
}

pub fn load_unit_factors(layout: &RunLayout, problem: &Problem) -> Result<Vec<SharedFactors>> {
    problem
        .units
        .iter()
        .map(|u| {
            let dir = layout.unit_factors(u.id());
            require(&dir.join("factors.json"), "factors (run `solve`)")?;
            let (f, manifest) = load_factors(&dir).context(|| format!("loading factors {}", u.id()))?;
            let expected: Vec<&str> = u.group.members().collect();
            if manifest.module_ids.iter().map(String::as_str).ne(expected.iter().copied()) {
                return Err(CliError::config(format!("factors for {} list different modules", u.id())));
            }
            Ok(f)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub modules: usize,
    pub sites: usize,
    pub covariances: usize,
}

pub fn cmd_gen(cfg: &PipelineConfig) -> Result<GenSummary> {
    let layout = RunLayout::new(&cfg.output_dir);
    let model = synth::generate(cfg)?;
    for (id, w) in &model.weights {
        io::write_matrix(&layout.weight(id), w).context(|| format!("writing weight {id}"))?;
    }
    for (site, c) in &model.covariances {
        io::write_matrix(&layout.true_cov(site), c).context(|| format!("writing covariance {site}"))?;
    }
    io::write_json(&layout.model().join("modules.json"), &model.specs).context(|| "writing modules.json".into())?;
    io::write_json(&layout.model().join("sites.json"), &model.sites).context(|| "writing sites.json".into())?;
    write_manifest(cfg, &layout)?;
    Ok(GenSummary { modules: model.specs.len(), sites: model.sites.len(), covariances: model.covariances.len() })
}

fn read_model(layout: &RunLayout) -> Result<(Vec<ModuleSpec>, Vec<Site>)> {
    let modules_path = layout.model().join("modules.json");
    require(&modules_path, "model description (run `gen`)")?;
    let specs = io::read_json(&modules_path).context(|| "reading modules.json".into())?;
    let sites = io::read_json(&layout.model().join("sites.json")).context(|| "reading sites.json".into())?;
    Ok((specs, sites))
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizeSummary {
    pub modules: usize,
    /// `Σ ‖E‖_F² / Σ ‖W‖_F²` over the model.
    pub error_ratio: f64,
}

pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<QuantizeSummary> {
    let layout = RunLayout::new(&cfg.output_dir);
    let (specs, _) = read_model(&layout)?;
    let mut weights = BTreeMap::new();
    for spec in &specs {
        let p = layout.weight(&spec.id);
        require(&p, "weight (run `gen`)")?;
        weights.insert(spec.id.clone(), io::read_matrix(&p).context(|| format!("reading {}", p.display()))?);
    }
    let quant = quantize_all(cfg, &weights)?;
    let (mut err, mut tot) = (0.0, 0.0);
    for (id, q) in &quant {
        q.save(&layout.quant_stem(id)).context(|| format!("writing quantized {id}"))?;
        err += weights[id].sub(&dequantize(q)).frobenius_norm_sq();
        tot += weights[id].frobenius_norm_sq();
    }
    write_manifest(cfg, &layout)?;
    Ok(QuantizeSummary { modules: quant.len(), error_ratio: if tot > 0.0 { err / tot } else { 0.0 } })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateSummary {
    pub sites: usize,
    pub shrink_alpha: f64,
}

pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<CalibrateSummary> {
    let layout = RunLayout::new(&cfg.output_dir);
    let (_, sites) = read_model(&layout)?;
    let mut population = BTreeMap::new();
    if matches!(cfg.covariance, CovarianceSource::Synthetic { .. }) {
        for site in &sites {
            let p = layout.true_cov(&site.id);
            require(&p, "population covariance (run `gen`)")?;
            population.insert(site.id.clone(), io::read_matrix(&p).context(|| format!("reading {}", p.display()))?);
        }
    }
    let covs = calibrate_sites(cfg, &sites, &population)?;
    for (site, c) in &covs {
        c.save(&layout.calib_stem(site)).context(|| format!("writing covariance {site}"))?;
    }
    write_manifest(cfg, &layout)?;
    Ok(CalibrateSummary { sites: covs.len(), shrink_alpha: cfg.covariance.shrinkage().shrink_alpha })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub unit_id: String,
    pub modules: Vec<String>,
    pub rank: usize,
    pub residual_weighted: f64,
    pub residual_unweighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorIndex {
    pub mode: SolveMode,
    pub whiten: bool,
    pub units: Vec<FactorRecord>,
}

pub fn cmd_solve(cfg: &PipelineConfig) -> Result<FactorIndex> {
    let layout = RunLayout::new(&cfg.output_dir);
    let problem = load_problem(cfg, &layout)?;
    let factors = solve_units(cfg, &problem)?;
    let mut units = Vec::with_capacity(factors.len());
    for (u, f) in problem.units.iter().zip(&factors) {
        save_factors(&layout.unit_factors(u.id()), u.id(), f, Some(solve_config(cfg, u.id())))
            .context(|| format!("writing factors {}", u.id()))?;
        units.push(FactorRecord {
            unit_id: u.id().to_string(),
            modules: u.group.members().map(str::to_string).collect(),
            rank: f.rank,
            residual_weighted: f.residual_weighted,
            residual_unweighted: f.residual_unweighted,
        });
    }
    let index = FactorIndex { mode: cfg.solve.mode, whiten: cfg.solve.whiten, units };
    io::write_json(&layout.factors().join("index.json"), &index).context(|| "writing factor index".into())?;
    write_manifest(cfg, &layout)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub metric: Metric,
    pub auc: f64,
    pub elbow_fraction: Option<f64>,
    pub points: Vec<SweepPoint>,
}

/// Sweeps for each configured metric, in configured order.
pub fn sweep_curves(cfg: &PipelineConfig, evals: &[UnitEvaluation]) -> Result<Vec<SweepCurve>> {
    Ok(compare_sweeps(evals, &cfg.sweep.fractions, &cfg.sweep.metrics)?
        .into_iter()
        .map(|(metric, points)| SweepCurve {
            metric,
            auc: sweep_auc(&points),
            elbow_fraction: elbow_index(&points).map(|i| points[i].fraction),
            points,
        })
        .collect())
}

pub const SWEEP_HEADER: [&str; 5] = ["metric", "fraction", "weighted_residual_total", "flops_total", "params_total"];

pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<SweepCurve>> {
    let layout = RunLayout::new(&cfg.output_dir);
    let problem = load_problem(cfg, &layout)?;
    let factors = load_unit_factors(&layout, &problem)?;
    let evals = evaluate_units(cfg, &problem, &factors)?;
    let curves = sweep_curves(cfg, &evals)?;
    let rows: Vec<Vec<String>> = curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |p| {
                vec![
                    c.metric.as_str().to_string(),
                    fmt_f64(p.fraction),
                    fmt_f64(p.weighted_residual_total),
                    p.flops_total.to_string(),
                    p.params_total.to_string(),
                ]
            })
        })
        .collect();
    write_csv(&layout.root.join("sweep.csv"), &SWEEP_HEADER, &rows)?;
    io::write_json(&layout.root.join("sweep_summary.json"), &curves).context(|| "writing sweep summary".into())?;
    io::write_json(&layout.root.join("unit_scores.json"), &evals).context(|| "writing unit scores".into())?;
    write_manifest(cfg, &layout)?;
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    Layerwise,
    Cached,
    Selective,
}

impl LedgerMode {
    pub const ALL: [LedgerMode; 3] = [Self::Layerwise, Self::Cached, Self::Selective];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Layerwise => "layerwise",
            Self::Cached => "cached",
            Self::Selective => "selective",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub unit_id: String,
    pub mode: LedgerMode,
    pub active: bool,
    pub ledger: CostLedger,
}

pub const LEDGER_HEADER: [&str; 8] = [
    "unit_id",
    "mode",
    "active",
    "flops_quantized",
    "flops_right_proj",
    "flops_left_apply",
    "params_lowrank",
    "bytes_cache",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub tokens: usize,
    pub selective_fraction: f64,
    pub selective_metric: Metric,
    pub totals: Vec<(LedgerMode, CostLedger)>,
    /// Largest `|cached − layerwise-with-shared-factors|` over all outputs.
    pub cache_max_abs_diff: f64,
}

/// Runs every unit through layerwise, cached and selective forwards on
/// inputs drawn from its calibrated covariance, and checks each ledger
/// against the closed form.
pub fn simulate(
    cfg: &PipelineConfig,
    problem: &Problem,
    factors: &[SharedFactors],
    evals: &[UnitEvaluation],
) -> Result<(Vec<LedgerRow>, SimulateSummary)> {
    let sim = &cfg.simulate;
    let plan = select_topk(&unit_scores(evals, sim.selective_metric), sim.selective_fraction)?;
    let per_unit: Vec<(Vec<LedgerRow>, f64)> = problem
        .units
        .par_iter()
        .zip(factors.par_iter())
        .map(|(unit, f)| {
            let cov = problem.covariance(unit);
            let seed = derive_seed(cfg.seed, label_tag(&format!("simulate/{}", unit.id())));
            let x = sample_inputs(&cov.sigma, sim.tokens, seed)?;
            let se = problem.stacked(unit)?;
            let out_dims: Vec<usize> = se.blocks().iter().map(|b| b.error.rows()).collect();
            let d = se.input_dim();

            let layer = layerwise_solve(&se, Some(cov), f.rank, cfg.solve.rank_tol)?;
            let modules: Vec<LayerwiseModule<'_>> = layer
                .iter()
                .map(|l| LayerwiseModule { id: &l.module_id, w_q: &problem.dequantized[&l.module_id], a: &l.a, b: &l.b })
                .collect();
            let mut lw = CostLedger::default();
            layerwise_forward(&x, &modules, true, &mut lw)?;

            let mut cached = CostLedger::default();
            let out = cached_forward(&x, &unit.group, &problem.dequantized, f, true, &mut cached)?;
            let shared: Vec<LayerwiseModule<'_>> = f
                .a_blocks
                .iter()
                .map(|(id, a)| LayerwiseModule { id, w_q: &problem.dequantized[id], a, b: &f.b_shared })
                .collect();
            let reference = layerwise_forward(&x, &shared, true, &mut CostLedger::default())?;
            let diff = reference
                .iter()
                .map(|(id, y)| out.output(id).map_or(f64::INFINITY, |c| c.max_abs_diff(y)))
                .fold(0.0, f64::max);

            let active = plan.is_active(unit.id());
            let mut selective = CostLedger::default();
            cached_forward(&x, &unit.group, &problem.dequantized, f, active, &mut selective)?;

            let checks = [
                (LedgerMode::Layerwise, lw, planned_cost(&out_dims, d, f.rank, sim.tokens, CorrectionMode::Layerwise, true)),
                (LedgerMode::Cached, cached, planned_cost(&out_dims, d, f.rank, sim.tokens, CorrectionMode::Shared, true)),
                (
                    LedgerMode::Selective,
                    selective,
                    planned_cost(&out_dims, d, f.rank, sim.tokens, CorrectionMode::Shared, active),
                ),
            ];
            let mut rows = Vec::with_capacity(3);
            for (mode, got, want) in checks {
                if got != want {
                    return Err(CliError::Invariant(format!(
                        "{} ledger for {} disagrees with the closed form",
                        mode.as_str(),
                        unit.id()
                    )));
                }
                rows.push(LedgerRow {
                    unit_id: unit.id().to_string(),
                    mode,
                    active: mode != LedgerMode::Selective || active,
                    ledger: got,
                });
            }
            Ok((rows, diff))
        })
        .collect::<Result<_>>()?;
    let cache_max_abs_diff = per_unit.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    if cache_max_abs_diff > 1e-12 {
        return Err(CliError::Invariant(format!(
            "cached outputs differ from layerwise outputs by {cache_max_abs_diff:e}"
        )));
    }
    let rows: Vec<LedgerRow> = per_unit.into_iter().flat_map(|(r, _)| r).collect();
    let totals = LedgerMode::ALL
        .iter()
        .map(|&m| (m, rows.iter().filter(|r| r.mode == m).map(|r| r.ledger).sum()))
        .collect();
    let summary = SimulateSummary {
        tokens: sim.tokens,
        selective_fraction: sim.selective_fraction,
        selective_metric: sim.selective_metric,
        totals,
        cache_max_abs_diff,
    };
    Ok((rows, summary))
}

fn ledger_record(unit: &str, mode: LedgerMode, active: bool, l: &CostLedger) -> Vec<String> {
    vec![
        unit.to_string(),
        mode.as_str().to_string(),
        active.to_string(),
        l.flops_quantized.to_string(),
        l.flops_right_proj.to_string(),
        l.flops_left_apply.to_string(),
        l.params_lowrank.to_string(),
        l.bytes_cache.to_string(),
    ]
}

pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<SimulateSummary> {
    let layout = RunLayout::new(&cfg.output_dir);
    let problem = load_problem(cfg, &layout)?;
    let factors = load_unit_factors(&layout, &problem)?;
    let evals = evaluate_units(cfg, &problem, &factors)?;
    let (rows, summary) = simulate(cfg, &problem, &factors, &evals)?;
    let mut records: Vec<Vec<String>> =
        rows.iter().map(|r| ledger_record(&r.unit_id, r.mode, r.active, &r.ledger)).collect();
    for (mode, total) in &summary.totals {
        records.push(ledger_record("TOTAL", *mode, true, total));
    }
    write_csv(&layout.root.join("ledger.csv"), &LEDGER_HEADER, &records)?;
    io::write_json(&layout.root.join("simulate_summary.json"), &summary).context(|| "writing simulate summary".into())?;
    write_manifest(cfg, &layout)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub site: String,
    pub dim: usize,
    pub alpha_configured: Option<f64>,
    pub fit: PowerLawFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub unit_id: String,
    pub module_id: String,
    pub whitened: bool,
    pub diag_mean: f64,
    pub subspace_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub spectra: Vec<SpectrumRow>,
    pub alignment: Vec<AlignmentRow>,
    /// Units where whitened capture at the solve rank beats unweighted
    /// factors evaluated in the whitened metric.
    pub whitening_wins: usize,
    pub units: usize,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<String>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| fmt_f64(v)).collect()).collect()
}

pub fn cmd_analyze(cfg: &PipelineConfig) -> Result<AnalyzeSummary> {
    let layout = RunLayout::new(&cfg.output_dir);
    let problem = load_problem(cfg, &layout)?;
    let dir = layout.analysis();

    let spectra: Vec<SpectrumRow> = problem
        .sites
        .iter()
        .map(|site| {
            let eig = sym_eig(&problem.covariances[&site.id].sigma)?.values;
            let eig: Vec<f64> = eig.into_iter().map(|l| l.max(f64::MIN_POSITIVE)).collect();
            Ok(SpectrumRow { site: site.id.clone(), dim: site.dim, alpha_configured: site.alpha, fit: fit_power_law(&eig, None)? })
        })
        .collect::<Result<_>>()?;
    let spectrum_rows: Vec<Vec<String>> = spectra
        .iter()
        .map(|s| {
            vec![
                s.site.clone(),
                s.dim.to_string(),
                s.alpha_configured.map(fmt_f64).unwrap_or_default(),
                fmt_f64(s.fit.alpha),
                fmt_f64(s.fit.r2),
            ]
        })
        .collect();
    write_csv(&dir.join("spectrum.csv"), &["site", "dim", "alpha_configured", "alpha_fit", "r2"], &spectrum_rows)?;

    type UnitAnalysis = (Vec<Vec<String>>, Vec<AlignmentRow>, Vec<(String, Matrix)>, bool);
    let per_unit: Vec<UnitAnalysis> = problem
        .units
        .par_iter()
        .map(|unit| {
            let se = problem.stacked(unit)?;
            let cov = problem.covariance(unit);
            let max = se.total_rows().min(se.input_dim());
            let ranks: Vec<usize> = cfg.analyze.ranks.iter().copied().filter(|&r| r <= max).collect();
            let white = energy_capture_curve(&se, Some(cov), &ranks)?;
            let plain = energy_capture_curve(&se, None, &ranks)?;
            let mut energy = Vec::with_capacity(ranks.len());
            for (i, &r) in ranks.iter().enumerate() {
                let cross = whitened_capture_of_factors(&se, cov, &solve_unweighted(&se, r)?)?;
                energy.push(vec![
                    unit.id().to_string(),
                    r.to_string(),
                    fmt_f64(white.capture[i]),
                    fmt_f64(cross),
                    fmt_f64(plain.capture[i]),
                ]);
            }
            let r = cfg.solve.rank;
            let wins = whitened_capture_of_factors(&se, cov, &solve_whitened_exact(&se, cov, r, cfg.solve.rank_tol)?)?
                > whitened_capture_of_factors(&se, cov, &solve_unweighted(&se, r)?)?;

            let mut align = Vec::new();
            let mut heatmaps = Vec::new();
            if unit.group.len() > 1 {
                let k = cfg.analyze.alignment_rank.min(max);
                for (whitened, maps) in
                    [(true, alignment_maps(&se, Some(cov), k)?), (false, alignment_maps(&se, None, k)?)]
                {
                    for m in maps {
                        let tag = if whitened { "whitened" } else { "unweighted" };
                        heatmaps.push((format!("{}.{tag}", m.module_id), m.c.clone()));
                        align.push(AlignmentRow {
                            unit_id: unit.id().to_string(),
                            module_id: m.module_id,
                            whitened,
                            diag_mean: m.diag_mean,
                            subspace_distance: m.subspace_distance,
                        });
                    }
                }
            }
            Ok((energy, align, heatmaps, wins))
        })
        .collect::<Result<_>>()?;

    let mut energy_rows = Vec::new();
    let mut alignment = Vec::new();
    let mut whitening_wins = 0;
    for (energy, align, heatmaps, wins) in per_unit {
        energy_rows.extend(energy);
        alignment.extend(align);
        whitening_wins += usize::from(wins);
        for (name, c) in heatmaps {
            let header: Vec<String> = (0..c.cols()).map(|j| format!("c{j}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(&dir.join("heatmaps").join(format!("{name}.csv")), &header, &matrix_rows(&c))?;
        }
    }
    write_csv(
        &dir.join("energy.csv"),
        &["unit_id", "rank", "whitened_optimal", "unweighted_factors_whitened", "unweighted_optimal"],
        &energy_rows,
    )?;
    let align_rows: Vec<Vec<String>> = alignment
        .iter()
        .map(|a| {
            vec![
                a.unit_id.clone(),
                a.module_id.clone(),
                a.whitened.to_string(),
                fmt_f64(a.diag_mean),
                fmt_f64(a.subspace_distance),
            ]
        })
        .collect();
    write_csv(
        &dir.join("alignment.csv"),
        &["unit_id", "module_id", "whitened", "diag_mean", "subspace_distance"],
        &align_rows,
    )?;
    let summary = AnalyzeSummary { spectra, alignment, whitening_wins, units: problem.units.len() };
    write_manifest(cfg, &layout)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PipelineConfig {
        let mut c = PipelineConfig::from_json(include_str!("../../../configs/default.json")).unwrap();
        c.model.layers = 2;
        c
    }

    #[test]
    fn units_follow_group_plan() {
        let c = cfg();
        let specs = synth::module_specs(&c.model);
        let units = plan_units(&specs).unwrap();
        let ids: Vec<&str> = units.iter().map(Unit::id).collect();
        assert_eq!(ids, ["L0.attn", "L0.o", "L0.mlp", "L0.down", "L1.attn", "L1.o", "L1.mlp", "L1.down"]);
        assert_eq!(units[0].site, "L0.attn_in");
        assert_eq!(units[3].site, "L0.down_in");
    }

    #[test]
    fn solved_units_beat_uncorrected_error() {
        let c = cfg();
        let problem = build_problem(&c).unwrap();
        let factors = solve_units(&c, &problem).unwrap();
        let evals = evaluate_units(&c, &problem, &factors).unwrap();
        for e in &evals {
            assert!(e.corrected_sq < e.uncorrected_sq, "{}", e.unit_id);
            assert!((0.0..=1.0).contains(&e.energy_capture));
        }
    }

    #[test]
    fn rsvd_with_power_iterations_tracks_exact_mode() {
        let mut c = cfg();
        let problem = build_problem(&c).unwrap();
        c.solve.mode = SolveMode::Rsvd;
        c.solve.power_iters = 3;
        let rsvd = solve_units(&c, &problem).unwrap();
        c.solve.mode = SolveMode::Exact;
        let exact = solve_units(&c, &problem).unwrap();
        for (a, b) in rsvd.iter().zip(&exact) {
            assert!(a.residual_weighted >= b.residual_weighted * (1.0 - 1e-9));
            assert!(a.residual_weighted <= b.residual_weighted * 1.05);
        }
    }

    #[test]
    fn unwhitened_exact_mode_is_the_unweighted_solve() {
        let mut c = cfg();
        c.solve.mode = SolveMode::Exact;
        c.solve.whiten = false;
        let problem = build_problem(&c).unwrap();
        let factors = solve_units(&c, &problem).unwrap();
        for (u, f) in problem.units.iter().zip(&factors) {
            let direct = solve_unweighted(&problem.stacked(u).unwrap(), c.solve.rank).unwrap();
            assert_eq!(f.b_shared, direct.b_shared);
            assert_eq!(f.residual_unweighted, direct.residual_unweighted);
        }
    }

    #[test]
    fn csv_floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 12345.678, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
