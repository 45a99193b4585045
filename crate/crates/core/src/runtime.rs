//! Corrected forward evaluation and cost accounting.
//!
//! A group's right projection `R = X Bᵀ` is computed once by the anchor and
//! read by every consumer; each module then adds `R A_iᵀ` to its quantized
//! output. Only linear projections are evaluated. FLOPs count one
//! multiply-add as 2.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::solver::SharedFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [Self::Q, Self::K, Self::V, Self::O, Self::Gate, Self::Up, Self::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Gate => "gate",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown module kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: String,
    pub kind: ModuleKind,
    pub layer: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Modules that read one input tensor. The anchor produces the cached
/// projection; consumers reuse it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub group_id: String,
    pub anchor: String,
    pub consumers: Vec<String>,
    pub solo: bool,
}

impl LayerGroup {
    /// Anchor first, then consumers.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.anchor.as_str()).chain(self.consumers.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        1 + self.consumers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn solo(id: &str) -> Self {
        Self { group_id: id.to_string(), anchor: id.to_string(), consumers: Vec::new(), solo: true }
    }
}

/// Groups q/k/v (anchor q) and gate/up (anchor gate) per layer; o and down
/// run solo. Groups are ordered by layer, then q/k/v, o, gate/up, down.
/// A would-be group whose members disagree on input dim is split into solos.
pub fn plan_groups(modules: &[ModuleSpec]) -> Result<Vec<LayerGroup>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut slots = std::collections::BTreeSet::new();
    for m in modules {
        if !seen.insert(m.id.as_str()) {
            return Err(Error::invalid(format!("duplicate module id {}", m.id)));
        }
        if !slots.insert((m.layer, m.kind)) {
            return Err(Error::invalid(format!("layer {} has two {} modules", m.layer, m.kind)));
        }
    }
    let mut by_layer: BTreeMap<usize, Vec<&ModuleSpec>> = BTreeMap::new();
    for m in modules {
        by_layer.entry(m.layer).or_default().push(m);
    }

    let mut groups = Vec::new();
    for (layer, mut members) in by_layer {
        members.sort_by_key(|m| m.kind);
        let family = |name: &str, kinds: &[ModuleKind], groups: &mut Vec<LayerGroup>| {
            let fam: Vec<&&ModuleSpec> = members.iter().filter(|m| kinds.contains(&m.kind)).collect();
            if fam.is_empty() {
                return;
            }
            if fam.iter().any(|m| m.in_dim != fam[0].in_dim) {
                log::warn!("layer {layer} {name}: members disagree on input dim, running them solo");
                groups.extend(fam.iter().map(|m| LayerGroup::solo(&m.id)));
                return;
            }
            if fam.len() == 1 {
                groups.push(LayerGroup::solo(&fam[0].id));
                return;
            }
            groups.push(LayerGroup {
                group_id: format!("L{layer}.{name}"),
                anchor: fam[0].id.clone(),
                consumers: fam[1..].iter().map(|m| m.id.clone()).collect(),
                solo: false,
            });
        };
        family("attn", &[ModuleKind::Q, ModuleKind::K, ModuleKind::V], &mut groups);
        for m in members.iter().filter(|m| m.kind == ModuleKind::O) {
            groups.push(LayerGroup::solo(&m.id));
        }
        family("mlp", &[ModuleKind::Gate, ModuleKind::Up], &mut groups);
        for m in members.iter().filter(|m| m.kind == ModuleKind::Down) {
            groups.push(LayerGroup::solo(&m.id));
        }
    }
    Ok(groups)
}

/// Additive operation and storage counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub flops_quantized: u64,
    pub flops_right_proj: u64,
    pub flops_left_apply: u64,
    pub params_lowrank: u64,
    pub bytes_cache: u64,
}

impl CostLedger {
    pub fn total_flops(&self) -> u64 {
        self.flops_quantized + self.flops_right_proj + self.flops_left_apply
    }

    pub fn correction_flops(&self) -> u64 {
        self.flops_right_proj + self.flops_left_apply
    }
}

impl Add for CostLedger {
    type Output = CostLedger;

    fn add(mut self, rhs: CostLedger) -> CostLedger {
        self += rhs;
        self
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        self.flops_quantized += rhs.flops_quantized;
        self.flops_right_proj += rhs.flops_right_proj;
        self.flops_left_apply += rhs.flops_left_apply;
        self.params_lowrank += rhs.params_lowrank;
        self.bytes_cache += rhs.bytes_cache;
    }
}

impl std::iter::Sum for CostLedger {
    fn sum<I: Iterator<Item = CostLedger>>(iter: I) -> CostLedger {
        iter.fold(CostLedger::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    Shared,
    Layerwise,
}

impl CorrectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Shared => "shared",
            Self::Layerwise => "layerwise",
        }
    }
}

/// Low-rank parameter count of one group: shared `Σ O_i r + r d`,
/// layerwise `Σ (O_i r + r d)`.
pub fn param_count(out_dims: &[usize], in_dim: usize, rank: usize, mode: CorrectionMode) -> u64 {
    let left: u64 = out_dims.iter().map(|&o| (o * rank) as u64).sum();
    let right = (rank * in_dim) as u64;
    match mode {
        CorrectionMode::Shared => left + right,
        CorrectionMode::Layerwise => left + right * out_dims.len() as u64,
    }
}

/// Ledger of one batch through one group without running it: what
/// [`cached_forward`] (shared) or [`layerwise_forward`] records.
pub fn planned_cost(
    out_dims: &[usize],
    in_dim: usize,
    rank: usize,
    tokens: usize,
    mode: CorrectionMode,
    restore_active: bool,
) -> CostLedger {
    let (t, d, r) = (tokens as u64, in_dim as u64, rank as u64);
    let o_sum: u64 = out_dims.iter().map(|&o| o as u64).sum();
    let mut ledger = CostLedger { flops_quantized: 2 * t * d * o_sum, ..Default::default() };
    if restore_active {
        let projections = match mode {
            CorrectionMode::Shared => 1,
            CorrectionMode::Layerwise => out_dims.len() as u64,
        };
        ledger.flops_right_proj = 2 * t * d * r * projections;
        ledger.flops_left_apply = 2 * t * r * o_sum;
        ledger.params_lowrank = param_count(out_dims, in_dim, rank, mode);
        if mode == CorrectionMode::Shared {
            ledger.bytes_cache = t * r * 8;
        }
    }
    ledger
}

/// The group's cached right projection for one batch.
#[derive(Debug, Clone)]
pub struct CorrectionCache {
    pub group_id: String,
    pub r_cached: Matrix,
    pub produced_by: String,
    pub produced_count: usize,
    pub consumed_count: usize,
}

impl CorrectionCache {
    fn produce(group: &LayerGroup, x: &Matrix, b_shared: &Matrix) -> Self {
        Self {
            group_id: group.group_id.clone(),
            r_cached: x.matmul_t(b_shared),
            produced_by: group.anchor.clone(),
            produced_count: 1,
            consumed_count: 0,
        }
    }

    fn consume(&mut self) -> &Matrix {
        self.consumed_count += 1;
        &self.r_cached
    }
}

#[derive(Debug, Clone)]
pub struct GroupOutput {
    pub outputs: Vec<(String, Matrix)>,
    /// `None` when the group was inactive.
    pub cache: Option<CorrectionCache>,
}

impl GroupOutput {
    pub fn output(&self, module_id: &str) -> Option<&Matrix> {
        self.outputs.iter().find(|(id, _)| id == module_id).map(|(_, y)| y)
    }
}

fn quantized_weight<'a>(weights: &'a BTreeMap<String, Matrix>, id: &str, x: &Matrix) -> Result<&'a Matrix> {
    let w = weights
        .get(id)
        .ok_or_else(|| Error::invalid(format!("no quantized weight for module {id}")))?;
    if w.cols() != x.cols() {
        return Err(Error::shape(format!("module {id} expects input dim {}, x has {}", w.cols(), x.cols())));
    }
    Ok(w)
}

fn tokens_dims(x: &Matrix) -> (u64, u64) {
    (x.rows() as u64, x.cols() as u64)
}

/// Group forward with the right projection cached once.
///
/// `weights` maps module id to its dequantized weight `W_q` (O_i × d).
/// Outputs are `x W_qᵀ + R A_iᵀ` when active, `x W_qᵀ` otherwise.
pub fn cached_forward(
    x: &Matrix,
    group: &LayerGroup,
    weights: &BTreeMap<String, Matrix>,
    factors: &SharedFactors,
    restore_active: bool,
    ledger: &mut CostLedger,
) -> Result<GroupOutput> {
    if restore_active && factors.b_shared.cols() != x.cols() {
        return Err(Error::shape(format!(
            "B has input dim {}, x has {}",
            factors.b_shared.cols(),
            x.cols()
        )));
    }
    let (tokens, d) = tokens_dims(x);
    let r = factors.b_shared.rows() as u64;
    let mut cache = restore_active.then(|| CorrectionCache::produce(group, x, &factors.b_shared));
    if cache.is_some() {
        ledger.flops_right_proj += 2 * tokens * d * r;
        ledger.params_lowrank += r * d;
        ledger.bytes_cache += tokens * r * 8;
    }
    let mut outputs = Vec::with_capacity(group.len());
    for id in group.members() {
        let w = quantized_weight(weights, id, x)?;
        let o = w.rows() as u64;
        let mut y = x.matmul_t(w);
        ledger.flops_quantized += 2 * tokens * d * o;
        if let Some(cache) = cache.as_mut() {
            let a = factors
                .a_for(id)
                .ok_or_else(|| Error::invalid(format!("no left factor for module {id}")))?;
            if a.shape() != (w.rows(), factors.b_shared.rows()) {
                return Err(Error::shape(format!("A for {id} is {:?}, expected {}x{r}", a.shape(), w.rows())));
            }
            y = y.add(&cache.consume().matmul_t(a));
            ledger.flops_left_apply += 2 * tokens * r * o;
            ledger.params_lowrank += o * r;
        }
        outputs.push((id.to_string(), y));
    }
    Ok(GroupOutput { outputs, cache })
}

/// Per-module factors for the layerwise schedule.
#[derive(Debug, Clone, Copy)]
pub struct LayerwiseModule<'a> {
    pub id: &'a str,
    pub w_q: &'a Matrix,
    pub a: &'a Matrix,
    pub b: &'a Matrix,
}

/// Every module recomputes its own right projection `x B_iᵀ`.
pub fn layerwise_forward(
    x: &Matrix,
    modules: &[LayerwiseModule<'_>],
    restore_active: bool,
    ledger: &mut CostLedger,
) -> Result<Vec<(String, Matrix)>> {
    let (tokens, d) = tokens_dims(x);
    modules
        .iter()
        .map(|m| {
            if m.w_q.cols() != x.cols() {
                return Err(Error::shape(format!("module {} expects input dim {}", m.id, m.w_q.cols())));
            }
            let o = m.w_q.rows() as u64;
            let mut y = x.matmul_t(m.w_q);
            ledger.flops_quantized += 2 * tokens * d * o;
            if restore_active {
                if m.b.cols() != x.cols() || m.a.shape() != (m.w_q.rows(), m.b.rows()) {
                    return Err(Error::shape(format!(
                        "module {}: A {:?}, B {:?}",
                        m.id,
                        m.a.shape(),
                        m.b.shape()
                    )));
                }
                let r = m.b.rows() as u64;
                let proj = x.matmul_t(m.b);
                y = y.add(&proj.matmul_t(m.a));
                ledger.flops_right_proj += 2 * tokens * d * r;
                ledger.flops_left_apply += 2 * tokens * r * o;
                ledger.params_lowrank += o * r + r * d;
            }
            Ok((m.id.to_string(), y))
        })
        .collect()
}
