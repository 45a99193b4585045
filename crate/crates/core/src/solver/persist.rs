//! Factor files: `A_<module>.glxm` per module, `B_shared.glxm`, and a
//! `factors.json` manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SharedFactors, SolveConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorManifest {
    pub group_id: String,
    pub module_ids: Vec<String>,
    pub rank: usize,
    pub input_dim: usize,
    pub whitened: bool,
    pub residual_weighted: f64,
    pub residual_unweighted: f64,
    pub config: Option<SolveConfig>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::invalid(format!("module id {id:?} is not a valid file name component")));
    }
    Ok(())
}

pub fn save_factors(
    dir: &Path,
    group_id: &str,
    factors: &SharedFactors,
    config: Option<SolveConfig>,
) -> Result<FactorManifest> {
    for (id, a) in &factors.a_blocks {
        check_id(id)?;
        io::write_matrix(&dir.join(format!("A_{id}.glxm")), a)?;
    }
    io::write_matrix(&dir.join("B_shared.glxm"), &factors.b_shared)?;
    let manifest = FactorManifest {
        group_id: group_id.to_string(),
        module_ids: factors.a_blocks.iter().map(|(id, _)| id.clone()).collect(),
        rank: factors.rank,
        input_dim: factors.b_shared.cols(),
        whitened: factors.whitened,
        residual_weighted: factors.residual_weighted,
        residual_unweighted: factors.residual_unweighted,
        config,
    };
    io::write_json(&dir.join("factors.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_factors(dir: &Path) -> Result<(SharedFactors, FactorManifest)> {
    let manifest: FactorManifest = io::read_json(&dir.join("factors.json"))?;
    let b_shared = io::read_matrix(&dir.join("B_shared.glxm"))?;
    if b_shared.shape() != (manifest.rank, manifest.input_dim) {
        return Err(Error::Format(format!(
            "B_shared is {:?}, manifest says {}x{}",
            b_shared.shape(),
            manifest.rank,
            manifest.input_dim
        )));
    }
    let mut a_blocks = Vec::with_capacity(manifest.module_ids.len());
    for id in &manifest.module_ids {
        check_id(id)?;
        let a: Matrix = io::read_matrix(&dir.join(format!("A_{id}.glxm")))?;
        if a.cols() != manifest.rank {
            return Err(Error::Format(format!("A_{id} has {} columns, rank is {}", a.cols(), manifest.rank)));
        }
        a_blocks.push((id.clone(), a));
    }
    let factors = SharedFactors {
        a_blocks,
        b_shared,
        rank: manifest.rank,
        whitened: manifest.whitened,
        residual_weighted: manifest.residual_weighted,
        residual_unweighted: manifest.residual_unweighted,
    };
    Ok((factors, manifest))
}
