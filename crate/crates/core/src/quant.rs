//! Symmetric group-wise integer weight quantization.
//!
//! Each row of an `O × d` weight is cut into groups of `group_size`
//! consecutive input features (the last group may be short). A group is
//! stored as integer codes in `[-qmax, qmax]`, `qmax = 2^(bits-1) - 1`,
//! times one scale `max|w| / qmax`. Codes are rounded half-to-even.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub group_size: usize,
    #[serde(default = "default_symmetric")]
    pub symmetric: bool,
}

fn default_symmetric() -> bool {
    true
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bits: 4, group_size: 128, symmetric: true }
    }
}

impl QuantConfig {
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        let cfg = Self { bits, group_size, symmetric: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 3, 4, 8].contains(&self.bits) {
            return Err(Error::invalid(format!("bits must be one of 2, 3, 4, 8 (got {})", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        if !self.symmetric {
            return Err(Error::invalid("only symmetric quantization is supported"));
        }
        Ok(())
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    codes: Vec<i32>,
    scales: Matrix,
    rows: usize,
    cols: usize,
    config: QuantConfig,
}

impl QuantizedLinear {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn code(&self, i: usize, j: usize) -> i32 {
        self.codes[i * self.cols + j]
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    /// `rows × ⌈cols / group_size⌉`
    pub fn scales(&self) -> &Matrix {
        &self.scales
    }

    pub fn scale_for(&self, i: usize, j: usize) -> f64 {
        self.scales[(i, j / self.config.group_size)]
    }

    /// Writes `<stem>.codes.glxm`, `<stem>.scales.glxm` and `<stem>.quant.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let codes = Matrix::new(self.rows, self.cols, self.codes.iter().map(|&c| c as f64).collect())?;
        io::write_matrix(&io::with_suffix(stem, ".codes.glxm"), &codes)?;
        io::write_matrix(&io::with_suffix(stem, ".scales.glxm"), &self.scales)?;
        io::write_json(
            &io::with_suffix(stem, ".quant.json"),
            &QuantSidecar { rows: self.rows, cols: self.cols, config: self.config },
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side: QuantSidecar = io::read_json(&io::with_suffix(stem, ".quant.json"))?;
        side.config.validate()?;
        let codes_m = io::read_matrix(&io::with_suffix(stem, ".codes.glxm"))?;
        let scales = io::read_matrix(&io::with_suffix(stem, ".scales.glxm"))?;
        if codes_m.shape() != (side.rows, side.cols)
            || scales.shape() != (side.rows, side.config.groups_per_row(side.cols))
        {
            return Err(Error::Format("quantized layer files disagree on shape".into()));
        }
        let qmax = side.config.qmax() as f64;
        let mut codes = Vec::with_capacity(codes_m.as_slice().len());
        for &c in codes_m.as_slice() {
            if c.fract() != 0.0 || c.abs() > qmax + 1.0 {
                return Err(Error::Format(format!("code {c} outside the {}-bit range", side.config.bits)));
            }
            codes.push(c as i32);
        }
        if scales.as_slice().iter().any(|&s| s < 0.0) {
            return Err(Error::Format("negative quantization scale".into()));
        }
        Ok(Self { codes, scales, rows: side.rows, cols: side.cols, config: side.config })
    }
}

#[derive(Serialize, Deserialize)]
struct QuantSidecar {
    rows: usize,
    cols: usize,
    config: QuantConfig,
}

pub fn quantize(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedLinear> {
    cfg.validate()?;
    let (rows, cols) = w.shape();
    let groups = cfg.groups_per_row(cols);
    let qmax = cfg.qmax();
    let mut scales = Matrix::zeros(rows, groups);
    let mut codes = vec![0i32; rows * cols];
    for i in 0..rows {
        let row = w.row(i);
        for g in 0..groups {
            let start = g * cfg.group_size;
            let end = (start + cfg.group_size).min(cols);
            let max_abs = row[start..end].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs == 0.0 {
                continue;
            }
            let scale = max_abs / qmax as f64;
            scales[(i, g)] = scale;
            for j in start..end {
                let c = (row[j] / scale).round_ties_even() as i32;
                codes[i * cols + j] = c.clamp(-qmax, qmax);
            }
        }
    }
    Ok(QuantizedLinear { codes, scales, rows, cols, config: *cfg })
}

pub fn dequantize(q: &QuantizedLinear) -> Matrix {
    let mut out = Matrix::zeros(q.rows, q.cols);
    for i in 0..q.rows {
        for j in 0..q.cols {
            out[(i, j)] = q.code(i, j) as f64 * q.scale_for(i, j);
        }
    }
    out
}

/// `E = W − dequantize(q)`.
pub fn error_matrix(w: &Matrix, q: &QuantizedLinear) -> Result<Matrix> {
    if w.shape() != q.shape() {
        return Err(Error::shape(format!(
            "weight {:?} vs quantized {:?}",
            w.shape(),
            q.shape()
        )));
    }
    Ok(w.sub(&dequantize(q)))
}
