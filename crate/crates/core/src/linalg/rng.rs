//! Counter-based Gaussian sampling.
//!
//! The generator is stateless apart from a `(seed, counter)` pair, so any
//! other implementation can reproduce a sketch bit-for-bit:
//!
//! * word `k` of stream `seed` is `mix(seed + (k + 1) * 0x9E3779B97F4A7C15)`
//!   where `mix` is the SplitMix64 finalizer (wrapping arithmetic);
//! * a uniform in `(0, 1]` is `((word >> 11) + 1) * 2^-53`;
//! * normals come in Box-Muller pairs: uniforms `u1 = U(2j)` and
//!   `u2 = U(2j + 1)` give `sqrt(-2 ln u1) * cos(2π u2)` for normal `2j` and
//!   `sqrt(-2 ln u1) * sin(2π u2)` for normal `2j + 1`.
//!
//! Matrices are filled in row-major order from normal index 0.

use super::Matrix;
use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word `counter` of stream `seed`.
#[inline]
pub fn counter_word(seed: u64, counter: u64) -> u64 {
    mix(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

#[inline]
fn unit_open_closed(word: u64) -> f64 {
    ((word >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent stream seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(mix(seed ^ 0xD1B5_4A32_D192_ED03).wrapping_add(tag.wrapping_mul(GOLDEN_GAMMA)))
}

/// Stable 64-bit tag for a string label (FNV-1a).
pub fn label_tag(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Sequential reader over the normal stream of one seed.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    seed: u64,
    next_normal: u64,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, next_normal: 0, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            self.next_normal += 1;
            return z;
        }
        let pair = self.next_normal / 2;
        let u1 = unit_open_closed(counter_word(self.seed, 2 * pair));
        let u2 = unit_open_closed(counter_word(self.seed, 2 * pair + 1));
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        self.next_normal += 1;
        radius * angle.cos()
    }

    /// Uniform draw in `(0, 1]` from a separate counter range of the stream.
    pub fn uniform(&self, index: u64) -> f64 {
        unit_open_closed(counter_word(self.seed ^ 0x5555_5555_5555_5555, index))
    }
}

/// `rows × cols` matrix of i.i.d. standard normals, deterministic in `seed`.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!("degenerate {rows}x{cols} gaussian matrix")));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::invalid("gaussian matrix size overflows"))?;
    let mut stream = GaussianStream::new(seed);
    let data = (0..len).map(|_| stream.next_normal()).collect();
    Ok(Matrix::from_vec_unchecked(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gaussian_matrix(7, 5, 42).unwrap();
        let b = gaussian_matrix(7, 5, 42).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn different_seeds_differ() {
        let a = gaussian_matrix(4, 4, 1).unwrap();
        let b = gaussian_matrix(4, 4, 2).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn moments_within_five_sigma() {
        // n = 10_000: sd(mean) = 0.01, sd(var) ≈ sqrt(2/n) = 0.014
        let m = gaussian_matrix(10_000, 1, 2024).unwrap();
        let n = m.rows() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((0.93..=1.07).contains(&var), "var {var}");
    }

    #[test]
    fn stream_matches_matrix_fill() {
        let m = gaussian_matrix(3, 3, 9).unwrap();
        let mut s = GaussianStream::new(9);
        for &v in m.as_slice() {
            assert_eq!(v, s.next_normal());
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(gaussian_matrix(0, 3, 1).is_err());
    }
}
