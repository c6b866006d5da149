//! Uniform affine fake-quantization with explicit clipping bounds, its
//! closed-form error model and the MinMax / Percentile range calibrators.
//!
//! The grid is anchored at the lower bound: levels are `α + n·Δ` for
//! `n ∈ {0, …, 2^b − 1}` with `Δ = (β − α)/(2^b − 1)`. Level indices are
//! rounded half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;

/// Minimum width of a clipping range.
pub const MIN_GAP: f64 = 0.01;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Bit-width and clipping range of one quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub alpha: f64,
    pub beta: f64,
}

impl QuantizerConfig {
    pub fn new(bits: u32, alpha: f64, beta: f64) -> Result<Self> {
        check_bits(bits)?;
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(HarmoqError::config("non-finite clipping bound"));
        }
        if alpha > beta - MIN_GAP {
            return Err(HarmoqError::config(format!(
                "clipping range [{alpha}, {beta}] narrower than {MIN_GAP}"
            )));
        }
        Ok(Self { bits, alpha, beta })
    }

    /// Symmetric range `[-max_abs, max_abs]` (zero-point fixed at 0).
    pub fn symmetric(bits: u32, max_abs: f64) -> Result<Self> {
        let m = max_abs.abs().max(MIN_GAP / 2.0);
        Self::new(bits, -m, m)
    }

    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn step_size(&self) -> f64 {
        step_size(self)
    }

    /// Fake-quantizes one value, returning the output and its level index.
    pub fn quantize_scalar(&self, z: f64) -> (f64, u32) {
        let delta = self.step_size();
        let max_index = self.levels() as f64;
        let idx = ((z - self.alpha) / delta).clamp(0.0, max_index).round_ties_even();
        let q = (self.alpha + idx * delta).clamp(self.alpha, self.beta);
        (q, idx as u32)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(HarmoqError::config(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok(())
}

/// `Δ = (β − α)/(2^b − 1)`.
pub fn step_size(cfg: &QuantizerConfig) -> f64 {
    (cfg.beta - cfg.alpha) / cfg.levels() as f64
}

/// Elementwise fake quantization.
pub fn fake_quantize(z: &Tensor2D, cfg: &QuantizerConfig) -> Result<Tensor2D> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(HarmoqError::data("fake_quantize: non-finite input"));
    }
    Ok(z.map(|v| cfg.quantize_scalar(v).0))
}

/// `fake_quantize(z) − z`, elementwise.
pub fn quant_error(z: &Tensor2D, cfg: &QuantizerConfig) -> Result<Tensor2D> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(HarmoqError::data("quant_error: non-finite input"));
    }
    Ok(z.map(|v| cfg.quantize_scalar(v).0 - v))
}

/// Mean squared error of uniformly distributed inputs: `(β − α)² / (12 (2^b − 1)²)`.
pub fn theoretical_mse(cfg: &QuantizerConfig) -> f64 {
    range_mse(cfg.beta - cfg.alpha, cfg.bits)
}

pub(crate) fn range_mse(range: f64, bits: u32) -> f64 {
    let levels = ((1u64 << bits) - 1) as f64;
    range * range / (12.0 * levels * levels)
}

/// Widens `[lo, hi]` symmetrically about its midpoint to at least [`MIN_GAP`].
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < MIN_GAP {
        let mid = 0.5 * (lo + hi);
        (mid - MIN_GAP / 2.0, mid + MIN_GAP / 2.0)
    } else {
        (lo, hi)
    }
}

/// Sample extrema, widened when degenerate.
pub fn minmax_bounds(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(HarmoqError::data("minmax_bounds: no samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(HarmoqError::data("minmax_bounds: non-finite sample"));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(widen(lo, hi))
}

/// Linear-interpolation percentile of already sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Two-sided percentile range keeping the central `p` percent of samples.
pub fn percentile_bounds(samples: &[f64], p: f64) -> Result<(f64, f64)> {
    if !(p > 50.0 && p <= 100.0) {
        return Err(HarmoqError::config(format!("percentile {p} outside (50, 100]")));
    }
    if samples.len() < 2 {
        return Err(HarmoqError::data("percentile_bounds: need at least two samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(HarmoqError::data("percentile_bounds: non-finite sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if max - min < MIN_GAP {
        return Ok(widen(min, max));
    }
    let tail = (100.0 - p) / 2.0;
    let (mut lo, mut hi) = widen(percentile_sorted(&sorted, tail), percentile_sorted(&sorted, p + tail));
    // A widened window stays inside the sample range.
    if lo < min {
        hi += min - lo;
        lo = min;
    }
    if hi > max {
        lo -= hi - max;
        hi = max;
    }
    Ok((lo, hi))
}
