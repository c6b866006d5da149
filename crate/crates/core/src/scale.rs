//! Harmonized scale: the activation/weight MSE model as a function of the
//! per-layer scale `s`, its closed-form balancing solution, and the
//! forward-equivalent rescaling `(sW)(x/s) = Wx`.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;
use crate::quantizer::{range_mse, QuantizerConfig, MIN_GAP};

pub const SCALE_MIN: f64 = 0.1;
pub const SCALE_MAX: f64 = 10.0;

/// Clipping boundaries `θ = (α_x, β_x, α_w, β_w)` of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub alpha_x: f64,
    pub beta_x: f64,
    pub alpha_w: f64,
    pub beta_w: f64,
}

impl BoundarySet {
    pub fn new(alpha_x: f64, beta_x: f64, alpha_w: f64, beta_w: f64) -> Result<Self> {
        let b = Self { alpha_x, beta_x, alpha_w, beta_w };
        if !b.is_feasible() {
            return Err(HarmoqError::config(format!("infeasible boundaries {b:?}")));
        }
        Ok(b)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.alpha_x, self.beta_x, self.alpha_w, self.beta_w]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self { alpha_x: v[0], beta_x: v[1], alpha_w: v[2], beta_w: v[3] }
    }

    pub fn is_feasible(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.alpha_x <= self.beta_x - MIN_GAP
            && self.alpha_w <= self.beta_w - MIN_GAP
    }

    /// Projection onto the feasible set: `α ← min(α, β − gap)`, then `β ← max(β, α + gap)`.
    pub fn project(self) -> Self {
        let fix = |a: f64, b: f64| {
            let a = a.min(b - MIN_GAP);
            (a, b.max(a + MIN_GAP))
        };
        let (alpha_x, beta_x) = fix(self.alpha_x, self.beta_x);
        let (alpha_w, beta_w) = fix(self.alpha_w, self.beta_w);
        Self { alpha_x, beta_x, alpha_w, beta_w }
    }

    pub fn range_x(&self) -> f64 {
        self.beta_x - self.alpha_x
    }

    pub fn range_w(&self) -> f64 {
        self.beta_w - self.alpha_w
    }

    /// Bounds as seen by the quantizers of the rescaled tensors `x/s` and `sW`.
    pub fn to_scaled_frame(self, s: f64) -> Self {
        Self {
            alpha_x: self.alpha_x / s,
            beta_x: self.beta_x / s,
            alpha_w: self.alpha_w * s,
            beta_w: self.beta_w * s,
        }
    }

    pub fn from_scaled_frame(self, s: f64) -> Self {
        self.to_scaled_frame(1.0 / s)
    }

    pub fn activation_config(&self, bits: u32) -> Result<QuantizerConfig> {
        QuantizerConfig::new(bits, self.alpha_x, self.beta_x)
    }

    pub fn weight_config(&self, bits: u32) -> Result<QuantizerConfig> {
        QuantizerConfig::new(bits, self.alpha_w, self.beta_w)
    }
}

/// Smallest box containing every layer's ranges, for a single shared scale.
pub fn pooled_bounds(sets: &[BoundarySet]) -> Option<BoundarySet> {
    sets.iter().copied().reduce(|a, b| BoundarySet {
        alpha_x: a.alpha_x.min(b.alpha_x),
        beta_x: a.beta_x.max(b.beta_x),
        alpha_w: a.alpha_w.min(b.alpha_w),
        beta_w: a.beta_w.max(b.beta_w),
    })
}

/// A per-layer scale clamped to `[SCALE_MIN, SCALE_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScale {
    value: f64,
    clamped: bool,
}

impl LayerScale {
    pub const IDENTITY: LayerScale = LayerScale { value: 1.0, clamped: false };

    pub fn new(raw: f64) -> Self {
        let value = raw.clamp(SCALE_MIN, SCALE_MAX);
        Self { value, clamped: value != raw }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    /// Whether the unclamped value fell outside the bounds.
    pub fn was_clamped(self) -> bool {
        self.clamped
    }
}

impl Default for LayerScale {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Activation,
    Weight,
}

/// Model MSE of one side after rescaling by `s`.
pub fn component_mse(side: Side, s: f64, theta: &BoundarySet, bits: u32) -> Result<f64> {
    if !(s > 0.0) {
        return Err(HarmoqError::config(format!("scale must be > 0, got {s}")));
    }
    Ok(match side {
        Side::Activation => range_mse(theta.range_x(), bits) / (s * s),
        Side::Weight => range_mse(theta.range_w(), bits) * s * s,
    })
}

/// `|MSE_x(s) − MSE_w(s)|` under the model.
pub fn balance_gap(s: f64, theta: &BoundarySet, bits_x: u32, bits_w: u32) -> Result<f64> {
    Ok((component_mse(Side::Activation, s, theta, bits_x)? - component_mse(Side::Weight, s, theta, bits_w)?).abs())
}

/// Unclamped `s* = sqrt(((β_x − α_x)(2^{b_w} − 1)) / ((β_w − α_w)(2^{b_x} − 1)))`.
pub fn optimal_scale_raw(theta: &BoundarySet, bits_x: u32, bits_w: u32) -> f64 {
    let lx = ((1u64 << bits_x) - 1) as f64;
    let lw = ((1u64 << bits_w) - 1) as f64;
    ((theta.range_x() * lw) / (theta.range_w() * lx)).sqrt()
}

pub fn optimal_scale(theta: &BoundarySet, bits_x: u32, bits_w: u32) -> LayerScale {
    LayerScale::new(optimal_scale_raw(theta, bits_x, bits_w))
}

/// `(s·W, x/s)`; the full-precision product is unchanged.
pub fn apply_scale(w: &Tensor2D, x: &Tensor2D, s: f64) -> (Tensor2D, Tensor2D) {
    (w.scaled(s), x.scaled(1.0 / s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_gaussian, seeded_rng};
    use crate::quantizer::theoretical_mse;
    use rand::Rng;

    fn theta(rx: f64, rw: f64) -> BoundarySet {
        BoundarySet::new(-rx / 2.0, rx / 2.0, -rw / 2.0, rw / 2.0).unwrap()
    }

    #[test]
    fn unit_scale_matches_theoretical_mse() {
        let t = BoundarySet::new(-1.0, 1.0, -0.3, 0.2).unwrap();
        let a = component_mse(Side::Activation, 1.0, &t, 2).unwrap();
        assert!((a - 4.0 / 108.0).abs() < 1e-15);
        assert_eq!(a, theoretical_mse(&t.activation_config(2).unwrap()));
        assert_eq!(component_mse(Side::Weight, 1.0, &t, 4).unwrap(), theoretical_mse(&t.weight_config(4).unwrap()));
    }

    #[test]
    fn doubling_scale() {
        let t = theta(2.0, 0.5);
        let a1 = component_mse(Side::Activation, 1.0, &t, 3).unwrap();
        let a2 = component_mse(Side::Activation, 2.0, &t, 3).unwrap();
        let w1 = component_mse(Side::Weight, 1.0, &t, 3).unwrap();
        let w2 = component_mse(Side::Weight, 2.0, &t, 3).unwrap();
        assert!((a2 - a1 / 4.0).abs() < 1e-15 && (w2 - 4.0 * w1).abs() < 1e-15);
        assert!(component_mse(Side::Weight, 0.0, &t, 3).is_err());
    }

    #[test]
    fn optimal_scale_examples() {
        assert_eq!(optimal_scale(&theta(1.0, 1.0), 4, 4).value(), 1.0);
        assert!((optimal_scale(&theta(4.0, 1.0), 4, 4).value() - 2.0).abs() < 1e-15);
        let t = theta(2.0, 0.5);
        assert!((optimal_scale_raw(&t, 2, 8) - 340f64.sqrt()).abs() < 1e-12);
        let s = optimal_scale(&t, 2, 8);
        assert_eq!(s.value(), 10.0);
        assert!(s.was_clamped());
    }

    #[test]
    fn balance_identity_on_random_configs() {
        let mut rng = seeded_rng(77);
        let mut checked = 0;
        while checked < 1000 {
            let ax = rng.random_range(-5.0..5.0);
            let aw = rng.random_range(-2.0..2.0);
            let t = BoundarySet::new(ax, ax + rng.random_range(0.01..10.0), aw, aw + rng.random_range(0.01..4.0)).unwrap();
            let (bx, bw) = (rng.random_range(2..=8), rng.random_range(2..=8));
            let s = optimal_scale(&t, bx, bw);
            if s.was_clamped() {
                continue;
            }
            let ma = component_mse(Side::Activation, s.value(), &t, bx).unwrap();
            let mw = component_mse(Side::Weight, s.value(), &t, bw).unwrap();
            assert!((ma - mw).abs() <= 1e-12 * ma, "{t:?} {bx} {bw}");
            checked += 1;
        }
    }

    #[test]
    fn clamp_monotone_in_activation_range() {
        let mut last = 0.0;
        for i in 1..400 {
            let s = optimal_scale(&theta(0.01 * i as f64 * 3.0, 0.7), 3, 5).value();
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn rescaling_preserves_forward() {
        let w = seeded_gaussian(5, 7, 1).unwrap();
        let x = seeded_gaussian(7, 9, 2).unwrap();
        let (ws, xs) = apply_scale(&w, &x, 3.0);
        let y = w.matmul(&x).unwrap();
        let ys = ws.matmul(&xs).unwrap();
        assert!(ys.sub(&y).unwrap().frobenius_norm() <= 1e-12 * y.frobenius_norm());
        let (w1, x1) = apply_scale(&w, &x, 1.0);
        assert_eq!((w1, x1), (w, x));
    }

    #[test]
    fn scaled_weight_bounds_quadruple_mse() {
        let t = BoundarySet::new(-1.0, 1.0, -0.4, 0.6).unwrap();
        let scaled = t.to_scaled_frame(2.0);
        let ratio = theoretical_mse(&scaled.weight_config(4).unwrap()) / theoretical_mse(&t.weight_config(4).unwrap());
        assert!((ratio - 4.0).abs() < 1e-12);
        let back = scaled.from_scaled_frame(2.0);
        assert!((back.alpha_w - t.alpha_w).abs() < 1e-15 && (back.beta_x - t.beta_x).abs() < 1e-15);
    }

    #[test]
    fn projection_restores_gap() {
        let p = BoundarySet { alpha_x: 0.5, beta_x: 0.495, alpha_w: 0.0, beta_w: 1.0 }.project();
        assert!(p.is_feasible());
        assert_eq!(p.alpha_x, 0.495 - MIN_GAP);
        assert_eq!(p.alpha_w, 0.0);
    }
}
