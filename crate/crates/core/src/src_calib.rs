//! Structural residual calibration: a closed-form weight correction that
//! cancels the part of the activation-error response `W δx` explainable by
//! the structural features `H x` of the layer input.
//!
//! The correction is restricted to the row space of `H`, i.e. `δW = Γ H`
//! with coefficients `Γ ∈ R^{m×k}` solving the ridge problem
//!
//! ```text
//! min_Γ  E‖W δx + Γ H x‖² + λ‖Γ‖²
//! Γ* = −W Σ_δx Hᵀ (H Σ_xx Hᵀ + λ I_k)⁻¹,    δW* = Γ* H
//! ```
//!
//! [`src_objective`] extends this to arbitrary `m×d` corrections by also
//! penalizing the component outside the row space, which keeps the objective
//! strictly convex with `δW*` as its unique minimizer. For `H = I` the
//! problem is plain ridge regression.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::{cholesky_solve, Tensor2D, DEFAULT_SOLVER_EPS};
use crate::projection::ProjectionMatrix;
use crate::stats::Moments;

pub const DEFAULT_LAMBDA: f64 = 1e-2;

const REFINE_SWEEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrcConfig {
    pub lambda: f64,
    pub solver_eps: f64,
}

impl Default for SrcConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, solver_eps: DEFAULT_SOLVER_EPS }
    }
}

impl SrcConfig {
    pub fn new(lambda: f64, solver_eps: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(HarmoqError::config(format!("SRC lambda must be > 0, got {lambda}")));
        }
        if !(solver_eps >= 0.0) {
            return Err(HarmoqError::config(format!("SRC solver_eps must be >= 0, got {solver_eps}")));
        }
        Ok(Self { lambda, solver_eps })
    }
}

fn check_shapes(w: &Tensor2D, m: &Moments, h: &Tensor2D) -> Result<()> {
    let d = w.cols();
    for (name, s) in [("Σ_xx", &m.sigma_xx), ("Σ_δx", &m.sigma_dx), ("Σ_δδ", &m.sigma_dd)] {
        if s.shape() != (d, d) {
            return Err(HarmoqError::dim(format!("{name} is {:?}, expected {d}x{d}", s.shape())));
        }
    }
    if h.cols() != d {
        return Err(HarmoqError::dim(format!("H is {:?}, expected k x {d}", h.shape())));
    }
    Ok(())
}

/// Closed-form correction `δW* = −W Σ_δx Hᵀ (H Σ_xx Hᵀ + λI)⁻¹ H`.
///
/// Products are ordered so the cost is `O(k d² + m k d + k³)`.
pub fn compute_src_correction(
    w: &Tensor2D,
    moments: &Moments,
    proj: &ProjectionMatrix,
    cfg: &SrcConfig,
) -> Result<Tensor2D> {
    let h = &proj.h;
    check_shapes(w, moments, h)?;
    let gram = h.matmul(&moments.sigma_xx.matmul_t(h)?)?.symmetrized()?.add_diagonal(cfg.lambda)?;
    let rhs = w.matmul(&moments.sigma_dx.matmul_t(h)?)?;
    // The stabilized factor solves a system shifted by solver_eps; refinement
    // sweeps against the unshifted Gram matrix remove that bias.
    let mut coeffs = cholesky_solve(&gram, &rhs, cfg.solver_eps)?;
    if cfg.solver_eps > 0.0 {
        for _ in 0..REFINE_SWEEPS {
            let resid = rhs.sub(&coeffs.matmul(&gram)?)?;
            coeffs = coeffs.add(&cholesky_solve(&gram, &resid, cfg.solver_eps)?)?;
        }
    }
    Ok(coeffs.matmul(h)?.scaled(-1.0))
}

/// Pieces of the row-space geometry of `H`: the pseudo-inverse `C = Hᵀ(HHᵀ)⁻¹`
/// and the orthogonal projector `P = C H`.
struct RowSpace {
    pinv: Tensor2D,
    projector: Tensor2D,
}

fn row_space(h: &Tensor2D) -> Result<RowSpace> {
    let hht = h.matmul_t(h)?.symmetrized()?;
    let pinv = cholesky_solve(&hht, &h.transpose(), 0.0)
        .map_err(|e| HarmoqError::Singular(format!("H lacks full row rank: {e}")))?;
    let projector = pinv.matmul(h)?;
    Ok(RowSpace { pinv, projector })
}

/// Calibration objective in second-moment form:
///
/// ```text
/// tr(W Σ_δδ Wᵀ) + 2 tr(W Σ_δx P δWᵀ) + tr(δW P Σ_xx P δWᵀ)
///   + λ (‖δW C‖² + ‖δW (I − P)‖²)
/// ```
///
/// For `δW = Γ H` this equals `E‖W δx + δW x‖² + λ‖Γ‖²`.
pub fn src_objective(
    delta_w: &Tensor2D,
    w: &Tensor2D,
    moments: &Moments,
    proj: &ProjectionMatrix,
    lambda: f64,
) -> Result<f64> {
    let h = &proj.h;
    check_shapes(w, moments, h)?;
    if delta_w.shape() != w.shape() {
        return Err(HarmoqError::dim(format!(
            "deltaW is {:?}, W is {:?}",
            delta_w.shape(),
            w.shape()
        )));
    }
    let rs = row_space(h)?;
    let d = w.cols();

    let constant = w.matmul(&moments.sigma_dd)?.matmul_t(w)?.trace();
    let dw_p = delta_w.matmul(&rs.projector)?;
    let cross = w.matmul(&moments.sigma_dx)?.matmul_t(&dw_p)?.trace();
    let quad = dw_p.matmul(&moments.sigma_xx)?.matmul_t(&dw_p)?.trace();
    let coeff_norm = delta_w.matmul(&rs.pinv)?.frobenius_norm().powi(2);
    let complement = delta_w
        .matmul(&Tensor2D::identity(d).sub(&rs.projector)?)?
        .frobenius_norm()
        .powi(2);
    Ok(constant + 2.0 * cross + quad + lambda * (coeff_norm + complement))
}
