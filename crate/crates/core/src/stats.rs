//! Streaming second-moment estimation for structural residual calibration.
//!
//! Tracks the uncentered moments `E[x xᵀ]`, `E[δ xᵀ]` and `E[δ δᵀ]` of a
//! layer input `x` and its activation quantization error `δ`. Until `warmup`
//! samples have been seen, batches are folded into an exact running mean;
//! afterwards each batch moment enters an exponential average with the
//! configured momentum.

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WARMUP: usize = 200;

/// Finalized moment matrices.
#[derive(Debug, Clone)]
pub struct Moments {
    pub sigma_xx: Tensor2D,
    pub sigma_dx: Tensor2D,
    pub sigma_dd: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct CalibStats {
    sigma_xx: Tensor2D,
    sigma_dx: Tensor2D,
    sigma_dd: Tensor2D,
    samples_seen: usize,
    momentum: f64,
    warmup: usize,
}

impl CalibStats {
    pub fn new(dim: usize, momentum: f64, warmup: usize) -> Result<Self> {
        if dim == 0 {
            return Err(HarmoqError::dim("CalibStats: zero feature dimension"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(HarmoqError::config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            sigma_xx: Tensor2D::zeros(dim, dim),
            sigma_dx: Tensor2D::zeros(dim, dim),
            sigma_dd: Tensor2D::zeros(dim, dim),
            samples_seen: 0,
            momentum,
            warmup,
        })
    }

    pub fn with_defaults(dim: usize) -> Result<Self> {
        Self::new(dim, DEFAULT_MOMENTUM, DEFAULT_WARMUP)
    }

    pub fn dim(&self) -> usize {
        self.sigma_xx.rows()
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    /// Folds one batch of inputs `x` (`n×d`) and their errors `dx` (`n×d`) into the estimate.
    pub fn update(&mut self, x: &Tensor2D, dx: &Tensor2D) -> Result<()> {
        if x.shape() != dx.shape() {
            return Err(HarmoqError::dim(format!(
                "update_stats: x is {:?}, dx is {:?}",
                x.shape(),
                dx.shape()
            )));
        }
        if x.cols() != self.dim() {
            return Err(HarmoqError::dim(format!(
                "update_stats: batch width {} but stats dimension {}",
                x.cols(),
                self.dim()
            )));
        }
        let n = x.rows();
        if n == 0 {
            return Ok(());
        }
        let inv_n = 1.0 / n as f64;
        let bxx = x.t_matmul(x)?.scaled(inv_n);
        let bdx = dx.t_matmul(x)?.scaled(inv_n);
        let bdd = dx.t_matmul(dx)?.scaled(inv_n);

        let (w_old, w_new) = if self.samples_seen < self.warmup {
            let total = (self.samples_seen + n) as f64;
            (self.samples_seen as f64 / total, n as f64 / total)
        } else {
            (self.momentum, 1.0 - self.momentum)
        };
        blend(&mut self.sigma_xx, &bxx, w_old, w_new);
        blend(&mut self.sigma_dx, &bdx, w_old, w_new);
        blend(&mut self.sigma_dd, &bdd, w_old, w_new);
        self.samples_seen += n;
        Ok(())
    }

    /// Returns the moments with `Σ_xx` and `Σ_δδ` symmetrized.
    pub fn finalize(&self) -> Result<Moments> {
        if self.samples_seen < self.warmup {
            return Err(HarmoqError::State(format!(
                "finalize after {} samples, warmup needs {}",
                self.samples_seen, self.warmup
            )));
        }
        Ok(Moments {
            sigma_xx: self.sigma_xx.symmetrized()?,
            sigma_dx: self.sigma_dx.clone(),
            sigma_dd: self.sigma_dd.symmetrized()?,
        })
    }
}

/// Functional form of [`CalibStats::update`].
pub fn update_stats(mut stats: CalibStats, x: &Tensor2D, dx: &Tensor2D) -> Result<CalibStats> {
    stats.update(x, dx)?;
    Ok(stats)
}

fn blend(acc: &mut Tensor2D, batch: &Tensor2D, w_old: f64, w_new: f64) {
    for (a, &b) in acc.data_mut().iter_mut().zip(batch.data()) {
        *a = w_old * *a + w_new * b;
    }
}
