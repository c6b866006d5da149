//! Adaptive boundary refinement: the compound layer loss, its
//! straight-through gradients with respect to the clipping bounds, and the
//! projected Adam update of the bounds.
//!
//! The bounds are optimized in the rescaled frame: the activation quantizer
//! sees `x/s` with bounds `(α_x/s, β_x/s)` and the weight quantizer sees `sW`
//! with bounds `(sα_w, sβ_w)`. The residual of one sample is
//!
//! ```text
//! r = (sW)·δx + δW·(x/s) + (W − W_ref)·x
//! ```
//!
//! where the last term is the drift of the current weights from a reference
//! (zero unless a reference is supplied). Because the quantizer is
//! scale-equivariant the residual itself does not depend on `s`; only the
//! gradient with respect to the rescaled bounds does.
//!
//! Inside a network the activation quantizer sees the layer input produced by
//! the already-quantized upstream layers, `x̃`, rather than the full-precision
//! input `x`. The activation error is then `δx = Q(x̃/s) − x/s`, which carries
//! the upstream deviation as well as this layer's rounding.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;
use crate::quantizer::QuantizerConfig;
use crate::scale::BoundarySet;

/// Bit-widths of the activation and weight quantizers of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidths {
    pub act: u32,
    pub weight: u32,
}

impl BitWidths {
    pub fn new(act: u32, weight: u32) -> Self {
        Self { act, weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    /// Step count over which the cosine schedule decays to `lr_final`.
    pub horizon: usize,
    pub grad_clip_norm: f64,
    pub steps_per_round: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-2,
            lr_final: 1e-4,
            warmup_steps: 300,
            horizon: 3000,
            grad_clip_norm: 1.0,
            steps_per_round: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final <= self.lr_init) || !(self.lr_final >= 0.0) {
            return Err(HarmoqError::config("refiner: need 0 <= lr_final <= lr_init"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(HarmoqError::config("refiner: grad_clip_norm must be > 0"));
        }
        if self.steps_per_round == 0 {
            return Err(HarmoqError::config("refiner: steps_per_round must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(HarmoqError::config("refiner: Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay from `lr_init` to `lr_final` over the horizon.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_init * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.horizon.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments for the four boundary parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: [f64; 4],
    pub v: [f64; 4],
    pub t: u64,
    /// Multiplier on the scheduled learning rate, shrunk on rollback.
    pub lr_scale: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { m: [0.0; 4], v: [0.0; 4], t: 0, lr_scale: 1.0 }
    }
}

/// Which residual the layer loss measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// `(sW)δx + δW(x/s)`: the linearized compound error.
    #[default]
    FirstOrder,
    /// Adds the cross term `δW δx`, giving exactly `(sW)_q (x/s)_q − Wx`.
    Exact,
}

/// One layer's calibration data: current weights `m×d`, optional reference
/// weights, full-precision inputs `n×d` (one sample per row) and optionally
/// the inputs seen by the activation quantizer.
#[derive(Debug, Clone, Copy)]
pub struct LayerProblem<'a> {
    pub weights: &'a Tensor2D,
    pub reference: Option<&'a Tensor2D>,
    pub inputs: &'a Tensor2D,
    /// Inputs produced by the quantized upstream network; `inputs` when absent.
    pub act_inputs: Option<&'a Tensor2D>,
    pub form: ResidualForm,
}

impl<'a> LayerProblem<'a> {
    pub fn new(weights: &'a Tensor2D, inputs: &'a Tensor2D) -> Self {
        Self { weights, reference: None, inputs, act_inputs: None, form: ResidualForm::FirstOrder }
    }

    pub fn with_form(mut self, form: ResidualForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_act_inputs(mut self, act_inputs: &'a Tensor2D) -> Self {
        self.act_inputs = Some(act_inputs);
        self
    }

    pub fn with_reference(mut self, reference: &'a Tensor2D) -> Self {
        self.reference = Some(reference);
        self
    }

    fn check(&self) -> Result<()> {
        if self.weights.cols() != self.inputs.cols() {
            return Err(HarmoqError::dim(format!(
                "weights {:?} do not accept inputs {:?}",
                self.weights.shape(),
                self.inputs.shape()
            )));
        }
        if let Some(r) = self.reference {
            if r.shape() != self.weights.shape() {
                return Err(HarmoqError::dim("reference weights differ in shape"));
            }
        }
        if let Some(a) = self.act_inputs {
            if a.shape() != self.inputs.shape() {
                return Err(HarmoqError::dim("quantizer inputs differ in shape from the inputs"));
            }
        }
        if self.inputs.rows() == 0 {
            return Err(HarmoqError::data("empty calibration batch"));
        }
        Ok(())
    }
}

/// Loss and straight-through gradient over `(α_x, β_x, α_w, β_w)` in the rescaled frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: [f64; 4],
}

/// Quantizes every entry, returning errors and the STE partials `∂q/∂α`, `∂q/∂β`.
fn quantize_with_partials(z: &Tensor2D, cfg: &QuantizerConfig) -> (Tensor2D, Vec<f64>, Vec<f64>) {
    let levels = cfg.levels() as f64;
    let n = z.data().len();
    let (mut err, mut d_alpha, mut d_beta) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &v in z.data() {
        let (q, idx) = cfg.quantize_scalar(v);
        err.push(q - v);
        let frac = idx as f64 / levels;
        d_alpha.push(1.0 - frac);
        d_beta.push(frac);
    }
    (Tensor2D::from_raw(z.rows(), z.cols(), err), d_alpha, d_beta)
}

/// Per-sample residuals `n×m` and the pieces the gradient needs, all in the
/// unscaled frame. The quantizer is scale-equivariant, `Q_{θ/s}(x/s) = Q_θ(x)/s`,
/// so the residual does not depend on `s`; evaluating it unscaled keeps that
/// exact in floating point.
struct Residuals {
    r: Tensor2D,
    /// Weights multiplying `δx` in the residual.
    w_act: Tensor2D,
    /// Inputs multiplied by `δW` in the residual.
    x_wt: Tensor2D,
    act_partials: (Vec<f64>, Vec<f64>),
    wt_partials: (Vec<f64>, Vec<f64>),
}

fn residuals(problem: &LayerProblem<'_>, s: f64, theta: &BoundarySet, bits: BitWidths) -> Result<Residuals> {
    problem.check()?;
    if !(s > 0.0) {
        return Err(HarmoqError::config(format!("scale must be > 0, got {s}")));
    }
    let act_cfg = theta.activation_config(bits.act)?;
    let wt_cfg = theta.weight_config(bits.weight)?;
    let (w, x) = (problem.weights, problem.inputs);
    let (dx, ax, bx) = match problem.act_inputs {
        None => quantize_with_partials(x, &act_cfg),
        Some(a) => {
            let (err, ax, bx) = quantize_with_partials(a, &act_cfg);
            // Q(x̃) − x = (Q(x̃) − x̃) + (x̃ − x)
            (err.add(&a.sub(x)?)?, ax, bx)
        }
    };
    let (dw, aw, bw) = quantize_with_partials(w, &wt_cfg);

    let (w_act, x_wt) = match problem.form {
        ResidualForm::FirstOrder => (w.clone(), x.clone()),
        // r = (W + δW)δx + δW x: δx sees the quantized weights, δW the quantized inputs.
        ResidualForm::Exact => (w.add(&dw)?, x.add(&dx)?),
    };
    let mut r = match problem.form {
        ResidualForm::FirstOrder => dx.matmul_t(&w_act)?.add(&x_wt.matmul_t(&dw)?)?,
        ResidualForm::Exact => dx.matmul_t(&w_act)?.add(&x.matmul_t(&dw)?)?,
    };
    if let Some(reference) = problem.reference {
        let drift = w.sub(reference)?;
        r = r.add(&x.matmul_t(&drift)?)?;
    }
    Ok(Residuals { r, w_act, x_wt, act_partials: (ax, bx), wt_partials: (aw, bw) })
}

fn mean_sq_norm(r: &Tensor2D) -> f64 {
    r.data().iter().map(|v| v * v).sum::<f64>() / r.rows() as f64
}

/// Batch mean of `‖(sW)δx + δW(x/s)‖²` (plus `δW δx` for the exact form),
/// plus the reference drift term when present. Independent of `s`.
pub fn total_loss(problem: &LayerProblem<'_>, s: f64, theta: &BoundarySet, bits: BitWidths) -> Result<f64> {
    let res = residuals(problem, s, theta, bits)?;
    let loss = mean_sq_norm(&res.r);
    if !loss.is_finite() {
        return Err(HarmoqError::Numeric("non-finite layer loss".into()));
    }
    Ok(loss)
}

/// `∂L/∂θᵢ = E[2 rᵀ((sW) ∂δx/∂θᵢ + ∂δW/∂θᵢ (x/s))]` with the frozen-index STE
/// rule. In the exact form `sW` becomes `(sW)_q` and `x/s` becomes `(x/s)_q`.
pub fn boundary_gradients(
    problem: &LayerProblem<'_>,
    s: f64,
    theta: &BoundarySet,
    bits: BitWidths,
) -> Result<LossAndGrad> {
    let res = residuals(problem, s, theta, bits)?;
    let n = res.r.rows() as f64;
    let loss = mean_sq_norm(&res.r);
    if !loss.is_finite() {
        return Err(HarmoqError::Numeric("non-finite layer loss".into()));
    }
    // rᵀ W applied to activation partials; rᵀ x applied to weight partials.
    // The rescaled frame multiplies the first by s and the second by 1/s.
    let g_act = res.r.matmul(&res.w_act)?;
    let g_wt = res.r.t_matmul(&res.x_wt)?;
    let contract = |g: &Tensor2D, p: &[f64], f: f64| {
        2.0 * f / n * g.data().iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
    };
    let grad = [
        contract(&g_act, &res.act_partials.0, s),
        contract(&g_act, &res.act_partials.1, s),
        contract(&g_wt, &res.wt_partials.0, 1.0 / s),
        contract(&g_wt, &res.wt_partials.1, 1.0 / s),
    ];
    Ok(LossAndGrad { loss, grad })
}

/// One projected Adam step on the bounds. `step_index` drives the schedule.
pub fn refine_step(
    mut state: AdamState,
    theta: &BoundarySet,
    gradient: [f64; 4],
    cfg: &RefinerConfig,
    step_index: usize,
) -> (AdamState, BoundarySet) {
    let params = theta.to_array();
    let mut g = gradient;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cfg.grad_clip_norm {
        let f = cfg.grad_clip_norm / norm;
        g.iter_mut().for_each(|v| *v *= f);
    }
    if cfg.weight_decay != 0.0 {
        for (gi, p) in g.iter_mut().zip(params) {
            *gi += cfg.weight_decay * p;
        }
    }

    state.t += 1;
    let lr = cfg.learning_rate(step_index) * state.lr_scale;
    let bc1 = 1.0 - cfg.adam_beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(state.t as i32);
    let mut next = params;
    for i in 0..4 {
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * g[i];
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        next[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    (state, BoundarySet::from_array(next).project())
}

/// Global-norm clipping as applied inside [`refine_step`], exposed for inspection.
pub fn clip_gradient(gradient: [f64; 4], max_norm: f64) -> [f64; 4] {
    let norm = gradient.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        gradient.map(|v| v * max_norm / norm)
    } else {
        gradient
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_gaussian;

    fn theta() -> BoundarySet {
        BoundarySet::new(-1.0, 1.0, -0.5, 0.5).unwrap()
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = RefinerConfig::default();
        assert!((cfg.learning_rate(0) - 1e-2 / 300.0).abs() < 1e-18);
        assert!((cfg.learning_rate(299) - 1e-2).abs() < 1e-15);
        assert!((cfg.learning_rate(300) - 1e-2).abs() < 1e-15);
        assert!((cfg.learning_rate(3000) - 1e-4).abs() < 1e-15);
        assert!(cfg.learning_rate(1650) < cfg.learning_rate(1000));
    }

    #[test]
    fn zero_gradient_is_a_no_op_from_fresh_state() {
        let t = theta();
        let (_, next) = refine_step(AdamState::default(), &t, [0.0; 4], &RefinerConfig::default(), 10);
        assert_eq!(next, t);
    }

    #[test]
    fn projection_enforces_gap() {
        let t = BoundarySet::new(0.0, 0.011, 0.0, 1.0).unwrap();
        let cfg = RefinerConfig { warmup_steps: 0, lr_init: 0.5, ..Default::default() };
        // pushes alpha_x up and beta_x down
        let (_, next) = refine_step(AdamState::default(), &t, [-1.0, 1.0, 0.0, 0.0], &cfg, 0);
        assert!(next.is_feasible());
        assert_eq!(next.alpha_x, next.beta_x - crate::quantizer::MIN_GAP);
    }

    #[test]
    fn single_step_matches_hand_rolled_adam() {
        let cfg = RefinerConfig::default();
        let t = theta();
        let g = [0.3, -0.2, 0.1, 0.4];
        let (state, next) = refine_step(AdamState::default(), &t, g, &cfg, 5);
        let lr = cfg.lr_init * 6.0 / 300.0;
        for i in 0..4 {
            let m = 0.1 * g[i];
            let v = 0.001 * g[i] * g[i];
            let step = lr * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
            assert!((next.to_array()[i] - (t.to_array()[i] - step)).abs() < 1e-12);
            assert!((state.m[i] - m).abs() < 1e-15);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let c = clip_gradient([3.0, 4.0, 0.0, 0.0], 1.0);
        assert!((c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(clip_gradient([0.1, 0.0, 0.0, 0.0], 1.0), [0.1, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_aligned_data_has_zero_loss_and_gradient() {
        // Inputs and weights on their grids: both errors vanish.
        let x = Tensor2D::new(2, 2, vec![0.0, 1.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let w = Tensor2D::identity(2);
        let t = BoundarySet::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let p = LayerProblem::new(&w, &x);
        let lg = boundary_gradients(&p, 1.0, &t, BitWidths::new(2, 2)).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert_eq!(lg.grad, [0.0; 4]);
    }

    #[test]
    fn clipped_above_activation_rule() {
        // Every input exceeds beta_x, weights sit on the grid.
        let x = Tensor2D::new(3, 2, vec![2.0, 3.0, 2.5, 4.0, 5.0, 2.2]).unwrap();
        let w = Tensor2D::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = BoundarySet::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let p = LayerProblem::new(&w, &x);
        let lg = boundary_gradients(&p, 1.0, &t, BitWidths::new(2, 2)).unwrap();
        assert_eq!(lg.grad[0], 0.0);
        // r = W δx with δx = 1 − x; dL/dβ_x = mean 2 rᵀ (W·1)
        let mut expect = 0.0;
        for i in 0..3 {
            let r: Vec<f64> = (0..2).map(|j| 1.0 - x.get(i, j)).collect();
            expect += 2.0 * (r[0] + r[1]) / 3.0;
        }
        assert!((lg.grad[1] - expect).abs() < 1e-12);
        // single-term reduction
        let direct: f64 = (0..3).map(|i| (0..2).map(|j| (1.0 - x.get(i, j)).powi(2)).sum::<f64>()).sum::<f64>() / 3.0;
        assert!((lg.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn reference_adds_drift() {
        let x = seeded_gaussian(6, 3, 1).unwrap();
        let w = seeded_gaussian(2, 3, 2).unwrap();
        let t = BoundarySet::new(-3.0, 3.0, -3.0, 3.0).unwrap();
        let bits = BitWidths::new(8, 8);
        let plain = total_loss(&LayerProblem::new(&w, &x), 1.0, &t, bits).unwrap();
        let same = total_loss(&LayerProblem::new(&w, &x).with_reference(&w), 1.0, &t, bits).unwrap();
        assert_eq!(plain, same);
        let other = w.scaled(1.1);
        let drift = total_loss(&LayerProblem::new(&w, &x).with_reference(&other), 1.0, &t, bits).unwrap();
        assert!(drift > plain);
    }

    #[test]
    fn upstream_deviation_enters_activation_error() {
        let x = seeded_gaussian(5, 3, 4).unwrap();
        let w = seeded_gaussian(2, 3, 5).unwrap();
        let t = BoundarySet::new(-4.0, 4.0, -4.0, 4.0).unwrap();
        let bits = BitWidths::new(8, 8);
        let same = total_loss(&LayerProblem::new(&w, &x).with_act_inputs(&x), 1.0, &t, bits).unwrap();
        assert_eq!(same, total_loss(&LayerProblem::new(&w, &x), 1.0, &t, bits).unwrap());
        // Direct oracle: r = W(Q(x̃) − x) + (Q(W) − W)x.
        let shifted = x.map(|v| v + 0.3);
        let got = total_loss(&LayerProblem::new(&w, &x).with_act_inputs(&shifted), 1.0, &t, bits).unwrap();
        let qa = crate::quantizer::fake_quantize(&shifted, &t.activation_config(8).unwrap()).unwrap();
        let qw = crate::quantizer::fake_quantize(&w, &t.weight_config(8).unwrap()).unwrap();
        let r = qa.sub(&x).unwrap().matmul_t(&w).unwrap().add(&x.matmul_t(&qw.sub(&w).unwrap()).unwrap()).unwrap();
        let expect = r.data().iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!((got - expect).abs() < 1e-12 * expect);
        let wrong = seeded_gaussian(4, 3, 1).unwrap();
        assert!(total_loss(&LayerProblem::new(&w, &x).with_act_inputs(&wrong), 1.0, &t, bits).is_err());
    }

    #[test]
    fn exact_form_is_quantized_output_minus_reference() {
        use crate::quantizer::fake_quantize;
        let x = seeded_gaussian(6, 4, 11).unwrap();
        let noisy = x.add(&seeded_gaussian(6, 4, 12).unwrap().scaled(0.1)).unwrap();
        let reference = seeded_gaussian(3, 4, 13).unwrap();
        let w = reference.add(&seeded_gaussian(3, 4, 14).unwrap().scaled(0.05)).unwrap();
        let t = BoundarySet::new(-2.5, 2.0, -1.5, 1.8).unwrap();
        let (bits, s) = (BitWidths::new(3, 3), 1.7);
        let problem = LayerProblem::new(&w, &x)
            .with_reference(&reference)
            .with_act_inputs(&noisy)
            .with_form(ResidualForm::Exact);
        let got = total_loss(&problem, s, &t, bits).unwrap();

        let frame = t.to_scaled_frame(s);
        let qa = fake_quantize(&noisy.scaled(1.0 / s), &frame.activation_config(3).unwrap()).unwrap();
        let qw = fake_quantize(&w.scaled(s), &frame.weight_config(3).unwrap()).unwrap();
        let r = qa.matmul_t(&qw).unwrap().sub(&x.matmul_t(&reference).unwrap()).unwrap();
        let expect = r.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((got - expect).abs() < 1e-12 * expect, "{got} vs {expect}");

        let first = total_loss(&problem.with_form(ResidualForm::FirstOrder), s, &t, bits).unwrap();
        assert!((first - got).abs() > 1e-9);
    }

    #[test]
    fn shape_errors() {
        let x = seeded_gaussian(4, 3, 1).unwrap();
        let w = seeded_gaussian(2, 5, 2).unwrap();
        assert!(total_loss(&LayerProblem::new(&w, &x), 1.0, &theta(), BitWidths::new(2, 2)).is_err());
        let w3 = seeded_gaussian(2, 3, 2).unwrap();
        assert!(total_loss(&LayerProblem::new(&w3, &x), 0.0, &theta(), BitWidths::new(2, 2)).is_err());
    }
}
