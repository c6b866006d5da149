//! Oracles shared by the integration tests and the acceptance report.

#![allow(dead_code)]

use harmoq::linalg::{seeded_gaussian, seeded_rng, Tensor2D};
use harmoq::projection::{make_projection, ProjectionKind, ProjectionMatrix, ProjectionRequest};
use harmoq::quantizer::QuantizerConfig;
use harmoq::refiner::{boundary_gradients, BitWidths, LayerProblem, ResidualForm};
use harmoq::scale::BoundarySet;
use harmoq::src_calib::src_objective;
use harmoq::stats::Moments;
use rand::Rng;

// ── Structural correction ─────────────────────────────────────────────────

pub const LAMBDA: f64 = 1e-2;

pub struct Instance {
    pub w: Tensor2D,
    pub moments: Moments,
    pub proj: ProjectionMatrix,
    /// x = A z, δx = B x + C e with z, e standard normal.
    pub a: Tensor2D,
    pub b: Tensor2D,
    pub c: Tensor2D,
}

pub fn instance(seed: u64, m: usize, d: usize, k: usize) -> Instance {
    let w = seeded_gaussian(m, d, seed).unwrap();
    let a = seeded_gaussian(d, d, seed + 1).unwrap().scaled(0.6).add(&Tensor2D::identity(d)).unwrap();
    let b = seeded_gaussian(d, d, seed + 2).unwrap().scaled(0.3);
    let c = seeded_gaussian(d, d, seed + 3).unwrap().scaled(0.2);
    let sigma_xx = a.matmul_t(&a).unwrap();
    let sigma_dx = b.matmul(&sigma_xx).unwrap();
    let sigma_dd = b.matmul(&sigma_xx).unwrap().matmul_t(&b).unwrap().add(&c.matmul_t(&c).unwrap()).unwrap();
    let proj = make_projection(ProjectionRequest::new(ProjectionKind::Random, d).rows(k).seed(seed + 4)).unwrap();
    Instance { w, moments: Moments { sigma_xx, sigma_dx, sigma_dd: sigma_dd.symmetrized().unwrap() }, proj, a, b, c }
}

pub fn objective(inst: &Instance, dw: &Tensor2D) -> f64 {
    src_objective(dw, &inst.w, &inst.moments, &inst.proj, LAMBDA).unwrap()
}

/// Gradient descent on Γ for `E‖Wδx + ΓHx‖² + λ‖Γ‖²`, returning `δW = ΓH`.
pub fn gd_oracle(inst: &Instance, gamma0: Tensor2D, steps: usize) -> Tensor2D {
    let h = &inst.proj.h;
    let g = h.matmul(&inst.moments.sigma_xx).unwrap().matmul_t(h).unwrap();
    let lin = inst.w.matmul(&inst.moments.sigma_dx).unwrap().matmul_t(h).unwrap();
    // Lipschitz bound from the trace of the Gram matrix.
    let step = 1.0 / (2.0 * (g.trace() + LAMBDA));
    let mut gamma = gamma0;
    for _ in 0..steps {
        let grad = lin.add(&gamma.matmul(&g).unwrap()).unwrap().add(&gamma.scaled(LAMBDA)).unwrap().scaled(2.0);
        gamma = gamma.sub(&grad.scaled(step)).unwrap();
    }
    gamma.matmul(h).unwrap()
}

pub fn numerical_gradient(inst: &Instance, dw: &Tensor2D, h: f64) -> Tensor2D {
    let (m, d) = dw.shape();
    Tensor2D::from_fn(m, d, |i, j| {
        let mut plus = dw.clone();
        let mut minus = dw.clone();
        plus.set(i, j, dw.get(i, j) + h);
        minus.set(i, j, dw.get(i, j) - h);
        (objective(inst, &plus) - objective(inst, &minus)) / (2.0 * h)
    })
}

/// Random `(m, d, k)` with `m ≤ 4`, `d ≤ 8`, `k ≤ 4`.
pub fn shapes(seed: u64) -> (usize, usize, usize) {
    let mut rng = seeded_rng(seed);
    let d = rng.random_range(3..=8);
    let m = rng.random_range(1..=4);
    let k = rng.random_range(1..=4usize.min(d));
    (m, d, k)
}

// ── Boundary gradients ────────────────────────────────────────────────────

pub struct Case {
    pub w: Tensor2D,
    pub reference: Tensor2D,
    pub x: Tensor2D,
    pub act: Tensor2D,
    pub s: f64,
    pub theta: BoundarySet,
    pub bits: BitWidths,
}

pub fn case(seed: u64) -> Case {
    let mut rng = seeded_rng(seed);
    let d = rng.random_range(2..=8);
    let m = rng.random_range(1..=6);
    let n = rng.random_range(4..=24);
    let b = rng.random_range(2..=3);
    let x = seeded_gaussian(n, d, seed + 1).unwrap();
    let act = x.add(&seeded_gaussian(n, d, seed + 2).unwrap().scaled(0.05)).unwrap();
    let reference = seeded_gaussian(m, d, seed + 3).unwrap();
    let w = reference.add(&seeded_gaussian(m, d, seed + 4).unwrap().scaled(0.02)).unwrap();
    // Bounds inside the data range so some entries clip on both sides.
    let theta = BoundarySet::new(
        -rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        -rng.random_range(0.3..1.5),
        rng.random_range(0.3..1.5),
    )
    .unwrap();
    Case { w, reference, x, act, s: rng.random_range(0.5..2.0), theta, bits: BitWidths::new(b, b) }
}

/// Quantized values as affine functions of `(α, β)` with the level index
/// frozen at `cfg`: `q = α + n (β − α) / L`.
pub fn frozen(z: &Tensor2D, cfg: &QuantizerConfig) -> Vec<usize> {
    let step = (cfg.beta - cfg.alpha) / cfg.levels() as f64;
    z.data()
        .iter()
        .map(|&v| {
            let clamped = v.clamp(cfg.alpha, cfg.beta);
            let t = (clamped - cfg.alpha) / step;
            t.round_ties_even() as usize
        })
        .collect()
}

pub fn surrogate(z: &Tensor2D, idx: &[usize], alpha: f64, beta: f64, levels: u32) -> Tensor2D {
    let values = idx.iter().map(|&n| alpha + n as f64 * (beta - alpha) / levels as f64).collect();
    Tensor2D::new(z.rows(), z.cols(), values).unwrap()
}

/// Surrogate loss over scaled-frame bounds `p = (α_x, β_x, α_w, β_w)`.
pub fn surrogate_loss(c: &Case, form: ResidualForm, p: [f64; 4], ia: &[usize], iw: &[usize]) -> f64 {
    let la = (1u32 << c.bits.act) - 1;
    let lw = (1u32 << c.bits.weight) - 1;
    let xs = c.x.scaled(1.0 / c.s);
    let ws = c.w.scaled(c.s);
    let qa = surrogate(&c.act, ia, p[0], p[1], la);
    let qw = surrogate(&c.w, iw, p[2], p[3], lw);
    let r = match form {
        // (sW)δx + δW(x/s) + drift
        ResidualForm::FirstOrder => {
            let dx = qa.sub(&xs).unwrap();
            let dw = qw.sub(&ws).unwrap();
            dx.matmul_t(&ws).unwrap().add(&xs.matmul_t(&dw).unwrap()).unwrap()
        }
        ResidualForm::Exact => qa.matmul_t(&qw).unwrap().sub(&xs.matmul_t(&ws).unwrap()).unwrap(),
    };
    let drift = c.x.matmul_t(&c.w.sub(&c.reference).unwrap()).unwrap();
    let r = r.add(&drift).unwrap();
    r.data().iter().map(|v| v * v).sum::<f64>() / r.rows() as f64
}

/// Largest gradient error relative to the norm of the finite-difference gradient.
pub fn check(c: &Case, form: ResidualForm) -> f64 {
    let problem = LayerProblem::new(&c.w, &c.x).with_reference(&c.reference).with_act_inputs(&c.act).with_form(form);
    let analytic = boundary_gradients(&problem, c.s, &c.theta, c.bits).unwrap();

    let frame = c.theta.to_scaled_frame(c.s);
    let act_cfg = frame.activation_config(c.bits.act).unwrap();
    let wt_cfg = frame.weight_config(c.bits.weight).unwrap();
    let (xa, ww) = (c.act.scaled(1.0 / c.s), c.w.scaled(c.s));
    let ia = frozen(&xa, &act_cfg);
    let iw = frozen(&ww, &wt_cfg);
    let p0 = frame.to_array();
    let base = surrogate_loss(c, form, p0, &ia, &iw);
    assert!((base - analytic.loss).abs() <= 1e-10 * (1.0 + base), "loss {base} vs {}", analytic.loss);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let fd: Vec<f64> = (0..4)
        .map(|i| {
            let (mut up, mut dn) = (p0, p0);
            up[i] += h;
            dn[i] -= h;
            (surrogate_loss(c, form, up, &ia, &iw) - surrogate_loss(c, form, dn, &ia, &iw)) / (2.0 * h)
        })
        .collect();
    let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    for i in 0..4 {
        worst = worst.max((analytic.grad[i] - fd[i]).abs() / scale);
    }
    worst
}

