//! The harmonized quantization loop.
//!
//! One outer iteration visits every layer in order and runs up to three
//! stages on it:
//!
//! 1. structural residual correction: refresh the calibration moments under
//!    the current activation quantizer, solve for `δW*` and add a step of it
//!    to the layer's accumulated correction;
//! 2. closed-form balancing scale, then `T` projected Adam steps on the
//!    clipping bounds, re-balancing every `rebalance_period` steps;
//! 3. the balance check, which re-solves the correction when the model MSE
//!    gap exceeds the re-trigger threshold.
//!
//! A layer's activation error is measured on the input the quantized network
//! actually feeds it, so it includes the deviation inherited from upstream
//! layers. Each stage is scored by the summed per-layer loss of the whole
//! model; a stage that raises it is rolled back and that layer's step size
//! (correction fraction or learning rate) is multiplied by
//! `rollback_lr_factor`. Accepted losses therefore never increase.
//!
//! The loop stops once an iteration with at least one accepted stage changes
//! the loss by less than `tau` (relative), after `max_consecutive_rollbacks`
//! iterations in which nothing was accepted, when the early-stop patience runs
//! out, or when the boundary-step budget `max_iters` is spent.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;
use crate::projection::{make_projection, ProjectionKind, ProjectionMatrix, ProjectionRequest};
use crate::quantizer::{fake_quantize, minmax_bounds};
use crate::refiner::{
    boundary_gradients, refine_step, total_loss, AdamState, BitWidths, LayerProblem, RefinerConfig, ResidualForm,
};
use crate::scale::{balance_gap, component_mse, optimal_scale, pooled_bounds, BoundarySet, LayerScale, Side};
use crate::src_calib::{compute_src_correction, SrcConfig};
use crate::stats::{CalibStats, Moments, DEFAULT_MOMENTUM, DEFAULT_WARMUP};

// ── Configuration ─────────────────────────────────────────────────────────

/// Which of the three optimization steps run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub src: bool,
    pub hso: bool,
    pub abr: bool,
}

impl Components {
    pub const NONE: Components = Components { src: false, hso: false, abr: false };
    pub const ALL: Components = Components { src: true, hso: true, abr: true };

    /// All eight subsets, baseline first and the full method last.
    pub fn all_subsets() -> Vec<Components> {
        (0..8u8)
            .map(|b| Components { src: b & 1 != 0, hso: b & 2 != 0, abr: b & 4 != 0 })
            .collect()
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.src, "SRC"), (self.hso, "HSO"), (self.abr, "ABR")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Components> {
        let mut c = Components::NONE;
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("baseline") || s.eq_ignore_ascii_case("none") {
            return Ok(c);
        }
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "SRC" => c.src = true,
                "HSO" => c.hso = true,
                "ABR" => c.abr = true,
                "ALL" => c = Components::ALL,
                other => return Err(HarmoqError::config(format!("unknown component '{other}'"))),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub kind: ProjectionKind,
    /// Per-layer `k`; `None` uses the kind's default.
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSettings {
    pub momentum: f64,
    pub warmup: usize,
    pub batch_size: usize,
    /// Times each batch is streamed into the estimator.
    pub passes: usize,
}

impl Default for StatsSettings {
    fn default() -> Self {
        Self { momentum: DEFAULT_MOMENTUM, warmup: DEFAULT_WARMUP, batch_size: 32, passes: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Relative change of the loss below which the loop has converged.
    pub tau: f64,
    /// Budget of boundary steps across all outer iterations.
    pub max_iters: usize,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub epsilon_frac: f64,
    pub src_retrigger_factor: f64,
    pub rollback_lr_factor: f64,
    pub rebalance_period: usize,
    /// Stop after this many iterations in a row without an accepted stage.
    pub max_consecutive_rollbacks: usize,
    pub components: Components,
    pub seed: u64,
    pub bits: BitWidths,
    pub src: SrcConfig,
    pub refiner: RefinerConfig,
    pub projection: ProjectionSettings,
    pub stats: StatsSettings,
    /// Use one scale for every layer, computed from pooled bounds.
    pub shared_scale: bool,
    /// Residual measured by the layer loss.
    pub residual: ResidualForm,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: 1e-4,
            max_iters: 3000,
            early_stop_delta: 1e-5,
            early_stop_patience: 50,
            epsilon_frac: 0.01,
            src_retrigger_factor: 1.5,
            rollback_lr_factor: 0.5,
            rebalance_period: 5,
            max_consecutive_rollbacks: 3,
            components: Components::ALL,
            seed: 42,
            bits: BitWidths::new(2, 2),
            src: SrcConfig::default(),
            refiner: RefinerConfig::default(),
            projection: ProjectionSettings { kind: ProjectionKind::Laplacian, rows: None },
            stats: StatsSettings::default(),
            shared_scale: false,
            residual: ResidualForm::FirstOrder,
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(HarmoqError::config("pipeline.tau must be > 0"));
        }
        if !(self.epsilon_frac > 0.0) {
            return Err(HarmoqError::config("pipeline.epsilon_frac must be > 0"));
        }
        if self.max_consecutive_rollbacks == 0 {
            return Err(HarmoqError::config("pipeline.max_consecutive_rollbacks must be >= 1"));
        }
        if self.rebalance_period == 0 {
            return Err(HarmoqError::config("pipeline.rebalance_period must be >= 1"));
        }
        if !(self.rollback_lr_factor > 0.0 && self.rollback_lr_factor <= 1.0) {
            return Err(HarmoqError::config("pipeline.rollback_lr_factor must lie in (0, 1]"));
        }
        if self.stats.batch_size == 0 || self.stats.passes == 0 {
            return Err(HarmoqError::config("stats batch size and passes must be >= 1"));
        }
        SrcConfig::new(self.src.lambda, self.src.solver_eps)?;
        self.refiner.validate()?;
        for b in [self.bits.act, self.bits.weight] {
            if !(crate::quantizer::MIN_BITS..=crate::quantizer::MAX_BITS).contains(&b) {
                return Err(HarmoqError::config(format!("bit-width {b} unsupported by the pipeline")));
            }
        }
        Ok(())
    }
}

// ── Model interface ───────────────────────────────────────────────────────

/// A network made of linear layers whose inputs can be tapped.
pub trait QuantizableModel {
    fn num_layers(&self) -> usize;
    /// Full-precision weights `m×d` of layer `i`.
    fn layer_weight(&self, i: usize) -> &Tensor2D;
    /// Spatial layout of layer `i`'s input features, when they have one.
    fn input_spatial(&self, i: usize) -> Option<(usize, usize)>;
    /// Full-precision inputs of every layer for a batch of model inputs (one per row).
    fn activation_taps(&self, batch: &Tensor2D) -> Result<Vec<Tensor2D>>;
    /// Inputs of every layer when the network runs with `state`'s quantized
    /// layers; entry `i` is what layer `i`'s activation quantizer receives.
    fn quantized_taps(&self, batch: &Tensor2D, state: &QuantizedModelState) -> Result<Vec<Tensor2D>>;
}

// ── State ─────────────────────────────────────────────────────────────────

/// Quantization parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantState {
    pub theta: BoundarySet,
    pub scale: LayerScale,
    pub bits: BitWidths,
    /// Weight correction added to the full-precision weights.
    pub correction: Option<Tensor2D>,
}

impl LayerQuantState {
    pub fn corrected_weight(&self, w: &Tensor2D) -> Result<Tensor2D> {
        match &self.correction {
            Some(c) => w.add(c),
            None => Ok(w.clone()),
        }
    }

    pub fn drift_norm(&self) -> f64 {
        self.correction.as_ref().map_or(0.0, Tensor2D::frobenius_norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModelState {
    pub layers: Vec<LayerQuantState>,
}

/// One record per completed outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    /// Largest model MSE gap over layers.
    pub gap: f64,
    pub s_per_layer: Vec<f64>,
    /// Some stage of this iteration was rolled back.
    pub rollback: bool,
    pub src_reapplied: bool,
    pub accepted_stages: usize,
    pub rejected_stages: usize,
    pub scale_clamped: Vec<bool>,
    pub drift_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    /// Consecutive rollbacks reached the configured limit.
    Stalled,
    EarlyStop,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub initial_loss: f64,
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
    /// Per-layer balance tolerance ε.
    pub epsilon: Vec<f64>,
}

impl PipelineTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(self.initial_loss, |r| r.loss)
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace records serialize"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalanceActions {
    pub rescaled: bool,
    pub src_reapply: bool,
}

/// Restores the MSE balance of one layer.
///
/// Gap within `ε`: nothing. Above `ε`: the scale is recomputed in closed form.
/// Above `retrigger·ε`: the correction is also flagged for re-solving.
pub fn enforce_balance(
    state: &LayerQuantState,
    epsilon: f64,
    retrigger: f64,
) -> Result<(LayerQuantState, BalanceActions)> {
    let gap = balance_gap(state.scale.value(), &state.theta, state.bits.act, state.bits.weight)?;
    let mut next = state.clone();
    let mut actions = BalanceActions::default();
    if gap > epsilon {
        next.scale = optimal_scale(&state.theta, state.bits.act, state.bits.weight);
        actions.rescaled = true;
        actions.src_reapply = gap > retrigger * epsilon;
    }
    Ok((next, actions))
}

// ── Engine ────────────────────────────────────────────────────────────────

/// Fixed per-layer calibration data.
struct LayerData {
    reference: Tensor2D,
    inputs: Tensor2D,
    projection: ProjectionMatrix,
    epsilon: f64,
}

#[derive(Clone)]
struct LayerRun {
    state: LayerQuantState,
    adam: AdamState,
    /// Fraction of the closed-form correction applied by the next SRC step.
    src_step: f64,
}

/// MinMax initialization: activation bounds from the tapped inputs, weight bounds from the weights.
pub fn minmax_state(model: &dyn QuantizableModel, taps: &[Tensor2D], bits: BitWidths) -> Result<QuantizedModelState> {
    let layers = (0..model.num_layers())
        .map(|i| {
            let (ax, bx) = minmax_bounds(taps[i].data())?;
            let (aw, bw) = minmax_bounds(model.layer_weight(i).data())?;
            Ok(LayerQuantState {
                theta: BoundarySet::new(ax, bx, aw, bw)?,
                scale: LayerScale::IDENTITY,
                bits,
                correction: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModelState { layers })
}

fn layer_projection(
    model: &dyn QuantizableModel,
    i: usize,
    inputs: &Tensor2D,
    settings: &ProjectionSettings,
    seed: u64,
) -> Result<ProjectionMatrix> {
    let d = inputs.cols();
    let spatial = model.input_spatial(i);
    let mut kind = settings.kind;
    // 2D-only stencils fall back to the 1D second difference on shapeless features.
    if kind == ProjectionKind::Sobel && spatial.is_none() {
        kind = ProjectionKind::Laplacian;
    }
    let mut req = ProjectionRequest::new(kind, d).seed(seed.wrapping_add(i as u64)).calib_outputs(inputs);
    if kind != ProjectionKind::Identity {
        if let Some((h, w)) = spatial {
            req = req.spatial(h, w);
        }
        if let Some(k) = settings.rows {
            req = req.rows(k.min(d));
        }
    }
    make_projection(req)
}

/// Moments of the full-precision inputs `x` and the activation error
/// `δx = Q(x̃) − x`, where `x̃` is what the quantized network feeds the layer.
pub fn layer_moments(
    inputs: &Tensor2D,
    act_inputs: &Tensor2D,
    theta: &BoundarySet,
    bits: BitWidths,
    s: &StatsSettings,
) -> Result<Moments> {
    let act = theta.activation_config(bits.act)?;
    let errors = fake_quantize(act_inputs, &act)?.sub(inputs)?;
    let d = inputs.cols();
    let n = inputs.rows();
    // Never let warmup exceed what the batch provides.
    let warmup = s.warmup.min(n * s.passes);
    let mut stats = CalibStats::new(d, s.momentum, warmup)?;
    let mut start = 0;
    while start < n {
        let end = (start + s.batch_size).min(n);
        let rows = |t: &Tensor2D| Tensor2D::from_raw(end - start, d, t.data()[start * d..end * d].to_vec());
        let (xb, eb) = (rows(inputs), rows(&errors));
        for _ in 0..s.passes {
            stats.update(&xb, &eb)?;
        }
        start = end;
    }
    stats.finalize()
}

/// Adds `src_step · δW*` to the layer's accumulated correction, with `δW*`
/// solved for the currently corrected weights.
fn apply_src(run: &mut LayerRun, data: &LayerData, act_inputs: &Tensor2D, cfg: &PipelineConfig, layer: usize) -> Result<()> {
    let moments = layer_moments(&data.inputs, act_inputs, &run.state.theta, run.state.bits, &cfg.stats)?;
    let w = run.state.corrected_weight(&data.reference)?;
    let delta = compute_src_correction(&w, &moments, &data.projection, &cfg.src).map_err(|e| match e {
        HarmoqError::Singular(msg) => HarmoqError::Singular(format!("layer {layer}: {msg}")),
        other => other,
    })?;
    let step = delta.scaled(run.src_step);
    run.state.correction = Some(match run.state.correction.take() {
        Some(c) => c.add(&step)?,
        None => step,
    });
    Ok(())
}

fn layer_loss(state: &LayerQuantState, data: &LayerData, act_inputs: &Tensor2D, form: ResidualForm) -> Result<f64> {
    let w = state.corrected_weight(&data.reference)?;
    let problem = LayerProblem::new(&w, &data.inputs)
        .with_reference(&data.reference)
        .with_act_inputs(act_inputs)
        .with_form(form);
    total_loss(&problem, state.scale.value(), &state.theta, state.bits)
}

/// Scale and boundary update of one layer: closed-form scale, `T` projected
/// Adam steps with periodic re-balancing, then the balance check.
/// Returns whether the correction should be re-solved.
fn refine_layer(
    run: &mut LayerRun,
    data: &LayerData,
    act_inputs: &Tensor2D,
    cfg: &PipelineConfig,
    step_offset: usize,
    shared: Option<LayerScale>,
) -> Result<bool> {
    let comps = cfg.components;
    let choose_scale =
        |theta: &BoundarySet| shared.unwrap_or_else(|| optimal_scale(theta, cfg.bits.act, cfg.bits.weight));
    if comps.hso {
        run.state.scale = choose_scale(&run.state.theta);
    }
    if comps.abr {
        let w = run.state.corrected_weight(&data.reference)?;
        let problem = LayerProblem::new(&w, &data.inputs)
            .with_reference(&data.reference)
            .with_act_inputs(act_inputs)
            .with_form(cfg.residual);
        for t in 0..cfg.refiner.steps_per_round {
            let s = run.state.scale.value();
            let lg = boundary_gradients(&problem, s, &run.state.theta, run.state.bits)?;
            let frame = run.state.theta.to_scaled_frame(s);
            let (adam, moved) = refine_step(run.adam, &frame, lg.grad, &cfg.refiner, step_offset + t);
            run.adam = adam;
            run.state.theta = moved.from_scaled_frame(s).project();
            let mid_round = (t + 1) % cfg.rebalance_period == 0 && t + 1 < cfg.refiner.steps_per_round;
            if comps.hso && mid_round {
                run.state.scale = choose_scale(&run.state.theta);
            }
        }
    }
    let (balanced, actions) = enforce_balance(&run.state, data.epsilon, cfg.src_retrigger_factor)?;
    if comps.hso && actions.rescaled {
        run.state.scale = shared.unwrap_or(balanced.scale);
    }
    Ok(comps.src && actions.src_reapply)
}

fn shared_scale(runs: &[LayerRun], cfg: &PipelineConfig) -> Option<LayerScale> {
    if !(cfg.shared_scale && cfg.components.hso) {
        return None;
    }
    let thetas: Vec<BoundarySet> = runs.iter().map(|r| r.state.theta).collect();
    pooled_bounds(&thetas).map(|p| optimal_scale(&p, cfg.bits.act, cfg.bits.weight))
}

/// SHA-256 over the calibration inputs every run sees.
pub fn calibration_digest(taps: &[Tensor2D]) -> String {
    let mut h = Sha256::new();
    for t in taps {
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Engine<'a> {
    model: &'a dyn QuantizableModel,
    calib: &'a Tensor2D,
    cfg: &'a PipelineConfig,
    data: Vec<LayerData>,
}

/// The accepted state with its loss and the quantized-network layer inputs.
struct Accepted {
    runs: Vec<LayerRun>,
    loss: f64,
    act_inputs: Vec<Tensor2D>,
}

impl Engine<'_> {
    fn evaluate(&self, runs: &[LayerRun]) -> Result<(f64, Vec<Tensor2D>)> {
        let state = QuantizedModelState { layers: runs.iter().map(|r| r.state.clone()).collect() };
        let act_inputs = self.model.quantized_taps(self.calib, &state)?;
        let mut total = 0.0;
        for ((r, d), a) in runs.iter().zip(&self.data).zip(&act_inputs) {
            total += layer_loss(&r.state, d, a, self.cfg.residual)?;
        }
        if !total.is_finite() {
            return Err(HarmoqError::Numeric("non-finite total loss".into()));
        }
        Ok((total, act_inputs))
    }

    /// Keeps `candidate` if it does not raise the total loss.
    fn offer(&self, acc: &mut Accepted, candidate: Vec<LayerRun>) -> Result<bool> {
        let (loss, act_inputs) = self.evaluate(&candidate)?;
        if loss > acc.loss {
            return Ok(false);
        }
        *acc = Accepted { runs: candidate, loss, act_inputs };
        Ok(true)
    }
}

impl Engine<'_> {
    /// Offers layer `i` at its balancing scale when its gap exceeds `ε`;
    /// `None` when it is already balanced.
    fn rebalance(&self, acc: &mut Accepted, i: usize, shared: Option<LayerScale>) -> Result<Option<bool>> {
        let (balanced, actions) = enforce_balance(&acc.runs[i].state, self.data[i].epsilon, f64::INFINITY)?;
        if !actions.rescaled {
            return Ok(None);
        }
        let mut cand = acc.runs.clone();
        cand[i].state.scale = shared.unwrap_or(balanced.scale);
        self.offer(acc, cand).map(Some)
    }
}

#[derive(Default)]
struct SweepOutcome {
    accepted: usize,
    rejected: usize,
    src_reapplied: bool,
}

impl Engine<'_> {
    /// One outer iteration: every layer in order, each stage kept only if the
    /// total loss does not rise. Rejected SRC stages halve that layer's
    /// correction step; rejected boundary stages scale its learning rate.
    fn sweep(&self, acc: &mut Accepted, step_offset: usize) -> Result<SweepOutcome> {
        let cfg = self.cfg;
        let comps = cfg.components;
        let mut out = SweepOutcome::default();
        for i in 0..self.data.len() {
            let data = &self.data[i];
            if comps.src {
                let mut cand = acc.runs.clone();
                apply_src(&mut cand[i], data, &acc.act_inputs[i], cfg, i)?;
                if self.offer(acc, cand)? {
                    out.accepted += 1;
                } else {
                    acc.runs[i].src_step *= cfg.rollback_lr_factor;
                    out.rejected += 1;
                }
            }
            if comps.hso || comps.abr {
                let shared = shared_scale(&acc.runs, cfg);
                let mut cand = acc.runs.clone();
                let reapply = refine_layer(&mut cand[i], data, &acc.act_inputs[i], cfg, step_offset, shared)?;
                if self.offer(acc, cand)? {
                    out.accepted += 1;
                } else {
                    acc.runs[i].adam.lr_scale *= cfg.rollback_lr_factor;
                    out.rejected += 1;
                    // The scale alone leaves the quantized product unchanged,
                    // so balance can still be restored on the kept bounds.
                    if comps.hso {
                        match self.rebalance(acc, i, shared)? {
                            Some(true) => out.accepted += 1,
                            Some(false) => out.rejected += 1,
                            None => {}
                        }
                    }
                    continue;
                }
                if reapply {
                    let mut cand = acc.runs.clone();
                    apply_src(&mut cand[i], data, &acc.act_inputs[i], cfg, i)?;
                    if self.offer(acc, cand)? {
                        out.accepted += 1;
                        out.src_reapplied = true;
                    } else {
                        acc.runs[i].src_step *= cfg.rollback_lr_factor;
                        out.rejected += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs the harmonized loop on `model` using the fixed calibration batch.
pub fn run_harmoq(
    model: &dyn QuantizableModel,
    calib_set: &Tensor2D,
    cfg: &PipelineConfig,
) -> Result<(QuantizedModelState, PipelineTrace)> {
    if calib_set.rows() == 0 {
        return Err(HarmoqError::data("empty calibration set"));
    }
    cfg.validate()?;
    let taps = model.activation_taps(calib_set)?;
    if taps.len() != model.num_layers() {
        return Err(HarmoqError::dim("one activation tap per layer required"));
    }
    let init = minmax_state(model, &taps, cfg.bits)?;

    let data: Vec<LayerData> = (0..model.num_layers())
        .map(|i| {
            let theta = init.layers[i].theta;
            let mse_x = component_mse(Side::Activation, 1.0, &theta, cfg.bits.act)?;
            let mse_w = component_mse(Side::Weight, 1.0, &theta, cfg.bits.weight)?;
            Ok(LayerData {
                reference: model.layer_weight(i).clone(),
                inputs: taps[i].clone(),
                projection: layer_projection(model, i, &taps[i], &cfg.projection, cfg.seed)?,
                epsilon: cfg.epsilon_frac * 0.5 * (mse_x + mse_w),
            })
        })
        .collect::<Result<_>>()?;
    let engine = Engine { model, calib: calib_set, cfg, data };

    let runs: Vec<LayerRun> = init
        .layers
        .into_iter()
        .map(|state| LayerRun { state, adam: AdamState::default(), src_step: 1.0 })
        .collect();
    let (initial_loss, act_inputs) = engine.evaluate(&runs)?;
    let mut acc = Accepted { runs, loss: initial_loss, act_inputs };

    let mut records = Vec::new();
    let mut steps_used = 0usize;
    let mut quiet = 0usize;
    let mut stalled = 0usize;
    let mut iter = 0usize;
    let stop = loop {
        if cfg.components == Components::NONE {
            break StopReason::Converged;
        }
        iter += 1;
        let prev_loss = acc.loss;
        let outcome = engine.sweep(&mut acc, steps_used).map_err(|e| match e {
            HarmoqError::Numeric(m) => HarmoqError::Numeric(format!("iteration {iter}: {m}")),
            other => other,
        })?;
        if cfg.components.abr {
            steps_used += cfg.refiner.steps_per_round;
        }

        let runs = &acc.runs;
        let gaps = runs
            .iter()
            .map(|r| balance_gap(r.state.scale.value(), &r.state.theta, r.state.bits.act, r.state.bits.weight))
            .collect::<Result<Vec<_>>>()?;
        records.push(TraceRecord {
            iter,
            loss: acc.loss,
            gap: gaps.iter().copied().fold(0.0, f64::max),
            s_per_layer: runs.iter().map(|r| r.state.scale.value()).collect(),
            rollback: outcome.rejected > 0,
            src_reapplied: outcome.src_reapplied,
            accepted_stages: outcome.accepted,
            rejected_stages: outcome.rejected,
            scale_clamped: runs.iter().map(|r| r.state.scale.was_clamped()).collect(),
            drift_per_layer: runs.iter().map(|r| r.state.drift_norm()).collect(),
        });

        let delta = prev_loss - acc.loss;
        let rel = if prev_loss > 0.0 { delta / prev_loss } else { delta };
        quiet = if delta < cfg.early_stop_delta { quiet + 1 } else { 0 };
        stalled = if outcome.accepted == 0 { stalled + 1 } else { 0 };
        if outcome.accepted > 0 && rel < cfg.tau {
            break StopReason::Converged;
        }
        if stalled >= cfg.max_consecutive_rollbacks {
            break StopReason::Stalled;
        }
        if quiet >= cfg.early_stop_patience {
            break StopReason::EarlyStop;
        }
        if (!cfg.components.abr && iter >= cfg.max_iters) || steps_used >= cfg.max_iters {
            break StopReason::Budget;
        }
    };

    let state = QuantizedModelState { layers: acc.runs.into_iter().map(|r| r.state).collect() };
    let trace =
        PipelineTrace { initial_loss, records, stop, epsilon: engine.data.iter().map(|d| d.epsilon).collect() };
    Ok((state, trace))
}

/// Summed per-layer loss of an arbitrary state on a calibration batch.
pub fn state_loss(
    model: &dyn QuantizableModel,
    calib_set: &Tensor2D,
    state: &QuantizedModelState,
    form: ResidualForm,
) -> Result<f64> {
    let taps = model.activation_taps(calib_set)?;
    let act_inputs = model.quantized_taps(calib_set, state)?;
    let mut total = 0.0;
    for (i, layer) in state.layers.iter().enumerate() {
        let reference = model.layer_weight(i);
        let w = layer.corrected_weight(reference)?;
        let problem =
            LayerProblem::new(&w, &taps[i]).with_reference(reference).with_act_inputs(&act_inputs[i]).with_form(form);
        total += total_loss(&problem, layer.scale.value(), &layer.theta, layer.bits)?;
    }
    Ok(total)
}

// ── Ablation ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: String,
    pub src: bool,
    pub hso: bool,
    pub abr: bool,
    pub final_loss: f64,
    pub iterations: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub input_digest: String,
}

/// Runs the loop once per component subset on identical calibration inputs.
/// `evaluate` maps a quantized state to `(psnr, ssim)` on held-out data.
pub fn ablation_run(
    model: &(dyn QuantizableModel + Sync),
    calib_set: &Tensor2D,
    cfg: &PipelineConfig,
    subsets: &[Components],
    evaluate: &(dyn Fn(&QuantizedModelState) -> Result<(f64, f64)> + Sync),
) -> Result<Vec<AblationRow>> {
    if calib_set.rows() == 0 {
        return Err(HarmoqError::data("empty calibration set"));
    }
    let run_one = |&components: &Components| -> Result<AblationRow> {
        // Digest what this run actually calibrates on.
        let digest = calibration_digest(&model.activation_taps(calib_set)?);
        let run_cfg = PipelineConfig { components, ..cfg.clone() };
        let (state, trace) = run_harmoq(model, calib_set, &run_cfg)?;
        let (psnr, ssim) = evaluate(&state)?;
        Ok(AblationRow {
            components: components.label(),
            src: components.src,
            hso: components.hso,
            abr: components.abr,
            final_loss: trace.final_loss(),
            iterations: trace.records.len(),
            psnr,
            ssim,
            input_digest: digest,
        })
    };
    if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| HarmoqError::config(format!("thread pool: {e}")))?;
        pool.install(|| subsets.par_iter().map(run_one).collect())
    } else {
        subsets.iter().map(run_one).collect()
    }
}
