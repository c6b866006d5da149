//! Flat `key = value` run configuration.
//!
//! Every key has a default (see [`RunConfig::entries`]); unknown keys are
//! rejected. Lines starting with `#` are comments.

use std::fmt;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::pipeline::{Components, PipelineConfig};
use crate::projection::ProjectionKind;
use crate::refiner::{BitWidths, ResidualForm};
use crate::sr_eval::{bundled_pipeline_config, Activation, CorpusConfig, ScenarioSizes, ToyNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub format: ReportFormat,
    pub corpus: CorpusConfig,
    pub sizes: ScenarioSizes,
    pub net: ToyNetConfig,
    pub pipeline: PipelineConfig,
    /// Two-sided activation percentile of the percentile baseline.
    pub percentile: f64,
    /// Bit-widths swept by the single-side sensitivity modes.
    pub sensitivity_bits: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 1,
            format: ReportFormat::Csv,
            corpus: CorpusConfig::default(),
            sizes: ScenarioSizes::default(),
            net: ToyNetConfig::default(),
            pipeline: bundled_pipeline_config(42, BitWidths::new(2, 2)),
            percentile: 99.9,
            sensitivity_bits: vec![2, 3, 4, 6, 8],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| HarmoqError::config(format!("{key}: invalid value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HarmoqError::config(format!("{key}: expected true|false, got '{value}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    }
}

fn residual_name(r: ResidualForm) -> &'static str {
    match r {
        ResidualForm::FirstOrder => "first_order",
        ResidualForm::Exact => "exact",
    }
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pipeline;
        let r = &p.refiner;
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("format", self.format.to_string()),
            ("quant.bits_w", p.bits.weight.to_string()),
            ("quant.bits_a", p.bits.act.to_string()),
            ("corpus.hr_height", self.corpus.hr_height.to_string()),
            ("corpus.hr_width", self.corpus.hr_width.to_string()),
            ("corpus.factor", self.corpus.factor.to_string()),
            ("corpus.edge_density", self.corpus.edge_density.to_string()),
            ("scenario.train", self.sizes.train.to_string()),
            ("scenario.calib", self.sizes.calib.to_string()),
            ("scenario.eval", self.sizes.eval.to_string()),
            ("net.layer_dims", join(&self.net.layer_dims)),
            ("net.activation", activation_name(self.net.activation).to_string()),
            ("net.readout_ridge", self.net.readout_ridge.to_string()),
            ("net.skip", self.net.skip.to_string()),
            ("src.lambda", p.src.lambda.to_string()),
            ("src.solver_eps", p.src.solver_eps.to_string()),
            ("projection.kind", p.projection.kind.to_string()),
            ("projection.rows", p.projection.rows.map_or("auto".to_string(), |k| k.to_string())),
            ("stats.momentum", p.stats.momentum.to_string()),
            ("stats.warmup", p.stats.warmup.to_string()),
            ("stats.batch_size", p.stats.batch_size.to_string()),
            ("stats.passes", p.stats.passes.to_string()),
            ("pipeline.components", p.components.label()),
            ("pipeline.tau", p.tau.to_string()),
            ("pipeline.max_iters", p.max_iters.to_string()),
            ("pipeline.early_stop_delta", p.early_stop_delta.to_string()),
            ("pipeline.early_stop_patience", p.early_stop_patience.to_string()),
            ("pipeline.epsilon_frac", p.epsilon_frac.to_string()),
            ("pipeline.src_retrigger_factor", p.src_retrigger_factor.to_string()),
            ("pipeline.rollback_lr_factor", p.rollback_lr_factor.to_string()),
            ("pipeline.rebalance_period", p.rebalance_period.to_string()),
            ("pipeline.max_consecutive_rollbacks", p.max_consecutive_rollbacks.to_string()),
            ("pipeline.shared_scale", p.shared_scale.to_string()),
            ("pipeline.residual", residual_name(p.residual).to_string()),
            ("refiner.lr_init", r.lr_init.to_string()),
            ("refiner.lr_final", r.lr_final.to_string()),
            ("refiner.warmup_steps", r.warmup_steps.to_string()),
            ("refiner.horizon", r.horizon.to_string()),
            ("refiner.grad_clip_norm", r.grad_clip_norm.to_string()),
            ("refiner.steps_per_round", r.steps_per_round.to_string()),
            ("refiner.adam_beta1", r.adam_beta1.to_string()),
            ("refiner.adam_beta2", r.adam_beta2.to_string()),
            ("refiner.adam_eps", r.adam_eps.to_string()),
            ("refiner.weight_decay", r.weight_decay.to_string()),
            ("baseline.percentile", self.percentile.to_string()),
            ("sensitivity.bits", join(&self.sensitivity_bits)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.pipeline;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "format" => {
                self.format = ReportFormat::from_str(v, false)
                    .map_err(|_| HarmoqError::config(format!("format: expected csv|jsonl, got '{v}'")))?
            }
            "quant.bits_w" => p.bits.weight = parse(key, v)?,
            "quant.bits_a" => p.bits.act = parse(key, v)?,
            "corpus.hr_height" => self.corpus.hr_height = parse(key, v)?,
            "corpus.hr_width" => self.corpus.hr_width = parse(key, v)?,
            "corpus.factor" => self.corpus.factor = parse(key, v)?,
            "corpus.edge_density" => self.corpus.edge_density = parse(key, v)?,
            "scenario.train" => self.sizes.train = parse(key, v)?,
            "scenario.calib" => self.sizes.calib = parse(key, v)?,
            "scenario.eval" => self.sizes.eval = parse(key, v)?,
            "net.layer_dims" => self.net.layer_dims = parse_list(key, v)?,
            "net.activation" => self.net.activation = v.parse()?,
            "net.readout_ridge" => self.net.readout_ridge = parse(key, v)?,
            "net.skip" => self.net.skip = parse_bool(key, v)?,
            "src.lambda" => p.src.lambda = parse(key, v)?,
            "src.solver_eps" => p.src.solver_eps = parse(key, v)?,
            "projection.kind" => p.projection.kind = v.parse::<ProjectionKind>()?,
            "projection.rows" => p.projection.rows = if v == "auto" { None } else { Some(parse(key, v)?) },
            "stats.momentum" => p.stats.momentum = parse(key, v)?,
            "stats.warmup" => p.stats.warmup = parse(key, v)?,
            "stats.batch_size" => p.stats.batch_size = parse(key, v)?,
            "stats.passes" => p.stats.passes = parse(key, v)?,
            "pipeline.components" => p.components = Components::parse(v)?,
            "pipeline.tau" => p.tau = parse(key, v)?,
            "pipeline.max_iters" => p.max_iters = parse(key, v)?,
            "pipeline.early_stop_delta" => p.early_stop_delta = parse(key, v)?,
            "pipeline.early_stop_patience" => p.early_stop_patience = parse(key, v)?,
            "pipeline.epsilon_frac" => p.epsilon_frac = parse(key, v)?,
            "pipeline.src_retrigger_factor" => p.src_retrigger_factor = parse(key, v)?,
            "pipeline.rollback_lr_factor" => p.rollback_lr_factor = parse(key, v)?,
            "pipeline.rebalance_period" => p.rebalance_period = parse(key, v)?,
            "pipeline.max_consecutive_rollbacks" => p.max_consecutive_rollbacks = parse(key, v)?,
            "pipeline.shared_scale" => p.shared_scale = parse_bool(key, v)?,
            "pipeline.residual" => {
                p.residual = match v {
                    "first_order" => ResidualForm::FirstOrder,
                    "exact" => ResidualForm::Exact,
                    _ => return Err(HarmoqError::config(format!("{key}: expected first_order|exact, got '{v}'"))),
                }
            }
            "refiner.lr_init" => p.refiner.lr_init = parse(key, v)?,
            "refiner.lr_final" => p.refiner.lr_final = parse(key, v)?,
            "refiner.warmup_steps" => p.refiner.warmup_steps = parse(key, v)?,
            "refiner.horizon" => p.refiner.horizon = parse(key, v)?,
            "refiner.grad_clip_norm" => p.refiner.grad_clip_norm = parse(key, v)?,
            "refiner.steps_per_round" => p.refiner.steps_per_round = parse(key, v)?,
            "refiner.adam_beta1" => p.refiner.adam_beta1 = parse(key, v)?,
            "refiner.adam_beta2" => p.refiner.adam_beta2 = parse(key, v)?,
            "refiner.adam_eps" => p.refiner.adam_eps = parse(key, v)?,
            "refiner.weight_decay" => p.refiner.weight_decay = parse(key, v)?,
            "baseline.percentile" => self.percentile = parse(key, v)?,
            "sensitivity.bits" => self.sensitivity_bits = parse_list(key, v)?,
            _ => return Err(HarmoqError::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarmoqError::config(format!("{origin}:{}: expected 'key = value'", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| HarmoqError::config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| HarmoqError::config(format!("override '{spec}' is not KEY=VALUE")))?;
        self.set(key.trim(), value)
    }

    /// The resolved configuration as config-file text.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Propagates the run seed and thread count and checks every section.
    pub fn finish(&mut self) -> Result<()> {
        self.pipeline.seed = self.seed;
        self.pipeline.threads = self.threads;
        self.corpus.seed = self.seed;
        self.net.seed = self.seed;
        if self.threads == 0 {
            return Err(HarmoqError::config("threads must be >= 1"));
        }
        if !(self.percentile > 50.0 && self.percentile <= 100.0) {
            return Err(HarmoqError::config("baseline.percentile must lie in (50, 100]"));
        }
        if self.sizes.train == 0 || self.sizes.calib == 0 || self.sizes.eval == 0 {
            return Err(HarmoqError::config("scenario sizes must be >= 1"));
        }
        self.pipeline.validate()?;
        self.net.block_side()?;
        Ok(())
    }
}

fn strip_prefix(e: &HarmoqError) -> String {
    match e {
        HarmoqError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
