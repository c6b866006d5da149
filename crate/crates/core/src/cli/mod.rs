//! Command-line front end.
//!
//! Subcommands form a chain over one output directory:
//!
//! ```text
//! gen-corpus  -> corpus/{train,calib,eval}/NNNN_{hr,lr}.pgm
//! calibrate   -> model/ (toy network), calib/ (MinMax state, moments, input digest)
//! quantize    -> quant/state.json, quant/trace.jsonl, quant/summary.json
//! eval        -> reports/eval.{csv,jsonl}
//! ablate      -> reports/ablation.{csv,jsonl}
//! sensitivity -> reports/sensitivity_{layers,modes}.{csv,jsonl}
//! report      -> reports/<input stem>.{csv,jsonl}
//! ```
//!
//! Each stage reads from `--from` (default: `--out`) and writes to `--out`,
//! plus `manifests/<subcommand>.json` holding the resolved configuration and
//! SHA-256 digests of every file read and written. Passing that manifest back
//! with `--manifest` repeats the run.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing or
//! malformed input, 4 numeric failure.

pub mod config;
pub mod table;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{HarmoqError, Result};
use crate::linalg::Tensor2D;
use crate::pipeline::{
    ablation_run, calibration_digest, layer_moments, minmax_state, run_harmoq, Components, QuantizableModel,
    QuantizedModelState,
};
use crate::refiner::BitWidths;
use crate::scale::{balance_gap, component_mse, optimal_scale, Side};
use crate::sr_eval::{
    baseline_state, corpus_blocks, evaluate_corpus, read_pgm, scenario_splits, sensitivity_analysis, write_pgm,
    Baseline, ForwardMode, SrSample, ToyNet, ToyNetConfig, FULL_PRECISION_BITS,
};

pub use config::{ReportFormat, RunConfig};
pub use table::Table;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const SPLITS: [&str; 3] = ["train", "calib", "eval"];

#[derive(Parser, Debug)]
#[command(name = "harmoq", version, about = "Harmonized post-training quantization on a toy super-resolution model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory [default: harmoq-out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding earlier stages' outputs [default: the output directory].
    #[arg(long, global = true, value_name = "DIR")]
    from: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Repeat the run recorded in a manifest.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train, calibration and evaluation corpora as PGM images.
    GenCorpus,
    /// Fit the toy network and record MinMax calibration statistics.
    Calibrate,
    /// Run the harmonized pipeline; write the quantized state and its trace.
    Quantize(QuantizeArgs),
    /// Score full precision, the baselines and the quantized state.
    Eval,
    /// Run every component subset and write the ablation grid.
    Ablate(BitArgs),
    /// Per-layer weight/activation sensitivity and single-side bit sweeps.
    Sensitivity(BitArgs),
    /// Convert a JSON-lines or CSV table into the requested format.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct BitArgs {
    /// Shadows `quant.bits_w`.
    #[arg(long, value_name = "B")]
    bits_w: Option<u32>,
    /// Shadows `quant.bits_a`.
    #[arg(long, value_name = "B")]
    bits_a: Option<u32>,
}

#[derive(Args, Debug, Default)]
struct QuantizeArgs {
    #[command(flatten)]
    bits: BitArgs,
    /// Shadows `pipeline.components`, e.g. `SRC+ABR`.
    #[arg(long, value_name = "LIST")]
    components: Option<String>,
    /// Shadows `projection.kind`.
    #[arg(long, value_name = "KIND")]
    projection: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Table to convert (`.jsonl` or `.csv`).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Calibrate => "calibrate",
            Command::Quantize(_) => "quantize",
            Command::Eval => "eval",
            Command::Ablate(_) => "ablate",
            Command::Sensitivity(_) => "sensitivity",
            Command::Report(_) => "report",
        }
    }

    /// Subcommand flags as config overrides.
    fn overrides(&self) -> Vec<String> {
        let bits = |b: &BitArgs| {
            let mut v = Vec::new();
            if let Some(w) = b.bits_w {
                v.push(format!("quant.bits_w={w}"));
            }
            if let Some(a) = b.bits_a {
                v.push(format!("quant.bits_a={a}"));
            }
            v
        };
        match self {
            Command::Quantize(q) => {
                let mut v = bits(&q.bits);
                if let Some(c) = &q.components {
                    v.push(format!("pipeline.components={c}"));
                }
                if let Some(p) = &q.projection {
                    v.push(format!("projection.kind={p}"));
                }
                v
            }
            Command::Ablate(b) | Command::Sensitivity(b) => bits(b),
            _ => Vec::new(),
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub format: ReportFormat,
    pub from: String,
    /// Subcommand arguments that are not configuration keys.
    pub args: BTreeMap<String, String>,
    /// Resolved configuration, every key.
    pub config: Map<String, Value>,
    /// SHA-256 of each file read, relative to `from` (or as given for `report`).
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each file written, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn with_path(path: &Path, e: std::io::Error) -> HarmoqError {
    HarmoqError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &HarmoqError) -> i32 {
    match e {
        HarmoqError::Config(_) => EXIT_USAGE,
        HarmoqError::Numeric(_) | HarmoqError::Singular(_) => EXIT_NUMERIC,
        _ => EXIT_IO,
    }
}

/// One subcommand invocation: resolved config plus the files it touched.
struct Run {
    cfg: RunConfig,
    from: PathBuf,
    out: PathBuf,
    args: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    fn read(&mut self, rel: &str) -> Result<Vec<u8>> {
        let path = self.from.join(rel);
        let bytes = fs::read(&path).map_err(|e| with_path(&path, e))?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| with_path(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&mut self, rel: &str) -> Result<T> {
        let bytes = self.read(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| HarmoqError::Format(format!("{rel}: {e}")))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| HarmoqError::Format(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn read_tensor(&mut self, rel: &str) -> Result<Tensor2D> {
        let bytes = self.read(rel)?;
        Tensor2D::read_hqt1(&bytes[..])
    }

    fn write_tensor(&mut self, rel: &str, t: &Tensor2D) -> Result<()> {
        let mut bytes = Vec::new();
        t.write_hqt1(&mut bytes)?;
        self.write(rel, &bytes)
    }

    fn write_table(&mut self, stem: &str, table: &Table) -> Result<String> {
        let rel = format!("reports/{stem}.{}", self.cfg.format.extension());
        let text = table.render(self.cfg.format)?;
        self.write(&rel, text.as_bytes())?;
        Ok(rel)
    }

    fn read_split(&mut self, split: &str) -> Result<Vec<SrSample>> {
        let dir = self.from.join("corpus").join(split);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| with_path(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter_map(|n| n.strip_suffix("_hr.pgm").map(str::to_string))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(HarmoqError::data(format!("{}: no *_hr.pgm images", dir.display())));
        }
        names
            .iter()
            .map(|stem| {
                let mut load = |suffix: &str| -> Result<_> {
                    let rel = format!("corpus/{split}/{stem}_{suffix}.pgm");
                    self.read(&rel)?;
                    read_pgm(&self.from.join(&rel))
                };
                Ok(SrSample { hr: load("hr")?, lr: load("lr")? })
            })
            .collect()
    }

    fn load_model(&mut self) -> Result<ToyNet> {
        let config: ToyNetConfig = self.read_json("model/net.json")?;
        let layers = config.layer_dims.len().saturating_sub(1);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(self.read_tensor(&format!("model/layer{l}.weight.hqt1"))?);
            biases.push(self.read_tensor(&format!("model/layer{l}.bias.hqt1"))?.into_data());
        }
        ToyNet::from_parts(config, weights, biases)
    }

    fn save_model(&mut self, net: &ToyNet) -> Result<()> {
        self.write_json("model/net.json", &net.config)?;
        for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            self.write_tensor(&format!("model/layer{l}.weight.hqt1"), w)?;
            self.write_tensor(&format!("model/layer{l}.bias.hqt1"), &Tensor2D::new(1, b.len(), b.clone())?)?;
        }
        Ok(())
    }

    fn bits(&self) -> BitWidths {
        self.cfg.pipeline.bits
    }

    fn manifest(&self, subcommand: &str) -> RunManifest {
        RunManifest {
            tool: "harmoq".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed: self.cfg.seed,
            threads: self.cfg.threads,
            format: self.cfg.format,
            from: self.from.display().to_string(),
            args: self.args.clone(),
            config: self.cfg.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        }
    }
}

// ── Subcommands ───────────────────────────────────────────────────────────

fn gen_corpus(run: &mut Run) -> Result<String> {
    let (train, calib, eval) = scenario_splits(run.cfg.seed, run.cfg.corpus, run.cfg.sizes)?;
    for (split, samples) in SPLITS.iter().zip([&train, &calib, &eval]) {
        for (i, s) in samples.iter().enumerate() {
            for (suffix, img) in [("hr", &s.hr), ("lr", &s.lr)] {
                let rel = format!("corpus/{split}/{i:04}_{suffix}.pgm");
                let path = run.out.join(&rel);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
                }
                write_pgm(&path, img)?;
                let bytes = fs::read(&path).map_err(|e| with_path(&path, e))?;
                run.outputs.insert(rel, sha256_hex(&bytes));
            }
        }
    }
    Ok(format!("gen-corpus: {} train, {} calib, {} eval images", train.len(), calib.len(), eval.len()))
}

fn calibrate(run: &mut Run) -> Result<String> {
    let train = run.read_split("train")?;
    let calib = run.read_split("calib")?;
    let trained = ToyNet::build(run.cfg.net.clone(), &train)?;
    // Downstream stages see the stored 32-bit weights; calibrate on the same.
    let narrow = |t: &Tensor2D| t.map(|v| v as f32 as f64);
    let net = ToyNet::from_parts(
        trained.config.clone(),
        trained.weights.iter().map(narrow).collect(),
        trained.biases.iter().map(|b| b.iter().map(|&v| v as f32 as f64).collect()).collect(),
    )?;
    run.save_model(&net)?;

    let bits = run.bits();
    let batch = corpus_blocks(&net, &calib)?;
    let taps = net.activation_taps(&batch)?;
    let state = minmax_state(&net, &taps, bits)?;
    let act_inputs = net.quantized_taps(&batch, &state)?;
    let mut layers = Vec::new();
    for (l, layer) in state.layers.iter().enumerate() {
        let m = layer_moments(&taps[l], &act_inputs[l], &layer.theta, bits, &run.cfg.pipeline.stats)?;
        run.write_tensor(&format!("calib/layer{l}.sigma_xx.hqt1"), &m.sigma_xx)?;
        run.write_tensor(&format!("calib/layer{l}.sigma_dx.hqt1"), &m.sigma_dx)?;
        run.write_tensor(&format!("calib/layer{l}.sigma_dd.hqt1"), &m.sigma_dd)?;
        let t = layer.theta;
        let s = optimal_scale(&t, bits.act, bits.weight);
        layers.push(json!({
            "layer": l,
            "alpha_x": t.alpha_x, "beta_x": t.beta_x, "alpha_w": t.alpha_w, "beta_w": t.beta_w,
            "mse_x": component_mse(Side::Activation, 1.0, &t, bits.act)?,
            "mse_w": component_mse(Side::Weight, 1.0, &t, bits.weight)?,
            "gap": balance_gap(1.0, &t, bits.act, bits.weight)?,
            "s_star": s.value(),
            "s_clamped": s.was_clamped(),
        }));
    }
    let digest = calibration_digest(&taps);
    run.write_json("calib/minmax_state.json", &state)?;
    run.write_json(
        "calib/summary.json",
        &json!({"digest": digest, "rows": batch.rows(), "bits_w": bits.weight, "bits_a": bits.act, "layers": layers}),
    )?;
    Ok(format!("calibrate: {} layers, {} calibration rows, digest {}", net.num_layers(), batch.rows(), &digest[..12]))
}

/// The network and calibration batch, checked against what `calibrate` recorded.
fn calibrated_inputs(run: &mut Run) -> Result<(ToyNet, Tensor2D)> {
    let net = run.load_model()?;
    let calib = run.read_split("calib")?;
    let batch = corpus_blocks(&net, &calib)?;
    let summary: Value = run.read_json("calib/summary.json")?;
    let digest = calibration_digest(&net.activation_taps(&batch)?);
    if summary.get("digest").and_then(Value::as_str) != Some(digest.as_str()) {
        return Err(HarmoqError::data("calibration inputs differ from those recorded by calibrate"));
    }
    Ok((net, batch))
}

fn quantize(run: &mut Run) -> Result<String> {
    let (net, batch) = calibrated_inputs(run)?;
    let (state, trace) = run_harmoq(&net, &batch, &run.cfg.pipeline)?;
    run.write_json("quant/state.json", &state)?;
    run.write("quant/trace.jsonl", trace.to_jsonl().as_bytes())?;
    let summary = json!({
        "components": run.cfg.pipeline.components.label(),
        "bits_w": run.bits().weight,
        "bits_a": run.bits().act,
        "initial_loss": trace.initial_loss,
        "final_loss": trace.final_loss(),
        "iterations": trace.records.len(),
        "stop": trace.stop,
        "epsilon": trace.epsilon,
    });
    run.write_json("quant/summary.json", &summary)?;
    Ok(format!(
        "quantize: L_total {:.6} -> {:.6} after {} iterations ({:?})",
        trace.initial_loss,
        trace.final_loss(),
        trace.records.len(),
        trace.stop
    ))
}

fn eval(run: &mut Run) -> Result<String> {
    let (net, batch) = calibrated_inputs(run)?;
    let eval = run.read_split("eval")?;
    let state: QuantizedModelState = run.read_json("quant/state.json")?;
    let bits = state
        .layers
        .first()
        .map(|l| l.bits)
        .ok_or_else(|| HarmoqError::data("quantized state has no layers"))?;
    let mut table = Table::default();
    let mut row = |method: &str, bw: u32, ba: u32, mode: ForwardMode<'_>| -> Result<()> {
        let m = evaluate_corpus(&net, &eval, mode)?;
        table.push(json!({"method": method, "bits_w": bw, "bits_a": ba, "psnr": m.psnr, "ssim": m.ssim}));
        Ok(())
    };
    row("full_precision", FULL_PRECISION_BITS, FULL_PRECISION_BITS, ForwardMode::Fp)?;
    let minmax = baseline_state(&net, &batch, bits, Baseline::MinMax)?;
    row("minmax", bits.weight, bits.act, ForwardMode::Quantized(&minmax))?;
    let pct = baseline_state(&net, &batch, bits, Baseline::Percentile(run.cfg.percentile))?;
    row("percentile", bits.weight, bits.act, ForwardMode::Quantized(&pct))?;
    row("harmoq", bits.weight, bits.act, ForwardMode::Quantized(&state))?;
    let rel = run.write_table("eval", &table)?;
    Ok(format!("eval: wrote {rel}"))
}

fn ablate(run: &mut Run) -> Result<String> {
    let (net, batch) = calibrated_inputs(run)?;
    let eval = run.read_split("eval")?;
    let evaluate = |s: &QuantizedModelState| {
        let m = evaluate_corpus(&net, &eval, ForwardMode::Quantized(s))?;
        Ok((m.psnr, m.ssim))
    };
    let rows = ablation_run(&net, &batch, &run.cfg.pipeline, &Components::all_subsets(), &evaluate)?;
    let mut table = Table::default();
    for r in &rows {
        table.push(serde_json::to_value(r).map_err(|e| HarmoqError::Format(e.to_string()))?);
    }
    let rel = run.write_table("ablation", &table)?;
    Ok(format!("ablate: {} subsets, wrote {rel}", rows.len()))
}

fn sensitivity(run: &mut Run) -> Result<String> {
    let net = run.load_model()?;
    let eval = run.read_split("eval")?;
    let bits = run.bits();
    let report = sensitivity_analysis(&net, &eval, bits.weight, bits.act)?;
    let mut layers = Table::default();
    for l in &report.layers {
        layers.push(json!({
            "layer": l.layer, "bits_w": bits.weight, "bits_a": bits.act,
            "weight_mse": l.weight_mse, "act_mse": l.act_mse,
            "weight_share": l.weight_share, "act_share": l.act_share,
        }));
    }
    let mut modes = Table::default();
    for &b in &run.cfg.sensitivity_bits {
        let r = sensitivity_analysis(&net, &eval, b, b)?;
        for (mode, m) in [("weight_only", &r.weight_only), ("act_only", &r.act_only)] {
            modes.push(json!({"bits": b, "mode": mode, "label": m.label, "psnr": m.psnr, "ssim": m.ssim}));
        }
    }
    let a = run.write_table("sensitivity_layers", &layers)?;
    let b = run.write_table("sensitivity_modes", &modes)?;
    Ok(format!("sensitivity: wrote {a} and {b}"))
}

fn report(run: &mut Run) -> Result<String> {
    let input = PathBuf::from(run.args.get("input").cloned().unwrap_or_default());
    let bytes = fs::read(&input).map_err(|e| with_path(&input, e))?;
    run.inputs.insert(input.display().to_string(), sha256_hex(&bytes));
    let table = Table::read(&input)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| HarmoqError::data(format!("{}: no file name", input.display())))?;
    let rel = run.write_table(stem, &table)?;
    Ok(format!("report: {} rows, wrote {rel}", table.rows.len()))
}

// ── Entry point ───────────────────────────────────────────────────────────

fn resolve(cli: &Cli) -> Result<(Run, Option<RunManifest>)> {
    let g = &cli.global;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("harmoq-out"));
    let mut args = BTreeMap::new();
    if let Command::Report(r) = &cli.command {
        args.insert("input".to_string(), r.input.display().to_string());
    }

    if let Some(path) = &g.manifest {
        let shadowing = g.config.is_some()
            || g.seed.is_some()
            || g.threads.is_some()
            || g.from.is_some()
            || g.format.is_some()
            || !g.set.is_empty()
            || !cli.command.overrides().is_empty();
        if shadowing {
            return Err(HarmoqError::config("--manifest cannot be combined with configuration flags"));
        }
        let bytes = fs::read(path).map_err(|e| with_path(path, e))?;
        let manifest: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| HarmoqError::Format(format!("{}: {e}", path.display())))?;
        if manifest.subcommand != cli.command.name() {
            return Err(HarmoqError::config(format!(
                "manifest records '{}', not '{}'",
                manifest.subcommand,
                cli.command.name()
            )));
        }
        let mut cfg = RunConfig::default();
        for (k, v) in &manifest.config {
            let v = v.as_str().ok_or_else(|| HarmoqError::Format(format!("manifest key {k}: not a string")))?;
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        if manifest.subcommand != "report" {
            args = manifest.args.clone();
        }
        let run = Run {
            cfg,
            from: PathBuf::from(&manifest.from),
            out,
            args,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        return Ok((run, Some(manifest)));
    }

    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    for spec in g.set.iter().chain(&cli.command.overrides()) {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = g.threads {
        cfg.threads = threads;
    }
    if let Some(format) = g.format {
        cfg.format = format;
    }
    cfg.finish()?;
    let from = g.from.clone().unwrap_or_else(|| out.clone());
    Ok((Run { cfg, from, out, args, inputs: BTreeMap::new(), outputs: BTreeMap::new() }, None))
}

/// Refuses to repeat a run whose inputs no longer match the manifest.
fn check_inputs(run: &Run, manifest: &RunManifest) -> Result<()> {
    for (rel, expected) in &manifest.inputs {
        let path = if manifest.subcommand == "report" { PathBuf::from(rel) } else { run.from.join(rel) };
        let bytes = fs::read(&path).map_err(|e| with_path(&path, e))?;
        if &sha256_hex(&bytes) != expected {
            return Err(HarmoqError::data(format!("{} changed since the manifest was written", path.display())));
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<String> {
    let (mut run, manifest) = resolve(cli)?;
    if let Some(m) = &manifest {
        check_inputs(&run, m)?;
    }
    let summary = match &cli.command {
        Command::GenCorpus => gen_corpus(&mut run)?,
        Command::Calibrate => calibrate(&mut run)?,
        Command::Quantize(_) => quantize(&mut run)?,
        Command::Eval => eval(&mut run)?,
        Command::Ablate(_) => ablate(&mut run)?,
        Command::Sensitivity(_) => sensitivity(&mut run)?,
        Command::Report(_) => report(&mut run)?,
    };
    let m = run.manifest(cli.command.name());
    let rel = format!("manifests/{}.json", cli.command.name());
    let path = run.out.join(&rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&m).map_err(|e| HarmoqError::Format(e.to_string()))? + "\n";
    fs::write(&path, text).map_err(|e| with_path(&path, e))?;
    Ok(summary)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr as one line.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("harmoq: {e}");
            exit_code(&e)
        }
    }
}
