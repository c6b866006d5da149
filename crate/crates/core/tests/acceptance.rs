//! Acceptance report: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use harmoq::linalg::{seeded_gaussian, seeded_rng, Tensor2D};
use harmoq::pipeline::{ablation_run, run_harmoq, Components, PipelineConfig, PipelineTrace};
use harmoq::projection::{make_projection, ProjectionKind, ProjectionRequest};
use harmoq::quantizer::{quant_error, theoretical_mse, QuantizerConfig};
use harmoq::refiner::{BitWidths, ResidualForm};
use harmoq::scale::{component_mse, optimal_scale, BoundarySet, Side};
use harmoq::src_calib::{compute_src_correction, SrcConfig};
use harmoq::sr_eval::{baseline_state, evaluate_corpus, Baseline, ForwardMode, Scenario};
use harmoq::stats::Moments;
use harmoq::QuantizedModelState;
use rand::Rng;

/// Final 2-bit loss of the bundled scenario, pinned from the first verified run.
const PINNED_FINAL_LOSS_2BIT: f64 = 31.654387174323812;
const PINNED_REL_TOL: f64 = 1e-9;
const PERCENTILE: f64 = 99.9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let pass = o.pass && took <= budget;
    let tag = if pass { "PASS" } else { "FAIL" };
    println!(
        "[{tag}] criterion {id:>2}: {title} | {} | {:.1}s of {}s",
        o.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn mse_law() -> Outcome {
    let mut rng = seeded_rng(1);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for bits in [4u32, 8] {
        let cfg = QuantizerConfig::new(bits, -1.3, 2.1).unwrap();
        let n = 1_000_000;
        let z = Tensor2D::new(n, 1, (0..n).map(|_| rng.random_range(cfg.alpha..cfg.beta)).collect()).unwrap();
        let e = quant_error(&z, &cfg).unwrap();
        let empirical = e.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let rel = (empirical / theoretical_mse(&cfg) - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("b={bits} rel.err {rel:.2e}"));
    }
    outcome(worst <= 0.03, format!("{} (tol 3e-2)", parts.join(", ")))
}

fn balance_identity() -> Outcome {
    let mut rng = seeded_rng(2);
    let (mut tested, mut worst) = (0, 0.0f64);
    while tested < 1000 {
        let ax = rng.random_range(-5.0..0.0);
        let aw = rng.random_range(-5.0..0.0);
        let theta = BoundarySet::new(ax, ax + rng.random_range(0.05..10.0), aw, aw + rng.random_range(0.05..10.0)).unwrap();
        let (bx, bw) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let s = optimal_scale(&theta, bx, bw);
        if s.was_clamped() {
            continue;
        }
        let a = component_mse(Side::Activation, s.value(), &theta, bx).unwrap();
        let w = component_mse(Side::Weight, s.value(), &theta, bw).unwrap();
        worst = worst.max((a - w).abs() / a);
        tested += 1;
    }
    outcome(worst <= 1e-12, format!("{tested} configs, max rel gap {worst:.2e} (tol 1e-12)"))
}

fn src_equivalence() -> Outcome {
    let (mut gap, mut grad_ratio) = (f64::NEG_INFINITY, 0.0f64);
    for t in 0..50u64 {
        let (m, d, k) = common::shapes(1000 + t);
        let inst = common::instance(100 * t + 11, m, d, k);
        let closed = compute_src_correction(&inst.w, &inst.moments, &inst.proj, &SrcConfig::default()).unwrap();
        let gd = common::gd_oracle(&inst, Tensor2D::zeros(m, k), 10_000);
        gap = gap.max(common::objective(&inst, &closed) - common::objective(&inst, &gd));
        let g = common::numerical_gradient(&inst, &closed, 1e-5).frobenius_norm();
        grad_ratio = grad_ratio.max(g / (1e-6 * (1.0 + inst.w.frobenius_norm())));
    }
    outcome(
        gap <= 1e-6 && grad_ratio < 1.0,
        format!("50 instances, max f(closed)-f(gd) {gap:.2e} (tol 1e-6), max |grad|/bound {grad_ratio:.3} (< 1)"),
    )
}

fn boundary_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for form in [ResidualForm::FirstOrder, ResidualForm::Exact] {
        for t in 0..100u64 {
            worst = worst.max(common::check(&common::case(10_000 + 17 * t), form));
        }
    }
    outcome(worst < 1e-5, format!("100 configs x 2 residual forms, max rel error {worst:.2e} (tol 1e-5)"))
}

struct Bundled {
    sc: Scenario,
    calib: Tensor2D,
}

impl Bundled {
    fn cfg(&self, bits: u32) -> PipelineConfig {
        self.sc.pipeline_config(bits)
    }

    fn run(&self, cfg: &PipelineConfig) -> (QuantizedModelState, PipelineTrace) {
        run_harmoq(&self.sc.net, &self.calib, cfg).unwrap()
    }

    fn psnr(&self, state: &QuantizedModelState) -> f64 {
        evaluate_corpus(&self.sc.net, &self.sc.eval, ForwardMode::Quantized(state)).unwrap().psnr
    }
}

fn monotone(b: &Bundled) -> Outcome {
    let (_, trace) = b.run(&b.cfg(2));
    let mut prev = trace.initial_loss;
    let mut ok = true;
    for r in &trace.records {
        ok &= r.loss <= prev;
        prev = r.loss;
    }
    let fin = trace.final_loss();
    let iters = trace.records.len();
    let pinned_ok = (fin - PINNED_FINAL_LOSS_2BIT).abs() <= PINNED_REL_TOL * PINNED_FINAL_LOSS_2BIT.abs();
    outcome(
        ok && iters <= 40 && fin < trace.initial_loss && pinned_ok,
        format!(
            "monotone {ok}, {iters} iterations ({:?}, limit 40), L {:.6} -> {fin:.15}, pinned {PINNED_FINAL_LOSS_2BIT} (rel tol {PINNED_REL_TOL:e})",
            trace.stop, trace.initial_loss
        ),
    )
}

fn ordering(b: &Bundled) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for bits in [2u32, 3] {
        let (state, _) = b.run(&b.cfg(bits));
        let bw = BitWidths::new(bits, bits);
        let mm = baseline_state(&b.sc.net, &b.calib, bw, Baseline::MinMax).unwrap();
        let pc = baseline_state(&b.sc.net, &b.calib, bw, Baseline::Percentile(PERCENTILE)).unwrap();
        let (h, m, p) = (b.psnr(&state), b.psnr(&mm), b.psnr(&pc));
        ok &= h >= m && h >= p;
        parts.push(format!("{bits}-bit HarmoQ {h:.3} / MinMax {m:.3} / Percentile {p:.3} dB"));
    }
    outcome(ok, parts.join(", "))
}

fn ablation(b: &Bundled) -> Outcome {
    let cfg = PipelineConfig { threads: 4, ..b.cfg(2) };
    let eval = |s: &QuantizedModelState| {
        let m = evaluate_corpus(&b.sc.net, &b.sc.eval, ForwardMode::Quantized(s))?;
        Ok((m.psnr, m.ssim))
    };
    let rows = ablation_run(&b.sc.net, &b.calib, &cfg, &Components::all_subsets(), &eval).unwrap();
    let full = rows.iter().find(|r| r.src && r.hso && r.abr).unwrap().final_loss;
    let best = rows.iter().min_by(|a, c| a.final_loss.total_cmp(&c.final_loss)).unwrap();
    let runner_up = rows
        .iter()
        .filter(|r| !(r.src && r.hso && r.abr))
        .min_by(|a, c| a.final_loss.total_cmp(&c.final_loss))
        .unwrap();
    outcome(
        rows.iter().all(|r| full <= r.final_loss),
        format!(
            "2-bit full {full:.6}, lowest {} {:.6}, best other {} {:.6}",
            best.components, best.final_loss, runner_up.components, runner_up.final_loss
        ),
    )
}

fn projection(b: &Bundled) -> Outcome {
    let mut annihilate = true;
    for (h, w) in [(3, 3), (4, 4), (5, 7), (8, 8)] {
        for kind in [ProjectionKind::Laplacian, ProjectionKind::Sobel] {
            let p = make_projection(ProjectionRequest::new(kind, h * w).spatial(h, w)).unwrap();
            annihilate &= p.h.matvec(&vec![1.0; h * w]).unwrap().iter().all(|&v| v == 0.0);
        }
    }
    let mut lap = b.cfg(2);
    lap.projection.kind = ProjectionKind::Laplacian;
    let mut rnd = lap.clone();
    rnd.projection.kind = ProjectionKind::Random;
    let l = b.run(&lap).1.final_loss();
    let r = b.run(&rnd).1.final_loss();
    outcome(annihilate && r >= l, format!("H*1 = 0 exactly: {annihilate}; 2-bit random {r:.6} vs laplacian {l:.6}"))
}

fn scaling() -> Outcome {
    let k = 8;
    let dims = [64usize, 128, 256, 512];
    let mut times = Vec::new();
    for &d in &dims {
        let w = seeded_gaussian(d, d, 1).unwrap();
        let x = seeded_gaussian(2 * d, d, 2).unwrap();
        let sigma_xx = x.t_matmul(&x).unwrap().scaled(1.0 / (2 * d) as f64).symmetrized().unwrap();
        let moments = Moments { sigma_dx: sigma_xx.scaled(0.1), sigma_dd: sigma_xx.scaled(0.01), sigma_xx };
        let proj = make_projection(ProjectionRequest::new(ProjectionKind::Random, d).rows(k).seed(3)).unwrap();
        let cfg = SrcConfig::default();
        // Best of several repetitions, each long enough to time reliably.
        let reps = (1 << 23) / (d * d) + 1;
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(compute_src_correction(&w, &moments, &proj, &cfg).unwrap());
            }
            best = best.min(start.elapsed().as_secs_f64() / reps as f64);
        }
        times.push(best);
    }
    let xs: Vec<f64> = dims.iter().map(|&d| (d as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let shown: Vec<String> = dims.iter().zip(&times).map(|(d, t)| format!("d={d}: {:.3}ms", t * 1e3)).collect();
    outcome((1.7..=2.6).contains(&slope), format!("k={k}, {}, exponent {slope:.3} (range [1.7, 2.6])", shown.join(", ")))
}

fn harmoq(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_harmoq")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
    let stages = ["gen-corpus", "calibrate", "quantize", "eval", "ablate", "sensitivity"];
    for stage in stages {
        if !harmoq(&[stage, "--out", a_s, "--threads", "1", "--seed", "42"]) {
            return outcome(false, format!("first run of {stage} failed"));
        }
    }
    for stage in stages {
        let manifest = a.join("manifests").join(format!("{stage}.json"));
        if !harmoq(&[stage, "--manifest", manifest.to_str().unwrap(), "--out", b_s]) {
            return outcome(false, format!("manifest rerun of {stage} failed"));
        }
    }
    let files = [
        "quant/trace.jsonl",
        "quant/state.json",
        "reports/eval.csv",
        "reports/ablation.csv",
        "reports/sensitivity_layers.csv",
        "reports/sensitivity_modes.csv",
    ];
    let same = |rel: &str| -> bool {
        match (std::fs::read(a.join(rel)), std::fs::read(b.join(rel))) {
            (Ok(x), Ok(y)) => x == y && !x.is_empty(),
            _ => false,
        }
    };
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    outcome(
        differing.is_empty() && Path::new(&a.join("manifests/quantize.json")).exists(),
        if differing.is_empty() {
            format!("{} trace/report files byte-identical after manifest reruns", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    results.push(run(1, "quantizer MSE law", secs(10), mse_law));
    results.push(run(2, "scale balance identity", secs(1), balance_identity));
    results.push(run(3, "SRC oracle equivalence", secs(60), src_equivalence));
    results.push(run(4, "boundary gradient check", secs(30), boundary_check));

    let sc = Scenario::bundled().unwrap();
    let calib = sc.calib_batch().unwrap();
    let bundled = Bundled { sc, calib };
    results.push(run(5, "pipeline monotonicity and convergence", secs(300), || monotone(&bundled)));
    results.push(run(6, "end-to-end PSNR ordering", secs(600), || ordering(&bundled)));
    results.push(run(7, "ablation ordering", secs(1800), || ablation(&bundled)));
    results.push(run(8, "projection sanity", secs(600), || projection(&bundled)));
    results.push(run(9, "SRC complexity scaling", secs(300), scaling));
    results.push(run(10, "manifest determinism", secs(600), determinism));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
