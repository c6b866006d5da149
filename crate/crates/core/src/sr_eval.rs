//! A small single-channel super-resolution harness: synthetic corpus, a
//! dense toy network over image blocks, PSNR/SSIM, and the per-layer
//! weight/activation sensitivity study.
//!
//! The network upsamples the low-resolution input with nearest neighbour,
//! cuts it into `b×b` blocks and maps each flattened block through dense
//! layers to a residual that is added back to the block. Hidden layers are
//! random; the readout layer is fitted by ridge regression on a training
//! corpus so the network genuinely sharpens its input.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::{cholesky_solve, seeded_gaussian, seeded_rng, Tensor2D};
use crate::pipeline::{minmax_state, PipelineConfig, QuantizableModel, QuantizedModelState};
use crate::quantizer::{fake_quantize, minmax_bounds, percentile_bounds, QuantizerConfig, MAX_BITS, MIN_BITS};
use crate::refiner::{BitWidths, ResidualForm};
use crate::scale::{BoundarySet, Side};

pub const PSNR_CAP_DB: f64 = 100.0;
/// Bit-width that leaves a side in full precision.
pub const FULL_PRECISION_BITS: u32 = 32;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

// ── Images ────────────────────────────────────────────────────────────────

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImagePlane {
    /// Clamps every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(HarmoqError::dim(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HarmoqError::data("image contains non-finite values"));
        }
        Ok(Self { height, width, values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(HarmoqError::dim(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn upsample_nearest(img: &ImagePlane, factor: usize) -> Result<ImagePlane> {
    ImagePlane::from_fn(img.height * factor, img.width * factor, |y, x| img.get(y / factor, x / factor))
}

/// Mean over non-overlapping `factor×factor` cells.
pub fn downsample_box(img: &ImagePlane, factor: usize) -> Result<ImagePlane> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(HarmoqError::dim(format!(
            "{}x{} image not divisible by factor {factor}",
            img.height, img.width
        )));
    }
    let area = (factor * factor) as f64;
    ImagePlane::from_fn(img.height / factor, img.width / factor, |y, x| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.get(y * factor + dy, x * factor + dx);
            }
        }
        s / area
    })
}

// ── Metrics ───────────────────────────────────────────────────────────────

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.values.len() as f64)
}

/// `10·log10(1/MSE)` for unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (y, x) = ((i / SSIM_WINDOW) as f64 - c, (i % SSIM_WINDOW) as f64 - c);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Local SSIM statistics of one window position.
fn ssim_at(a: &ImagePlane, b: &ImagePlane, win: &[f64], y0: usize, x0: usize) -> f64 {
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for wy in 0..SSIM_WINDOW {
        for wx in 0..SSIM_WINDOW {
            let g = win[wy * SSIM_WINDOW + wx];
            let (va, vb) = (a.get(y0 + wy, x0 + wx), b.get(y0 + wy, x0 + wx));
            ma += g * va;
            mb += g * vb;
            saa += g * va * va;
            sbb += g * vb * vb;
            sab += g * va * vb;
        }
    }
    let (var_a, var_b, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over every valid position of an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(HarmoqError::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let win = gaussian_window();
    let (ny, nx) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            total += ssim_at(a, b, &win, y, x);
        }
    }
    Ok(total / (ny * nx) as f64)
}

// ── PGM I/O ───────────────────────────────────────────────────────────────

fn image_err(e: image::ImageError) -> HarmoqError {
    match e {
        image::ImageError::IoError(io) => HarmoqError::Io(io),
        other => HarmoqError::Format(other.to_string()),
    }
}

/// Reads a PGM file; samples map linearly from `[0, maxval]` to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<ImagePlane> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode().map_err(image_err)?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    ImagePlane::new(h as usize, w as usize, gray.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Writes a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, img: &ImagePlane) -> Result<()> {
    let bytes: Vec<u8> = img.values.iter().map(|v| (v * 255.0).round() as u8).collect();
    let file = std::fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(image_err)
}

// ── Corpus ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub hr_height: usize,
    pub hr_width: usize,
    pub factor: usize,
    /// Probability that an image receives step edges, and separately a texture.
    pub edge_density: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 32, hr_height: 16, hr_width: 16, factor: 2, edge_density: 0.6, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrSample {
    pub hr: ImagePlane,
    pub lr: ImagePlane,
}

fn synth_image(rng: &mut ChaCha8Rng, h: usize, w: usize, edge_density: f64) -> Result<ImagePlane> {
    let base = rng.random_range(0.2..0.8);
    let (gy, gx) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
    let mut edges = Vec::new();
    if rng.random_bool(edge_density) {
        for _ in 0..rng.random_range(1..=2) {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let offset = rng.random_range(-0.3..0.3) * h.min(w) as f64;
            let amp = rng.random_range(0.2..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            edges.push((angle.cos(), angle.sin(), offset, amp));
        }
    }
    let texture = if rng.random_bool(edge_density) {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Some((angle.cos(), angle.sin(), rng.random_range(0.3..1.2), rng.random_range(0.05..0.15), rng.random_range(0.0..6.28)))
    } else {
        None
    };
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    ImagePlane::from_fn(h, w, |y, x| {
        let (py, px) = (y as f64 - cy + 0.5, x as f64 - cx + 0.5);
        let mut v = base + gy * py + gx * px;
        for &(c, s, off, amp) in &edges {
            if c * px + s * py > off {
                v += amp;
            }
        }
        if let Some((c, s, freq, amp, phase)) = texture {
            v += amp * (freq * (c * px + s * py) + phase).sin();
        }
        v
    })
}

/// Seed-deterministic corpus of HR patches and their box-downsampled LR versions.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SrSample>> {
    if cfg.factor == 0 || cfg.hr_height % cfg.factor != 0 || cfg.hr_width % cfg.factor != 0 {
        return Err(HarmoqError::config("corpus: HR size must be divisible by the factor"));
    }
    if !(0.0..=1.0).contains(&cfg.edge_density) {
        return Err(HarmoqError::config("corpus: edge_density must lie in [0, 1]"));
    }
    (0..cfg.count)
        .map(|i| {
            let mut rng = seeded_rng(cfg.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let hr = synth_image(&mut rng, cfg.hr_height, cfg.hr_width, cfg.edge_density)?;
            let lr = downsample_box(&hr, cfg.factor)?;
            Ok(SrSample { hr, lr })
        })
        .collect()
}

// ── Network ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = HarmoqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            _ => Err(HarmoqError::config(format!("unknown activation '{s}' (expected relu|gelu)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub upscale: usize,
    pub patch_size: (usize, usize),
    pub seed: u64,
    /// Ridge weight of the readout fit.
    pub readout_ridge: f64,
    /// Add the upsampled input block to the network output.
    pub skip: bool,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![16, 32, 32, 16],
            activation: Activation::Relu,
            upscale: 2,
            patch_size: (16, 16),
            seed: 42,
            readout_ridge: 1e-3,
            skip: false,
        }
    }
}

impl ToyNetConfig {
    /// Side length of the square block a layer-0 input covers.
    pub fn block_side(&self) -> Result<usize> {
        let dims = &self.layer_dims;
        if dims.len() < 2 {
            return Err(HarmoqError::config("toy net needs at least one layer"));
        }
        if dims.iter().any(|&d| d < 4) {
            return Err(HarmoqError::config("toy net widths must be >= 4"));
        }
        let d0 = dims[0];
        let b = (d0 as f64).sqrt().round() as usize;
        if b * b != d0 || dims[dims.len() - 1] != d0 {
            return Err(HarmoqError::config("input and output widths must equal one square block"));
        }
        let (ph, pw) = self.patch_size;
        if ph % b != 0 || pw % b != 0 {
            return Err(HarmoqError::config(format!("patch {ph}x{pw} is not tiled by {b}x{b} blocks")));
        }
        if self.upscale == 0 || ph % self.upscale != 0 || pw % self.upscale != 0 {
            return Err(HarmoqError::config("patch size must be divisible by the upscale factor"));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub config: ToyNetConfig,
    pub weights: Vec<Tensor2D>,
    pub biases: Vec<Vec<f64>>,
    block: usize,
}

/// Cuts an image into `b×b` blocks (raster order), one flattened block per row.
pub fn image_to_blocks(img: &ImagePlane, b: usize) -> Result<Tensor2D> {
    if img.height % b != 0 || img.width % b != 0 {
        return Err(HarmoqError::dim(format!("{}x{} not tiled by {b}x{b}", img.height, img.width)));
    }
    let (by, bx) = (img.height / b, img.width / b);
    Ok(Tensor2D::from_fn(by * bx, b * b, |r, c| {
        let (y, x) = ((r / bx) * b + c / b, (r % bx) * b + c % b);
        img.get(y, x)
    }))
}

pub fn blocks_to_image(blocks: &Tensor2D, b: usize, height: usize, width: usize) -> Result<ImagePlane> {
    let bx = width / b;
    if blocks.shape() != ((height / b) * bx, b * b) {
        return Err(HarmoqError::dim("block tensor does not match image shape"));
    }
    ImagePlane::from_fn(height, width, |y, x| blocks.get((y / b) * bx + x / b, (y % b) * b + x % b))
}

/// Per-layer quantization of one forward pass. The scale is not applied:
/// `Q(x/s)·Q(sW) = Q(x)·Q(W)` for scale-equivariant quantizers.
struct LayerSpec {
    weight: Tensor2D,
    act: Option<QuantizerConfig>,
}

impl ToyNet {
    /// Random hidden layers, readout fitted on `train`.
    pub fn build(config: ToyNetConfig, train: &[SrSample]) -> Result<Self> {
        let block = config.block_side()?;
        if train.is_empty() {
            return Err(HarmoqError::data("toy net: empty training corpus"));
        }
        let dims = config.layer_dims.clone();
        let n_layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let gain = (2.0 / fan_in as f64).sqrt();
            weights.push(seeded_gaussian(fan_out, fan_in, config.seed.wrapping_add(l as u64))?.scaled(gain));
            let mut rng = seeded_rng(config.seed.wrapping_add(1000 + l as u64));
            biases.push((0..fan_out).map(|_| rng.random_range(-0.1..0.1)).collect());
        }
        let out = dims[n_layers];
        weights.push(Tensor2D::zeros(out, dims[n_layers - 1]));
        biases.push(vec![0.0; out]);
        let mut net = Self { config, weights, biases, block };
        net.fit_readout(train)?;
        Ok(net)
    }

    fn fit_readout(&mut self, train: &[SrSample]) -> Result<()> {
        let last = self.weights.len() - 1;
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for s in train {
            let x = image_to_blocks(&self.upsampled(&s.lr)?, self.block)?;
            let taps = self.activation_taps(&x)?;
            let hr = image_to_blocks(&s.hr, self.block)?;
            feats.push(taps[last].clone());
            targets.push(if self.config.skip { hr.sub(&x)? } else { hr });
        }
        let z = Tensor2D::vstack(&feats)?;
        let t = Tensor2D::vstack(&targets)?;
        let (n, f) = z.shape();
        let za = Tensor2D::from_fn(n, f + 1, |r, c| if c < f { z.get(r, c) } else { 1.0 });
        let gram = za.t_matmul(&za)?.symmetrized()?;
        let ridge = self.config.readout_ridge * n as f64;
        let coeffs = cholesky_solve(&gram, &t.t_matmul(&za)?, ridge)?;
        let out = t.cols();
        self.weights[last] = Tensor2D::from_fn(out, f, |r, c| coeffs.get(r, c));
        self.biases[last] = (0..out).map(|r| coeffs.get(r, f)).collect();
        Ok(())
    }

    /// Reassembles a network from stored weights (`m×d` per layer) and biases.
    pub fn from_parts(config: ToyNetConfig, weights: Vec<Tensor2D>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let block = config.block_side()?;
        let dims = &config.layer_dims;
        if weights.len() != dims.len() - 1 || biases.len() != weights.len() {
            return Err(HarmoqError::dim(format!(
                "{} layers declared, {} weights and {} biases given",
                dims.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape() != (dims[l + 1], dims[l]) || b.len() != dims[l + 1] {
                return Err(HarmoqError::dim(format!("layer {l}: weight {:?}, bias {}", w.shape(), b.len())));
            }
        }
        Ok(Self { config, weights, biases, block })
    }

    pub fn block_side(&self) -> usize {
        self.block
    }

    pub fn upsampled(&self, lr: &ImagePlane) -> Result<ImagePlane> {
        upsample_nearest(lr, self.config.upscale)
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.config.layer_dims[0] {
            return Err(HarmoqError::dim(format!(
                "network input width {} expected, got {}",
                self.config.layer_dims[0],
                x.cols()
            )));
        }
        Ok(())
    }

    fn dense(&self, l: usize, x: &Tensor2D, w: &Tensor2D) -> Result<Tensor2D> {
        let mut y = x.matmul_t(w)?;
        let b = &self.biases[l];
        let act = self.config.activation;
        let hidden = l + 1 < self.weights.len();
        let cols = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % cols];
            if hidden {
                *v = act.apply(*v);
            }
        }
        Ok(y)
    }

    /// Blocks in, residual-added blocks out (unclamped). When `taps` is given
    /// it receives each layer's input before any quantization.
    fn run_blocks_tapped(
        &self,
        x: &Tensor2D,
        specs: Option<&[LayerSpec]>,
        mut taps: Option<&mut Vec<Tensor2D>>,
    ) -> Result<Tensor2D> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            if let Some(t) = taps.as_deref_mut() {
                t.push(h.clone());
            }
            h = match specs {
                None => self.dense(l, &h, &self.weights[l])?,
                Some(specs) => {
                    let spec = &specs[l];
                    let input = match &spec.act {
                        Some(cfg) => fake_quantize(&h, cfg)?,
                        None => h,
                    };
                    self.dense(l, &input, &spec.weight)?
                }
            };
        }
        if self.config.skip {
            h.add(x)
        } else {
            Ok(h)
        }
    }

    fn run_blocks(&self, x: &Tensor2D, specs: Option<&[LayerSpec]>) -> Result<Tensor2D> {
        self.run_blocks_tapped(x, specs, None)
    }

    fn quantized_specs(&self, state: &QuantizedModelState) -> Result<Vec<LayerSpec>> {
        if state.layers.len() != self.weights.len() {
            return Err(HarmoqError::dim(format!(
                "quantized state has {} layers, network has {}",
                state.layers.len(),
                self.weights.len()
            )));
        }
        state
            .layers
            .iter()
            .zip(&self.weights)
            .map(|(ls, w)| {
                let wc = ls.corrected_weight(w)?;
                if wc.shape() != w.shape() {
                    return Err(HarmoqError::dim("weight correction shape mismatch"));
                }
                let wcfg = ls.theta.weight_config(ls.bits.weight)?;
                let acfg = ls.theta.activation_config(ls.bits.act)?;
                Ok(LayerSpec { weight: fake_quantize(&wc, &wcfg)?, act: Some(acfg) })
            })
            .collect()
    }

    fn image_from_blocks(&self, y: &Tensor2D, like: &ImagePlane) -> Result<ImagePlane> {
        blocks_to_image(y, self.block, like.height, like.width)
    }
}

impl QuantizableModel for ToyNet {
    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn layer_weight(&self, i: usize) -> &Tensor2D {
        &self.weights[i]
    }

    fn input_spatial(&self, i: usize) -> Option<(usize, usize)> {
        (i == 0).then_some((self.block, self.block))
    }

    fn activation_taps(&self, batch: &Tensor2D) -> Result<Vec<Tensor2D>> {
        self.check_input(batch)?;
        let mut taps = Vec::with_capacity(self.weights.len());
        let mut h = batch.clone();
        for l in 0..self.weights.len() {
            let next = self.dense(l, &h, &self.weights[l])?;
            taps.push(h);
            h = next;
        }
        Ok(taps)
    }

    fn quantized_taps(&self, batch: &Tensor2D, state: &QuantizedModelState) -> Result<Vec<Tensor2D>> {
        let specs = self.quantized_specs(state)?;
        let mut taps = Vec::with_capacity(self.weights.len());
        self.run_blocks_tapped(batch, Some(&specs), Some(&mut taps))?;
        Ok(taps)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Fp,
    Quantized(&'a QuantizedModelState),
}

/// Super-resolves one low-resolution image.
pub fn forward(net: &ToyNet, lr: &ImagePlane, mode: ForwardMode<'_>) -> Result<ImagePlane> {
    let up = net.upsampled(lr)?;
    let x = image_to_blocks(&up, net.block)?;
    let y = match mode {
        ForwardMode::Fp => net.run_blocks(&x, None)?,
        ForwardMode::Quantized(state) => net.run_blocks(&x, Some(&net.quantized_specs(state)?))?,
    };
    net.image_from_blocks(&y, &up)
}

/// Stacked layer-0 inputs of a set of samples.
pub fn corpus_blocks(net: &ToyNet, samples: &[SrSample]) -> Result<Tensor2D> {
    let parts = samples
        .iter()
        .map(|s| image_to_blocks(&net.upsampled(&s.lr)?, net.block))
        .collect::<Result<Vec<_>>>()?;
    Tensor2D::vstack(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR/SSIM against the HR references, accumulated in corpus order.
pub fn evaluate_corpus(net: &ToyNet, corpus: &[SrSample], mode: ForwardMode<'_>) -> Result<CorpusMetrics> {
    if corpus.is_empty() {
        return Err(HarmoqError::data("empty evaluation corpus"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for sample in corpus {
        let out = forward(net, &sample.lr, mode)?;
        p += psnr(&out, &sample.hr)?;
        s += ssim(&out, &sample.hr)?;
    }
    let n = corpus.len() as f64;
    Ok(CorpusMetrics { psnr: p / n, ssim: s / n })
}

// ── Baselines ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    MinMax,
    /// Activation bounds at the given two-sided percentile, weights MinMax.
    Percentile(f64),
}

pub fn baseline_state(net: &ToyNet, calib: &Tensor2D, bits: BitWidths, kind: Baseline) -> Result<QuantizedModelState> {
    let taps = net.activation_taps(calib)?;
    let mut state = minmax_state(net, &taps, bits)?;
    if let Baseline::Percentile(p) = kind {
        for (layer, tap) in state.layers.iter_mut().zip(&taps) {
            let (ax, bx) = percentile_bounds(tap.data(), p)?;
            layer.theta = BoundarySet { alpha_x: ax, beta_x: bx, ..layer.theta };
        }
    }
    Ok(state)
}

// ── Sensitivity ───────────────────────────────────────────────────────────

fn check_bits(b: u32) -> Result<Option<u32>> {
    if b == FULL_PRECISION_BITS {
        Ok(None)
    } else if (MIN_BITS..=MAX_BITS).contains(&b) {
        Ok(Some(b))
    } else {
        Err(HarmoqError::config(format!("bit-width {b} must be in [{MIN_BITS}, {MAX_BITS}] or {FULL_PRECISION_BITS}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: usize,
    /// Output MSE when only this layer's weights are quantized.
    pub weight_mse: f64,
    /// Output MSE when only this layer's input activations are quantized.
    pub act_mse: f64,
    pub weight_share: f64,
    pub act_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub layers: Vec<LayerSensitivity>,
    /// Weights at `weight_bits`, activations full precision.
    pub weight_only: ModeReport,
    /// Activations at `act_bits`, weights full precision.
    pub act_only: ModeReport,
}

/// MinMax quantizers per layer; bounds come from the corpus itself.
struct SensitivityRig {
    act: Vec<QuantizerConfig>,
    wq: Vec<Tensor2D>,
}

fn sensitivity_rig(net: &ToyNet, x: &Tensor2D, weight_bits: Option<u32>, act_bits: Option<u32>) -> Result<SensitivityRig> {
    let taps = net.activation_taps(x)?;
    let mut act = Vec::new();
    let mut wq = Vec::new();
    for (tap, w) in taps.iter().zip(&net.weights) {
        let (a, b) = minmax_bounds(tap.data())?;
        act.push(QuantizerConfig::new(act_bits.unwrap_or(MAX_BITS), a, b)?);
        let (a, b) = minmax_bounds(w.data())?;
        wq.push(fake_quantize(w, &QuantizerConfig::new(weight_bits.unwrap_or(MAX_BITS), a, b)?)?);
    }
    Ok(SensitivityRig { act, wq })
}

/// Specs quantizing the selected sides of the selected layers.
fn selective_specs(net: &ToyNet, rig: &SensitivityRig, layer: Option<usize>, side: Side) -> Vec<LayerSpec> {
    (0..net.weights.len())
        .map(|l| {
            let on = layer.is_none_or(|t| t == l);
            match (on, side) {
                (true, Side::Weight) => LayerSpec { weight: rig.wq[l].clone(), act: None },
                (true, Side::Activation) => {
                    LayerSpec { weight: net.weights[l].clone(), act: Some(rig.act[l]) }
                }
                (false, _) => LayerSpec { weight: net.weights[l].clone(), act: None },
            }
        })
        .collect()
}

fn clamp_blocks(t: &Tensor2D) -> Tensor2D {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn output_mse(net: &ToyNet, x: &Tensor2D, reference: &Tensor2D, specs: &[LayerSpec]) -> Result<f64> {
    let y = clamp_blocks(&net.run_blocks(x, Some(specs))?);
    let d = y.sub(reference)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
}

fn mode_report(net: &ToyNet, corpus: &[SrSample], rig: &SensitivityRig, side: Side, label: String) -> Result<ModeReport> {
    let specs = selective_specs(net, rig, None, side);
    let (mut p, mut s) = (0.0, 0.0);
    for sample in corpus {
        let up = net.upsampled(&sample.lr)?;
        let y = net.run_blocks(&image_to_blocks(&up, net.block)?, Some(&specs))?;
        let out = net.image_from_blocks(&y, &up)?;
        p += psnr(&out, &sample.hr)?;
        s += ssim(&out, &sample.hr)?;
    }
    let n = corpus.len() as f64;
    Ok(ModeReport { label, psnr: p / n, ssim: s / n })
}

/// Per-layer weight-only and activation-only output-MSE contributions plus
/// corpus metrics of the two single-side modes. A bit-width of
/// [`FULL_PRECISION_BITS`] disables that side.
pub fn sensitivity_analysis(net: &ToyNet, corpus: &[SrSample], weight_bits: u32, act_bits: u32) -> Result<SensitivityReport> {
    if corpus.is_empty() {
        return Err(HarmoqError::data("sensitivity: empty corpus"));
    }
    let (wb, ab) = (check_bits(weight_bits)?, check_bits(act_bits)?);
    let x = corpus_blocks(net, corpus)?;
    let reference = clamp_blocks(&net.run_blocks(&x, None)?);
    let rig = sensitivity_rig(net, &x, wb, ab)?;

    let mut layers = Vec::with_capacity(net.weights.len());
    for l in 0..net.weights.len() {
        let weight_mse = match wb {
            Some(_) => output_mse(net, &x, &reference, &selective_specs(net, &rig, Some(l), Side::Weight))?,
            None => 0.0,
        };
        let act_mse = match ab {
            Some(_) => output_mse(net, &x, &reference, &selective_specs(net, &rig, Some(l), Side::Activation))?,
            None => 0.0,
        };
        let total = weight_mse + act_mse;
        let (weight_share, act_share) = if total > 0.0 { (weight_mse / total, act_mse / total) } else { (0.0, 0.0) };
        layers.push(LayerSensitivity { layer: l, weight_mse, act_mse, weight_share, act_share });
    }

    let fp_label = |b: Option<u32>| b.unwrap_or(FULL_PRECISION_BITS);
    let weight_only = match wb {
        Some(_) => mode_report(net, corpus, &rig, Side::Weight, format!("W{}A{FULL_PRECISION_BITS}", fp_label(wb)))?,
        None => fp_mode(net, corpus, format!("W{FULL_PRECISION_BITS}A{FULL_PRECISION_BITS}"))?,
    };
    let act_only = match ab {
        Some(_) => mode_report(net, corpus, &rig, Side::Activation, format!("W{FULL_PRECISION_BITS}A{}", fp_label(ab)))?,
        None => fp_mode(net, corpus, format!("W{FULL_PRECISION_BITS}A{FULL_PRECISION_BITS}"))?,
    };
    Ok(SensitivityReport { layers, weight_only, act_only })
}

fn fp_mode(net: &ToyNet, corpus: &[SrSample], label: String) -> Result<ModeReport> {
    let m = evaluate_corpus(net, corpus, ForwardMode::Fp)?;
    Ok(ModeReport { label, psnr: m.psnr, ssim: m.ssim })
}

// ── Bundled scenario ──────────────────────────────────────────────────────

/// The fixed toy experiment: a network trained on one corpus, calibrated on
/// a second and evaluated on a third, all derived from one seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub net: ToyNet,
    pub train: Vec<SrSample>,
    pub calib: Vec<SrSample>,
    pub eval: Vec<SrSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSizes {
    pub train: usize,
    pub calib: usize,
    pub eval: usize,
}

impl Default for ScenarioSizes {
    fn default() -> Self {
        Self { train: 96, calib: 32, eval: 32 }
    }
}

/// Disjoint train, calibration and evaluation corpora derived from one seed.
pub fn scenario_splits(
    seed: u64,
    corpus: CorpusConfig,
    sizes: ScenarioSizes,
) -> Result<(Vec<SrSample>, Vec<SrSample>, Vec<SrSample>)> {
    let part =
        |count: usize, offset: u64| generate_corpus(&CorpusConfig { count, seed: seed.wrapping_add(offset), ..corpus });
    Ok((part(sizes.train, 0)?, part(sizes.calib, 1_000_003)?, part(sizes.eval, 2_000_003)?))
}

impl Scenario {
    pub fn build(seed: u64, net_cfg: ToyNetConfig, corpus: CorpusConfig, sizes: ScenarioSizes) -> Result<Self> {
        let (train, calib, eval) = scenario_splits(seed, corpus, sizes)?;
        let net = ToyNet::build(ToyNetConfig { seed, ..net_cfg }, &train)?;
        Ok(Self { seed, net, train, calib, eval })
    }

    /// Seed 42 with default network and corpus settings.
    pub fn bundled() -> Result<Self> {
        Self::build(42, ToyNetConfig::default(), CorpusConfig::default(), ScenarioSizes::default())
    }

    pub fn calib_batch(&self) -> Result<Tensor2D> {
        corpus_blocks(&self.net, &self.calib)
    }

    /// Pipeline settings used for the bundled experiments at the given bit-width.
    pub fn pipeline_config(&self, bits: u32) -> PipelineConfig {
        bundled_pipeline_config(self.seed, BitWidths::new(bits, bits))
    }
}

/// Library defaults with the boundary schedule shortened to a 40-iteration
/// budget (warmup and horizon keep their 1:10 ratio) and the exact residual.
pub fn bundled_pipeline_config(seed: u64, bits: BitWidths) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed, bits, ..PipelineConfig::default() };
    cfg.refiner.warmup_steps = 20;
    cfg.refiner.horizon = 200;
    cfg.residual = ResidualForm::Exact;
    cfg
}
