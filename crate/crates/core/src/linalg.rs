//! Dense row-major matrices and the handful of linear-algebra routines the
//! quantization engine needs: products, an SPD solve, seeded Gaussian draws
//! and the `HQT1` tensor file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};

/// Default diagonal stabilizer added before Cholesky factorization.
pub const DEFAULT_SOLVER_EPS: f64 = 1e-6;

/// Relative tolerance for the symmetry precondition of [`cholesky_solve`].
pub const SYMMETRY_TOL: f64 = 1e-10;

const HQT1_MAGIC: &[u8; 4] = b"HQT1";

/// Dense real matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor2D {
    type Error = HarmoqError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor2D::new(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor2D {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HarmoqError::dim(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HarmoqError::data(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on already-valid inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HarmoqError::dim("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(HarmoqError::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, p) = (self.rows, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_raw(n, p, out))
    }

    /// `self · otherᵀ`, without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(HarmoqError::dim(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(Self::from_raw(self.rows, other.rows, out))
    }

    /// `selfᵀ · other`, the Gram-style product used for second moments.
    pub fn t_matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(HarmoqError::dim(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (p, q) = (self.cols, other.cols);
        let mut out = vec![0.0; p * q];
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * q..(i + 1) * q].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::from_raw(p, q, out))
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(HarmoqError::dim(format!(
                "matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    fn zip_with(&self, other: &Tensor2D, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(HarmoqError::dim(format!(
                "{op} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scaled(&self, factor: f64) -> Tensor2D {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Adds `value` to every diagonal entry of a square matrix.
    pub fn add_diagonal(&self, value: f64) -> Result<Tensor2D> {
        if self.rows != self.cols {
            return Err(HarmoqError::dim("add_diagonal on a non-square matrix"));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += value;
        }
        Ok(out)
    }

    /// `(M + Mᵀ) / 2` for a square matrix.
    pub fn symmetrized(&self) -> Result<Tensor2D> {
        if self.rows != self.cols {
            return Err(HarmoqError::dim("symmetrize a non-square matrix"));
        }
        let n = self.rows;
        Ok(Self::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i))))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `tr(self)` for square matrices.
    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether the matrix is square and symmetric within `rel_tol · max|a_ij|`.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Stacks rows of several equal-width matrices.
    pub fn vstack(parts: &[Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(HarmoqError::dim("vstack with differing column counts"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Writes the matrix in `HQT1` format (32-bit little-endian floats).
    pub fn write_hqt1<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = u32::try_from(self.rows).map_err(|_| HarmoqError::dim("rows exceed u32"))?;
        let cols = u32::try_from(self.cols).map_err(|_| HarmoqError::dim("cols exceed u32"))?;
        w.write_all(HQT1_MAGIC)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_hqt1<R: Read>(mut r: R) -> Result<Tensor2D> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != HQT1_MAGIC {
            return Err(HarmoqError::Format("bad HQT1 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let rank = word(4);
        if rank != 2 {
            return Err(HarmoqError::Format(format!("unsupported HQT1 rank {rank}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor2D::new(rows, cols, data)
    }

    pub fn save_hqt1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_hqt1(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_hqt1(path: impl AsRef<Path>) -> Result<Tensor2D> {
        Self::read_hqt1(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `X · (A + eps·I) = B` for symmetric positive-definite `A` via Cholesky.
///
/// `A` is `k×k`, `B` is `m×k`; the result has the shape of `B`. Inputs whose
/// asymmetry exceeds [`SYMMETRY_TOL`] (relative) are rejected, not repaired.
pub fn cholesky_solve(a: &Tensor2D, b: &Tensor2D, eps: f64) -> Result<Tensor2D> {
    let k = a.rows();
    if a.cols() != k {
        return Err(HarmoqError::dim(format!("cholesky_solve: A is {}x{}", a.rows(), a.cols())));
    }
    if b.cols() != k {
        return Err(HarmoqError::dim(format!(
            "cholesky_solve: B is {}x{}, A is {k}x{k}",
            b.rows(),
            b.cols()
        )));
    }
    if !(eps >= 0.0) {
        return Err(HarmoqError::config(format!("cholesky_solve: eps {eps} < 0")));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(HarmoqError::data("cholesky_solve: A is not symmetric"));
    }

    let l = cholesky_factor(a, eps)?;

    // (A + eps I) is symmetric, so X (A + eps I) = B  <=>  (L Lᵀ) xᵢ = bᵢ per row.
    let mut out = vec![0.0; b.rows() * k];
    let mut y = vec![0.0; k];
    for r in 0..b.rows() {
        let rhs = b.row(r);
        for i in 0..k {
            let mut s = rhs[i];
            for j in 0..i {
                s -= l[i * k + j] * y[j];
            }
            y[i] = s / l[i * k + i];
        }
        let x = &mut out[r * k..(r + 1) * k];
        for i in (0..k).rev() {
            let mut s = y[i];
            for j in (i + 1)..k {
                s -= l[j * k + i] * x[j];
            }
            x[i] = s / l[i * k + i];
        }
    }
    Ok(Tensor2D::from_raw(b.rows(), k, out))
}

/// Lower-triangular factor of `A + eps·I`, row-major.
fn cholesky_factor(a: &Tensor2D, eps: f64) -> Result<Vec<f64>> {
    let k = a.rows();
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a.get(i, j);
            if i == j {
                s += eps;
            }
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(HarmoqError::Singular(format!(
                        "non-positive pivot {s:e} at index {i}"
                    )));
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(l)
}

/// Deterministic RNG used everywhere a seed appears.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows×cols` matrix of i.i.d. standard normal entries, a pure function of its arguments.
pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64) -> Result<Tensor2D> {
    if rows == 0 || cols == 0 {
        return Err(HarmoqError::dim(format!("seeded_gaussian: zero dimension {rows}x{cols}")));
    }
    let mut rng = seeded_rng(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor2D::from_raw(rows, cols, data))
}
