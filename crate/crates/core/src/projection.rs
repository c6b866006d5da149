//! Structural feature projections `H ∈ R^{k×d}`.
//!
//! Stencil kinds place a fixed filter at every valid position of the feature
//! vector (1D) or of its declared `h×w` spatial layout (2D). When fewer rows
//! than valid positions are requested, evenly spaced positions are kept.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{HarmoqError, Result};
use crate::linalg::{seeded_gaussian, Tensor2D};

const LAPLACIAN_2D: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Cap on default subspace dimension for shallow layers.
pub const DEFAULT_MAX_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Laplacian,
    Sobel,
    DctHighpass,
    LearnedBasis,
    Random,
    Identity,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 6] = [
        Self::Laplacian,
        Self::Sobel,
        Self::DctHighpass,
        Self::LearnedBasis,
        Self::Random,
        Self::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Laplacian => "laplacian",
            Self::Sobel => "sobel",
            Self::DctHighpass => "dct_highpass",
            Self::LearnedBasis => "learned_basis",
            Self::Random => "random",
            Self::Identity => "identity",
        }
    }

    /// Kinds whose rows are zero-sum stencils.
    pub fn annihilates_constants(self) -> bool {
        matches!(self, Self::Laplacian | Self::Sobel)
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectionKind {
    type Err = HarmoqError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                HarmoqError::config(format!(
                    "unknown projection kind '{s}' (expected laplacian|sobel|dct_highpass|learned_basis|random|identity)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub kind: ProjectionKind,
    pub h: Tensor2D,
    pub spatial: Option<(usize, usize)>,
}

impl ProjectionMatrix {
    pub fn rows(&self) -> usize {
        self.h.rows()
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }
}

/// Inputs to [`make_projection`]. Only the fields a kind needs are consulted.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionRequest<'a> {
    pub kind: ProjectionKind,
    pub dim: usize,
    /// Requested row count `k`; `None` picks the kind's default.
    pub rows: Option<usize>,
    pub spatial: Option<(usize, usize)>,
    pub seed: Option<u64>,
    /// `n×d` layer features on the calibration set, for `learned_basis`.
    pub calib_outputs: Option<&'a Tensor2D>,
}

impl<'a> ProjectionRequest<'a> {
    pub fn new(kind: ProjectionKind, dim: usize) -> Self {
        Self { kind, dim, rows: None, spatial: None, seed: None, calib_outputs: None }
    }

    pub fn rows(mut self, k: usize) -> Self {
        self.rows = Some(k);
        self
    }

    pub fn spatial(mut self, h: usize, w: usize) -> Self {
        self.spatial = Some((h, w));
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn calib_outputs(mut self, outputs: &'a Tensor2D) -> Self {
        self.calib_outputs = Some(outputs);
        self
    }
}

/// Default `k` for a kind at feature width `d`. A random projection stands
/// in for the Laplacian and takes its size.
pub fn default_rows(kind: ProjectionKind, d: usize, spatial: Option<(usize, usize)>) -> usize {
    let cap = DEFAULT_MAX_ROWS.min(d.saturating_sub(2)).max(1);
    match (kind, spatial) {
        (ProjectionKind::Identity, _) => d,
        (ProjectionKind::Laplacian | ProjectionKind::Random, Some((h, w))) => cap.min(interior(h, w)).max(1),
        (ProjectionKind::Sobel, Some((h, w))) => cap.min(2 * interior(h, w)).max(1),
        _ => cap,
    }
}

fn interior(h: usize, w: usize) -> usize {
    h.saturating_sub(2) * w.saturating_sub(2)
}

pub fn make_projection(req: ProjectionRequest<'_>) -> Result<ProjectionMatrix> {
    let d = req.dim;
    if d < 3 {
        return Err(HarmoqError::config(format!("projection needs d >= 3, got {d}")));
    }
    if let Some((h, w)) = req.spatial {
        if h * w != d {
            return Err(HarmoqError::config(format!("spatial {h}x{w} does not cover d = {d}")));
        }
    }
    let k = req.rows.unwrap_or_else(|| default_rows(req.kind, d, req.spatial));
    if k == 0 || k > d {
        return Err(HarmoqError::config(format!("projection rows k = {k} outside [1, {d}]")));
    }

    let h = match req.kind {
        ProjectionKind::Laplacian => match req.spatial {
            None => select_rows(&laplacian_1d(d), k)?,
            Some((hh, ww)) => select_rows(&stencil_rows(&LAPLACIAN_2D, hh, ww), k)?,
        },
        ProjectionKind::Sobel => {
            let (hh, ww) = req
                .spatial
                .ok_or_else(|| HarmoqError::config("sobel projection needs a spatial shape"))?;
            let mut rows = stencil_rows(&SOBEL_X, hh, ww);
            rows.extend(stencil_rows(&SOBEL_Y, hh, ww));
            select_rows(&rows, k)?
        }
        ProjectionKind::DctHighpass => dct_highpass(d, k),
        ProjectionKind::LearnedBasis => {
            let outputs = req
                .calib_outputs
                .ok_or_else(|| HarmoqError::config("learned_basis projection needs calibration outputs"))?;
            learned_basis(outputs, d, k)?
        }
        ProjectionKind::Random => {
            let seed = req.seed.ok_or_else(|| HarmoqError::config("random projection needs a seed"))?;
            let mut g = seeded_gaussian(k, d, seed)?;
            for r in 0..k {
                let norm = g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut g.data_mut()[r * d..(r + 1) * d] {
                    *v /= norm;
                }
            }
            g
        }
        ProjectionKind::Identity => {
            if k != d {
                return Err(HarmoqError::config("identity projection requires k = d"));
            }
            Tensor2D::identity(d)
        }
    };
    Ok(ProjectionMatrix { kind: req.kind, h, spatial: req.spatial })
}

fn laplacian_1d(d: usize) -> Vec<Vec<f64>> {
    (0..d - 2)
        .map(|p| {
            let mut row = vec![0.0; d];
            row[p] = 1.0;
            row[p + 1] = -2.0;
            row[p + 2] = 1.0;
            row
        })
        .collect()
}

/// One row per interior pixel (raster order), each a 3×3 kernel laid over an `h×w` grid.
fn stencil_rows(kernel: &[[f64; 3]; 3], h: usize, w: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(interior(h, w));
    for cy in 1..h.saturating_sub(1) {
        for cx in 1..w.saturating_sub(1) {
            let mut row = vec![0.0; h * w];
            for (ky, krow) in kernel.iter().enumerate() {
                for (kx, &kv) in krow.iter().enumerate() {
                    row[(cy + ky - 1) * w + (cx + kx - 1)] = kv;
                }
            }
            rows.push(row);
        }
    }
    rows
}

fn select_rows(all: &[Vec<f64>], k: usize) -> Result<Tensor2D> {
    let n = all.len();
    if k > n {
        return Err(HarmoqError::config(format!("stencil admits {n} rows, {k} requested")));
    }
    let picked: Vec<Vec<f64>> = (0..k).map(|i| all[i * n / k].clone()).collect();
    Tensor2D::from_rows(&picked)
}

/// Highest-`k` frequencies of the orthonormal `d`-point DCT-II.
fn dct_highpass(d: usize, k: usize) -> Tensor2D {
    let n = d as f64;
    Tensor2D::from_fn(k, d, |r, i| {
        let freq = (d - k + r) as f64;
        let norm = if freq == 0.0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        norm * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * freq / (2.0 * n)).cos()
    })
}

/// Top-`k` principal directions of Laplacian-filtered features.
///
/// The 1D second difference is applied with zero padding so the filtered
/// features stay `d`-dimensional; rows of the result are orthonormal.
fn learned_basis(outputs: &Tensor2D, d: usize, k: usize) -> Result<Tensor2D> {
    if outputs.cols() != d {
        return Err(HarmoqError::dim(format!(
            "learned_basis: calibration outputs have width {}, expected {d}",
            outputs.cols()
        )));
    }
    if outputs.rows() == 0 {
        return Err(HarmoqError::config("learned_basis: empty calibration outputs"));
    }
    let lap = Tensor2D::from_fn(d, d, |i, j| match i.abs_diff(j) {
        0 => -2.0,
        1 => 1.0,
        _ => 0.0,
    });
    let filtered = outputs.matmul_t(&lap)?;
    let gram = filtered.t_matmul(&filtered)?.symmetrized()?;
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, gram.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut h = Tensor2D::zeros(k, d);
    for (r, &c) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(c);
        // Sign convention: the largest-magnitude component is positive.
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            h.set(r, j, sign * v[j]);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_residual(p: &ProjectionMatrix) -> f64 {
        let ones = vec![1.0; p.dim()];
        p.h.matvec(&ones).unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    fn gram_error(h: &Tensor2D) -> f64 {
        h.matmul_t(h).unwrap().max_abs_diff(&Tensor2D::identity(h.rows()))
    }

    #[test]
    fn laplacian_1d_placement() {
        let p = make_projection(ProjectionRequest::new(ProjectionKind::Laplacian, 4)).unwrap();
        assert_eq!(p.h.data(), &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
    }

    #[test]
    fn stencils_annihilate_constants_exactly() {
        for req in [
            ProjectionRequest::new(ProjectionKind::Laplacian, 16),
            ProjectionRequest::new(ProjectionKind::Laplacian, 16).spatial(4, 4),
            ProjectionRequest::new(ProjectionKind::Sobel, 16).spatial(4, 4),
            ProjectionRequest::new(ProjectionKind::Sobel, 64).spatial(8, 8).rows(40),
            ProjectionRequest::new(ProjectionKind::Laplacian, 100).spatial(10, 10),
        ] {
            let p = make_projection(req).unwrap();
            assert_eq!(ones_residual(&p), 0.0, "{:?}", req.kind);
        }
    }

    #[test]
    fn two_d_row_counts() {
        let lap = make_projection(ProjectionRequest::new(ProjectionKind::Laplacian, 20).spatial(4, 5)).unwrap();
        assert_eq!(lap.rows(), 6);
        let sob = make_projection(ProjectionRequest::new(ProjectionKind::Sobel, 20).spatial(4, 5)).unwrap();
        assert_eq!(sob.rows(), 12);
        // centre tap of the first 2D Laplacian row sits at pixel (1,1)
        assert_eq!(lap.h.get(0, 5 + 1), -4.0);
    }

    #[test]
    fn dct_rows_are_orthonormal() {
        for (d, k) in [(8, 3), (16, 14), (33, 10)] {
            let p = make_projection(ProjectionRequest::new(ProjectionKind::DctHighpass, d).rows(k)).unwrap();
            assert!(gram_error(&p.h) < 1e-10);
        }
    }

    #[test]
    fn random_rows_have_unit_norm_and_are_deterministic() {
        let req = ProjectionRequest::new(ProjectionKind::Random, 12).rows(5).seed(3);
        let a = make_projection(req).unwrap();
        let b = make_projection(req).unwrap();
        assert_eq!(a.h.data(), b.h.data());
        for r in 0..5 {
            let n: f64 = a.h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_basis_is_orthonormal() {
        let outputs = seeded_gaussian(200, 10, 5).unwrap();
        let req = ProjectionRequest::new(ProjectionKind::LearnedBasis, 10).rows(4).calib_outputs(&outputs);
        let p = make_projection(req).unwrap();
        assert!(gram_error(&p.h) < 1e-10);
        assert_eq!(make_projection(req).unwrap().h.data(), p.h.data());
    }

    #[test]
    fn identity_hook() {
        let p = make_projection(ProjectionRequest::new(ProjectionKind::Identity, 5)).unwrap();
        assert_eq!(p.h, Tensor2D::identity(5));
    }

    #[test]
    fn configuration_errors() {
        let bad = [
            ProjectionRequest::new(ProjectionKind::Laplacian, 4).rows(3),
            ProjectionRequest::new(ProjectionKind::Sobel, 16),
            ProjectionRequest::new(ProjectionKind::Random, 16),
            ProjectionRequest::new(ProjectionKind::LearnedBasis, 16),
            ProjectionRequest::new(ProjectionKind::Laplacian, 2),
            ProjectionRequest::new(ProjectionKind::Laplacian, 16).spatial(3, 4),
            ProjectionRequest::new(ProjectionKind::DctHighpass, 8).rows(9),
        ];
        for req in bad {
            assert!(matches!(make_projection(req), Err(HarmoqError::Config(_))), "{req:?}");
        }
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in ProjectionKind::ALL {
            assert_eq!(k.as_str().parse::<ProjectionKind>().unwrap(), k);
        }
        assert!("wavelet".parse::<ProjectionKind>().is_err());
    }
}
