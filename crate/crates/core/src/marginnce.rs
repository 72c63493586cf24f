//! Batch similarity matrices and the margin-shifted InfoNCE objective.
//!
//! Row `i` of the similarity matrix holds image `i` scored against every
//! audio in the batch. The positive logit is `(S_ii − m)/τ` and every
//! off-diagonal entry is a negative with logit `S_ij/τ`. A negative margin
//! raises the positive logit, loosening the decision boundary; `m = 0` is
//! plain InfoNCE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avmap::{cosine_response_map, soft_threshold_pool, AvMapError, PoolConfig};
use crate::numerics::{Grid3, Mat2, Vec1};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch size mismatch: {images} images vs {audios} audios")]
    BatchMismatch { images: usize, audios: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("similarity matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("similarity matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Map(#[from] AvMapError),
}

/// Square matrix of pooled audio-visual scores; entry `(i, j)` scores image `i` against audio `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: Mat2,
}

impl SimilarityMatrix {
    pub fn new(s: Mat2) -> Result<Self, LossError> {
        if s.rows() != s.cols() || s.rows() == 0 {
            return Err(LossError::NotSquare {
                rows: s.rows(),
                cols: s.cols(),
            });
        }
        if let Some(k) = s.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite {
                row: k / s.cols(),
                col: k % s.cols(),
            });
        }
        Ok(Self { s })
    }

    pub fn n(&self) -> usize {
        self.s.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s.get(i, j)
    }

    pub fn as_mat(&self) -> &Mat2 {
        &self.s
    }

    pub fn transpose(&self) -> Self {
        let n = self.n();
        Self {
            s: Mat2::from_fn(n, n, |i, j| self.s.get(j, i)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "LossConfig::default_tau")]
    pub tau: f64,
    #[serde(default = "LossConfig::default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub pool: PoolConfig,
    /// Average the image→audio and audio→image directions.
    #[serde(default)]
    pub symmetric: bool,
}

impl LossConfig {
    fn default_tau() -> f64 {
        0.07
    }

    fn default_margin() -> f64 {
        -0.2
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !self.margin.is_finite() {
            return Err(LossError::InvalidConfig("margin must be finite".into()));
        }
        self.pool.validate()?;
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: Self::default_tau(),
            margin: Self::default_margin(),
            pool: PoolConfig::default(),
            symmetric: false,
        }
    }
}

pub fn similarity_matrix(
    images: &[Grid3],
    audios: &[Vec1],
    pool: &PoolConfig,
) -> Result<SimilarityMatrix, LossError> {
    if images.len() != audios.len() {
        return Err(LossError::BatchMismatch {
            images: images.len(),
            audios: audios.len(),
        });
    }
    if images.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = images.len();
    let mut s = Mat2::zeros(n, n);
    for (i, image) in images.iter().enumerate() {
        for (j, audio) in audios.iter().enumerate() {
            let map = cosine_response_map(image, audio)?;
            s.set(i, j, soft_threshold_pool(&map, pool));
        }
    }
    SimilarityMatrix::new(s)
}

/// `ln Σ exp(x)` with max subtraction; the sum runs left to right.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let (arg, top) = xs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ka, a), (k, x)| {
            if x > a {
                (k, x)
            } else {
                (ka, a)
            }
        });
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != arg)
        .map(|(_, &x)| (x - top).exp())
        .sum();
    top + rest.ln_1p()
}

fn row_logits(sm: &SimilarityMatrix, i: usize, tau: f64, margin: f64, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = if i == j {
            (sm.get(i, i) - margin) / tau
        } else {
            sm.get(i, j) / tau
        };
    }
}

fn one_direction_loss(sm: &SimilarityMatrix, tau: f64, margin: f64) -> f64 {
    let n = sm.n();
    let mut logits = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        row_logits(sm, i, tau, margin, &mut logits);
        total += log_sum_exp(&logits) - logits[i];
    }
    total / n as f64
}

fn one_direction_grad(sm: &SimilarityMatrix, tau: f64, margin: f64) -> Mat2 {
    let n = sm.n();
    let scale = 1.0 / (n as f64 * tau);
    let mut logits = vec![0.0; n];
    let mut grad = Mat2::zeros(n, n);
    for i in 0..n {
        row_logits(sm, i, tau, margin, &mut logits);
        let lse = log_sum_exp(&logits);
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (logits[j] - lse).exp();
            *g = if i == j { (p - 1.0) * scale } else { p * scale };
        }
    }
    grad
}

/// Baseline InfoNCE, image→audio direction.
pub fn info_nce_loss(sm: &SimilarityMatrix, tau: f64) -> f64 {
    let n = sm.n();
    let mut logits = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for (j, o) in logits.iter_mut().enumerate() {
            *o = sm.get(i, j) / tau;
        }
        total += log_sum_exp(&logits) - logits[i];
    }
    total / n as f64
}

pub fn margin_nce_loss(sm: &SimilarityMatrix, cfg: &LossConfig) -> f64 {
    let forward = one_direction_loss(sm, cfg.tau, cfg.margin);
    if cfg.symmetric {
        0.5 * (forward + one_direction_loss(&sm.transpose(), cfg.tau, cfg.margin))
    } else {
        forward
    }
}

/// `∂L/∂S` for [`margin_nce_loss`].
pub fn margin_nce_grad(sm: &SimilarityMatrix, cfg: &LossConfig) -> Mat2 {
    let forward = one_direction_grad(sm, cfg.tau, cfg.margin);
    if !cfg.symmetric {
        return forward;
    }
    let backward = one_direction_grad(&sm.transpose(), cfg.tau, cfg.margin);
    let n = sm.n();
    Mat2::from_fn(n, n, |i, j| 0.5 * (forward.get(i, j) + backward.get(j, i)))
}
