//! Audio-visual response maps and sigmoid-thresholded spatial pooling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, log_sigmoid, norm, sigmoid, Grid3, Mat2, Vec1};

/// Lower clamp for the cosine denominator `‖v‖·‖a‖`.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AvMapError {
    #[error("channel mismatch: image grid has {image} channels, audio vector has {audio}")]
    ChannelMismatch { image: usize, audio: usize },
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
}

/// Per-pixel cosine similarity between an image feature grid and one audio embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    values: Mat2,
}

impl ResponseMap {
    pub fn new(values: Mat2) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Mat2 {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn into_mat(self) -> Mat2 {
        self.values
    }
}

/// Threshold `epsilon`, temperature `beta` of the soft pooling weights, and
/// whether those weights are treated as constants in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default = "PoolConfig::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "PoolConfig::default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub detach_weights: bool,
}

impl PoolConfig {
    fn default_epsilon() -> f64 {
        0.65
    }

    fn default_beta() -> f64 {
        0.03
    }

    pub fn validate(&self) -> Result<(), AvMapError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(AvMapError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(-1.0..=1.0).contains(&self.epsilon) {
            return Err(AvMapError::InvalidConfig(format!(
                "epsilon must lie in [-1, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            epsilon: Self::default_epsilon(),
            beta: Self::default_beta(),
            detach_weights: false,
        }
    }
}

/// Cosine similarity with the denominator clamped at [`COSINE_EPS`].
#[inline]
pub fn cosine(v: &[f64], a: &[f64]) -> f64 {
    dot(v, a) / (norm(v) * norm(a)).max(COSINE_EPS)
}

pub fn cosine_response_map(v: &Grid3, a: &Vec1) -> Result<ResponseMap, AvMapError> {
    if v.channels() != a.len() {
        return Err(AvMapError::ChannelMismatch {
            image: v.channels(),
            audio: a.len(),
        });
    }
    let a = a.as_slice();
    let a_norm = norm(a);
    let mut col = vec![0.0; v.channels()];
    let mut out = Mat2::zeros(v.height(), v.width());
    for (p, o) in out.as_mut_slice().iter_mut().enumerate() {
        v.column_into(p, &mut col);
        let c = dot(&col, a) / (norm(&col) * a_norm).max(COSINE_EPS);
        *o = c.clamp(-1.0, 1.0);
    }
    Ok(ResponseMap::new(out))
}

/// Normalized pooling weights `w_k / Σ w` and the raw sigmoids `σ_k`.
///
/// Falls back to log space when every sigmoid is vanishingly small, so maps
/// lying entirely far below the threshold still get a well-defined
/// distribution.
fn normalized_weights(values: &[f64], cfg: &PoolConfig) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = values
        .iter()
        .map(|&a| (a - cfg.epsilon) / cfg.beta)
        .collect();
    let sig: Vec<f64> = z.iter().map(|&t| sigmoid(t)).collect();
    let top = sig.iter().copied().fold(0.0, f64::max);
    let mut weights = if top > 1e-200 {
        sig.clone()
    } else {
        let logw: Vec<f64> = z.iter().map(|&t| log_sigmoid(t)).collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logw.iter().map(|&l| (l - top).exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (weights, sig)
}

/// `Σ w_k α_k` with normalized weights, kept inside `[min α, max α]` where a
/// convex combination lies; rounding can otherwise step out by an ulp, e.g.
/// for a constant map.
fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = dot(weights, values);
    // NaN inputs leave an empty range; let the NaN propagate
    if lo <= hi {
        s.clamp(lo, hi)
    } else {
        s
    }
}

/// Soft-thresholded spatial average `⟨σ((α−ε)/β), α⟩ / ‖σ((α−ε)/β)‖₁`.
pub fn soft_threshold_pool(map: &ResponseMap, cfg: &PoolConfig) -> f64 {
    let values = map.values().as_slice();
    let (weights, _) = normalized_weights(values, cfg);
    weighted_mean(&weights, values)
}

/// Pooled score together with `∂S/∂α`.
pub fn soft_threshold_pool_with_grad(map: &ResponseMap, cfg: &PoolConfig) -> (f64, Mat2) {
    let (pooled, grad) = pool_values_with_grad(map.values().as_slice(), cfg);
    let grad = Mat2::from_vec(map.height(), map.width(), grad).expect("gradient matches map shape");
    (pooled, grad)
}

/// [`soft_threshold_pool_with_grad`] on a flat slice of responses.
pub(crate) fn pool_values_with_grad(values: &[f64], cfg: &PoolConfig) -> (f64, Vec<f64>) {
    let (mut weights, sig) = normalized_weights(values, cfg);
    let pooled = weighted_mean(&weights, values);
    if !cfg.detach_weights {
        for (k, w) in weights.iter_mut().enumerate() {
            // σ'(z)/β = σ(z)(1−σ(z))/β, and w_k/W already carries σ(z_k)/W.
            let dweight = *w * (1.0 - sig[k]) / cfg.beta;
            *w += dweight * (values[k] - pooled);
        }
    }
    (pooled, weights)
}

pub fn soft_threshold_pool_grad(map: &ResponseMap, cfg: &PoolConfig) -> Mat2 {
    soft_threshold_pool_with_grad(map, cfg).1
}
