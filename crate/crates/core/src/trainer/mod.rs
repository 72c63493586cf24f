//! End-to-end training of the toy encoders under the margin objective, plus
//! retrieval and localization evaluation.
//!
//! The backward pass is written out by hand: `∂L/∂S` from the loss, `∂S/∂α`
//! from the pooling, then the cosine and normalization Jacobians and finally
//! the linear layers. `forward_batch` and `backward_batch` are checked
//! against central differences in the tests.

mod encoder;
mod experiment;
mod optim;

pub use encoder::{Branch, EncoderConfig, EncoderGrads, NamedParam, ToyEncoder};
pub use experiment::{
    margin_sweep, open_set_eval, open_set_run, sweep_run, ExperimentConfig, ExperimentReport,
    MarginAggregate, MetricSummary, RunRecord, RunStatus,
};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avmap::{cosine_response_map, pool_values_with_grad, PoolConfig, ResponseMap, COSINE_EPS};
use crate::marginnce::{margin_nce_grad, margin_nce_loss, similarity_matrix, LossConfig, LossError, SimilarityMatrix};
use crate::metrics::{
    consensus_from_boxes, ciou_with_rule, LocalizationReport, MetricsError, PredictionMap, ThresholdRule,
};
use crate::numerics::{dot, norm, Grid3, Mat2, RngStream, Vec1};
use crate::synthdata::{SynthError, SyntheticScene};

use encoder::BranchTrace;

const STREAM_SHUFFLE: u64 = 8 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty test set")]
    EmptyTestSet,
    /// `epoch` and `batch` are 1-based.
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "TrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_epochs")]
    pub epochs: usize,
    /// Defaults per optimizer when absent (Adam 1e-3, SGD 1e-2).
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "TrainConfig::default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn default_batch_size() -> usize {
        64
    }
    fn default_epochs() -> usize {
        20
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.optimizer.default_learning_rate())
    }

    /// Same config with the learning rate made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            learning_rate: Some(self.learning_rate()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be >= 0, got {lr}"
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden_dim == Some(0) {
            return Err(TrainError::InvalidConfig(
                "encoder dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            batch_size: Self::default_batch_size(),
            epochs: Self::default_epochs(),
            learning_rate: None,
            weight_decay: Self::default_weight_decay(),
            optimizer: Self::default_optimizer(),
            seed: 0,
        }
    }
}

/// Everything `backward_batch` needs from a forward pass.
#[derive(Debug)]
pub struct ForwardCache<'a> {
    enc: &'a ToyEncoder,
    loss_cfg: LossConfig,
    /// `[image][pixel]`
    image_traces: Vec<Vec<BranchTrace>>,
    audio_traces: Vec<BranchTrace>,
    /// Response maps and pooling gradients, indexed `i·n + j`.
    alphas: Vec<Vec<f64>>,
    pool_grads: Vec<Vec<f64>>,
    similarity: SimilarityMatrix,
    loss: f64,
}

impl ForwardCache<'_> {
    pub fn similarity(&self) -> &SimilarityMatrix {
        &self.similarity
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }
}

#[inline]
fn raw_cosine(v: &[f64], nv: f64, a: &[f64], na: f64) -> f64 {
    dot(v, a) / (nv * na).max(COSINE_EPS)
}

pub fn forward_batch<'a>(
    enc: &'a ToyEncoder,
    images: &[&Grid3],
    audios: &[&Vec1],
    loss_cfg: &LossConfig,
) -> Result<(f64, ForwardCache<'a>), TrainError> {
    if images.len() != audios.len() {
        return Err(TrainError::Dimension(format!(
            "{} images vs {} audios",
            images.len(),
            audios.len()
        )));
    }
    if images.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let c = enc.in_dim();
    for img in images {
        if img.channels() != c {
            return Err(TrainError::Dimension(format!(
                "image has {} channels, encoder expects {c}",
                img.channels()
            )));
        }
    }
    for a in audios {
        if a.len() != c {
            return Err(TrainError::Dimension(format!(
                "audio has length {}, encoder expects {c}",
                a.len()
            )));
        }
    }
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|g| g.height() != h || g.width() != w) {
        return Err(TrainError::Dimension("images differ in spatial size".into()));
    }
    let normalize = enc.normalize_output();
    let image_traces: Vec<Vec<BranchTrace>> = images
        .iter()
        .map(|img| {
            let mut col = vec![0.0; c];
            (0..img.pixels())
                .map(|p| {
                    img.column_into(p, &mut col);
                    enc.image_branch().trace(&col, normalize)
                })
                .collect()
        })
        .collect();
    let audio_traces: Vec<BranchTrace> = audios
        .iter()
        .map(|a| enc.audio_branch().trace(a.as_slice(), normalize))
        .collect();
    let image_norms: Vec<Vec<f64>> = image_traces
        .iter()
        .map(|t| t.iter().map(|p| dot(&p.output, &p.output).sqrt()).collect())
        .collect();
    let audio_norms: Vec<f64> = audio_traces
        .iter()
        .map(|t| dot(&t.output, &t.output).sqrt())
        .collect();

    let n = images.len();
    let mut alphas = Vec::with_capacity(n * n);
    let mut pool_grads = Vec::with_capacity(n * n);
    let mut s = Mat2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = &audio_traces[j].output;
            let na = audio_norms[j];
            let alpha: Vec<f64> = image_traces[i]
                .iter()
                .zip(&image_norms[i])
                .map(|(t, &nv)| raw_cosine(&t.output, nv, a, na))
                .collect();
            let (pooled, grad) = pool_values_with_grad(&alpha, &loss_cfg.pool);
            s.set(i, j, pooled);
            alphas.push(alpha);
            pool_grads.push(grad);
        }
    }
    let similarity = SimilarityMatrix::new(s)?;
    let loss = margin_nce_loss(&similarity, loss_cfg);
    let cache = ForwardCache {
        enc,
        loss_cfg: *loss_cfg,
        image_traces,
        audio_traces,
        alphas,
        pool_grads,
        similarity,
        loss,
    };
    Ok((loss, cache))
}

pub fn forward_scenes<'a>(
    enc: &'a ToyEncoder,
    scenes: &[&SyntheticScene],
    loss_cfg: &LossConfig,
) -> Result<(f64, ForwardCache<'a>), TrainError> {
    let images: Vec<&Grid3> = scenes.iter().map(|s| &s.image).collect();
    let audios: Vec<&Vec1> = scenes.iter().map(|s| &s.audio).collect();
    forward_batch(enc, &images, &audios, loss_cfg)
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yk, xk) in y.iter_mut().zip(x) {
        *yk += alpha * xk;
    }
}

/// Backprop through `margin_nce → pooling → cosine maps → encoders`.
///
/// For `α = ⟨v, a⟩ / (‖v‖‖a‖)`, `∂α/∂v = a/(‖v‖‖a‖) − α v/‖v‖²` (and
/// symmetrically for `a`); with the denominator clamped it is `a/eps`. The
/// self-terms `∝ v` and `∝ a` are summed as scalars and applied once per vector.
pub fn backward_batch(cache: &ForwardCache<'_>) -> EncoderGrads {
    let enc = cache.enc;
    let n = cache.similarity.n();
    let mut grads = enc.zero_grads();
    let dlds = margin_nce_grad(&cache.similarity, &cache.loss_cfg);
    let d = enc.embed_dim();
    let pixels = cache.image_traces[0].len();
    let img_norms: Vec<f64> = cache
        .image_traces
        .iter()
        .flat_map(|t| t.iter().map(|p| norm(&p.output)))
        .collect();
    let aud_norms: Vec<f64> = cache.audio_traces.iter().map(|t| norm(&t.output)).collect();
    let mut d_img = vec![0.0; n * pixels * d];
    let mut self_img = vec![0.0; n * pixels];
    let mut d_aud = vec![0.0; n * d];
    let mut self_aud = vec![0.0; n];

    for i in 0..n {
        for j in 0..n {
            let g = dlds.get(i, j);
            if g == 0.0 {
                continue;
            }
            let a = &cache.audio_traces[j].output;
            let na = aud_norms[j];
            let alpha = &cache.alphas[i * n + j];
            let pool = &cache.pool_grads[i * n + j];
            let da = &mut d_aud[j * d..(j + 1) * d];
            for p in 0..pixels {
                let d_alpha = g * pool[p];
                if d_alpha == 0.0 {
                    continue;
                }
                let ip = i * pixels + p;
                let v = &cache.image_traces[i][p].output;
                let nv = img_norms[ip];
                let den = nv * na;
                let dv = &mut d_img[ip * d..(ip + 1) * d];
                if den > COSINE_EPS {
                    let k = d_alpha / den;
                    axpy(k, a, dv);
                    axpy(k, v, da);
                    self_img[ip] += d_alpha * alpha[p] / (nv * nv);
                    self_aud[j] += d_alpha * alpha[p] / (na * na);
                } else {
                    let k = d_alpha / COSINE_EPS;
                    axpy(k, a, dv);
                    axpy(k, v, da);
                }
            }
        }
    }
    for (ip, dv) in d_img.chunks_mut(d).enumerate() {
        axpy(-self_img[ip], &cache.image_traces[ip / pixels][ip % pixels].output, dv);
    }
    for (j, da) in d_aud.chunks_mut(d).enumerate() {
        axpy(-self_aud[j], &cache.audio_traces[j].output, da);
    }

    let normalize = enc.normalize_output();
    for (t, dv) in cache.image_traces.iter().flatten().zip(d_img.chunks(d)) {
        if dv.iter().any(|&x| x != 0.0) {
            enc.image_branch().backward(t, dv, normalize, &mut grads.image);
        }
    }
    for (t, da) in cache.audio_traces.iter().zip(d_aud.chunks(d)) {
        if da.iter().any(|&x| x != 0.0) {
            enc.audio_branch().backward(t, da, normalize, &mut grads.audio);
        }
    }
    grads
}

/// Encoder, optimizer state and progress; enough to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoder: ToyEncoder,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    /// Mean batch loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(encoder: ToyEncoder, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(
            cfg.optimizer,
            cfg.learning_rate(),
            cfg.weight_decay,
            encoder.num_params(),
        );
        Self {
            encoder,
            optimizer,
            epochs_done: 0,
            loss_history: Vec::new(),
        }
    }
}

/// Batches of one epoch: a seeded permutation cut into `batch_size` chunks;
/// a trailing single-scene chunk is dropped since it carries no contrast.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    RngStream::new(seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Runs epochs until `cfg.epochs` have completed in total.
pub fn resume(mut state: TrainState, data: &[SyntheticScene], cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let scenes: Vec<&SyntheticScene> = idx.iter().map(|&k| &data[k]).collect();
            let diverged = |value| TrainError::NonFiniteLoss {
                epoch: epoch + 1,
                batch: b + 1,
                value,
            };
            let (loss, grads) = match forward_scenes(&state.encoder, &scenes, &cfg.loss) {
                Ok((loss, cache)) => (loss, backward_batch(&cache)),
                // Non-finite weights surface as a non-finite similarity matrix.
                Err(TrainError::Loss(LossError::NonFinite { .. })) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let flat_grads = grads.flatten();
            if !loss.is_finite() || flat_grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(loss));
            }
            let mut params = state.encoder.flat_params();
            state.optimizer.update(&mut params, &flat_grads);
            state.encoder.set_flat_params(&params);
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        state.loss_history.push(mean);
        state.epochs_done += 1;
    }
    Ok(state)
}

pub fn train(enc: ToyEncoder, data: &[SyntheticScene], cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    resume(TrainState::new(enc, cfg), data, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub threshold_rule: ThresholdRule,
    #[serde(default = "EvalOptions::default_auc_step")]
    pub auc_step: f64,
    /// Scenes per retrieval group; chance accuracy is `1/eval_batch_size`.
    #[serde(default = "EvalOptions::default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Resolution for cIoU; the native grid when absent.
    #[serde(default)]
    pub eval_shape: Option<[usize; 2]>,
}

impl EvalOptions {
    fn default_auc_step() -> f64 {
        0.05
    }
    fn default_eval_batch_size() -> usize {
        16
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.eval_batch_size < 2 {
            return Err(TrainError::InvalidConfig("eval_batch_size must be at least 2".into()));
        }
        if let ThresholdRule::Absolute(v) = self.threshold_rule {
            if !v.is_finite() {
                return Err(TrainError::InvalidConfig("absolute threshold must be finite".into()));
            }
        }
        if let Some([a, b]) = self.eval_shape {
            if a == 0 || b == 0 {
                return Err(TrainError::InvalidConfig("eval_shape must be positive".into()));
            }
        }
        // step validity is checked by eval_curve itself
        crate::metrics::eval_curve(&[0.0], self.auc_step)?;
        Ok(())
    }
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_rule: ThresholdRule::Median,
            auc_step: Self::default_auc_step(),
            eval_batch_size: Self::default_eval_batch_size(),
            eval_shape: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub retrieval_accuracy: f64,
    /// Expected accuracy of a score-agnostic ranking: mean of `1/group size`.
    pub chance_accuracy: f64,
    pub sample_ids: Vec<String>,
    pub localization: LocalizationReport,
}

pub fn encode_image(enc: &ToyEncoder, img: &Grid3) -> Result<Grid3, TrainError> {
    let cols: Vec<Vec<f64>> = img
        .columns()
        .iter()
        .map(|c| enc.encode_image_column(c))
        .collect();
    Grid3::from_columns(img.height(), img.width(), &cols)
        .map_err(|e| TrainError::Dimension(format!("encoded image: {e}")))
}

pub fn encode_audio(enc: &ToyEncoder, a: &Vec1) -> Result<Vec1, TrainError> {
    Vec1::new(enc.encode_audio(a.as_slice()))
        .map_err(|e| TrainError::Dimension(format!("encoded audio: {e}")))
}

/// Localization prediction `α_ii` for one scene.
pub fn response_for_scene(enc: &ToyEncoder, scene: &SyntheticScene) -> Result<ResponseMap, TrainError> {
    let img = encode_image(enc, &scene.image)?;
    let aud = encode_audio(enc, &scene.audio)?;
    cosine_response_map(&img, &aud).map_err(|e| TrainError::Dimension(e.to_string()))
}

/// Retrieval accuracy within consecutive groups of `eval_batch_size` scenes
/// (ties count as hits) and cIoU of each scene's own response map.
pub fn evaluate(
    enc: &ToyEncoder,
    test: &[SyntheticScene],
    pool: &PoolConfig,
    opts: &EvalOptions,
) -> Result<Evaluation, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    opts.validate()?;
    let images = test
        .iter()
        .map(|s| encode_image(enc, &s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let audios = test
        .iter()
        .map(|s| encode_audio(enc, &s.audio))
        .collect::<Result<Vec<_>, _>>()?;

    let mut hits = 0usize;
    let mut rows = 0usize;
    let mut chance = 0.0;
    for (gi, gimg) in images.chunks(opts.eval_batch_size).enumerate() {
        if gimg.len() < 2 {
            continue;
        }
        let start = gi * opts.eval_batch_size;
        let gaud = &audios[start..start + gimg.len()];
        let sm = similarity_matrix(gimg, gaud, pool)?;
        for i in 0..sm.n() {
            let best = (0..sm.n()).map(|j| sm.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            if sm.get(i, i) >= best {
                hits += 1;
            }
            chance += 1.0 / sm.n() as f64;
            rows += 1;
        }
    }

    let mut cious = Vec::with_capacity(test.len());
    for ((scene, img), aud) in test.iter().zip(&images).zip(&audios) {
        let map = cosine_response_map(img, aud).map_err(|e| TrainError::Dimension(e.to_string()))?;
        let shape = match opts.eval_shape {
            Some([a, b]) => (a, b),
            None => (map.height(), map.width()),
        };
        let pred = PredictionMap::new(map.into_mat(), shape)?;
        let gt = consensus_from_boxes(&[scene.gt_region], shape)?;
        cious.push(ciou_with_rule(&pred, &gt, opts.threshold_rule)?.0);
    }
    let (retrieval_accuracy, chance_accuracy) = if rows > 0 {
        (hits as f64 / rows as f64, chance / rows as f64)
    } else {
        (1.0, 1.0)
    };
    Ok(Evaluation {
        retrieval_accuracy,
        chance_accuracy,
        sample_ids: test.iter().map(|s| s.id.clone()).collect(),
        localization: LocalizationReport::from_cious(cious, opts.auc_step, opts.threshold_rule)?,
    })
}

#[cfg(test)]
mod tests;
