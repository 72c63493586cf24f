//! Toy image/audio encoders: a linear projection, optionally preceded by a
//! tanh hidden layer, applied per feature column (image) or to the whole
//! vector (audio).

use serde::{Deserialize, Serialize};

use crate::avmap::COSINE_EPS;
use crate::numerics::{norm, Mat2, RngStream};

use super::TrainError;

const STREAM_INIT: u64 = 7 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output embedding width shared by both branches.
    #[serde(default = "EncoderConfig::default_embed_dim")]
    pub embed_dim: usize,
    /// Width of the optional tanh hidden layer.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default = "EncoderConfig::default_normalize")]
    pub normalize_output: bool,
}

impl EncoderConfig {
    fn default_embed_dim() -> usize {
        16
    }

    fn default_normalize() -> bool {
        true
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: Self::default_embed_dim(),
            hidden_dim: None,
            normalize_output: Self::default_normalize(),
        }
    }
}

/// One modality's projection: one or two weight matrices, tanh in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    layers: Vec<Mat2>,
}

/// Intermediate values of one forward pass through a [`Branch`].
#[derive(Debug, Clone)]
pub(crate) struct BranchTrace {
    pub input: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
    pub raw_norm: f64,
    pub output: Vec<f64>,
}

impl Branch {
    pub fn new(layers: Vec<Mat2>) -> Result<Self, TrainError> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(TrainError::InvalidConfig(format!(
                "a branch has one or two layers, got {}",
                layers.len()
            )));
        }
        if layers.len() == 2 && layers[1].cols() != layers[0].rows() {
            return Err(TrainError::InvalidConfig(format!(
                "layer shapes do not chain: {:?} then {:?}",
                layers[0].shape(),
                layers[1].shape()
            )));
        }
        Ok(Self { layers })
    }

    fn random(in_dim: usize, cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let init = |rows: usize, cols: usize, rng: &mut RngStream| {
            let bound = 1.0 / (cols as f64).sqrt();
            Mat2::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
        };
        let layers = match cfg.hidden_dim {
            Some(hd) => vec![init(hd, in_dim, rng), init(cfg.embed_dim, hd, rng)],
            None => vec![init(cfg.embed_dim, in_dim, rng)],
        };
        Self { layers }
    }

    pub fn layers(&self) -> &[Mat2] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub(crate) fn trace(&self, x: &[f64], normalize: bool) -> BranchTrace {
        let (hidden, raw) = match self.layers.as_slice() {
            [w] => {
                let mut z = vec![0.0; w.rows()];
                w.matvec(x, &mut z);
                (None, z)
            }
            [w1, w2] => {
                let mut h = vec![0.0; w1.rows()];
                w1.matvec(x, &mut h);
                for v in &mut h {
                    *v = v.tanh();
                }
                let mut z = vec![0.0; w2.rows()];
                w2.matvec(&h, &mut z);
                (Some(h), z)
            }
            _ => unreachable!("branch layer count is validated"),
        };
        let raw_norm = norm(&raw);
        let output = if normalize {
            let d = raw_norm.max(COSINE_EPS);
            raw.iter().map(|v| v / d).collect()
        } else {
            raw
        };
        BranchTrace {
            input: x.to_vec(),
            hidden,
            raw_norm,
            output,
        }
    }

    /// Accumulates weight gradients for `∂L/∂output` into `grads`.
    pub(crate) fn backward(&self, t: &BranchTrace, d_out: &[f64], normalize: bool, grads: &mut [Mat2]) {
        let d_raw: Vec<f64> = if normalize {
            let d = t.raw_norm.max(COSINE_EPS);
            if t.raw_norm > COSINE_EPS {
                let proj: f64 = t.output.iter().zip(d_out).map(|(u, g)| u * g).sum();
                t.output
                    .iter()
                    .zip(d_out)
                    .map(|(u, g)| (g - u * proj) / d)
                    .collect()
            } else {
                d_out.iter().map(|g| g / d).collect()
            }
        } else {
            d_out.to_vec()
        };
        match (self.layers.as_slice(), &t.hidden) {
            ([_], None) => grads[0].outer_acc(&d_raw, &t.input),
            ([_, w2], Some(h)) => {
                grads[1].outer_acc(&d_raw, h);
                let mut dh = vec![0.0; h.len()];
                w2.matvec_transpose_acc(&d_raw, &mut dh);
                for (g, hv) in dh.iter_mut().zip(h) {
                    *g *= 1.0 - hv * hv;
                }
                grads[0].outer_acc(&dh, &t.input);
            }
            _ => unreachable!("trace matches branch structure"),
        }
    }

    pub fn encode(&self, x: &[f64], normalize: bool) -> Vec<f64> {
        self.trace(x, normalize).output
    }

    fn zeros_like(&self) -> Vec<Mat2> {
        self.layers
            .iter()
            .map(|w| Mat2::zeros(w.rows(), w.cols()))
            .collect()
    }
}

/// Image and audio branches with a shared output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    image: Branch,
    audio: Branch,
    normalize_output: bool,
}

/// Named parameter tensor, e.g. `image.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<'a> {
    pub name: String,
    pub value: &'a Mat2,
}

/// Gradients laid out like the encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub image: Vec<Mat2>,
    pub audio: Vec<Mat2>,
}

impl EncoderGrads {
    pub fn names(&self) -> Vec<String> {
        let img = (0..self.image.len()).map(|k| format!("image.{k}"));
        let aud = (0..self.audio.len()).map(|k| format!("audio.{k}"));
        img.chain(aud).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.image
            .iter()
            .chain(&self.audio)
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

impl ToyEncoder {
    pub fn new(image: Branch, audio: Branch, normalize_output: bool) -> Result<Self, TrainError> {
        if image.out_dim() != audio.out_dim() {
            return Err(TrainError::InvalidConfig(format!(
                "branch output widths differ: image {} vs audio {}",
                image.out_dim(),
                audio.out_dim()
            )));
        }
        Ok(Self {
            image,
            audio,
            normalize_output,
        })
    }

    /// Uniform `±1/√fan_in` initialisation, deterministic in `seed`.
    pub fn random(in_dim: usize, cfg: &EncoderConfig, seed: u64) -> Result<Self, TrainError> {
        if in_dim == 0 || cfg.embed_dim == 0 || cfg.hidden_dim == Some(0) {
            return Err(TrainError::InvalidConfig(
                "encoder dimensions must be positive".into(),
            ));
        }
        let mut rng = RngStream::new(seed, STREAM_INIT);
        let image = Branch::random(in_dim, cfg, &mut rng);
        let audio = Branch::random(in_dim, cfg, &mut rng);
        Self::new(image, audio, cfg.normalize_output)
    }

    pub fn identity(dim: usize, normalize_output: bool) -> Self {
        let eye = Mat2::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 });
        Self {
            image: Branch { layers: vec![eye.clone()] },
            audio: Branch { layers: vec![eye] },
            normalize_output,
        }
    }

    pub fn image_branch(&self) -> &Branch {
        &self.image
    }

    pub fn audio_branch(&self) -> &Branch {
        &self.audio
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn in_dim(&self) -> usize {
        self.image.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.image.out_dim()
    }

    pub fn params(&self) -> Vec<NamedParam<'_>> {
        let img = self.image.layers.iter().enumerate().map(|(k, m)| NamedParam {
            name: format!("image.{k}"),
            value: m,
        });
        let aud = self.audio.layers.iter().enumerate().map(|(k, m)| NamedParam {
            name: format!("audio.{k}"),
            value: m,
        });
        img.chain(aud).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.image
            .layers
            .iter()
            .chain(&self.audio.layers)
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter vector length");
        let mut offset = 0;
        for m in self.image.layers.iter_mut().chain(self.audio.layers.iter_mut()) {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            image: self.image.zeros_like(),
            audio: self.audio.zeros_like(),
        }
    }

    pub fn encode_audio(&self, a: &[f64]) -> Vec<f64> {
        self.audio.encode(a, self.normalize_output)
    }

    pub fn encode_image_column(&self, v: &[f64]) -> Vec<f64> {
        self.image.encode(v, self.normalize_output)
    }
}
