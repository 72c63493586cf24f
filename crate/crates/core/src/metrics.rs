//! Localization metrics: consensus IoU against annotator boxes, the success
//! curve over cIoU thresholds and its trapezoidal AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no boxes given")]
    NoBoxes,
    #[error("degenerate box {0:?}: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
    DegenerateBox([f64; 4]),
    #[error("boxes cover no pixel centre on a {0}x{1} grid")]
    EmptyConsensus(usize, usize),
    #[error("shape mismatch: prediction evaluates at {pred:?}, ground truth is {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("empty sample list")]
    NoSamples,
    #[error("cIoU value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("threshold step {0} must be in (0, 1] and divide 1 evenly")]
    BadStep(f64),
    #[error("threshold must be finite")]
    BadThreshold,
    #[error("target shape must be non-empty, got {0}x{1}")]
    BadShape(usize, usize),
}

/// Axis-aligned rectangle in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, MetricsError> {
        let r = Self { x0, y0, x1, y1 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let ok = |lo: f64, hi: f64| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi;
        if ok(self.x0, self.x1) && ok(self.y0, self.y1) {
            Ok(())
        } else {
            Err(MetricsError::DegenerateBox([self.x0, self.y0, self.x1, self.y1]))
        }
    }

    /// Half-open containment `[x0, x1) × [y0, y1)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Per-pixel annotator agreement in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMap {
    weights: Mat2,
}

impl ConsensusMap {
    pub fn weights(&self) -> &Mat2 {
        &self.weights
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }
}

/// A pixel is covered by a box when its centre lies inside it.
pub fn consensus_from_boxes(boxes: &[Rect], shape: (usize, usize)) -> Result<ConsensusMap, MetricsError> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(MetricsError::BadShape(h, w));
    }
    if boxes.is_empty() {
        return Err(MetricsError::NoBoxes);
    }
    for b in boxes {
        b.validate()?;
    }
    let total = boxes.len() as f64;
    let weights = Mat2::from_fn(h, w, |y, x| {
        let cy = (y as f64 + 0.5) / h as f64;
        let cx = (x as f64 + 0.5) / w as f64;
        boxes.iter().filter(|b| b.contains(cx, cy)).count() as f64 / total
    });
    if weights.max() <= 0.0 {
        return Err(MetricsError::EmptyConsensus(h, w));
    }
    Ok(ConsensusMap { weights })
}

/// How a continuous prediction map is binarized before cIoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    /// Median of the upsampled map.
    #[default]
    Median,
    Absolute(f64),
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Median => write!(f, "median"),
            Self::Absolute(v) => write!(f, "absolute:{v}"),
        }
    }
}

/// Raw localization scores plus the resolution at which they are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    scores: Mat2,
    target_shape: (usize, usize),
}

impl PredictionMap {
    pub fn new(scores: Mat2, target_shape: (usize, usize)) -> Result<Self, MetricsError> {
        if target_shape.0 == 0 || target_shape.1 == 0 {
            return Err(MetricsError::BadShape(target_shape.0, target_shape.1));
        }
        Ok(Self { scores, target_shape })
    }

    /// Evaluate at the native resolution.
    pub fn native(scores: Mat2) -> Self {
        let target_shape = scores.shape();
        Self { scores, target_shape }
    }

    pub fn scores(&self) -> &Mat2 {
        &self.scores
    }

    pub fn target_shape(&self) -> (usize, usize) {
        self.target_shape
    }

    pub fn upsampled(&self) -> Mat2 {
        bilinear_resize(&self.scores, self.target_shape)
    }

    pub fn threshold(&self, rule: ThresholdRule) -> f64 {
        match rule {
            ThresholdRule::Median => median(self.upsampled().as_slice()),
            ThresholdRule::Absolute(v) => v,
        }
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide
/// with input corners.
pub fn bilinear_resize(src: &Mat2, shape: (usize, usize)) -> Mat2 {
    let (h, w) = src.shape();
    let (th, tw) = shape;
    if (h, w) == (th, tw) {
        return src.clone();
    }
    let coord = |t: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = t as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    Mat2::from_fn(th, tw, |y, x| {
        let (y0, y1, fy) = coord(y, th, h);
        let (x0, x1, fx) = coord(x, tw, w);
        let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
        let bottom = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Median; the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// cIoU of an already-upsampled map against the consensus weights.
pub fn ciou_upsampled(scores: &Mat2, gt: &ConsensusMap, threshold: f64) -> Result<f64, MetricsError> {
    if !threshold.is_finite() {
        return Err(MetricsError::BadThreshold);
    }
    if scores.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: scores.shape(),
            gt: gt.shape(),
        });
    }
    let mut hit = 0.0;
    let mut mass = 0.0;
    let mut false_pos = 0usize;
    for (&s, &g) in scores.as_slice().iter().zip(gt.weights.as_slice()) {
        mass += g;
        if s >= threshold {
            if g > 0.0 {
                hit += g;
            } else {
                false_pos += 1;
            }
        }
    }
    Ok(hit / (mass + false_pos as f64))
}

pub fn ciou(pred: &PredictionMap, gt: &ConsensusMap, pred_threshold: f64) -> Result<f64, MetricsError> {
    ciou_upsampled(&pred.upsampled(), gt, pred_threshold)
}

/// cIoU with the threshold chosen by `rule`; returns `(ciou, threshold)`.
pub fn ciou_with_rule(
    pred: &PredictionMap,
    gt: &ConsensusMap,
    rule: ThresholdRule,
) -> Result<(f64, f64), MetricsError> {
    let up = pred.upsampled();
    let t = match rule {
        ThresholdRule::Median => median(up.as_slice()),
        ThresholdRule::Absolute(v) => v,
    };
    Ok((ciou_upsampled(&up, gt, t)?, t))
}

/// Success rate over cIoU thresholds and its area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub thresholds: Vec<f64>,
    pub success_rates: Vec<f64>,
    pub auc: f64,
}

fn check_cious(cious: &[f64]) -> Result<(), MetricsError> {
    if cious.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    match cious.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        Some(&c) => Err(MetricsError::OutOfRange(c)),
        None => Ok(()),
    }
}

pub fn eval_curve(cious: &[f64], step: f64) -> Result<EvalCurve, MetricsError> {
    check_cious(cious)?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(MetricsError::BadStep(step));
    }
    let intervals = (1.0 / step).round() as usize;
    if intervals == 0 || ((intervals as f64) * step - 1.0).abs() > 1e-9 {
        return Err(MetricsError::BadStep(step));
    }
    let thresholds: Vec<f64> = (0..=intervals).map(|k| k as f64 / intervals as f64).collect();
    let n = cious.len() as f64;
    let success_rates: Vec<f64> = thresholds
        .iter()
        .map(|&t| cious.iter().filter(|&&c| c >= t).count() as f64 / n)
        .collect();
    let auc = thresholds
        .windows(2)
        .zip(success_rates.windows(2))
        .map(|(t, s)| (t[1] - t[0]) * 0.5 * (s[0] + s[1]))
        .sum();
    Ok(EvalCurve {
        thresholds,
        success_rates,
        auc,
    })
}

/// Percentage of samples with cIoU ≥ 0.5.
pub fn ciou_at_half(cious: &[f64]) -> Result<f64, MetricsError> {
    check_cious(cious)?;
    Ok(100.0 * cious.iter().filter(|&&c| c >= 0.5).count() as f64 / cious.len() as f64)
}

/// Per-sample cIoU values with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub cious: Vec<f64>,
    pub ciou_at_half: f64,
    /// AUC expressed as a percentage.
    pub auc_percent: f64,
    pub curve: EvalCurve,
    pub threshold_rule: ThresholdRule,
}

impl LocalizationReport {
    pub fn from_cious(cious: Vec<f64>, step: f64, rule: ThresholdRule) -> Result<Self, MetricsError> {
        let curve = eval_curve(&cious, step)?;
        Ok(Self {
            ciou_at_half: ciou_at_half(&cious)?,
            auc_percent: 100.0 * curve.auc,
            curve,
            cious,
            threshold_rule: rule,
        })
    }

    pub fn mean_ciou(&self) -> f64 {
        self.cious.iter().sum::<f64>() / self.cious.len() as f64
    }
}
