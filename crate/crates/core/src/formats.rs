//! On-disk formats.
//!
//! * Datasets and checkpoints: 8-byte magic, little-endian `u32` version,
//!   then a postcard-encoded body.
//! * Annotations, predictions and configs: JSON.
//! * Reports: CSV led by `# config_sha256=<hex>` comment lines.
//!
//! Every write goes to a sibling temp file that is then renamed into place,
//! so readers never observe a half-written file.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::avmap::ResponseMap;
use crate::metrics::{LocalizationReport, Rect};
use crate::numerics::Mat2;
use crate::synthdata::{Split, SynthConfig, SyntheticScene};
use crate::trainer::{ExperimentReport, RunStatus, TrainConfig, TrainState};

pub const DATASET_MAGIC: &[u8; 8] = b"MNCEDSET";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNCECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },
    #[error("{}: format version {found}, this build reads {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    /// Well-formed file whose contents are inconsistent.
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// SHA-256 of the compact JSON encoding, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory values serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn encode_framed<T: Serialize>(magic: &[u8; 8], body: &T) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    postcard::to_extend(body, out).expect("in-memory values serialize")
}

fn decode_framed<T: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<T, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |msg: String| FormatError::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(corrupt(format!(
            "not a {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if found != FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    let (value, rest) = postcard::take_from_bytes(&bytes[12..]).map_err(|e| corrupt(e.to_string()))?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(value)
}

/// A generated dataset: the config it came from and its three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SynthConfig,
    pub split: Split,
}

impl Dataset {
    /// Checks that every scene matches the config and the class partition.
    pub fn validate(&self) -> Result<(), FormatError> {
        self.config
            .validate()
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        let cfg = &self.config;
        let heard: BTreeSet<usize> = self.split.heard_classes.iter().copied().collect();
        let unheard: BTreeSet<usize> = self.split.unheard_classes.iter().copied().collect();
        if heard.intersection(&unheard).next().is_some() {
            return Err(FormatError::Invalid("heard and unheard classes overlap".into()));
        }
        let mut ids = BTreeSet::new();
        let parts = [
            ("train", &self.split.train, &heard),
            ("heard_test", &self.split.heard_test, &heard),
            ("unheard_test", &self.split.unheard_test, &unheard),
        ];
        for (name, scenes, classes) in parts {
            for s in scenes.iter() {
                let bad = |why: &str| FormatError::Invalid(format!("{name} scene {}: {why}", s.id));
                if !ids.insert(s.id.as_str()) {
                    return Err(bad("duplicate id"));
                }
                if !classes.contains(&s.class_id) {
                    return Err(bad("class outside its split"));
                }
                if s.audio_class >= cfg.num_classes || s.is_faulty_positive != (s.audio_class != s.class_id) {
                    return Err(bad("inconsistent audio class"));
                }
                let g = &s.image;
                if (g.channels(), g.height(), g.width()) != (cfg.latent_dim, cfg.grid_h, cfg.grid_w)
                    || g.as_slice().len() != cfg.latent_dim * cfg.grid_h * cfg.grid_w
                    || s.audio.len() != cfg.latent_dim
                {
                    return Err(bad("dimensions differ from the config"));
                }
                s.gt_region.validate().map_err(|e| bad(&e.to_string()))?;
            }
        }
        Ok(())
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), FormatError> {
    write_atomic(path, &encode_framed(DATASET_MAGIC, data))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let data: Dataset = decode_framed(path, DATASET_MAGIC)?;
    data.validate()?;
    Ok(data)
}

/// Trained state plus everything needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FormatError> {
    write_atomic(path, &encode_framed(CHECKPOINT_MAGIC, ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    decode_framed(path, CHECKPOINT_MAGIC)
}

/// Ground truth for one sample: normalized `[x0, y0, x1, y1]` boxes and the
/// resolution to evaluate at (the prediction's own grid when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
}

impl AnnotationRecord {
    pub fn rects(&self) -> Result<Vec<Rect>, FormatError> {
        self.boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| Rect::new(x0, y0, x1, y1))
            .collect::<Result<_, _>>()
            .map_err(|e| FormatError::Invalid(format!("annotation {}: {e}", self.id)))
    }
}

pub fn annotations_for(scenes: &[SyntheticScene], shape: Option<[usize; 2]>) -> Vec<AnnotationRecord> {
    scenes
        .iter()
        .map(|s| AnnotationRecord {
            id: s.id.clone(),
            boxes: vec![s.gt_region.as_array()],
            shape,
        })
        .collect()
}

/// A predicted localization map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_map(id: impl Into<String>, map: &ResponseMap) -> Self {
        Self {
            id: id.into(),
            h: map.height(),
            w: map.width(),
            values: map.values().as_slice().to_vec(),
        }
    }

    pub fn to_mat(&self) -> Result<Mat2, FormatError> {
        if self.h == 0 || self.w == 0 {
            return Err(FormatError::Invalid(format!("prediction {}: empty grid", self.id)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid(format!("prediction {}: non-finite value", self.id)));
        }
        Mat2::from_vec(self.h, self.w, self.values.clone()).map_err(|_| {
            FormatError::Invalid(format!(
                "prediction {}: {} values for a {}x{} grid",
                self.id,
                self.values.len(),
                self.h,
                self.w
            ))
        })
    }
}

fn table<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("CSV of UTF-8 fields")
}

fn hash_line(hash: &str) -> String {
    format!("# config_sha256={hash}\n")
}

/// Per-run rows followed by a per-margin aggregate section.
pub fn report_csv(report: &ExperimentReport, hash: &str) -> String {
    let classes: Vec<String> = report.classes.iter().map(|c| c.to_string()).collect();
    let mut out = hash_line(hash);
    out += &format!("# report={}\n# classes={}\n", report.label, classes.join(" "));
    out += &table(
        &[
            "margin",
            "seed",
            "status",
            "retrieval_accuracy",
            "chance_accuracy",
            "ciou_at_half",
            "auc",
            "mean_ciou",
            "final_loss",
            "error",
        ],
        report.records.iter().map(|r| {
            let (status, error) = match &r.status {
                RunStatus::Ok => ("ok", String::new()),
                RunStatus::Failed(msg) => ("failed", msg.clone()),
            };
            vec![
                r.margin.to_string(),
                r.seed.to_string(),
                status.to_string(),
                r.retrieval_accuracy.to_string(),
                r.chance_accuracy.to_string(),
                r.ciou_at_half.to_string(),
                r.auc.to_string(),
                r.mean_ciou.to_string(),
                r.final_loss.to_string(),
                error,
            ]
        }),
    );
    out += "\n# aggregate\n";
    out += &table(
        &[
            "margin",
            "completed",
            "failed",
            "retrieval_accuracy_mean",
            "retrieval_accuracy_std",
            "ciou_at_half_mean",
            "ciou_at_half_std",
            "auc_mean",
            "auc_std",
            "mean_ciou_mean",
            "mean_ciou_std",
            "final_loss_mean",
            "final_loss_std",
        ],
        report.aggregates.iter().map(|a| {
            let mut row = vec![a.margin.to_string(), a.completed.to_string(), a.failed.to_string()];
            for s in [a.retrieval_accuracy, a.ciou_at_half, a.auc, a.mean_ciou, a.final_loss] {
                row.push(s.mean.to_string());
                row.push(s.std.to_string());
            }
            row
        }),
    );
    out
}

/// Long-format `margin, metric, mean, std` rows for external plotting.
pub fn plot_csv(report: &ExperimentReport, hash: &str) -> String {
    let mut rows = Vec::new();
    for a in &report.aggregates {
        let metrics = [
            ("retrieval_accuracy", a.retrieval_accuracy),
            ("ciou_at_half", a.ciou_at_half),
            ("auc", a.auc),
            ("mean_ciou", a.mean_ciou),
            ("final_loss", a.final_loss),
        ];
        for (name, s) in metrics {
            rows.push(vec![
                a.margin.to_string(),
                name.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ]);
        }
    }
    hash_line(hash) + &table(&["margin", "metric", "mean", "std"], rows)
}

/// Per-sample cIoU followed by the summary row.
pub fn metrics_csv(ids: &[String], report: &LocalizationReport, hash: &str) -> String {
    let mut out = hash_line(hash);
    out += &table(
        &["sample_id", "ciou"],
        ids.iter()
            .zip(&report.cious)
            .map(|(id, c)| vec![id.clone(), c.to_string()]),
    );
    out += "\n# summary\n";
    out += &table(
        &["ciou_at_0.5_percent", "auc_percent"],
        [vec![report.ciou_at_half.to_string(), report.auc_percent.to_string()]],
    );
    out
}

pub fn epoch_loss_csv(history: &[f64], hash: &str) -> String {
    hash_line(hash)
        + &table(
            &["epoch", "mean_loss"],
            history
                .iter()
                .enumerate()
                .map(|(e, l)| vec![(e + 1).to_string(), l.to_string()]),
        )
}

/// Scene counts per class and split, with the faulty-positive count of the
/// training split.
pub fn dataset_summary_csv(data: &Dataset, hash: &str) -> String {
    let k = data.config.num_classes;
    let count = |scenes: &[SyntheticScene], c: usize| scenes.iter().filter(|s| s.class_id == c).count();
    let rows = (0..k).map(|c| {
        let faulty = data
            .split
            .train
            .iter()
            .filter(|s| s.class_id == c && s.is_faulty_positive)
            .count();
        vec![
            c.to_string(),
            count(&data.split.train, c).to_string(),
            faulty.to_string(),
            count(&data.split.heard_test, c).to_string(),
            count(&data.split.unheard_test, c).to_string(),
        ]
    });
    hash_line(hash)
        + &table(
            &["class", "train", "train_faulty", "heard_test", "unheard_test"],
            rows,
        )
}

/// Data lines of a CSV document: comment and blank lines dropped.
pub fn csv_body(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}
