//! Margin sweeps and open-set (heard/unheard) experiments.
//!
//! A run is keyed by `(margin, seed)`. The seed drives both the synthetic
//! dataset and the encoder initialisation/shuffling, so every margin sees the
//! same data and the same starting point for a given seed.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::synthdata::{make_closed_split, make_split, Split, SynthConfig};

use super::{evaluate, train, EvalOptions, Evaluation, ToyEncoder, TrainConfig, TrainError};

/// Configuration shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Concrete configs for one `(margin, seed)` run.
    pub fn for_run(&self, margin: f64, seed: u64) -> (SynthConfig, TrainConfig) {
        let synth = SynthConfig {
            seed,
            ..self.synth.clone()
        };
        let mut train = self.train.clone();
        train.seed = seed;
        train.loss.margin = margin;
        (synth, train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub margin: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub retrieval_accuracy: f64,
    pub chance_accuracy: f64,
    pub ciou_at_half: f64,
    /// Percent.
    pub auc: f64,
    pub mean_ciou: f64,
    pub final_loss: f64,
}

impl RunRecord {
    pub fn from_eval(margin: f64, seed: u64, eval: &Evaluation, final_loss: f64) -> Self {
        Self {
            margin,
            seed,
            status: RunStatus::Ok,
            retrieval_accuracy: eval.retrieval_accuracy,
            chance_accuracy: eval.chance_accuracy,
            ciou_at_half: eval.localization.ciou_at_half,
            auc: eval.localization.auc_percent,
            mean_ciou: eval.localization.mean_ciou(),
            final_loss,
        }
    }

    fn failed(margin: f64, seed: u64, err: &TrainError) -> Self {
        Self {
            margin,
            seed,
            status: RunStatus::Failed(err.to_string()),
            retrieval_accuracy: f64::NAN,
            chance_accuracy: f64::NAN,
            ciou_at_half: f64::NAN,
            auc: f64::NAN,
            mean_ciou: f64::NAN,
            final_loss: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginAggregate {
    pub margin: f64,
    pub completed: usize,
    pub failed: usize,
    pub retrieval_accuracy: MetricSummary,
    pub ciou_at_half: MetricSummary,
    pub auc: MetricSummary,
    pub mean_ciou: MetricSummary,
    pub final_loss: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    /// Classes the evaluation scenes were drawn from.
    pub classes: Vec<usize>,
    /// Sorted by `(margin, seed)`.
    pub records: Vec<RunRecord>,
    /// One per distinct margin, ascending.
    pub aggregates: Vec<MarginAggregate>,
}

impl ExperimentReport {
    pub fn from_records(label: impl Into<String>, classes: Vec<usize>, mut records: Vec<RunRecord>) -> Self {
        records.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.seed.cmp(&b.seed)));
        let mut margins: Vec<f64> = records.iter().map(|r| r.margin).collect();
        margins.dedup_by(|a, b| a.total_cmp(b).is_eq());
        let aggregates = margins
            .into_iter()
            .map(|m| {
                let runs: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.margin.total_cmp(&m).is_eq())
                    .collect();
                let ok: Vec<&&RunRecord> = runs.iter().filter(|r| r.status.is_ok()).collect();
                let pick = |f: fn(&RunRecord) -> f64| {
                    MetricSummary::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                MarginAggregate {
                    margin: m,
                    completed: ok.len(),
                    failed: runs.len() - ok.len(),
                    retrieval_accuracy: pick(|r| r.retrieval_accuracy),
                    ciou_at_half: pick(|r| r.ciou_at_half),
                    auc: pick(|r| r.auc),
                    mean_ciou: pick(|r| r.mean_ciou),
                    final_loss: pick(|r| r.final_loss),
                }
            })
            .collect();
        Self {
            label: label.into(),
            classes,
            records,
            aggregates,
        }
    }

    pub fn aggregate(&self, margin: f64) -> Option<&MarginAggregate> {
        self.aggregates
            .iter()
            .find(|a| (a.margin - margin).abs() < 1e-12)
    }
}

fn train_on(split: &Split, synth: &SynthConfig, train_cfg: &TrainConfig) -> Result<(ToyEncoder, f64), TrainError> {
    let enc = ToyEncoder::random(synth.latent_dim, &train_cfg.encoder, train_cfg.seed)?;
    let state = train(enc, &split.train, train_cfg)?;
    let final_loss = state.loss_history.last().copied().unwrap_or(f64::NAN);
    Ok((state.encoder, final_loss))
}

/// One closed-set run: train on every class, evaluate on the clean test split.
pub fn sweep_run(margin: f64, seed: u64, base: &ExperimentConfig) -> RunRecord {
    let attempt = || -> Result<RunRecord, TrainError> {
        let (synth, train_cfg) = base.for_run(margin, seed);
        let split = make_closed_split(&synth)?;
        let (enc, final_loss) = train_on(&split, &synth, &train_cfg)?;
        let eval = evaluate(&enc, &split.heard_test, &train_cfg.loss.pool, &base.eval)?;
        Ok(RunRecord::from_eval(margin, seed, &eval, final_loss))
    };
    attempt().unwrap_or_else(|e| RunRecord::failed(margin, seed, &e))
}

fn run_grid(margins: &[f64], seeds: &[u64]) -> Vec<(f64, u64)> {
    margins
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect()
}

/// One model per `(margin, seed)`, evaluated on held-out scenes of the
/// training classes. Runs execute in parallel; failed runs are recorded and
/// left out of the aggregates.
pub fn margin_sweep(margins: &[f64], seeds: &[u64], base: &ExperimentConfig) -> Result<ExperimentReport, TrainError> {
    if margins.is_empty() || seeds.is_empty() {
        return Err(TrainError::InvalidConfig("margin and seed lists must be non-empty".into()));
    }
    base.validate()?;
    let records: Vec<RunRecord> = run_grid(margins, seeds)
        .into_par_iter()
        .map(|(m, s)| sweep_run(m, s, base))
        .collect();
    Ok(ExperimentReport::from_records(
        "sweep",
        (0..base.synth.num_classes).collect(),
        records,
    ))
}

/// One open-set run: train on heard classes, evaluate on heard and unheard test scenes.
pub fn open_set_run(
    margin: f64,
    seed: u64,
    heard: &BTreeSet<usize>,
    unheard: &BTreeSet<usize>,
    base: &ExperimentConfig,
) -> (RunRecord, RunRecord) {
    let attempt = || -> Result<(RunRecord, RunRecord), TrainError> {
        let (synth, train_cfg) = base.for_run(margin, seed);
        let split = make_split(&synth, heard, unheard)?;
        let (enc, final_loss) = train_on(&split, &synth, &train_cfg)?;
        let pool = &train_cfg.loss.pool;
        let h = evaluate(&enc, &split.heard_test, pool, &base.eval)?;
        let u = evaluate(&enc, &split.unheard_test, pool, &base.eval)?;
        Ok((
            RunRecord::from_eval(margin, seed, &h, final_loss),
            RunRecord::from_eval(margin, seed, &u, final_loss),
        ))
    };
    attempt().unwrap_or_else(|e| (RunRecord::failed(margin, seed, &e), RunRecord::failed(margin, seed, &e)))
}

/// Heard and unheard reports for every `(margin, seed)`.
pub fn open_set_eval(
    heard: &BTreeSet<usize>,
    unheard: &BTreeSet<usize>,
    margins: &[f64],
    seeds: &[u64],
    base: &ExperimentConfig,
) -> Result<(ExperimentReport, ExperimentReport), TrainError> {
    if margins.is_empty() || seeds.is_empty() {
        return Err(TrainError::InvalidConfig("margin and seed lists must be non-empty".into()));
    }
    base.validate()?;
    // Fail fast on a bad partition instead of recording it once per run.
    if heard.is_empty() || unheard.is_empty() {
        return Err(TrainError::InvalidConfig("heard and unheard class sets must be non-empty".into()));
    }
    let overlap: Vec<usize> = heard.intersection(unheard).copied().collect();
    if !overlap.is_empty() {
        return Err(crate::synthdata::SynthError::OverlappingSplit(overlap).into());
    }
    let pairs: Vec<(RunRecord, RunRecord)> = run_grid(margins, seeds)
        .into_par_iter()
        .map(|(m, s)| open_set_run(m, s, heard, unheard, base))
        .collect();
    let (h, u): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok((
        ExperimentReport::from_records("heard", heard.iter().copied().collect(), h),
        ExperimentReport::from_records("unheard", unheard.iter().copied().collect(), u),
    ))
}
