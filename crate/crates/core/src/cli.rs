//! The `marginnce` command-line tool.
//!
//! Every command reads one JSON [`RunConfig`]; `--seed`, `--margins` and
//! `--out` override the matching fields. Exit codes: 0 success, 2 config or
//! input error, 3 numerical failure, 4 I/O error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::io::Write;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{
    self, annotations_for, config_hash, dataset_summary_csv, epoch_loss_csv, load_checkpoint, load_dataset,
    metrics_csv, plot_csv, read_json, report_csv, save_checkpoint, save_dataset, write_atomic, write_json,
    AnnotationRecord, Checkpoint, Dataset, FormatError, PredictionRecord,
};
use crate::metrics::{ciou_with_rule, consensus_from_boxes, LocalizationReport, MetricsError, PredictionMap};
use crate::synthdata::{make_closed_split, make_split, Split, SynthConfig, SynthError};
use crate::trainer::{
    evaluate, open_set_run, resume, response_for_scene, sweep_run, EvalOptions, ExperimentConfig, ExperimentReport,
    RunRecord, ToyEncoder, TrainConfig, TrainError, TrainState,
};

/// Default sweep margins, from +0.2 down to −0.4.
pub const TABLE_MARGINS: [f64; 6] = [0.2, 0.0, -0.1, -0.2, -0.3, -0.4];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Invalid(_) => Self::Config(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::Config(format!("synth: {e}"))
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    #[serde(default = "SweepOptions::default_margins")]
    pub margins: Vec<f64>,
    /// Seeds `seed, seed + 1, …`.
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
}

impl SweepOptions {
    fn default_margins() -> Vec<f64> {
        TABLE_MARGINS.to_vec()
    }
}

fn default_num_seeds() -> usize {
    10
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            margins: Self::default_margins(),
            num_seeds: default_num_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenSetOptions {
    /// Training classes; the lower half of the class ids when absent.
    #[serde(default)]
    pub heard: Option<Vec<usize>>,
    /// Held-out classes; every class not heard when absent.
    #[serde(default)]
    pub unheard: Option<Vec<usize>>,
    #[serde(default = "OpenSetOptions::default_margins")]
    pub margins: Vec<f64>,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
}

impl OpenSetOptions {
    fn default_margins() -> Vec<f64> {
        vec![0.2, 0.0, -0.2]
    }

    /// The `(heard, unheard)` partition for `num_classes` classes.
    pub fn partition(&self, num_classes: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let heard: BTreeSet<usize> = match &self.heard {
            Some(h) => h.iter().copied().collect(),
            None => (0..num_classes.div_ceil(2)).collect(),
        };
        let unheard = match &self.unheard {
            Some(u) => u.iter().copied().collect(),
            None => (0..num_classes).filter(|c| !heard.contains(c)).collect(),
        };
        (heard, unheard)
    }
}

impl Default for OpenSetOptions {
    fn default() -> Self {
        Self {
            heard: None,
            unheard: None,
            margins: Self::default_margins(),
            num_seeds: default_num_seeds(),
        }
    }
}

/// One configuration document for every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Copied into `synth.seed` and `train.seed` on resolution.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "RunConfig::default_output_dir")]
    pub output_dir: PathBuf,
    /// Train on this dataset file instead of generating one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub open_set: OpenSetOptions,
}

impl RunConfig {
    fn default_output_dir() -> PathBuf {
        PathBuf::from("out")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Seeds propagated and the learning rate made explicit.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train = self.train.resolved();
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.eval
            .validate()
            .map_err(|e| CliError::Config(format!("eval: {e}")))?;
        check_margins("sweep.margins", &self.sweep.margins)?;
        check_margins("open_set.margins", &self.open_set.margins)?;
        if self.sweep.num_seeds == 0 || self.open_set.num_seeds == 0 {
            return Err(CliError::Config("num_seeds must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output location does not.
    pub fn hash(&self) -> String {
        let mut view = self.clone();
        view.output_dir = PathBuf::new();
        config_hash(&view)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            synth: self.synth.clone(),
            train: self.train.clone(),
            eval: self.eval,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            seed: 0,
            output_dir: Self::default_output_dir(),
            dataset: None,
            sweep: SweepOptions::default(),
            open_set: OpenSetOptions::default(),
        }
    }
}

fn check_margins(field: &str, margins: &[f64]) -> Result<(), CliError> {
    if margins.is_empty() || margins.iter().any(|m| !m.is_finite()) {
        return Err(CliError::Config(format!("{field} must be a non-empty list of finite numbers")));
    }
    Ok(())
}

/// Comma-separated margin list, e.g. `"0.2,0,-0.2"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Margins(pub Vec<f64>);

impl FromStr for Margins {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("invalid margin {t:?}"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Margins)
    }
}

#[derive(Debug, Parser)]
#[command(name = "marginnce", version, about = "Margin contrastive learning on synthetic audio-visual scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; defaults apply when omitted (eval-maps, print-config only).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the sweep / open-set margin list.
    #[arg(long, global = true, value_name = "a,b,c", allow_hyphen_values = true)]
    pub margins: Option<Margins>,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps (all cores by default).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset, its annotations and a class summary.
    GenData,
    /// Train one model, then evaluate it on the held-out scenes.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// One model per (margin, seed); resumable through per-run markers.
    Sweep,
    /// Train on heard classes, evaluate on heard and unheard classes.
    OpenSet,
    /// Score prediction maps against annotations.
    EvalMaps {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        #[arg(long, value_name = "PATH")]
        annotations: PathBuf,
    },
    /// Print the resolved config.
    PrintConfig,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Command::EvalMaps { .. } | Command::PrintConfig) => RunConfig::default(),
        (None, _) => return Err(CliError::Config("--config is required for this command".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(Margins(m)) = &cli.margins {
        cfg.sweep.margins = m.clone();
        cfg.open_set.margins = m.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    if cli.print_config || matches!(cli.command, Command::PrintConfig) {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        // a closed pipe (e.g. `| head`) is not an error worth reporting
        let _ = writeln!(std::io::stdout(), "{text}");
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, in which case that one is used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref()),
        Command::Sweep => cmd_sweep(&cfg),
        Command::OpenSet => cmd_open_set(&cfg),
        Command::EvalMaps {
            predictions,
            annotations,
        } => cmd_eval_maps(&cfg, predictions, annotations),
        Command::PrintConfig => unreachable!("handled above"),
    }
}

/// Runs a command line and maps the outcome to an exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// The split described by the config: open-set when classes are given.
fn split_for(cfg: &RunConfig) -> Result<Split, CliError> {
    if cfg.open_set.heard.is_some() || cfg.open_set.unheard.is_some() {
        let (heard, unheard) = cfg.open_set.partition(cfg.synth.num_classes);
        Ok(make_split(&cfg.synth, &heard, &unheard)?)
    } else {
        Ok(make_closed_split(&cfg.synth)?)
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let hash = cfg.hash();
    let data = Dataset {
        config: cfg.synth.clone(),
        split: split_for(cfg)?,
    };
    save_dataset(&out.join("dataset.bin"), &data)?;
    let mut tests = data.split.heard_test.clone();
    tests.extend(data.split.unheard_test.iter().cloned());
    write_json(&out.join("annotations.json"), &annotations_for(&tests, cfg.eval.eval_shape))?;
    write_text(&out.join("dataset_summary.csv"), &dataset_summary_csv(&data, &hash))?;

    let train = &data.split.train;
    let faulty = train.iter().filter(|s| s.is_faulty_positive).count();
    println!(
        "classes: {} heard, {} unheard",
        data.split.heard_classes.len(),
        data.split.unheard_classes.len()
    );
    println!(
        "scenes: {} train, {} heard test, {} unheard test",
        train.len(),
        data.split.heard_test.len(),
        data.split.unheard_test.len()
    );
    for c in 0..cfg.synth.num_classes {
        let n = train.iter().filter(|s| s.class_id == c).count();
        if n > 0 {
            println!("  class {c}: {n} train scenes");
        }
    }
    println!(
        "faulty positives: {faulty}/{} = {:.4} (configured {})",
        train.len(),
        faulty as f64 / train.len().max(1) as f64,
        cfg.synth.faulty_positive_rate
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn load_or_generate(cfg: &RunConfig) -> Result<Split, CliError> {
    match &cfg.dataset {
        Some(path) => {
            let data = load_dataset(path)?;
            if data.config != cfg.synth {
                return Err(CliError::Config(format!(
                    "{} was generated with a different synth config",
                    path.display()
                )));
            }
            Ok(data.split)
        }
        None => split_for(cfg),
    }
}

pub fn cmd_train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let hash = cfg.hash();
    let split = load_or_generate(cfg)?;
    let ckpt_path = out.join("checkpoint.bin");

    let mut state = match resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let same_run = TrainConfig {
                epochs: cfg.train.epochs,
                ..ckpt.train.clone()
            };
            if ckpt.synth != cfg.synth || same_run != cfg.train {
                return Err(CliError::Config(format!(
                    "{} was trained with a different config",
                    path.display()
                )));
            }
            if ckpt.state.epochs_done > cfg.train.epochs {
                return Err(CliError::Config(format!(
                    "checkpoint has {} epochs, config asks for {}",
                    ckpt.state.epochs_done, cfg.train.epochs
                )));
            }
            ckpt.state
        }
        None => {
            let enc = ToyEncoder::random(cfg.synth.latent_dim, &cfg.train.encoder, cfg.train.seed)?;
            TrainState::new(enc, &cfg.train)
        }
    };
    // One epoch at a time so an interrupted run leaves a usable checkpoint.
    while state.epochs_done < cfg.train.epochs {
        let step = TrainConfig {
            epochs: state.epochs_done + 1,
            ..cfg.train.clone()
        };
        state = resume(state, &split.train, &step)?;
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                synth: cfg.synth.clone(),
                train: cfg.train.clone(),
                state: state.clone(),
            },
        )?;
        println!(
            "epoch {}/{}: loss {:.6}",
            state.epochs_done,
            cfg.train.epochs,
            state.loss_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    if !ckpt_path.exists() || resume_from.is_some_and(|p| p != ckpt_path) {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                synth: cfg.synth.clone(),
                train: cfg.train.clone(),
                state: state.clone(),
            },
        )?;
    }

    let enc = &state.encoder;
    let eval = evaluate(enc, &split.heard_test, &cfg.train.loss.pool, &cfg.eval)?;
    let final_loss = state.loss_history.last().copied().unwrap_or(f64::NAN);
    let record = RunRecord::from_eval(cfg.train.loss.margin, cfg.seed, &eval, final_loss);
    let report = ExperimentReport::from_records("train", split.heard_classes.clone(), vec![record]);
    write_text(&out.join("epoch_loss.csv"), &epoch_loss_csv(&state.loss_history, &hash))?;
    write_text(&out.join("eval_report.csv"), &report_csv(&report, &hash))?;
    let predictions = split
        .heard_test
        .iter()
        .map(|s| Ok(PredictionRecord::from_map(s.id.clone(), &response_for_scene(enc, s)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    write_json(&out.join("predictions.json"), &predictions)?;
    // the annotations matching predictions.json, ready for eval-maps
    write_json(
        &out.join("eval_annotations.json"),
        &annotations_for(&split.heard_test, cfg.eval.eval_shape),
    )?;

    println!(
        "margin {}: retrieval {:.4} (chance {:.4}), cIoU@0.5 {:.2}%, AUC {:.2}%",
        cfg.train.loss.margin,
        eval.retrieval_accuracy,
        eval.chance_accuracy,
        eval.localization.ciou_at_half,
        eval.localization.auc_percent
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// On-disk record of one finished run, keyed by the experiment config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunMarker<T> {
    config_sha256: String,
    result: T,
}

fn marker_path(dir: &Path, kind: &str, margin: f64, seed: u64) -> PathBuf {
    dir.join("runs").join(format!("{kind}_m{margin}_s{seed}.json"))
}

/// Loads finished runs from their markers and computes (in parallel) the
/// rest, writing each marker as soon as its run completes.
fn run_with_markers<T, F>(
    cfg: &RunConfig,
    kind: &str,
    margins: &[f64],
    seeds: &[u64],
    run: F,
) -> Result<Vec<T>, CliError>
where
    T: Serialize + serde::de::DeserializeOwned + Send,
    F: Fn(f64, u64) -> T + Sync,
{
    let hash = config_hash(&cfg.experiment());
    let grid: Vec<(f64, u64)> = margins
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let mut done: BTreeMap<usize, T> = BTreeMap::new();
    for (k, &(m, s)) in grid.iter().enumerate() {
        let path = marker_path(&cfg.output_dir, kind, m, s);
        if let Ok(marker) = read_json::<RunMarker<T>>(&path) {
            if marker.config_sha256 == hash {
                done.insert(k, marker.result);
            }
        }
    }
    let todo: Vec<usize> = (0..grid.len()).filter(|k| !done.contains_key(k)).collect();
    if !done.is_empty() {
        println!("{} of {} runs already complete", done.len(), grid.len());
    }
    let fresh = todo
        .into_par_iter()
        .map(|k| {
            let (m, s) = grid[k];
            let result = run(m, s);
            let marker = RunMarker {
                config_sha256: hash.clone(),
                result,
            };
            write_json(&marker_path(&cfg.output_dir, kind, m, s), &marker)?;
            Ok((k, marker.result))
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    done.extend(fresh);
    Ok(done.into_values().collect())
}

fn seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base + k).collect()
}

fn print_aggregates(report: &ExperimentReport) {
    println!("{}:", report.label);
    for a in &report.aggregates {
        println!(
            "  margin {:+.2}: retrieval {:.4} ± {:.4}, cIoU@0.5 {:.2} ± {:.2}, AUC {:.2} ± {:.2} ({} ok, {} failed)",
            a.margin,
            a.retrieval_accuracy.mean,
            a.retrieval_accuracy.std,
            a.ciou_at_half.mean,
            a.ciou_at_half.std,
            a.auc.mean,
            a.auc.std,
            a.completed,
            a.failed
        );
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let base = cfg.experiment();
    let seeds = seeds(cfg.seed, cfg.sweep.num_seeds);
    let records = run_with_markers(cfg, "sweep", &cfg.sweep.margins, &seeds, |m, s| sweep_run(m, s, &base))?;
    let report = ExperimentReport::from_records("sweep", (0..cfg.synth.num_classes).collect(), records);
    let hash = cfg.hash();
    write_text(&cfg.output_dir.join("report.csv"), &report_csv(&report, &hash))?;
    write_text(&cfg.output_dir.join("plot.csv"), &plot_csv(&report, &hash))?;
    print_aggregates(&report);
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

pub fn cmd_open_set(cfg: &RunConfig) -> Result<(), CliError> {
    let (heard, unheard) = cfg.open_set.partition(cfg.synth.num_classes);
    if heard.is_empty() || unheard.is_empty() {
        return Err(CliError::Config("open_set: heard and unheard classes must be non-empty".into()));
    }
    if let Some(c) = heard.union(&unheard).find(|&&c| c >= cfg.synth.num_classes) {
        return Err(CliError::Config(format!(
            "open_set: class {c} out of range for {} classes",
            cfg.synth.num_classes
        )));
    }
    let overlap: Vec<usize> = heard.intersection(&unheard).copied().collect();
    if !overlap.is_empty() {
        return Err(CliError::Config(format!("open_set: classes {overlap:?} are both heard and unheard")));
    }
    let base = cfg.experiment();
    let seeds = seeds(cfg.seed, cfg.open_set.num_seeds);
    let pairs = run_with_markers(cfg, "openset", &cfg.open_set.margins, &seeds, |m, s| {
        open_set_run(m, s, &heard, &unheard, &base)
    })?;
    let (h, u): (Vec<RunRecord>, Vec<RunRecord>) = pairs.into_iter().unzip();
    let hash = cfg.hash();
    for report in [
        ExperimentReport::from_records("heard", heard.iter().copied().collect(), h),
        ExperimentReport::from_records("unheard", unheard.iter().copied().collect(), u),
    ] {
        let dir = &cfg.output_dir;
        write_text(&dir.join(format!("{}_report.csv", report.label)), &report_csv(&report, &hash))?;
        write_text(&dir.join(format!("{}_plot.csv", report.label)), &plot_csv(&report, &hash))?;
        print_aggregates(&report);
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn index_by_id<T>(items: Vec<T>, id: impl Fn(&T) -> &str, what: &str) -> Result<BTreeMap<String, T>, CliError> {
    let mut map = BTreeMap::new();
    for item in items {
        let key = id(&item).to_string();
        if map.contains_key(&key) {
            return Err(CliError::Config(format!("duplicate {what} id {key:?}")));
        }
        map.insert(key, item);
    }
    Ok(map)
}

/// Per-sample cIoU of `predictions` against `annotations`, joined by id and
/// reported in id order.
pub fn score_maps(
    predictions: Vec<PredictionRecord>,
    annotations: Vec<AnnotationRecord>,
    eval: &EvalOptions,
) -> Result<(Vec<String>, LocalizationReport), CliError> {
    let preds = index_by_id(predictions, |p| &p.id, "prediction")?;
    let anns = index_by_id(annotations, |a| &a.id, "annotation")?;
    let missing: Vec<&str> = anns.keys().filter(|k| !preds.contains_key(*k)).map(|s| s.as_str()).collect();
    let extra: Vec<&str> = preds.keys().filter(|k| !anns.contains_key(*k)).map(|s| s.as_str()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("sample ids do not match;");
        if !missing.is_empty() {
            msg += &format!(" missing predictions: {}", missing.join(", "));
        }
        if !extra.is_empty() {
            msg += &format!(" missing annotations: {}", extra.join(", "));
        }
        return Err(CliError::Config(msg));
    }
    let mut ids = Vec::with_capacity(anns.len());
    let mut cious = Vec::with_capacity(anns.len());
    for (id, ann) in &anns {
        let scores = preds[id].to_mat()?;
        let shape = ann.shape.map(|[h, w]| (h, w)).unwrap_or(scores.shape());
        let pred = PredictionMap::new(scores, shape)?;
        let gt = consensus_from_boxes(&ann.rects()?, shape).map_err(|e| CliError::Config(format!("annotation {id}: {e}")))?;
        cious.push(ciou_with_rule(&pred, &gt, eval.threshold_rule)?.0);
        ids.push(id.clone());
    }
    let report = LocalizationReport::from_cious(cious, eval.auc_step, eval.threshold_rule)?;
    Ok((ids, report))
}

pub fn cmd_eval_maps(cfg: &RunConfig, predictions: &Path, annotations: &Path) -> Result<(), CliError> {
    let preds: Vec<PredictionRecord> = formats::read_json(predictions)?;
    let anns: Vec<AnnotationRecord> = formats::read_json(annotations)?;
    let (ids, report) = score_maps(preds, anns, &cfg.eval)?;
    let path = cfg.output_dir.join("metrics.csv");
    write_text(&path, &metrics_csv(&ids, &report, &cfg.hash()))?;
    println!(
        "{} samples: cIoU@0.5 {:.2}%, AUC {:.2}%",
        ids.len(),
        report.ciou_at_half,
        report.auc_percent
    );
    println!("wrote {}", path.display());
    Ok(())
}
