//! Command-line front end. Every subcommand takes a mandatory `--seed`,
//! prints its resolved configuration as JSON before doing any work, and
//! writes only deterministic artifacts.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    self, generate, load_jsonl, save_jsonl, scan_vocabulary, select, split_indices, Checkpoint, ImageStorage, RngState,
    SyntheticConfig, Vocabulary,
};
use crate::domain::{Ablation, ModelConfig, Scanpath, Trial};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_table, Grid, MetricConfig, MetricsReport, SaliencyConfig};
use crate::model::{prepare_all, Model, PreparedTrial};
use crate::numerics::GradCheckConfig;
use crate::par;
use crate::render::write_svg;
use crate::training::{check_variants, train, TrainConfig, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "orsp", version, about = "Referring-guided scanpath prediction")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Train on the train split of a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Write predicted scanpaths as JSONL.
    Predict(PredictArgs),
    /// Train and evaluate every ablation variant under one seed.
    Ablate(AblateArgs),
    /// Draw one trial's scanpaths as SVG.
    Render(RenderArgs),
    /// Compare analytic and finite-difference loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n_trials: usize,
    #[arg(long, default_value_t = 3)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 0.02)]
    pub fixation_noise: f64,
    /// Store rasters as raw files in this directory (relative to the output)
    /// instead of inline.
    #[arg(long)]
    pub image_dir: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub lp: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ctx: usize,
    #[arg(long, default_value_t = 64)]
    pub d_hist: usize,
    #[arg(long, default_value_t = 128)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = 64)]
    pub d_emb: usize,
    #[arg(long, default_value_t = 64)]
    pub d_img: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
}

impl ModelArgs {
    fn config(&self, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            lp: self.lp,
            d_ctx: self.d_ctx,
            d_hist: self.d_hist,
            d_mlp: self.d_mlp,
            d_emb: self.d_emb,
            d_img: self.d_img,
            vocab_size: self.vocab_size,
            focal_gamma: self.gamma,
            focal_alpha: self.alpha,
            decode_threshold: self.threshold,
            ablation: ablation.flags(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr0: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_frac: f64,
    #[arg(long, default_value_t = 4)]
    pub grad_accum: usize,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_min: self.lr_min,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            grad_accum: self.grad_accum,
            epochs: self.epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    #[arg(long, num_args = 2, value_names = ["GX", "GY"], default_values_t = [8, 6])]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 16.0)]
    pub sigma_px: f64,
}

impl MetricArgs {
    fn config(&self) -> Result<MetricConfig> {
        let (gx, gy) = (self.grid[0], self.grid[1]);
        if gx == 0 || gy == 0 {
            return Err(Error::Config("grid dimensions must be ≥ 1".into()));
        }
        if self.sigma_px.is_nan() || self.sigma_px <= 0.0 {
            return Err(Error::Config("sigma_px must be > 0".into()));
        }
        Ok(MetricConfig {
            grid: Grid { gx, gy },
            saliency: SaliencyConfig {
                sigma_px: self.sigma_px,
                ..SaliencyConfig::default()
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json, loss.csv and epochs.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint whose predictions are scored.
    #[arg(long, required_unless_present = "preds", conflicts_with = "preds")]
    pub ckpt: Option<PathBuf>,
    /// Score an existing predictions file instead of a checkpoint.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Output directory for metrics.json and metrics.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Override the checkpoint's decode threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Predictions JSONL.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Restrict the sweep to these variants.
    #[arg(long = "ablation", value_parser = parse_ablation)]
    pub ablations: Vec<Ablation>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trial id to draw; defaults to the first trial in the file.
    #[arg(long)]
    pub trial: Option<String>,
    #[arg(long, conflicts_with = "preds")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// SVG output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub seed: u64,
    /// Variant to check; repeatable. Defaults to every variant.
    #[arg(long = "ablation", value_parser = parse_ablation)]
    pub ablations: Vec<Ablation>,
    #[arg(long, default_value_t = 4)]
    pub lp: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ctx: usize,
    #[arg(long, default_value_t = 16)]
    pub d_hist: usize,
    #[arg(long, default_value_t = 32)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = 16)]
    pub d_emb: usize,
    #[arg(long, default_value_t = 16)]
    pub d_img: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("unknown ablation {s:?}; expected one of {}", names.join(", "))
    })
}

fn print_config<T: Serialize>(command: &str, cfg: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{command} config:\n{text}")?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn pick_split(trials: Vec<Trial>, split: SplitName, seed: u64) -> Vec<Trial> {
    if split == SplitName::All {
        return trials;
    }
    let s = split_indices(trials.len(), seed);
    let idx = match split {
        SplitName::Train => &s.train,
        SplitName::Val => &s.val,
        SplitName::Test => &s.test,
        SplitName::All => unreachable!(),
    };
    select(&trials, idx)
}

fn load_model(ckpt: &Path, threshold: Option<f64>) -> Result<(Model, Vocabulary)> {
    let ck = Checkpoint::load(ckpt)?;
    let mut model = ck.to_model(None)?;
    if let Some(t) = threshold {
        model.config.decode_threshold = t;
        model.config.validate()?;
    }
    Ok((model, ck.vocabulary))
}

fn predict_all(model: &Model, trials: &[Trial]) -> Result<Vec<Scanpath>> {
    par::map(trials, |t| model.predict(t).map(|i| i.scanpath))
        .into_iter()
        .collect()
}

fn ids_of(trials: &[Trial]) -> Vec<String> {
    trials.iter().map(|t| t.trial_id.clone()).collect()
}

fn gts_of(trials: &[Trial]) -> Vec<Scanpath> {
    trials.iter().map(|t| t.gt_scanpath.clone()).collect()
}

/// Predictions for `trials`, ordered like `trials`, read from a file keyed by
/// trial id.
fn read_predictions(path: &Path, trials: &[Trial]) -> Result<Vec<Scanpath>> {
    let preds = data::jsonl::load_predictions(path)?;
    trials
        .iter()
        .map(|t| {
            preds.get(&t.trial_id).cloned().ok_or_else(|| {
                Error::Config(format!("{} has no prediction for trial {}", path.display(), t.trial_id))
            })
        })
        .collect()
}

#[derive(Serialize)]
struct GenDataResolved<'a> {
    out: &'a Path,
    image_dir: &'a Option<String>,
    synthetic: &'a SyntheticConfig,
}

fn run_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_trials: a.n_trials,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        fixation_noise: a.fixation_noise,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    print_config(
        "gen-data",
        &GenDataResolved {
            out: &a.out,
            image_dir: &a.image_dir,
            synthetic: &cfg,
        },
    )?;
    let trials = generate(&cfg)?;
    let storage = match &a.image_dir {
        Some(dir) => ImageStorage::External { dir: dir.clone() },
        None => ImageStorage::Inline,
    };
    if let Some(parent) = a.out.parent() {
        create_dir(parent)?;
    }
    save_jsonl(&trials, &a.out, &storage)?;
    println!("wrote {} trials to {}", trials.len(), a.out.display());
    Ok(())
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<PreparedTrial>,
    val: Vec<PreparedTrial>,
    test: Vec<Trial>,
}

fn prepare_dataset(path: &Path, seed: u64, model_cfg: &ModelConfig) -> Result<Prepared> {
    let vocab = scan_vocabulary(path)?;
    if vocab.len() > model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary has {} entries but vocab_size is {}",
            vocab.len(),
            model_cfg.vocab_size
        )));
    }
    let trials = load_jsonl(path, &vocab)?;
    let s = split_indices(trials.len(), seed);
    if s.train.is_empty() {
        return Err(Error::Config(format!("{} has too few trials to train on", path.display())));
    }
    Ok(Prepared {
        train: prepare_all(&select(&trials, &s.train), model_cfg.lp)?,
        val: prepare_all(&select(&trials, &s.val), model_cfg.lp)?,
        test: select(&trials, &s.test),
        vocab,
    })
}

fn fit(p: &Prepared, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    let val = (!p.val.is_empty()).then_some(p.val.as_slice());
    train(&p.train, val, model_cfg, train_cfg)
}

fn write_training_artifacts(dir: &Path, outcome: &TrainOutcome, vocab: &Vocabulary) -> Result<PathBuf> {
    create_dir(dir)?;
    let ck = Checkpoint::from_model(
        &outcome.model,
        vocab,
        outcome.steps_done as u64,
        RngState {
            seed: outcome.rng_seed,
            word_pos: outcome.rng_word_pos.to_string(),
        },
        Some(&outcome.optimizer),
    );
    let ckpt = dir.join("checkpoint.json");
    ck.save(&ckpt)?;
    fs::write(dir.join("loss.csv"), outcome.log.to_csv())?;
    fs::write(
        dir.join("epochs.json"),
        serde_json::to_string_pretty(&outcome.log.epochs)? + "\n",
    )?;
    Ok(ckpt)
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    data: &'a Path,
    out: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let model_cfg = a.model.config(a.ablation);
    let train_cfg = a.optim.config(a.seed);
    print_config(
        "train",
        &TrainResolved {
            data: &a.data,
            out: &a.out,
            model: &model_cfg,
            train: &train_cfg,
        },
    )?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    let p = prepare_dataset(&a.data, a.seed, &model_cfg)?;
    let outcome = fit(&p, &model_cfg, &train_cfg)?;
    for e in &outcome.log.epochs {
        if let Some(v) = &e.val {
            println!(
                "epoch {:>3}  val l_xy {:.4}  l_token {:.4}  l_txt {:.4}  slot acc {:.4}",
                e.epoch, v.losses.l_xy, v.losses.l_token, v.losses.l_txt, v.slot_accuracy
            );
        }
    }
    let ckpt = write_training_artifacts(&a.out, &outcome, &p.vocab)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn write_report(dir: &Path, label: &str, report: &MetricsReport) -> Result<()> {
    create_dir(dir)?;
    fs::write(dir.join("metrics.json"), report.to_json()?)?;
    fs::write(dir.join("metrics.txt"), report.table(label))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    data: &'a Path,
    ckpt: &'a Option<PathBuf>,
    preds: &'a Option<PathBuf>,
    out: &'a Path,
    split: SplitName,
    seed: u64,
    threshold: Option<f64>,
    metrics: &'a MetricConfig,
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let metric_cfg = a.metrics.config()?;
    print_config(
        "eval",
        &EvalResolved {
            data: &a.data,
            ckpt: &a.ckpt,
            preds: &a.preds,
            out: &a.out,
            split: a.split,
            seed: a.seed,
            threshold: a.threshold,
            metrics: &metric_cfg,
        },
    )?;
    let (preds, trials, label) = match (&a.ckpt, &a.preds) {
        (Some(ckpt), _) => {
            let (model, vocab) = load_model(ckpt, a.threshold)?;
            let trials = pick_split(load_jsonl(&a.data, &vocab)?, a.split, a.seed);
            (predict_all(&model, &trials)?, trials, "model")
        }
        (None, Some(path)) => {
            let vocab = scan_vocabulary(&a.data)?;
            let trials = pick_split(load_jsonl(&a.data, &vocab)?, a.split, a.seed);
            (read_predictions(path, &trials)?, trials, "predictions")
        }
        (None, None) => return Err(Error::Config("eval needs --ckpt or --preds".into())),
    };
    let report = evaluate(&ids_of(&trials), &preds, &gts_of(&trials), &metric_cfg)?;
    write_report(&a.out, label, &report)?;
    print!("{}", report.table(label));
    Ok(())
}

#[derive(Serialize)]
struct PredictResolved<'a> {
    data: &'a Path,
    ckpt: &'a Path,
    out: &'a Path,
    split: SplitName,
    seed: u64,
    threshold: Option<f64>,
}

fn run_predict(a: &PredictArgs) -> Result<()> {
    print_config(
        "predict",
        &PredictResolved {
            data: &a.data,
            ckpt: &a.ckpt,
            out: &a.out,
            split: a.split,
            seed: a.seed,
            threshold: a.threshold,
        },
    )?;
    let (model, vocab) = load_model(&a.ckpt, a.threshold)?;
    let trials = pick_split(load_jsonl(&a.data, &vocab)?, a.split, a.seed);
    let preds = predict_all(&model, &trials)?;
    if let Some(parent) = a.out.parent() {
        create_dir(parent)?;
    }
    data::jsonl::save_predictions(&a.out, &ids_of(&trials), &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblateResolved<'a> {
    data: &'a Path,
    out: &'a Path,
    variants: Vec<&'static str>,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    metrics: &'a MetricConfig,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    name: &'static str,
    label: &'static str,
    report: &'a MetricsReport,
}

/// Orderings expected from the full model against each variant. They are
/// reported, never enforced.
fn directional_notes(rows: &[(Ablation, MetricsReport)]) -> Vec<String> {
    let Some((_, full)) = rows.iter().find(|(a, _)| *a == Ablation::Full) else {
        return Vec::new();
    };
    rows.iter()
        .filter(|(a, _)| *a != Ablation::Full)
        .map(|(a, r)| {
            let holds = full.ss >= r.ss && full.fed <= r.fed;
            format!(
                "full vs {}: SS {:.3} vs {:.3}, FED {:.3} vs {:.3}; expected full to be better: {}",
                a.name(),
                full.ss,
                r.ss,
                full.fed,
                r.fed,
                if holds { "yes" } else { "no" }
            )
        })
        .collect()
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let variants: Vec<Ablation> = if a.ablations.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.ablations.clone()
    };
    let base = a.model.config(Ablation::Full);
    let train_cfg = a.optim.config(a.seed);
    let metric_cfg = a.metrics.config()?;
    print_config(
        "ablate",
        &AblateResolved {
            data: &a.data,
            out: &a.out,
            variants: variants.iter().map(|v| v.name()).collect(),
            model: &base,
            train: &train_cfg,
            metrics: &metric_cfg,
        },
    )?;
    train_cfg.validate()?;
    let p = prepare_dataset(&a.data, a.seed, &base)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in &variants {
        let run = || -> Result<MetricsReport> {
            let cfg = base.clone().with_ablation(v);
            let outcome = fit(&p, &cfg, &train_cfg)?;
            let dir = a.out.join(v.name());
            write_training_artifacts(&dir, &outcome, &p.vocab)?;
            let preds = predict_all(&outcome.model, &p.test)?;
            let report = evaluate(&ids_of(&p.test), &preds, &gts_of(&p.test), &metric_cfg)?;
            write_report(&dir, v.label(), &report)?;
            Ok(report)
        };
        let report = run().map_err(|e| Error::Ablation {
            config: v.name().into(),
            source: Box::new(e),
        })?;
        println!("{} done: SS {:.3}", v.name(), report.ss);
        rows.push((v, report));
    }
    let labelled: Vec<(&str, &MetricsReport)> = rows.iter().map(|(v, r)| (v.label(), r)).collect();
    let table = format_table(&labelled);
    let json_rows: Vec<AblationRow> = rows
        .iter()
        .map(|(v, r)| AblationRow {
            name: v.name(),
            label: v.label(),
            report: r,
        })
        .collect();
    fs::write(a.out.join("ablation.txt"), &table)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&json_rows)? + "\n")?;
    let notes = directional_notes(&rows);
    fs::write(a.out.join("directional.txt"), notes.join("\n") + "\n")?;
    print!("{table}");
    for n in notes {
        println!("note: {n}");
    }
    Ok(())
}

#[derive(Serialize)]
struct RenderResolved<'a> {
    data: &'a Path,
    trial: &'a Option<String>,
    ckpt: &'a Option<PathBuf>,
    preds: &'a Option<PathBuf>,
    out: &'a Path,
    seed: u64,
    threshold: Option<f64>,
}

fn run_render(a: &RenderArgs) -> Result<()> {
    print_config(
        "render",
        &RenderResolved {
            data: &a.data,
            trial: &a.trial,
            ckpt: &a.ckpt,
            preds: &a.preds,
            out: &a.out,
            seed: a.seed,
            threshold: a.threshold,
        },
    )?;
    let loaded = match &a.ckpt {
        Some(c) => Some(load_model(c, a.threshold)?),
        None => None,
    };
    let vocab = match &loaded {
        Some((_, v)) => v.clone(),
        None => scan_vocabulary(&a.data)?,
    };
    let trials = load_jsonl(&a.data, &vocab)?;
    let trial = match &a.trial {
        Some(id) => trials
            .iter()
            .find(|t| &t.trial_id == id)
            .ok_or_else(|| Error::Config(format!("trial {id} not found in {}", a.data.display())))?,
        None => trials
            .first()
            .ok_or_else(|| Error::Config(format!("{} is empty", a.data.display())))?,
    };
    let pred = match (&loaded, &a.preds) {
        (Some((model, _)), _) => Some(model.predict(trial)?.scanpath),
        (None, Some(path)) => Some(read_predictions(path, std::slice::from_ref(trial))?.remove(0)),
        (None, None) => None,
    };
    if let Some(parent) = a.out.parent() {
        create_dir(parent)?;
    }
    write_svg(&a.out, &trial.image, trial.target_box.as_ref(), &trial.gt_scanpath, pred.as_ref())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GradCheckResolved<'a> {
    seed: u64,
    variants: Vec<&'static str>,
    model: &'a ModelConfig,
    eps: f64,
    tol: f64,
}

/// Returns whether every variant passed.
fn run_grad_check(a: &GradCheckArgs) -> Result<bool> {
    let variants: Vec<Ablation> = if a.ablations.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.ablations.clone()
    };
    let base = ModelConfig {
        lp: a.lp,
        d_ctx: a.d_ctx,
        d_hist: a.d_hist,
        d_mlp: a.d_mlp,
        d_emb: a.d_emb,
        d_img: a.d_img,
        vocab_size: a.vocab_size,
        focal_gamma: a.gamma,
        focal_alpha: a.alpha,
        ..ModelConfig::default()
    };
    print_config(
        "grad-check",
        &GradCheckResolved {
            seed: a.seed,
            variants: variants.iter().map(|v| v.name()).collect(),
            model: &base,
            eps: a.eps,
            tol: a.tol,
        },
    )?;
    base.validate()?;
    let trial = generate(&SyntheticConfig {
        n_trials: 1,
        seed: a.seed,
        ..SyntheticConfig::default()
    })?
    .remove(0);
    let prepared = PreparedTrial::new(&trial, base.lp)?;
    let cfg = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let checks = check_variants(&base, &variants, &prepared, a.seed, &cfg)?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<13} max rel err {:.3e} over {} tensors: {}",
            c.ablation.name(),
            c.report.max_rel_err(),
            c.report.params.len(),
            if c.report.passed() { "pass" } else { "FAIL" }
        );
        for f in c.report.failures() {
            println!(
                "  {} rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e}); {} over tolerance beyond the {:.1e} rounding resolution, {} within it",
                f.name,
                f.max_rel_err,
                f.worst_index,
                f.analytic,
                f.numeric,
                f.resolved_failures,
                c.report.resolution(),
                f.unresolved_failures
            );
        }
        ok &= c.report.passed();
    }
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent() {
            create_dir(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&checks)? + "\n")?;
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => run_gen_data(a).map(|_| EXIT_OK),
        Command::Train(a) => run_train(a).map(|_| EXIT_OK),
        Command::Eval(a) => run_eval(a).map(|_| EXIT_OK),
        Command::Predict(a) => run_predict(a).map(|_| EXIT_OK),
        Command::Ablate(a) => run_ablate(a).map(|_| EXIT_OK),
        Command::Render(a) => run_render(a).map(|_| EXIT_OK),
        Command::GradCheck(a) => run_grad_check(a).map(|ok| if ok { EXIT_OK } else { EXIT_CHECK_FAILED }),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match par::with_threads(cli.threads, || dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            EXIT_RUNTIME
        }
    }
}
