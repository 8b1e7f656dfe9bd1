use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use sarcasm_core::checkpoint::Checkpoint;
use sarcasm_core::data::{
    compute_metrics, load_inputs, parse_manifest, synth_dataset, Averaging, Manifest,
    MetricsReport, Split, SynthConfig,
};
use sarcasm_core::encoders::Vocab;
use sarcasm_core::model::{evaluate, ModelConfig, ModelInput, Variant};
use sarcasm_core::training::{history_csv, train_loop, TrainOutcome};
use sarcasm_core::verify::gradcheck_suite;
use sarcasm_core::CoreError;
use sarcasm_tensor::GradCheckOptions;

use crate::config::{Override, RunConfig};
use crate::CliError;

pub const PREDICTION_HEADER: &str = "id,label,p_sarcastic";
pub const ABLATION_HEADER: &str = "variant,accuracy,precision,recall,f1";

/// Cross-modal incongruity sarcasm detector.
///
/// `train` and `ablate` accept `--section.key=value` overrides for the
/// `model`, `encoder`, `train` and `paths` config sections.
#[derive(Debug, Parser)]
#[command(name = "sarcasm", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin, history.csv, config.toml and vocab.txt.
    Train(RunArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Write per-sample predictions as CSV.
    Predict(PredictArgs),
    /// Finite-difference check of every operation, module and model variant.
    Gradcheck(GradcheckArgs),
    /// Train the full model and each ablation variant under one seed.
    Ablate(AblateArgs),
    /// Generate the synthetic incongruity dataset.
    Synth(SynthArgs),
    /// Per-split label counts of a manifest.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest path; overrides `paths.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; overrides `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Split the variants are compared on.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum AverageArg {
    #[default]
    Binary,
    Macro,
}

impl From<AverageArg> for Averaging {
    fn from(a: AverageArg) -> Self {
        match a {
            AverageArg::Binary => Averaging::Binary,
            AverageArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, value_enum, default_value_t)]
    average: AverageArg,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Entries sampled per tensor; 0 checks all of them.
    #[arg(long, default_value_t = 64)]
    max_entries: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n)]
    n: usize,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().region_dim)]
    region_dim: usize,
    /// Region rows per sample; must be a perfect square.
    #[arg(long, default_value_t = SynthConfig::default().regions)]
    regions: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    noise: f64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

pub(crate) fn usage() -> String {
    Cli::command().render_usage().to_string()
}

fn stdout_error(e: io::Error) -> CliError {
    CoreError::io("<stdout>", e).into()
}

pub(crate) fn execute(
    cli: Cli,
    overrides: &[Override],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let takes_overrides = matches!(cli.command, Command::Train(_) | Command::Ablate(_));
    if !overrides.is_empty() && !takes_overrides {
        return Err(CliError::Usage(
            "--section.key=value overrides apply only to train and ablate".into(),
        ));
    }
    match cli.command {
        Command::Train(args) => train(&args, overrides, out, err),
        Command::Eval(args) => eval(&args, out),
        Command::Predict(args) => predict(&args, out),
        Command::Gradcheck(args) => gradcheck(&args, out),
        Command::Ablate(args) => ablate(&args, overrides, out, err),
        Command::Synth(args) => synth(&args, out),
        Command::Stats(args) => stats(&args, out),
    }
}

/// A resolved training run: the config, its manifest and the vocabulary
/// built from the training split.
struct Workspace {
    config: RunConfig,
    manifest: Manifest,
    vocab: Option<Vocab>,
    out_dir: PathBuf,
}

impl Workspace {
    fn open(args: &RunArgs, overrides: &[Override]) -> Result<Self, CliError> {
        let mut config = RunConfig::resolve(args.config.as_deref(), overrides)?;
        if let Some(m) = &args.manifest {
            config.paths.manifest = Some(m.clone());
        }
        if let Some(o) = &args.out {
            config.paths.output_dir = Some(o.clone());
        }
        let manifest_path = config.paths.manifest.clone().ok_or_else(|| {
            CliError::Usage("no manifest given (--manifest or paths.manifest)".into())
        })?;
        let out_dir = config.paths.output_dir.clone().ok_or_else(|| {
            CliError::Usage("no output directory given (--out or paths.output_dir)".into())
        })?;
        let manifest = parse_manifest(&manifest_path)?;
        let train = manifest.split(Split::Train);
        if train.is_empty() {
            return Err(CoreError::Data(format!(
                "{}: no training samples",
                manifest_path.display()
            ))
            .into());
        }
        let vocab = if config.model.has_toy_encoder() {
            let cap = config.model.encoder.vocab_size;
            let texts = train
                .iter()
                .flat_map(|s| [s.text.as_str(), s.caption.as_str()]);
            let vocab = Vocab::build(texts, (cap > 0).then_some(cap));
            config.model.encoder.vocab_size = vocab.len();
            Some(vocab)
        } else {
            None
        };
        config.validate()?;
        fs::create_dir_all(&out_dir).map_err(|e| CoreError::io(&out_dir, e))?;
        config.save(&out_dir.join("config.toml"))?;
        if let Some(v) = &vocab {
            v.save(&out_dir.join("vocab.txt"))?;
        }
        Ok(Self {
            config,
            manifest,
            vocab,
            out_dir,
        })
    }

    fn inputs(&self, split: Split, model: &ModelConfig) -> Result<Vec<ModelInput>, CliError> {
        let samples = self.manifest.split(split);
        Ok(load_inputs(
            &self.manifest,
            &samples,
            self.vocab.as_ref(),
            model,
        )?)
    }

    fn train(&self, model: &ModelConfig) -> Result<TrainOutcome, CliError> {
        let train = self.inputs(Split::Train, model)?;
        let dev = self.inputs(Split::Dev, model)?;
        Ok(train_loop(&train, &dev, model, &self.config.train)?)
    }
}

fn train(
    args: &RunArgs,
    overrides: &[Override],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::open(args, overrides)?;
    let started = Instant::now();
    let outcome = ws.train(&ws.config.model)?;
    let _ = writeln!(
        err,
        "trained {} epochs in {:.2?}",
        outcome.history.len(),
        started.elapsed()
    );

    let history = ws.out_dir.join("history.csv");
    fs::write(&history, history_csv(&outcome.history)).map_err(|e| CoreError::io(&history, e))?;
    let checkpoint = Checkpoint {
        model: ws.config.model.clone(),
        train: ws.config.train.clone(),
        vocab: ws.vocab.clone(),
        params: outcome.params,
        optimizer: outcome.optimizer,
    };
    checkpoint.save(&ws.out_dir.join("checkpoint.bin"))?;

    let best = &outcome.history[outcome.best_epoch - 1];
    writeln!(out, "best epoch = {}", outcome.best_epoch).map_err(stdout_error)?;
    writeln!(out, "dev accuracy = {:.4}", best.dev_acc).map_err(stdout_error)?;
    writeln!(out, "dev f1 = {:.4}", best.dev_f1).map_err(stdout_error)?;
    writeln!(out, "stopped early = {}", outcome.stopped_early).map_err(stdout_error)?;
    writeln!(out, "output = {}", ws.out_dir.display()).map_err(stdout_error)?;
    Ok(())
}

/// Loads a checkpoint and the inputs of one split in the layout it expects.
fn load_for_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
) -> Result<(Checkpoint, Vec<ModelInput>), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = parse_manifest(manifest)?;
    let samples = manifest.split(split);
    let inputs = load_inputs(&manifest, &samples, ckpt.vocab.as_ref(), &ckpt.model)?;
    Ok((ckpt, inputs))
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (ckpt, inputs) = load_for_checkpoint(&args.checkpoint, &args.manifest, args.split)?;
    if inputs.is_empty() {
        return Err(CoreError::Data(format!("split {} is empty", args.split)).into());
    }
    let evaluation = evaluate(&ckpt.params, &ckpt.model, &inputs)?;
    let gold: Option<Vec<u8>> = inputs.iter().map(|i| i.label).collect();
    let gold =
        gold.ok_or_else(|| CoreError::Data(format!("split {} has unlabeled samples", args.split)))?;
    let predicted: Vec<u8> = evaluation.predictions.iter().map(|p| p.label).collect();
    let report = compute_metrics(&predicted, &gold, args.average.into())?;
    writeln!(out, "split = {}", args.split).map_err(stdout_error)?;
    writeln!(out, "samples = {}", inputs.len()).map_err(stdout_error)?;
    writeln!(out, "loss = {:.6}", evaluation.loss).map_err(stdout_error)?;
    writeln!(out, "{report}").map_err(stdout_error)?;
    Ok(())
}

fn predict(args: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (ckpt, inputs) = load_for_checkpoint(&args.checkpoint, &args.manifest, args.split)?;
    let evaluation = evaluate(&ckpt.params, &ckpt.model, &inputs)?;
    let mut csv = format!("{PREDICTION_HEADER}\n");
    for (input, p) in inputs.iter().zip(&evaluation.predictions) {
        csv.push_str(&format!("{},{},{:.6}\n", input.id, p.label, p.probs[1]));
    }
    match &args.output {
        Some(path) => fs::write(path, csv).map_err(|e| CoreError::io(path, e))?,
        None => out.write_all(csv.as_bytes()).map_err(stdout_error)?,
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let options = GradCheckOptions {
        step: args.step,
        tolerance: args.tolerance,
        max_entries: (args.max_entries > 0).then_some(args.max_entries),
        ..GradCheckOptions::default()
    };
    let started = Instant::now();
    let outcomes = gradcheck_suite(args.seed, &options);
    for o in &outcomes {
        writeln!(out, "{o}").map_err(stdout_error)?;
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    let worst = outcomes
        .iter()
        .filter_map(|o| o.max_rel_error())
        .fold(0.0, f64::max);
    writeln!(
        out,
        "{}/{} checks passed, max relative error {worst:.3e}, tolerance {:.0e}, {:.2?}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        args.tolerance,
        started.elapsed()
    )
    .map_err(stdout_error)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn ablation_row(variant: Variant, m: &MetricsReport) -> String {
    format!(
        "{},{:.4},{:.4},{:.4},{:.4}",
        variant.name(),
        m.accuracy,
        m.precision,
        m.recall,
        m.f1
    )
}

fn ablate(
    args: &AblateArgs,
    overrides: &[Override],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::open(&args.run, overrides)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for variant in Variant::ALL {
        let model = variant.configure(&ws.config.model);
        let started = Instant::now();
        let outcome = ws.train(&model)?;
        let inputs = ws.inputs(args.split, &model)?;
        let metrics = evaluate(&outcome.params, &model, &inputs)?
            .metrics
            .ok_or_else(|| {
                CoreError::Data(format!("split {} is empty or unlabeled", args.split))
            })?;
        let _ = writeln!(
            err,
            "{variant}: best epoch {} of {}, {:.2?}",
            outcome.best_epoch,
            outcome.history.len(),
            started.elapsed()
        );
        csv.push_str(&ablation_row(variant, &metrics));
        csv.push('\n');
    }
    let path = ws.out_dir.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| CoreError::io(&path, e))?;
    out.write_all(csv.as_bytes()).map_err(stdout_error)?;
    Ok(())
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = SynthConfig {
        n: args.n,
        region_dim: args.region_dim,
        regions: args.regions,
        noise: args.noise,
        seed: args.seed,
    };
    let manifest = synth_dataset(&config, &args.out)?;
    writeln!(out, "wrote {}", args.out.join("manifest.jsonl").display()).map_err(stdout_error)?;
    writeln!(out, "{}", manifest.stats()).map_err(stdout_error)?;
    Ok(())
}

fn stats(args: &StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let stats = parse_manifest(&args.manifest)?.stats();
    writeln!(out, "{stats}").map_err(stdout_error)?;
    let reference = stats.matching_reference().unwrap_or("none");
    writeln!(out, "matches reference: {reference}").map_err(stdout_error)?;
    Ok(())
}
