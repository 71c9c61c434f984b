mod config;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ldcrf::ctc::best_path_decode;
use ldcrf::gradcheck::{self, GradCheckConfig, Objective};
use ldcrf::seqdata::{self, make_folds, Dataset, GeneratorConfig};
use ldcrf::trainer::{self, BlankPolicy};
use ldcrf::Model;

use config::{GradModeArg, TrainArgs};
use output::{coded, create_dir, exit_code, write_atomic, write_json, EXIT_GRADCHECK};

const FORMATS: &str = "\
FILE FORMATS
  Dataset (JSON Lines). The first line is a header, every further line one
  sequence:
    {\"labels\": [\"c0\", \"c1\"], \"dim\": 4, \"meta\": {\"segments.seq-0\": \"0,23,47\"}}
    {\"id\": \"seq-0\", \"frames\": [[0.1, 0.2, 0.3, 0.4], ...],
     \"frame_labels\": [0, 0, 1, ...], \"label_seq\": [0, 1]}
  Labels are indices into the header's list; the blank label is implicit and
  never appears in data. frame_labels and label_seq are each optional, but
  unsegmented training needs label_seq, frame-wise training and evaluation
  need frame_labels, and pretrain-finetune needs the segment boundaries in
  meta (key \"segments.<id>\": comma-separated segment start frames).

  Checkpoint (JSON): {\"labels\", \"hidden_per_label\", \"window\", \"dim\",
  \"bias\", \"theta\"} where theta is the row-major state-weight matrix
  (states x observation dim) followed by the transition matrix.

  Training config (JSON object, every field optional, unknown keys rejected):
    mode (unsegmented | frame_wise | pretrain_finetune), grad_mode (exact |
    local_eq8), learning_rate, lr_decay, momentum, epochs, pretrain_epochs,
    batch_size, l2, seed, window, hidden_per_label, bias,
    validation_fraction, patience, record_timing.
  Precedence: defaults < --config file < --set KEY=VALUE < typed flags.

EXIT CODES
  0 success, 1 other failure, 2 configuration or usage error, 3 I/O error,
  4 invalid or incompatible data, 5 training diverged, 6 gradient check
  above tolerance.";

#[derive(Parser)]
#[command(name = "ldcrf", version, about = "Latent-dynamic CRFs with a CTC objective", after_long_help = FORMATS)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic continuous-gesture dataset.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and report.
    Train(TrainCmd),
    /// Score a checkpoint on frame-labelled data.
    Eval(EvalArgs),
    /// Write per-frame labels and decoded label sequences.
    Decode(DecodeArgs),
    /// K-fold cross-validation with per-fold and aggregate reports.
    Kfold(KfoldArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once("..") {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi.trim_start_matches('='))?)),
        None => parse(s).map(|v| (v, v)),
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 182)]
    sequences: usize,
    /// Segments per sequence, inclusive range LO..HI.
    #[arg(long, value_parser = parse_range, default_value = "3..5")]
    segments: (usize, usize),
    /// Frames per segment, inclusive range LO..HI.
    #[arg(long, value_parser = parse_range, default_value = "18..28")]
    segment_len: (usize, usize),
    /// Standard deviation of the frame noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long, short)]
    out: PathBuf,
    /// Report output path (default: checkpoint path with .report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Frame-labelled data to evaluate the trained model on.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Align)]
    blank_policy: PolicyArg,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Segment frames between the decoded labels using the marginals.
    Align,
    /// Blank frames take the preceding non-blank prediction.
    Preceding,
    /// Argmax over the non-blank labels.
    Exclude,
    /// Blank predictions count as errors.
    Keep,
}

impl From<PolicyArg> for BlankPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Align => BlankPolicy::Align,
            PolicyArg::Preceding => BlankPolicy::Preceding,
            PolicyArg::Exclude => BlankPolicy::Exclude,
            PolicyArg::Keep => BlankPolicy::Keep,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Align)]
    blank_policy: PolicyArg,
    /// Group the metrics by a K-fold plan over the dataset.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    /// Metrics report output path (JSON, includes ROC points for two
    /// classes).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Align)]
    blank_policy: PolicyArg,
    /// Output path (JSON Lines: id, frame_labels, label_seq as label
    /// names); standard output when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Five folds.
    K5,
    /// Two folds.
    K2,
}

#[derive(Args)]
struct KfoldArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of folds.
    #[arg(long, short, default_value_t = 5, conflicts_with = "preset")]
    k: usize,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Align)]
    blank_policy: PolicyArg,
    /// Directory receiving fold-<i>.model.json, fold-<i>.report.json and
    /// aggregate.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Composite,
    FrameWise,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Composite)]
    objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = GradModeArg::Exact)]
    grad_mode: GradModeArg,
    #[arg(long, default_value_t = 0.01)]
    l2: f64,
    /// Per-trial report output path.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load(path: &Path) -> Result<Dataset> {
    seqdata::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_json(path, &model.to_checkpoint())
}

fn gen(args: GenArgs) -> Result<()> {
    let config = GeneratorConfig {
        classes: args.classes,
        dim: args.dim,
        segment_len: args.segment_len,
        segments: args.segments,
        noise: args.noise,
        sequences: args.sequences,
    };
    let dataset = seqdata::generate_synthetic(config, args.seed)?;
    let mut bytes = Vec::new();
    seqdata::write_dataset(&dataset, &mut bytes)?;
    write_atomic(&args.out, &bytes)?;
    log::info!("wrote {} sequences to {}", dataset.len(), args.out.display());
    Ok(())
}

fn train(args: TrainCmd) -> Result<()> {
    let config = args.train.resolve()?;
    let dataset = load(&args.data)?;
    let eval_set = args.eval_data.as_deref().map(load).transpose()?;
    let started = Instant::now();
    let outcome = trainer::train(&dataset, &config)?;
    if config.record_timing {
        eprintln!("training took {:.2}s", started.elapsed().as_secs_f64());
    }
    let mut report = outcome.report;
    report.checkpoint = Some(args.out.display().to_string());
    if let Some(set) = &eval_set {
        let eval = trainer::evaluate(set, &outcome.model, None, args.blank_policy.into())?;
        println!("held-out frame accuracy: {:.2}%", eval.pooled_accuracy);
        report.evaluation = Some(eval);
    }
    if let Some(last) = report.epochs.last() {
        println!("final loss: {:.6}", last.loss);
    }
    save_model(&outcome.model, &args.out)?;
    let report_path = args.report.unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&report_path, &report)
}

fn eval(args: EvalArgs) -> Result<()> {
    let dataset = load(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    let plan = args.folds.map(|k| make_folds(&dataset, k, args.fold_seed)).transpose()?;
    let report = trainer::evaluate(&dataset, &model, plan.as_ref(), args.blank_policy.into())?;
    for fold in &report.folds {
        println!("fold {}: {:.2}% over {} frames", fold.fold, fold.accuracy, fold.frames);
    }
    println!("mean accuracy: {:.2}%", report.mean_accuracy);
    if let Some(roc) = &report.roc {
        println!("auc: {:.6}", roc.auc);
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Decoded<'a> {
    id: &'a str,
    frame_labels: Vec<&'a str>,
    label_seq: Vec<&'a str>,
}

fn decode(args: DecodeArgs) -> Result<()> {
    let dataset = load(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    if model.features.input_dim != dataset.dim() {
        return Err(ldcrf::Error::DimensionMismatch {
            expected: model.features.input_dim,
            found: dataset.dim(),
        }
        .into());
    }
    let names = &model.labels;
    let blank = names.blank_id();
    let mut out = Vec::new();
    for seq in &dataset.sequences {
        let frames = trainer::predict_frames(&model, seq, args.blank_policy.into())?;
        let q = model.label_marginals(seq)?;
        let record = Decoded {
            id: &seq.id,
            frame_labels: frames.iter().map(|&a| names.name(a)).collect(),
            label_seq: best_path_decode(q.view(), blank).iter().map(|&a| names.name(a)).collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    match &args.out {
        Some(path) => write_atomic(path, &out),
        None => {
            std::io::stdout().write_all(&out).context("writing to stdout")?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Aggregate {
    k: usize,
    fold_seed: u64,
    fold_accuracies: Vec<f64>,
    mean_accuracy: f64,
}

fn kfold(args: KfoldArgs) -> Result<()> {
    let config = args.train.resolve()?;
    let k = match args.preset {
        Some(Preset::K5) => 5,
        Some(Preset::K2) => 2,
        None => args.k,
    };
    let dataset = load(&args.data)?;
    let started = Instant::now();
    let (report, models) = trainer::kfold(&dataset, &config, k, args.fold_seed, args.blank_policy.into())?;
    if config.record_timing {
        eprintln!("k-fold took {:.2}s", started.elapsed().as_secs_f64());
    }
    create_dir(&args.out_dir)?;
    for (fold, model) in report.folds.iter().zip(&models) {
        let model_path = args.out_dir.join(format!("fold-{}.model.json", fold.fold));
        save_model(model, &model_path)?;
        let mut fold = fold.clone();
        fold.train.checkpoint = Some(model_path.display().to_string());
        write_json(&args.out_dir.join(format!("fold-{}.report.json", fold.fold)), &fold)?;
        println!("fold {}: {:.2}%", fold.fold, fold.accuracy);
    }
    let aggregate = Aggregate {
        k: report.k,
        fold_seed: report.fold_seed,
        fold_accuracies: report.folds.iter().map(|f| f.accuracy).collect(),
        mean_accuracy: report.mean_accuracy,
    };
    println!("mean accuracy: {:.2}%", aggregate.mean_accuracy);
    write_json(&args.out_dir.join("aggregate.json"), &aggregate)
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = GradCheckConfig {
        trials: args.trials,
        seed: args.seed,
        step: args.step,
        objective: match args.objective {
            ObjectiveArg::Composite => Objective::Composite(args.grad_mode.into()),
            ObjectiveArg::FrameWise => Objective::FrameWise,
        },
        l2: args.l2,
    };
    let report = gradcheck::run(&config)?;
    println!("max relative error: {:.3e} over {} trials", report.max_relative_error, report.trials.len());
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    if !report.passes(args.tolerance) {
        return Err(coded(
            EXIT_GRADCHECK,
            format!("max relative error {:.3e} is not below {:.1e}", report.max_relative_error, args.tolerance),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::Kfold(a) => kfold(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
