//! Command-line front end: train one threshold variant or the whole ablation
//! suite, generate synthetic corpora, and evaluate saved models.
//!
//! Every failure path prints exactly one `error: ...` line on stderr and
//! exits nonzero, so scripts can pattern-match on outcomes.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use threshmix::{
    emit_artifacts, eval_checkpoint, generate_synthetic, load_dataset, run_ablation_suite,
    run_variant, save_dataset, train_eval_split, Checkpoint, LabelMatrix, OptimizerKind,
    SparseFeatureMatrix, SyntheticSpec, TrainConfig, Variant, VariantRun,
};

#[derive(Parser)]
#[command(
    name = "threshmix",
    version,
    about = "Multi-label training with learned per-label, per-instance decision thresholds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write its artifacts and checkpoint
    Train(TrainArgs),
    /// Train all four variants on the same data and seeds, then write the
    /// comparison artifacts
    Ablate(TrainArgs),
    /// Generate a synthetic long-tailed corpus as a feature/label file pair
    Generate(GenerateArgs),
    /// Evaluate a saved model checkpoint on a labeled dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Sparse feature file (`N D L` header, one `idx:value` row per sample)
    #[arg(long)]
    features: PathBuf,
    /// Label file (one comma-separated label-id list per sample)
    #[arg(long)]
    labels: PathBuf,
    /// Held-out feature file; when absent, --eval-fraction splits the input
    #[arg(long, requires = "eval_labels")]
    eval_features: Option<PathBuf>,
    /// Held-out label file (paired with --eval-features)
    #[arg(long, requires = "eval_features")]
    eval_labels: Option<PathBuf>,
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// adaptive | idf_only | knn_only | static
    #[arg(long)]
    variant: Option<String>,
    /// Maximum training epochs
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Hinge margin width
    #[arg(long)]
    margin: Option<f64>,
    /// Weight of the margin term in the composite loss
    #[arg(long)]
    margin_weight: Option<f64>,
    /// BCE weight on positive cells
    #[arg(long)]
    pos_weight: Option<f64>,
    /// Standardize logits per batch (`--standardize` or `--standardize false`)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs without eval macro-F1 improvement before stopping early
    #[arg(long)]
    patience: Option<usize>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    /// Shared numerical-stability constant
    #[arg(long)]
    epsilon: Option<f64>,
    /// Neighbors consulted by the evaluation-time local signal
    #[arg(long)]
    knn_k: Option<usize>,
    /// Training rows subsampled as the local-signal reference set
    #[arg(long)]
    knn_ref_size: Option<usize>,
    /// Evaluate every Nth epoch (the final epoch is always evaluated)
    #[arg(long)]
    eval_stride: Option<usize>,
    /// Fraction of rows held out when no eval files are given
    #[arg(long)]
    eval_fraction: Option<f64>,
    /// Output directory for artifacts and checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
}

/// TOML mirror of the training flags; any subset of keys may be present.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    variant: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    hidden_dim: Option<usize>,
    margin: Option<f64>,
    margin_weight: Option<f64>,
    pos_weight: Option<f64>,
    standardize: Option<bool>,
    seed: Option<u64>,
    patience: Option<usize>,
    optimizer: Option<String>,
    epsilon: Option<f64>,
    knn_k: Option<usize>,
    knn_ref_size: Option<usize>,
    eval_stride: Option<usize>,
    eval_fraction: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of samples
    #[arg(long, default_value_t = SyntheticSpec::default().n_samples)]
    samples: usize,
    /// Size of the label space
    #[arg(long, default_value_t = SyntheticSpec::default().n_labels)]
    labels: usize,
    /// Size of the feature space
    #[arg(long, default_value_t = SyntheticSpec::default().n_features)]
    features: usize,
    /// Zipf exponent of the label rank-frequency profile
    #[arg(long, default_value_t = SyntheticSpec::default().zipf_exponent)]
    zipf: f64,
    /// Mean labels per sample
    #[arg(long, default_value_t = SyntheticSpec::default().mean_labels_per_sample)]
    mean_labels: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    /// Directory for features.txt and labels.txt
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (model.json from a training run)
    #[arg(long)]
    model: PathBuf,
    /// Sparse feature file to evaluate on
    #[arg(long)]
    features: PathBuf,
    /// Label file to evaluate against
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Clap's rendered message already starts with "error: ".
            let message = one_line(&e);
            eprintln!("error: {}", message.strip_prefix("error: ").unwrap_or(&message));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

/// Collapse a (potentially multi-line) message into one line.
fn one_line(err: &impl Display) -> String {
    err.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train(args) => cmd_train(args, false),
        Command::Ablate(args) => cmd_train(args, true),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn fail(err: impl Display) -> String {
    one_line(&err)
}

/// Defaults, then config-file values, then explicit flags.
fn resolve_config(args: &TrainArgs) -> Result<(TrainConfig, f64, PathBuf), String> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| format!("{}: {}", path.display(), one_line(&e)))?
        }
        None => FileConfig::default(),
    };

    let mut config = TrainConfig::default();
    let mut eval_fraction = 0.2;
    let mut out = PathBuf::from("out");

    // Config-file layer.
    if let Some(v) = &file.variant {
        config.variant = v.parse::<Variant>().map_err(fail)?;
    }
    if let Some(v) = file.epochs {
        config.max_epochs = v;
    }
    if let Some(v) = file.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = file.lr {
        config.learning_rate = v;
    }
    if let Some(v) = file.hidden_dim {
        config.hidden_dim = v;
    }
    if let Some(v) = file.margin {
        config.loss.margin = v;
    }
    if let Some(v) = file.margin_weight {
        config.loss.margin_weight = v;
    }
    if let Some(v) = file.pos_weight {
        config.loss.pos_weight = v;
    }
    if let Some(v) = file.standardize {
        config.loss.use_standardization = v;
    }
    if let Some(v) = file.seed {
        config.seed = v;
    }
    if let Some(v) = file.patience {
        config.early_stop_patience = v;
    }
    if let Some(v) = &file.optimizer {
        config.optimizer = parse_optimizer(v)?;
    }
    if let Some(v) = file.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = file.knn_k {
        config.knn_k = v;
    }
    if let Some(v) = file.knn_ref_size {
        config.knn_ref_size = v;
    }
    if let Some(v) = file.eval_stride {
        config.eval_stride = v;
    }
    if let Some(v) = file.eval_fraction {
        eval_fraction = v;
    }
    if let Some(v) = file.out {
        out = v;
    }

    // Flag layer.
    if let Some(v) = &args.variant {
        config.variant = v.parse::<Variant>().map_err(fail)?;
    }
    if let Some(v) = args.epochs {
        config.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.hidden_dim {
        config.hidden_dim = v;
    }
    if let Some(v) = args.margin {
        config.loss.margin = v;
    }
    if let Some(v) = args.margin_weight {
        config.loss.margin_weight = v;
    }
    if let Some(v) = args.pos_weight {
        config.loss.pos_weight = v;
    }
    if let Some(v) = args.standardize {
        config.loss.use_standardization = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.patience {
        config.early_stop_patience = v;
    }
    if let Some(v) = &args.optimizer {
        config.optimizer = parse_optimizer(v)?;
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = args.knn_k {
        config.knn_k = v;
    }
    if let Some(v) = args.knn_ref_size {
        config.knn_ref_size = v;
    }
    if let Some(v) = args.eval_stride {
        config.eval_stride = v;
    }
    if let Some(v) = args.eval_fraction {
        eval_fraction = v;
    }
    if let Some(v) = &args.out {
        out = v.clone();
    }

    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err("eval_fraction must be in (0, 1)".into());
    }
    config.validate().map_err(fail)?;
    Ok((config, eval_fraction, out))
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind, String> {
    match name.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
    }
}

type Pair = (SparseFeatureMatrix, LabelMatrix);

fn load_pairs(args: &TrainArgs, eval_fraction: f64, seed: u64) -> Result<(Pair, Pair), String> {
    let full = load_dataset(&args.features, &args.labels).map_err(fail)?;
    match (&args.eval_features, &args.eval_labels) {
        (Some(ef), Some(el)) => {
            let eval = load_dataset(ef, el).map_err(fail)?;
            Ok((full, eval))
        }
        _ => train_eval_split(&full.0, &full.1, eval_fraction, seed).map_err(fail),
    }
}

fn summary_line(run: &VariantRun) -> String {
    let f = &run.final_record;
    let epochs_run = run.history.last().map(|r| r.epoch).unwrap_or(0);
    format!(
        "variant={} best_epoch={} epochs_run={} macro_f1={:.6} micro_f1={:.6} bce={:.6} positive_ratio={:.6}",
        run.variant, run.best_epoch, epochs_run, f.eval_macro_f1, f.eval_micro_f1, f.eval_bce,
        f.eval_positive_ratio
    )
}

fn save_run_checkpoints(run: &VariantRun, out: &Path, suffixed: bool) -> Result<(), String> {
    let (model_name, thresholds_name) = if suffixed {
        (
            format!("model.{}.json", run.variant),
            format!("thresholds.{}.txt", run.variant),
        )
    } else {
        ("model.json".to_string(), "thresholds.txt".to_string())
    };
    run.checkpoint.save(out.join(model_name)).map_err(fail)?;
    run.checkpoint
        .thresholds
        .save(out.join(thresholds_name))
        .map_err(fail)?;
    Ok(())
}

fn cmd_train(args: TrainArgs, all_variants: bool) -> Result<(), String> {
    let (config, eval_fraction, out) = resolve_config(&args)?;
    let ((tf, tl), (ef, el)) = load_pairs(&args, eval_fraction, config.seed)?;

    let runs: Vec<VariantRun> = if all_variants {
        run_ablation_suite(&config, &tf, &tl, &ef, &el).map_err(fail)?
    } else {
        vec![run_variant(config, tf, tl, ef, el).map_err(fail)?]
    };

    let paths = emit_artifacts(&runs, &out).map_err(fail)?;
    for run in &runs {
        save_run_checkpoints(run, &out, all_variants)?;
        println!("{}", summary_line(run));
    }
    for path in paths {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), String> {
    let spec = SyntheticSpec {
        n_samples: args.samples,
        n_labels: args.labels,
        n_features: args.features,
        zipf_exponent: args.zipf,
        mean_labels_per_sample: args.mean_labels,
        seed: args.seed,
    };
    let (features, labels) = generate_synthetic(&spec).map_err(fail)?;
    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let fpath = args.out.join("features.txt");
    let lpath = args.out.join("labels.txt");
    save_dataset(&features, &labels, &fpath, &lpath).map_err(fail)?;
    println!(
        "generated samples={} features={} labels={} positives={}",
        features.n_samples(),
        features.n_features(),
        labels.n_labels(),
        labels.total_positives()
    );
    println!("wrote {}", fpath.display());
    println!("wrote {}", lpath.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), String> {
    let checkpoint = Checkpoint::load(&args.model).map_err(fail)?;
    let (features, labels) = load_dataset(&args.features, &args.labels).map_err(fail)?;
    let report = eval_checkpoint(&checkpoint, &features, &labels, args.batch_size).map_err(fail)?;
    println!(
        "variant={} n_samples={} macro_f1={:.6} micro_f1={:.6} bce={:.6} positive_ratio={:.6} zero_norm_rows={}",
        report.variant,
        report.n_samples,
        report.macro_f1,
        report.micro_f1,
        report.bce,
        report.positive_ratio,
        report.zero_norm_rows
    );
    Ok(())
}
