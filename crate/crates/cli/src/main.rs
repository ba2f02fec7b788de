//! `sentiment`: train, evaluate, cross-validate, gradient-check, inspect
//! trees and benchmark the sentiment models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{
    DatasetFormat, EmbeddingSource, ModelFamily, RunConfig, ValidationError, OUTPUT_DIR_ENV,
};
use sentiment_core::dualchannel::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "sentiment",
    version,
    about = "Sentiment classification with recursive autoencoders and CNN-BiSRU fusion"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the training split and write checkpoint, metrics and summary.
    Train,
    /// Accuracy and per-class precision/recall of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// k-fold cross-validation.
    Cv,
    /// Accuracy for each embedding dimension.
    SweepDim {
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,300")]
        dims: Vec<usize>,
    },
    /// Finite-difference check of the configured model's gradient.
    Gradcheck,
    /// Print the greedy RAE tree of a sentence.
    Tree {
        sentence: String,
        /// RAE checkpoint; a freshly initialized model is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-epoch training time of each fusion variant.
    Bench,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Corpus file or stem (`.pos`/`.neg`, `.train.tsv`, ...).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<DatasetFormat>,
    /// Use a seeded random subset of this many examples.
    #[arg(long, global = true)]
    sample: Option<usize>,
    #[arg(long, global = true, value_enum)]
    model: Option<ModelFamily>,
    /// full, cnn, bisru or bilstm.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_enum)]
    embeddings: Option<EmbeddingSource>,
    /// GloVe file; `{dim}` expands to the embedding dimension.
    #[arg(long, global = true)]
    glove: Option<String>,
    /// Embedding dimension (50, 100, 200 or 300).
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Fusion training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// RAE reconstruction/classification mix.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// RAE L2 weight.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// RAE L-BFGS iteration cap.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Train cross-validation folds concurrently.
    #[arg(long, global = true)]
    parallel_folds: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides $SENTIMENT_OUTPUT_DIR).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v.into(); })*
            };
        }
        set! {
            format => dataset.format;
            model => model;
            variant => variant;
            embeddings => embeddings.source;
            dim => embeddings.dim;
            epochs => fusion.epochs;
            batch => fusion.batch;
            lr => fusion.lr;
            theta => rae.theta;
            mu => rae.mu;
            max_iter => rae.lbfgs.max_iter;
            folds => folds;
            seed => seed;
            output_dir => output_dir;
        }
        if let Some(p) = self.dataset {
            c.dataset.path = Some(p);
        }
        if let Some(n) = self.sample {
            c.dataset.sample = Some(n);
        }
        if let Some(g) = self.glove {
            c.embeddings.glove_path = Some(g);
        }
        if self.parallel_folds {
            c.parallel_folds = true;
        }
    }
}

/// Defaults, then the file, then the environment, then flags.
fn resolve(cli_config: Option<&PathBuf>, overrides: Overrides) -> anyhow::Result<RunConfig> {
    let mut config = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        config.output_dir = dir.into();
    }
    overrides.apply(&mut config);
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve(cli.config.as_ref(), cli.overrides)?;
    config.validate()?;
    match cli.command {
        Command::Train => commands::train(&config).map(drop),
        Command::Eval { checkpoint } => commands::eval(&config, &checkpoint).map(drop),
        Command::Cv => commands::cv(&config).map(drop),
        Command::SweepDim { dims } => commands::sweep_dim(&config, &dims).map(drop),
        Command::Gradcheck => commands::gradcheck(&config).map(drop),
        Command::Tree {
            sentence,
            checkpoint,
        } => commands::tree(&config, &sentence, checkpoint.as_deref()).map(drop),
        Command::Bench => commands::bench(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ValidationError>() => {
            eprint!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
