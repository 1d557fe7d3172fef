//! The `dmc` command line: one subcommand per pipeline stage.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "dmc",
    version,
    about = "Build and evaluate adversarial multiple-choice image-caption datasets"
)]
pub struct Cli {
    /// Seed for every random choice of the stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key=value file of default options; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct CorpusArgs {
    /// Captions file (JSON lines of caption_id, image_id, text).
    #[arg(long)]
    pub captions: PathBuf,
    /// Binary image-embedding file.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Words seen fewer times map to <UNK>.
    #[arg(long, default_value_t = dmc_core::corpus::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 4.0)]
    pub clip_norm: f64,
    /// Image-caption pairs per update.
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50_000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    I2c,
    C2i,
    Bilinear,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus with a planted image-caption signal.
    Synth {
        #[arg(long, default_value_t = 500)]
        n_images: usize,
        #[arg(long, default_value_t = 5)]
        captions_per_image: usize,
        #[arg(long, default_value_t = 120)]
        vocab_size: usize,
        #[arg(long, default_value_t = 32)]
        d_img: usize,
        /// Output captions file.
        #[arg(long)]
        captions: PathBuf,
        /// Output embeddings file.
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Build the caption vocabulary.
    Tokenize {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, default_value_t = dmc_core::corpus::DEFAULT_MIN_COUNT)]
        min_count: usize,
        /// Output vocabulary, one token per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train paragraph vectors, optionally grid-searching dim and epochs.
    TrainPv {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.025)]
        lr: f64,
        /// Negative samples per target instead of the full softmax.
        #[arg(long)]
        negative: Option<usize>,
        /// Grid as DIMS:EPOCHS, e.g. 256,512:5,10. Overrides --dim/--epochs.
        #[arg(long)]
        grid: Option<String>,
        /// Grid results CSV (default: <out>.grid.csv).
        #[arg(long)]
        grid_table: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine decoys and write MC-IC instances.
    Gen {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        pv: PathBuf,
        #[arg(long, default_value_t = dmc_core::scoring::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = dmc_core::scoring::DEFAULT_THRESHOLD)]
        threshold_l: f64,
        #[arg(long, default_value_t = dmc_core::simsearch::DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long, default_value_t = dmc_core::scoring::DEFAULT_NR_DECOYS)]
        nr_decoys: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag instances train/dev/test by image.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dev_images: usize,
        #[arg(long)]
        test_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear regression or bilinear baseline on the train split.
    TrainBaseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        pv: PathBuf,
        #[arg(long, default_value_t = dmc_core::baselines::PROJECTION_DIM)]
        projection_dim: usize,
        #[arg(long, default_value_t = dmc_core::baselines::DEFAULT_RIDGE)]
        ridge: f64,
        /// Bilinear learning rate.
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Bilinear epochs.
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Bilinear per-epoch CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the feed-forward pair classifier.
    TrainFfnn {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 64)]
        d_w: usize,
        #[arg(long, default_value_t = 64)]
        h1: usize,
        #[arg(long, default_value_t = 16)]
        h2: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the captioner with a comprehension head.
    TrainVec2seq {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 0.0)]
        lambda_gen: f64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        h1: usize,
        #[arg(long, default_value_t = 16)]
        h2: usize,
        /// Log ROUGE-L and CIDEr of greedy dev captions at each evaluation.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        caption_metrics: bool,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a trained model on one split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// FFNN, V2SQ, LMAP or BLIN file.
        #[arg(long)]
        model: PathBuf,
        /// Paragraph vectors; needed for LMAP and BLIN models.
        #[arg(long)]
        pv: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Comma-separated subset of accuracy,rouge_l,cider.
        #[arg(long, default_value = "accuracy")]
        metrics: String,
        /// Report CSV `metric,split,value`.
        #[arg(long)]
        out: PathBuf,
    },
    /// wmgs-rank for each decoy-score lambda in a grid.
    GridLambda {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        pv: PathBuf,
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        lambdas: String,
        #[arg(long, default_value_t = dmc_core::scoring::DEFAULT_THRESHOLD)]
        threshold_l: f64,
        #[arg(long, default_value_t = dmc_core::simsearch::DEFAULT_TOP_N)]
        top_n: usize,
        /// CSV `param,value,rank`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the human-evaluation HTTP service. Flags override DMC_* variables.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        pool_split: Option<String>,
        #[arg(long)]
        idle_timeout_secs: Option<u64>,
    },
    /// Aggregate a response log into the human-accuracy breakdown.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Tokenize { .. } => "tokenize",
            Command::TrainPv { .. } => "train-pv",
            Command::Gen { .. } => "gen",
            Command::Split { .. } => "split",
            Command::TrainBaseline { .. } => "train-baseline",
            Command::TrainFfnn { .. } => "train-ffnn",
            Command::TrainVec2seq { .. } => "train-vec2seq",
            Command::Eval { .. } => "eval",
            Command::GridLambda { .. } => "grid-lambda",
            Command::Serve { .. } => "serve",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `argv` (program name first), runs the stage and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match config::load_and_merge(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = pool
        .build()
        .map_err(anyhow::Error::from)
        .and_then(|p| p.install(|| commands::execute(&cli)));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
