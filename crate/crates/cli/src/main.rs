mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Self-supervised EEG pretraining workflows.
#[derive(Parser, Debug)]
#[command(name = "eegx", version, about)]
pub struct Cli {
    /// Seed for every random choice; overrides any seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Electrode atlas CSV (name,u,v); the bundled atlas when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub atlas: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate the atlas and report location-embedding similarity.
    Atlas(AtlasArgs),
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Tokenize one recording and print token statistics.
    Tokenize(TokenizeArgs),
    /// Compare direct and dictionary MSE on the three reference reconstructions.
    DictDemo(DictDemoArgs),
    /// Pretrain a model from a config file.
    Pretrain(PretrainArgs),
    /// Write frozen representations of a dataset.
    Embed(EmbedArgs),
    /// Fit a linear probe on frozen representations and report metrics.
    Probe(ProbeArgs),
    /// Pretrain and probe a grid of model variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct AtlasArgs {
    /// Embedding width used for the similarity matrix.
    #[arg(long, default_value_t = 256)]
    pub d_e: usize,
    /// Write positions and scaled coordinates as CSV.
    #[arg(long, value_name = "FILE")]
    pub positions_out: Option<PathBuf>,
    /// Write the full embedding dot-product matrix as CSV.
    #[arg(long, value_name = "FILE")]
    pub similarity_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Montage {
    #[value(name = "8")]
    M8,
    #[value(name = "14")]
    M14,
    #[value(name = "19")]
    M19,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of recordings.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Built-in montage; ignored when --spec sets one.
    #[arg(long, value_enum, default_value = "8")]
    pub montage: Montage,
    /// Generator spec as TOML; missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Recording duration in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Omit blinks, line noise and muscle artifacts.
    #[arg(long)]
    pub no_artifacts: bool,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    /// Recording in the binary signal format.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Take the spectral embedding from this checkpoint instead of a random init.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    #[arg(long, default_value_t = 16)]
    pub d_e: usize,
}

#[derive(Args, Debug)]
pub struct DictDemoArgs {
    /// Signal and dictionary settings as TOML; missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for report.csv, verdicts.csv and signals.csv; stdout only when omitted.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Training config as TOML; missing fields take defaults.
    #[arg(long, env = "EEGX_CONFIG", value_name = "FILE")]
    pub config: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Directory for checkpoints and loss CSVs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate the config, build the model, run one step and stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct ModelSource {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE", conflicts_with = "untrained")]
    pub checkpoint: Option<PathBuf>,
    /// Use a freshly initialized model (shaped by --config when given).
    #[arg(long)]
    pub untrained: bool,
    /// Training config whose model section shapes an untrained model.
    #[arg(long, value_name = "FILE", requires = "untrained")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output CSV: index,label,e0,e1,...
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Fraction of each class used to fit the probe.
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Also write the metrics CSV here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Base training config as TOML.
    #[arg(long, env = "EEGX_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset used for pretraining.
    #[arg(long, value_name = "DIR")]
    pub pretrain_data: PathBuf,
    /// Labeled dataset used for probing.
    #[arg(long, value_name = "DIR")]
    pub probe_data: PathBuf,
    /// Channel embeddings to try (none, learned, location).
    #[arg(long, value_delimiter = ',', default_value = "none,learned,location")]
    pub channel_embedding: Vec<String>,
    /// Reconstruction losses to try (dict, direct).
    #[arg(long, value_delimiter = ',', default_value = "dict,direct")]
    pub loss: Vec<String>,
    /// Denoisers to try (identity, spectral, oracle).
    #[arg(long, value_delimiter = ',', default_value = "identity,spectral,oracle")]
    pub denoiser: Vec<String>,
    /// Seeds per variant, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Output CSV with one row per run.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
