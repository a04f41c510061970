mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::EngineConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "alfa",
    version,
    about = "Training-free anomaly detection over precomputed vision-language embeddings"
)]
pub struct Cli {
    /// Flat TOML file with engine defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the vanilla prompt pool for a class.
    Prompts(PromptsArgs),
    /// Filter a prompt pool for one image and report every prompt's score.
    Adapt(AdaptArgs),
    /// Score an image bundle, or every image bundle in a directory.
    Score(ScoreArgs),
    /// Few-shot memory banks.
    Bank {
        #[command(subcommand)]
        action: BankCommand,
    },
    /// Image and pixel metrics over a directory of results.
    Eval(EvalArgs),
    /// Rank prompt texts by similarity to an image.
    Descriptors(DescriptorsArgs),
    /// Write a synthetic fixture of image and prompt bundles.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long)]
    pub class: String,
    /// Template grammar JSON.
    #[arg(long, value_name = "FILE")]
    pub grammar: Option<PathBuf>,
    /// JSON map from class names to descriptive names.
    #[arg(long, value_name = "FILE")]
    pub aliases: Option<PathBuf>,
    /// LLM descriptions requested per polarity.
    #[arg(long, value_name = "N")]
    pub llm_count: Option<usize>,
    #[arg(long, value_name = "URL")]
    pub llm_endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub llm_cache: Option<PathBuf>,
    #[arg(long, value_name = "MS")]
    pub llm_delay_ms: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct RtpFlags {
    /// Logistic slope of the contextual score.
    #[arg(long)]
    pub k: Option<f64>,
    /// Keep threshold on the contextual score.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long, value_name = "FILE")]
    pub image_bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub prompt_bundle: PathBuf,
    #[command(flatten)]
    pub rtp: RtpFlags,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Image bundle, or a directory of them.
    #[arg(long, value_name = "PATH")]
    pub image_bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub prompt_bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_delimiter = ',', value_name = "S,..")]
    pub scales: Option<Vec<usize>>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub memory_weight: Option<f64>,
    #[command(flatten)]
    pub rtp: RtpFlags,
    /// Use the whole vanilla pool for every image.
    #[arg(long)]
    pub no_rtp: bool,
    /// Result JSON, or the output directory in directory mode.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Map bundle (single-image mode; directory mode writes `<name>.map.alfb`).
    #[arg(long, value_name = "FILE")]
    pub map_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Build a bank from a directory of normal reference bundles.
    Build(BankBuildArgs),
}

#[derive(Debug, Args)]
pub struct BankBuildArgs {
    #[arg(long, value_name = "DIR")]
    pub bundles: PathBuf,
    #[arg(long, value_delimiter = ',', value_name = "S,..")]
    pub scales: Option<Vec<usize>>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of result JSONs and their map bundles.
    #[arg(long, value_name = "DIR")]
    pub results: PathBuf,
    #[arg(long)]
    pub pro_fpr: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolarityFilter {
    All,
    Normal,
    Abnormal,
}

#[derive(Debug, Args)]
pub struct DescriptorsArgs {
    #[arg(long, value_name = "FILE")]
    pub image_bundle: PathBuf,
    /// Text bundle whose prompts serve as descriptors.
    #[arg(long, value_name = "FILE")]
    pub prompt_bundle: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = PolarityFilter::All)]
    pub polarity: PolarityFilter,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Two separated cones.
    Separated,
    /// Weak defects and ambiguous abnormal prompts inside the normal cone.
    Ambiguous,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Separated)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// 0 puts both cones on one axis, 1 makes them orthogonal.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long, value_name = "N")]
    pub normal: Option<usize>,
    #[arg(long, value_name = "N")]
    pub abnormal: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Prompts(a) => commands::prompts(&config, a),
        Command::Adapt(a) => commands::adapt(&config, a),
        Command::Score(a) => commands::score(&config, a),
        Command::Bank {
            action: BankCommand::Build(a),
        } => commands::bank_build(&config, a),
        Command::Eval(a) => commands::eval(&config, a),
        Command::Descriptors(a) => commands::descriptors(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let message = e.render().to_string();
            let line = serde_json::json!({"error": "usage", "message": message.trim_end()});
            eprintln!("{line}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
