use std::path::PathBuf;

use amc_core::benchmark::{SplitName, SplitSpec, TrainFraction};
use amc_core::evaluation::GroupBy;
use amc_core::learners::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "amc", version, about = "Few-shot character guessing on screenplays")]
pub struct Cli {
    /// Root for default inputs and outputs.
    #[arg(long, global = true, env = "AMC_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a directory of screenplay files into parsed-movie JSONL.
    Parse(ParseArgs),
    /// Build the benchmark directory from parsed movies.
    Build(BuildArgs),
    /// Write generated screenplays with a planted speaker signal.
    Synth(SynthArgs),
    /// Train a learner.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the dev or test tasks.
    Eval(EvalArgs),
    /// Serve the guessing game over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Directory of screenplay files; the file stem is the movie id.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub parsed: PathBuf,
    /// Defaults to `<data dir>/benchmark`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.6", value_parser = parse_fraction)]
    pub train_frac: TrainFraction,
    /// Movies in the train, dev and test splits.
    #[arg(long, default_value = "807,100,100", value_parser = parse_split)]
    pub split: SplitSpec,
    /// `movie_id<TAB>genre,genre` sidecar.
    #[arg(long)]
    pub genres: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub movies: usize,
    #[arg(long, default_value_t = 25)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0.95)]
    pub marker_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size defaults.
    Standard,
    /// Small CPU runs on generated corpora.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// `key = value` lines overriding the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `<data dir>/benchmark`.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Defaults to `<data dir>/runs/<method>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Proto checkpoint whose encoder initializes LEOPARD.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Also write `epoch-NNN.ckpt` after every epoch.
    #[arg(long)]
    pub save_every_epoch: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split_name)]
    pub split: SplitName,
    #[arg(long, default_value = "speakers", value_parser = parse_group)]
    pub by: GroupBy,
    /// Defaults to `<data dir>/benchmark`.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Report JSON; defaults to `eval-<split>.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-instance predictions as JSONL.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Defaults to `<data dir>/benchmark`.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Comma-separated movie ids to serve; every movie when absent.
    #[arg(long, value_delimiter = ',')]
    pub movies: Vec<String>,
    /// Session logs; defaults to `<data dir>/sessions`.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> Result<TrainFraction, String> {
    s.parse().map_err(|e: amc_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    s.parse().map_err(|e: amc_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: amc_core::Error| e.to_string())
}

fn parse_split_name(s: &str) -> Result<SplitName, String> {
    match s.parse() {
        Ok(SplitName::Train) => Err("evaluate on dev or test".into()),
        other => other.map_err(|e: amc_core::Error| e.to_string()),
    }
}

fn parse_group(s: &str) -> Result<GroupBy, String> {
    s.parse().map_err(|e: amc_core::Error| e.to_string())
}
