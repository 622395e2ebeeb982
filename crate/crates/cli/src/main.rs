//! `netseg`: batch driver for the phantom → extraction → training →
//! evaluation → statistics workflow.

mod commands;
mod error;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{compose, eval, extract, phantom, stats, train};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "netseg", version, about = "NET extraction and unified 4-label tumor segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for record-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file with defaults for any option; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Resolve and validate the configuration, print it and stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with unified 4-label ground truth.
    Phantom(phantom::PhantomArgs),
    /// Convert a dataset's labels to another schema and count segment voxels.
    Compose(compose::ComposeArgs),
    /// Split the fused NCR label of 2018-style data into NCR and NET.
    Extract(extract::ExtractArgs),
    /// Train a segmentation network and write a checkpoint.
    Train(train::TrainArgs),
    /// Score predictions against ground truth (Dice, IoU, Hausdorff).
    Eval(eval::EvalArgs),
    /// Regional intensity ANOVA/Tukey and NET-volume distribution fits.
    Stats(stats::StatsArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Common {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub format: Format,
}

impl Default for Common {
    fn default() -> Self {
        Self { seed: 0, jobs: 1, out: PathBuf::from("netseg_out"), format: Format::Json }
    }
}

/// Fully resolved configuration of one invocation, as logged and written
/// to `run_config.json`.
#[derive(Debug, Serialize)]
struct RunConfig<'a, P> {
    command: &'a str,
    #[serde(flatten)]
    common: &'a Common,
    #[serde(flatten)]
    params: &'a P,
}

/// Per-subcommand parameters: serde defaults, overridden by flags.
pub trait Params: Serialize + DeserializeOwned + Default {
    type Args;
    const NAME: &'static str;
    fn apply(&mut self, args: &Self::Args) -> Result<(), CliError>;
    fn validate(&self, _common: &Common) -> Result<(), CliError> {
        Ok(())
    }
    fn run(&self, common: &Common) -> Result<(), CliError>;
}

fn object_keys(v: &Value) -> Vec<String> {
    v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

/// Reads `path` (if any) into `(Common, P)`, rejecting unknown top-level keys.
fn load_config<P: Params>(path: Option<&Path>) -> Result<(Common, P), CliError> {
    let Some(path) = path else {
        return Ok((Common::default(), P::default()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::usage(format!("config {} must be a JSON object", path.display())));
    }
    let mut known = object_keys(&serde_json::to_value(Common::default()).expect("serializable"));
    known.extend(object_keys(&serde_json::to_value(P::default()).expect("serializable")));
    if let Some(bad) = object_keys(&value).into_iter().find(|k| !known.contains(k)) {
        return Err(CliError::usage(format!("unknown key {bad:?} in config for `{}`", P::NAME)));
    }
    let bad = |e: serde_json::Error| CliError::usage(format!("config {}: {e}", path.display()));
    Ok((serde_json::from_value(value.clone()).map_err(bad)?, serde_json::from_value(value).map_err(bad)?))
}

fn execute<P: Params>(flags: &CommonArgs, args: &P::Args) -> Result<(), CliError> {
    let (mut common, mut params) = load_config::<P>(flags.config.as_deref())?;
    if let Some(s) = flags.seed {
        common.seed = s;
    }
    if let Some(j) = flags.jobs {
        common.jobs = j;
    }
    if let Some(o) = &flags.out {
        common.out = o.clone();
    }
    if let Some(f) = flags.format {
        common.format = f;
    }
    if common.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    params.apply(args)?;
    params.validate(&common)?;
    let resolved = RunConfig { command: P::NAME, common: &common, params: &params };
    let json = serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n";
    log::info!("resolved configuration:\n{}", json.trim_end());
    if flags.dry_run {
        print!("{json}");
        return Ok(());
    }
    std::fs::create_dir_all(&common.out)?;
    io::write_text(&common.out.join("run_config.json"), &json)?;
    params.run(&common)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // help and version exit 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("NETSEG_LOG")
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let flags = &cli.common;
    let outcome = match &cli.command {
        Command::Phantom(a) => execute::<phantom::PhantomParams>(flags, a),
        Command::Compose(a) => execute::<compose::ComposeParams>(flags, a),
        Command::Extract(a) => execute::<extract::ExtractParams>(flags, a),
        Command::Train(a) => execute::<train::TrainParams>(flags, a),
        Command::Eval(a) => execute::<eval::EvalParams>(flags, a),
        Command::Stats(a) => execute::<stats::StatsParams>(flags, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
