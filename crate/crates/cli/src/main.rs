//! `pestvl`: every pipeline stage behind one command.

mod commands;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::error::CliError;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  configuration error (unknown key, invalid value, missing setting)
  4  data error (unreadable or malformed input files)
  5  runtime error (divergence, endpoint failure, failed self-test)

Environment:
  MLLM_API_URL   captioning endpoint (chat-completions style), for caption-gen
  MLLM_API_KEY   bearer token for that endpoint (also used by --encoder remote)
  RUST_LOG       log filter; overrides -v";

/// Saliency-guided RWKV pest classifier with caption fusion.
#[derive(Parser, Debug)]
#[command(name = "pestvl", version, after_help = AFTER_HELP)]
pub struct Cli {
    /// TOML config file. Defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Set a config value by dotted path, e.g. optimizer.epochs=1. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Spectral-residual saliency map of an image as a grayscale PNG.
    Saliency(SaliencyArgs),
    /// PNG overlay of the coarse/fine windows and the selected quadrant.
    PartitionViz(PartitionArgs),
    /// Caption images through the MLLM endpoint into a JSON Lines store.
    CaptionGen(CaptionArgs),
    /// Embed the captions of a JSON Lines store into a PVLE file.
    EncodeText(EncodeArgs),
    /// Stratified train/val/test manifest of a class-per-directory tree.
    Split(SplitArgs),
    /// Train and write checkpoint.pvlc, metrics.csv and config.toml.
    Train(TrainArgs),
    /// Metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Heat-map PNGs of backbone stage outputs.
    ExportFeatures(ExportArgs),
    /// Run the embedded oracle suites.
    SelfTest(SelfTestArgs),
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
    /// Also write the unquantized map as a tensor dump.
    #[arg(long, value_name = "FILE")]
    pub raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
    /// Output pixels per model pixel.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    /// Expert knowledge entries (TOML, one [[species]] per class).
    #[arg(long, value_name = "TOML")]
    pub knowledge: PathBuf,
    /// Chain-of-thought template (TOML).
    #[arg(long, value_name = "TOML")]
    pub template: PathBuf,
    #[arg(long, value_name = "JSONL")]
    pub out: PathBuf,
    /// per-image or per-class; defaults to data.captions.
    #[arg(long)]
    pub mode: Option<String>,
    /// Requests in flight at once.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value = "gpt-4o")]
    pub model_id: String,
    #[arg(long, default_value_t = 4)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Add to an existing store instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long, value_name = "JSONL")]
    pub captions: PathBuf,
    #[arg(long, value_name = "PVLE")]
    pub out: PathBuf,
    /// mock or remote.
    #[arg(long, default_value = "mock")]
    pub encoder: String,
    /// Seed of the mock encoder.
    #[arg(long, default_value_t = dataset::MOCK_SEED)]
    pub seed: u64,
    /// Embeddings endpoint for --encoder remote.
    #[arg(long)]
    pub encoder_url: Option<String>,
    #[arg(long, default_value = "text-embedding")]
    pub encoder_model: String,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Dataset root; defaults to data.root.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Train on N procedurally textured images per class instead of data.*.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Continue from a checkpoint; its config wins over --config.
    #[arg(long, value_name = "PVLC")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PVLC")]
    pub checkpoint: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long, value_name = "PVLC")]
    pub checkpoint: PathBuf,
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    /// Comma-separated stage indices; all stages when omitted.
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelfTestArgs {
    /// Perturb one suite to check that failures are reported.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub const SCHEMA_VERSION: u32 = 1;

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Saliency(_) => "saliency",
        Command::PartitionViz(_) => "partition-viz",
        Command::CaptionGen(_) => "caption-gen",
        Command::EncodeText(_) => "encode-text",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::ExportFeatures(_) => "export-features",
        Command::SelfTest(_) => "self-test",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let name = command_name(&cli.command);
    match commands::run(&cli) {
        Ok(out) => {
            if cli.json {
                let v = serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": name,
                    "ok": out.ok,
                    "result": out.result,
                });
                println!("{v}");
            } else {
                println!("{}", out.text);
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(error::RUNTIME as u8)
            }
        }
        Err(e) => report(&cli, name, e),
    }
}

fn report(cli: &Cli, name: &str, e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    if cli.json {
        let v = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": name,
            "ok": false,
            "error": { "code": e.code, "category": e.category(), "message": e.message },
        });
        println!("{v}");
    }
    ExitCode::from(e.code as u8)
}
