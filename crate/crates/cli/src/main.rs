//! `cpc`: run comparative preference classification over a dataset against a
//! chat backend, inspect prompts, project costs and compare runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cpc_core::backend::BackendKind;
use cpc_core::corpus::DatasetFormat;
use cpc_core::eval::{ReportFormat, UnparsablePolicy};
use cpc_core::pipeline::Fallback;
use cpc_core::prompting::PromptStyle;

use commands::{config_error, CliError, CmdResult, ReportArgs};
use config::{Overrides, RunConfig, ShotMode};

#[derive(Parser)]
#[command(
    name = "cpc",
    version,
    about = "Comparative preference classification with chat models"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
/// API keys are only ever read from the environment variable named by
/// `--api-key-env`.
#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration (a previous run's manifest works too).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// delimited-table or record-lines; guessed from the extension by default.
    #[arg(long, global = true)]
    dataset_format: Option<DatasetFormat>,
    /// Dataset tag, e.g. college_confidential or compsent19. Defaults to the file stem.
    #[arg(long, global = true)]
    tag: Option<String>,
    #[arg(long, global = true)]
    style: Option<PromptStyle>,
    #[arg(long, global = true, value_enum)]
    shots: Option<ShotMode>,
    /// mock or remote.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    /// Mock backend script: record lines of {"id", "responses"}.
    #[arg(long, global = true)]
    responses: Option<PathBuf>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    #[arg(long, global = true)]
    max_output_tokens: Option<u32>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    /// use-embedded-label or mark-unparsable.
    #[arg(long, global = true)]
    fallback: Option<Fallback>,
    /// Summarize each text before classifying it.
    #[arg(long, global = true)]
    two_stage: bool,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every instance and write manifest, outcomes and report.
    Classify,
    /// Print the first conversation a run would send for one instance.
    InspectPrompt {
        #[arg(long)]
        id: String,
    },
    /// Project token usage and cost without calling the backend.
    Estimate,
    /// Score outcome files and render them as one table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Append the best-of-runs row and published non-LLM results.
        #[arg(long)]
        baselines: bool,
        /// text, csv or jsonl.
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// count-as-wrong or exclude.
        #[arg(long, default_value = "count-as-wrong")]
        policy: UnparsablePolicy,
    },
}

impl GlobalArgs {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(config_error)?,
            None => RunConfig::default(),
        };
        cfg.apply(Overrides {
            dataset: self.dataset,
            dataset_format: self.dataset_format,
            tag: self.tag,
            style: self.style,
            shots: self.shots,
            backend: self.backend,
            model: self.model,
            endpoint: self.endpoint,
            api_key_env: self.api_key_env,
            responses: self.responses,
            temperature: self.temperature,
            top_p: self.top_p,
            max_output_tokens: self.max_output_tokens,
            concurrency: self.concurrency,
            max_retries: self.max_retries,
            fallback: self.fallback,
            two_stage: self.two_stage,
            cache: self.cache,
            out: self.out,
        })
        .map_err(config_error)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = cli.global.resolve()?;
    match cli.command {
        Command::Classify => {
            let cancel = Arc::new(AtomicBool::new(false));
            let flag = cancel.clone();
            let handler = ctrlc::set_handler(move || {
                if flag.swap(true, Ordering::SeqCst) {
                    std::process::exit(130);
                }
                eprintln!("interrupted: finishing in-flight instances, press Ctrl-C again to abort");
            });
            if let Err(e) = handler {
                log::warn!("cannot install interrupt handler: {e}");
            }
            commands::classify(&mut cfg, cancel)
        }
        Command::InspectPrompt { id } => commands::inspect_prompt(&cfg, &id),
        Command::Estimate => commands::estimate(&cfg),
        Command::Report {
            files,
            baselines,
            format,
            policy,
        } => commands::report(
            &cfg,
            ReportArgs {
                files,
                baselines,
                format,
                policy,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
