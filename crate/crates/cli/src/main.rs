//! `fedhe`: run experiments, compare finished runs and generate configs.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or input, 2 for
//! failures while running or writing artifacts.

mod artifacts;
mod compare;
mod templates;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use fedhe::config::ExperimentConfig;
use fedhe::orchestrator::Experiment;

use artifacts::{summary_to_toml, write_atomic, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "fedhe",
    version,
    about = "Deterministic federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set alpha=0` or `--set dataset.limit=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory that receives one subdirectory per run.
        #[arg(long, env = "FEDHE_OUT", default_value = "runs")]
        out: PathBuf,
    },
    /// Tabulate accuracy and communication across run manifests.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// FedAvg parameter count to measure reductions against.
        #[arg(long)]
        param_count: Option<u64>,
    },
    /// Write a starter config.
    GenConfig {
        /// One of: homogeneous, heterogeneous, synthetic-smoke.
        template: String,
        /// Destination file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding the MNIST IDX files.
        #[arg(long, default_value = "data/mnist10k")]
        data_dir: PathBuf,
    },
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| io_error(path, e))
}

fn cmd_run(config_path: &Path, overrides: &[String], out: &Path) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config_path, overrides)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let config_dir = absolute(config_path)?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    cfg.resolve_paths(&config_dir);

    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let dir = absolute(&out.join(format!("{stem}-{}-s{}", cfg.method, cfg.seed)))?;
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;

    let with_logits = cfg.method == fedhe::protocol::Method::FedHe && cfg.logit_exchange;
    let manifest = RunManifest::new(&dir, cfg.clone(), with_logits);
    let manifest_path = dir.join("manifest.toml");
    write_atomic(&manifest_path, &manifest.to_toml()).map_err(|e| io_error(&manifest_path, e))?;

    let run_failed = |e: fedhe::orchestrator::RunError| {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    };
    let output = Experiment::prepare(&cfg)
        .and_then(|x| x.run())
        .map_err(run_failed)?;

    let a = &manifest.artifacts;
    write_atomic(&a.metrics, &output.metrics_csv()).map_err(|e| io_error(&a.metrics, e))?;
    if let Some(logits) = &a.logits {
        write_atomic(logits, &output.logits_csv()).map_err(|e| io_error(logits, e))?;
    }
    write_atomic(&a.summary, &summary_to_toml(&output.summary))
        .map_err(|e| io_error(&a.summary, e))?;
    println!("{}", output.summary.line());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn cmd_compare(manifests: &[PathBuf], param_count: Option<u64>) -> Result<(), CliError> {
    let runs = manifests
        .iter()
        .map(|p| compare::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", compare::report(&runs, param_count)?);
    Ok(())
}

fn cmd_gen_config(template: &str, out: Option<&Path>, data_dir: &Path) -> Result<(), CliError> {
    let data_dir = absolute(data_dir)?;
    let cfg = templates::generate(template, &data_dir).ok_or_else(|| {
        CliError::Config(format!(
            "unknown template '{template}'; available templates: {}",
            templates::TEMPLATES.join(", ")
        ))
    })?;
    let text = templates::render(template, &cfg);
    match out {
        Some(path) => write_atomic(path, &text).map_err(|e| io_error(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
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
    let result = match &cli.command {
        Command::Run {
            config,
            overrides,
            out,
        } => cmd_run(config, overrides, out),
        Command::Compare {
            manifests,
            param_count,
        } => cmd_compare(manifests, *param_count),
        Command::GenConfig {
            template,
            out,
            data_dir,
        } => cmd_gen_config(template, out.as_deref(), data_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedhe: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
