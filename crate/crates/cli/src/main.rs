use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pinn_uq_cli::compare::{load_runs, render_table, write_table_csv};
use pinn_uq_cli::config::{coerce, parse_overlay, ExperimentConfig, METHODS, PROBLEMS};
use pinn_uq_cli::pipeline::{execute, load_manifest, render_report};
use pinn_uq_core::CoreError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "pinn-uq",
    about = "Uncertainty quantification experiments for physics-informed neural networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write artifacts to the output directory.
    Run {
        /// Config file (key = value text or JSON).
        #[arg(long, conflicts_with_all = ["manifest"])]
        config: Option<PathBuf>,
        /// Re-run from the manifest of a previous run.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Problem, when starting from built-in defaults.
        #[arg(long, conflicts_with_all = ["config", "manifest"])]
        problem: Option<String>,
        /// Method, when starting from built-in defaults.
        #[arg(long, conflicts_with_all = ["config", "manifest"])]
        method: Option<String>,
        /// Override single keys (repeatable): --set key=value
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the reports of several run directories into one table.
    Compare {
        /// Run directories.
        dirs: Vec<PathBuf>,
        /// Optional CSV destination for the merged table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration for a problem/method pair.
    ShowDefaults {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        method: String,
        /// Emit JSON instead of key = value text.
        #[arg(long)]
        json: bool,
    },
    /// Check a config file and exit.
    ValidateConfig { file: PathBuf },
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::InvalidConfig(_) => EXIT_CONFIG,
        CoreError::Io(_) | CoreError::Json(_) | CoreError::MalformedCsv { .. } => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

fn resolve_config(
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    problem: Option<String>,
    method: Option<String>,
    set: &[String],
) -> pinn_uq_core::Result<ExperimentConfig> {
    let mut overlay = if let Some(path) = manifest {
        let m = load_manifest(&path)?;
        match serde_json::to_value(&m.config)? {
            serde_json::Value::Object(o) => o,
            _ => unreachable!(),
        }
    } else if let Some(path) = config {
        parse_overlay(&std::fs::read_to_string(&path)?)?
    } else {
        let (Some(problem), Some(method)) = (problem, method) else {
            return Err(CoreError::InvalidConfig(format!(
                "run needs --config, --manifest, or --problem ({PROBLEMS:?}) with --method ({METHODS:?})"
            )));
        };
        let mut o = serde_json::Map::new();
        o.insert("problem".into(), problem.into());
        o.insert("method".into(), method.into());
        o
    };
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            CoreError::InvalidConfig(format!("--set expects key=value, got '{kv}'"))
        })?;
        overlay.insert(k.trim().to_string(), coerce(v.trim()));
    }
    ExperimentConfig::from_overlay(overlay)
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: CoreError| (exit_code(&e), e.to_string());
    match cli.command {
        Command::Run {
            config,
            manifest,
            problem,
            method,
            set,
            out,
        } => {
            let cfg = resolve_config(config, manifest, problem, method, &set).map_err(fail)?;
            let outputs = execute(&cfg, &out).map_err(fail)?;
            print!("{}", render_report(&cfg.method, &outputs.report));
            println!("artifacts written to {}", outputs.out_dir.display());
            Ok(())
        }
        Command::Compare { dirs, out } => {
            let runs = load_runs(&dirs).map_err(fail)?;
            print!("{}", render_table(&runs));
            if let Some(path) = out {
                write_table_csv(&path, &runs).map_err(fail)?;
            }
            Ok(())
        }
        Command::ShowDefaults {
            problem,
            method,
            json,
        } => {
            let cfg = ExperimentConfig::defaults(&problem, &method).map_err(fail)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&cfg).map_err(|e| fail(e.into()))?
                );
            } else {
                print!("{}", cfg.to_key_value());
            }
            Ok(())
        }
        Command::ValidateConfig { file } => {
            ExperimentConfig::from_file(&file).map_err(fail)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; parse failures are config
            // errors.
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
