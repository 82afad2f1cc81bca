use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, ValueEnum};
use fedsig_harness::config::{override_help, parse_override_args};
use fedsig_harness::output::VERSION;
use fedsig_harness::{resolve, ConfigLayers, ExperimentKind, HarnessError, Preset};
use serde_json::json;

/// Thread-count cap for all parallel work.
const THREADS_ENV: &str = "FEDSIG_THREADS";

/// Federated and centralized signature-verification experiments.
#[derive(Parser, Debug)]
#[command(name = "fedsig", version = VERSION)]
struct Cli {
    /// Which experiment to run.
    kind: ExperimentKind,

    /// JSON configuration file; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum)]
    preset: Option<Preset>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Field overrides, `--<field> <value>`; see the list below.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn configure_threads() -> Result<(), HarnessError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| HarnessError::Usage(format!("cannot set up {threads} threads: {e}")))
}

// Once the first override starts the trailing list, clap no longer sees the
// named flags, so `--out x` after `--lr 0.1` is fished out here.
fn hoist_flags(cli: &mut Cli) -> Result<(), HarnessError> {
    let mut rest = Vec::new();
    let mut args = std::mem::take(&mut cli.overrides).into_iter();
    while let Some(arg) = args.next() {
        let (name, inline) = match arg.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (arg.clone(), None),
        };
        if !matches!(name.as_str(), "--config" | "--preset" | "--out" | "--seed") {
            rest.push(arg);
            continue;
        }
        let value = inline
            .or_else(|| args.next())
            .ok_or_else(|| HarnessError::Usage(format!("{name} needs a value")))?;
        match name.as_str() {
            "--config" => cli.config = Some(value.into()),
            "--out" => cli.out = Some(value.into()),
            "--preset" => {
                cli.preset = Some(Preset::from_str(&value, true).map_err(|e| HarnessError::Usage(format!("--preset: {e}")))?)
            }
            _ => {
                cli.seed = Some(value.parse().map_err(|_| HarnessError::Usage(format!("--seed expects an integer, got `{value}`")))?)
            }
        }
    }
    cli.overrides = rest;
    Ok(())
}

fn run(mut cli: Cli) -> Result<PathBuf, HarnessError> {
    configure_threads()?;
    hoist_flags(&mut cli)?;
    let layers = ConfigLayers {
        preset: cli.preset,
        file: cli.config.as_deref(),
        seed: cli.seed,
        out: cli.out,
        overrides: parse_override_args(&cli.overrides)?,
    };
    let cfg = resolve(cli.kind, &layers)?;
    log::info!("{} writing to {}", cfg.kind, cfg.out.display());
    fedsig_harness::run(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let command = Cli::command().after_long_help(override_help()).after_help(
        "Every configuration field can be overridden with --<field> <value>; `--help` lists them.\n\
         Set FEDSIG_THREADS to cap the number of worker threads.",
    );
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = HarnessError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", json!({ "status": "ok", "summary": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
