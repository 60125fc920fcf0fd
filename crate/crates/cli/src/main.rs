use std::path::PathBuf;
use std::process::ExitCode;

use bymap_cli::commands;
use bymap_cli::config::{EngineKind, RunConfig, SimulateMode};
use bymap_cli::{exit, CliError, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "bymap",
    version,
    about = "Small-area case-fatality modelling pipeline"
)]
struct Cli {
    /// TOML run configuration. Defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic geometry, line list and covariate table.
    Simulate {
        #[arg(long)]
        mode: Option<SimulateMode>,
    },
    /// Build queen adjacency and merge units without cases.
    Adjacency,
    /// Compute stratum rates, expected deaths and case-fatality tables.
    Standardize,
    /// Principal-component screening of covariates.
    Screen {
        #[arg(long)]
        engine: Option<EngineKind>,
    },
    /// Fit the final model.
    Fit {
        #[arg(long)]
        engine: Option<EngineKind>,
    },
    /// Regenerate tables and maps from a saved fit.
    Report,
    /// Run adjacency, standardize, screen and fit in order.
    Run {
        #[arg(long)]
        engine: Option<EngineKind>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.paths.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { mode } => {
            if let Some(m) = mode {
                cfg.simulate.mode = m;
            }
            print_json(&commands::cmd_simulate(&cfg)?);
        }
        Command::Adjacency => print_json(&commands::cmd_adjacency(&cfg)?),
        Command::Standardize => print_json(&commands::cmd_standardize(&cfg)?),
        Command::Screen { engine } => {
            if let Some(e) = engine {
                cfg.model.engine = e;
            }
            print!("{}", commands::cmd_screen(&cfg)?.to_text());
        }
        Command::Fit { engine } => {
            let out = commands::cmd_fit(&cfg, engine)?;
            print!("{}", out.fit.rr_table_csv());
            println!("DIC {:.3} (pD {:.3})", out.dic.dic, out.dic.p_d);
        }
        Command::Report => {
            commands::cmd_report(&cfg)?;
        }
        Command::Run { engine } => {
            print_json(&commands::cmd_adjacency(&cfg)?);
            print_json(&commands::cmd_standardize(&cfg)?);
            if let Some(e) = engine {
                cfg.model.engine = e;
            }
            if cfg.model.use_screened {
                print!("{}", commands::cmd_screen(&cfg)?.to_text());
            }
            let out = commands::cmd_fit(&cfg, None)?;
            print!("{}", out.fit.rr_table_csv());
            println!("DIC {:.3} (pD {:.3})", out.dic.dic, out.dic.p_d);
        }
    }
    Ok(())
}

fn init_threads() {
    if let Ok(v) = std::env::var("BYMAP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("BYMAP_THREADS ignored: {e}");
                }
            }
            _ => log::warn!("BYMAP_THREADS must be a positive integer, got `{v}`"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if matches!(e, CliError::NotConverged) {
                log::warn!("inspect diagnostics.json in the output directory");
            }
            ExitCode::from(code as u8)
        }
    }
}
