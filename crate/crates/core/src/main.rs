use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use decoforce::config::{parse_solvers, preset, RunConfig, Scenario, PRESETS};
use decoforce::output::default_output_root;
use decoforce::runner::{execute, write_outcome, RunOptions};
use decoforce::Error;

/// Spin-1/2 particle under position-dependent unselective spin measurement.
#[derive(Parser)]
#[command(name = "decoforce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration (file path or shipped preset name) and write a run directory.
    Run {
        config: String,
        /// Solver selection overriding the file: `all` or a comma-separated list.
        #[arg(long)]
        solver: Option<String>,
        /// Output root (default: $DECOFORCE_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed for the trajectory ensemble.
        #[arg(long)]
        seed: Option<u64>,
        /// Decoherence rates for the gauge-limit study, comma-separated.
        #[arg(long, value_delimiter = ',')]
        nu_list: Option<Vec<f64>>,
        /// Evaluate trajectories concurrently (results are identical).
        #[arg(long)]
        parallel: bool,
    },
    /// Parse and validate a configuration without running it.
    Validate { config: String },
    /// Shipped presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
    /// Print a preset's configuration text.
    Show { name: String },
}

/// Reads a config file, falling back to a shipped preset for `NAME` or `presets/NAME`.
fn load(spec: &str) -> Result<RunConfig, Error> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        return Ok(cfg);
    }
    let name = spec.trim_start_matches("presets/").trim_end_matches(".toml");
    match preset(name) {
        Some(text) => RunConfig::parse(text),
        None => Err(Error::Config {
            constraint: "config.path",
            message: format!("no file or preset named `{spec}`"),
        }),
    }
}

fn run(
    spec: &str,
    solver: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    nu_list: Option<Vec<f64>>,
    parallel: bool,
) -> Result<bool, Error> {
    let mut cfg = load(spec)?;
    if let Some(s) = solver {
        parse_solvers(&s)?;
        cfg.solver = s;
    }
    if let Some(list) = nu_list {
        cfg.gauge.nu_list = list;
    }
    let scn: Scenario = cfg.validate()?;
    let opts = RunOptions { parallel, seed };
    let outcome = execute(&cfg, &scn, &opts)?;
    let root = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(default_output_root);
    let dir = write_outcome(&root, &cfg, &scn, &opts, &outcome)?;
    print!("{}", outcome.report.to_text());
    println!("run directory: {}", dir.display());
    for c in outcome.report.failures() {
        eprintln!("assertion failed: {} (value {:.6e}, {})", c.name, c.value, c.target());
    }
    Ok(outcome.report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            solver,
            out,
            seed,
            nu_list,
            parallel,
        } => run(&config, solver, out, seed, nu_list, parallel),
        Command::Validate { config } => load(&config).and_then(|c| c.validate()).map(|s| {
            println!(
                "ok: {} with {}",
                s.experiment.name(),
                s.solvers.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
            );
            true
        }),
        Command::Presets { action } => {
            match action {
                PresetAction::List => PRESETS.iter().for_each(|(name, _)| println!("{name}")),
                PresetAction::Show { name } => match preset(&name) {
                    Some(text) => print!("{text}"),
                    None => {
                        eprintln!("error: no preset named `{name}`");
                        return ExitCode::from(1);
                    }
                },
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
