//! `ptdiff`: batch runs of predefined-time differentiators.
//!
//! Exit status: 0 on success, 2 for invalid input, 3 for a numerical blow-up,
//! 4 when a verification suite fails, 1 for I/O problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptdiff::experiment::{
    init_workers, preset_config, reproduce, run_simulation, run_suite, sweep_from_config, write_sweep, ExperimentConfig, Suite,
    VerifyOptions, FIGURES,
};
use ptdiff::Error;

#[derive(Parser)]
#[command(name = "ptdiff", version, about = "Predefined-time exact differentiators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Integration step, overriding the configured one.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Noise seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the worker pool for sweeps and verification matrices.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation described by --config.
    Simulate,
    /// Rerun one of the worked examples.
    Reproduce {
        /// One of fig1a, fig1b, fig1c, fig1d, fig2.
        figure: String,
    },
    /// Settling-time slack over a grid of rates.
    Sweep,
    /// Run a property suite: equivalence, admissibility, slack, stability or all.
    Verify {
        suite: String,
        /// Use the transposed structure matrix (sanity check of the oracle).
        #[arg(long, hide = true)]
        mutate_transpose_q: bool,
    },
}

enum Failure {
    Error(Error),
    Verification(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BlowUp { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if let Some(h) = cli.step {
        cfg.integration.step = h;
    }
    if let Some(s) = cli.seed {
        match cfg.noise.as_mut() {
            Some(n) => n.seed = s,
            None => eprintln!("note: --seed ignored, the configuration has no noise"),
        }
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, configured: Option<&str>, fallback: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| configured.map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(fallback))
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let outcome = run_simulation(&cfg)?;
            let dir = out_dir(cli, cfg.output.dir.as_deref(), &cfg.output.stem);
            list(&outcome.write(&dir)?);
            print!("{}", outcome.summary());
        }
        Command::Reproduce { figure } => {
            if !FIGURES.contains(&figure.as_str()) {
                return Err(Error::UnknownPreset(figure.clone()).into());
            }
            let rep = reproduce(figure, cli.step, cli.seed)?;
            let dir = out_dir(cli, None, figure);
            let mut files = rep.main.write(&dir)?;
            if let Some(c) = &rep.comparison {
                files.extend(c.write(&dir)?);
            }
            let summary_path = dir.join(format!("{figure}_comparison.txt"));
            std::fs::write(&summary_path, rep.summary()).map_err(Error::from)?;
            files.push(summary_path);
            list(&files);
            print!("{}", rep.summary());
        }
        Command::Sweep => {
            let cfg = match &cli.config {
                Some(_) => load_config(cli)?,
                None => {
                    let mut cfg = preset_config("fig1a")?;
                    cfg.output.stem = "sweep".into();
                    if let Some(h) = cli.step {
                        cfg.integration.step = h;
                    }
                    cfg
                }
            };
            let rep = sweep_from_config(&cfg)?;
            let dir = out_dir(cli, cfg.output.dir.as_deref(), "sweep");
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            let path = dir.join(format!("{}_sweep.csv", cfg.output.stem));
            write_sweep(&rep, &path)?;
            std::fs::write(dir.join(format!("{}_params.toml", cfg.output.stem)), cfg.to_toml()?)
                .map_err(Error::from)?;
            list(&[path]);
            for (i, a) in rep.alphas.iter().enumerate() {
                println!(
                    "alpha {a}: T* = {:.4}, slack = {:.4}, predicted slack = {:.4}",
                    rep.measured_t_star[i], rep.slack[i], rep.predicted_slack[i]
                );
            }
            for c in rep.cells.iter().filter_map(|c| c.failure.as_ref()) {
                eprintln!("cell failed: {c}");
            }
        }
        Command::Verify {
            suite,
            mutate_transpose_q,
        } => {
            let suites = Suite::parse(suite)?;
            let mut opts = VerifyOptions {
                transpose_q: *mutate_transpose_q,
                ..Default::default()
            };
            if let Some(h) = cli.step {
                opts.step = h;
            }
            let dir = out_dir(cli, None, "verify");
            let mut failed = Vec::new();
            let mut text = String::new();
            for s in suites {
                let rep = run_suite(s, &opts)?;
                list(&[rep.write(&dir)?]);
                text.push_str(&rep.text());
                failed.extend(
                    rep.checks
                        .iter()
                        .filter(|c| !c.passed)
                        .map(|c| format!("[{}] {}: {}", s.name(), c.name, c.detail)),
                );
            }
            std::fs::write(dir.join("verify_summary.txt"), &text).map_err(Error::from)?;
            print!("{text}");
            if !failed.is_empty() {
                return Err(Failure::Verification(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = init_workers(w) {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(failed)) => {
            eprintln!("{} check(s) failed:", failed.len());
            for f in failed {
                eprintln!("  {f}");
            }
            ExitCode::from(4)
        }
    }
}
