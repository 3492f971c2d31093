//! `vemkd`: dataset generation, training, evaluation and reports.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vemkd_core::config::{self, RunConfig};
use vemkd_core::datagen::{generate_shapes_dataset, Dataset, Split};
use vemkd_core::metrics::{evaluate, ToyEmbedder};
use vemkd_core::trainer::{self, TrainState};
use vemkd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vemkd",
    version,
    about = "Distill toy image generators with an energy-based MI bound"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` overrides, e.g. `data.seed=7`.
        #[arg(short = 's', long = "set")]
        overrides: Vec<String>,
    },
    /// Train one run, or every grid point of the config's sweep.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(short = 's', long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint's student on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set")]
        overrides: Vec<String>,
    },
    /// Compare finished runs and plot their curves.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Directory for `report.csv`.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn single_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut runs = config::load_runs(path, overrides)?;
    if runs.len() != 1 {
        return Err(Error::config("sweep", "this command takes a single run"));
    }
    Ok(runs.remove(0).1)
}

/// Renders each distinct data config of the run (or sweep) once.
fn gen_data(path: &Path, overrides: &[String]) -> Result<()> {
    let mut done = Vec::new();
    for (_, cfg) in config::load_runs(path, overrides)? {
        if done.contains(&cfg.data) {
            continue;
        }
        let manifest = generate_shapes_dataset(&cfg.data)?;
        println!("{}", manifest.display());
        done.push(cfg.data);
    }
    Ok(())
}

fn train(path: &Path, resume: Option<&Path>, overrides: &[String]) -> Result<()> {
    let runs = config::load_runs(path, overrides)?;
    if resume.is_some() && runs.len() != 1 {
        return Err(Error::config("sweep", "--resume applies to a single run"));
    }
    for (label, cfg) in runs {
        if !label.is_empty() {
            log::info!("sweep point {label}");
        }
        let data = Dataset::load(&cfg.data.root)?;
        let out = trainer::run(&cfg, &data, resume)?;
        let line = serde_json::json!({
            "run": cfg.output_dir,
            "iteration": out.state.iteration,
            "report": out.final_metrics,
        });
        println!("{line}");
    }
    Ok(())
}

fn eval(ckpt: &Path, config_path: Option<&Path>, overrides: &[String]) -> Result<()> {
    let cfg = match config_path {
        Some(p) => single_config(p, overrides)?,
        None => {
            let ck = vemkd_core::checkpoint::Checkpoint::load(ckpt)?;
            let (mut table, sweep) = config::parse_document(&ck.manifest.config)?;
            config::apply_overrides(&mut table, overrides)?;
            config::expand_sweep(&table, sweep.as_ref())?.remove(0).1
        }
    };
    let (student, teacher, iteration) = TrainState::load_for_eval(&cfg, ckpt)?;
    let data = Dataset::load(&cfg.data.root)?;
    let (x, y) = data.split(Split::Val)?;
    let embedder = ToyEmbedder::new(cfg.model.channels);
    let r = evaluate(&student, Some(&teacher), &x, &y, &embedder, cfg.metrics.eval_batch)?;
    let line = serde_json::json!({ "iteration": iteration, "report": r });
    let text = serde_json::to_string_pretty(&line).expect("report serializes");
    let path = ckpt.join("eval.json");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, overrides } => gen_data(config, overrides),
        Command::Train {
            config,
            resume,
            overrides,
        } => train(config, resume.as_deref(), overrides),
        Command::Eval {
            ckpt,
            config,
            overrides,
        } => eval(ckpt, config.as_deref(), overrides),
        Command::Report { runs, out } => report::report(runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
