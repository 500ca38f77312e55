use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use d2a_core::harness::checks::{flow_suite, pipeline_grad_check};
use d2a_core::harness::eval::default_test_seeds;
use d2a_core::harness::{
    ModelPredictor, TrainConfig, ablate, evaluate, load_run, parse_arms, parse_seeds, save_run, synth_scene, train,
};
use d2a_core::Result;

/// Dual-stream mesh regressor: synthetic data, training, evaluation and
/// self-checks.
#[derive(Parser)]
#[command(name = "d2a", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one synthetic scene and write its tensors as D2A1 files.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional config for grid and mesh sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a config file; writes config, loss log and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint directory on the scenes listed in a seeds file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        /// Where to write key=value metrics (default: <checkpoint>/metrics.txt).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the full model and one arm per toggle set, then compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated arms; `+` joins modules switched off together,
        /// e.g. `depth,dist,silh+mask`.
        #[arg(long)]
        toggles: String,
        /// Held-out seeds file (default: 64 fixed test scenes).
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient on one scene.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        scene: u64,
        /// Config to check instead of the reduced built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Flow invertibility, log-determinant and normalization checks.
    Flowcheck,
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn read_seeds(path: &Path) -> Result<Vec<u64>> {
    parse_seeds(&std::fs::read_to_string(path)?)
}

/// Returns whether every check passed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { seed, out, config } => {
            let cfg = read_config(config.as_deref())?;
            synth_scene(seed, &cfg.synth())?.save(&out)?;
            println!("scene {seed} written to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let result = train(&cfg)?;
            save_run(&out, &cfg, &result)?;
            let first = result.log.first().map_or(f64::NAN, |l| l.total);
            let last = result.log.last().map_or(f64::NAN, |l| l.total);
            println!("{} steps, loss {first:.5} -> {last:.5}, checkpoint in {}", result.log.len(), out.display());
        }
        Command::Eval { checkpoint, seeds, report } => {
            let (cfg, params) = load_run(&checkpoint)?;
            let seeds = read_seeds(&seeds)?;
            let metrics = evaluate(&ModelPredictor { params: &params, config: &cfg }, &cfg, &seeds)?;
            print!("{metrics}");
            let path = report.unwrap_or_else(|| checkpoint.join("metrics.txt"));
            std::fs::write(&path, metrics.to_key_values())?;
            if metrics.pa_mpjpe > metrics.mpjpe + 1e-9 {
                eprintln!("note: pa_mpjpe exceeds mpjpe on this set");
            }
        }
        Command::Ablate { config, toggles, seeds } => {
            let cfg = TrainConfig::load(&config)?;
            let arms = parse_arms(&toggles)?;
            let seeds = match seeds {
                Some(p) => read_seeds(&p)?,
                None => default_test_seeds(64),
            };
            print!("{}", ablate(&cfg, &arms, &seeds)?);
        }
        Command::Gradcheck { eps, scene, config } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::reduced(),
            };
            let r = pipeline_grad_check(&cfg, scene, eps)?;
            let pass = r.max_rel_err < 1e-4;
            println!(
                "entries {}  max rel err {:.3e} at param {} entry {}  {}",
                r.entries_checked,
                r.max_rel_err,
                r.worst.0,
                r.worst.1,
                if pass { "PASS" } else { "FAIL" }
            );
            return Ok(pass);
        }
        Command::Flowcheck => {
            let table = flow_suite()?;
            print!("{table}");
            return Ok(table.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
