use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vonn::pipeline::{self, Ablation, ExperimentConfig, Overrides, PipelineError, Run};
use vonn::potentials::Experiment;
use vonn::preprocess::Sampling;
use vonn::train::WeightMode;

/// Learn free energy and dissipation potentials from simulated trajectories.
#[derive(Debug, Parser)]
#[command(name = "vonn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); the built-in defaults are used without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the preprocessing and initialization seeds.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Replaces the run directory of the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Loss weights: adaptive, constant or periodic.
    #[arg(long, global = true, value_parser = parse::<WeightMode>)]
    weights_mode: Option<WeightMode>,
    /// Phase sample selection: phase-space or uniform-time.
    #[arg(long, global = true, value_parser = parse::<Sampling>)]
    sampling: Option<Sampling>,
    /// Rows per term used for the tangent-kernel traces.
    #[arg(long, global = true)]
    max_ntk_samples: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the simulator and record the trajectory.
    Simulate { experiment: Option<String> },
    /// Select, pack and split training samples.
    Preprocess { experiment: Option<String> },
    /// Train the potential pair and write a checkpoint.
    Train { experiment: Option<String> },
    /// Error table and potential surfaces against the closed forms.
    Evaluate { experiment: Option<String> },
    /// Compare sampling or weighting variants on the phase experiment.
    Ablate {
        /// uniform-time, constant-weights or all.
        which: String,
    },
    /// Fast property checks without training.
    Selftest,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn load(cli: &Cli, experiment: Option<&str>) -> Result<ExperimentConfig, PipelineError> {
    let named = experiment
        .map(|e| e.parse::<Experiment>().map_err(PipelineError::Config))
        .transpose()?;
    let mut cfg = match (&cli.config, named) {
        (Some(path), named) => {
            let cfg = ExperimentConfig::load(path)?;
            if let Some(e) = named {
                if e != cfg.experiment {
                    return Err(PipelineError::Config(format!(
                        "experiment: command asks for {} but the config is for {}",
                        e.name(),
                        cfg.experiment.name()
                    )));
                }
            }
            cfg
        }
        (None, Some(e)) => ExperimentConfig::default_for(e),
        (None, None) => {
            return Err(PipelineError::Config(
                "give an experiment name or --config".into(),
            ))
        }
    };
    cfg.apply(&Overrides {
        seed: cli.seed_override,
        output_dir: cli.output_dir.clone(),
        weight_mode: cli.weights_mode,
        sampling: cli.sampling,
        max_ntk_samples: cli.max_ntk_samples,
    })?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Simulate { experiment } => {
            let r = Run::new(load(cli, experiment.as_deref())?)?;
            let tf = r.simulate()?;
            println!(
                "wrote {} states of {} stations to {}",
                tf.n_times(),
                tf.n_x,
                r.trajectory_dir().display()
            );
        }
        Command::Preprocess { experiment } => {
            let r = Run::new(load(cli, experiment.as_deref())?)?;
            let ds = r.preprocess()?;
            println!(
                "wrote {} bulk and {} boundary training samples to {}",
                ds.pde_train.len(),
                ds.bc_train.as_ref().map_or(0, |t| t.len()),
                r.dataset_dir().display()
            );
        }
        Command::Train { experiment } => {
            let r = Run::new(load(cli, experiment.as_deref())?)?;
            let ck = r.train()?;
            println!("final loss {:.6e}; checkpoint {}", ck.final_loss, r.checkpoint_path().display());
        }
        Command::Evaluate { experiment } => {
            let r = Run::new(load(cli, experiment.as_deref())?)?;
            let t = r.evaluate()?;
            for (n, v) in t.names.iter().zip(&t.values) {
                println!("{n:<22} {v:>10.4} %");
            }
        }
        Command::Ablate { which } => {
            let kinds = if which == "all" {
                vec![Ablation::UniformTime, Ablation::ConstantWeights]
            } else {
                vec![which.parse().map_err(PipelineError::Config)?]
            };
            let cfg = match &cli.config {
                Some(_) => load(cli, None)?,
                None => load(cli, Some("phase"))?,
            };
            for row in pipeline::ablate(&cfg, &kinds)? {
                let fp = row.errors.get("f_prime").unwrap_or(f64::NAN);
                println!(
                    "{:<18} f' error {:>9.4} %  empty boundary deciles {}",
                    row.variant,
                    fp,
                    row.empty_bc_deciles.map_or("-".into(), |n| n.to_string())
                );
            }
        }
        Command::Selftest => {
            let checks = pipeline::selftest()?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<50} {:.3e} (tolerance {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(PipelineError::Numeric(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
