use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pexml::experiments::pipeline::{Split, ERRORS_FILE, SIMULATE_DIR};
use pexml::experiments::{ExperimentConfig, Pipeline};

#[derive(Parser)]
#[command(name = "pexml", version, about = "Partially explicit multiscale solver with a learned implicit component")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the permeability field used by the configuration.
    Field {
        #[command(flatten)]
        common: Common,
        /// Destination field file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Build the two multiscale spaces.
    Spaces(Common),
    /// Print the stability constant and the time-step bound.
    Gamma(Common),
    /// Coarse and fine runs at the centre of the parameter box.
    Simulate(Common),
    /// Sample parameters and compute training and test trajectories.
    Dataset(Common),
    /// Compress the training snapshots.
    Pod(Common),
    /// Train the surrogate network.
    Train(Common),
    /// Evaluate the learned scheme on the test split.
    Eval(Common),
    /// Run every stage.
    Run(Common),
}

fn pipeline(c: &Common) -> anyhow::Result<Pipeline> {
    let config = ExperimentConfig::load(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    Ok(Pipeline::new(config, &c.out)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Field { common, output } => {
            let p = pipeline(&common)?;
            p.field()?.save(&output)?;
            println!("wrote {}", output.display());
        }
        Command::Spaces(c) => {
            let s = pipeline(&c)?.spaces()?.clone();
            println!("dim1={}\ndim2={}", s.dim1(), s.dim2());
        }
        Command::Gamma(c) => {
            let report = pipeline(&c)?.stability()?;
            print!("{}", report.to_key_values());
            if !report.satisfied {
                log::warn!("the configured time step violates the stability bound");
            }
        }
        Command::Simulate(c) => {
            let p = pipeline(&c)?;
            let series = p.simulate()?;
            println!("mean_e2={:e}", series.time_average(1).unwrap_or(f64::NAN));
            println!("wrote {}", p.path(SIMULATE_DIR).join(ERRORS_FILE).display());
        }
        Command::Dataset(c) => {
            let p = pipeline(&c)?;
            let (train, test) = p.dataset()?;
            println!("train={}\ntest={}", train.params.len(), test.params.len());
            println!("wrote {} and {}", p.path(Split::Train.dir()).display(), p.path(Split::Test.dir()).display());
        }
        Command::Pod(c) => {
            let pod = pipeline(&c)?.pod()?;
            println!("l={}\ndiscarded_energy={:e}", pod.modes(), pod.discarded_energy());
        }
        Command::Train(c) => {
            let s = pipeline(&c)?.train()?;
            println!("parameters={}", s.model.param_count());
        }
        Command::Eval(c) => print!("{}", pipeline(&c)?.evaluate()?.to_key_values()),
        Command::Run(c) => print!("{}", pipeline(&c)?.run_all()?.to_key_values()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
