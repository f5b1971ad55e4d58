use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vipamin::harness::{self, ExperimentConfig, Metric};
use vipamin::Result;

/// VIPAMIN prompt initialization experiments on a toy Vision Transformer.
#[derive(Parser)]
#[command(name = "vipamin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML; grammar in docs/config.md).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Run id (overrides `run_id`); must not exist yet under the output dir.
    #[arg(long)]
    run_id: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(id) = &self.run_id {
            cfg.run_id = id.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone and write backbone.vpt.
    Pretrain(Common),
    /// Initialize prompts and write prompts.vpt.
    Init(Common),
    /// Train prompts and the head; write metrics and checkpoints.
    Train(Common),
    /// Sweep k x lambda x learning rate and write the normalized heat map.
    Sweep(Common),
    /// Compare initializers over seeds and tasks.
    Compare(Common),
    /// Report a measurement of a finished training run.
    Diagnose {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// entropy | energy | deep-energy | grassmann
        #[arg(long)]
        metric: String,
        /// Second run for `grassmann` (default: the run itself).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output directory (default: <run>/diagnostics).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the plot-data JSON schema.
    Schema,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    Ok(match cli.command {
        Command::Pretrain(c) => vec![harness::cmd_pretrain(&c.load()?)?],
        Command::Init(c) => vec![harness::cmd_init(&c.load()?)?],
        Command::Train(c) => vec![harness::cmd_train(&c.load()?)?],
        Command::Sweep(c) => vec![harness::cmd_sweep(&c.load()?)?],
        Command::Compare(c) => vec![harness::cmd_compare(&c.load()?)?],
        Command::Diagnose {
            run,
            metric,
            reference,
            out,
        } => {
            let (csv, plot) = harness::cmd_diagnose(
                &run,
                Metric::parse(&metric)?,
                reference.as_deref(),
                out.as_deref(),
            )?;
            vec![csv, plot]
        }
        Command::Schema => {
            print!("{}", harness::plot::PLOT_SCHEMA);
            Vec::new()
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", display(&p));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
