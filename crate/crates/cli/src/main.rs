use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_recursion_cli::commands::{self, AnalyzeMode};
use sparse_recursion_cli::{CliError, Task};

/// Sparse recursive LoRA experts for diffusion transformers.
#[derive(Parser)]
#[command(name = "srdit", version)]
struct Cli {
    /// Output directory for commands that write files.
    #[arg(long, global = true, env = "SRDIT_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config file (task picks diffusion or frozenlake).
    Train { config: PathBuf },
    /// Sample images of one class from a diffusion checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of latent steps of every recursive layer.
        #[arg(long)]
        latent_steps: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break the analytic gradient of one op (negative control).
        #[arg(long)]
        corrupt_op: Option<String>,
    },
    /// Export latent trajectories (CSV) or routing statistics (JSON) from traced sampling.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Output file; defaults to trajectories.csv or routing_stats.json under --out.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diffusion-timestep buckets for routing statistics.
        #[arg(long, default_value_t = 10)]
        buckets: usize,
    },
    /// Generate and split lake maps, one text file per map.
    FrozenlakeGen { config: PathBuf },
    /// Train the lake planner.
    FrozenlakeTrain {
        config: PathBuf,
        /// Directory of training maps; generated from the config when absent.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Evaluate gate accuracy and planning on held-out maps.
    FrozenlakeEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of evaluation maps; the config's held-out split when absent.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli.out;
    match cli.command {
        Command::Train { config } => {
            let cfg = commands::load_config(&config, None)?;
            let s = commands::train(&cfg, &out)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                s.steps,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::Sample { checkpoint, class, n, seed, latent_steps } => {
            let m = commands::cmd_sample(&checkpoint, class, n, seed, latent_steps, &out)?;
            println!("wrote {} samples to {}", m.files.len(), out.display());
        }
        Command::Gradcheck { seed, corrupt_op } => {
            let mut stdout = std::io::stdout();
            commands::cmd_gradcheck(seed, corrupt_op.as_deref(), &mut stdout)?;
        }
        Command::Analyze { checkpoint, mode, file, n, seed, buckets } => {
            let file = file.unwrap_or_else(|| {
                out.join(match mode {
                    AnalyzeMode::Trajectories => "trajectories.csv",
                    AnalyzeMode::Routing => "routing_stats.json",
                })
            });
            let count = commands::cmd_analyze(&checkpoint, mode, &file, n, seed, buckets)?;
            println!("wrote {count} records to {}", file.display());
        }
        Command::FrozenlakeGen { config } => {
            let cfg = commands::load_config(&config, Some(Task::Frozenlake))?;
            let (train, held) = commands::frozenlake_gen(&cfg, &out)?;
            println!("wrote {train} training and {held} held-out maps to {}", out.join("maps").display());
        }
        Command::FrozenlakeTrain { config, maps } => {
            let cfg = commands::load_config(&config, Some(Task::Frozenlake))?;
            let s = commands::frozenlake_train(&cfg, maps.as_deref(), &out)?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                s.steps,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::FrozenlakeEval { checkpoint, maps } => {
            let e = commands::frozenlake_eval(&checkpoint, maps.as_deref(), &out)?;
            println!(
                "gate accuracy {:.4}, goal rate {:.4} over {} maps",
                e.gate.accuracy, e.plans.goal_rate, e.plans.maps
            );
            for f in &e.plans.failures {
                println!("failed map:\n{f}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
