use std::path::PathBuf;
use std::process::ExitCode;

use aasc_harness::ablate::{run_ablation, Ablation};
use aasc_harness::experiment::{run_experiment, ExperimentSpec};
use aasc_harness::sources::{generate, GenSpec};
use aasc_harness::{config, evaluate_agent, output_root, plot, HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aasc", version, about = "Safe multi-source policy transfer experiments")]
#[command(after_long_help = config::help_text())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; for train it replaces `experiment.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $AASC_OUT or ./aasc-out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Sample source instances, train a policy on each, write a manifest.
    GenSources {
        #[command(flatten)]
        common: Common,
    },
    /// Train every seed of one experiment into <out>/run/<name>/<seed>/.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a saved agent.json on the configured environment.
    Evaluate {
        agent: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation (source_quality or source_count) and emit its table.
    Ablate {
        which: Ablation,
        #[command(flatten)]
        common: Common,
    },
    /// Plot reward and violation curves of one or more run/<name> directories.
    Plot {
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSources { common } => {
            let kv = config::load(common.config.as_deref())?;
            let spec = GenSpec::from_kv(&kv, common.seed.unwrap_or(0))?;
            let dir = output_root(common.out.as_deref()).join("sources");
            let pool = generate(&spec, &dir, common.workers)?;
            for (i, e) in pool.entries.iter().enumerate() {
                println!("source {i}: reward {:.2} ({})", e.final_episodic_reward, e.checkpoint.display());
            }
            println!("manifest: {}", dir.join("manifest.txt").display());
        }
        Command::Train { common } => {
            let kv = config::load(common.config.as_deref())?;
            let mut spec = ExperimentSpec::from_kv(&kv)?;
            if let Some(seed) = common.seed {
                spec.seeds = vec![seed];
            }
            let out = output_root(common.out.as_deref());
            for job in run_experiment(&spec, &out, common.workers)? {
                println!("{}", job.dir.join("metrics.csv").display());
            }
        }
        Command::Evaluate { agent, common } => {
            let kv = config::load(common.config.as_deref())?;
            let s = evaluate_agent(&agent, &kv, common.seed.unwrap_or(0))?;
            println!(
                "episodes {} mean_return {:.3} violations {} interventions {}",
                s.episodes, s.mean_return, s.violations, s.interventions
            );
        }
        Command::Ablate { which, common } => {
            let kv = config::load(common.config.as_deref())?;
            let out = output_root(common.out.as_deref());
            let table = run_ablation(which, &kv, &out, common.workers)?;
            print!("{}", table.to_markdown());
        }
        Command::Plot { runs, common } => {
            if runs.is_empty() {
                return Err(HarnessError::Usage("plot needs at least one run directory".into()));
            }
            let out = output_root(common.out.as_deref()).join("plots");
            for path in plot::plot_runs(&runs, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
