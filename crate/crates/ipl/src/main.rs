//! Thin command-line front end over the harness pipeline.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use ipl::harness::{
    compare_runs, generate_dataset, run_experiment, run_sweep, summary_csv, ExperimentConfig,
    SweepConfig,
};
use ipl::Error;

#[derive(Parser)]
#[command(name = "ipl", about = "Preference-based offline RL without a reward network", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the environment and write mdp.json.
    GenEnv(StageArgs),
    /// Generate the preference/offline dataset and write dataset.jsonl.
    GenData(StageArgs),
    /// Run the full pipeline: env, data, training, metrics, oracle.
    Train {
        #[command(flatten)]
        stage: StageArgs,
        /// Override the configured method.
        #[arg(long, value_parser = ["ipl-xql", "ipl-iql", "ipl-awac", "mr-iql", "dpo"])]
        variant: Option<String>,
    },
    /// Solve the convex oracle for the configured dataset and write the
    /// report (runs the full pipeline with the oracle enabled).
    Oracle(StageArgs),
    /// Summarize completed runs listed in the config ({"runs": [dirs...]}).
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a sweep config and run every combination.
    Sweep(StageArgs),
}

#[derive(clap::Args)]
struct StageArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; re-seeds every pipeline stage deterministically.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; all artifact paths are relative to it.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config = config.with_master_seed(seed);
    }
    Ok(config)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenEnv(args) => {
            let config = load_config(&args)?;
            std::fs::create_dir_all(&args.out)?;
            let mdp = config.environment.build()?;
            mdp.save(&args.out.join("mdp.json"))?;
            println!("wrote {}", args.out.join("mdp.json").display());
        }
        Command::GenData(args) => {
            let config = load_config(&args)?;
            std::fs::create_dir_all(&args.out)?;
            let mdp_path = args.out.join("mdp.json");
            let mdp = if mdp_path.exists() {
                ipl::mdp::TabularMdp::load(&mdp_path)?
            } else {
                let mdp = config.environment.build()?;
                mdp.save(&mdp_path)?;
                mdp
            };
            let (dataset, _) = generate_dataset(&mdp, &config.dataset)?;
            ipl::data::save_dataset(&args.out.join("dataset.jsonl"), &dataset)?;
            println!(
                "wrote {} ({} pairs, {} rankings, {} transitions)",
                args.out.join("dataset.jsonl").display(),
                dataset.pairs.len(),
                dataset.rankings.len(),
                dataset.transitions.len()
            );
        }
        Command::Train { stage, variant } => {
            let mut config = load_config(&stage)?;
            if let Some(name) = variant {
                config.algorithm = config.algorithm.with_method(&name)?;
            }
            let outputs = run_experiment(&config, &stage.out)?;
            println!(
                "run {} complete: final ground-truth return {:.6}",
                outputs.config_hash, outputs.final_return
            );
        }
        Command::Oracle(args) => {
            let mut config = load_config(&args)?;
            config.oracle = true;
            let outputs = run_experiment(&config, &args.out)?;
            let gap = std::fs::read_to_string(args.out.join("gap_report.json"))?;
            println!("run {} oracle gaps: {gap}", outputs.config_hash);
        }
        Command::Compare { config, out } => {
            #[derive(serde::Deserialize)]
            struct CompareConfig {
                runs: Vec<PathBuf>,
            }
            let spec: CompareConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)
                .map_err(ipl::Error::from)?;
            let (summaries, problems) = compare_runs(&spec.runs)?;
            let csv = summary_csv(&summaries);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("summary.csv"), &csv)?;
            print!("{csv}");
            for p in &problems {
                eprintln!("warning: {p}");
            }
        }
        Command::Sweep(args) => {
            let text = std::fs::read_to_string(&args.config)?;
            let mut sweep: SweepConfig = serde_json::from_str(&text).map_err(ipl::Error::from)?;
            if let Some(seed) = args.seed {
                sweep.base = sweep.base.with_master_seed(seed);
            }
            let dirs = run_sweep(&sweep, &args.out)?;
            println!("completed {} runs under {}", dirs.len(), args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
