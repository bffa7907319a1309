use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fedadapt::data::idx::save_idx;
use fedadapt::data::synthetic::{generate, GlyphConfig};
use fedadapt::harness::{
    compare_methods, inversion_means, run_experiment, run_privacy, separation_ratio, sweep_extraction, ExperimentConfig,
};
use fedadapt::fl::evaluate;
use fedadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "fedadapt", version, about = "Federated adaptation simulator")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment and all configured baselines.
    Run(RunArgs),
    /// Train the global model and sweep ReLU layers and channel counts.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// ReLU indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        relu: Vec<usize>,
        /// Channel counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        q: Vec<usize>,
    },
    /// Compare per-client accuracies of the methods in an output directory.
    Compare {
        dir: PathBuf,
    },
    /// Run the reconstruction attacks of the `[privacy]` section.
    Invert(RunArgs),
    /// Write a glyph dataset as an IDX image/label pair.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value = "glyphs")]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let cfg = load(&args)?;
            let outcome = run_experiment(&cfg)?;
            for (m, acc) in &outcome.methods {
                println!("{m:>13}: {:.2}%", 100.0 * fedadapt::csm::mean_accuracy(acc));
            }
            println!(
                "global test accuracy {:.2}%, {} groups, artifacts in {}",
                100.0 * mean_global(&outcome)?,
                outcome.pipeline.assignment.group_count,
                outcome.output_dir.display()
            );
        }
        Command::Sweep { run, relu, q } => {
            let cfg = load(&run)?;
            let rows = sweep_extraction(&cfg, &relu, &q)?;
            let fed = fedadapt::harness::build_federation(&cfg)?;
            let truth = fed.clients().iter().map(|c| (c.client_id, c.true_distribution_id)).collect();
            for &k in &relu {
                for &qq in &q {
                    match separation_ratio(&rows, &truth, k, qq) {
                        Some(r) => println!("relu {k} q {qq}: separation {r:.3}"),
                        None => println!("relu {k} q {qq}: skipped"),
                    }
                }
            }
        }
        Command::Compare { dir } => {
            let s = compare_methods(&dir)?;
            for (m, v) in &s.means {
                println!("{m:>13}: {v:.2}% ({} wins)", s.wins[m]);
            }
            for m in &s.absent {
                println!("{m:>13}: absent");
            }
        }
        Command::Invert(args) => {
            let cfg = load(&args)?;
            let reports = run_privacy(&cfg)?;
            for ((k, kind), mse) in inversion_means(&reports) {
                println!("relu {k} {kind:>4}: mse {mse:.4}");
            }
        }
        Command::GenData {
            seed,
            per_class,
            size,
            out,
        } => {
            let ds = generate(&GlyphConfig {
                size,
                per_class,
                seed,
                ..Default::default()
            })?;
            std::fs::create_dir_all(&out)?;
            save_idx(&ds, out.join("images.idx"), out.join("labels.idx"))?;
            println!("{} samples written to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn mean_global(outcome: &fedadapt::harness::ExperimentOutcome) -> Result<f64> {
    let mut s = 0.0;
    for c in outcome.federation.clients() {
        s += evaluate(&outcome.pipeline.global, &c.test)?;
    }
    Ok(s / outcome.federation.len() as f64)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("{e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Stage { .. }) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
