use std::path::PathBuf;
use std::process::ExitCode;

use advtune::domain::parse_epsilon;
use advtune_cli::commands;
use advtune_cli::manifest::{keys_help, parse_seed_list, Manifest, Overrides};
use advtune_cli::{Classify, CliResult};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "advtune",
    version,
    about = "Sweeps, analyses, replays and live tuning for adversarial-training hyper-parameters",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every toy configuration on the grid and write a dataset CSV
    Sweep(Common),
    /// Error reductions, CDFs, correlations and Pareto grids from a dataset
    Analyze(Common),
    /// Replay the optimizer set against a dataset or the synthetic benchmark
    Replay(Common),
    /// Tune live against the toy trainer
    Tune(Common),
}

/// Wrapped so clap takes the whole list as one value.
#[derive(Clone)]
struct SeedList(Vec<u64>);

#[derive(Args)]
#[command(after_help = keys_help())]
struct Common {
    /// Manifest file (`section.key = value` lines)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (overrides run.out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides run.jobs)
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated seeds (overrides run.seeds)
    #[arg(long, value_parser = |s: &str| parse_seed_list(s).map(SeedList).map_err(|e| e.to_string()))]
    seed_list: Option<SeedList>,
    /// Perturbation bound such as 0.031 or 8/255 (overrides run.epsilon)
    #[arg(long, value_parser = |s: &str| parse_epsilon(s).map_err(|e| e.to_string()))]
    epsilon: Option<f64>,
}

impl Common {
    fn manifest(&self) -> CliResult<Manifest> {
        let mut m = match &self.manifest {
            Some(path) => Manifest::load(path).input()?,
            None => Manifest::default(),
        };
        m.apply(&Overrides {
            out: self.out.clone(),
            jobs: self.jobs,
            seeds: self.seed_list.as_ref().map(|s| s.0.clone()),
            epsilon: self.epsilon,
        });
        Ok(m)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (common, which) = match &cli.command {
        Command::Sweep(c) => (c, "sweep"),
        Command::Analyze(c) => (c, "analyze"),
        Command::Replay(c) => (c, "replay"),
        Command::Tune(c) => (c, "tune"),
    };
    let m = common.manifest()?;
    // later builds fail harmlessly when the pool already exists
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(m.run.jobs)
        .build_global();
    match which {
        "sweep" => {
            let r = commands::sweep(&m)?;
            println!(
                "wrote {} records ({} new) to {}",
                r.records,
                r.new_records,
                r.path.display()
            );
        }
        "analyze" => {
            let r = commands::analyze(&m)?;
            print!("{}", r.summary);
            println!("wrote {} files to {}", r.files.len(), m.run.out.display());
        }
        "replay" => {
            let r = commands::replay(&m)?;
            for (mode, _, text) in &r.modes {
                println!("[{}]", mode.label());
                print!("{text}");
            }
        }
        _ => {
            let r = commands::tune(&m)?;
            println!("best: [{}]", r.config);
            println!(
                "std_error = {} adv_error = {} objective = {} after {} evaluations",
                r.std_error, r.adv_error, r.objective, r.evaluations
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advtune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
