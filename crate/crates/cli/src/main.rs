use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use multimatch_core::config::ExperimentConfig;
use multimatch_core::metrics::friedman_ranks;
use multimatch_core::report::{self, ResultRow, RunOutcome};
use multimatch_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "multimatch", version, about = "Semi-supervised multi-head training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, seed) pair of a config and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Output directory replacing `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge results.csv files and rank algorithms across setups.
    Rank {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnsupportedConfiguration(_) | Error::InvalidInput(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(
    path: &PathBuf,
    overrides: &[String],
    seed: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    for pair in overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seeds) = seed {
        cfg.seeds = seeds;
    }
    if let Some(out) = out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cfg: ExperimentConfig, jobs: usize) -> Result<bool, Failure> {
    let pairs: Vec<_> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(alg, seed)| {
                log::info!("starting {alg} seed {seed}");
                let result = cfg.run_single(alg, seed).map_err(|e| e.to_string());
                if let Err(e) = &result {
                    log::error!("{alg} seed {seed} failed: {e}");
                }
                RunOutcome::new(&cfg.setup, alg, seed, result)
            })
            .collect()
    });
    let dir = PathBuf::from(&cfg.output_dir);
    report::emit_reports(&dir, &outcomes)?;
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{}", report::summary_table(&outcomes)?);
    println!("reports written to {}", dir.display());
    Ok(outcomes.iter().all(|o| o.result.is_ok()))
}

fn rank(inputs: &[PathBuf], out: &PathBuf) -> Result<(), Failure> {
    let mut sets = Vec::new();
    for path in inputs {
        let file = fs::File::open(path)
            .map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", path.display())))?;
        let rows: Vec<ResultRow> = report::read_csv(file)?;
        sets.push(rows);
    }
    let table = friedman_ranks(&report::merge_results(&sets)?)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let file = fs::File::create(out.join("ranks.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    let rows = report::rank_rows(&table);
    report::write_csv(file, &rows)?;
    for r in &rows {
        println!("{:<24} {:>6.2} {:>8.4} {:>3}", r.algorithm, r.friedman_rank, r.mean_error, r.final_rank);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            overrides,
            jobs,
            seed,
            out,
        } => load_config(&config, &overrides, seed, out).and_then(|cfg| run(cfg, jobs)),
        Command::Rank { inputs, out } => rank(&inputs, &out).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
