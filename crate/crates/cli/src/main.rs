use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rockstune::config::TunerFile;
use rockstune::objective::Objective;
use rockstune::report::{find_logs, load_runs, replay, write_report};
use rockstune::tuner::{run, Baseline, History, RunOptions, Strategy};

#[derive(Parser)]
#[command(
    name = "rockstune",
    version,
    about = "Multi-task Bayesian optimization for RocksDB-style configuration tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveKind {
    Synthetic,
    Benchmark,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tuner for a number of seeded repeats, one trial log per repeat.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Total evaluations per run, including the random initialization.
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 1)]
        init_random: usize,
        #[arg(long, default_value_t = 5)]
        repeats: u64,
        /// Seed of the first repeat; repeat i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ObjectiveKind::Synthetic)]
        objective: ObjectiveKind,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Continue existing trial logs instead of refusing to overwrite them.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate trial logs into convergence.csv and summary.json.
    Report {
        /// Trial logs or directories holding them (default: the output directory).
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Refit the surrogate of a trial log and print model diagnostics.
    Replay {
        log: PathBuf,
        /// Fail unless the log was produced by this strategy.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: rockstune::Error| e.to_string())
}

fn log_path(out: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    out.join(strategy.as_str()).join(format!("run-{seed}.jsonl"))
}

fn make_objective(file: &TunerFile, kind: ObjectiveKind, seed: u64) -> Result<Box<dyn Objective>> {
    Ok(match kind {
        ObjectiveKind::Synthetic => Box::new(file.synthetic_objective(seed)?),
        ObjectiveKind::Benchmark => Box::new(file.benchmark_objective()?),
    })
}

fn measure_baseline(file: &TunerFile, kind: ObjectiveKind, seed: u64) -> Result<Option<Baseline>> {
    let config = file.space.default_config();
    let mut objective = make_objective(file, kind, seed)?;
    match objective.evaluate(&config) {
        Ok(eval) => Ok(Some(Baseline {
            config,
            values: eval.values,
        })),
        Err(f) => {
            log::warn!("default configuration failed: {}", f.message);
            Ok(None)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tune(
    config: &Path,
    strategy: Strategy,
    budget: usize,
    init_random: usize,
    repeats: u64,
    seed: u64,
    objective: ObjectiveKind,
    out: &Path,
    resume: bool,
) -> Result<()> {
    let file = TunerFile::load(config).with_context(|| format!("loading {}", config.display()))?;
    let seeds: Vec<u64> = (0..repeats).map(|i| seed + i).collect();
    let configs = seeds
        .iter()
        .map(|&s| file.tuner_config(strategy, budget, init_random, s))
        .collect::<rockstune::Result<Vec<_>>>()?;
    if !resume {
        if let Some(p) = seeds.iter().map(|&s| log_path(out, strategy, s)).find(|p| p.exists()) {
            bail!("{} already exists; pass --resume to continue it", p.display());
        }
    }

    // One default-config measurement per run set, shared by every header.
    let existing = seeds.iter().map(|&s| log_path(out, strategy, s)).find(|p| p.exists());
    let baseline = match existing {
        Some(p) => History::load(&p)?.baseline,
        None => measure_baseline(&file, objective, seed)?,
    };

    for tuner in &configs {
        let path = log_path(out, strategy, tuner.seed);
        let mut obj = make_objective(&file, objective, tuner.seed)?;
        let options = RunOptions {
            log_path: Some(path.clone()),
            resume,
            baseline: baseline.clone(),
        };
        let history = run(tuner, obj.as_mut(), &options).with_context(|| format!("run {}", path.display()))?;
        let best = history
            .best_so_far()
            .map(|b| {
                format!(
                    "best {} = {} at step {}",
                    history.primary(),
                    b.values[history.primary()],
                    b.step
                )
            })
            .unwrap_or_else(|_| "no successful trial".into());
        println!("{}: {} trials, {best}", path.display(), history.records.len());
    }
    Ok(())
}

fn report(logs: &[PathBuf], out: &Path) -> Result<()> {
    let inputs = if logs.is_empty() {
        vec![out.to_path_buf()]
    } else {
        logs.to_vec()
    };
    let mut paths = Vec::new();
    for input in &inputs {
        paths.extend(find_logs(input)?);
    }
    paths.sort();
    paths.dedup();
    let runs = load_runs(&paths)?;
    let root = (inputs.len() == 1 && inputs[0].is_dir()).then(|| inputs[0].as_path());
    write_report(&runs, root, out)?;
    println!(
        "{} logs -> {}, {}",
        runs.len(),
        out.join("convergence.csv").display(),
        out.join("summary.json").display()
    );
    Ok(())
}

fn replay_cmd(log: &Path, strategy: Option<Strategy>, json: bool) -> Result<()> {
    let history = History::load(log)?;
    if let Some(s) = strategy {
        if s != history.tuner.strategy {
            bail!(
                "{} was produced by strategy {}, not {s}",
                log.display(),
                history.tuner.strategy
            );
        }
    }
    let rep = replay(&history)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&rep)?);
    } else {
        print!("{}", rep.render());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune {
            config,
            strategy,
            budget,
            init_random,
            repeats,
            seed,
            objective,
            out,
            resume,
        } => tune(&config, strategy, budget, init_random, repeats, seed, objective, &out, resume),
        Command::Report { logs, out } => report(&logs, &out),
        Command::Replay { log, strategy, json } => replay_cmd(&log, strategy, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
