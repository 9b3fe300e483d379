//! Command-line driver: task-pool generation, gradient estimation, subset
//! selection, full experiment runs, and report aggregation.
//!
//! Exit codes: 0 on success, 2 on configuration or input errors, 3 on
//! numeric failures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use derts::error::{Error, Result};
use derts::gradest::{estimates_from_csv, estimates_to_csv, estimate_pool, EstimateMode};
use derts::harness::{
    read_results_csv, report, run_experiment, run_noise_suite, write_metrics_csv, write_results_csv,
    ExperimentConfig, Suite,
};
use derts::metalearn::{Algo, MetaModel};
use derts::nn::Mlp;
use derts::select::{select_from_estimates, subset_to_csv, SelectMode, SelectionConfig, ThresholdSource};
use derts::tasks::{fill_pool, pool_from_csv, pool_to_csv};

#[derive(Parser)]
#[command(name = "derts", about = "Weighted task selection for meta-learning on synthetic few-shot tasks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task pool from a config and write it as CSV.
    GenTasks {
        /// Experiment config file (flat key = value).
        #[arg(long)]
        config: PathBuf,
        /// Output pool CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the first config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate per-task gradients for a pool CSV and write an estimates CSV.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Pool CSV produced by gen-tasks.
        #[arg(long)]
        pool: PathBuf,
        /// Model file (text format). A fresh seeded model is used when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's estimator mode (at-meta | after-adapt).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Select a weighted subset from an estimates CSV.
    Select {
        /// Estimates CSV produced by `estimate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subset size.
        #[arg(long)]
        k: usize,
        /// exact | stochastic
        #[arg(long, default_value = "exact")]
        mode: String,
        /// Stochastic-greedy accuracy parameter.
        #[arg(long = "sg-eps", default_value_t = 0.01)]
        sg_eps: f64,
        /// Apply the gradient-norm noise filter.
        #[arg(long)]
        noise: bool,
        /// Noise threshold multiplier (h = tau * mean norm).
        #[arg(long, default_value_t = 1.25)]
        tau: f64,
        /// Threshold norms over the pool or the subset.
        #[arg(long, default_value = "pool")]
        tau_source: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the configured experiment (or noise suite) and write results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Deterministic results CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Timing metrics sidecar path (default: `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save the final model of each seed (seed suffix added when the
        /// config has several).
        #[arg(long = "save-model")]
        save_model: Option<PathBuf>,
    },
    /// Aggregate a results CSV into summary.csv and curves.csv.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Ok(seed) = std::env::var("DERTS_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("DERTS_SEED must be an integer, got {seed:?}")))?;
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn cmd_gen_tasks(config: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = derts::tasks::SyntheticDistribution::new(cfg.num_classes, cfg.feature_dim, cfg.class_std, &mut rng)?;
    let dist = if cfg.allowed_class_count() < cfg.num_classes {
        dist.with_allowed_classes((0..cfg.allowed_class_count()).collect())?
    } else {
        dist
    };
    let noise = cfg.resolved_noise()?;
    let pool = fill_pool(&dist, cfg.way, cfg.shots(), cfg.pool_size, noise.as_ref(), &mut rng)?;
    let mut w = BufWriter::new(File::create(&out)?);
    pool_to_csv(&pool, &mut w)?;
    w.flush()?;
    eprintln!("wrote {} tasks to {}", cfg.pool_size, out.display());
    Ok(())
}

fn cmd_estimate(
    config: PathBuf,
    pool_path: PathBuf,
    model_path: Option<PathBuf>,
    out: PathBuf,
    mode: Option<String>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let mut pool = pool_from_csv(&mut BufReader::new(File::open(&pool_path)?))?;
    let mode = match mode {
        Some(m) => m.parse::<EstimateMode>()?,
        None => cfg.estimator,
    };
    let net = match model_path {
        Some(p) => Mlp::load(&mut BufReader::new(File::open(&p)?))?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
            rng.set_stream(2); // model-init stream, matching `run`
            match cfg.algo {
                Algo::Anil => MetaModel::anil(cfg.feature_dim, &cfg.hidden_dims, cfg.way, &mut rng)?.into_net(),
                Algo::ProtoNet => MetaModel::protonet(cfg.feature_dim, &cfg.hidden_dims, &mut rng)?.into_net(),
            }
        }
    };
    let model = MetaModel::from_net(net, cfg.algo)?;
    if cfg.algo == Algo::Anil {
        let way = pool.tasks.first().map(|t| t.way).unwrap_or(cfg.way);
        if model.way() != Some(way) {
            return Err(Error::Config(format!(
                "model head emits {:?} classes but tasks are {way}-way",
                model.way()
            )));
        }
    }
    estimate_pool(&model, &mut pool, cfg.algo, mode, &cfg.inner_cfg())?;
    let mut w = BufWriter::new(File::create(&out)?);
    estimates_to_csv(&pool.estimates, &mut w)?;
    w.flush()?;
    eprintln!("wrote {} estimates to {}", pool.estimates.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_select(
    input: PathBuf,
    out: PathBuf,
    k: usize,
    mode: String,
    sg_eps: f64,
    noise: bool,
    tau: f64,
    tau_source: String,
    seed: u64,
) -> Result<()> {
    let estimates = estimates_from_csv(&mut BufReader::new(File::open(&input)?))?;
    let sel = SelectionConfig {
        k_select: k,
        mode: mode.parse::<SelectMode>()?,
        sg_epsilon: sg_eps,
        noise_flag: noise,
        threshold_multiplier: tau,
        threshold_source: match tau_source.as_str() {
            "pool" => ThresholdSource::PoolMean,
            "subset" => ThresholdSource::SubsetMean,
            other => return Err(Error::Config(format!("unknown tau source {other:?}"))),
        },
        seed,
    };
    let subset = select_from_estimates(&estimates, &sel)?;
    let mut w = BufWriter::new(File::create(&out)?);
    subset_to_csv(&subset, &mut w)?;
    w.flush()?;
    eprintln!(
        "selected {} tasks ({} dropped) into {}",
        subset.indices.len(),
        subset.dropped.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(config: PathBuf, out: PathBuf, metrics: Option<PathBuf>, save_model: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let rows = match cfg.suite {
        Suite::Single => run_experiment(&cfg)?,
        Suite::Noise => run_noise_suite(&cfg)?,
    };
    let mut w = BufWriter::new(File::create(&out)?);
    write_results_csv(&rows, &mut w)?;
    w.flush()?;
    let metrics_path = metrics.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let mut w = BufWriter::new(File::create(&metrics_path)?);
    write_metrics_csv(&rows, &mut w)?;
    w.flush()?;
    eprintln!("wrote {} rows to {} (timings in {})", rows.len(), out.display(), metrics_path.display());
    if let Some(base) = save_model {
        save_final_models(&cfg, &base)?;
    }
    Ok(())
}

/// Re-runs each seed's training to its final model and saves it. Training is
/// deterministic, so this reproduces the `run` trajectory exactly.
fn save_final_models(cfg: &ExperimentConfig, base: &PathBuf) -> Result<()> {
    for &seed in &cfg.seeds {
        let mut single = cfg.clone();
        single.seeds = vec![seed];
        let model = derts::harness::final_model(&single, seed)?;
        let path = if cfg.seeds.len() == 1 {
            base.clone()
        } else {
            let mut p = base.clone().into_os_string();
            p.push(format!(".seed{seed}"));
            PathBuf::from(p)
        };
        let mut w = BufWriter::new(File::create(&path)?);
        model.net().save(&mut w)?;
        w.flush()?;
        eprintln!("saved model for seed {seed} to {}", path.display());
    }
    Ok(())
}

fn cmd_report(input: PathBuf, out_dir: PathBuf) -> Result<()> {
    let rows = read_results_csv(&mut BufReader::new(File::open(&input)?))?;
    report(&rows, &out_dir)?;
    eprintln!("wrote summary.csv and curves.csv to {}", out_dir.display());
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTasks { config, out, seed } => cmd_gen_tasks(config, out, seed),
        Command::Estimate { config, pool, model, out, mode } => cmd_estimate(config, pool, model, out, mode),
        Command::Select { input, out, k, mode, sg_eps, noise, tau, tau_source, seed } => {
            cmd_select(input, out, k, mode, sg_eps, noise, tau, tau_source, seed)
        }
        Command::Run { config, out, metrics, save_model } => cmd_run(config, out, metrics, save_model),
        Command::Report { input, out_dir } => cmd_report(input, out_dir),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
