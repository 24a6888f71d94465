//! Command-line front end: train, simulate, svcca, report, bench.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use frostune::harness::config::RunConfig;
use frostune::harness::report::{load_run_state, recompute_svcca, write_artifacts};
use frostune::harness::scenario::{run_scenario, scenario_csv, Scenario};
use frostune::harness::train::train;
use frostune::nn::{backward, flop_count, forward, loss_grad, Model};
use frostune::{Activation, Matrix};
use rand::SeedableRng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "frostune",
    version,
    about = "Adaptive layer-freezing training engine and distributed fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fine-tuning experiment and write its report files.
    Train {
        /// Run configuration file (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for reports, checkpoints, and cache spill.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key (repeatable): --set train.lr=0.01
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep a cluster scenario over its freezing boundaries.
    Simulate {
        /// Scenario file describing the cluster, model profile, and sweep.
        #[arg(long)]
        config: PathBuf,
        /// Write sweep.csv and outcomes.json here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one scenario key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare a run's online freezing schedule against the hindsight oracle.
    Svcca {
        /// Run directory containing run_state.json (and checkpoints/).
        #[arg(long)]
        run: PathBuf,
        /// Re-score convergence at a different threshold (needs checkpoints).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Regenerate the report files from a run directory's saved state.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Recompute the oracle column from activation checkpoints.
        #[arg(long)]
        recompute: bool,
    },
    /// Time the dense engine's forward/backward passes on this machine.
    Bench {
        /// Timed steps per shape.
        #[arg(long, default_value_t = 30)]
        iters: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, seed, set } => cmd_train(config, &out, seed, set),
        Command::Simulate { config, out, set } => cmd_simulate(&config, out.as_deref(), set),
        Command::Svcca { run, threshold } => cmd_svcca(&run, threshold),
        Command::Report { run, recompute } => cmd_report(&run, recompute),
        Command::Bench { iters } => cmd_bench(iters),
    }
}

fn cmd_train(config: Option<PathBuf>, out: &Path, seed: Option<u64>, set: Vec<String>) -> Result<()> {
    let mut overrides = set;
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_text(&text, &path.display().to_string(), &overrides)?
        }
        None => RunConfig::from_text("", "<defaults>", &overrides)?,
    };
    std::fs::create_dir_all(out)?;
    let output = train(&cfg, Some(out))?;
    write_artifacts(out, &output.report)?;

    let s = &output.report.summary;
    println!("seed {}: final accuracy {:.4}, best {:.4}", s.seed, s.final_accuracy, s.best_accuracy);
    let schedule: Vec<String> = s.schedule.iter().map(|(i, b)| format!("{i}:{b}")).collect();
    println!(
        "frozen boundary {} of {} layers (schedule {})",
        s.final_boundary,
        cfg.hidden_layers,
        schedule.join(" ")
    );
    println!(
        "backward flops {} ({:.2}x below the never-freeze baseline)",
        s.total_backward_flops, s.backward_flop_reduction
    );
    println!(
        "simulated time {:.6}s ({:.2}x speedup over the baseline)",
        s.simulated_seconds, s.time_speedup
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_simulate(config: &Path, out: Option<&Path>, set: Vec<String>) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .with_context(|| format!("reading scenario {}", config.display()))?;
    let scenario = Scenario::from_text(&text, &config.display().to_string(), &set)?;
    let outcomes = run_scenario(&scenario)?;

    for o in &outcomes {
        println!(
            "boundary {:>3}: full {:>8.3}s/epoch on {} workers | cheap {:>8.3}s on {} ({:.2}x cost cut) | fast {:>8.3}s on {} ({:.2}x faster)",
            o.boundary,
            o.full.epoch_time,
            o.full.workers,
            o.efficiency.epoch_time,
            o.efficiency.workers,
            o.full.epoch_cost / o.efficiency.epoch_cost,
            o.performance.epoch_time,
            o.performance.workers,
            o.full.epoch_time / o.performance.epoch_time,
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), scenario_csv(&outcomes))?;
        let json = serde_json::to_string_pretty(&outcomes)?;
        std::fs::write(dir.join("outcomes.json"), json)?;
        println!("sweep.csv and outcomes.json written to {}", dir.display());
    } else {
        print!("{}", scenario_csv(&outcomes));
    }
    Ok(())
}

fn cmd_svcca(run: &Path, threshold: Option<f64>) -> Result<()> {
    let mut report = load_run_state(run)?;
    if let Some(t) = threshold {
        if report.checkpoint_dir.is_none() {
            bail!("this run kept no activation checkpoints; cannot re-score at a new threshold");
        }
        report.config.svcca_threshold = t;
    }
    if report.checkpoint_dir.is_some() {
        recompute_svcca(run, &mut report)?;
    }
    if report.svcca.is_empty() {
        bail!("run has no representation comparison (svcca.enabled was off)");
    }
    println!("interval  online  ideal  diff");
    let mut within_one = 0usize;
    for row in &report.svcca {
        let diff = row.online_boundary as i64 - row.ideal_boundary as i64;
        if diff.abs() <= 1 {
            within_one += 1;
        }
        println!(
            "{:>8}  {:>6}  {:>5}  {:>+4}",
            row.interval, row.online_boundary, row.ideal_boundary, diff
        );
    }
    println!(
        "online within one layer of the oracle at {}/{} intervals ({:.0}%)",
        within_one,
        report.svcca.len(),
        100.0 * within_one as f64 / report.svcca.len() as f64
    );
    Ok(())
}

fn cmd_report(run: &Path, recompute: bool) -> Result<()> {
    let mut report = load_run_state(run)?;
    if recompute {
        recompute_svcca(run, &mut report)?;
    }
    write_artifacts(run, &report)?;
    println!(
        "intervals.csv, summary.json, svcca_vs_online.csv, run_state.json rewritten in {}",
        run.display()
    );
    Ok(())
}

fn cmd_bench(iters: usize) -> Result<()> {
    if iters == 0 {
        bail!("--iters must be positive");
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>6} {:>6} {:>10} {:>10}", "layers", "width", "batch", "ms/step", "GFLOP/s");
    for (layers, width, batch) in [(4usize, 32usize, 32usize), (8, 64, 32), (8, 128, 64), (12, 128, 64)] {
        let hidden = vec![width; layers];
        let model = Model::random(width, &hidden, 10, Activation::Tanh, &mut rng)?;
        let rows = (0..batch)
            .map(|_| {
                (0..width)
                    .map(|_| frostune::harness::data::standard_normal(&mut rng))
                    .collect()
            })
            .collect();
        let input = Matrix::from_rows(rows)?;
        let labels: Vec<usize> = (0..batch).map(|r| r % 10).collect();

        let step = |model: &Model| -> Result<()> {
            let trace = forward(model, &input, 0)?;
            let (_, dlogits) = loss_grad(trace.logits(), &labels)?;
            backward(model, &trace, &dlogits, 0)?;
            Ok(())
        };
        for _ in 0..3 {
            step(&model)?; // warm up caches and the allocator
        }
        let start = std::time::Instant::now();
        for _ in 0..iters {
            step(&model)?;
        }
        let secs = start.elapsed().as_secs_f64();
        let flops = flop_count(&model, batch, 0, 0)?;
        let per_step = (flops.forward + flops.backward) as f64;
        println!(
            "{:>6} {:>6} {:>6} {:>10.3} {:>10.2}",
            layers,
            width,
            batch,
            1e3 * secs / iters as f64,
            per_step * iters as f64 / secs / 1e9
        );
    }
    Ok(())
}
