use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qfl_core::orchestrator::{
    overhead_report, run_federated, shard_clients, write_metrics_csv, Dataset, FedConfig,
    RunOutput, RunSummary,
};
use qfl_core::protocol::diagnostics;
use rayon::prelude::*;

mod config;

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "qfl",
    version,
    about = "Personalized quantum federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment and write its metrics.
    Train {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run every (alpha, clients, personalized) cell of a grid.
    Sweep {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
        clients: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 10.0, 100.0])]
        alpha: Vec<f64>,
        /// Cells run at the same time.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also write per-round losses for the three training scenarios at
        /// the first grid point.
        #[arg(long)]
        loss_curves: bool,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Print the time and storage cost model for a configuration.
    Overhead {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        clients: Option<usize>,
    },
    /// Check the aggregation channel: exactness, local mixedness, shot noise.
    ProtocolCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Repetitions per shot count for the noise fit.
        #[arg(long, default_value_t = 200)]
        repetitions: usize,
    },
    /// Show how the Dirichlet split distributes labels over clients.
    PartitionStats {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn with_grid_point(mut c: FedConfig, clients: Option<usize>, alpha: Option<f64>) -> FedConfig {
    if let Some(m) = clients {
        c.clients = m;
    }
    if let Some(a) = alpha {
        c.alpha = a;
    }
    c
}

fn run(config: &FedConfig) -> Result<RunOutput> {
    config.validate()?;
    config::check_data(config)?;
    let dataset = Dataset::load(config)?;
    Ok(run_federated(config, &dataset)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_run(dir: &Path, config: &FedConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config::echo(config)?)?;
    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&mut w, config.clients, &out.metrics)?;
    w.flush()?;
    let mut w = create(&dir.join("transcript.jsonl"))?;
    for t in &out.transcripts {
        t.write_jsonl(&mut w)?;
    }
    w.flush()?;
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &RunSummary::new(config, out))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn train(config: &FedConfig, out_dir: &Path) -> Result<()> {
    let out = run(config)?;
    write_run(out_dir, config, &out)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "round {}: server_acc {:.4}, mean_client_acc {:.4}, objective {:.4}",
            last.round,
            last.server_acc,
            last.mean_client_acc(),
            last.global_objective
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

struct CellResult {
    alpha: f64,
    clients: usize,
    personalized: bool,
    outcome: Result<(f64, f64)>,
}

fn sweep(
    base: &FedConfig,
    alphas: &[f64],
    clients: &[usize],
    workers: usize,
    loss_curves: bool,
    out_dir: &Path,
) -> Result<bool> {
    anyhow::ensure!(!alphas.is_empty() && !clients.is_empty(), "empty grid");
    config::check_data(base)?;
    fs::create_dir_all(out_dir)?;
    let cells: Vec<FedConfig> = alphas
        .iter()
        .flat_map(|&a| clients.iter().map(move |&m| (a, m)))
        .flat_map(|(a, m)| {
            [true, false].map(|p| FedConfig {
                alpha: a,
                clients: m,
                personalized: p,
                ..base.clone()
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let name = format!(
                    "alpha{}_m{}_{}",
                    c.alpha,
                    c.clients,
                    if c.personalized { "pers" } else { "base" }
                );
                let outcome = run(c).and_then(|out| {
                    write_run(&out_dir.join(name), c, &out)?;
                    let last = out.metrics.last().context("no rounds were run")?;
                    Ok((last.server_acc, last.mean_client_acc()))
                });
                CellResult {
                    alpha: c.alpha,
                    clients: c.clients,
                    personalized: c.personalized,
                    outcome,
                }
            })
            .collect()
    });

    let mut w = create(&out_dir.join("combined.csv"))?;
    writeln!(w, "alpha,M,personalized,server_acc,mean_client_acc")?;
    let mut ok = true;
    for r in &results {
        match &r.outcome {
            Ok((s, c)) => writeln!(w, "{},{},{},{s},{c}", r.alpha, r.clients, r.personalized)?,
            Err(e) => {
                ok = false;
                eprintln!(
                    "cell alpha={} M={} personalized={} failed: {e:#}",
                    r.alpha, r.clients, r.personalized
                );
                writeln!(w, "{},{},{},,", r.alpha, r.clients, r.personalized)?;
            }
        }
    }
    w.flush()?;

    if loss_curves {
        let at = FedConfig {
            alpha: alphas[0],
            clients: clients[0],
            ..base.clone()
        };
        let scenarios = [
            FedConfig {
                personalized: true,
                ..at.clone()
            },
            FedConfig {
                personalized: false,
                ..at.clone()
            },
            FedConfig {
                clients: 1,
                personalized: false,
                ..at
            },
        ];
        let curves: Vec<Vec<f64>> = pool.install(|| {
            scenarios
                .par_iter()
                .map(|c| Ok(run(c)?.metrics.iter().map(|m| m.global_objective).collect()))
                .collect::<Result<_>>()
        })?;
        let mut w = create(&out_dir.join("loss_curves.csv"))?;
        writeln!(
            w,
            "round,with_personalized,without_personalized,without_federated"
        )?;
        let rows = curves[0].iter().zip(&curves[1]).zip(&curves[2]);
        for (r, ((a, b), c)) in rows.enumerate() {
            writeln!(w, "{},{a},{b},{c}", r + 1)?;
        }
        w.flush()?;
    }
    println!("wrote {}", out_dir.display());
    Ok(ok)
}

fn protocol_check(seed: u64, repetitions: usize) -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let err =
        diagnostics::ideal_uplink_error(100, &[2, 4, 8], 48, std::f64::consts::PI - 0.05, seed)?;
    line(
        "ideal round trip",
        err < 1e-9,
        format!("max error {err:.3e} (limit 1e-9)"),
    );
    let dev = diagnostics::max_local_deviation(50, &[2, 4, 8], seed)?;
    line(
        "local mixedness",
        dev < 1e-10,
        format!("max deviation from I/2 {dev:.3e} (limit 1e-10)"),
    );
    let fit = diagnostics::shot_noise_fit(
        std::f64::consts::FRAC_PI_2,
        &[100, 1000, 10_000],
        repetitions,
        seed,
    )?;
    let points: Vec<String> = fit
        .points
        .iter()
        .map(|(r, v)| format!("R={r} var={v:.3e}"))
        .collect();
    line(
        "shot noise",
        (fit.slope + 1.0).abs() <= 0.2,
        format!(
            "slope {:.3} (expected -1 +/- 0.2); {}",
            fit.slope,
            points.join(", ")
        ),
    );
    Ok(ok)
}

fn partition_stats(config: &FedConfig) -> Result<()> {
    config.validate()?;
    config::check_data(config)?;
    let dataset = Dataset::load(config)?;
    let shards = shard_clients(config, &dataset.train)?;
    println!("client,label_0,label_1,total,share_0,share_1");
    for (m, [a, b]) in shards.label_counts.iter().enumerate() {
        println!(
            "{m},{a},{b},{},{:.4},{:.4}",
            a + b,
            shards.matrix.d[0][m],
            shards.matrix.d[1][m]
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            clients,
            alpha,
            out,
        } => config::load(&common)
            .map(|c| with_grid_point(c, clients, alpha))
            .and_then(|c| train(&c, &out))
            .map(|()| true),
        Command::Sweep {
            common,
            clients,
            alpha,
            workers,
            loss_curves,
            out,
        } => config::load(&common)
            .and_then(|c| sweep(&c, &alpha, &clients, workers, loss_curves, &out)),
        Command::Overhead { common, clients } => config::load(&common).and_then(|c| {
            let c = with_grid_point(c, clients, None);
            println!("{}", serde_json::to_string_pretty(&overhead_report(&c))?);
            Ok(true)
        }),
        Command::ProtocolCheck { seed, repetitions } => protocol_check(seed, repetitions),
        Command::PartitionStats {
            common,
            clients,
            alpha,
        } => config::load(&common)
            .map(|c| with_grid_point(c, clients, alpha))
            .and_then(|c| partition_stats(&c))
            .map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
