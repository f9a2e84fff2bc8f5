use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qpair::harness::{
    default_config, load_config, run_experiment, write_config, EstimationReport, RunOptions, Task,
};

#[derive(Parser)]
#[command(
    name = "qpair",
    version,
    about = "Single-preparation estimation experiments on two coupled qubits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process tomography at 4τ₁ from campaigns at τ₁ and 2τ₁.
    Bqpt(Common),
    /// Estimate Jxy and Jz, repeated over independent runs.
    Bhpe(Common),
    /// Adapt a separator, then restore fresh product and entangled states.
    Bqss(Common),
    /// Classify register states by swap-test overlaps.
    Classify {
        #[command(flatten)]
        common: Common,
        /// CSV of class references: class id, then re/im pairs.
        #[arg(long, requires = "queries")]
        classes: Option<PathBuf>,
        /// CSV of queries: query id, then re/im pairs.
        #[arg(long, requires = "classes")]
        queries: Option<PathBuf>,
    },
    /// Sweep K over divisors of the configured N·K products.
    Figdata(Common),
    /// Print the default configuration.
    DefaultConfig {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// States per campaign.
    #[arg(long = "N")]
    n: Option<u64>,
    /// Preparations per state.
    #[arg(long = "K")]
    k: Option<u64>,
    #[arg(long)]
    runs: Option<u64>,
    /// Report 0 wall-clock seconds so outputs are byte-identical across runs.
    #[arg(long)]
    no_wall_clock: bool,
    /// Read count tables from `<dir>/run_<id>/` instead of simulating.
    #[arg(long, conflicts_with = "dump_counts")]
    counts: Option<PathBuf>,
    /// Write simulated count tables to `<dir>/run_<id>/`.
    #[arg(long)]
    dump_counts: Option<PathBuf>,
}

fn run(task: Task, c: Common, classes: Option<PathBuf>, queries: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => default_config(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.n {
        cfg.budget.n = n;
    }
    if let Some(k) = c.k {
        cfg.budget.k = k;
    }
    if let Some(r) = c.runs {
        cfg.budget.runs = r;
    }
    let opts = RunOptions {
        out_dir: c.out.clone(),
        no_wall_clock: c.no_wall_clock,
        counts_in: c.counts,
        dump_counts: c.dump_counts,
        classes_csv: classes,
        queries_csv: queries,
    };
    let report = run_experiment(&cfg, task, &opts).with_context(|| format!("running {task}"))?;
    summarize(&report);
    println!("outputs written to {}", c.out.display());
    Ok(())
}

fn show(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "NA".into())
}

fn summarize(r: &EstimationReport) {
    for a in &r.aggregates {
        println!(
            "{} N={} K={} runs={} nrmse_jxy={} nrmse_jz={} rejections={}",
            a.task,
            a.n,
            a.k,
            a.runs,
            show(a.nrmse_jxy),
            show(a.nrmse_jz),
            a.rejections
        );
    }
    if let Some(e) = r.max_process_error {
        println!("max process error {e:.3e}");
    }
    for (kind, s) in [
        ("product", &r.fidelity_product),
        ("entangled", &r.fidelity_entangled),
    ] {
        if let Some(s) = s {
            println!(
                "{kind} fidelity: mean {:.6} min {:.6} over {}",
                s.mean, s.min, s.count
            );
        }
    }
    if let Some(c) = &r.classification {
        println!(
            "classified {} queries, {} rejected, agreement with exact overlaps {:.3}",
            c.queries, c.rejected, c.agreement
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Bqpt(c) => run(Task::Bqpt, c, None, None),
        Command::Bhpe(c) => run(Task::Bhpe, c, None, None),
        Command::Bqss(c) => run(Task::Bqss, c, None, None),
        Command::Classify {
            common,
            classes,
            queries,
        } => run(Task::Classify, common, classes, queries),
        Command::Figdata(c) => run(Task::Figdata, c, None, None),
        Command::DefaultConfig { out } => {
            let cfg = default_config();
            match out {
                Some(p) => write_config(&p, &cfg)?,
                None => print!("{}", qpair::harness::serialize_config(&cfg)),
            }
            Ok(())
        }
    }
}
