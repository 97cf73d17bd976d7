//! Command-line interface: instance generation, clearing, the centralized
//! oracle, and the three study harnesses.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use p2pclear_core::clearing::{self, ClearingConfig, EtaPolicy, NetworkMode};
use p2pclear_core::experiments::{self, GridTemplate, Method, ScenarioSpec};
use p2pclear_core::instance::Instance;
use p2pclear_core::oracle;
use p2pclear_core::selection::{self, SelectionConfig};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "p2pclear",
    about = "Peer-to-peer electricity market clearing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a market instance from a seeded scenario.
    Gen(GenArgs),
    /// Clear a market instance with the distributed engine.
    Solve(SolveArgs),
    /// Solve the centralized social-welfare program.
    Oracle(OracleArgs),
    /// Run several clearing methods on one instance and compare them.
    Compare(CompareArgs),
    /// Monte Carlo partner-pruning study.
    Montecarlo(MontecarloArgs),
    /// Sweep the selection benchmark.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Grid template: none | chain | ieee15.
    #[arg(long, default_value = "none")]
    template: String,
    #[arg(long, default_value_t = 7)]
    producers: usize,
    #[arg(long, default_value_t = 7)]
    consumers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output instance file.
    #[arg(long, default_value = "instance.json")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// Constant step size; the default rule is the per-edge 1/L bound.
    #[arg(long)]
    eta: Option<f64>,
    /// Stopping tolerance on every per-edge |x - y|.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Run the accelerated variant (default).
    #[arg(long, conflicts_with = "plain")]
    accelerated: bool,
    /// Run the non-accelerated baseline.
    #[arg(long)]
    plain: bool,
    /// Prune trading partners before clearing; the optional value is the
    /// normalized-coefficient benchmark in [-1, 1].
    #[arg(long, num_args = 0..=1, default_missing_value = "0", require_equals = true, allow_hyphen_values = true)]
    select: Option<f64>,
    /// Proximal damping weight.
    #[arg(long)]
    rho: Option<f64>,
    /// report-only | penalty.
    #[arg(long)]
    network_mode: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Enforce grid voltage and flow limits in the program.
    #[arg(long)]
    network: bool,
    /// KKT residual tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value = "oracle.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Comma-separated methods: plain, accelerated, accelerated+selection.
    #[arg(long, default_value = "plain,accelerated,accelerated+selection")]
    methods: String,
}

#[derive(Args)]
struct MontecarloArgs {
    #[command(flatten)]
    run: RunOpts,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOpts,
    /// Comma-separated benchmark values in [-1, 1].
    #[arg(long, allow_hyphen_values = true, default_value = "-1,-0.75,-0.5,-0.25,0,0.25,0.5,0.75,1")]
    benchmarks: String,
}

fn load_instance(opts: &RunOpts) -> Result<(Instance, ClearingConfig)> {
    let inst = Instance::load(&opts.instance)
        .with_context(|| format!("loading {}", opts.instance.display()))?;
    let mut cfg = inst.clearing.clone();
    if let Some(eta) = opts.eta {
        cfg.eta = EtaPolicy::Constant(eta);
    }
    if let Some(eps) = opts.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(mi) = opts.max_iter {
        cfg.max_iter = mi;
    }
    if opts.plain {
        cfg.accelerated = false;
    } else if opts.accelerated {
        cfg.accelerated = true;
    }
    if let Some(rho) = opts.rho {
        cfg.rho = rho;
    }
    if let Some(mode) = &opts.network_mode {
        cfg.network_mode = match mode.as_str() {
            "report-only" => NetworkMode::ReportOnly,
            "penalty" => NetworkMode::Penalty,
            other => bail!("unknown network mode '{}'", other),
        };
    }
    Ok((inst, cfg))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => {
            let template = match args.template.as_str() {
                "none" => GridTemplate::None,
                "chain" => GridTemplate::Chain,
                "ieee15" => GridTemplate::Ieee15,
                other => bail!("unknown template '{}'", other),
            };
            let spec = ScenarioSpec {
                n_producers: args.producers,
                n_consumers: args.consumers,
                grid: template,
                seed: args.seed,
                ..ScenarioSpec::default()
            };
            let inst = experiments::gen_instance(&spec)?;
            inst.save(&args.out)?;
            println!(
                "wrote {} ({} producers, {} consumers, {} edges, spec hash {})",
                args.out.display(),
                inst.producers.len(),
                inst.consumers.len(),
                inst.graph.edge_count(),
                inst.spec_hash.as_deref().unwrap_or("-")
            );
        }
        Command::Solve(args) => {
            let (mut inst, cfg) = load_instance(&args.run)?;
            let mut selection_note = None;
            if let Some(benchmark) = args.run.select {
                let sel = SelectionConfig { benchmark, ..SelectionConfig::default() };
                let (pruned, report) = selection::apply_selection(&inst.graph, &sel)?;
                selection_note = Some(report);
                inst = inst.with_graph(pruned)?;
            }
            let res = clearing::run(&inst, &cfg)?;
            ensure_dir(&args.run.out)?;
            let trace_path = args.run.out.join("trace.csv");
            clearing::write_trace_csv(fs::File::create(&trace_path)?, &res.trace)?;
            let mut summary = serde_json::to_value(&res)?;
            if let Some(report) = selection_note {
                summary["selection"] = serde_json::to_value(report)?;
            }
            if let Some(hash) = &inst.spec_hash {
                summary["spec_hash"] = serde_json::Value::String(hash.clone());
            }
            let summary_path = args.run.out.join("summary.json");
            fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
            for w in &res.warnings {
                eprintln!("warning: {}", w);
            }
            println!(
                "{} in {} iterations ({:.1} ms), welfare {:.4}; wrote {} and {}",
                if res.converged { "converged" } else { "NOT converged" },
                res.iterations,
                res.wall_ms,
                res.welfare,
                trace_path.display(),
                summary_path.display()
            );
        }
        Command::Oracle(args) => {
            let inst = Instance::load(&args.instance)?;
            let sol = oracle::solve_centralized(&inst, args.network, args.tol)?;
            fs::write(&args.out, serde_json::to_string_pretty(&sol)?)?;
            println!(
                "welfare {:.6}, KKT residual {:.2e}; wrote {}",
                sol.welfare,
                sol.kkt_residual,
                args.out.display()
            );
        }
        Command::Compare(args) => {
            let (inst, cfg) = load_instance(&args.run)?;
            let methods: Vec<Method> = args
                .methods
                .split(',')
                .map(|m| match m.trim() {
                    "plain" => Ok(Method::Plain),
                    "accelerated" => Ok(Method::Accelerated),
                    "accelerated+selection" => Ok(Method::AcceleratedSelection),
                    other => bail!("unknown method '{}'", other),
                })
                .collect::<Result<_>>()?;
            let sel = SelectionConfig {
                benchmark: args.run.select.unwrap_or(0.0),
                ..SelectionConfig::default()
            };
            let report = experiments::run_compare(&inst, &methods, &cfg, &sel)?;
            ensure_dir(&args.run.out)?;
            let path = args.run.out.join("compare.csv");
            experiments::write_compare_csv(fs::File::create(&path)?, &report)?;
            for row in &report.rows {
                println!(
                    "{:<22} converged={} iterations={} wall_ms={:.1} welfare={:.4} edges={}",
                    row.method, row.converged, row.iterations, row.wall_ms, row.welfare, row.edges
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Montecarlo(args) => {
            let (inst, _) = load_instance(&args.run)?;
            let records = experiments::run_montecarlo(&inst, args.trials, args.seed)?;
            ensure_dir(&args.run.out)?;
            let path = args.run.out.join("montecarlo.csv");
            experiments::write_montecarlo_csv(fs::File::create(&path)?, &records)?;
            let pairs: Vec<f64> = records.iter().map(|r| r.pairs as f64).collect();
            let welfare: Vec<f64> = records.iter().map(|r| r.welfare).collect();
            println!(
                "{} trials, Spearman(pairs, welfare) = {:.3}; wrote {}",
                records.len(),
                experiments::spearman(&pairs, &welfare),
                path.display()
            );
        }
        Command::Sweep(args) => {
            let (inst, cfg) = load_instance(&args.run)?;
            let benchmarks: Vec<f64> = args
                .benchmarks
                .split(',')
                .map(|b| b.trim().parse::<f64>().context("parsing benchmark"))
                .collect::<Result<_>>()?;
            let records = experiments::run_benchmark_sweep(&inst, &benchmarks, &cfg)?;
            ensure_dir(&args.run.out)?;
            let path = args.run.out.join("sweep.csv");
            experiments::write_sweep_csv(fs::File::create(&path)?, &records)?;
            for r in &records {
                println!(
                    "benchmark {:+.2}: edges {:3} welfare {:.4} iterations {}",
                    r.benchmark, r.edges, r.welfare, r.iterations
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
