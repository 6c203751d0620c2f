use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use coevo::harness::{self, RunKind};
use coevo::{HarnessError, RunConfig};
use coevo_core::gradcheck;

/// Co-evolving item tokenizer and generative recommender.
///
/// Every run-producing subcommand takes an optional config file of
/// `key = value` lines, then `--key=value` overrides for any config key
/// (e.g. `--world.users=100 --index.gamma=0.8`). Exit codes: 0 success,
/// 1 config error, 2 data error, 3 invariant violation.
#[derive(Parser)]
#[command(name = "coevo", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines (a run's manifest.txt works too).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every component's seed derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to write.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Event file to train on instead of synthetic data (needs --catalog).
    #[arg(long, requires = "catalog")]
    events: Option<PathBuf>,
    /// Catalog of item content features matching --events.
    #[arg(long, requires = "events")]
    catalog: Option<PathBuf>,
    /// Config overrides, each `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and event stream (events.tsv, catalog.tsv).
    Synth(RunArgs),
    /// Phase 1 until the validation loss plateaus; writes a run directory.
    Warmup(RunArgs),
    /// Phase 1 then the dynamic co-evolution phase; writes a run directory.
    Coevolve(RunArgs),
    /// Recompute ranking and codebook metrics from a run's checkpoint and index.
    Eval {
        /// Run directory written by `warmup` or `coevolve`.
        #[arg(long)]
        run: PathBuf,
        /// Also write summary.csv / entropy_series.csv for the run.
        #[arg(long)]
        report: bool,
    },
    /// Print link and churn statistics of a run's beam index.
    InspectIndex {
        #[arg(long)]
        run: PathBuf,
        /// Also print every link.
        #[arg(long)]
        dump: bool,
    },
    /// Per-level codebook entropy and density, warm-up vs. final index.
    EntropyReport {
        #[arg(long)]
        run: PathBuf,
        /// Count every alias instead of each item's top-weight SID.
        #[arg(long)]
        all_aliases: bool,
    },
    /// Finite-difference check of every primitive and loss graph.
    Gradcheck {
        /// Number of seeds to run.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for (key, path) in [("data.events", &args.events), ("data.catalog", &args.catalog)] {
        if let Some(path) = path {
            let abs = std::fs::canonicalize(path).map_err(|e| HarnessError::io(path, e))?;
            cfg.set(key, &abs.to_string_lossy())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(label: &str, row: &harness::EvalRow) {
    let h: Vec<String> = row.entropy.iter().map(|v| format!("{v:.3}")).collect();
    let d: Vec<String> = row.density.iter().map(|v| format!("{v:.3}")).collect();
    println!(
        "{label:<10} step {:>6}  R@5 {:.4}  R@10 {:.4}  N@5 {:.4}  N@10 {:.4}  H [{}]  density [{}]",
        row.step,
        row.recall_at(5),
        row.recall_at(10),
        row.ndcg_at(5),
        row.ndcg_at(10),
        h.join(" "),
        d.join(" ")
    );
}

fn train(args: &RunArgs, kind: RunKind) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let t0 = Instant::now();
    let out = harness::run(&cfg, kind, &args.out)?;
    println!("run directory {}", out.run_dir.display());
    println!("popularity R@10 {:.4}  N@10 {:.4}", out.baseline.0[1], out.baseline.1[1]);
    print_row("warm-up", &out.warmup);
    if let Some(row) = &out.final_row {
        print_row("dynamic", row);
        println!("index invariants checked after each of {} dynamic steps", out.invariant_checks);
    }
    println!("{} warm-up steps, {:.1?}", out.warmup_steps, t0.elapsed());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = load_config(&args)?;
            let data = harness::synth(&cfg, &args.out)?;
            println!("{} events, {} items -> {}", data.events.len(), data.content.len(), args.out.display());
        }
        Command::Warmup(args) => train(&args, RunKind::Warmup)?,
        Command::Coevolve(args) => train(&args, RunKind::Coevolve)?,
        Command::Eval { run, report } => {
            let row = harness::eval(&run)?;
            println!("{}", harness::EvalRow::csv_header(row.entropy.len()));
            println!("{}", row.csv_row());
            if report {
                let rep = harness::report(&run)?;
                for w in &rep.warnings {
                    eprintln!("warning: {w}");
                }
            }
        }
        Command::InspectIndex { run, dump } => print!("{}", harness::inspect_index(&run, dump)?),
        Command::EntropyReport { run, all_aliases } => print!("{}", harness::entropy_report(&run, all_aliases)?.to_csv()),
        Command::Gradcheck { seeds, seed } => {
            let t0 = Instant::now();
            let mut worst: Vec<(&'static str, f64)> = Vec::new();
            for s in seed..seed + seeds {
                let reports = gradcheck::suite(s).map_err(HarnessError::from_core).with_context(|| format!("seed {s}"))?;
                for r in reports {
                    match worst.iter_mut().find(|(n, _)| *n == r.name) {
                        Some(w) => w.1 = w.1.max(r.max_rel_err),
                        None => worst.push((r.name, r.max_rel_err)),
                    }
                }
            }
            let mut failed = 0;
            for (name, err) in &worst {
                let ok = *err < gradcheck::TOLERANCE;
                failed += usize::from(!ok);
                println!("{:<18} max rel err {err:.2e}  {}", name, if ok { "ok" } else { "FAIL" });
            }
            println!("{seeds} seeds, eps {:e}, {:.1?}", gradcheck::SUITE_EPS, t0.elapsed());
            if failed > 0 {
                return Err(HarnessError::Invariant(format!("{failed} gradient checks above tolerance")).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<HarnessError>().map_or(2, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
