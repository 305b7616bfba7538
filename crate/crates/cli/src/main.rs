use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use singular_lq::selftest;
use singular_lq_cli::output::write_json;
use singular_lq_cli::{parse_config, run, Command};

#[derive(Parser)]
#[command(
    name = "singular-lq",
    version,
    about = "Singular matrix Riccati solvers and LQ control"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Penalized solve at the largest n of the schedule.
    Solve(RunArgs),
    /// Penalization ladder with monotonicity diagnostics.
    Ladder(RunArgs),
    /// Singular limit on [0, T − ε] with bound columns.
    Singular(RunArgs),
    /// Closed-form value and control for uncorrelated multiplicative increments.
    Umi(RunArgs),
    /// Near-terminal expansion Y = η/(T − t) + H/(T − t)².
    Expansion(RunArgs),
    /// Closed-loop strategy, constraint report and linear benchmark.
    Control(RunArgs),
    /// Singular limit with a hard bound audit.
    Audit(RunArgs),
    /// Runs the nine acceptance criteria.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct Threads {
    /// Worker threads for ladder rungs.
    #[arg(long, env = "SINGULAR_LQ_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Replaces the schedule with 1, 2, 4, …, 2^n.
    #[arg(long)]
    schedule_max: Option<u32>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct SelftestArgs {
    /// Writes `selftest.json` here when given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    threads: Threads,
}

fn init_pool(threads: &Threads) -> Result<(), String> {
    if let Some(n) = threads.threads {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run_command(command: Command, args: &RunArgs) -> Result<bool, String> {
    init_pool(&args.threads)?;
    let text = fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut config = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(eps) = args.epsilon {
        config.epsilon = Some(eps);
    }
    if let Some(n) = args.schedule_max {
        config.schedule = None;
        config.schedule_max = n;
    }
    config.validate().map_err(|e| e.to_string())?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let outcome = run(&config, command, &out).map_err(|e| e.to_string())?;
    write_timings(&out, &outcome.timings).map_err(|e| e.to_string())?;
    for (stage, secs) in &outcome.timings {
        eprintln!("{stage}: {secs:.3} s");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    for failure in &outcome.failures {
        eprintln!("FAILED {failure}");
    }
    Ok(outcome.success())
}

fn write_timings(out: &Path, timings: &[(String, f64)]) -> std::io::Result<()> {
    let map: serde_json::Map<String, serde_json::Value> =
        timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    write_json(&out.join("timings.json"), &map)
}

fn run_selftest(args: &SelftestArgs) -> Result<bool, String> {
    init_pool(&args.threads)?;
    let mut results = Vec::new();
    for (id, _) in selftest::CRITERIA {
        let r = selftest::criterion(id);
        println!("{}", r.line());
        results.push(r);
    }
    let pass = results.iter().all(|r| r.pass());
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| e.to_string())?;
        write_json(&out.join("selftest.json"), &results).map_err(|e| e.to_string())?;
    }
    println!(
        "{}/{} criteria pass",
        results.iter().filter(|r| r.pass()).count(),
        results.len()
    );
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Cmd::Solve(a) => run_command(Command::Solve, a),
        Cmd::Ladder(a) => run_command(Command::Ladder, a),
        Cmd::Singular(a) => run_command(Command::Singular, a),
        Cmd::Umi(a) => run_command(Command::Umi, a),
        Cmd::Expansion(a) => run_command(Command::Expansion, a),
        Cmd::Control(a) => run_command(Command::Control, a),
        Cmd::Audit(a) => run_command(Command::Audit, a),
        Cmd::Selftest(a) => run_selftest(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
