//! `ahier`: run, compare, verify and summarize adaptive hierarchy experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_hierarchy::harness::verify::{verify, VerifyOptions};
use adaptive_hierarchy::harness::{self, exit_code, Mode, RunConfig, RunOutcome, Scenario};
use adaptive_hierarchy::stats::render_text;
use adaptive_hierarchy::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ahier", version, about = "Adaptive model hierarchies with certified acceptance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream seeded queries through the adaptive hierarchy.
    Run(RunArgs),
    /// Same stream, answered by the most accurate model only.
    Baseline(RunArgs),
    /// Check the full-order solver, the reduced residuals and the error estimator.
    Verify(VerifyArgs),
    /// Summarize an existing results file.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Acceptance tolerance (TOL_grad for the opt-demo).
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Results CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Run n independent hierarchies on disjoint sub-streams, one file each.
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
    #[arg(long)]
    dump_basis: Option<PathBuf>,
    #[arg(long)]
    dump_training: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, hide = true)]
    sabotage_online: bool,
}

#[derive(Args)]
struct ReportArgs {
    results: PathBuf,
    /// Also write the summary as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.scenario {
        config.scenario = s;
    }
    if let Some(t) = args.tolerance {
        config.set_tolerance(t);
    }
    if let Some(n) = args.queries {
        config.n_queries = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn print_outcome(label: &str, outcome: &RunOutcome) {
    println!("{label}");
    print!("{}", render_text(&outcome.summary, outcome.qoi_constant));
    if let Some(calls) = outcome.oracle_calls {
        println!("objective evaluations: {calls}");
    }
}

fn run(args: RunArgs, mode: Mode) -> Result<i32, Error> {
    let mut config = load(&args.config)?;
    let out = &mut config.output;
    if let Some(p) = args.out {
        out.results_path = p;
    }
    if args.summary.is_some() {
        out.summary_path = args.summary;
    }
    for (flag, slot) in [
        (args.dump_trajectory, &mut out.dumps.trajectory),
        (args.dump_basis, &mut out.dumps.basis),
        (args.dump_training, &mut out.dumps.training),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }

    let outcomes = match args.shards {
        Some(n) => harness::execute_sharded(&config, mode, n)?,
        None => vec![harness::execute(&config, mode)?],
    };
    let mut code = 0;
    for (i, outcome) in outcomes.iter().enumerate() {
        let path = match args.shards {
            Some(_) => harness::shard_path(&config.output.results_path, i),
            None => config.output.results_path.clone(),
        };
        print_outcome(&format!("results: {}", path.display()), outcome);
        if let Some(e) = &outcome.error {
            eprintln!("error: stream aborted after {} queries: {e}", outcome.rows.len());
            code = code.max(exit_code(e));
        }
    }
    Ok(code)
}

fn run_verify(args: VerifyArgs) -> Result<i32, Error> {
    let config = load(&args.config)?;
    let report = verify(
        &config,
        &VerifyOptions {
            sabotage_online: args.sabotage_online,
        },
    )?;
    print!("{}", report.render());
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("failing checks: {}", report.failing().join(", "));
        Ok(1)
    }
}

fn run_report(args: ReportArgs) -> Result<i32, Error> {
    let summary = harness::report(&args.results)?;
    print!("{}", render_text(&summary, None));
    if let Some(path) = args.json {
        std::fs::write(path, summary.to_json()?)?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a, Mode::Hierarchy),
        Command::Baseline(a) => run(a, Mode::Baseline),
        Command::Verify(a) => run_verify(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
