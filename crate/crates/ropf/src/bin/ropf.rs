//! Command-line interface for the ROPF solver toolkit.
//!
//! `ropf solve <case>...` runs the LB/UB pipeline on MATPOWER case files and
//! writes a report; `ropf dump <case>` prints the parsed model as canonical
//! JSON; `ropf program <case>` prints the built conic program in its text
//! dump format. The `ROPF_LOG` environment variable controls log verbosity
//! (`error`, `warn`, `info`, `debug`, `trace`).

use clap::{Args, Parser, Subcommand};
use ropf::bench::{self, ReportFormat, ReportRow, RunConfig};
use ropf::case_io::{self, ShuntRule, TapRule};
use ropf::conic::SolverParams;
use ropf::formulation::{self, BuildOptions, RelaxationMode};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "ropf", version, about = "Reactive optimal power flow solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve ROPF instances and report LB / UB / %Gap per case.
    Solve(SolveArgs),
    /// Print the parsed per-unit model (or instance) as canonical JSON.
    Dump(DumpArgs),
    /// Print the built conic program in the self-contained text format.
    Program(DumpArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// MATPOWER case files.
    #[arg(required = true)]
    cases: Vec<PathBuf>,
    /// Relaxation mode: misocp, misocpa or misocpa_plus.
    #[arg(long, default_value = "misocpa_plus")]
    mode: RelaxationMode,
    /// Root separation rounds (misocpa_plus only).
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Tap-ratio catalog.
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.95,1,1.05,1.1")]
    taps: Vec<f64>,
    /// Shunt on/off catalog (scaled by each bus's nominal susceptance).
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    shunts: Vec<f64>,
    /// Buses receiving a variable shunt: "existing", "none" or an id list.
    #[arg(long, default_value = "existing")]
    shunt_buses: String,
    /// Branches receiving a variable tap: "transformers", "none" or 1-based
    /// branch row indices.
    #[arg(long, default_value = "transformers")]
    tap_branches: String,
    /// Report output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: csv, markdown or json.
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Per-instance wall-clock limit in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Branch-and-bound node limit.
    #[arg(long, default_value_t = 100_000)]
    node_limit: usize,
    /// Solver feasibility/gap tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Run instances concurrently on this many threads (timings are then
    /// not comparable across rows).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct DumpArgs {
    case: PathBuf,
    /// Attach default catalogs before dumping.
    #[arg(long)]
    with_catalogs: bool,
}

fn parse_shunt_rule(s: &str) -> Result<ShuntRule, String> {
    match s {
        "existing" => Ok(ShuntRule::ExistingShunts),
        "none" => Ok(ShuntRule::None),
        list => {
            let ids: Result<Vec<i64>, _> = list.split(',').map(|t| t.trim().parse()).collect();
            Ok(ShuntRule::Buses(ids.map_err(|e| format!("bad bus list: {e}"))?))
        }
    }
}

fn parse_tap_rule(s: &str) -> Result<TapRule, String> {
    match s {
        "transformers" => Ok(TapRule::Transformers),
        "none" => Ok(TapRule::None),
        list => {
            let idx: Result<Vec<usize>, _> = list.split(',').map(|t| t.trim().parse()).collect();
            let idx = idx.map_err(|e| format!("bad branch list: {e}"))?;
            // 1-based case rows on the command line.
            Ok(TapRule::Branches(idx.into_iter().map(|i| i.saturating_sub(1)).collect()))
        }
    }
}

fn case_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into())
}

fn run_solve(args: &SolveArgs) -> Result<ExitCode, String> {
    let shunt_rule = parse_shunt_rule(&args.shunt_buses)?;
    let tap_rule = parse_tap_rule(&args.tap_branches)?;

    let configs: Vec<RunConfig> = args
        .cases
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let mut cfg = RunConfig::new(case_name(path), text);
            cfg.mode = args.mode;
            cfg.cut_rounds = args.rounds;
            cfg.tap_values = args.taps.clone();
            cfg.shunt_values = args.shunts.clone();
            cfg.shunt_rule = shunt_rule.clone();
            cfg.tap_rule = tap_rule.clone();
            cfg.solver =
                SolverParams { feas_tol: args.tol, gap_tol: args.tol, ..Default::default() };
            cfg.time_limit = args.time_limit.map(Duration::from_secs_f64);
            cfg.node_limit = args.node_limit;
            Ok(cfg)
        })
        .collect::<Result<_, String>>()?;

    let run_all = |configs: &[RunConfig]| -> Vec<Result<ReportRow, bench::BenchError>> {
        if args.parallel > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(args.parallel)
                .build()
                .expect("thread pool");
            pool.install(|| {
                use rayon::prelude::*;
                configs.par_iter().map(bench::run_instance).collect()
            })
        } else {
            configs.iter().map(bench::run_instance).collect()
        }
    };
    let outcomes = run_all(&configs);

    let mut rows = Vec::new();
    let mut failures = 0usize;
    for (cfg, outcome) in configs.iter().zip(outcomes) {
        match outcome {
            Ok(row) => {
                log::info!(
                    "{}: lb={:?} ub={:?} gap={:?} in {:.2}s",
                    row.case,
                    row.lb,
                    row.ub,
                    row.gap_percent,
                    row.time_s
                );
                rows.push(row);
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", cfg.case_name);
            }
        }
    }
    if rows.is_empty() {
        return Err("no instance produced a report row".into());
    }
    match &args.out {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| e.to_string())?;
            bench::emit_report(&rows, args.format, &mut f).map_err(|e| e.to_string())?;
            eprintln!("report written to {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout();
            bench::emit_report(&rows, args.format, &mut stdout).map_err(|e| e.to_string())?;
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn default_instance(model: case_io::NetworkModel) -> Result<case_io::RopfInstance, String> {
    case_io::attach_catalogs(
        &model,
        &[0.0, 1.0],
        &[0.9, 0.95, 1.0, 1.05, 1.1],
        &ShuntRule::ExistingShunts,
        &TapRule::Transformers,
    )
    .map_err(|e| e.to_string())
}

fn run_dump(args: &DumpArgs, program_dump: bool) -> Result<ExitCode, String> {
    let text = std::fs::read_to_string(&args.case)
        .map_err(|e| format!("cannot read {}: {e}", args.case.display()))?;
    let model = case_io::parse_matpower(&text).map_err(|e| e.to_string())?;
    if program_dump {
        let instance = if args.with_catalogs {
            default_instance(model)?
        } else {
            case_io::RopfInstance::fixed(model)
        };
        let bounds = formulation::compute_bounds(&instance).map_err(|e| e.to_string())?;
        let (program, _) = formulation::build_misocp(
            &instance,
            &bounds,
            &BuildOptions { mode: RelaxationMode::MisocpaPlus },
        )
        .map_err(|e| e.to_string())?;
        println!("{}", program.dump());
    } else if args.with_catalogs {
        println!("{}", default_instance(model)?.to_canonical_json());
    } else {
        println!("{}", model.to_canonical_json());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROPF_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(args) => run_solve(args),
        Command::Dump(args) => run_dump(args, false),
        Command::Program(args) => run_dump(args, true),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
