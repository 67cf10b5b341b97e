use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mlqc::bench::{self, BenchConfig, Comparison};
use mlqc::model::{load_controller, load_problem, Controller, ProblemInstance};
use mlqc::riccati::{self, Method, SolveOptions};
use mlqc::{BenchError, SolveError};

/// Exit code for unreadable, malformed or invalid input.
const EXIT_INPUT: u8 = 2;
/// Exit code for solver and benchmark failures.
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "mlqc", version, about = "LQ output-feedback control with multiplicative noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(alias = "policy_iteration")]
    Pi,
    #[value(alias = "value_iteration")]
    Vi,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pi => Method::PolicyIteration,
            MethodArg::Vi => Method::ValueIteration,
        }
    }
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "pi,vi")]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = riccati::DEFAULT_TOL)]
    tol: f64,
    /// Defaults to 1000 for pi and 100000 for vi.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Writes `<prefix>_summary.csv` and `<prefix>_trace.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check a problem document and list any violations.
    Validate { problem: PathBuf },
    /// Solve the coupled Riccati equations for one problem.
    Solve {
        problem: PathBuf,
        #[arg(long, value_enum, default_value = "pi")]
        method: MethodArg,
        #[arg(long, default_value_t = riccati::DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        max_iter: Option<usize>,
        /// `open-loop` or a controller document (policy iteration only).
        #[arg(long, default_value = "open-loop")]
        init: String,
        /// Include per-iterate relative errors in the report.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the methods on the pendulum at several noise levels.
    BenchPendulum {
        #[arg(long, value_delimiter = ',', required = true)]
        etas: Vec<f64>,
        #[command(flatten)]
        common: BenchArgs,
    },
    /// Compare the methods on seeded random instances.
    BenchRandom {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        common: BenchArgs,
    },
    /// Monte Carlo estimate of a controller's average cost.
    Rollout {
        problem: PathBuf,
        /// A controller document, or a solve report containing one.
        controller: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn input(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn solver(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_SOLVER,
        message: message.into(),
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Model(_) => input(e.to_string()),
            other => solver(format!("{}: {other}", other.kind())),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Model(_) | BenchError::Config(_) => input(e.to_string()),
            BenchError::Solve(s) => s.into(),
            other => solver(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Loads and validates a problem; validation errors are input failures.
fn problem_from(path: &Path) -> Result<ProblemInstance, Failure> {
    let problem = load_problem(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let report = problem.validate();
    for w in report.warnings() {
        eprintln!("{w}");
    }
    if report.has_errors() {
        let lines: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
        return Err(input(lines.join("\n")));
    }
    Ok(problem)
}

fn controller_from(path: &Path, problem: &ProblemInstance) -> Result<Controller, Failure> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| input(format!("{}: parse error: {e}", path.display())))?;
    let doc = match value.get("controller") {
        Some(inner) => inner.to_string(),
        None => text,
    };
    load_controller(&doc, problem).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let problem = load_problem(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let report = problem.validate();
    for v in &report.violations {
        println!("{v}");
    }
    if report.has_errors() {
        return Err(input(format!("{}: invalid problem", path.display())));
    }
    println!("ok: n={} m={} p={}", problem.n(), problem.m(), problem.p());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    path: &Path,
    method: Method,
    tol: f64,
    max_iter: Option<usize>,
    init: &str,
    trace: bool,
    out: &Path,
) -> Result<(), Failure> {
    if !(tol > 0.0) {
        return Err(input(format!("tolerance {tol} must be positive")));
    }
    let problem = problem_from(path)?;
    let defaults = SolveOptions::for_method(method);
    let opts = SolveOptions {
        tol,
        max_iter: max_iter.unwrap_or(defaults.max_iter),
        keep_iterates: trace,
    };
    let mut report = match method {
        Method::PolicyIteration => {
            let initial = if init == "open-loop" {
                Controller::open_loop(&problem)
            } else {
                controller_from(Path::new(init), &problem)?
            };
            riccati::policy_iteration_solve(&problem, &initial, &opts)?
        }
        Method::ValueIteration => {
            if init != "open-loop" {
                return Err(input("--init applies to policy iteration only"));
            }
            riccati::value_iteration_solve(&problem, &opts)?
        }
    };
    if trace {
        let e_k = bench::convergence_metric(&report.iterates, &report.tuple);
        for (record, e) in report.history.iter_mut().zip(e_k) {
            record.e_k = Some(e);
        }
    }
    write(out, report.to_json().as_bytes())?;
    println!("method: {}", report.method);
    println!("cost_J: {}", report.cost);
    println!("iterations: {}", report.iterations);
    println!("residual: {:e}", report.residual_norm);
    Ok(())
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_bench(prefix: &Path, comparisons: &[Comparison]) -> Result<(), Failure> {
    let mut summary = Vec::new();
    bench::write_summary_csv(&mut summary, comparisons).map_err(|e| input(e.to_string()))?;
    write(&prefixed(prefix, "_summary.csv"), &summary)?;
    let mut trace = Vec::new();
    bench::write_trace_csv(&mut trace, comparisons).map_err(|e| input(e.to_string()))?;
    write(&prefixed(prefix, "_trace.csv"), &trace)?;

    let mut failed = 0;
    let mut broken = Vec::new();
    for c in comparisons {
        for r in &c.records {
            if let Some((kind, msg)) = &r.error {
                let label = c.seed.map_or_else(|| format!("eta={}", c.eta), |s| format!("seed={s}"));
                let line = format!("{label} {}: {kind}: {msg}", r.method);
                if *kind == bench::INSTANCE_FAILURE {
                    broken.push(line);
                } else {
                    eprintln!("note: {line}");
                    failed += 1;
                }
            }
        }
    }
    let rows: usize = comparisons.iter().map(|c| c.records.len()).sum();
    println!("{rows} rows, {failed} solver failures recorded");
    if broken.is_empty() {
        Ok(())
    } else {
        Err(solver(broken.join("\n")))
    }
}

fn bench_config(common: &BenchArgs) -> BenchConfig {
    BenchConfig {
        tol: common.tol,
        max_iter: common.max_iter,
        methods: common.methods.iter().map(|&m| m.into()).collect(),
        jobs: common.jobs,
        ..BenchConfig::default()
    }
}

fn cmd_rollout(problem: &Path, controller: &Path, horizon: usize, trials: usize, seed: u64) -> Result<(), Failure> {
    let problem = problem_from(problem)?;
    let ctrl = controller_from(controller, &problem)?;
    let estimate = bench::monte_carlo_cost(&problem, &ctrl, horizon, trials, seed)?;
    println!("{}", serde_json::to_string_pretty(&estimate).expect("estimate serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { problem } => cmd_validate(&problem),
        Command::Solve {
            problem,
            method,
            tol,
            max_iter,
            init,
            trace,
            out,
        } => cmd_solve(&problem, method.into(), tol, max_iter, &init, trace, &out),
        Command::BenchPendulum { etas, common } => {
            let config = BenchConfig {
                etas,
                ..bench_config(&common)
            };
            let comparisons = bench::run_pendulum_batch(&config)?;
            write_bench(&common.out, &comparisons)
        }
        Command::BenchRandom { count, seed, common } => {
            let config = BenchConfig {
                count,
                seed,
                ..bench_config(&common)
            };
            let comparisons = bench::run_random_batch(&config)?;
            write_bench(&common.out, &comparisons)
        }
        Command::Rollout {
            problem,
            controller,
            horizon,
            trials,
            seed,
        } => cmd_rollout(&problem, &controller, horizon, trials, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
