use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use derflow::estimator::{estimate_stream, DEFAULT_GAMMA, DEFAULT_RIDGE};
use derflow::lossfactors::{loss_factor_set, DEFAULT_DELTA};
use derflow::network::{load_network, NetworkModel};
use derflow::odcp::{capacity_participation, pf_allocate, solve_odcp, OdcpInput, DEFAULT_TOL};
use derflow::powerflow::InjectionSet;
use derflow::simulator::output::{write_run, LFS_FILE, METRICS_FILE, STEPS_FILE};
use derflow::simulator::{run_closed_loop, Controller, RunResult, ScenarioConfig, SignalSource};
use derflow::tables::{self, CompareRow, EstimateRow};

const COMPARE_FILE: &str = "compare";
const LOSS_FACTOR_FILE: &str = "loss_factors";
const ESTIMATE_FILE: &str = "estimates";
const DISPATCH_FILE: &str = "dispatch";

#[derive(Parser)]
#[command(name = "derflow", version, about = "Loss-aware DER coordination for frequency regulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario and write steps.csv, lfs.csv and metrics.json.
    Run(RunArgs),
    /// Run a scenario under every controller and write a side-by-side summary.
    Compare(ScenarioArgs),
    /// Loss factors of a feeder at its nominal operating point.
    ComputeLfs(LfArgs),
    /// Replay a recorded measurement stream through the estimator.
    Estimate(EstimateArgs),
    /// Solve one dispatch problem read from JSON.
    Dispatch(DispatchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory, created if absent. Single-table commands print to
    /// stdout when it is omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Format of tabular output.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// lf_estimated, lf_actual, pf_baseline or model_active_lf.
    #[arg(long)]
    controller: Option<Controller>,
}

#[derive(Args)]
struct LfArgs {
    /// Feeder file; the bundled 33-bus feeder when omitted.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Multiplier applied to every nominal load.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Perturbation step (p.u.).
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with columns step, dp_1 … dp_N, dpt (p.u.).
    #[arg(long)]
    input: PathBuf,
    /// Rows used for the batch initialisation; N + 10 when omitted.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Loss-aware quadratic program.
    Odcp,
    /// Participation factors proportional to upward capacity.
    Pf,
}

#[derive(Args)]
struct DispatchArgs {
    /// JSON problem: the dispatch input fields (p.u.), optionally with `pf`.
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Odcp)]
    method: Method,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Deserialize)]
struct DispatchProblem {
    #[serde(flatten)]
    input: OdcpInput,
    #[serde(default)]
    pf: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DispatchRow {
    bus: usize,
    z: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DERFLOW_LOG", "warn")).init();
    if let Err(e) = dispatch_command(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::ComputeLfs(a) => cmd_compute_lfs(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Dispatch(a) => cmd_dispatch(&a),
    }
}

/// Creates `dir` and checks that none of `files` would be overwritten
/// without `force`.
fn prepare_dir(dir: &Path, files: &[String], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    if !force {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                bail!("{} exists; pass --force to overwrite", p.display());
            }
        }
    }
    Ok(())
}

/// Opens the single output of a table command: `<out>/<stem>.<ext>` or
/// stdout.
fn table_sink(out: &OutputArgs, stem: &str) -> Result<Box<dyn Write>> {
    match &out.out {
        None => Ok(Box::new(io::stdout().lock())),
        Some(dir) => {
            let name = format!("{stem}.{}", out.format.ext());
            prepare_dir(dir, std::slice::from_ref(&name), out.force)?;
            let path = dir.join(&name);
            let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
            log::info!("writing {}", path.display());
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn emit<T: Serialize>(out: &OutputArgs, stem: &str, rows: &[T]) -> Result<()> {
    let mut w = table_sink(out, stem)?;
    match out.format {
        Format::Csv => tables::write_rows(&mut w, rows)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// Loads the scenario and its feeder. Relative paths inside the scenario
/// file are taken relative to that file.
fn load_scenario(args: &ScenarioArgs) -> Result<(NetworkModel, ScenarioConfig)> {
    let mut cfg = match &args.config {
        None => ScenarioConfig::default(),
        Some(path) => {
            let f = File::open(path).with_context(|| format!("cannot open scenario {}", path.display()))?;
            serde_json::from_reader(BufReader::new(f))
                .with_context(|| format!("invalid scenario {}", path.display()))?
        }
    };
    let base = args.config.as_deref().and_then(Path::parent);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let SignalSource::TraceFile(p) = &cfg.signal {
        cfg.signal = SignalSource::TraceFile(resolve(base, p));
    }
    cfg.feeder = cfg.feeder.as_deref().map(|p| resolve(base, p));
    let model = load_model(cfg.feeder.as_deref())?;
    Ok((model, cfg))
}

fn load_model(path: Option<&Path>) -> Result<NetworkModel> {
    match path {
        None => Ok(NetworkModel::baran_wu_33()),
        Some(p) => load_network(p).with_context(|| format!("feeder {}", p.display())),
    }
}

fn print_summary(run: &RunResult) {
    let m = &run.metrics;
    println!(
        "{:<16} avg_score {:.5}  final_score {:.5}  avg_rmse {:.5}  max_rmse {:.5}{}",
        m.controller.name(),
        m.avg_score,
        m.final_score,
        m.avg_rmse,
        m.max_rmse,
        if m.score_flagged { "  (score flagged)" } else { "" }
    );
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (model, mut cfg) = load_scenario(&args.scenario)?;
    if let Some(c) = args.controller {
        cfg.controller = c;
    }
    let out = args
        .scenario
        .output
        .out
        .as_deref()
        .context("run needs --out <dir>")?;
    let files = [STEPS_FILE, LFS_FILE, METRICS_FILE].map(String::from);
    prepare_dir(out, &files, args.scenario.output.force)?;
    let run = run_closed_loop(&model, &cfg).context("simulation failed")?;
    write_run(&run, out)?;
    print_summary(&run);
    Ok(())
}

fn cmd_compare(args: &ScenarioArgs) -> Result<()> {
    let (model, cfg) = load_scenario(args)?;
    let out = args.output.out.as_deref().context("compare needs --out <dir>")?;
    let name = format!("{COMPARE_FILE}.{}", args.output.format.ext());
    prepare_dir(out, std::slice::from_ref(&name), args.output.force)?;

    let runs: Vec<Result<RunResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = Controller::ALL
            .into_iter()
            .map(|c| {
                let cfg = ScenarioConfig {
                    controller: c,
                    ..cfg.clone()
                };
                let model = &model;
                s.spawn(move || {
                    run_closed_loop(model, &cfg).with_context(|| format!("{} run failed", c.name()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    for run in runs {
        let run = run?;
        print_summary(&run);
        let m = run.metrics;
        rows.push(CompareRow {
            controller: m.controller.name().to_string(),
            avg_score: m.avg_score,
            final_score: m.final_score,
            avg_rmse: m.avg_rmse,
            max_rmse: m.max_rmse,
            score_flagged: m.score_flagged,
        });
    }
    emit(&args.output, COMPARE_FILE, &rows)
}

fn cmd_compute_lfs(args: &LfArgs) -> Result<()> {
    ensure!(args.scale.is_finite() && args.scale >= 0.0, "--scale must be non-negative");
    let model = load_model(args.feeder.as_deref())?;
    let mut inj = InjectionSet::nominal(&model);
    let pg0 = model.nominal_generation();
    for (i, (p, q)) in inj.p.iter_mut().zip(inj.q.iter_mut()).enumerate() {
        *p = pg0[i] + (*p - pg0[i]) * args.scale;
        *q *= args.scale;
    }
    let set = loss_factor_set(&model, &inj, args.delta).context("loss-factor computation failed")?;
    emit(&args.output, LOSS_FACTOR_FILE, &tables::loss_factor_rows(&set))
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let f = File::open(&args.input).with_context(|| format!("cannot open {}", args.input.display()))?;
    let (steps, pairs) = tables::read_measurements(BufReader::new(f))
        .with_context(|| format!("invalid measurement file {}", args.input.display()))?;
    ensure!(!pairs.is_empty(), "{} has no measurements", args.input.display());
    let n = pairs[0].delta_p.len();
    let warmup = args.warmup.unwrap_or(n + 10);
    ensure!(
        warmup >= 1 && warmup <= pairs.len(),
        "warm-up of {warmup} rows needs at least that many measurements ({} given)",
        pairs.len()
    );
    let est = estimate_stream(&pairs, warmup, args.gamma, args.ridge)?;
    let rows: Vec<EstimateRow> = est
        .into_iter()
        .zip(&steps[warmup - 1..])
        .map(|((updated, lambda_hat), &step)| EstimateRow {
            step,
            updated,
            lambda_hat,
        })
        .collect();
    match args.output.format {
        Format::Json => emit(&args.output, ESTIMATE_FILE, &rows),
        Format::Csv => {
            let mut w = table_sink(&args.output, ESTIMATE_FILE)?;
            tables::write_estimates(&mut w, &rows)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn cmd_dispatch(args: &DispatchArgs) -> Result<()> {
    let f = File::open(&args.problem).with_context(|| format!("cannot open {}", args.problem.display()))?;
    let problem: DispatchProblem = serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("invalid dispatch problem {}", args.problem.display()))?;
    let sol = match args.method {
        Method::Odcp => solve_odcp(&problem.input, args.tol)?,
        Method::Pf => {
            let pf = problem
                .pf
                .clone()
                .unwrap_or_else(|| capacity_participation(&problem.input.upper));
            pf_allocate(&problem.input, &pf)?
        }
    };
    log::info!("dispatch status {:?}", sol.status);
    match args.output.format {
        Format::Json => {
            let mut w = table_sink(&args.output, DISPATCH_FILE)?;
            serde_json::to_writer_pretty(&mut w, &sol)?;
            writeln!(w)?;
            w.flush()?;
            Ok(())
        }
        Format::Csv => {
            let rows: Vec<DispatchRow> = sol
                .z
                .iter()
                .enumerate()
                .map(|(i, z)| DispatchRow { bus: i + 1, z: *z })
                .collect();
            emit(&args.output, DISPATCH_FILE, &rows)
        }
    }
}
