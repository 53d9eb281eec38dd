//! Command-line front end.
//!
//! Four subcommands:
//!
//! * `simulate` — Monte-Carlo benchmark runs; writes a summary CSV plus one
//!   error time-series CSV per run and prints the summary table.
//! * `estimate` — replays a recorded sensor log through a chosen filter;
//!   writes the error/dispersion time series and the final state report.
//! * `observability` — observability report for a concentration matrix `F`
//!   or a first moment `E[R]`.
//! * `density` — marginal body-axis densities on an icosphere grid, one CSV
//!   per axis, for external sphere-shading plots.
//!
//! Every subcommand accepts either flags or a single JSON `--config` file
//! (unknown keys rejected), never both. Exit codes: 0 success, 2 usage or
//! configuration error, 3 runtime error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix3;

use crate::harness::{
    self, monte_carlo_runs, summarize_runs, write_summary_csv, Combo, Estimator,
    EstimatorStateView, HarnessError, LogStreams, RunResult, Scenario, SummaryRow, TruthModel,
};
use crate::matrix_fisher::{sphere_density_rows, write_sphere_density_csv, MatrixFisher, MfError};
use crate::measurement::MeasurementKind;
use crate::mekf::MekfState;
use crate::observability::{report_from_mf, report_from_moment, ObservabilityReport};
use crate::propagation::Frame;

/// Fiber-quadrature resolution for the density export (trapezoid points per
/// great-circle fiber; spectrally accurate for the periodic integrand).
const DENSITY_GRID_N: usize = 256;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "attitude-mf",
    version,
    about = "Bayesian attitude estimation on SO(3) with the matrix Fisher distribution",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo benchmark: run estimators over synthetic scenarios.
    Simulate(SimulateArgs),
    /// Replay a recorded sensor log through an estimator.
    Estimate(EstimateArgs),
    /// Observability report for a concentration matrix or first moment.
    Observability(ObservabilityArgs),
    /// Export marginal body-axis densities on a sphere grid.
    Density(DensityArgs),
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Observability(args) => cmd_observability(args),
        Command::Density(args) => cmd_density(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

// ---------------------------------------------------------------------------
// shared parsing helpers
// ---------------------------------------------------------------------------

fn parse_numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(format!(
            "{what} needs {n} comma-separated numbers, got {}",
            parts.len()
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| format!("{what}: invalid number `{p}`"))
        })
        .collect()
}

fn parse_vec3(s: &str) -> Result<Vec3Arg, String> {
    let v = parse_numbers(s, 3, "direction")?;
    Ok(Vec3Arg([v[0], v[1], v[2]]))
}

fn parse_mat3(s: &str) -> Result<Mat3Arg, String> {
    let v = parse_numbers(s, 9, "matrix")?;
    Ok(Mat3Arg(mat3_from_row_major(&[
        v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
    ])))
}

fn mat3_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

#[derive(Debug, Clone, Copy)]
struct Vec3Arg([f64; 3]);

#[derive(Debug, Clone, Copy)]
struct Mat3Arg(Matrix3<f64>);

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "config file `{}` not found",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("reading `{}`: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config `{}`: {e}", path.display())))
}

fn create_out_file(dir: &Path, name: &str) -> Result<(PathBuf, std::fs::File), CliError> {
    let path = dir.join(name);
    let file = std::fs::File::create(&path)
        .map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))?;
    Ok((path, file))
}

fn ingest_error(path: &Path, e: HarnessError) -> CliError {
    match e {
        HarnessError::Parse { .. } | HarnessError::Schema { .. } => {
            CliError::Usage(format!("log `{}`: {e}", path.display()))
        }
        other => CliError::Runtime(format!("log `{}`: {other}", path.display())),
    }
}

fn runtime_error(e: HarnessError) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// JSON config file; mutually exclusive with the scenario flags.
    #[arg(long, value_name = "PATH", conflicts_with_all = [
        "combo", "estimator", "runs", "seed", "duration", "gyro_rate",
        "meas_rate", "gamma", "kappa", "ref_vec", "truth", "out", "write_logs",
    ])]
    config: Option<PathBuf>,
    /// Combination to run (AVI_RVI, AVI_RVB, AVB_RVI, AVB_RVB); default all four.
    #[arg(long)]
    combo: Option<Combo>,
    /// Estimator to run (matrix_fisher, mekf); default matrix_fisher.
    #[arg(long)]
    estimator: Option<Estimator>,
    /// Number of Monte-Carlo runs per summary row.
    #[arg(long)]
    runs: Option<usize>,
    /// Base RNG seed; run i uses seed + i. Required (here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated span in seconds (default 60).
    #[arg(long)]
    duration: Option<f64>,
    /// Gyro sample rate in Hz (default 150).
    #[arg(long)]
    gyro_rate: Option<f64>,
    /// Direction-measurement rate in Hz (default 30).
    #[arg(long)]
    meas_rate: Option<f64>,
    /// Angular random-walk density in rad/sqrt(s) (default 10 deg/sqrt(s)).
    #[arg(long)]
    gamma: Option<f64>,
    /// von Mises-Fisher concentration of direction readings (default 200).
    #[arg(long)]
    kappa: Option<f64>,
    /// Reference direction "x,y,z" (default 1,0,0).
    #[arg(long = "ref", value_name = "X,Y,Z", value_parser = parse_vec3)]
    ref_vec: Option<Vec3Arg>,
    /// Truth trajectory (spin_precess, fixed_axis); default spin_precess.
    #[arg(long)]
    truth: Option<TruthModel>,
    /// Output directory (must exist).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also export each run's sensor log (replayable via `estimate --log`).
    #[arg(long)]
    write_logs: bool,
    /// Worker threads for Monte-Carlo runs (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default)]
    combos: Option<Vec<Combo>>,
    #[serde(default)]
    estimators: Option<Vec<Estimator>>,
    #[serde(default)]
    runs: Option<usize>,
    seed: u64,
    #[serde(default)]
    duration: Option<f64>,
    #[serde(default)]
    gyro_rate: Option<f64>,
    #[serde(default)]
    meas_rate: Option<f64>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    kappa: Option<f64>,
    #[serde(default)]
    ref_vector: Option<[f64; 3]>,
    #[serde(default)]
    truth: Option<TruthModel>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    write_logs: Option<bool>,
}

struct SimulatePlan {
    combos: Vec<Combo>,
    estimators: Vec<Estimator>,
    runs: usize,
    template: Scenario,
    out: PathBuf,
    write_logs: bool,
}

fn scenario_from_parts(
    seed: u64,
    duration: Option<f64>,
    gyro_rate: Option<f64>,
    meas_rate: Option<f64>,
    gamma: Option<f64>,
    kappa: Option<f64>,
    ref_vector: Option<[f64; 3]>,
    truth: Option<TruthModel>,
) -> Scenario {
    let mut sc = Scenario::benchmark(Combo::AviRvi, seed);
    if let Some(v) = duration {
        sc.duration = v;
    }
    if let Some(v) = gyro_rate {
        sc.gyro_rate = v;
    }
    if let Some(v) = meas_rate {
        sc.meas_rate = v;
    }
    if let Some(v) = gamma {
        sc.gamma = v;
    }
    if let Some(v) = kappa {
        sc.kappa = v;
    }
    if let Some(v) = ref_vector {
        sc.ref_vector = v;
    }
    if let Some(v) = truth {
        sc.truth = v;
    }
    sc
}

fn simulate_plan(args: &SimulateArgs) -> Result<SimulatePlan, CliError> {
    let plan = if let Some(config_path) = &args.config {
        let cfg: SimulateConfig = read_config(config_path)?;
        SimulatePlan {
            combos: cfg.combos.unwrap_or_else(|| Combo::ALL.to_vec()),
            estimators: cfg
                .estimators
                .unwrap_or_else(|| vec![Estimator::MatrixFisher]),
            runs: cfg.runs.unwrap_or(10),
            template: scenario_from_parts(
                cfg.seed,
                cfg.duration,
                cfg.gyro_rate,
                cfg.meas_rate,
                cfg.gamma,
                cfg.kappa,
                cfg.ref_vector,
                cfg.truth,
            ),
            out: cfg.out.unwrap_or_else(|| PathBuf::from(".")),
            write_logs: cfg.write_logs.unwrap_or(false),
        }
    } else {
        let seed = args.seed.ok_or_else(|| {
            CliError::Usage("--seed is required for simulate (or provide a --config)".to_string())
        })?;
        SimulatePlan {
            combos: args
                .combo
                .map(|c| vec![c])
                .unwrap_or_else(|| Combo::ALL.to_vec()),
            estimators: args
                .estimator
                .map(|e| vec![e])
                .unwrap_or_else(|| vec![Estimator::MatrixFisher]),
            runs: args.runs.unwrap_or(10),
            template: scenario_from_parts(
                seed,
                args.duration,
                args.gyro_rate,
                args.meas_rate,
                args.gamma,
                args.kappa,
                args.ref_vec.map(|v| v.0),
                args.truth,
            ),
            out: args.out.clone(),
            write_logs: args.write_logs,
        }
    };
    if plan.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".to_string()));
    }
    if plan.combos.is_empty() || plan.estimators.is_empty() {
        return Err(CliError::Usage(
            "need at least one combo and one estimator".to_string(),
        ));
    }
    plan.template
        .check()
        .map_err(|msg| CliError::Usage(format!("invalid scenario: {msg}")))?;
    Ok(plan)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let plan = simulate_plan(&args)?;
    if plan.write_logs {
        use rand::rngs::StdRng;
        use rand::SeedableRng;
        // The same per-run seed the filter driver uses, so each exported log
        // holds exactly the streams its run consumed.
        for &combo in &plan.combos {
            for i in 0..plan.runs {
                let mut sc = plan.template.clone();
                sc.combo = combo;
                sc.seed = plan.template.seed.wrapping_add(i as u64);
                let mut rng = StdRng::seed_from_u64(sc.seed);
                let streams = harness::synthesize_measurements(&sc, &mut rng);
                let path = plan.out.join(format!("log_{combo}_run{i}.csv"));
                harness::export_log(&streams, &path).map_err(|e| {
                    CliError::Runtime(format!("writing `{}`: {e}", path.display()))
                })?;
            }
        }
    }
    let work = || -> Result<Vec<SummaryRow>, CliError> {
        let mut rows = Vec::new();
        for &estimator in &plan.estimators {
            for &combo in &plan.combos {
                let mut sc = plan.template.clone();
                sc.combo = combo;
                let runs = monte_carlo_runs(&sc, estimator, plan.runs).map_err(runtime_error)?;
                for (i, run) in runs.iter().enumerate() {
                    let name = format!("series_{estimator}_{combo}_run{i}.csv");
                    let (path, file) = create_out_file(&plan.out, &name)?;
                    run.write_series_csv(std::io::BufWriter::new(file))
                        .map_err(|e| {
                            CliError::Runtime(format!("writing `{}`: {e}", path.display()))
                        })?;
                }
                rows.push(summarize_runs(estimator, combo, &runs));
            }
        }
        Ok(rows)
    };
    let rows = match args.jobs {
        Some(jobs) => {
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".to_string()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
            pool.install(work)?
        }
        None => work()?,
    };

    let (path, file) = create_out_file(&plan.out, "summary.csv")?;
    write_summary_csv(&rows, std::io::BufWriter::new(file))
        .map_err(|e| CliError::Runtime(format!("writing `{}`: {e}", path.display())))?;

    println!(
        "{:<14} {:<8} {:>5} {:>18} {:>18}",
        "estimator", "combo", "runs", "full err (deg)", "partial err (deg)"
    );
    for row in &rows {
        println!(
            "{:<14} {:<8} {:>5} {:>11.2} ± {:<5.2} {:>11.2} ± {:<5.2}",
            row.estimator.to_string(),
            row.combo.to_string(),
            row.n_runs,
            row.full_mean,
            row.full_sd,
            row.partial_mean,
            row.partial_sd
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EstimateArgs {
    /// JSON config file; mutually exclusive with the other flags.
    #[arg(long, value_name = "PATH", conflicts_with_all = [
        "log", "estimator", "combo", "gamma", "kappa", "ref_vec", "duration", "out",
    ])]
    config: Option<PathBuf>,
    /// Input sensor log CSV.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Estimator to run (matrix_fisher, mekf); default matrix_fisher.
    #[arg(long)]
    estimator: Option<Estimator>,
    /// Combination; default derived from the log's frame and kind columns.
    #[arg(long)]
    combo: Option<Combo>,
    /// Angular random-walk density in rad/sqrt(s) (default 10 deg/sqrt(s)).
    #[arg(long)]
    gamma: Option<f64>,
    /// von Mises-Fisher concentration of direction readings (default 200).
    #[arg(long)]
    kappa: Option<f64>,
    /// Reference direction "x,y,z" (default 1,0,0).
    #[arg(long = "ref", value_name = "X,Y,Z", value_parser = parse_vec3)]
    ref_vec: Option<Vec3Arg>,
    /// End of the final prediction step (default: last gyro timestamp).
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory (must exist).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateConfig {
    log: PathBuf,
    #[serde(default)]
    estimator: Option<Estimator>,
    #[serde(default)]
    combo: Option<Combo>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    kappa: Option<f64>,
    #[serde(default)]
    ref_vector: Option<[f64; 3]>,
    #[serde(default)]
    duration: Option<f64>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn derive_combo(streams: &LogStreams) -> Result<Combo, CliError> {
    let frame = streams.gyro[0].frame;
    if streams.gyro.iter().any(|g| g.frame != frame) {
        return Err(CliError::Usage(
            "log mixes gyro frames; pass --combo explicitly".to_string(),
        ));
    }
    let kind = streams
        .directions
        .first()
        .map(|d| d.kind)
        .ok_or_else(|| {
            CliError::Usage(
                "log has no direction samples to infer the combination from; pass --combo"
                    .to_string(),
            )
        })?;
    if streams.directions.iter().any(|d| d.kind != kind) {
        return Err(CliError::Usage(
            "log mixes direction kinds; pass --combo explicitly".to_string(),
        ));
    }
    Ok(match (frame, kind) {
        (Frame::Inertial, MeasurementKind::InertialRef) => Combo::AviRvi,
        (Frame::Inertial, MeasurementKind::BodyRef) => Combo::AviRvb,
        (Frame::Body, MeasurementKind::InertialRef) => Combo::AvbRvi,
        (Frame::Body, MeasurementKind::BodyRef) => Combo::AvbRvb,
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let (log, estimator, combo_flag, gamma, kappa, ref_vector, duration, out) =
        if let Some(config_path) = &args.config {
            let cfg: EstimateConfig = read_config(config_path)?;
            (
                cfg.log,
                cfg.estimator,
                cfg.combo,
                cfg.gamma,
                cfg.kappa,
                cfg.ref_vector,
                cfg.duration,
                cfg.out.unwrap_or_else(|| PathBuf::from(".")),
            )
        } else {
            let log = args
                .log
                .clone()
                .ok_or_else(|| CliError::Usage("--log is required".to_string()))?;
            (
                log,
                args.estimator,
                args.combo,
                args.gamma,
                args.kappa,
                args.ref_vec.map(|v| v.0),
                args.duration,
                args.out.clone(),
            )
        };
    if !log.exists() {
        return Err(CliError::Usage(format!(
            "log file `{}` not found",
            log.display()
        )));
    }
    let streams = harness::ingest_log(&log).map_err(|e| ingest_error(&log, e))?;
    if streams.gyro.is_empty() {
        return Err(CliError::Usage(format!(
            "log `{}` has no gyro rows",
            log.display()
        )));
    }
    let estimator = estimator.unwrap_or(Estimator::MatrixFisher);
    let combo = match combo_flag {
        Some(c) => c,
        None => derive_combo(&streams)?,
    };
    let last_t = streams.gyro.last().unwrap().t;
    let mut sc = Scenario::benchmark(combo, 0);
    sc.duration = duration.unwrap_or(last_t.max(f64::MIN_POSITIVE));
    if let Some(v) = gamma {
        sc.gamma = v;
    }
    if let Some(v) = kappa {
        sc.kappa = v;
    }
    if let Some(v) = ref_vector {
        sc.ref_vector = v;
    }
    sc.check()
        .map_err(|msg| CliError::Usage(format!("invalid parameters: {msg}")))?;

    let mut final_mf: Option<MatrixFisher> = None;
    let mut final_kf: Option<MekfState> = None;
    let result = harness::run_filter_on_streams(&sc, &streams, estimator, &mut |_, view| {
        match view {
            EstimatorStateView::MatrixFisher(mf) => final_mf = Some(*mf),
            EstimatorStateView::Mekf(st) => final_kf = Some(*st),
        }
    })
    .map_err(runtime_error)?;

    let (series_path, file) = create_out_file(&out, "series.csv")?;
    result
        .write_series_csv(std::io::BufWriter::new(file))
        .map_err(|e| CliError::Runtime(format!("writing `{}`: {e}", series_path.display())))?;

    print_run_summary(&result, !streams.truth.is_empty());
    match (final_mf, final_kf) {
        (Some(mf), _) => {
            let report = report_from_mf(&mf).map_err(|e| CliError::Runtime(e.to_string()))?;
            let (report_path, mut file) = create_out_file(&out, "report.csv")?;
            use std::io::Write as _;
            writeln!(file, "{}", ObservabilityReport::CSV_HEADER)
                .and_then(|_| writeln!(file, "{}", report.csv_row(last_t)))
                .map_err(|e| {
                    CliError::Runtime(format!("writing `{}`: {e}", report_path.display()))
                })?;
            print_report(&report);
            println!("wrote {} and {}", series_path.display(), report_path.display());
        }
        (None, Some(st)) => {
            let (state_path, mut file) = create_out_file(&out, "final_state.csv")?;
            use std::io::Write as _;
            writeln!(file, "{}", MekfState::CSV_HEADER)
                .and_then(|_| writeln!(file, "{}", st.csv_row(last_t)))
                .map_err(|e| {
                    CliError::Runtime(format!("writing `{}`: {e}", state_path.display()))
                })?;
            println!("wrote {} and {}", series_path.display(), state_path.display());
        }
        (None, None) => {
            // No measurement ever arrived, so no state was recorded beyond
            // the final prediction; the series CSV still holds that record.
            println!("wrote {}", series_path.display());
        }
    }
    Ok(())
}

fn print_run_summary(result: &RunResult, have_truth: bool) {
    if have_truth {
        println!(
            "records: {}   mean full error: {:.2} deg   mean partial error: {:.2} deg",
            result.series.len(),
            result.mean_full_deg,
            result.mean_partial_deg
        );
    } else {
        println!(
            "records: {}   (no truth columns in log; error metrics are NaN)",
            result.series.len()
        );
    }
}

// ---------------------------------------------------------------------------
// observability
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ObservabilityArgs {
    /// JSON config file; mutually exclusive with the other flags.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["f_mat", "moment", "out"])]
    config: Option<PathBuf>,
    /// Concentration matrix F: nine comma-separated entries, row-major.
    #[arg(long = "f", value_name = "F11,..,F33", value_parser = parse_mat3)]
    f_mat: Option<Mat3Arg>,
    /// First moment E[R]: nine comma-separated entries, row-major.
    #[arg(long, value_name = "E11,..,E33", value_parser = parse_mat3, conflicts_with = "f_mat")]
    moment: Option<Mat3Arg>,
    /// Output directory (must exist).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservabilityConfig {
    #[serde(default)]
    f: Option<[f64; 9]>,
    #[serde(default)]
    moment: Option<[f64; 9]>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn cmd_observability(args: ObservabilityArgs) -> Result<(), CliError> {
    let (f, moment, out) = if let Some(config_path) = &args.config {
        let cfg: ObservabilityConfig = read_config(config_path)?;
        (
            cfg.f.map(|v| mat3_from_row_major(&v)),
            cfg.moment.map(|v| mat3_from_row_major(&v)),
            cfg.out.unwrap_or_else(|| PathBuf::from(".")),
        )
    } else {
        (
            args.f_mat.map(|m| m.0),
            args.moment.map(|m| m.0),
            args.out.clone(),
        )
    };
    let report = match (f, moment) {
        (Some(f), None) => {
            if !f.iter().all(|x| x.is_finite()) {
                return Err(CliError::Usage("matrix F has non-finite entries".to_string()));
            }
            report_from_mf(&MatrixFisher::new(f)).map_err(observability_error)?
        }
        (None, Some(e)) => {
            if !e.iter().all(|x| x.is_finite()) {
                return Err(CliError::Usage("moment has non-finite entries".to_string()));
            }
            report_from_moment(&e).map_err(observability_error)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either `f` or `moment`, not both".to_string(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --f or --moment is required".to_string(),
            ))
        }
    };
    let (path, mut file) = create_out_file(&out, "observability.csv")?;
    use std::io::Write as _;
    writeln!(file, "{}", ObservabilityReport::CSV_HEADER)
        .and_then(|_| writeln!(file, "{}", report.csv_row(0.0)))
        .map_err(|e| CliError::Runtime(format!("writing `{}`: {e}", path.display())))?;
    print_report(&report);
    println!("wrote {}", path.display());
    Ok(())
}

fn observability_error(e: MfError) -> CliError {
    match e {
        MfError::NotAMoment { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn print_report(report: &ObservabilityReport) {
    println!(
        "moment d        = ({:.6}, {:.6}, {:.6})",
        report.d[0], report.d[1], report.d[2]
    );
    println!(
        "O diagonal      = ({:.6}, {:.6}, {:.6})",
        report.o_diag[0], report.o_diag[1], report.o_diag[2]
    );
    println!("rho             = {:.6e}", report.rho);
    println!(
        "Fisher info     = ({:.6}, {:.6}, {:.6})",
        report.fim_diag[0], report.fim_diag[1], report.fim_diag[2]
    );
    println!("mmse case       = {}", report.classification.case.as_str());
    if let Some(axis) = report.classification.ambiguity_axis {
        println!(
            "ambiguity axis  = ({:.6}, {:.6}, {:.6})",
            axis[0], axis[1], axis[2]
        );
    }
}

// ---------------------------------------------------------------------------
// density
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DensityArgs {
    /// JSON config file; mutually exclusive with the other flags.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["f_mat", "level", "out"])]
    config: Option<PathBuf>,
    /// Concentration matrix F: nine comma-separated entries, row-major.
    #[arg(long = "f", value_name = "F11,..,F33", value_parser = parse_mat3)]
    f_mat: Option<Mat3Arg>,
    /// Icosphere subdivision level; the grid has 10·4^level + 2 points.
    #[arg(long, default_value_t = 3)]
    level: u32,
    /// Output directory (must exist).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityConfig {
    f: [f64; 9],
    #[serde(default)]
    level: Option<u32>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn cmd_density(args: DensityArgs) -> Result<(), CliError> {
    let (f, level, out) = if let Some(config_path) = &args.config {
        let cfg: DensityConfig = read_config(config_path)?;
        (
            mat3_from_row_major(&cfg.f),
            cfg.level.unwrap_or(3),
            cfg.out.unwrap_or_else(|| PathBuf::from(".")),
        )
    } else {
        let f = args
            .f_mat
            .ok_or_else(|| CliError::Usage("--f is required".to_string()))?;
        (f.0, args.level, args.out.clone())
    };
    if !f.iter().all(|x| x.is_finite()) {
        return Err(CliError::Usage("matrix F has non-finite entries".to_string()));
    }
    if level > 6 {
        return Err(CliError::Usage(
            "--level above 6 would generate an excessive grid".to_string(),
        ));
    }
    let mf = MatrixFisher::new(f);
    for axis in 1..=3 {
        let rows = sphere_density_rows(&mf, axis, level, DENSITY_GRID_N)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let (path, mut file) = create_out_file(&out, &format!("density_axis{axis}.csv"))?;
        write_sphere_density_csv(&mut file, &rows)
            .map_err(|e| CliError::Runtime(format!("writing `{}`: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn flag_parsers_accept_and_reject() {
        assert_eq!(parse_vec3("1, 0, 0").unwrap().0, [1.0, 0.0, 0.0]);
        assert!(parse_vec3("1,0").is_err());
        assert!(parse_vec3("1,0,x").is_err());
        let m = parse_mat3("1,2,3,4,5,6,7,8,9").unwrap().0;
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(2, 0)], 7.0);
        assert!(parse_mat3("1,2,3").is_err());
    }

    #[test]
    fn simulate_plan_defaults_and_seed_requirement() {
        let args = SimulateArgs::try_parse_from_cli(["--seed", "7", "--combo", "AVI_RVI"]);
        let plan = simulate_plan(&args).unwrap();
        assert_eq!(plan.combos, vec![Combo::AviRvi]);
        assert_eq!(plan.estimators, vec![Estimator::MatrixFisher]);
        assert_eq!(plan.runs, 10);
        assert_eq!(plan.template.seed, 7);
        assert_eq!(plan.template.duration, 60.0);

        let args = SimulateArgs::try_parse_from_cli(["--combo", "AVI_RVI"]);
        assert!(matches!(simulate_plan(&args), Err(CliError::Usage(_))));
    }

    impl SimulateArgs {
        fn try_parse_from_cli<'a>(flags: impl IntoIterator<Item = &'a str>) -> Self {
            #[derive(Parser)]
            struct Wrapper {
                #[command(flatten)]
                args: SimulateArgs,
            }
            let argv = std::iter::once("x").chain(flags);
            Wrapper::try_parse_from(argv).unwrap().args
        }
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let good: Result<SimulateConfig, _> =
            serde_json::from_str(r#"{"seed": 3, "runs": 2, "combos": ["AVB_RVB"]}"#);
        assert!(good.is_ok());
        let bad: Result<SimulateConfig, _> =
            serde_json::from_str(r#"{"seed": 3, "runz": 2}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn combo_derivation_from_streams() {
        use crate::harness::{DirSample, GyroSample};
        let mut streams = LogStreams::default();
        streams.gyro.push(GyroSample {
            t: 0.0,
            w: Vector3::zeros(),
            frame: Frame::Body,
        });
        assert!(matches!(derive_combo(&streams), Err(CliError::Usage(_))));
        streams.directions.push(DirSample {
            t: 0.0,
            reading: Vector3::x(),
            kind: MeasurementKind::InertialRef,
        });
        assert_eq!(derive_combo(&streams).unwrap(), Combo::AvbRvi);
    }
}
