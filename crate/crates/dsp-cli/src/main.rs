//! Command-line front end for the discount scheduling pipeline:
//! synthetic instance generation, solving, solution evaluation, and
//! benchmark sweeps.
//!
//! Exit codes are a stable scripting contract: 0 on success, 2 for
//! usage or input validation problems, 3 when a solver gives up.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsp_core::datagen::{generate_instance, GeneratorConfig};
use dsp_core::error::DspError;
use dsp_core::io::{
    metrics_csv_header, metrics_csv_row, metrics_to_json, read_instance, read_matrix,
    write_instance, write_matrix,
};
use dsp_core::metrics::full_report;
use dsp_core::model::{DiscountScheme, PenaltyWeights};
use dsp_core::postprocess::PostProcessConfig;
use dsp_core::qubo::SolverBudget;
use dsp_core::relaxation::solve_global;

mod bench;
mod run;

use run::SolverKind;

/// A failure with its exit code already decided.
pub(crate) enum CliError {
    /// Bad arguments or invalid input data; exits 2.
    Usage(String),
    /// The chosen solver could not produce a solution; exits 3.
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Solver(m) => m,
        }
    }
}

/// Sorts solver-side failures from input problems and attaches guidance
/// where there is an obvious way out.
impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        let too_large = match &e {
            DspError::TooLarge { .. } => true,
            DspError::SubSolverFailure { source, .. } => {
                matches!(**source, DspError::TooLarge { .. })
            }
            _ => false,
        };
        if too_large {
            return CliError::Solver(format!(
                "{e}; lower --chunk-size (variables scale with chunk size, timesteps and \
                 bits per category) or switch to decomp-sa"
            ));
        }
        match e {
            DspError::SubSolverFailure { .. } | DspError::TargetBoundsInfeasible { .. } => {
                CliError::Solver(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dsp",
    version,
    about = "CO2-aware discount scheduling: generate, solve, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic instance to JSON.
    Generate(GenerateArgs),
    /// Solve an instance and write the discount matrix (plus a report).
    Solve(SolveArgs),
    /// Evaluate a solution file against its instance.
    Metrics(MetricsArgs),
    /// Sweep instance sizes, solvers and seeds into a CSV table.
    Benchmark(bench::BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of customers.
    #[arg(long)]
    customers: usize,
    /// Timesteps per day horizon.
    #[arg(long, default_value_t = 76)]
    timesteps: usize,
    /// Draw seed; DSP_SEED overrides the default.
    #[arg(long, env = "DSP_SEED", default_value_t = 1)]
    seed: u64,
    /// Share of residential (vs industrial) load shapes.
    #[arg(long, default_value_t = 0.8)]
    residential_fraction: f64,
    /// Sigma of the multiplicative per-entry noise.
    #[arg(long, default_value_t = 0.2)]
    noise_level: f64,
    /// Largest per-customer circular shift in timesteps.
    #[arg(long, default_value_t = 4)]
    shift_max: usize,
    #[arg(long, default_value_t = 0.5)]
    scale_min: f64,
    #[arg(long, default_value_t = 4.0)]
    scale_max: f64,
    /// Share of customers with rooftop generation.
    #[arg(long, default_value_t = 0.3)]
    pv_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pv_peak_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pv_peak_max: f64,
    /// Emission intensity range in g/kWh.
    #[arg(long, default_value_t = 50.0)]
    intensity_min: f64,
    #[arg(long, default_value_t = 400.0)]
    intensity_max: f64,
    /// Power corridor as a fraction of the mean timestep load.
    #[arg(long, default_value_t = 0.1)]
    dp_fraction: f64,
    /// Largest discount/penalty magnitude.
    #[arg(long, default_value_t = 0.5)]
    z_max: f64,
    /// Number of discount categories.
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, default_value_t = 1e-5)]
    lambda2: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda3: f64,
    /// Output instance path (JSON).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Instance JSON file.
    instance: PathBuf,
    #[arg(long, value_enum)]
    solver: SolverKind,
    /// Customers per chunk; required by the decomposition solvers.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Total wall-clock budget in seconds.
    #[arg(long)]
    budget_secs: Option<f64>,
    /// Used when --budget-secs is absent: budget = this times the
    /// customer count.
    #[arg(long, default_value_t = 0.1)]
    budget_secs_per_customer: f64,
    /// Fixed sweep count; overrides the time budget and makes runs
    /// machine-independent.
    #[arg(long)]
    sweeps: Option<u64>,
    #[arg(long, default_value_t = 4)]
    restarts: u32,
    /// Solver seed; DSP_SEED overrides the default.
    #[arg(long, env = "DSP_SEED", default_value_t = 1)]
    seed: u64,
    /// Post-processing candidate cutoff per timestep and side.
    #[arg(long, default_value_t = 500)]
    cutoff: usize,
    /// Post-processing pair-move passes.
    #[arg(long, default_value_t = 1)]
    passes: usize,
    /// Output solution path (CSV).
    #[arg(short, long)]
    output: PathBuf,
    /// Also write a run report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Instance JSON file.
    instance: PathBuf,
    /// Solution CSV file.
    solution: PathBuf,
    /// Also write the JSON report to this path.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write a flat CSV (header plus one row).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Benchmark(args) => bench::cmd_benchmark(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let scheme = DiscountScheme::new(a.z_max, a.categories)?;
    let penalties = PenaltyWeights::new(a.lambda1, a.lambda2, a.lambda3)?;
    let mut config = GeneratorConfig::new(a.customers, a.seed);
    config.n_timesteps = a.timesteps;
    config.residential_fraction = a.residential_fraction;
    config.noise_level = a.noise_level;
    config.shift_max = a.shift_max;
    config.scale_range = (a.scale_min, a.scale_max);
    config.pv_fraction = a.pv_fraction;
    config.pv_peak_range = (a.pv_peak_min, a.pv_peak_max);
    config.intensity_range = (a.intensity_min, a.intensity_max);
    config.dp_fraction = a.dp_fraction;
    config.scheme = scheme;
    config.penalties = penalties;

    let instance = generate_instance(&config)?;
    write_instance(&a.output, &instance)?;

    let totals = instance.timestep_totals();
    let peak = totals.iter().cloned().fold(f64::MIN, f64::max);
    let trough = totals.iter().cloned().fold(f64::MAX, f64::min);
    let total: f64 = totals.iter().sum();
    println!(
        "wrote {} customers x {} timesteps to {}",
        instance.n_customers(),
        instance.n_timesteps(),
        a.output.display()
    );
    println!(
        "total consumption {:.3}, peak/trough load ratio {:.2}, power corridor {:.4}",
        total,
        peak / trough,
        instance.power_bound()[0]
    );
    println!(
        "baseline emissions {:.1}, naive lower bound {:.1}",
        instance.baseline_emissions(),
        instance.emissions_lower_bound()
    );
    Ok(())
}

/// An explicit sweep count wins over any time budget; otherwise the
/// budget defaults to a per-customer slice of wall-clock time.
fn resolve_budget(
    sweeps: Option<u64>,
    budget_secs: Option<f64>,
    per_customer: f64,
    restarts: u32,
    seed: u64,
    n_customers: usize,
) -> SolverBudget {
    match sweeps {
        Some(s) => SolverBudget::sweeps(s, restarts, seed),
        None => {
            let secs = budget_secs.unwrap_or(per_customer * n_customers as f64);
            SolverBudget::timed(secs, restarts, seed)
        }
    }
}

fn cmd_solve(a: SolveArgs) -> Result<(), CliError> {
    let instance = read_instance(&a.instance)?;
    let chunk_size = match (a.solver.uses_chunks(), a.chunk_size) {
        (true, None) => {
            return Err(CliError::Usage(format!(
                "solver {} requires --chunk-size",
                a.solver
            )))
        }
        (true, Some(0)) => {
            return Err(CliError::Usage("--chunk-size must be at least 1".into()))
        }
        (true, Some(m)) => m,
        (false, _) => 0,
    };
    let budget = resolve_budget(
        a.sweeps,
        a.budget_secs,
        a.budget_secs_per_customer,
        a.restarts,
        a.seed,
        instance.n_customers(),
    );
    let pp = PostProcessConfig { cutoff: a.cutoff, passes: a.passes };

    let exec = run::execute(&instance, a.solver, chunk_size, &budget, &pp)?;
    write_matrix(&a.output, &exec.matrix, instance.scheme())?;
    if let Some(path) = &a.report {
        let report = run::SolveReport {
            solver: a.solver.name(),
            chunk_size: a.solver.uses_chunks().then_some(chunk_size),
            seed: a.seed,
            sweeps: budget.sweep_count,
            time_limit_secs: budget.time_limit_secs,
            restarts: a.restarts,
            wall_seconds: exec.wall_seconds,
            metrics: &exec.metrics,
            pipeline: exec.pipeline.as_ref(),
            baseline_energy: exec.baseline_energy,
            power_excess_score: exec.power_excess_score,
        };
        let json = serde_json::to_string_pretty(&report).map_err(DspError::from)?;
        std::fs::write(path, json).map_err(DspError::from)?;
    }
    println!(
        "{}: co2 reduction error {:.5}, feasible {}, wall {:.2} s, solution at {}",
        a.solver,
        exec.metrics.co2_reduction_error,
        exec.metrics.feasibility.feasible,
        exec.wall_seconds,
        a.output.display()
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let instance = read_instance(&a.instance)?;
    let z = read_matrix(&a.solution, instance.scheme())?;
    if z.n_customers() != instance.n_customers() || z.n_timesteps() != instance.n_timesteps() {
        return Err(CliError::Usage(format!(
            "solution shape {}x{} does not match instance shape {}x{}",
            z.n_customers(),
            z.n_timesteps(),
            instance.n_customers(),
            instance.n_timesteps()
        )));
    }
    let zeta = solve_global(&instance)?.zeta().to_vec();
    let report = full_report(&instance, &z, &zeta)?;
    let json = metrics_to_json(&report)?;
    println!("{json}");
    if let Some(path) = &a.output {
        std::fs::write(path, &json).map_err(DspError::from)?;
    }
    if let Some(path) = &a.csv {
        let text = format!("{}\n{}\n", metrics_csv_header(&report), metrics_csv_row(&report));
        std::fs::write(path, text).map_err(DspError::from)?;
    }
    Ok(())
}
