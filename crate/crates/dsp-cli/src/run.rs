//! Solver dispatch shared by `solve` and `benchmark`.

use std::time::Instant;

use dsp_core::baseline::{random_assignment, solve_monolithic, MonolithicConfig};
use dsp_core::decomposition::{run_decomposition, RunReport};
use dsp_core::error::{DspError, Result};
use dsp_core::metrics::{full_report, MetricsReport};
use dsp_core::model::{DiscountMatrix, Instance};
use dsp_core::postprocess::PostProcessConfig;
use dsp_core::qubo::{ExhaustiveSolver, SaSolver, SolverBudget, SubSolver};
use dsp_core::relaxation::solve_global;
use serde::Serialize;

/// Interchangeable solving strategies. The decomposition variants work
/// chunk by chunk; the other two attack the whole problem at once and
/// ignore the chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SolverKind {
    /// Chunked pipeline with the annealing sub-solver.
    DecompSa,
    /// Chunked pipeline with exact enumeration per chunk (small chunks
    /// only).
    DecompExhaustive,
    /// One annealed whole-problem formulation; constraints enter as
    /// penalties, so use it as a baseline, not a reference.
    SaMonolithic,
    /// Uniform random grid-bound assignment, the degenerate baseline.
    Random,
}

impl SolverKind {
    pub fn uses_chunks(self) -> bool {
        matches!(self, SolverKind::DecompSa | SolverKind::DecompExhaustive)
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::DecompSa => "decomp-sa",
            SolverKind::DecompExhaustive => "decomp-exhaustive",
            SolverKind::SaMonolithic => "sa-monolithic",
            SolverKind::Random => "random",
        }
    }

    /// Inverse of [`name`](Self::name), for reading benchmark rows back.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "decomp-sa" => Some(SolverKind::DecompSa),
            "decomp-exhaustive" => Some(SolverKind::DecompExhaustive),
            "sa-monolithic" => Some(SolverKind::SaMonolithic),
            "random" => Some(SolverKind::Random),
            _ => None,
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a finished run hands back to the caller.
pub struct Execution {
    pub matrix: DiscountMatrix,
    pub metrics: MetricsReport,
    pub wall_seconds: f64,
    /// Chunk-level trace; present for the decomposition solvers.
    pub pipeline: Option<RunReport>,
    /// Whole-problem formulation energy; present for sa-monolithic.
    pub baseline_energy: Option<f64>,
    /// Power-overshoot score of the monolithic run.
    pub power_excess_score: Option<f64>,
}

/// Runs one solver on one instance and evaluates the result. The seed
/// inside `budget` drives all randomness.
pub fn execute(
    instance: &Instance,
    kind: SolverKind,
    chunk_size: usize,
    budget: &SolverBudget,
    pp: &PostProcessConfig,
) -> Result<Execution> {
    match kind {
        SolverKind::DecompSa => {
            decomposed(instance, chunk_size, &SaSolver::default(), budget, pp)
        }
        SolverKind::DecompExhaustive => {
            decomposed(instance, chunk_size, &ExhaustiveSolver::default(), budget, pp)
        }
        SolverKind::SaMonolithic => {
            let started = Instant::now();
            let run = solve_monolithic(instance, &MonolithicConfig::default(), budget)?;
            let zeta = solve_global(instance)?.zeta().to_vec();
            let metrics = full_report(instance, &run.matrix, &zeta)?;
            Ok(Execution {
                matrix: run.matrix,
                metrics,
                wall_seconds: started.elapsed().as_secs_f64(),
                pipeline: None,
                baseline_energy: Some(run.energy),
                power_excess_score: Some(run.power_score),
            })
        }
        SolverKind::Random => {
            let started = Instant::now();
            let matrix = random_assignment(instance, budget.seed);
            let zeta = solve_global(instance)?.zeta().to_vec();
            let metrics = full_report(instance, &matrix, &zeta)?;
            Ok(Execution {
                matrix,
                metrics,
                wall_seconds: started.elapsed().as_secs_f64(),
                pipeline: None,
                baseline_energy: None,
                power_excess_score: None,
            })
        }
    }
}

fn decomposed(
    instance: &Instance,
    chunk_size: usize,
    solver: &dyn SubSolver,
    budget: &SolverBudget,
    pp: &PostProcessConfig,
) -> Result<Execution> {
    let run =
        run_decomposition(instance, chunk_size, solver, budget, pp).map_err(DspError::from)?;
    let metrics = full_report(instance, &run.matrix, &run.report.zeta_star)?;
    Ok(Execution {
        matrix: run.matrix,
        metrics,
        wall_seconds: run.report.wall_seconds,
        pipeline: Some(run.report),
        baseline_energy: None,
        power_excess_score: None,
    })
}

/// On-disk run report: solver identity, the evaluation, and the
/// solver-specific trace.
#[derive(Serialize)]
pub struct SolveReport<'a> {
    pub solver: &'a str,
    pub chunk_size: Option<usize>,
    pub seed: u64,
    pub sweeps: Option<u64>,
    pub time_limit_secs: Option<f64>,
    pub restarts: u32,
    pub wall_seconds: f64,
    pub metrics: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<&'a RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_excess_score: Option<f64>,
}
