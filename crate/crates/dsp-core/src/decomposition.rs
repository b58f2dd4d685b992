//! Chunked solving of the full assignment problem.
//!
//! The full problem couples every customer through the emissions term.
//! The pipeline here removes that coupling: the relaxation fixes optimal
//! per-timestep effective discounts, customers are split into chunks by
//! total consumption, and each chunk independently tracks its share of
//! the aggregated profile. Chunk targets `xi` are chosen so that every
//! chunk is budget-neutral on its own and the chunks recombine exactly
//! to the relaxed profile. Chunks are then solved one after another as
//! QUBOs, and whatever a chunk fails to deliver is folded into the next
//! chunk's target, so errors cannot silently accumulate.
//!
//! The final assignment is refined by the greedy post-processing step,
//! which also guarantees the power restriction.

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::encoding::IntegerEncoding;
use crate::error::{DspError, Result};
use crate::model::{DiscountMatrix, Instance};
use crate::postprocess::{post_process, ChangeRecord, PostProcessConfig};
use crate::qubo::{Qubo, QuboBuilder, SolverBudget, SubSolver};
use crate::relaxation::solve_global;

/// Customer indices ordered by total consumption, heaviest first, ties
/// by index.
fn consumption_order(instance: &Instance) -> Vec<usize> {
    let totals = instance.customer_totals();
    let mut order: Vec<usize> = (0..instance.n_customers()).collect();
    order.sort_by(|&a, &b| totals[b].partial_cmp(&totals[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Splits customers into chunks of `chunk_size`, heaviest consumers
/// first. The customer count must be divisible by the chunk size.
pub fn partition_customers(instance: &Instance, chunk_size: usize) -> Result<Vec<Vec<usize>>> {
    if chunk_size == 0 || instance.n_customers() % chunk_size != 0 {
        return Err(DspError::IndivisibleChunkSize {
            n_customers: instance.n_customers(),
            chunk_size,
        });
    }
    let order = consumption_order(instance);
    Ok(order.chunks(chunk_size).map(|c| c.to_vec()).collect())
}

/// Per-chunk target profiles and the weights that produced them.
#[derive(Debug, Clone)]
pub struct ChunkTargets {
    /// Per-timestep correction weights, summing to one.
    pub alpha: Vec<f64>,
    /// Target effective discount per chunk and timestep.
    pub xi: Vec<Vec<f64>>,
    /// Weighted mutable consumption per chunk and timestep.
    pub chunk_mutable: Vec<Vec<f64>>,
    /// Rounds of weight redistribution that were needed.
    pub redistribution_iterations: usize,
}

const MAX_REDISTRIBUTION_ITERATIONS: usize = 20;

/// Derives budget-neutral chunk targets that recombine to `zeta_star`.
///
/// Each chunk's target is the shared profile minus a correction
/// proportional to the chunk's own weighted-profile imbalance, spread
/// over timesteps by the weights `alpha`. Uniform weights are tried
/// first; any timestep whose correction pushes some chunk beyond the
/// grid bound gets its weight capped at the largest value that keeps the
/// worst chunk exactly on the bound, and the remaining weight is spread
/// proportionally over the free timesteps.
pub fn chunk_targets(
    instance: &Instance,
    chunks: &[Vec<usize>],
    zeta_star: &[f64],
) -> Result<ChunkTargets> {
    let nt = instance.n_timesteps();
    assert_eq!(zeta_star.len(), nt, "target length mismatch");
    let z_max = instance.scheme().z_max();
    let mut chunk_mutable = Vec::with_capacity(chunks.len());
    for (j, chunk) in chunks.iter().enumerate() {
        let mut row = vec![0.0; nt];
        for &c in chunk {
            for (t, cell) in row.iter_mut().enumerate() {
                *cell += instance.elasticity()[c] * instance.consumption(c, t);
            }
        }
        if let Some(t) = row.iter().position(|&v| v <= 0.0) {
            return Err(DspError::ZeroChunkMutableConsumption { chunk: j, timestep: t });
        }
        chunk_mutable.push(row);
    }
    // Weighted-profile imbalance per chunk.
    let imbalance: Vec<f64> = chunk_mutable
        .iter()
        .map(|row| row.iter().zip(zeta_star).map(|(&d, &z)| d * z).sum())
        .collect();

    let mut alpha = vec![1.0 / nt as f64; nt];
    let mut frozen = vec![false; nt];
    let tol = 1e-9 * z_max;
    let mut iterations = 0;
    loop {
        let xi = targets_for(&alpha, zeta_star, &chunk_mutable, &imbalance);
        let violations: Vec<usize> = (0..nt)
            .filter(|&t| xi.iter().any(|row| row[t].abs() > z_max + tol))
            .collect();
        if violations.is_empty() {
            return Ok(ChunkTargets {
                alpha,
                xi,
                chunk_mutable,
                redistribution_iterations: iterations,
            });
        }
        iterations += 1;
        if iterations > MAX_REDISTRIBUTION_ITERATIONS {
            return Err(DspError::TargetBoundsInfeasible { iterations });
        }
        for &t in &violations {
            let mut cap = f64::INFINITY;
            for (j, row) in chunk_mutable.iter().enumerate() {
                let rate = imbalance[j] / row[t];
                let bound = if rate > 0.0 {
                    (zeta_star[t] + z_max) / rate
                } else if rate < 0.0 {
                    (zeta_star[t] - z_max) / rate
                } else {
                    continue;
                };
                cap = cap.min(bound.max(0.0));
            }
            debug_assert!(cap.is_finite(), "violation without a finite cap");
            alpha[t] = cap;
            frozen[t] = true;
        }
        let frozen_mass: f64 = (0..nt).filter(|&t| frozen[t]).map(|t| alpha[t]).sum();
        let free_mass: f64 = (0..nt).filter(|&t| !frozen[t]).map(|t| alpha[t]).sum();
        let target = 1.0 - frozen_mass;
        if target < -1e-12 || (free_mass <= 0.0 && (target - 0.0).abs() > 1e-9) {
            return Err(DspError::TargetBoundsInfeasible { iterations });
        }
        if free_mass > 0.0 {
            let factor = target / free_mass;
            for t in 0..nt {
                if !frozen[t] {
                    alpha[t] *= factor;
                }
            }
        }
    }
}

fn targets_for(
    alpha: &[f64],
    zeta_star: &[f64],
    chunk_mutable: &[Vec<f64>],
    imbalance: &[f64],
) -> Vec<Vec<f64>> {
    chunk_mutable
        .iter()
        .zip(imbalance)
        .map(|(row, &s)| {
            (0..zeta_star.len())
                .map(|t| zeta_star[t] - alpha[t] * s / row[t])
                .collect()
        })
        .collect()
}

/// A chunk's QUBO together with its variable layout.
#[derive(Debug, Clone)]
pub struct ChunkQubo {
    qubo: Qubo,
    customers: Vec<usize>,
    n_timesteps: usize,
    encoding: IntegerEncoding,
}

impl ChunkQubo {
    pub fn qubo(&self) -> &Qubo {
        &self.qubo
    }

    /// Global customer ids, in chunk order.
    pub fn customers(&self) -> &[usize] {
        &self.customers
    }

    pub fn encoding(&self) -> &IntegerEncoding {
        &self.encoding
    }

    /// Flat variable index of bit `k` of the entry for the chunk-local
    /// customer `local` at timestep `t`.
    pub fn variable(&self, local: usize, t: usize, k: usize) -> usize {
        (local * self.n_timesteps + t) * self.encoding.n_bits() + k
    }

    /// Decodes a bit assignment into grid indices, one row per
    /// chunk-local customer.
    pub fn decode(&self, bits: &[u8]) -> Result<Vec<Vec<u16>>> {
        if bits.len() != self.qubo.n_vars() {
            return Err(DspError::LengthMismatch {
                expected: self.qubo.n_vars(),
                got: bits.len(),
            });
        }
        let q = self.encoding.n_bits();
        let mut rows = Vec::with_capacity(self.customers.len());
        for local in 0..self.customers.len() {
            let mut row = Vec::with_capacity(self.n_timesteps);
            for t in 0..self.n_timesteps {
                let start = self.variable(local, t, 0);
                row.push(self.encoding.decode_index(&bits[start..start + q])? as u16);
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Builds the QUBO whose energy equals [`chunk_objective`] at the
/// decoded assignment, for every bit pattern.
///
/// The squared tracking deviation per timestep carries weight
/// `1/(N_T z_max^2)`; the per-customer budget, smoothing, and magnitude
/// penalties keep the same weights as in the full cost, restricted to
/// the chunk's customers.
pub fn build_chunk_qubo(instance: &Instance, customers: &[usize], xi: &[f64]) -> ChunkQubo {
    let nt = instance.n_timesteps();
    assert_eq!(xi.len(), nt, "target length mismatch");
    let scheme = instance.scheme();
    let encoding = IntegerEncoding::for_scheme(scheme);
    let q = encoding.n_bits();
    let m = customers.len();
    let norms = instance.normalizations().expect("instance is validated at construction");
    let lam = instance.penalties();

    // Every entry decodes to an affine form: lowest grid value plus
    // weighted bits, one grid step per unit of encoded weight.
    let base = scheme.value(0);
    let bit_coeff: Vec<f64> =
        encoding.weights().iter().map(|&w| scheme.step() * w as f64).collect();
    let var = |local: usize, t: usize, k: usize| (local * nt + t) * q + k;

    let mut mutable = vec![0.0; nt];
    for &c in customers {
        for (t, cell) in mutable.iter_mut().enumerate() {
            *cell += instance.elasticity()[c] * instance.consumption(c, t);
        }
    }
    assert!(
        mutable.iter().all(|&v| v > 0.0),
        "chunk without weighted consumption at some timestep"
    );

    let mut builder = QuboBuilder::new(m * nt * q);

    let track_weight = 1.0 / (nt as f64 * scheme.z_max() * scheme.z_max());
    let mut terms = Vec::with_capacity(m * q);
    for t in 0..nt {
        terms.clear();
        let mut constant = xi[t];
        for (local, &c) in customers.iter().enumerate() {
            let share = instance.elasticity()[c] * instance.consumption(c, t) / mutable[t];
            constant -= share * base;
            for (k, &bc) in bit_coeff.iter().enumerate() {
                terms.push((var(local, t, k), -share * bc));
            }
        }
        builder.add_squared_linear(track_weight, &terms, constant);
    }

    for (local, &c) in customers.iter().enumerate() {
        let total = instance.customer_totals()[c];
        terms.clear();
        let mut constant = 0.0;
        for t in 0..nt {
            let share = instance.consumption(c, t) / total;
            constant += share * base;
            for (k, &bc) in bit_coeff.iter().enumerate() {
                terms.push((var(local, t, k), share * bc));
            }
        }
        builder.add_squared_linear(lam.lambda1 / norms.n1, &terms, constant);
    }

    for local in 0..m {
        for t in 0..nt - 1 {
            terms.clear();
            for (k, &bc) in bit_coeff.iter().enumerate() {
                terms.push((var(local, t, k), bc));
                terms.push((var(local, t + 1, k), -bc));
            }
            builder.add_squared_linear(lam.lambda2 / norms.n2, &terms, 0.0);
        }
    }

    for local in 0..m {
        for t in 0..nt {
            terms.clear();
            for (k, &bc) in bit_coeff.iter().enumerate() {
                terms.push((var(local, t, k), bc));
            }
            builder.add_squared_linear(lam.lambda3 / norms.n3, &terms, base);
        }
    }

    ChunkQubo {
        qubo: builder.finish(),
        customers: customers.to_vec(),
        n_timesteps: nt,
        encoding,
    }
}

/// Directly evaluates the chunk objective at decoded discount values,
/// one row per chunk-local customer.
pub fn chunk_objective(
    instance: &Instance,
    customers: &[usize],
    xi: &[f64],
    values: &[Vec<f64>],
) -> f64 {
    let nt = instance.n_timesteps();
    let scheme = instance.scheme();
    let norms = instance.normalizations().expect("instance is validated at construction");
    let lam = instance.penalties();

    let mut total = 0.0;
    let track_weight = 1.0 / (nt as f64 * scheme.z_max() * scheme.z_max());
    for t in 0..nt {
        let mut mutable = 0.0;
        let mut achieved = 0.0;
        for (local, &c) in customers.iter().enumerate() {
            let w = instance.elasticity()[c] * instance.consumption(c, t);
            mutable += w;
            achieved += w * values[local][t];
        }
        let dev = xi[t] - achieved / mutable;
        total += track_weight * dev * dev;
    }
    for (local, &c) in customers.iter().enumerate() {
        let mut budget = 0.0;
        for t in 0..nt {
            budget += instance.consumption(c, t) * values[local][t];
        }
        budget /= instance.customer_totals()[c];
        total += lam.lambda1 / norms.n1 * budget * budget;

        for t in 0..nt - 1 {
            let d = values[local][t] - values[local][t + 1];
            total += lam.lambda2 / norms.n2 * d * d;
        }
        for t in 0..nt {
            total += lam.lambda3 / norms.n3 * values[local][t] * values[local][t];
        }
    }
    total
}

/// Folds the residual carried over from earlier chunks into a chunk's
/// base target, clipping to the grid bound. The clipped remainder stays
/// in the carry and reaches the next chunk.
pub fn sequential_update(
    base_xi: &[f64],
    carry: &[f64],
    chunk_mutable: &[f64],
    z_max: f64,
) -> Vec<f64> {
    base_xi
        .iter()
        .zip(carry)
        .zip(chunk_mutable)
        .map(|((&xi, &r), &d)| (xi + r / d).clamp(-z_max, z_max))
        .collect()
}

/// The weighted contribution of a chunk's decoded assignment per
/// timestep: `sum_{c in chunk} chi_c d_{c,t} z_{c,t}`.
fn achieved_contribution(
    instance: &Instance,
    customers: &[usize],
    rows: &[Vec<u16>],
) -> Vec<f64> {
    let scheme = instance.scheme();
    (0..instance.n_timesteps())
        .map(|t| {
            customers
                .iter()
                .enumerate()
                .map(|(local, &c)| {
                    instance.elasticity()[c]
                        * instance.consumption(c, t)
                        * scheme.value(rows[local][t] as usize)
                })
                .sum()
        })
        .collect()
}

/// Per-chunk solve record.
#[derive(Debug, Clone, Serialize)]
pub struct ChunkReport {
    pub index: usize,
    pub customers: Vec<usize>,
    pub energy: f64,
    /// Euclidean norm of the carried residual after this chunk.
    pub residual_norm: f64,
    pub wall_seconds: f64,
}

/// Everything the pipeline observed along the way.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RunReport {
    pub solver: String,
    pub chunk_size: usize,
    pub zeta_star: Vec<f64>,
    pub relaxation_emissions: f64,
    pub redistribution_iterations: usize,
    pub chunks: Vec<ChunkReport>,
    /// Unabsorbed weighted-contribution residual per timestep after the
    /// last chunk, before post-processing.
    pub final_residual: Vec<f64>,
    pub repair_steps: usize,
    pub pair_moves: usize,
    pub wall_seconds: f64,
}

/// A finished pipeline run.
#[derive(Debug, Clone)]
pub struct DecompositionRun {
    pub matrix: DiscountMatrix,
    pub report: RunReport,
    pub changes: Vec<ChangeRecord>,
}

/// A pipeline failure, keeping whatever the report had accumulated.
#[derive(Debug)]
pub struct PipelineError {
    pub source: DspError,
    pub partial: RunReport,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pipeline aborted after {} chunks: {}", self.partial.chunks.len(), self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<PipelineError> for DspError {
    fn from(e: PipelineError) -> Self {
        e.source
    }
}

/// Runs the whole pipeline: relaxation, chunking, sequential chunk
/// solves with residual carry-over, and post-processing. The budget is
/// split evenly over the chunks.
pub fn run_decomposition(
    instance: &Instance,
    chunk_size: usize,
    solver: &dyn SubSolver,
    budget: &SolverBudget,
    pp: &PostProcessConfig,
) -> std::result::Result<DecompositionRun, PipelineError> {
    let started = Instant::now();
    let mut report = RunReport {
        solver: solver.name().to_string(),
        chunk_size,
        ..RunReport::default()
    };
    macro_rules! guard {
        ($expr:expr) => {
            match $expr {
                Ok(v) => v,
                Err(e) => {
                    report.wall_seconds = started.elapsed().as_secs_f64();
                    return Err(PipelineError { source: e.into(), partial: report });
                }
            }
        };
    }

    guard!(budget.validate());
    let profile = guard!(solve_global(instance));
    report.zeta_star = profile.zeta().to_vec();
    report.relaxation_emissions = profile.achieved_emissions();

    let chunks = guard!(partition_customers(instance, chunk_size));
    let targets = guard!(chunk_targets(instance, &chunks, profile.zeta()));
    report.redistribution_iterations = targets.redistribution_iterations;

    let budgets = budget.split(chunks.len());
    let z_max = instance.scheme().z_max();
    let mut carry = vec![0.0; instance.n_timesteps()];
    let mut matrix = DiscountMatrix::uniform(
        instance.n_customers(),
        instance.n_timesteps(),
        0,
        instance.scheme(),
    )
    .expect("index 0 is valid on every grid");

    for (j, chunk) in chunks.iter().enumerate() {
        let asked = sequential_update(&targets.xi[j], &carry, &targets.chunk_mutable[j], z_max);
        let chunk_qubo = build_chunk_qubo(instance, chunk, &asked);
        let solve_started = Instant::now();
        let solved = solver.solve(chunk_qubo.qubo(), &budgets[j]).map_err(|e| {
            report.wall_seconds = started.elapsed().as_secs_f64();
            PipelineError {
                source: DspError::SubSolverFailure { chunk: j, source: Box::new(e) },
                partial: report.clone(),
            }
        })?;
        let wall_seconds = solve_started.elapsed().as_secs_f64();
        let rows = match chunk_qubo.decode(&solved.bits) {
            Ok(rows) => rows,
            Err(e) => {
                report.wall_seconds = started.elapsed().as_secs_f64();
                return Err(PipelineError {
                    source: DspError::SubSolverFailure { chunk: j, source: Box::new(e) },
                    partial: report,
                });
            }
        };
        for (local, &c) in chunk.iter().enumerate() {
            for t in 0..instance.n_timesteps() {
                matrix.set_index(c, t, rows[local][t]);
            }
        }
        let achieved = achieved_contribution(instance, chunk, &rows);
        for t in 0..instance.n_timesteps() {
            carry[t] += targets.chunk_mutable[j][t] * targets.xi[j][t] - achieved[t];
        }
        report.chunks.push(ChunkReport {
            index: j,
            customers: chunk.clone(),
            energy: solved.energy,
            residual_norm: carry.iter().map(|r| r * r).sum::<f64>().sqrt(),
            wall_seconds,
        });
    }
    report.final_residual = carry;

    let outcome = guard!(post_process(instance, &matrix, profile.zeta(), pp));
    report.repair_steps = outcome.changes.iter().filter(|c| c.pass == 0).count();
    report.pair_moves = outcome.changes.len() - report.repair_steps;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(DecompositionRun {
        matrix: outcome.matrix,
        report,
        changes: outcome.changes,
    })
}

/// Study configuration: which chunk sizes, targets, and timesteps to
/// probe, and when enumeration hands over to the sub-solver.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub chunk_sizes: Vec<usize>,
    pub zeta_grid: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// Chunk sizes up to this bound are minimized exactly.
    pub exact_limit: usize,
    /// Budget for the sub-solver above the exact bound.
    pub budget: SolverBudget,
}

impl StudyConfig {
    pub fn new(chunk_sizes: Vec<usize>, zeta_grid: Vec<f64>, timesteps: Vec<usize>) -> Self {
        Self {
            chunk_sizes,
            zeta_grid,
            timesteps,
            exact_limit: 16,
            budget: SolverBudget::sweeps(2_000, 8, 7),
        }
    }
}

/// One probe of the study table.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub chunk_size: usize,
    pub zeta: f64,
    pub timestep: usize,
    pub relative_error: f64,
}

/// How closely a group of customers can realize a uniform effective
/// discount with one constant per-customer category.
///
/// For each (chunk size, target, timestep) the minimized relative error
/// `min_z |sum_c d_{c,t} z_c / sum_c d_{c,t} - zeta| / |zeta|` is
/// reported, minimizing over one grid category per customer. Small
/// chunks are minimized exactly by meet-in-the-middle enumeration over
/// the two half-chunks; larger ones fall back to the sub-solver.
pub fn approximation_error_study(
    instance: &Instance,
    config: &StudyConfig,
    solver: &dyn SubSolver,
) -> Result<Vec<StudyRow>> {
    if config.zeta_grid.iter().any(|&z| z == 0.0 || !z.is_finite()) {
        return Err(DspError::InvalidConfig(
            "targets must be finite and nonzero; relative error is undefined at zero".into(),
        ));
    }
    if let Some(&t) = config.timesteps.iter().find(|&&t| t >= instance.n_timesteps()) {
        return Err(DspError::InvalidConfig(format!(
            "timestep {t} out of range 0..{}",
            instance.n_timesteps()
        )));
    }
    let order = consumption_order(instance);
    let mut rows = Vec::new();
    for &m in &config.chunk_sizes {
        if m == 0 || m > instance.n_customers() {
            return Err(DspError::InvalidConfig(format!(
                "chunk size {m} out of range 1..={}",
                instance.n_customers()
            )));
        }
        let chunk = &order[..m];
        for &t in &config.timesteps {
            let weights: Vec<f64> =
                chunk.iter().map(|&c| instance.consumption(c, t)).collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(DspError::ZeroChunkMutableConsumption { chunk: 0, timestep: t });
            }
            if m <= config.exact_limit {
                let (left, right) = half_sums(&weights, instance);
                for &zeta in &config.zeta_grid {
                    let target = zeta * total;
                    let best = closest_pair_sum(&left, &right, target);
                    rows.push(StudyRow {
                        chunk_size: m,
                        zeta,
                        timestep: t,
                        relative_error: (best - target).abs() / target.abs(),
                    });
                }
            } else {
                for &zeta in &config.zeta_grid {
                    let achieved =
                        solve_constant_assignment(instance, &weights, total, zeta, solver, config)?;
                    rows.push(StudyRow {
                        chunk_size: m,
                        zeta,
                        timestep: t,
                        relative_error: (achieved - zeta).abs() / zeta.abs(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// All reachable values of `sum_c w_c z_c` for the two halves of the
/// weight list, the second half sorted for binary search.
fn half_sums(weights: &[f64], instance: &Instance) -> (Vec<f64>, Vec<f64>) {
    let values: Vec<f64> = instance.scheme().values().collect();
    let mid = weights.len() / 2;
    let enumerate = |ws: &[f64]| {
        let mut sums = vec![0.0];
        for &w in ws {
            let mut next = Vec::with_capacity(sums.len() * values.len());
            for &s in &sums {
                for &v in &values {
                    next.push(s + w * v);
                }
            }
            sums = next;
        }
        sums
    };
    let left = enumerate(&weights[..mid]);
    let mut right = enumerate(&weights[mid..]);
    right.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (left, right)
}

/// Minimum-distance sum `a + b` to `target` over `a` in `left` and `b`
/// in sorted `right`.
fn closest_pair_sum(left: &[f64], right: &[f64], target: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut best_sum = 0.0;
    for &a in left {
        let want = target - a;
        let pos = right.partition_point(|&b| b < want);
        for idx in pos.saturating_sub(1)..(pos + 1).min(right.len()) {
            let sum = a + right[idx];
            let gap = (sum - target).abs();
            if gap < best {
                best = gap;
                best_sum = sum;
            }
        }
    }
    best_sum
}

/// Sub-solver path of the study: one constant category per customer,
/// minimizing the squared deviation from the target sum.
fn solve_constant_assignment(
    instance: &Instance,
    weights: &[f64],
    total: f64,
    zeta: f64,
    solver: &dyn SubSolver,
    config: &StudyConfig,
) -> Result<f64> {
    let scheme = instance.scheme();
    let encoding = IntegerEncoding::for_scheme(scheme);
    let q = encoding.n_bits();
    let base = scheme.value(0);
    let mut builder = QuboBuilder::new(weights.len() * q);
    let mut terms = Vec::with_capacity(weights.len() * q);
    let mut constant = -zeta;
    for (i, &w) in weights.iter().enumerate() {
        let share = w / total;
        constant += share * base;
        for (k, &enc_w) in encoding.weights().iter().enumerate() {
            terms.push((i * q + k, share * scheme.step() * enc_w as f64));
        }
    }
    builder.add_squared_linear(1.0, &terms, constant);
    let qubo = builder.finish();
    let solved = solver.solve(&qubo, &config.budget)?;
    let mut achieved = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let idx = encoding.decode_index(&solved.bits[i * q..(i + 1) * q])?;
        achieved += w * scheme.value(idx);
    }
    Ok(achieved / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscountScheme, PenaltyWeights};
    use crate::qubo::ExhaustiveSolver;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn instance_with(
        d: Vec<Vec<f64>>,
        intensity: Vec<f64>,
        dp: Vec<f64>,
        scheme: DiscountScheme,
        penalties: PenaltyWeights,
    ) -> Instance {
        let n = d.len();
        Instance::new(d, intensity, vec![1.0; n], dp, scheme, penalties, 1.0).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, n_customers: usize, n_timesteps: usize, n_categories: usize) -> Instance {
        loop {
            let d: Vec<Vec<f64>> = (0..n_customers)
                .map(|_| (0..n_timesteps).map(|_| rng.gen_range(0.2..2.0)).collect())
                .collect();
            // A ramp plus jitter keeps the intensity profile non-flat.
            let intensity: Vec<f64> = (0..n_timesteps)
                .map(|t| 1.0 + t as f64 + rng.gen_range(0.0..0.5))
                .collect();
            let dp: Vec<f64> = (0..n_timesteps).map(|_| rng.gen_range(0.1..0.6)).collect();
            match Instance::new(
                d,
                intensity,
                vec![1.0; n_customers],
                dp,
                DiscountScheme::new(0.5, n_categories).unwrap(),
                PenaltyWeights::default(),
                1.0,
            ) {
                Ok(inst) => return inst,
                // Heavy draws on low-intensity timesteps push the
                // emissions bound above the baseline; redraw.
                Err(DspError::DegenerateNormalization) => continue,
                Err(e) => panic!("unexpected construction error: {e}"),
            }
        }
    }

    #[test]
    fn partition_sorts_by_consumption_then_index() {
        let inst = instance_with(
            vec![
                vec![2.5, 2.5],
                vec![0.5, 0.5],
                vec![4.5, 4.5],
                vec![1.5, 1.5],
            ],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
        );
        assert_eq!(partition_customers(&inst, 2).unwrap(), vec![vec![2, 0], vec![3, 1]]);
        assert_eq!(partition_customers(&inst, 4).unwrap(), vec![vec![2, 0, 3, 1]]);
        assert!(matches!(
            partition_customers(&inst, 3),
            Err(DspError::IndivisibleChunkSize { n_customers: 4, chunk_size: 3 })
        ));
    }

    #[test]
    fn equal_totals_partition_in_index_order() {
        let inst = instance_with(
            vec![vec![1.0, 1.0]; 4],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
        );
        assert_eq!(partition_customers(&inst, 2).unwrap(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn single_chunk_targets_equal_the_relaxed_profile() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng, 4, 3, 5);
        let zeta = solve_global(&inst).unwrap();
        let chunks = partition_customers(&inst, 4).unwrap();
        let targets = chunk_targets(&inst, &chunks, zeta.zeta()).unwrap();
        assert_eq!(targets.redistribution_iterations, 0);
        for t in 0..3 {
            assert_relative_eq!(targets.xi[0][t], zeta.zeta()[t], max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn identical_composition_chunks_share_targets() {
        // Two profiles with equal totals, duplicated: both chunks hold
        // one of each, so their corrections coincide.
        let inst = instance_with(
            vec![
                vec![3.0, 1.0],
                vec![1.0, 3.0],
                vec![3.0, 1.0],
                vec![1.0, 3.0],
            ],
            vec![1.0, 2.0],
            vec![0.5, 0.5],
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
        );
        let zeta = solve_global(&inst).unwrap();
        let chunks = partition_customers(&inst, 2).unwrap();
        assert_eq!(chunks, vec![vec![0, 1], vec![2, 3]]);
        let targets = chunk_targets(&inst, &chunks, zeta.zeta()).unwrap();
        assert_eq!(targets.xi[0], targets.xi[1]);
        for t in 0..2 {
            assert_relative_eq!(targets.xi[0][t], zeta.zeta()[t], epsilon = 1e-9);
        }
    }

    fn assert_target_identities(inst: &Instance, targets: &ChunkTargets, zeta: &[f64]) {
        // Per-chunk budget neutrality.
        for (row, xi) in targets.chunk_mutable.iter().zip(&targets.xi) {
            let dot: f64 = row.iter().zip(xi).map(|(&d, &x)| d * x).sum();
            let scale: f64 = row.iter().zip(xi).map(|(&d, &x)| (d * x).abs()).sum();
            assert!(dot.abs() <= 1e-9 * (1.0 + scale), "chunk imbalance {dot}");
        }
        // Recombination to the shared profile.
        for t in 0..inst.n_timesteps() {
            let combined: f64 = targets
                .chunk_mutable
                .iter()
                .zip(&targets.xi)
                .map(|(row, xi)| row[t] * xi[t])
                .sum();
            let reference = inst.mutable_timestep_totals()[t] * zeta[t];
            assert!(
                (combined - reference).abs()
                    <= 1e-9 * (1.0 + reference.abs() + inst.mutable_timestep_totals()[t]),
                "recombination off at {t}: {combined} vs {reference}"
            );
        }
        let alpha_sum: f64 = targets.alpha.iter().sum();
        assert!((alpha_sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn redistribution_caps_a_single_tight_timestep() {
        // Chunk 1's last timestep carries almost no weighted consumption,
        // so the uniform correction overshoots the grid bound there.
        let inst = instance_with(
            vec![
                vec![3.0, 3.0, 3.0, 3.0],
                vec![3.0, 3.0, 3.0, 3.0],
                vec![1.0, 1.0, 1.0, 0.05],
                vec![1.0, 1.0, 1.0, 0.05],
            ],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![0.8, 0.8, 0.8, 0.8],
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
        );
        let zeta = solve_global(&inst).unwrap();
        let chunks = partition_customers(&inst, 2).unwrap();
        let targets = chunk_targets(&inst, &chunks, zeta.zeta()).unwrap();
        assert_eq!(targets.redistribution_iterations, 1);
        let z_max = inst.scheme().z_max();
        for xi in &targets.xi {
            for &x in xi {
                assert!(x.abs() <= z_max + 1e-9);
            }
        }
        assert!(targets.alpha[3] < targets.alpha[0]);
        assert_target_identities(&inst, &targets, zeta.zeta());
        // The capped chunk sits exactly on the bound.
        let worst = targets.xi[1][3].abs();
        assert_relative_eq!(worst, z_max, max_relative = 1e-9);
    }

    #[test]
    fn opposed_profiles_at_the_bound_are_infeasible() {
        // Two single-customer chunks with mirrored profiles and targets
        // pinned at the grid bound: no weighting can keep both in range.
        let inst = instance_with(
            vec![vec![10.0, 1.0], vec![1.0, 10.0]],
            vec![1.0, 5.0],
            vec![6.0, 6.0],
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
        );
        let zeta = solve_global(&inst).unwrap();
        assert_eq!(zeta.zeta(), &[-0.5, 0.5]);
        let chunks = partition_customers(&inst, 1).unwrap();
        assert!(matches!(
            chunk_targets(&inst, &chunks, zeta.zeta()),
            Err(DspError::TargetBoundsInfeasible { .. })
        ));
    }

    #[test]
    fn random_chunk_targets_keep_their_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut redistributions = 0;
        for _ in 0..30 {
            let inst = random_instance(&mut rng, 6, 4, 5);
            let zeta = solve_global(&inst).unwrap();
            for m in [1, 2, 3, 6] {
                let chunks = partition_customers(&inst, m).unwrap();
                match chunk_targets(&inst, &chunks, zeta.zeta()) {
                    Ok(targets) => {
                        redistributions += targets.redistribution_iterations;
                        assert_target_identities(&inst, &targets, zeta.zeta());
                        for xi in &targets.xi {
                            for &x in xi {
                                assert!(x.abs() <= 0.5 + 1e-9);
                            }
                        }
                    }
                    Err(DspError::TargetBoundsInfeasible { .. }) => {}
                    Err(e) => panic!("unexpected error: {e}"),
                }
            }
        }
        let _ = redistributions;
    }

    #[test]
    fn zero_weighted_chunk_row_is_reported() {
        let scheme = DiscountScheme::new(0.5, 5).unwrap();
        let inst = Instance::new(
            vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![2.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            scheme,
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        // Customer 0 alone forms a chunk that consumes nothing at t=1.
        let chunks = vec![vec![1], vec![0]];
        assert!(matches!(
            chunk_targets(&inst, &chunks, &[0.0, 0.0]),
            Err(DspError::ZeroChunkMutableConsumption { chunk: 1, timestep: 1 })
        ));
    }

    #[test]
    fn qubo_energy_matches_direct_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(m, nt, nk) in &[(1usize, 3usize, 5usize), (2, 2, 3), (3, 4, 8), (2, 3, 2)] {
            let inst = random_instance(&mut rng, m, nt, nk);
            let chunks = partition_customers(&inst, m).unwrap();
            let xi: Vec<f64> = (0..nt).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let chunk_qubo = build_chunk_qubo(&inst, &chunks[0], &xi);
            let q = chunk_qubo.encoding().n_bits();
            assert_eq!(chunk_qubo.qubo().n_vars(), m * nt * q);
            for _ in 0..40 {
                let bits: Vec<u8> =
                    (0..chunk_qubo.qubo().n_vars()).map(|_| rng.gen_range(0..2u8)).collect();
                let energy = chunk_qubo.qubo().energy(&bits).unwrap();
                let rows = chunk_qubo.decode(&bits).unwrap();
                let values: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|row| {
                        row.iter().map(|&i| inst.scheme().value(i as usize)).collect()
                    })
                    .collect();
                let direct = chunk_objective(&inst, &chunks[0], &xi, &values);
                let tol = 1e-9 * (1.0 + direct.abs());
                assert!(
                    (energy - direct).abs() <= tol,
                    "energy {energy} vs direct {direct}"
                );
            }
        }
    }

    #[test]
    fn tracking_only_qubo_recovers_exact_target() {
        // With zero penalties and a target realizable on the grid, the
        // exhaustive optimum attains objective zero.
        let inst = instance_with(
            vec![vec![1.0, 1.0]],
            vec![2.0, 1.0],
            vec![1.0, 1.0],
            DiscountScheme::new(0.5, 2).unwrap(),
            PenaltyWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
        );
        let xi = [0.5, -0.5];
        let chunk_qubo = build_chunk_qubo(&inst, &[0], &xi);
        assert_eq!(chunk_qubo.qubo().n_vars(), 2);
        // Objective = 2 * sum_t (xi_t - z_t)^2 over z_t in {-0.5, 0.5}.
        let expectations = [((0u8, 0u8), 2.0), ((1, 0), 0.0), ((0, 1), 4.0), ((1, 1), 2.0)];
        for ((b0, b1), want) in expectations {
            let energy = chunk_qubo.qubo().energy(&[b0, b1]).unwrap();
            assert_relative_eq!(energy, want, epsilon = 1e-12);
        }
        let solver = ExhaustiveSolver::default();
        let best = solver.solve(chunk_qubo.qubo(), &SolverBudget::sweeps(1, 1, 0)).unwrap();
        assert_eq!(best.bits, vec![1, 0]);
        assert!(best.energy.abs() <= 1e-12);
    }

    #[test]
    fn sequential_update_folds_and_clips_residuals() {
        let base = [0.1, -0.1];
        let mutable = [2.0, 2.0];
        assert_eq!(sequential_update(&base, &[0.0, 0.0], &mutable, 0.5), vec![0.1, -0.1]);
        assert_eq!(sequential_update(&base, &[0.5, 0.0], &mutable, 0.5), vec![0.35, -0.1]);
        // An oversized residual is clipped at the bound.
        assert_eq!(sequential_update(&base, &[2.0, 0.0], &mutable, 0.5), vec![0.5, -0.1]);
    }

    #[test]
    fn carried_residuals_telescope_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let inst = random_instance(&mut rng, 4, 3, 3);
        let zeta = solve_global(&inst).unwrap();
        let chunks = partition_customers(&inst, 2).unwrap();
        let targets = chunk_targets(&inst, &chunks, zeta.zeta()).unwrap();
        let solver = ExhaustiveSolver::default();
        let budget = SolverBudget::sweeps(1, 1, 3);
        let mut carry = vec![0.0; 3];
        let mut achieved_total = vec![0.0; 3];
        for (j, chunk) in chunks.iter().enumerate() {
            let asked =
                sequential_update(&targets.xi[j], &carry, &targets.chunk_mutable[j], 0.5);
            let chunk_qubo = build_chunk_qubo(&inst, chunk, &asked);
            let solved = solver.solve(chunk_qubo.qubo(), &budget).unwrap();
            let rows = chunk_qubo.decode(&solved.bits).unwrap();
            let achieved = achieved_contribution(&inst, chunk, &rows);
            for t in 0..3 {
                carry[t] += targets.chunk_mutable[j][t] * targets.xi[j][t] - achieved[t];
                achieved_total[t] += achieved[t];
            }
        }
        // Sum of achieved contributions plus the final residual equals
        // the combined target exactly.
        for t in 0..3 {
            let combined: f64 = targets
                .chunk_mutable
                .iter()
                .zip(&targets.xi)
                .map(|(row, xi)| row[t] * xi[t])
                .sum();
            assert!(
                (achieved_total[t] + carry[t] - combined).abs()
                    <= 1e-9 * (1.0 + combined.abs()),
                "telescoping broken at {t}"
            );
        }
    }

    #[test]
    fn pipeline_produces_feasible_in_band_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let inst = random_instance(&mut rng, 4, 3, 3);
        let solver = ExhaustiveSolver::default();
        let budget = SolverBudget::sweeps(1, 1, 9);
        let run = run_decomposition(&inst, 2, &solver, &budget, &PostProcessConfig::default())
            .unwrap();
        assert_eq!(run.report.chunks.len(), 2);
        assert_eq!(run.report.solver, "exhaustive");
        assert!(run.report.chunks.iter().all(|c| c.energy.is_finite()));
        assert!(crate::postprocess::verify_power_feasibility(
            &inst,
            &run.matrix,
            &run.report.zeta_star
        ));
        // The relaxation is a lower bound for the discrete assignment.
        assert!(
            inst.emissions(&run.matrix)
                >= run.report.relaxation_emissions - 1e-9 * inst.baseline_emissions()
        );
        // The power restriction holds with room to spare.
        let feas = inst.check_constraints_default(&run.matrix);
        assert!(feas.power_violations.is_empty());

        let again = run_decomposition(&inst, 2, &solver, &budget, &PostProcessConfig::default())
            .unwrap();
        assert_eq!(run.matrix, again.matrix);
    }

    #[test]
    fn single_chunk_pipeline_matches_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let inst = random_instance(&mut rng, 2, 2, 3);
        let zeta = solve_global(&inst).unwrap();
        let chunks = partition_customers(&inst, 2).unwrap();
        let targets = chunk_targets(&inst, &chunks, zeta.zeta()).unwrap();
        let chunk_qubo = build_chunk_qubo(&inst, &chunks[0], &targets.xi[0]);
        let solver = ExhaustiveSolver::default();
        let solved =
            solver.solve(chunk_qubo.qubo(), &SolverBudget::sweeps(1, 1, 0)).unwrap();

        // Independent enumeration of all 3^4 assignments.
        let mut best = f64::INFINITY;
        let scheme = inst.scheme();
        for a in 0..3u16 {
            for b in 0..3u16 {
                for c in 0..3u16 {
                    for d in 0..3u16 {
                        let local_rows: Vec<Vec<f64>> = chunks[0]
                            .iter()
                            .map(|&cust| {
                                let row = if cust == 0 { [a, b] } else { [c, d] };
                                row.iter().map(|&i| scheme.value(i as usize)).collect()
                            })
                            .collect();
                        let obj =
                            chunk_objective(&inst, &chunks[0], &targets.xi[0], &local_rows);
                        best = best.min(obj);
                    }
                }
            }
        }
        assert_relative_eq!(solved.energy, best, max_relative = 1e-9, epsilon = 1e-12);
    }

    #[test]
    fn study_single_customer_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let inst = random_instance(&mut rng, 3, 3, 5);
        let grid = vec![-0.5, -0.3, 0.2, 0.5];
        let config = StudyConfig::new(vec![1], grid.clone(), vec![0, 2]);
        let solver = ExhaustiveSolver::default();
        let rows = approximation_error_study(&inst, &config, &solver).unwrap();
        assert_eq!(rows.len(), grid.len() * 2);
        for row in &rows {
            // One customer: the best constant category is the grid value
            // closest to the target.
            let want = inst
                .scheme()
                .values()
                .map(|v| (v - row.zeta).abs())
                .fold(f64::INFINITY, f64::min)
                / row.zeta.abs();
            assert_relative_eq!(row.relative_error, want, epsilon = 1e-12);
        }
        // The extremes are exactly representable.
        for row in rows.iter().filter(|r| r.zeta.abs() == 0.5) {
            assert!(row.relative_error <= 1e-12);
        }
    }

    #[test]
    fn study_subsolver_path_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let inst = random_instance(&mut rng, 4, 2, 5);
        let grid = vec![-0.4, 0.1, 0.35];
        let exact = {
            let config = StudyConfig::new(vec![4], grid.clone(), vec![1]);
            approximation_error_study(&inst, &config, &ExhaustiveSolver::default()).unwrap()
        };
        let fallback = {
            let mut config = StudyConfig::new(vec![4], grid.clone(), vec![1]);
            config.exact_limit = 0;
            approximation_error_study(&inst, &config, &ExhaustiveSolver::default()).unwrap()
        };
        for (a, b) in exact.iter().zip(&fallback) {
            assert_relative_eq!(a.relative_error, b.relative_error, epsilon = 1e-12);
        }
    }

    #[test]
    fn study_rejects_zero_targets_and_bad_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let inst = random_instance(&mut rng, 2, 2, 5);
        let solver = ExhaustiveSolver::default();
        let zero = StudyConfig::new(vec![1], vec![0.0], vec![0]);
        assert!(matches!(
            approximation_error_study(&inst, &zero, &solver),
            Err(DspError::InvalidConfig(_))
        ));
        let out_of_range = StudyConfig::new(vec![1], vec![0.1], vec![5]);
        assert!(matches!(
            approximation_error_study(&inst, &out_of_range, &solver),
            Err(DspError::InvalidConfig(_))
        ));
        let too_big = StudyConfig::new(vec![3], vec![0.1], vec![0]);
        assert!(matches!(
            approximation_error_study(&inst, &too_big, &solver),
            Err(DspError::InvalidConfig(_))
        ));
    }

    #[test]
    fn failing_subsolver_aborts_with_partial_report() {
        struct Failing;
        impl SubSolver for Failing {
            fn name(&self) -> &'static str {
                "failing"
            }
            fn solve(&self, _: &Qubo, _: &SolverBudget) -> Result<crate::qubo::Solution> {
                Err(DspError::InvalidBudget("synthetic failure".into()))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let inst = random_instance(&mut rng, 4, 3, 3);
        let err = run_decomposition(
            &inst,
            2,
            &Failing,
            &SolverBudget::sweeps(1, 1, 0),
            &PostProcessConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err.source, DspError::SubSolverFailure { chunk: 0, .. }));
        // The relaxation had already been recorded when the abort hit.
        assert_eq!(err.partial.zeta_star.len(), 3);
        assert!(err.partial.chunks.is_empty());
    }
}
