//! Sparse QUBO representation and interchangeable sub-solvers.
//!
//! Energy of a bit assignment x is
//! `offset + sum_i linear[i] x_i + sum_{i<j} quadratic[(i,j)] x_i x_j`.
//! The quadratic map is strictly upper triangular; diagonal contributions
//! fold into the linear part because binary variables are idempotent.
//!
//! Three solvers sit behind one contract: exhaustive enumeration (exact,
//! capped), simulated annealing (seeded, restartable) and uniform random
//! sampling (baseline). All are deterministic given their budget's seed.
//! Ties on energy are broken toward the bit vector whose little-endian
//! integer value is smallest, so results never depend on visit order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DspError, Result};

/// Sparse quadratic binary objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Qubo {
    n_vars: usize,
    linear: Vec<f64>,
    quadratic: Vec<((u32, u32), f64)>,
    offset: f64,
    adjacency: Vec<Vec<(u32, f64)>>,
}

impl Qubo {
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    /// Stored couplers, strictly upper triangular, sorted, no explicit
    /// zeros.
    pub fn quadratic(&self) -> &[((u32, u32), f64)] {
        &self.quadratic
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn energy(&self, bits: &[u8]) -> Result<f64> {
        if bits.len() != self.n_vars {
            return Err(DspError::LengthMismatch { expected: self.n_vars, got: bits.len() });
        }
        Ok(self.energy_raw(bits))
    }

    fn energy_raw(&self, bits: &[u8]) -> f64 {
        let mut e = self.offset;
        for (i, &l) in self.linear.iter().enumerate() {
            if bits[i] == 1 {
                e += l;
            }
        }
        for &((i, j), q) in &self.quadratic {
            if bits[i as usize] == 1 && bits[j as usize] == 1 {
                e += q;
            }
        }
        e
    }

    /// Change in energy if variable `i` were flipped.
    #[inline]
    fn flip_delta(&self, bits: &[u8], i: usize) -> f64 {
        let mut field = self.linear[i];
        for &(j, q) in &self.adjacency[i] {
            if bits[j as usize] == 1 {
                field += q;
            }
        }
        if bits[i] == 1 {
            -field
        } else {
            field
        }
    }

    /// Number of distinct coupling partners per variable.
    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    /// Mean absolute coefficient over stored linear and quadratic entries,
    /// used to scale annealing temperatures.
    pub fn coefficient_scale(&self) -> f64 {
        let total: f64 = self.linear.iter().map(|v| v.abs()).sum::<f64>()
            + self.quadratic.iter().map(|(_, v)| v.abs()).sum::<f64>();
        let count = self.n_vars + self.quadratic.len();
        if count == 0 || total == 0.0 {
            1.0
        } else {
            total / count as f64
        }
    }

    /// Serializes to the text interchange format: a header comment with
    /// size and offset, then one `i j coeff` line per term (i = j marks a
    /// linear term).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# qubo n_vars={} offset={}", self.n_vars, self.offset);
        for (i, &l) in self.linear.iter().enumerate() {
            if l != 0.0 {
                let _ = writeln!(out, "{i} {i} {l}");
            }
        }
        for &((i, j), q) in &self.quadratic {
            let _ = writeln!(out, "{i} {j} {q}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_vars = None;
        let mut offset = 0.0;
        let mut builder: Option<QuboBuilder> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("n_vars=") {
                        n_vars = Some(v.parse::<usize>().map_err(|e| {
                            DspError::Parse(format!("line {}: bad n_vars: {e}", lineno + 1))
                        })?);
                    } else if let Some(v) = field.strip_prefix("offset=") {
                        offset = v.parse::<f64>().map_err(|e| {
                            DspError::Parse(format!("line {}: bad offset: {e}", lineno + 1))
                        })?;
                    }
                }
                continue;
            }
            let n = n_vars.ok_or_else(|| {
                DspError::Parse("missing '# qubo n_vars=...' header before terms".into())
            })?;
            let b = builder.get_or_insert_with(|| QuboBuilder::new(n));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(DspError::Parse(format!(
                    "line {}: expected 'i j coeff', got {:?}",
                    lineno + 1,
                    line
                )));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let j: usize = fields[1]
                .parse()
                .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let coeff: f64 = fields[2]
                .parse()
                .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
            if i >= n || j >= n {
                return Err(DspError::Parse(format!(
                    "line {}: index out of range for {n} variables",
                    lineno + 1
                )));
            }
            if i == j {
                b.add_linear(i, coeff);
            } else {
                b.add_quadratic(i, j, coeff);
            }
        }
        let n = n_vars
            .ok_or_else(|| DspError::Parse("missing '# qubo n_vars=...' header".into()))?;
        let mut b = builder.unwrap_or_else(|| QuboBuilder::new(n));
        b.add_constant(offset);
        Ok(b.finish())
    }
}

/// Accumulates linear, quadratic and constant contributions, folding
/// diagonal terms into the linear part.
#[derive(Debug, Clone)]
pub struct QuboBuilder {
    n_vars: usize,
    linear: Vec<f64>,
    quadratic: HashMap<(u32, u32), f64>,
    offset: f64,
}

impl QuboBuilder {
    pub fn new(n_vars: usize) -> Self {
        Self { n_vars, linear: vec![0.0; n_vars], quadratic: HashMap::new(), offset: 0.0 }
    }

    pub fn add_constant(&mut self, c: f64) {
        self.offset += c;
    }

    pub fn add_linear(&mut self, i: usize, coeff: f64) {
        self.linear[i] += coeff;
    }

    pub fn add_quadratic(&mut self, i: usize, j: usize, coeff: f64) {
        assert!(i < self.n_vars && j < self.n_vars, "variable index out of range");
        if i == j {
            // x^2 = x for binaries.
            self.linear[i] += coeff;
            return;
        }
        let key = if i < j { (i as u32, j as u32) } else { (j as u32, i as u32) };
        *self.quadratic.entry(key).or_insert(0.0) += coeff;
    }

    /// Adds `weight * (constant + sum_k coeff_k x_k)^2`.
    pub fn add_squared_linear(&mut self, weight: f64, terms: &[(usize, f64)], constant: f64) {
        if weight == 0.0 {
            return;
        }
        self.offset += weight * constant * constant;
        for &(i, ci) in terms {
            self.add_linear(i, weight * (ci * ci + 2.0 * constant * ci));
        }
        for (a, &(i, ci)) in terms.iter().enumerate() {
            for &(j, cj) in &terms[a + 1..] {
                self.add_quadratic(i, j, 2.0 * weight * ci * cj);
            }
        }
    }

    pub fn finish(self) -> Qubo {
        let mut quadratic: Vec<((u32, u32), f64)> =
            self.quadratic.into_iter().filter(|&(_, v)| v != 0.0).collect();
        quadratic.sort_unstable_by_key(|&(k, _)| k);
        let mut adjacency = vec![Vec::new(); self.n_vars];
        for &((i, j), q) in &quadratic {
            adjacency[i as usize].push((j, q));
            adjacency[j as usize].push((i, q));
        }
        Qubo {
            n_vars: self.n_vars,
            linear: self.linear,
            quadratic,
            offset: self.offset,
            adjacency,
        }
    }
}

/// Compute budget for a sub-solver run. At least one of `time_limit_secs`
/// and `sweep_count` must be set; an explicit sweep count wins and makes
/// the run fully reproducible across machines.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverBudget {
    pub time_limit_secs: Option<f64>,
    pub sweep_count: Option<u64>,
    pub restarts: u32,
    pub seed: u64,
}

impl SolverBudget {
    pub fn sweeps(sweep_count: u64, restarts: u32, seed: u64) -> Self {
        Self { time_limit_secs: None, sweep_count: Some(sweep_count), restarts, seed }
    }

    pub fn timed(time_limit_secs: f64, restarts: u32, seed: u64) -> Self {
        Self { time_limit_secs: Some(time_limit_secs), sweep_count: None, restarts, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(DspError::InvalidBudget("restarts must be at least 1".into()));
        }
        match (self.time_limit_secs, self.sweep_count) {
            (None, None) => Err(DspError::InvalidBudget(
                "either a time limit or a sweep count is required".into(),
            )),
            (Some(t), _) if !t.is_finite() || t <= 0.0 => {
                Err(DspError::InvalidBudget(format!("time limit must be positive, got {t}")))
            }
            (_, Some(0)) => {
                Err(DspError::InvalidBudget("sweep count must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Splits a budget evenly over `parts` sequential solves; leftover
    /// sweeps go to the last part.
    pub fn split(&self, parts: usize) -> Vec<SolverBudget> {
        assert!(parts > 0);
        (0..parts)
            .map(|p| SolverBudget {
                time_limit_secs: self.time_limit_secs.map(|t| t / parts as f64),
                sweep_count: self.sweep_count.map(|s| {
                    let each = (s / parts as u64).max(1);
                    if p + 1 == parts {
                        (each + s % parts as u64).max(1)
                    } else {
                        each
                    }
                }),
                restarts: self.restarts,
                // Decorrelate sequential parts while keeping determinism.
                seed: self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(p as u64)),
            })
            .collect()
    }
}

/// A solver's best assignment and its energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub bits: Vec<u8>,
    pub energy: f64,
}

/// Common contract for the interchangeable sub-solvers.
pub trait SubSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, qubo: &Qubo, budget: &SolverBudget) -> Result<Solution>;
}

/// True if `a` precedes `b` in the canonical tie-break order: the bit
/// vector with the smaller little-endian integer value wins.
pub fn canonical_order(a: &[u8], b: &[u8]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    for k in (0..a.len()).rev() {
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

fn keep_better(best: &mut Option<Solution>, candidate: Solution) {
    match best {
        None => *best = Some(candidate),
        Some(b) => {
            if candidate.energy < b.energy
                || (candidate.energy == b.energy && canonical_order(&candidate.bits, &b.bits))
            {
                *best = Some(candidate);
            }
        }
    }
}

/// Exact solver: enumerates all assignments in Gray-code order with O(1)
/// state changes per step. Refuses problems above `max_vars`.
#[derive(Debug, Clone)]
pub struct ExhaustiveSolver {
    pub max_vars: usize,
}

impl Default for ExhaustiveSolver {
    fn default() -> Self {
        Self { max_vars: 24 }
    }
}

impl ExhaustiveSolver {
    fn run(&self, qubo: &Qubo) -> Result<Solution> {
        let n = qubo.n_vars();
        if n > self.max_vars {
            return Err(DspError::TooLarge { n_vars: n, max_vars: self.max_vars });
        }
        let mut bits = vec![0u8; n];
        let mut energy = qubo.energy_raw(&bits);
        let mut best = Solution { bits: bits.clone(), energy };
        if n == 0 {
            return Ok(best);
        }
        // Accumulated deltas drift by a few ulps over long walks; re-score
        // near-best states exactly so optima and ties are judged on true
        // energies.
        let margin = 1e-9 * (1.0 + qubo.coefficient_scale());
        for step in 1u64..(1u64 << n) {
            let flip = step.trailing_zeros() as usize;
            energy += qubo.flip_delta(&bits, flip);
            bits[flip] ^= 1;
            if energy <= best.energy + margin {
                let exact = qubo.energy_raw(&bits);
                keep_better_in_place(&mut best, &bits, exact);
            }
        }
        Ok(best)
    }
}

impl SubSolver for ExhaustiveSolver {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    fn solve(&self, qubo: &Qubo, budget: &SolverBudget) -> Result<Solution> {
        budget.validate()?;
        self.run(qubo)
    }
}

/// Geometric inverse-temperature ladder for annealing, scaled by the
/// problem's mean absolute coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaSchedule {
    pub beta_start_scale: f64,
    pub beta_end_scale: f64,
}

impl Default for SaSchedule {
    fn default() -> Self {
        Self { beta_start_scale: 0.1, beta_end_scale: 50.0 }
    }
}

/// Simulated annealing: single-flip Metropolis sweeps in fixed variable
/// order under a geometric temperature ladder. Each restart draws an
/// independent, seeded random stream; restarts are merged on best energy
/// with the canonical tie-break, so the merge is order-independent.
#[derive(Debug, Clone, Default)]
pub struct SaSolver {
    pub schedule: SaSchedule,
}

impl SaSolver {
    fn betas(&self, qubo: &Qubo) -> (f64, f64) {
        let scale = qubo.coefficient_scale();
        (self.schedule.beta_start_scale / scale, self.schedule.beta_end_scale / scale)
    }

    fn single_run(&self, qubo: &Qubo, sweeps: u64, rng: &mut ChaCha8Rng) -> Solution {
        let n = qubo.n_vars();
        let mut bits: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
        let mut energy = qubo.energy_raw(&bits);
        let mut best = Solution { bits: bits.clone(), energy };
        if n == 0 || sweeps == 0 {
            return best;
        }
        let (b0, b1) = self.betas(qubo);
        let ratio = b1 / b0;
        let margin = 1e-9 * (1.0 + qubo.coefficient_scale());
        for s in 0..sweeps {
            let frac = if sweeps == 1 { 1.0 } else { s as f64 / (sweeps - 1) as f64 };
            let beta = b0 * ratio.powf(frac);
            for i in 0..n {
                let delta = qubo.flip_delta(&bits, i);
                let accept = delta <= 0.0 || rng.gen::<f64>() < (-beta * delta).exp();
                if accept {
                    bits[i] ^= 1;
                    energy += delta;
                    if energy <= best.energy + margin {
                        let exact = qubo.energy_raw(&bits);
                        keep_better_in_place(&mut best, &bits, exact);
                    }
                }
            }
        }
        best
    }
}

fn keep_better_in_place(best: &mut Solution, bits: &[u8], energy: f64) {
    if energy < best.energy
        || (energy == best.energy && canonical_order(bits, &best.bits))
    {
        best.bits.clear();
        best.bits.extend_from_slice(bits);
        best.energy = energy;
    }
}

impl SubSolver for SaSolver {
    fn name(&self) -> &'static str {
        "sa"
    }

    fn solve(&self, qubo: &Qubo, budget: &SolverBudget) -> Result<Solution> {
        budget.validate()?;
        let sweeps = resolve_sweeps(qubo, budget, |q, sweeps, rng| {
            self.single_run(q, sweeps, rng);
        });
        let mut best: Option<Solution> = None;
        for r in 0..budget.restarts {
            let mut rng = restart_rng(budget.seed, r);
            let sol = self.single_run(qubo, sweeps, &mut rng);
            keep_better(&mut best, sol);
        }
        Ok(best.expect("at least one restart"))
    }
}

/// Baseline: uniform random assignments, best of the sampled set.
#[derive(Debug, Clone, Default)]
pub struct RandomSolver;

impl SubSolver for RandomSolver {
    fn name(&self) -> &'static str {
        "random"
    }

    fn solve(&self, qubo: &Qubo, budget: &SolverBudget) -> Result<Solution> {
        budget.validate()?;
        let n = qubo.n_vars();
        let samples_per_restart = resolve_sweeps(qubo, budget, |q, count, rng| {
            for _ in 0..count {
                let bits: Vec<u8> = (0..q.n_vars()).map(|_| rng.gen_range(0..=1u8)).collect();
                let _ = q.energy_raw(&bits);
            }
        });
        let mut best: Option<Solution> = None;
        for r in 0..budget.restarts {
            let mut rng = restart_rng(budget.seed, r);
            let mut bits = vec![0u8; n];
            for _ in 0..samples_per_restart {
                for b in bits.iter_mut() {
                    *b = rng.gen_range(0..=1u8);
                }
                let energy = qubo.energy_raw(&bits);
                let improves = match &best {
                    None => true,
                    Some(b) => {
                        energy < b.energy
                            || (energy == b.energy && canonical_order(&bits, &b.bits))
                    }
                };
                if improves {
                    best = Some(Solution { bits: bits.clone(), energy });
                }
            }
        }
        Ok(best.expect("at least one sample"))
    }
}

/// Per-restart random stream: one seed, one ChaCha stream per restart, so
/// restart results are independent of execution order.
fn restart_rng(seed: u64, restart: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Resolves a budget to a per-restart unit count. Explicit counts pass
/// through; time limits are converted by measuring throughput with a
/// short calibration run, then quantizing to a power of two so repeated
/// runs on the same machine almost always agree.
fn resolve_sweeps<F>(qubo: &Qubo, budget: &SolverBudget, mut calibrate_unit: F) -> u64
where
    F: FnMut(&Qubo, u64, &mut ChaCha8Rng),
{
    if let Some(s) = budget.sweep_count {
        return s.max(1);
    }
    let time_limit = budget.time_limit_secs.expect("validated budget");
    // Calibration stream is disjoint from every restart stream.
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    rng.set_stream(u64::MAX);
    let mut batch = 4u64;
    let mut elapsed;
    loop {
        let start = Instant::now();
        calibrate_unit(qubo, batch, &mut rng);
        elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 0.01 || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let per_unit = (elapsed / batch as f64).max(1e-9);
    let target = (time_limit / budget.restarts as f64 / per_unit).max(1.0);
    // Round to the nearest power of two in log space.
    let exp = target.log2().round().max(0.0) as u32;
    1u64 << exp.min(40)
}

/// Upper bound on coupling partners per variable in a chunk problem with
/// `q` bits per discount, `n_timesteps` steps and `m` customers: full
/// same-customer coupling across timesteps, same-timestep coupling across
/// the chunk, and the remaining bits of the variable's own discount.
pub fn coupling_count_per_variable(q: usize, n_timesteps: usize, m: usize) -> usize {
    q * (n_timesteps - 1) + q * (m - 1) + q - 1
}
