//! Benchmark sweeps: a grid of (customer count, chunk size, solver, seed)
//! cells, one CSV row per run.
//!
//! The output file is rewritten atomically (temp file plus rename) after
//! every completed cell, with rows sorted by key, so an interrupted sweep
//! leaves a valid file and a rerun skips the finished cells. Failures
//! become rows with a status other than "ok" and the sweep moves on.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use clap::Args;
use dsp_core::datagen::{generate_instance, GeneratorConfig};
use dsp_core::error::DspError;
use dsp_core::io::{metrics_csv_header_for, metrics_csv_row};
use dsp_core::metrics::DEFAULT_QUANTILES;
use dsp_core::model::Instance;
use dsp_core::postprocess::PostProcessConfig;
use dsp_core::qubo::SolverBudget;

use crate::run::{self, SolverKind};
use crate::CliError;

const SCHEMA_LINE: &str = "# dsp benchmark schema v1";

#[derive(Args)]
pub struct BenchArgs {
    /// Customer counts to sweep, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    customers: Vec<usize>,
    /// Chunk sizes for the decomposition solvers (whole-problem solvers
    /// record chunk size 0).
    #[arg(long, value_delimiter = ',', default_values_t = [20])]
    chunk_sizes: Vec<usize>,
    /// Solvers to sweep.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [SolverKind::DecompSa, SolverKind::SaMonolithic])]
    solvers: Vec<SolverKind>,
    /// Solver seeds; each cell runs once per seed.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 76)]
    timesteps: usize,
    /// Seed for the generated instances (one instance per customer count).
    #[arg(long, default_value_t = 7)]
    instance_seed: u64,
    /// Fixed sweep count; overrides the time budget and makes the sweep
    /// machine-independent.
    #[arg(long)]
    sweeps: Option<u64>,
    /// Time budget per cell: this times the customer count, in seconds.
    #[arg(long, default_value_t = 0.1)]
    budget_secs_per_customer: f64,
    #[arg(long, default_value_t = 4)]
    restarts: u32,
    /// Concurrent cells; rows still go through a single writer.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

/// Sort/dedup key: customer count, chunk size, solver, seed.
type Key = (usize, usize, &'static str, u64);

struct Cell {
    n_customers: usize,
    chunk_size: usize,
    solver: SolverKind,
    seed: u64,
}

impl Cell {
    fn key(&self) -> Key {
        (self.n_customers, self.chunk_size, self.solver.name(), self.seed)
    }
}

pub fn cmd_benchmark(a: BenchArgs) -> Result<(), CliError> {
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    if a.customers.is_empty()
        || a.chunk_sizes.is_empty()
        || a.solvers.is_empty()
        || a.seeds.is_empty()
    {
        return Err(CliError::Usage("benchmark grid is empty".into()));
    }
    if a.chunk_sizes.iter().any(|&m| m == 0) {
        return Err(CliError::Usage("chunk sizes must be at least 1".into()));
    }

    let header = format!(
        "n_customers,chunk_size,solver,seed,status,wall_seconds,{}",
        metrics_csv_header_for(&DEFAULT_QUANTILES)
    );
    let metric_cols = metrics_csv_header_for(&DEFAULT_QUANTILES).split(',').count();
    let mut rows = read_existing(&a.output, &header)?;

    // Whole-problem solvers ignore the chunk axis; collapsing it to 0 keeps
    // one row per actual run.
    let mut seen: HashSet<Key> = rows.keys().cloned().collect();
    let mut cells = Vec::new();
    let mut skipped = 0usize;
    for &nc in &a.customers {
        for &solver in &a.solvers {
            let chunk_axis: &[usize] =
                if solver.uses_chunks() { &a.chunk_sizes } else { &[0] };
            for &chunk_size in chunk_axis {
                for &seed in &a.seeds {
                    let cell = Cell { n_customers: nc, chunk_size, solver, seed };
                    if seen.insert(cell.key()) {
                        cells.push(cell);
                    } else {
                        skipped += 1;
                    }
                }
            }
        }
    }
    let total = cells.len();
    if total == 0 {
        println!(
            "nothing to do: all {skipped} cells already present in {}",
            a.output.display()
        );
        return Ok(());
    }

    let mut instances: HashMap<usize, Instance> = HashMap::new();
    for &nc in &a.customers {
        if instances.contains_key(&nc) {
            continue;
        }
        let mut config = GeneratorConfig::new(nc, a.instance_seed);
        config.n_timesteps = a.timesteps;
        let instance = generate_instance(&config).map_err(|e| {
            CliError::Usage(format!("generating the {nc}-customer instance failed: {e}"))
        })?;
        instances.insert(nc, instance);
    }

    println!("{total} cells to run ({skipped} already present), {} worker(s)", a.jobs);
    let queue = Mutex::new(cells);
    let (tx, rx) = mpsc::channel::<(Key, String, bool)>();
    let mut ok = 0usize;
    let mut failed = 0usize;
    std::thread::scope(|scope| -> Result<(), CliError> {
        for _ in 0..a.jobs {
            let tx = tx.clone();
            let queue = &queue;
            let instances = &instances;
            let args = &a;
            scope.spawn(move || loop {
                let cell = match queue.lock().unwrap().pop() {
                    Some(c) => c,
                    None => break,
                };
                let msg = run_cell(&cell, &instances[&cell.n_customers], args, metric_cols);
                if tx.send(msg).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: fold in each finished row and republish the file.
        let mut done = 0usize;
        for (key, line, succeeded) in rx {
            done += 1;
            if succeeded {
                ok += 1;
            } else {
                failed += 1;
            }
            println!(
                "[{done}/{total}] nc={} m={} solver={} seed={} {}",
                key.0,
                key.1,
                key.2,
                key.3,
                if succeeded { "ok" } else { "failed" }
            );
            rows.insert(key, line);
            write_atomic(&a.output, &header, &rows)?;
        }
        Ok(())
    })?;

    println!(
        "benchmark finished: {ok} ok, {failed} failed, {skipped} skipped; {} rows in {}",
        rows.len(),
        a.output.display()
    );
    Ok(())
}

fn run_cell(
    cell: &Cell,
    instance: &Instance,
    args: &BenchArgs,
    metric_cols: usize,
) -> (Key, String, bool) {
    let budget = match args.sweeps {
        Some(s) => SolverBudget::sweeps(s, args.restarts, cell.seed),
        None => SolverBudget::timed(
            args.budget_secs_per_customer * cell.n_customers as f64,
            args.restarts,
            cell.seed,
        ),
    };
    let pp = PostProcessConfig::default();
    let started = Instant::now();
    let outcome = run::execute(instance, cell.solver, cell.chunk_size, &budget, &pp);
    let key = cell.key();
    let prefix = format!("{},{},{},{}", key.0, key.1, key.2, key.3);
    match outcome {
        Ok(exec) => {
            let line = format!(
                "{prefix},ok,{:.3},{}",
                exec.wall_seconds,
                metrics_csv_row(&exec.metrics)
            );
            (key, line, true)
        }
        Err(e) => {
            let wall = started.elapsed().as_secs_f64();
            let mut line =
                format!("{prefix},error: {},{wall:.3}", sanitize(&e.to_string()));
            for _ in 0..metric_cols {
                line.push(',');
            }
            (key, line, false)
        }
    }
}

/// Keeps arbitrary error text inside a single CSV field.
fn sanitize(message: &str) -> String {
    message.replace(['\n', '\r', ','], ";")
}

/// Loads rows from a previous sweep so their cells are skipped. The schema
/// comment and header must match exactly; anything else is treated as a
/// foreign file rather than silently merged.
fn read_existing(path: &Path, header: &str) -> Result<BTreeMap<Key, String>, CliError> {
    let mut rows = BTreeMap::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(rows),
        Err(e) => return Err(DspError::from(e).into()),
    };
    let mut lines = text.lines();
    if lines.next() != Some(SCHEMA_LINE) {
        return Err(CliError::Usage(format!(
            "{} exists but is not a benchmark file (missing \"{SCHEMA_LINE}\")",
            path.display()
        )));
    }
    if lines.next() != Some(header) {
        return Err(CliError::Usage(format!(
            "{} has a different column layout; move it aside first",
            path.display()
        )));
    }
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let key = parse_key(line).ok_or_else(|| {
            CliError::Usage(format!("{} has a malformed row: {line}", path.display()))
        })?;
        rows.insert(key, line.to_string());
    }
    Ok(rows)
}

fn parse_key(line: &str) -> Option<Key> {
    let mut cols = line.split(',');
    let nc = cols.next()?.parse().ok()?;
    let chunk = cols.next()?.parse().ok()?;
    let solver = SolverKind::from_name(cols.next()?)?;
    let seed = cols.next()?.parse().ok()?;
    Some((nc, chunk, solver.name(), seed))
}

fn write_atomic(
    path: &Path,
    header: &str,
    rows: &BTreeMap<Key, String>,
) -> Result<(), CliError> {
    let mut text = String::with_capacity(64 * (rows.len() + 2));
    writeln!(text, "{SCHEMA_LINE}").unwrap();
    writeln!(text, "{header}").unwrap();
    for line in rows.values() {
        writeln!(text, "{line}").unwrap();
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, text).map_err(DspError::from)?;
    fs::rename(&tmp, path).map_err(DspError::from)?;
    Ok(())
}
