//! On-disk formats.
//!
//! Instances travel as JSON documents that re-validate on load, so a
//! hand-edited file cannot smuggle in a broken grid or negative load.
//! Discount matrices, effective profiles, and change logs travel as
//! small CSV tables. Floats print in shortest round-trip form, which
//! keeps matrix files exact: what is written is what is read, category
//! for category.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::metrics::MetricsReport;
use crate::model::{DiscountMatrix, DiscountScheme, Instance, PenaltyWeights};
use crate::postprocess::ChangeRecord;

#[derive(Serialize, Deserialize)]
struct SchemeDoc {
    z_max: f64,
    n_categories: usize,
}

#[derive(Serialize, Deserialize)]
struct PenaltiesDoc {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
}

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    n_customers: usize,
    n_timesteps: usize,
    consumption: Vec<Vec<f64>>,
    intensity: Vec<f64>,
    elasticity: Vec<f64>,
    power_bound: Vec<f64>,
    scheme: SchemeDoc,
    penalties: PenaltiesDoc,
    flat_tariff: f64,
}

pub fn instance_to_json(instance: &Instance) -> Result<String> {
    let scheme = instance.scheme();
    let p = instance.penalties();
    let doc = InstanceDoc {
        n_customers: instance.n_customers(),
        n_timesteps: instance.n_timesteps(),
        consumption: instance.consumption_rows(),
        intensity: instance.intensity().to_vec(),
        elasticity: instance.elasticity().to_vec(),
        power_bound: instance.power_bound().to_vec(),
        scheme: SchemeDoc { z_max: scheme.z_max(), n_categories: scheme.n_categories() },
        penalties: PenaltiesDoc {
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            lambda3: p.lambda3,
        },
        flat_tariff: instance.flat_tariff(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses and fully re-validates an instance document.
pub fn instance_from_json(text: &str) -> Result<Instance> {
    let doc: InstanceDoc = serde_json::from_str(text)?;
    if doc.consumption.len() != doc.n_customers
        || doc.consumption.iter().any(|row| row.len() != doc.n_timesteps)
    {
        return Err(DspError::InvalidInstance(format!(
            "consumption shape does not match the declared {} x {}",
            doc.n_customers, doc.n_timesteps
        )));
    }
    let scheme = DiscountScheme::new(doc.scheme.z_max, doc.scheme.n_categories)?;
    let penalties =
        PenaltyWeights::new(doc.penalties.lambda1, doc.penalties.lambda2, doc.penalties.lambda3)?;
    Instance::new(
        doc.consumption,
        doc.intensity,
        doc.elasticity,
        doc.power_bound,
        scheme,
        penalties,
        doc.flat_tariff,
    )
}

pub fn write_instance<P: AsRef<Path>>(path: P, instance: &Instance) -> Result<()> {
    fs::write(path, instance_to_json(instance)?)?;
    Ok(())
}

pub fn read_instance<P: AsRef<Path>>(path: P) -> Result<Instance> {
    instance_from_json(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
struct MatrixRow {
    customer: usize,
    timestep: usize,
    discount: f64,
}

/// One `customer,timestep,discount` line per entry, customer-major,
/// zero-based indices, grid values verbatim.
pub fn matrix_to_csv(z: &DiscountMatrix, scheme: &DiscountScheme) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in 0..z.n_customers() {
        for t in 0..z.n_timesteps() {
            w.serialize(MatrixRow { customer: c, timestep: t, discount: z.value(c, t, scheme) })
                .expect("in-memory CSV write cannot fail");
        }
    }
    String::from_utf8(w.into_inner().expect("no partial flush")).expect("CSV output is UTF-8")
}

/// Strict inverse of [`matrix_to_csv`]: every cell exactly once, every
/// value a grid member.
pub fn matrix_from_csv(text: &str, scheme: &DiscountScheme) -> Result<DiscountMatrix> {
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for record in reader.deserialize::<MatrixRow>() {
        rows.push(record.map_err(|e| DspError::Parse(format!("matrix CSV: {e}")))?);
    }
    if rows.is_empty() {
        return Err(DspError::Parse("matrix CSV holds no entries".into()));
    }
    let n_customers = rows.iter().map(|r| r.customer).max().unwrap() + 1;
    let n_timesteps = rows.iter().map(|r| r.timestep).max().unwrap() + 1;
    let mut grid: Vec<Option<f64>> = vec![None; n_customers * n_timesteps];
    for row in &rows {
        let cell = &mut grid[row.customer * n_timesteps + row.timestep];
        if cell.is_some() {
            return Err(DspError::Parse(format!(
                "matrix CSV repeats customer {} timestep {}",
                row.customer, row.timestep
            )));
        }
        *cell = Some(row.discount);
    }
    if let Some(missing) = grid.iter().position(Option::is_none) {
        return Err(DspError::Parse(format!(
            "matrix CSV misses customer {} timestep {}",
            missing / n_timesteps,
            missing % n_timesteps
        )));
    }
    let values: Vec<Vec<f64>> = (0..n_customers)
        .map(|c| {
            (0..n_timesteps)
                .map(|t| grid[c * n_timesteps + t].unwrap())
                .collect()
        })
        .collect();
    DiscountMatrix::from_values(&values, scheme)
}

pub fn write_matrix<P: AsRef<Path>>(
    path: P,
    z: &DiscountMatrix,
    scheme: &DiscountScheme,
) -> Result<()> {
    fs::write(path, matrix_to_csv(z, scheme))?;
    Ok(())
}

pub fn read_matrix<P: AsRef<Path>>(path: P, scheme: &DiscountScheme) -> Result<DiscountMatrix> {
    matrix_from_csv(&fs::read_to_string(path)?, scheme)
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    timestep: usize,
    value: f64,
}

/// One `timestep,value` line per timestep, in order.
pub fn profile_to_csv(profile: &[f64]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (timestep, &value) in profile.iter().enumerate() {
        w.serialize(ProfileRow { timestep, value }).expect("in-memory CSV write cannot fail");
    }
    String::from_utf8(w.into_inner().expect("no partial flush")).expect("CSV output is UTF-8")
}

pub fn profile_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize::<ProfileRow>() {
        let row = record.map_err(|e| DspError::Parse(format!("profile CSV: {e}")))?;
        if row.timestep != out.len() {
            return Err(DspError::Parse(format!(
                "profile CSV out of order: expected timestep {}, got {}",
                out.len(),
                row.timestep
            )));
        }
        out.push(row.value);
    }
    if out.is_empty() {
        return Err(DspError::Parse("profile CSV holds no entries".into()));
    }
    Ok(out)
}

pub fn write_profile<P: AsRef<Path>>(path: P, profile: &[f64]) -> Result<()> {
    fs::write(path, profile_to_csv(profile))?;
    Ok(())
}

pub fn read_profile<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    profile_from_csv(&fs::read_to_string(path)?)
}

/// Change log as CSV; empty cells mark moves without that side.
pub fn changes_to_csv(changes: &[ChangeRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for change in changes {
        w.serialize(change).expect("in-memory CSV write cannot fail");
    }
    if changes.is_empty() {
        // Keep the header so an empty log is still a valid table.
        w.write_record(["pass", "timestep", "customer_up", "customer_down", "eps_before", "eps_after"])
            .expect("in-memory CSV write cannot fail");
    }
    String::from_utf8(w.into_inner().expect("no partial flush")).expect("CSV output is UTF-8")
}

pub fn changes_from_csv(text: &str) -> Result<Vec<ChangeRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize::<ChangeRecord>() {
        out.push(record.map_err(|e| DspError::Parse(format!("change CSV: {e}")))?);
    }
    Ok(out)
}

pub fn write_changes<P: AsRef<Path>>(path: P, changes: &[ChangeRecord]) -> Result<()> {
    fs::write(path, changes_to_csv(changes))?;
    Ok(())
}

pub fn metrics_to_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Column names for [`metrics_csv_row`], derived from the report's own
/// quantile levels so header and row always agree.
pub fn metrics_csv_header(report: &MetricsReport) -> String {
    let levels: Vec<f64> = report.savings_quantiles.iter().map(|&(q, _)| q).collect();
    metrics_csv_header_for(&levels)
}

/// Same header for a known set of quantile levels, for callers that need
/// the schema before any report exists.
pub fn metrics_csv_header_for(quantile_levels: &[f64]) -> String {
    let mut cols = vec![
        "relative_cost_error".to_string(),
        "co2_reduction_error".to_string(),
        "consumption_deviation_std".to_string(),
        "avg_discount_changes".to_string(),
        "mean_relative_savings".to_string(),
    ];
    for &q in quantile_levels {
        cols.push(format!("savings_q{}", (q * 100.0).round() as u32));
    }
    cols.extend(
        ["feasible", "global_deviation", "weighted_global_deviation", "power_violations"]
            .map(String::from),
    );
    cols.join(",")
}

/// The report as one flat CSV row matching [`metrics_csv_header`].
pub fn metrics_csv_row(report: &MetricsReport) -> String {
    let mut cols = vec![
        report.relative_cost_error.to_string(),
        report.co2_reduction_error.to_string(),
        report.consumption_deviation_std.to_string(),
        report.avg_discount_changes.to_string(),
        report.mean_relative_savings.to_string(),
    ];
    for &(_, s) in &report.savings_quantiles {
        cols.push(s.to_string());
    }
    let f = &report.feasibility;
    cols.push(f.feasible.to_string());
    cols.push(f.global_deviation.to_string());
    cols.push(f.weighted_global_deviation.to_string());
    cols.push(f.power_violations.len().to_string());
    cols.join(",")
}
