//! Run evaluation: cost and emissions gaps, budget scatter, discount
//! smoothness, and the customer savings distribution.
//!
//! All reference quantities come from the relaxed per-timestep profile,
//! which bounds what any discrete assignment can achieve. Errors are
//! therefore nonnegative up to float noise, and zero exactly when the
//! assignment realizes the profile.

use serde::Serialize;

use crate::error::{DspError, Result};
use crate::model::{DiscountMatrix, FeasibilityReport, Instance};

/// Quantile levels reported by [`full_report`].
pub const DEFAULT_QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

/// Everything a single run is judged by.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub relative_cost_error: f64,
    pub co2_reduction_error: f64,
    pub consumption_deviation_std: f64,
    pub avg_discount_changes: f64,
    pub mean_relative_savings: f64,
    pub savings_quantiles: Vec<(f64, f64)>,
    pub feasibility: FeasibilityReport,
}

/// Emissions of an effective per-timestep discount profile.
pub fn profile_emissions(instance: &Instance, zeta: &[f64]) -> f64 {
    assert_eq!(zeta.len(), instance.n_timesteps(), "profile length mismatch");
    let intensity = instance.intensity();
    let totals = instance.timestep_totals();
    let mutable = instance.mutable_timestep_totals();
    (0..instance.n_timesteps())
        .map(|t| intensity[t] * (totals[t] - zeta[t] * mutable[t]))
        .sum()
}

/// Gap between the run's full cost and the profile's cost, relative to
/// the latter. The profile pays only the emission term: every penalty
/// is bounded below by zero, so this reference is itself a lower bound.
pub fn relative_cost_error(
    instance: &Instance,
    z: &DiscountMatrix,
    zeta_star: &[f64],
) -> Result<f64> {
    let norms = instance.normalizations()?;
    let reference = profile_emissions(instance, zeta_star) / norms.n0;
    if reference == 0.0 {
        return Err(DspError::DegenerateReference(
            "profile cost is zero; relative error undefined".into(),
        ));
    }
    Ok((instance.cost(z) - reference).abs() / reference.abs())
}

/// Fraction of the profile's emission reduction the assignment failed
/// to realize: zero at the profile, one for the all-zero assignment.
pub fn co2_reduction_error(
    instance: &Instance,
    z: &DiscountMatrix,
    zeta_star: &[f64],
) -> Result<f64> {
    let baseline = instance.baseline_emissions();
    let reference = profile_emissions(instance, zeta_star);
    let gap = baseline - reference;
    if gap <= 0.0 {
        return Err(DspError::DegenerateReference(format!(
            "profile does not improve on the baseline ({reference} vs {baseline})"
        )));
    }
    let error = (instance.emissions(z) - reference) / gap;
    if error < -1e-9 {
        // The profile bounds every balanced in-band assignment.
        // Beating it while feasible would be a solver bug, not a data
        // property; unbalanced assignments may land below legitimately.
        let feas = instance.check_constraints_default(z);
        assert!(
            !feas.feasible,
            "feasible assignment beat the relaxation profile: {error}"
        );
    }
    Ok(error)
}

/// Root mean square of the per-customer relative budget deviation.
pub fn consumption_deviation_std(instance: &Instance, z: &DiscountMatrix) -> f64 {
    let scheme = instance.scheme();
    let mut acc = 0.0;
    for c in 0..instance.n_customers() {
        let mut dev = 0.0;
        for t in 0..instance.n_timesteps() {
            dev += instance.consumption(c, t) * z.value(c, t, scheme);
        }
        dev /= instance.customer_totals()[c];
        acc += dev * dev;
    }
    (acc / instance.n_customers() as f64).sqrt()
}

/// Fraction of consecutive timestep pairs whose discount category
/// differs. Categories compare exactly; no float equality is involved.
pub fn avg_discount_changes(instance: &Instance, z: &DiscountMatrix) -> f64 {
    let nt = instance.n_timesteps();
    assert!(nt >= 2, "change fraction needs at least two timesteps");
    let mut changes = 0usize;
    for c in 0..instance.n_customers() {
        for t in 0..nt - 1 {
            if z.index(c, t) != z.index(c, t + 1) {
                changes += 1;
            }
        }
    }
    changes as f64 / (instance.n_customers() * (nt - 1)) as f64
}

/// Empirical distribution of the per-customer relative savings.
#[derive(Debug, Clone, Serialize)]
pub struct SavingsDistribution {
    pub quantiles: Vec<(f64, f64)>,
    pub mean: f64,
}

/// Quantiles and mean of the relative savings across customers.
pub fn savings_distribution(
    instance: &Instance,
    z: &DiscountMatrix,
    quantiles: &[f64],
) -> Result<SavingsDistribution> {
    if let Some(&q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(DspError::InvalidConfig(format!(
            "quantile {q} outside [0, 1]"
        )));
    }
    let mut savings: Vec<f64> =
        instance.customer_savings(z)?.iter().map(|s| s.relative).collect();
    let mean = savings.iter().sum::<f64>() / savings.len() as f64;
    savings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let qs = quantiles
        .iter()
        .map(|&q| (q, interpolated_quantile(&savings, q)))
        .collect();
    Ok(SavingsDistribution { quantiles: qs, mean })
}

/// Inclusive linear interpolation on a sorted sample.
fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Evaluates an assignment against the relaxed profile on all metrics.
pub fn full_report(
    instance: &Instance,
    z: &DiscountMatrix,
    zeta_star: &[f64],
) -> Result<MetricsReport> {
    let savings = savings_distribution(instance, z, &DEFAULT_QUANTILES)?;
    Ok(MetricsReport {
        relative_cost_error: relative_cost_error(instance, z, zeta_star)?,
        co2_reduction_error: co2_reduction_error(instance, z, zeta_star)?,
        consumption_deviation_std: consumption_deviation_std(instance, z),
        avg_discount_changes: avg_discount_changes(instance, z),
        mean_relative_savings: savings.mean,
        savings_quantiles: savings.quantiles,
        feasibility: instance.check_constraints_default(z),
    })
}
