//! Problem instances, the discount grid, objective, constraints and savings.
//!
//! Discounts are kept as grid indices internally; floating-point discount
//! values appear only at API and file boundaries. This keeps category
//! comparisons exact (discount-change counting, grid membership) and makes
//! single-step moves in post-processing a plain index increment.

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};

/// Symmetric discount grid: `n_categories` evenly spaced values spanning
/// `[-z_max, +z_max]`. Negative values are discounts (consumption rises),
/// positive values are penalties (consumption falls).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountScheme {
    z_max: f64,
    n_categories: usize,
}

impl DiscountScheme {
    pub fn new(z_max: f64, n_categories: usize) -> Result<Self> {
        if !z_max.is_finite() || z_max <= 0.0 || z_max > 1.0 {
            return Err(DspError::InvalidScheme(format!(
                "z_max must lie in (0, 1], got {z_max}"
            )));
        }
        if n_categories < 2 {
            return Err(DspError::InvalidScheme(format!(
                "need at least 2 categories, got {n_categories}"
            )));
        }
        Ok(Self { z_max, n_categories })
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    /// Spacing between adjacent grid values.
    pub fn step(&self) -> f64 {
        2.0 * self.z_max / (self.n_categories - 1) as f64
    }

    /// Grid value at `index`. The endpoints are exactly `-z_max` and
    /// `+z_max`; the midpoint of an odd grid is exactly zero.
    pub fn value(&self, index: usize) -> f64 {
        debug_assert!(index < self.n_categories);
        let half = (self.n_categories - 1) as f64;
        // Dividing first keeps the endpoints and the midpoint exact: the
        // ratio is exactly -1, 0 or +1 there.
        self.z_max * (((2 * index) as f64 - half) / half)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_categories).map(move |i| self.value(i))
    }

    /// Exact grid membership: `value` must equal one of the grid values
    /// bit-for-bit (no rounding slack).
    pub fn index_of(&self, value: f64) -> Result<usize> {
        (0..self.n_categories)
            .find(|&i| self.value(i) == value)
            .ok_or(DspError::NotInZ { value })
    }

    /// Index of the zero discount; present only on odd grids.
    pub fn zero_index(&self) -> Option<usize> {
        if self.n_categories % 2 == 1 {
            Some((self.n_categories - 1) / 2)
        } else {
            None
        }
    }

    pub fn max_index(&self) -> usize {
        self.n_categories - 1
    }
}

/// Weights of the three penalty terms in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl PenaltyWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(DspError::InvalidInstance(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self { lambda1, lambda2, lambda3 })
    }
}

impl Default for PenaltyWeights {
    /// lambda1 weighs per-customer budget neutrality, lambda2 the
    /// discount-change smoothing, lambda3 the magnitude regularization.
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 1e-5, lambda3: 1e-4 }
    }
}

/// Per-customer, per-timestep discount assignment, stored as grid indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscountMatrix {
    n_customers: usize,
    n_timesteps: usize,
    categories: Vec<u16>,
}

impl DiscountMatrix {
    pub fn from_indices(
        n_customers: usize,
        n_timesteps: usize,
        categories: Vec<u16>,
        scheme: &DiscountScheme,
    ) -> Result<Self> {
        if categories.len() != n_customers * n_timesteps {
            return Err(DspError::LengthMismatch {
                expected: n_customers * n_timesteps,
                got: categories.len(),
            });
        }
        if let Some(&bad) = categories.iter().find(|&&i| i as usize >= scheme.n_categories()) {
            return Err(DspError::InvalidScheme(format!(
                "category index {bad} out of range for {} categories",
                scheme.n_categories()
            )));
        }
        Ok(Self { n_customers, n_timesteps, categories })
    }

    /// Builds a matrix from discount values; every entry must be an exact
    /// grid member.
    pub fn from_values(rows: &[Vec<f64>], scheme: &DiscountScheme) -> Result<Self> {
        let n_customers = rows.len();
        let n_timesteps = rows.first().map_or(0, Vec::len);
        let mut categories = Vec::with_capacity(n_customers * n_timesteps);
        for row in rows {
            if row.len() != n_timesteps {
                return Err(DspError::LengthMismatch { expected: n_timesteps, got: row.len() });
            }
            for &v in row {
                categories.push(scheme.index_of(v)? as u16);
            }
        }
        Ok(Self { n_customers, n_timesteps, categories })
    }

    /// The all-zero assignment; only odd grids contain zero.
    pub fn zeros(n_customers: usize, n_timesteps: usize, scheme: &DiscountScheme) -> Result<Self> {
        let zero = scheme.zero_index().ok_or(DspError::NotInZ { value: 0.0 })? as u16;
        Ok(Self {
            n_customers,
            n_timesteps,
            categories: vec![zero; n_customers * n_timesteps],
        })
    }

    pub fn uniform(
        n_customers: usize,
        n_timesteps: usize,
        index: u16,
        scheme: &DiscountScheme,
    ) -> Result<Self> {
        Self::from_indices(
            n_customers,
            n_timesteps,
            vec![index; n_customers * n_timesteps],
            scheme,
        )
    }

    pub fn n_customers(&self) -> usize {
        self.n_customers
    }

    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    #[inline]
    pub fn index(&self, customer: usize, timestep: usize) -> u16 {
        self.categories[customer * self.n_timesteps + timestep]
    }

    #[inline]
    pub fn set_index(&mut self, customer: usize, timestep: usize, index: u16) {
        self.categories[customer * self.n_timesteps + timestep] = index;
    }

    #[inline]
    pub fn value(&self, customer: usize, timestep: usize, scheme: &DiscountScheme) -> f64 {
        scheme.value(self.index(customer, timestep) as usize)
    }

    pub fn indices(&self) -> &[u16] {
        &self.categories
    }

    /// Discount values row by row (boundary representation).
    pub fn to_rows(&self, scheme: &DiscountScheme) -> Vec<Vec<f64>> {
        (0..self.n_customers)
            .map(|c| (0..self.n_timesteps).map(|t| self.value(c, t, scheme)).collect())
            .collect()
    }
}

/// Consumption totals derived from an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    /// Total consumption per customer (all positive).
    pub customer_totals: Vec<f64>,
    /// Total consumption per timestep.
    pub timestep_totals: Vec<f64>,
    /// Elasticity-weighted consumption per timestep.
    pub mutable_timestep_totals: Vec<f64>,
}

/// Normalization constants that put the objective terms on one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub n0: f64,
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
}

/// Outcome of the feasibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Unweighted budget deviation `sum_{c,t} z*d`.
    pub global_deviation: f64,
    /// Elasticity-weighted deviation `sum_{c,t} chi*z*d`; this is the sum
    /// the relaxation drives to zero, reported alongside the unweighted one
    /// because the two coincide only under uniform elasticity.
    pub weighted_global_deviation: f64,
    /// Timesteps whose power band is exceeded, with the excess magnitude.
    pub power_violations: Vec<(usize, f64)>,
    pub feasible: bool,
    pub tol_global: f64,
    pub tol_power: f64,
}

/// A discount scheduling instance.
///
/// Consumption is row-major per customer; intensity, power bounds are per
/// timestep. Construction validates shapes, signs and that the instance
/// carries a usable shifting signal (baseline emissions strictly above the
/// naive bound), so downstream normalization never degenerates.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    n_customers: usize,
    n_timesteps: usize,
    consumption: Vec<f64>,
    intensity: Vec<f64>,
    elasticity: Vec<f64>,
    power_bound: Vec<f64>,
    scheme: DiscountScheme,
    penalties: PenaltyWeights,
    flat_tariff: f64,
    // Cached at construction; all ops below stay allocation-light.
    customer_totals: Vec<f64>,
    timestep_totals: Vec<f64>,
    mutable_timestep_totals: Vec<f64>,
    baseline_emissions: f64,
    emissions_bound: f64,
}

impl Instance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        consumption: Vec<Vec<f64>>,
        intensity: Vec<f64>,
        elasticity: Vec<f64>,
        power_bound: Vec<f64>,
        scheme: DiscountScheme,
        penalties: PenaltyWeights,
        flat_tariff: f64,
    ) -> Result<Self> {
        let n_customers = consumption.len();
        if n_customers == 0 {
            return Err(DspError::InvalidInstance("need at least one customer".into()));
        }
        let n_timesteps = consumption[0].len();
        if n_timesteps < 2 {
            return Err(DspError::InvalidInstance(format!(
                "need at least two timesteps, got {n_timesteps}"
            )));
        }
        let mut flat = Vec::with_capacity(n_customers * n_timesteps);
        for (c, row) in consumption.iter().enumerate() {
            if row.len() != n_timesteps {
                return Err(DspError::InvalidInstance(format!(
                    "consumption row {c} has length {}, expected {n_timesteps}",
                    row.len()
                )));
            }
            for &d in row {
                if !d.is_finite() || d < 0.0 {
                    return Err(DspError::InvalidInstance(format!(
                        "consumption must be finite and non-negative, got {d} for customer {c}"
                    )));
                }
                flat.push(d);
            }
        }
        if intensity.len() != n_timesteps {
            return Err(DspError::InvalidInstance(format!(
                "intensity has length {}, expected {n_timesteps}",
                intensity.len()
            )));
        }
        if intensity.iter().any(|i| !i.is_finite() || *i < 0.0) {
            return Err(DspError::InvalidInstance(
                "intensity must be finite and non-negative".into(),
            ));
        }
        if elasticity.len() != n_customers {
            return Err(DspError::InvalidInstance(format!(
                "elasticity has length {}, expected {n_customers}",
                elasticity.len()
            )));
        }
        if elasticity.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(DspError::InvalidInstance("elasticity must lie in [0, 1]".into()));
        }
        if power_bound.len() != n_timesteps {
            return Err(DspError::InvalidInstance(format!(
                "power bound has length {}, expected {n_timesteps}",
                power_bound.len()
            )));
        }
        if power_bound.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(DspError::InvalidInstance(
                "power bounds must be finite and positive".into(),
            ));
        }
        if !flat_tariff.is_finite() || flat_tariff <= 0.0 {
            return Err(DspError::InvalidInstance(format!(
                "flat tariff must be positive, got {flat_tariff}"
            )));
        }

        let mut customer_totals = vec![0.0; n_customers];
        let mut timestep_totals = vec![0.0; n_timesteps];
        let mut mutable_timestep_totals = vec![0.0; n_timesteps];
        for c in 0..n_customers {
            for t in 0..n_timesteps {
                let d = flat[c * n_timesteps + t];
                customer_totals[c] += d;
                timestep_totals[t] += d;
                mutable_timestep_totals[t] += elasticity[c] * d;
            }
        }
        if let Some(c) = customer_totals.iter().position(|&d| d <= 0.0) {
            return Err(DspError::InvalidInstance(format!(
                "customer {c} has zero total consumption"
            )));
        }

        let mut instance = Self {
            n_customers,
            n_timesteps,
            consumption: flat,
            intensity,
            elasticity,
            power_bound,
            scheme,
            penalties,
            flat_tariff,
            customer_totals,
            timestep_totals,
            mutable_timestep_totals,
            baseline_emissions: 0.0,
            emissions_bound: 0.0,
        };
        instance.baseline_emissions = instance.compute_baseline_emissions();
        instance.emissions_bound = instance.compute_emissions_bound();
        // Covers flat intensity and all-zero elasticity: both collapse the
        // bound onto the baseline and leave nothing to normalize by.
        if instance.baseline_emissions - instance.emissions_bound <= 0.0 {
            return Err(DspError::DegenerateNormalization);
        }
        Ok(instance)
    }

    pub fn n_customers(&self) -> usize {
        self.n_customers
    }

    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    #[inline]
    pub fn consumption(&self, customer: usize, timestep: usize) -> f64 {
        self.consumption[customer * self.n_timesteps + timestep]
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn elasticity(&self) -> &[f64] {
        &self.elasticity
    }

    pub fn power_bound(&self) -> &[f64] {
        &self.power_bound
    }

    pub fn scheme(&self) -> &DiscountScheme {
        &self.scheme
    }

    pub fn penalties(&self) -> &PenaltyWeights {
        &self.penalties
    }

    pub fn flat_tariff(&self) -> f64 {
        self.flat_tariff
    }

    pub fn consumption_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_customers)
            .map(|c| self.consumption[c * self.n_timesteps..(c + 1) * self.n_timesteps].to_vec())
            .collect()
    }

    pub fn aggregates(&self) -> Aggregates {
        Aggregates {
            customer_totals: self.customer_totals.clone(),
            timestep_totals: self.timestep_totals.clone(),
            mutable_timestep_totals: self.mutable_timestep_totals.clone(),
        }
    }

    pub fn customer_totals(&self) -> &[f64] {
        &self.customer_totals
    }

    pub fn timestep_totals(&self) -> &[f64] {
        &self.timestep_totals
    }

    pub fn mutable_timestep_totals(&self) -> &[f64] {
        &self.mutable_timestep_totals
    }

    fn assert_dims(&self, z: &DiscountMatrix) {
        assert_eq!(
            (z.n_customers(), z.n_timesteps()),
            (self.n_customers, self.n_timesteps),
            "discount matrix shape does not match the instance"
        );
    }

    /// Consumption after customers respond to their discounts:
    /// `d * (1 - chi * z)` per cell.
    pub fn altered_consumption(&self, z: &DiscountMatrix) -> Vec<Vec<f64>> {
        self.assert_dims(z);
        (0..self.n_customers)
            .map(|c| {
                let chi = self.elasticity[c];
                (0..self.n_timesteps)
                    .map(|t| (1.0 - chi * z.value(c, t, &self.scheme)) * self.consumption(c, t))
                    .collect()
            })
            .collect()
    }

    /// Total emissions of the altered consumption.
    pub fn emissions(&self, z: &DiscountMatrix) -> f64 {
        self.assert_dims(z);
        let mut total = 0.0;
        for c in 0..self.n_customers {
            let chi = self.elasticity[c];
            for t in 0..self.n_timesteps {
                total += self.intensity[t]
                    * (1.0 - chi * z.value(c, t, &self.scheme))
                    * self.consumption(c, t);
            }
        }
        total
    }

    /// Emissions of the unaltered consumption.
    pub fn baseline_emissions(&self) -> f64 {
        self.baseline_emissions
    }

    fn compute_baseline_emissions(&self) -> f64 {
        let mut total = 0.0;
        for t in 0..self.n_timesteps {
            total += self.intensity[t] * self.timestep_totals[t];
        }
        total
    }

    /// Naive emissions bound: full penalty wherever intensity is above its
    /// mean, full discount wherever it is below (timesteps at the mean are
    /// left unaltered). The bound ignores the scheduling constraints.
    pub fn emissions_lower_bound(&self) -> f64 {
        self.emissions_bound
    }

    fn compute_emissions_bound(&self) -> f64 {
        let mean = self.intensity.iter().sum::<f64>() / self.n_timesteps as f64;
        let z_max = self.scheme.z_max();
        let mut total = 0.0;
        for c in 0..self.n_customers {
            let chi = self.elasticity[c];
            for t in 0..self.n_timesteps {
                let sign = match self.intensity[t].partial_cmp(&mean).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Less => -1.0,
                    std::cmp::Ordering::Equal => 0.0,
                };
                total +=
                    self.intensity[t] * (1.0 - chi * sign * z_max) * self.consumption(c, t);
            }
        }
        total
    }

    /// Normalization constants for the four objective terms.
    pub fn normalizations(&self) -> Result<NormalizationConstants> {
        let n0 = self.baseline_emissions - self.emissions_bound;
        if n0 <= 0.0 {
            return Err(DspError::DegenerateNormalization);
        }
        let z2 = self.scheme.z_max() * self.scheme.z_max();
        let nc = self.n_customers as f64;
        let nt = self.n_timesteps as f64;
        Ok(NormalizationConstants {
            n0,
            n1: nc * z2,
            n2: 4.0 * nc * (nt - 1.0) * z2,
            n3: nc * nt * z2,
        })
    }

    /// Full objective: normalized emissions plus the three penalty terms.
    pub fn cost(&self, z: &DiscountMatrix) -> f64 {
        let norms = self.normalizations().expect("construction guarantees a usable signal");
        self.cost_with(z, &norms)
    }

    pub fn cost_with(&self, z: &DiscountMatrix, norms: &NormalizationConstants) -> f64 {
        self.assert_dims(z);
        let mut deviation = 0.0;
        let mut change = 0.0;
        let mut reg = 0.0;
        for c in 0..self.n_customers {
            let mut dev_c = 0.0;
            for t in 0..self.n_timesteps {
                let zv = z.value(c, t, &self.scheme);
                dev_c += self.consumption(c, t) * zv;
                reg += zv * zv;
                if t + 1 < self.n_timesteps {
                    let diff = zv - z.value(c, t + 1, &self.scheme);
                    change += diff * diff;
                }
            }
            dev_c /= self.customer_totals[c];
            deviation += dev_c * dev_c;
        }
        let p = &self.penalties;
        self.emissions(z) / norms.n0
            + p.lambda1 / norms.n1 * deviation
            + p.lambda2 / norms.n2 * change
            + p.lambda3 / norms.n3 * reg
    }

    /// Default tolerance on the global budget deviation.
    pub fn default_global_tolerance(&self) -> f64 {
        1e-6 * self.consumption.iter().sum::<f64>()
    }

    /// Default tolerance on per-timestep power-band violations.
    pub fn default_power_tolerance(&self) -> f64 {
        1e-9 * self.power_bound.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Checks the budget-neutrality equality and the per-timestep power
    /// band at the given tolerances.
    pub fn check_constraints(
        &self,
        z: &DiscountMatrix,
        tol_global: f64,
        tol_power: f64,
    ) -> FeasibilityReport {
        self.assert_dims(z);
        let mut global = 0.0;
        let mut weighted = 0.0;
        let mut per_timestep = vec![0.0; self.n_timesteps];
        for c in 0..self.n_customers {
            let chi = self.elasticity[c];
            for t in 0..self.n_timesteps {
                let zd = z.value(c, t, &self.scheme) * self.consumption(c, t);
                global += zd;
                weighted += chi * zd;
                per_timestep[t] += chi * zd;
            }
        }
        let power_violations: Vec<(usize, f64)> = per_timestep
            .iter()
            .enumerate()
            .filter_map(|(t, &s)| {
                let excess = s.abs() - self.power_bound[t];
                (excess > tol_power).then_some((t, excess))
            })
            .collect();
        let feasible = global.abs() <= tol_global && power_violations.is_empty();
        FeasibilityReport {
            global_deviation: global,
            weighted_global_deviation: weighted,
            power_violations,
            feasible,
            tol_global,
            tol_power,
        }
    }

    pub fn check_constraints_default(&self, z: &DiscountMatrix) -> FeasibilityReport {
        self.check_constraints(z, self.default_global_tolerance(), self.default_power_tolerance())
    }

    /// Per-customer bill change and relative savings.
    ///
    /// The bill change is `-v0 * chi * sum_t z^2 * d`, never positive: any
    /// incentive, discount or penalty, lowers the customer's effective bill
    /// relative to the flat tariff on the altered consumption.
    pub fn customer_savings(&self, z: &DiscountMatrix) -> Result<Vec<CustomerSavings>> {
        self.assert_dims(z);
        let altered = self.altered_consumption(z);
        let mut out = Vec::with_capacity(self.n_customers);
        for c in 0..self.n_customers {
            let chi = self.elasticity[c];
            let mut squared = 0.0;
            for t in 0..self.n_timesteps {
                let zv = z.value(c, t, &self.scheme);
                squared += zv * zv * self.consumption(c, t);
            }
            let delta_v = -self.flat_tariff * chi * squared;
            let altered_bill: f64 =
                altered[c].iter().map(|d| self.flat_tariff * d).sum();
            if altered_bill <= 0.0 {
                return Err(DspError::ZeroAlteredConsumption { customer: c });
            }
            out.push(CustomerSavings { delta_v, relative: -delta_v / altered_bill });
        }
        Ok(out)
    }
}

/// Bill change (`delta_v <= 0`) and savings relative to the altered bill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomerSavings {
    pub delta_v: f64,
    pub relative: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scheme5() -> DiscountScheme {
        DiscountScheme::new(0.5, 5).unwrap()
    }

    fn small_instance() -> Instance {
        Instance::new(
            vec![vec![1.0, 2.0], vec![3.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0, 0.5],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap()
    }

    /// Straight-line reimplementation of the objective used as an oracle:
    /// no shared code with `Instance::cost`.
    fn cost_oracle(
        d: &[Vec<f64>],
        intensity: &[f64],
        chi: &[f64],
        z: &[Vec<f64>],
        z_max: f64,
        lambda: (f64, f64, f64),
    ) -> f64 {
        let nc = d.len();
        let nt = d[0].len();
        let mean_i = intensity.iter().sum::<f64>() / nt as f64;
        let mut e0 = 0.0;
        let mut emin = 0.0;
        let mut e = 0.0;
        for c in 0..nc {
            for t in 0..nt {
                e0 += intensity[t] * d[c][t];
                let sign = if intensity[t] > mean_i {
                    1.0
                } else if intensity[t] < mean_i {
                    -1.0
                } else {
                    0.0
                };
                emin += intensity[t] * (1.0 - chi[c] * sign * z_max) * d[c][t];
                e += intensity[t] * (1.0 - chi[c] * z[c][t]) * d[c][t];
            }
        }
        let n0 = e0 - emin;
        let n1 = nc as f64 * z_max * z_max;
        let n2 = 4.0 * nc as f64 * (nt - 1) as f64 * z_max * z_max;
        let n3 = (nc * nt) as f64 * z_max * z_max;
        let mut dev = 0.0;
        let mut change = 0.0;
        let mut reg = 0.0;
        for c in 0..nc {
            let dc: f64 = d[c].iter().sum();
            let s: f64 = (0..nt).map(|t| d[c][t] * z[c][t]).sum();
            dev += (s / dc).powi(2);
            for t in 0..nt - 1 {
                change += (z[c][t] - z[c][t + 1]).powi(2);
            }
            for t in 0..nt {
                reg += z[c][t] * z[c][t];
            }
        }
        e / n0 + lambda.0 / n1 * dev + lambda.1 / n2 * change + lambda.2 / n3 * reg
    }

    #[test]
    fn grid_endpoints_are_exact_and_symmetric() {
        for n in 2..=16 {
            for z_max in [0.5, 1.0, 0.37] {
                let s = DiscountScheme::new(z_max, n).unwrap();
                assert_eq!(s.value(0), -z_max);
                assert_eq!(s.value(n - 1), z_max);
                // Symmetric around zero.
                for i in 0..n {
                    assert_relative_eq!(s.value(i), -s.value(n - 1 - i), max_relative = 1e-15);
                }
                // Uniform spacing.
                for i in 0..n - 1 {
                    assert_relative_eq!(
                        s.value(i + 1) - s.value(i),
                        s.step(),
                        max_relative = 1e-12
                    );
                }
                assert_eq!(s.zero_index().is_some(), n % 2 == 1);
                if let Some(zi) = s.zero_index() {
                    assert_eq!(s.value(zi), 0.0);
                }
            }
        }
    }

    #[test]
    fn grid_membership_is_exact() {
        let s = scheme5();
        assert_eq!(s.index_of(-0.5).unwrap(), 0);
        assert_eq!(s.index_of(0.25).unwrap(), 3);
        assert!(matches!(s.index_of(0.1), Err(DspError::NotInZ { .. })));
        // A value one ulp off the grid is rejected.
        let off = 0.25f64.next_up();
        assert!(s.index_of(off).is_err());
    }

    #[test]
    fn scheme_rejects_bad_parameters() {
        assert!(DiscountScheme::new(0.0, 5).is_err());
        assert!(DiscountScheme::new(1.5, 5).is_err());
        assert!(DiscountScheme::new(0.5, 1).is_err());
    }

    #[test]
    fn altered_consumption_matches_hand_values() {
        let inst = Instance::new(
            vec![vec![1.0, 1.0], vec![2.0, 2.0]],
            vec![1.0, 2.0],
            vec![1.0, 0.5],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        // customer 0: chi=1, z=+0.5 halves consumption; customer 1:
        // chi=0.5, z=-0.5 raises it by 25%.
        let z = DiscountMatrix::from_values(
            &[vec![0.5, 0.5], vec![-0.5, -0.5]],
            inst.scheme(),
        )
        .unwrap();
        let altered = inst.altered_consumption(&z);
        assert_eq!(altered[0], vec![0.5, 0.5]);
        assert_eq!(altered[1], vec![2.5, 2.5]);
    }

    #[test]
    fn emissions_lower_bound_matches_worked_example() {
        // One customer, d=[1,1], I=[1,2]: below-mean timestep gets the full
        // discount, above-mean the full penalty: 1*1.5 + 2*0.5 = 2.5.
        let inst = Instance::new(
            vec![vec![1.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(inst.emissions_lower_bound(), 2.5, max_relative = 1e-12);
        assert_relative_eq!(inst.baseline_emissions(), 3.0, max_relative = 1e-12);
        let norms = inst.normalizations().unwrap();
        assert_relative_eq!(norms.n0, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn bound_dominates_feasible_assignments_on_balanced_instances() {
        // On instances whose consumption mass above mean intensity is at
        // least the mass below, the naive bound sits under every
        // budget-neutral assignment; verify by full enumeration.
        let inst = Instance::new(
            vec![vec![1.0, 1.0], vec![2.0, 2.0]],
            vec![1.0, 3.0],
            vec![1.0, 1.0],
            vec![100.0, 100.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        let bound = inst.emissions_lower_bound();
        let n_cells = inst.n_customers() * inst.n_timesteps();
        let n_cat = inst.scheme().n_categories();
        let tol = inst.default_global_tolerance();
        let mut feasible_seen = 0;
        for code in 0..n_cat.pow(n_cells as u32) {
            let mut idx = Vec::with_capacity(n_cells);
            let mut rem = code;
            for _ in 0..n_cells {
                idx.push((rem % n_cat) as u16);
                rem /= n_cat;
            }
            let z = DiscountMatrix::from_indices(
                inst.n_customers(),
                inst.n_timesteps(),
                idx,
                inst.scheme(),
            )
            .unwrap();
            let report = inst.check_constraints(&z, tol, inst.default_power_tolerance());
            if report.feasible {
                feasible_seen += 1;
                assert!(
                    inst.emissions(&z) >= bound - 1e-12,
                    "feasible assignment beat the bound"
                );
            }
        }
        assert!(feasible_seen > 1, "enumeration found only the trivial assignment");
    }

    #[test]
    fn normalization_constants_match_definitions() {
        let inst = small_instance();
        let norms = inst.normalizations().unwrap();
        assert_relative_eq!(norms.n1, 2.0 * 0.25, max_relative = 1e-15);
        assert_relative_eq!(norms.n2, 4.0 * 2.0 * 1.0 * 0.25, max_relative = 1e-15);
        assert_relative_eq!(norms.n3, 2.0 * 2.0 * 0.25, max_relative = 1e-15);
    }

    #[test]
    fn degenerate_instances_are_rejected_at_construction() {
        // Flat intensity leaves no signal.
        let flat = Instance::new(
            vec![vec![1.0, 2.0]],
            vec![1.0, 1.0],
            vec![1.0],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        );
        assert!(matches!(flat, Err(DspError::DegenerateNormalization)));
        // All-zero elasticity cannot respond.
        let stiff = Instance::new(
            vec![vec![1.0, 2.0]],
            vec![1.0, 2.0],
            vec![0.0],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        );
        assert!(matches!(stiff, Err(DspError::DegenerateNormalization)));
    }

    #[test]
    fn cost_matches_straight_line_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let nc = rng.gen_range(1..4);
            let nt = rng.gen_range(2..5);
            let d: Vec<Vec<f64>> = (0..nc)
                .map(|_| (0..nt).map(|_| rng.gen_range(0.1..5.0)).collect())
                .collect();
            let intensity: Vec<f64> = (0..nt).map(|_| rng.gen_range(0.1..3.0)).collect();
            let chi: Vec<f64> = (0..nc).map(|_| rng.gen_range(0.1..=1.0)).collect();
            let inst = match Instance::new(
                d.clone(),
                intensity.clone(),
                chi.clone(),
                vec![100.0; nt],
                scheme5(),
                PenaltyWeights::default(),
                1.0,
            ) {
                Ok(i) => i,
                Err(_) => continue, // intensity draw happened to be degenerate
            };
            let idx: Vec<u16> = (0..nc * nt).map(|_| rng.gen_range(0..5) as u16).collect();
            let z = DiscountMatrix::from_indices(nc, nt, idx, inst.scheme()).unwrap();
            let z_rows = z.to_rows(inst.scheme());
            let expected =
                cost_oracle(&d, &intensity, &chi, &z_rows, 0.5, (0.1, 1e-5, 1e-4));
            assert_relative_eq!(inst.cost(&z), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn cost_is_invariant_under_customer_permutation() {
        let inst = small_instance();
        let z = DiscountMatrix::from_values(
            &[vec![0.25, -0.25], vec![-0.5, 0.5]],
            inst.scheme(),
        )
        .unwrap();
        let permuted = Instance::new(
            vec![vec![3.0, 1.0], vec![1.0, 2.0]],
            vec![1.0, 2.0],
            vec![0.5, 1.0],
            vec![10.0, 10.0],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        let zp = DiscountMatrix::from_values(
            &[vec![-0.5, 0.5], vec![0.25, -0.25]],
            permuted.scheme(),
        )
        .unwrap();
        assert_relative_eq!(inst.cost(&z), permuted.cost(&zp), max_relative = 1e-14);
    }

    #[test]
    fn cost_is_invariant_under_consumption_rescaling() {
        let inst = small_instance();
        let k = 3.7;
        let scaled = Instance::new(
            vec![vec![1.0 * k, 2.0 * k], vec![3.0 * k, 1.0 * k]],
            vec![1.0, 2.0],
            vec![1.0, 0.5],
            vec![10.0 * k, 10.0 * k],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        let z = DiscountMatrix::from_values(
            &[vec![0.25, -0.25], vec![-0.5, 0.5]],
            inst.scheme(),
        )
        .unwrap();
        assert_relative_eq!(inst.cost(&z), scaled.cost(&z), max_relative = 1e-12);
        assert_relative_eq!(
            inst.emissions(&z) * k,
            scaled.emissions(&z),
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_assignment_is_feasible_with_zero_cost_penalties() {
        let inst = small_instance();
        let z = DiscountMatrix::zeros(2, 2, inst.scheme()).unwrap();
        let report = inst.check_constraints_default(&z);
        assert!(report.feasible);
        assert_eq!(report.global_deviation, 0.0);
        let norms = inst.normalizations().unwrap();
        assert_relative_eq!(
            inst.cost(&z),
            inst.baseline_emissions() / norms.n0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn constraint_check_reports_both_sums_and_violations() {
        let inst = Instance::new(
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0, 0.5],
            vec![0.1, 0.1],
            scheme5(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        let z = DiscountMatrix::from_values(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            inst.scheme(),
        )
        .unwrap();
        let report = inst.check_constraints(&z, 1e-9, 1e-12);
        // Unweighted sum: 4 cells * 0.5 * 1.0 = 2.0; weighted: 1.5.
        assert_relative_eq!(report.global_deviation, 2.0, max_relative = 1e-12);
        assert_relative_eq!(report.weighted_global_deviation, 1.5, max_relative = 1e-12);
        assert_eq!(report.power_violations.len(), 2);
        // Per-timestep weighted sum is 0.75, bound 0.1, excess 0.65.
        assert_relative_eq!(report.power_violations[0].1, 0.65, max_relative = 1e-12);
        assert!(!report.feasible);
    }

    #[test]
    fn savings_are_never_positive_and_match_hand_computation() {
        let inst = small_instance();
        let z = DiscountMatrix::from_values(
            &[vec![0.5, -0.25], vec![0.0, 0.25]],
            inst.scheme(),
        )
        .unwrap();
        let savings = inst.customer_savings(&z).unwrap();
        for s in &savings {
            assert!(s.delta_v <= 0.0);
            assert!(s.relative >= 0.0);
        }
        // Customer 0: chi=1, sum z^2 d = 0.25*1 + 0.0625*2 = 0.375.
        assert_relative_eq!(savings[0].delta_v, -0.375, max_relative = 1e-12);
        // Altered bill: d=(1-0.5)*1 + (1+0.25)*2 = 3.0 at v0=1.
        assert_relative_eq!(savings[0].relative, 0.375 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_altered_consumption_is_reported() {
        let scheme = DiscountScheme::new(1.0, 3).unwrap();
        let inst = Instance::new(
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![10.0, 10.0],
            scheme,
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap();
        // Full penalty at chi=1 and z_max=1 zeroes the customer's bill.
        let z = DiscountMatrix::from_values(
            &[vec![1.0, 1.0], vec![0.0, 0.0]],
            inst.scheme(),
        )
        .unwrap();
        assert!(matches!(
            inst.customer_savings(&z),
            Err(DspError::ZeroAlteredConsumption { customer: 0 })
        ));
    }

    #[test]
    fn discount_matrix_round_trips_through_values() {
        let s = scheme5();
        let rows = vec![vec![0.5, -0.25, 0.0], vec![-0.5, 0.25, 0.25]];
        let z = DiscountMatrix::from_values(&rows, &s).unwrap();
        assert_eq!(z.to_rows(&s), rows);
        assert_eq!(z.index(0, 1), 1);
    }

    #[test]
    fn instance_rejects_shape_and_sign_errors() {
        let s = scheme5();
        let p = PenaltyWeights::default();
        assert!(Instance::new(vec![], vec![], vec![], vec![], s, p, 1.0).is_err());
        assert!(Instance::new(
            vec![vec![1.0]],
            vec![1.0],
            vec![1.0],
            vec![1.0],
            s,
            p,
            1.0
        )
        .is_err());
        assert!(Instance::new(
            vec![vec![1.0, 2.0], vec![1.0]],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            s,
            p,
            1.0
        )
        .is_err());
        assert!(Instance::new(
            vec![vec![-1.0, 2.0]],
            vec![1.0, 2.0],
            vec![1.0],
            vec![1.0, 1.0],
            s,
            p,
            1.0
        )
        .is_err());
        assert!(Instance::new(
            vec![vec![0.0, 0.0]],
            vec![1.0, 2.0],
            vec![1.0],
            vec![1.0, 1.0],
            s,
            p,
            1.0
        )
        .is_err());
        assert!(Instance::new(
            vec![vec![1.0, 2.0]],
            vec![1.0, 2.0],
            vec![1.5],
            vec![1.0, 1.0],
            s,
            p,
            1.0
        )
        .is_err());
        assert!(Instance::new(
            vec![vec![1.0, 2.0]],
            vec![1.0, 2.0],
            vec![1.0],
            vec![0.0, 1.0],
            s,
            p,
            1.0
        )
        .is_err());
    }
}
