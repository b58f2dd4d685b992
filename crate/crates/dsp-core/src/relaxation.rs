//! Aggregated continuous relaxation and its exact solver.
//!
//! Summing the consumption response over customers collapses the problem
//! onto one effective discount per timestep. Minimizing emissions over
//! that profile, subject to the power band, the grid bound and overall
//! budget neutrality, is a box-constrained linear program with a single
//! coupling equality. In the shifted variable `u_t = D~_t * zeta_t` the
//! optimum has threshold structure: u sits at its upper box bound where
//! intensity is above a cut level, at its lower bound below it, with at
//! most the boundary timesteps interior. The solver builds that structure
//! directly and certifies it on every solve.
//!
//! The achieved objective is a true lower bound on the emissions of every
//! discrete assignment whose weighted budget sum is zero, which is what
//! makes the profile a reference for solution quality.

use crate::error::{DspError, Result};
use crate::model::{DiscountMatrix, Instance};

/// Optimal per-timestep effective discounts with the certificate data.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveDiscountProfile {
    zeta: Vec<f64>,
    shifted: Vec<f64>,
    achieved_emissions: f64,
    threshold: f64,
}

impl EffectiveDiscountProfile {
    /// Effective discount per timestep, each within the grid bound.
    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// Shifted load per timestep: `u_t = D~_t * zeta_t`.
    pub fn shifted_load(&self) -> &[f64] {
        &self.shifted
    }

    /// Emissions attained by the profile.
    pub fn achieved_emissions(&self) -> f64 {
        self.achieved_emissions
    }

    /// The certified cut level on intensity.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Effective discount profile realized by a discrete assignment:
/// `zeta_t = sum_c chi_c z_{c,t} d_{c,t} / D~_t`.
pub fn effective_discount(instance: &Instance, z: &DiscountMatrix) -> Result<Vec<f64>> {
    let mutable = instance.mutable_timestep_totals();
    if let Some(t) = mutable.iter().position(|&m| m <= 0.0) {
        return Err(DspError::ZeroMutableConsumption { timestep: t });
    }
    let z_max = instance.scheme().z_max();
    let mut zeta = vec![0.0; instance.n_timesteps()];
    for c in 0..instance.n_customers() {
        let chi = instance.elasticity()[c];
        for (t, z_t) in zeta.iter_mut().enumerate() {
            *z_t += chi * z.value(c, t, instance.scheme()) * instance.consumption(c, t);
        }
    }
    for (t, z_t) in zeta.iter_mut().enumerate() {
        // A weighted mean of grid values; clamping only strips ulp noise.
        *z_t = (*z_t / mutable[t]).clamp(-z_max, z_max);
    }
    Ok(zeta)
}

/// Solves the relaxation exactly.
pub fn solve_global(instance: &Instance) -> Result<EffectiveDiscountProfile> {
    let mutable = instance.mutable_timestep_totals();
    if let Some(t) = mutable.iter().position(|&m| m <= 0.0) {
        return Err(DspError::ZeroMutableConsumption { timestep: t });
    }
    let z_max = instance.scheme().z_max();
    let bounds: Vec<f64> = instance
        .power_bound()
        .iter()
        .zip(mutable)
        .map(|(&dp, &dm)| dp.min(z_max * dm))
        .collect();
    let (shifted, threshold) = maximize_shift(instance.intensity(), &bounds);
    certify_threshold(instance.intensity(), &bounds, &shifted, threshold);

    let mut achieved = 0.0;
    let mut zeta = vec![0.0; instance.n_timesteps()];
    for t in 0..instance.n_timesteps() {
        achieved += instance.intensity()[t] * (instance.timestep_totals()[t] - shifted[t]);
        zeta[t] = (shifted[t] / mutable[t]).clamp(-z_max, z_max);
    }
    Ok(EffectiveDiscountProfile { zeta, shifted, achieved_emissions: achieved, threshold })
}

/// Maximizes `sum_t I_t u_t` over `|u_t| <= b_t`, `sum_t u_t = 0`.
///
/// All coordinates start at their lower bound; walking timesteps in order
/// of decreasing intensity (stable on ties) raises coordinates to their
/// upper bound until the equality is met, leaving at most one interior
/// coordinate. Returns the solution and the cut level.
fn maximize_shift(intensity: &[f64], bounds: &[f64]) -> (Vec<f64>, f64) {
    let n = intensity.len();
    let lo = intensity.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = intensity.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        // Flat objective: every feasible point is optimal, return rest.
        return (vec![0.0; n], lo);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| intensity[b].partial_cmp(&intensity[a]).unwrap());
    let mut u: Vec<f64> = bounds.iter().map(|&b| -b).collect();
    let mut need: f64 = bounds.iter().sum();
    let mut threshold = intensity[order[0]];
    for &t in &order {
        if need <= 0.0 {
            break;
        }
        let add = (2.0 * bounds[t]).min(need);
        u[t] += add;
        need -= add;
        threshold = intensity[t];
    }
    (u, threshold)
}

/// Exchange-optimality certificate, checked on every solve: above the cut
/// the solution is at its upper bound, below it at its lower bound, and
/// only timesteps on the cut may be interior; the equality holds to
/// rounding.
fn certify_threshold(intensity: &[f64], bounds: &[f64], u: &[f64], threshold: f64) {
    let mut total = 0.0;
    let mut scale = 0.0;
    for t in 0..u.len() {
        total += u[t];
        scale += bounds[t];
        let tol = 1e-12 * (1.0 + bounds[t]);
        if intensity[t] > threshold {
            assert!(
                (u[t] - bounds[t]).abs() <= tol,
                "timestep {t} above the cut is not at its upper bound"
            );
        } else if intensity[t] < threshold {
            assert!(
                (u[t] + bounds[t]).abs() <= tol,
                "timestep {t} below the cut is not at its lower bound"
            );
        } else {
            assert!(u[t].abs() <= bounds[t] + tol, "timestep {t} violates its box");
        }
    }
    assert!(
        total.abs() <= 1e-9 * (1.0 + scale),
        "shifted load does not balance: residual {total}"
    );
}

/// True if the profile's emissions are a lower bound for the assignment,
/// up to `1e-9` of the baseline. Holds for every assignment whose
/// weighted budget sum is zero and whose power band is respected.
pub fn verify_lower_bound(
    instance: &Instance,
    profile: &EffectiveDiscountProfile,
    z: &DiscountMatrix,
) -> bool {
    instance.emissions(z) >= profile.achieved_emissions - 1e-9 * instance.baseline_emissions()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscountScheme, PenaltyWeights};
    use approx::assert_relative_eq;

    fn instance(
        d: Vec<Vec<f64>>,
        intensity: Vec<f64>,
        chi: Vec<f64>,
        dp: Vec<f64>,
    ) -> Instance {
        Instance::new(
            d,
            intensity,
            chi,
            dp,
            DiscountScheme::new(0.5, 5).unwrap(),
            PenaltyWeights::default(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn two_step_solution_shifts_toward_low_intensity() {
        let inst = instance(
            vec![vec![2.0, 2.0]],
            vec![1.0, 3.0],
            vec![1.0],
            vec![0.5, 0.5],
        );
        let profile = solve_global(&inst).unwrap();
        assert_eq!(profile.shifted_load(), &[-0.5, 0.5]);
        assert_eq!(profile.zeta(), &[-0.25, 0.25]);
        // E = 1*(2+0.5) + 3*(2-0.5) = 7.
        assert_relative_eq!(profile.achieved_emissions(), 7.0, max_relative = 1e-12);
        assert_relative_eq!(profile.threshold(), 3.0);
    }

    #[test]
    fn interior_coordinate_lands_on_the_cut() {
        // b = [1, 1, 1]: the top timestep flips fully, the middle one
        // absorbs the remainder and sits strictly inside its box.
        let inst = instance(
            vec![vec![2.0, 2.0, 2.0]],
            vec![1.0, 2.0, 3.0],
            vec![1.0],
            vec![1.0, 1.0, 1.0],
        );
        let profile = solve_global(&inst).unwrap();
        assert_eq!(profile.shifted_load(), &[-1.0, 0.0, 1.0]);
        assert_relative_eq!(profile.threshold(), 2.0);
        let total: f64 = profile.shifted_load().iter().sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn intensity_ties_resolve_by_timestep_index() {
        let inst = instance(
            vec![vec![2.0, 2.0, 2.0, 2.0]],
            vec![3.0, 3.0, 1.0, 1.0],
            vec![1.0],
            vec![0.5, 0.5, 0.5, 0.5],
        );
        let profile = solve_global(&inst).unwrap();
        // Both high-intensity steps flip; t0 first.
        assert_eq!(profile.shifted_load(), &[0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn grid_bound_caps_the_box_when_tighter_than_power() {
        // z_max * D~ = 0.5 < dp = 5.
        let inst = instance(
            vec![vec![1.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0],
            vec![5.0, 5.0],
        );
        let profile = solve_global(&inst).unwrap();
        assert_eq!(profile.shifted_load(), &[-0.5, 0.5]);
        assert_eq!(profile.zeta(), &[-0.5, 0.5]);
    }

    #[test]
    fn zero_mutable_consumption_is_reported() {
        let inst = instance(
            vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![2.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
        );
        assert!(matches!(
            solve_global(&inst),
            Err(DspError::ZeroMutableConsumption { timestep: 1 })
        ));
        let z = DiscountMatrix::zeros(2, 2, inst.scheme()).unwrap();
        assert!(matches!(
            effective_discount(&inst, &z),
            Err(DspError::ZeroMutableConsumption { timestep: 1 })
        ));
    }

    #[test]
    fn effective_discount_of_uniform_assignment_is_uniform() {
        let inst = instance(
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![10.0, 10.0],
        );
        let z = DiscountMatrix::uniform(2, 2, 4, inst.scheme()).unwrap();
        let zeta = effective_discount(&inst, &z).unwrap();
        assert_eq!(zeta, vec![0.5, 0.5]);
    }

    #[test]
    fn effective_discount_respects_elasticity_weights() {
        // Customer 1 is half as responsive; its discount contributes half.
        let inst = instance(
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 2.0],
            vec![1.0, 0.5],
            vec![10.0, 10.0],
        );
        let z = DiscountMatrix::from_values(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            inst.scheme(),
        )
        .unwrap();
        let zeta = effective_discount(&inst, &z).unwrap();
        // (1*0.5*1 + 0.5*0.5*1) / 1.5 = 0.5.
        assert_eq!(zeta, vec![0.5, 0.5]);
    }

    #[test]
    fn baseline_assignment_never_beats_the_profile() {
        let inst = instance(
            vec![vec![1.0, 2.0, 1.5], vec![2.0, 1.0, 0.5]],
            vec![2.0, 1.0, 3.0],
            vec![1.0, 1.0],
            vec![0.3, 0.3, 0.3],
        );
        let profile = solve_global(&inst).unwrap();
        let zero = DiscountMatrix::zeros(2, 3, inst.scheme()).unwrap();
        assert!(verify_lower_bound(&inst, &profile, &zero));
        assert!(profile.achieved_emissions() <= inst.baseline_emissions());
    }

    #[test]
    fn flat_intensity_rests_at_zero_shift() {
        let (u, _) = maximize_shift(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0]);
        assert_eq!(u, vec![0.0, 0.0, 0.0]);
    }
}
