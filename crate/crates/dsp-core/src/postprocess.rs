//! Greedy per-timestep refinement of a discrete assignment.
//!
//! The refinement targets two quantities at once. Per timestep, the
//! achieved weighted contribution `p_t = sum_c chi_c d_{c,t} z_{c,t}`
//! should track its aggregated target `D~_t zeta*_t`; per customer, the
//! running budget deviation `delta_c = sum_t chi_c d_{c,t} z_{c,t}`
//! should shrink toward zero. A move swaps one discount increment up and
//! one down between two customers at the same timestep, chosen so the
//! timestep gap shrinks strictly while both customers' budget deviations
//! improve.
//!
//! Pair moves alone cannot leave the band between 0 and the target: the
//! acceptance test only fires while the contribution is short of the
//! target on the target's own side. Assignments coming out of a chunked
//! solve routinely overshoot, so a repair sweep runs first: single
//! entries step toward zero, one increment at a time, until every
//! timestep's contribution lies inside its band. Each repair step moves
//! some entry strictly toward zero, which bounds the sweep and cannot
//! stall: while the contribution is above the band some entry is
//! positive, and symmetrically below. Repair steps are logged with pass
//! number 0, pair moves with their pass number starting at 1.

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::model::{DiscountMatrix, Instance};

/// Tuning for [`post_process`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostProcessConfig {
    /// Candidate-set cutoff per side and timestep.
    pub cutoff: usize,
    /// Number of pair-move passes over all timesteps.
    pub passes: usize,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        Self { cutoff: 500, passes: 1 }
    }
}

impl PostProcessConfig {
    fn validate(&self) -> Result<()> {
        if self.cutoff < 1 {
            return Err(DspError::InvalidConfig("cutoff must be at least 1".into()));
        }
        if self.passes < 1 {
            return Err(DspError::InvalidConfig("passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One applied change. Repair steps set exactly one customer side and
/// pass 0; pair moves set both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub pass: usize,
    pub timestep: usize,
    pub customer_up: Option<usize>,
    pub customer_down: Option<usize>,
    pub eps_before: f64,
    pub eps_after: f64,
}

/// Refined assignment plus bookkeeping.
#[derive(Debug, Clone)]
pub struct PostProcessOutcome {
    pub matrix: DiscountMatrix,
    pub changes: Vec<ChangeRecord>,
    /// Final per-customer budget deviation `sum_t chi_c d_{c,t} z_{c,t}`,
    /// maintained incrementally across all applied changes.
    pub budget_deviation: Vec<f64>,
}

struct State<'a> {
    instance: &'a Instance,
    z: DiscountMatrix,
    delta: Vec<f64>,
    zeta_star: &'a [f64],
    changes: Vec<ChangeRecord>,
}

impl<'a> State<'a> {
    fn new(instance: &'a Instance, z: DiscountMatrix, zeta_star: &'a [f64]) -> Self {
        let scheme = instance.scheme();
        let mut delta = vec![0.0; instance.n_customers()];
        for (c, d) in delta.iter_mut().enumerate() {
            for t in 0..instance.n_timesteps() {
                *d += instance.elasticity()[c]
                    * instance.consumption(c, t)
                    * z.value(c, t, scheme);
            }
        }
        Self { instance, z, delta, zeta_star, changes: Vec::new() }
    }

    /// Weighted contribution step size for one grid increment.
    fn step_weight(&self, c: usize, t: usize) -> f64 {
        self.instance.elasticity()[c]
            * self.instance.consumption(c, t)
            * self.instance.scheme().step()
    }

    fn contribution(&self, t: usize) -> f64 {
        let scheme = self.instance.scheme();
        (0..self.instance.n_customers())
            .map(|c| {
                self.instance.elasticity()[c]
                    * self.instance.consumption(c, t)
                    * self.z.value(c, t, scheme)
            })
            .sum()
    }

    fn bump(&mut self, c: usize, t: usize, up: bool) {
        let idx = self.z.index(c, t);
        let next = if up { idx + 1 } else { idx - 1 };
        self.z.set_index(c, t, next);
        let w = self.step_weight(c, t);
        self.delta[c] += if up { w } else { -w };
    }

    fn band(&self, t: usize) -> (f64, f64, f64) {
        let target = self.zeta_star[t] * self.instance.mutable_timestep_totals()[t];
        let slack = 1e-9
            * self.instance.scheme().z_max()
            * self.instance.mutable_timestep_totals()[t].abs();
        (target.min(0.0), target.max(0.0), slack)
    }

    /// Steps entries toward zero until `p_t` lies inside the band. Picks,
    /// per step, a candidate that lands inside the band when one exists,
    /// then the one whose budget deviation benefits most, then the lowest
    /// index. Terminates because every step moves one entry a grid
    /// increment closer to zero.
    fn repair_timestep(&mut self, t: usize) {
        let scheme = self.instance.scheme();
        let limit = self.instance.n_customers() * scheme.n_categories() + 8;
        for _ in 0..limit {
            let (lo, hi, slack) = self.band(t);
            let p = self.contribution(t);
            let over = p > hi + slack;
            let under = p < lo - slack;
            if !over && !under {
                return;
            }
            let mut best: Option<(bool, f64, usize)> = None;
            for c in 0..self.instance.n_customers() {
                let w = self.step_weight(c, t);
                if w <= 0.0 {
                    continue;
                }
                // Over: positive entries step down. Under: negative
                // entries step up. Both directions move toward zero.
                let value = self.z.value(c, t, scheme);
                let eligible = if over { value > 0.0 } else { value < 0.0 };
                if !eligible {
                    continue;
                }
                let landed = p + if over { -w } else { w };
                let inside = landed >= lo - slack && landed <= hi + slack;
                // Higher score = better: stepping down helps customers
                // with large positive deviation, stepping up those with
                // large negative deviation.
                let gain = if over { self.delta[c] } else { -self.delta[c] };
                let cand = (inside, gain, c);
                let better = match &best {
                    None => true,
                    Some((ins, g, i)) => {
                        (cand.0, cand.1) > (*ins, *g)
                            || (cand.0, cand.1) == (*ins, *g) && c < *i
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
            let Some((_, _, c)) = best else { return };
            let eps_before = self.target_gap(t);
            self.bump(c, t, under);
            let eps_after = self.target_gap(t);
            self.changes.push(ChangeRecord {
                pass: 0,
                timestep: t,
                customer_up: under.then_some(c),
                customer_down: over.then_some(c),
                eps_before,
                eps_after,
            });
        }
        // Grids without an exact zero value can leave a narrow band
        // unreachable; the sweep gives up after its step bound instead
        // of cycling. Grids containing zero always land inside.
    }

    fn target_gap(&self, t: usize) -> f64 {
        self.zeta_star[t] * self.instance.mutable_timestep_totals()[t] - self.contribution(t)
    }

    /// One pair move at timestep `t` if the scoring rule admits one.
    fn pair_move(&mut self, t: usize, pass: usize, cutoff: usize) {
        let scheme = self.instance.scheme();
        let max_idx = scheme.max_index();
        let eps = self.target_gap(t);
        let sign = if self.zeta_star[t] < 0.0 { -1.0 } else { 1.0 };

        let mut ups: Vec<usize> = Vec::new();
        let mut downs: Vec<usize> = Vec::new();
        for c in 0..self.instance.n_customers() {
            let idx = self.z.index(c, t);
            let half = 0.5 * self.step_weight(c, t);
            if usize::from(idx) < max_idx && self.delta[c] < -half {
                ups.push(c);
            }
            if idx > 0 && self.delta[c] > half {
                downs.push(c);
            }
        }
        limit_candidates(&mut ups, &self.delta, cutoff);
        limit_candidates(&mut downs, &self.delta, cutoff);

        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &ups {
            let wa = self.step_weight(a, t);
            for &b in &downs {
                let wb = self.step_weight(b, t);
                let x = sign * (eps - (wa - wb));
                if x <= 0.0 {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bx, ba, bb)) => {
                        x < *bx || x == *bx && (a, b) < (*ba, *bb)
                    }
                };
                if better {
                    best = Some((x, a, b));
                }
            }
        }
        let Some((x, a, b)) = best else { return };
        if x >= sign * eps {
            return;
        }
        self.bump(a, t, true);
        self.bump(b, t, false);
        self.changes.push(ChangeRecord {
            pass,
            timestep: t,
            customer_up: Some(a),
            customer_down: Some(b),
            eps_before: eps,
            eps_after: self.target_gap(t),
        });
    }
}

/// Keeps the `cutoff` customers with the largest absolute budget
/// deviation, breaking ties by index.
fn limit_candidates(candidates: &mut Vec<usize>, delta: &[f64], cutoff: usize) {
    if candidates.len() <= cutoff {
        return;
    }
    candidates.sort_by(|&a, &b| {
        delta[b]
            .abs()
            .partial_cmp(&delta[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(cutoff);
    candidates.sort_unstable();
}

/// Refines `z` toward the effective-discount targets.
///
/// Runs the repair sweep once, then `config.passes` rounds of at most one
/// pair move per timestep. The result keeps every timestep's weighted
/// contribution inside the band spanned by zero and `D~_t zeta*_t`,
/// which implies the power restriction whenever the targets came from
/// the relaxation solver.
pub fn post_process(
    instance: &Instance,
    z: &DiscountMatrix,
    zeta_star: &[f64],
    config: &PostProcessConfig,
) -> Result<PostProcessOutcome> {
    config.validate()?;
    if zeta_star.len() != instance.n_timesteps() {
        return Err(DspError::LengthMismatch {
            expected: instance.n_timesteps(),
            got: zeta_star.len(),
        });
    }
    if z.n_customers() != instance.n_customers() || z.n_timesteps() != instance.n_timesteps() {
        return Err(DspError::LengthMismatch {
            expected: instance.n_customers() * instance.n_timesteps(),
            got: z.n_customers() * z.n_timesteps(),
        });
    }
    let mut state = State::new(instance, z.clone(), zeta_star);
    for t in 0..instance.n_timesteps() {
        state.repair_timestep(t);
    }
    for pass in 1..=config.passes {
        for t in 0..instance.n_timesteps() {
            state.pair_move(t, pass, config.cutoff);
        }
    }
    Ok(PostProcessOutcome {
        matrix: state.z,
        changes: state.changes,
        budget_deviation: state.delta,
    })
}

/// True when every timestep's weighted contribution lies between zero
/// and `D~_t zeta*_t` inclusive (to rounding slack). Within the band the
/// power restriction holds automatically, because the relaxation bounds
/// its targets by the power budget.
pub fn verify_power_feasibility(instance: &Instance, z: &DiscountMatrix, zeta_star: &[f64]) -> bool {
    assert_eq!(zeta_star.len(), instance.n_timesteps(), "target length mismatch");
    let scheme = instance.scheme();
    for t in 0..instance.n_timesteps() {
        let p: f64 = (0..instance.n_customers())
            .map(|c| {
                instance.elasticity()[c]
                    * instance.consumption(c, t)
                    * z.value(c, t, scheme)
            })
            .sum();
        let target = zeta_star[t] * instance.mutable_timestep_totals()[t];
        let slack =
            1e-9 * scheme.z_max() * instance.mutable_timestep_totals()[t].abs();
        if p < target.min(0.0) - slack || p > target.max(0.0) + slack {
            return false;
        }
    }
    true
}
