//! Discount scheduling for CO2-aware load shifting.
//!
//! An energy provider assigns each customer a discrete price incentive per
//! timestep (a discount or a penalty drawn from a symmetric grid). Customers
//! respond linearly to the incentive, which shifts consumption toward
//! low-emission periods subject to budget-neutrality and grid power limits.
//!
//! The crate provides:
//! - the problem model: instances, discount grids, objective, constraints
//!   and customer savings ([`model`]);
//! - a binary integer encoding of the discount grid ([`encoding`]);
//! - a sparse QUBO type with exhaustive, annealing and random sub-solvers
//!   behind one contract ([`qubo`]);
//! - an exact solver for the aggregated continuous relaxation, which yields
//!   the per-timestep effective discount profile and an emissions lower
//!   bound ([`relaxation`]);
//! - the chunked decomposition pipeline that tracks the relaxation profile
//!   with discrete per-customer discounts ([`decomposition`]);
//! - a deterministic post-processing pass that restores per-timestep power
//!   feasibility and tightens tracking errors ([`postprocess`]);
//! - evaluation metrics ([`metrics`]), a synthetic instance generator
//!   ([`datagen`]), whole-problem baselines ([`baseline`]) and file formats
//!   ([`io`]).

pub mod baseline;
pub mod datagen;
pub mod decomposition;
pub mod encoding;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod qubo;
pub mod relaxation;

pub use error::{DspError, Result};
pub use model::{
    Aggregates, DiscountMatrix, DiscountScheme, FeasibilityReport, Instance,
    NormalizationConstants, PenaltyWeights,
};
