//! Multi-asset American/European option pricing on irregular grids.
//!
//! The engine carries the continuation value backward through time as an
//! adaptively fitted Gaussian mixture instead of a table on a regular
//! lattice, which keeps the grid size manageable in several dimensions.
//!
//! Module map:
//!
//! - [`model`] — risk-neutral dynamics, rainbow payoffs, path simulation
//! - [`gridgen`] — Sobol grids mapped through a Gaussian transform
//! - [`approx`] — Gaussian-mixture function approximation (relaxed greedy)
//! - [`lattice`] — the backward-induction pricer itself
//! - [`bounds`] — Monte Carlo lower bound and duality upper bound
//! - [`baselines`] — analytic, Monte Carlo, LSMC and binomial references

pub mod approx;
pub mod baselines;
pub mod bounds;
pub mod gridgen;
pub mod lattice;
pub mod model;
pub mod rng;

pub use approx::{FitConfig, FitReport, FittedSurface, GaussianMixture, GaussianTerm, RgaMode};
pub use bounds::{BoundsConfig, BoundsResult};
pub use gridgen::{Grid, SobolConfig};
pub use lattice::{DescendantScheme, ExerciseStyle, PriceResult, PricerConfig, Propagation};
pub use model::{MarketParams, PayoffKind, PayoffSpec, TimeGrid};
