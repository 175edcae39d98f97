//! Adaptive scalar-function approximation by Gaussian mixtures.
//!
//! A relaxed greedy loop grows the mixture one term per round from a
//! data-driven candidate pool; rounds are kept only when they improve the
//! mean squared error on a held-out validation set.

mod fit;
mod mixture;

pub use fit::{
    fit_rga, fit_rga_with_dictionary, propose_candidates, recombine, synthetic_target,
    theorem_rate_check, FitConfig, FitReport, FittedSurface, Points, RateCheck, RateRow,
    Recombination, RgaMode,
};
pub use mixture::{ApproxError, GaussianMixture, GaussianTerm};
