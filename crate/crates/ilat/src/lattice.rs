//! Backward-induction pricing on an irregular grid.
//!
//! The value function is never tabulated: at each time slice the
//! continuation value is evaluated at every grid point (either by exact
//! analytic propagation of the previous slice's mixture or by a descendant
//! cluster average), refitted as a Gaussian mixture, and the slice value
//! becomes `max(payoff, continuation)` for American exercise.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use nalgebra::{DMatrix, DVector};

use crate::approx::{
    fit_rga_with_dictionary, ApproxError, FitConfig, FitReport, FittedSurface, GaussianMixture,
    GaussianTerm, Points,
};
use crate::gridgen::Grid;
use crate::model::{
    log_step_moments, payoff, payoff_log, MarketParams, ModelError, PayoffSpec, StepSampler,
    TimeGrid,
};
use crate::rng::{domain, stream_key, substream};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("continuation fit failed at slice {slice}: {source}")]
    FitFailed {
        slice: usize,
        #[source]
        source: ApproxError,
    },
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("grid dimension {grid} does not match market dimension {market}")]
    DimensionMismatch { grid: usize, market: usize },
    #[error("cluster propagation needs at least 2 descendants (got {0})")]
    TooFewDescendants(usize),
    #[error("antithetic descendants require an even count (got {0})")]
    OddAntithetic(usize),
    #[error("slice index {slice} out of range 0..={max}")]
    SliceOutOfRange { slice: usize, max: usize },
    #[error("descendant generation failed: {0}")]
    Descendants(String),
}

/// How continuation values at grid points are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// Push the fitted mixture through the exact backward transition
    /// integral; descendant clusters are used only where the exercise
    /// payoff is live (the max has no closed form).
    Analytic,
    /// Discounted average of the interpolated next-slice value over a
    /// cloud of simulated descendants. Reference implementation.
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescendantScheme {
    Pseudo,
    Antithetic,
    Sobol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExerciseStyle {
    American,
    European,
}

#[derive(Debug, Clone)]
pub struct PricerConfig {
    pub propagation: Propagation,
    pub n_descendants: usize,
    pub descendant_scheme: DescendantScheme,
    pub style: ExerciseStyle,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for PricerConfig {
    fn default() -> Self {
        Self {
            propagation: Propagation::Cluster,
            n_descendants: 256,
            descendant_scheme: DescendantScheme::Antithetic,
            style: ExerciseStyle::American,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Timing {
    pub continuation: Duration,
    pub fitting: Duration,
    pub total: Duration,
}

/// Priced surface stack: continuation mixtures for every interior slice
/// plus the time-zero value, so the option can be re-priced anywhere in
/// factor space without re-running the recursion.
#[derive(Debug, Clone)]
pub struct PriceResult {
    pub value0: f64,
    /// `surfaces[t]` is the continuation value at slice `t`, `t < steps`.
    pub surfaces: Vec<FittedSurface>,
    pub fit_reports: Vec<FitReport>,
    pub timing: Timing,
    pub spec: PayoffSpec,
    pub style: ExerciseStyle,
    pub time_grid: TimeGrid,
}

impl PriceResult {
    pub fn steps(&self) -> usize {
        self.time_grid.steps
    }

    /// Fitted continuation value at log-state `x` and slice `t < steps`.
    pub fn continuation(&self, x_log: &[f64], t: usize) -> f64 {
        self.surfaces[t].eval_unchecked(x_log)
    }

    /// Slice value function in log space: payoff at the terminal slice,
    /// `max(payoff, continuation)` (American) or continuation (European)
    /// at interior slices.
    pub fn value_fn_log(&self, x_log: &[f64], t: usize) -> f64 {
        let steps = self.steps();
        if t >= steps {
            return payoff_log(&self.spec, x_log);
        }
        let cont = self.continuation(x_log, t);
        match self.style {
            ExerciseStyle::American => payoff_log(&self.spec, x_log).max(cont),
            ExerciseStyle::European => cont,
        }
    }
}

/// Pushes a mixture through the exact one-step backward operator:
/// `g(z) = e^{-r dt} E[mix(z + m + xi)]` with `xi ~ N(0, sigma dt)`.
///
/// Term-by-term Gaussian convolution: covariance gains `sigma dt`, the
/// center shifts by `-m`, and the weight is rescaled to keep the
/// normalized-amplitude form. The term count is preserved.
pub fn propagate_analytic(
    mixture: &GaussianMixture,
    params: &MarketParams,
    dt: f64,
    rate: f64,
) -> Result<GaussianMixture, LatticeError> {
    let d = mixture.dim();
    let (step_mean, step_cov) = log_step_moments(params, dt)?;
    let disc = (-rate * dt).exp();
    let mut terms = Vec::with_capacity(mixture.n_terms());
    for t in mixture.terms() {
        let chol_b = t
            .precision()
            .clone()
            .cholesky()
            .ok_or(ApproxError::NotSpd)?;
        let mut det_b = 1.0;
        for i in 0..d {
            det_b *= chol_b.l_dirty()[(i, i)];
        }
        let det_b = det_b * det_b;
        let cov_new = chol_b.inverse() + &step_cov;
        let chol_new = cov_new.clone().cholesky().ok_or(ApproxError::NotSpd)?;
        let mut det_new = 1.0;
        for i in 0..d {
            det_new *= chol_new.l_dirty()[(i, i)];
        }
        let det_new = det_new * det_new;
        let mut prec_new = chol_new.inverse();
        // symmetrize rounding noise before reconstruction
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (prec_new[(i, j)] + prec_new[(j, i)]);
                prec_new[(i, j)] = s;
                prec_new[(j, i)] = s;
            }
        }
        let weight = t.weight() * disc * (det_b * det_new).powf(-0.25);
        let center = t.center() - &step_mean;
        terms.push(GaussianTerm::new(weight, prec_new, center)?);
    }
    Ok(GaussianMixture::from_terms(d, terms)?)
}

/// Draws `n` one-step descendants of the log-state `x`, flattened n x d.
///
/// `Antithetic` pairs each draw with its negation, so the empirical mean
/// equals `x + m` exactly for even `n`; `Sobol` uses a seeded-scramble
/// low-discrepancy cloud shared per call.
pub fn descendants(
    x: &[f64],
    params: &MarketParams,
    dt: f64,
    n: usize,
    scheme: DescendantScheme,
    seed: u64,
) -> Result<Vec<f64>, LatticeError> {
    if n < 2 {
        return Err(LatticeError::TooFewDescendants(n));
    }
    if scheme == DescendantScheme::Antithetic && n % 2 != 0 {
        return Err(LatticeError::OddAntithetic(n));
    }
    let sampler = StepSampler::new(params, dt)?;
    let d = params.dim();
    let mut out = vec![0.0; n * d];
    match scheme {
        DescendantScheme::Pseudo => {
            let mut rng = substream(seed, &[domain::DESCENDANTS]);
            for i in 0..n {
                let row = &mut out[i * d..(i + 1) * d];
                row.copy_from_slice(x);
                sampler.step_in_place(row, &mut rng);
            }
        }
        DescendantScheme::Antithetic => {
            let mut rng = substream(seed, &[domain::DESCENDANTS]);
            let mut z = vec![0.0; d];
            for pair in 0..n / 2 {
                for zi in z.iter_mut() {
                    *zi = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                }
                let row = &mut out[(2 * pair) * d..(2 * pair + 1) * d];
                row.copy_from_slice(x);
                sampler.apply(row, &z);
                for zi in z.iter_mut() {
                    *zi = -*zi;
                }
                let row = &mut out[(2 * pair + 1) * d..(2 * pair + 2) * d];
                row.copy_from_slice(x);
                sampler.apply(row, &z);
            }
        }
        DescendantScheme::Sobol => {
            let cfg = crate::gridgen::SobolConfig {
                dimension: d,
                skip: 1,
                scramble_seed: Some(stream_key(seed, &[domain::DESCENDANTS])),
            };
            let uniforms = crate::gridgen::sobol_sequence(&cfg, n)
                .map_err(|e| LatticeError::Descendants(e.to_string()))?;
            let mut z = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let u = uniforms[(i, j)].clamp(1e-9, 1.0 - 1e-9);
                    z[j] = crate::gridgen::inverse_normal_cdf(u)
                        .map_err(|e| LatticeError::Descendants(e.to_string()))?;
                }
                let row = &mut out[i * d..(i + 1) * d];
                row.copy_from_slice(x);
                sampler.apply(row, &z);
            }
        }
    }
    Ok(out)
}

/// Discounted average of the interpolated surface over a descendant cloud.
pub fn continuation_cluster(
    surface: &FittedSurface,
    descendants: &[f64],
    rate: f64,
    dt: f64,
) -> f64 {
    let d = surface.mixture.dim();
    let n = descendants.len() / d;
    let mean = descendants
        .chunks_exact(d)
        .map(|y| surface.eval_unchecked(y))
        .sum::<f64>()
        / n as f64;
    (-rate * dt).exp() * mean
}

/// The backward recursion: payoff at maturity, then one fitted
/// continuation surface per interior slice down to time zero.
pub fn backward_induct(
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    grid: &Grid,
    cfg: &PricerConfig,
) -> Result<PriceResult, LatticeError> {
    let total_start = Instant::now();
    let d = params.dim();
    if grid.dim() != d {
        return Err(LatticeError::DimensionMismatch {
            grid: grid.dim(),
            market: d,
        });
    }
    if cfg.propagation == Propagation::Cluster && cfg.n_descendants < 2 {
        return Err(LatticeError::TooFewDescendants(cfg.n_descendants));
    }
    if cfg.descendant_scheme == DescendantScheme::Antithetic && cfg.n_descendants % 2 != 0 {
        return Err(LatticeError::OddAntithetic(cfg.n_descendants));
    }

    let n = grid.n_points();
    let points = Points::new(grid.flat_data(), d);
    let steps = tg.steps;
    let dt = tg.dt;
    let rate = params.rate();
    let disc = (-rate * dt).exp();
    let american = cfg.style == ExerciseStyle::American;

    let mut surfaces: Vec<Option<FittedSurface>> = vec![None; steps];
    let mut reports: Vec<Option<FitReport>> = vec![None; steps];
    let mut timing = Timing::default();

    for t in (0..steps).rev() {
        let next_surface = if t + 1 < steps {
            Some(surfaces[t + 1].as_ref().expect("filled by recursion"))
        } else {
            None
        };
        // exact propagation of the next continuation mixture (no max);
        // in analytic mode it evaluates the smooth part directly, and in
        // both modes its terms seed the fit's candidate dictionary
        let propagated: Option<FittedSurface> = match next_surface {
            Some(s) => Some(FittedSurface {
                mixture: propagate_analytic(&s.mixture, params, dt, rate)?,
                offset: s.offset * disc,
            }),
            None => None,
        };
        // warm-start candidates: the continuation target is close to the
        // propagated previous surface, whose terms are known exactly
        let dictionary: Vec<(DMatrix<f64>, DVector<f64>)> = propagated
            .as_ref()
            .map(|p| {
                p.mixture
                    .terms()
                    .iter()
                    .map(|term| (term.precision().clone(), term.center().clone()))
                    .collect()
            })
            .unwrap_or_default();

        let cont_start = Instant::now();
        // the exact-propagation shortcut applies only in analytic mode;
        // cluster mode stays the pure descendant-average reference
        let analytic_eval: Option<&FittedSurface> = match cfg.propagation {
            Propagation::Analytic => propagated.as_ref(),
            Propagation::Cluster => None,
        };
        let needs_cloud = match (cfg.propagation, next_surface) {
            (Propagation::Cluster, _) => true,
            (Propagation::Analytic, None) => true,
            // analytic interior slices need clouds only to detect and
            // handle regions where the exercise payoff is live
            (Propagation::Analytic, Some(_)) => american,
        };

        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = points.point(i);
                if !needs_cloud {
                    return analytic_eval
                        .expect("analytic interior slice")
                        .eval_unchecked(x);
                }
                let cloud_seed = stream_key(cfg.seed, &[domain::DESCENDANTS, t as u64, i as u64]);
                let cloud = descendants(x, params, dt, cfg.n_descendants, cfg.descendant_scheme, cloud_seed)
                    .expect("descendant preconditions checked above");
                let n_desc = cfg.n_descendants as f64;
                match next_surface {
                    None => {
                        // terminal slice: discounted mean exercise payoff
                        let sum: f64 = cloud
                            .chunks_exact(d)
                            .map(|y| payoff_log(spec, y))
                            .sum();
                        disc * sum / n_desc
                    }
                    Some(s) => {
                        if american {
                            let mut any_itm = false;
                            let mut sum = 0.0;
                            for y in cloud.chunks_exact(d) {
                                let pay = payoff_log(spec, y);
                                any_itm |= pay > 0.0;
                                sum += pay.max(s.eval_unchecked(y));
                            }
                            match (analytic_eval, any_itm) {
                                // payoff dead across the cloud: the max is
                                // inactive, use the exact propagation
                                (Some(p), false) => p.eval_unchecked(x),
                                _ => disc * sum / n_desc,
                            }
                        } else {
                            let sum: f64 = cloud
                                .chunks_exact(d)
                                .map(|y| s.eval_unchecked(y))
                                .sum();
                            disc * sum / n_desc
                        }
                    }
                }
            })
            .collect();
        timing.continuation += cont_start.elapsed();

        let fit_start = Instant::now();
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.seed = stream_key(cfg.seed, &[domain::FIT_ROUND, t as u64, fit_cfg.seed]);
        let (surface, report) = fit_rga_with_dictionary(
            points,
            &values,
            grid.train_idx(),
            grid.val_idx(),
            &fit_cfg,
            &dictionary,
        )
        .map_err(|source| LatticeError::FitFailed { slice: t, source })?;
        timing.fitting += fit_start.elapsed();

        surfaces[t] = Some(surface);
        reports[t] = Some(report);
    }

    let surfaces: Vec<FittedSurface> = surfaces.into_iter().map(Option::unwrap).collect();
    let fit_reports: Vec<FitReport> = reports.into_iter().map(Option::unwrap).collect();

    let x0: Vec<f64> = params.log_spot().iter().cloned().collect();
    let cont0 = surfaces[0].eval_unchecked(&x0);
    let spot_prices: Vec<f64> = params.spot().iter().cloned().collect();
    let intrinsic0 = payoff(spec, &spot_prices)?;
    let value0 = if american {
        intrinsic0.max(cont0)
    } else {
        cont0
    };
    timing.total = total_start.elapsed();

    Ok(PriceResult {
        value0,
        surfaces,
        fit_reports,
        timing,
        spec: *spec,
        style: cfg.style,
        time_grid: *tg,
    })
}

/// Re-prices at an arbitrary state `(S, t_slice)` from the stored surfaces.
pub fn price_at(result: &PriceResult, prices: &[f64], t_slice: usize) -> Result<f64, LatticeError> {
    let steps = result.steps();
    if t_slice > steps {
        return Err(LatticeError::SliceOutOfRange {
            slice: t_slice,
            max: steps,
        });
    }
    let intrinsic = payoff(&result.spec, prices)?;
    if t_slice == steps {
        return Ok(intrinsic);
    }
    let x: Vec<f64> = prices.iter().map(|p| p.ln()).collect();
    let cont = result.continuation(&x, t_slice);
    Ok(match result.style {
        ExerciseStyle::American => intrinsic.max(cont),
        ExerciseStyle::European => cont,
    })
}
