//! Monte Carlo bounds around a priced surface stack.
//!
//! Lower bound: exercise along simulated paths the first time the payoff
//! is positive and at least the fitted continuation value — any stopping
//! rule prices below the true optimum.
//!
//! Upper bound: duality with the martingale part of the discounted
//! process `Vbar(x,t) = e^{-rt} max(Vhat(x,t), payoff(x))`. The martingale
//! increments are `Vbar(x_{t+1}) - E_t[Vbar(x_{t+1})]` with the
//! conditional expectation estimated by nested one-step simulation, which
//! biases the bound upward (the conservative side).

use rayon::prelude::*;
use thiserror::Error;

use crate::lattice::{ExerciseStyle, PriceResult};
use crate::model::{payoff_log, MarketParams, ModelError, PayoffSpec, StepSampler, TimeGrid};
use crate::rng::{domain, substream};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bounds config: {0}")]
    BadConfig(String),
    #[error("surface stack covers {have} slices but the time grid has {need}")]
    SurfaceMismatch { have: usize, need: usize },
}

#[derive(Debug, Clone)]
pub struct BoundsConfig {
    pub n_paths_lower: usize,
    pub n_paths_outer: usize,
    pub n_inner: usize,
    pub seed: u64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            n_paths_lower: 20_000,
            n_paths_outer: 2_000,
            n_inner: 64,
            seed: 0,
        }
    }
}

impl BoundsConfig {
    fn validate(&self) -> Result<(), BoundsError> {
        if self.n_paths_lower == 0 || self.n_paths_outer == 0 {
            return Err(BoundsError::BadConfig("path counts must be >= 1".into()));
        }
        if self.n_inner < 2 {
            return Err(BoundsError::BadConfig(format!(
                "n_inner must be >= 2 (got {})",
                self.n_inner
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundsResult {
    pub v_lower: f64,
    pub se_lower: f64,
    pub v_upper: f64,
    pub se_upper: f64,
    pub gap: f64,
}

/// Upper bound plus the martingale diagnostic: the mean and standard error
/// of all discounted increments, which should be 0 for a true martingale.
#[derive(Debug, Clone, Copy)]
pub struct UpperBoundDetail {
    pub v_upper: f64,
    pub se_upper: f64,
    pub increment_mean: f64,
    pub increment_se: f64,
}

fn check_surfaces(result: &PriceResult, tg: &TimeGrid) -> Result<(), BoundsError> {
    if result.surfaces.len() != tg.steps {
        return Err(BoundsError::SurfaceMismatch {
            have: result.surfaces.len(),
            need: tg.steps,
        });
    }
    Ok(())
}

/// `e^{-rt} max(Vhat, payoff)` at slice `t`, terminal slice pays off only.
#[inline]
fn v_bar(result: &PriceResult, x_log: &[f64], t: usize, disc_t: f64) -> f64 {
    let steps = result.steps();
    let pay = payoff_log(&result.spec, x_log);
    if t >= steps {
        disc_t * pay
    } else {
        disc_t * result.continuation(x_log, t).max(pay)
    }
}

/// Stopping-rule Monte Carlo lower bound.
///
/// A path exercises at the first slice where the payoff is positive and
/// not below the fitted continuation value; the payoff-positive guard
/// keeps worthless options alive. European-style results collapse to
/// terminal exercise.
pub fn lower_bound(
    result: &PriceResult,
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    cfg: &BoundsConfig,
) -> Result<(f64, f64), BoundsError> {
    cfg.validate()?;
    check_surfaces(result, tg)?;
    let d = params.dim();
    let steps = tg.steps;
    let dt = tg.dt;
    let rate = params.rate();
    let american = result.style == ExerciseStyle::American;
    let x0: Vec<f64> = params.log_spot().iter().cloned().collect();

    if american {
        // the rule applies at time zero too: the decision is deterministic
        // (exact prices here, not the log round-trip)
        let spot: Vec<f64> = params.spot().iter().cloned().collect();
        let pay0 = crate::model::payoff_unchecked(spec, &spot);
        if pay0 > 0.0 && pay0 >= result.continuation(&x0, 0) {
            return Ok((pay0, 0.0));
        }
    }

    let sampler = StepSampler::new(params, dt)?;
    let n = cfg.n_paths_lower;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(cfg.seed, &[domain::LOWER_BOUND, p as u64]);
            let mut x = x0.clone();
            for t in 1..=steps {
                sampler.step_in_place(&mut x, &mut rng);
                let pay = payoff_log(spec, &x);
                if t == steps {
                    return (-rate * tg.maturity).exp() * pay;
                }
                if american && pay > 0.0 && pay >= result.continuation(&x, t) {
                    return (-rate * t as f64 * dt).exp() * pay;
                }
            }
            unreachable!("loop returns at the terminal slice");
        })
        .collect();
    let _ = d;
    Ok(mean_se(&values))
}

/// Discounted martingale distillation along one path of log-states
/// (`(steps+1) * d` flat), returning `e^{-rt} M_t` for every slice.
///
/// `M_0 = max(Vhat(x_0,0), payoff(x_0))`; each increment is
/// `Vbar(x_{t+1}, t+1) - E_t[Vbar(x_{t+1}, t+1)]` with the conditional
/// expectation from `n_inner` one-step simulations keyed by
/// `(seed, stream_id, slice)`.
pub fn martingale_path(
    result: &PriceResult,
    params: &MarketParams,
    path_log: &[f64],
    n_inner: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Vec<f64>, BoundsError> {
    let tg = result.time_grid;
    check_surfaces(result, &tg)?;
    if n_inner == 0 {
        return Err(BoundsError::BadConfig("n_inner must be >= 1".into()));
    }
    let d = params.dim();
    let steps = tg.steps;
    debug_assert_eq!(path_log.len(), (steps + 1) * d);
    let sampler = StepSampler::new(params, tg.dt)?;
    let rate = params.rate();

    let mut m = Vec::with_capacity(steps + 1);
    let mut m_t = v_bar(result, &path_log[..d], 0, 1.0);
    m.push(m_t);
    let mut inner_state = vec![0.0; d];
    for t in 0..steps {
        let x_t = &path_log[t * d..(t + 1) * d];
        let x_next = &path_log[(t + 1) * d..(t + 2) * d];
        let disc_next = (-rate * (t + 1) as f64 * tg.dt).exp();
        let mut rng = substream(seed, &[domain::INNER_SIM, stream_id, t as u64]);
        let mut expectation = 0.0;
        for _ in 0..n_inner {
            inner_state.copy_from_slice(x_t);
            sampler.step_in_place(&mut inner_state, &mut rng);
            expectation += v_bar(result, &inner_state, t + 1, disc_next);
        }
        expectation /= n_inner as f64;
        m_t += v_bar(result, x_next, t + 1, disc_next) - expectation;
        m.push(m_t);
    }
    Ok(m)
}

/// Duality upper bound: `mean over outer paths of
/// max_t [e^{-rt} payoff(x_t) - (e^{-rt} M_t - M_0)]`.
pub fn upper_bound(
    result: &PriceResult,
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    cfg: &BoundsConfig,
) -> Result<(f64, f64), BoundsError> {
    let detail = upper_bound_detailed(result, params, spec, tg, cfg)?;
    Ok((detail.v_upper, detail.se_upper))
}

pub fn upper_bound_detailed(
    result: &PriceResult,
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    cfg: &BoundsConfig,
) -> Result<UpperBoundDetail, BoundsError> {
    cfg.validate()?;
    check_surfaces(result, tg)?;
    let d = params.dim();
    let steps = tg.steps;
    let dt = tg.dt;
    let rate = params.rate();
    let sampler = StepSampler::new(params, dt)?;
    let x0: Vec<f64> = params.log_spot().iter().cloned().collect();

    struct PathOut {
        sup: f64,
        incr_sum: f64,
        incr_sq: f64,
    }

    let outs: Vec<Result<PathOut, BoundsError>> = (0..cfg.n_paths_outer)
        .into_par_iter()
        .map(|p| {
            // simulate the outer path in log space
            let mut path = vec![0.0; (steps + 1) * d];
            path[..d].copy_from_slice(&x0);
            let mut rng = substream(cfg.seed, &[domain::OUTER_PATH, p as u64]);
            for t in 1..=steps {
                let (lo, hi) = ((t - 1) * d, t * d);
                let (prev, cur) = path.split_at_mut(hi);
                cur[..d].copy_from_slice(&prev[lo..lo + d]);
                sampler.step_in_place(&mut cur[..d], &mut rng);
            }
            let m = martingale_path(result, params, &path, cfg.n_inner, cfg.seed, p as u64)?;
            let m0 = m[0];
            let mut sup = f64::NEG_INFINITY;
            for t in 0..=steps {
                let disc_t = (-rate * t as f64 * dt).exp();
                let pay = payoff_log(spec, &path[t * d..(t + 1) * d]);
                sup = sup.max(disc_t * pay - (m[t] - m0));
            }
            let mut incr_sum = 0.0;
            let mut incr_sq = 0.0;
            for w in m.windows(2) {
                let inc = w[1] - w[0];
                incr_sum += inc;
                incr_sq += inc * inc;
            }
            Ok(PathOut {
                sup,
                incr_sum,
                incr_sq,
            })
        })
        .collect();

    let mut sups = Vec::with_capacity(cfg.n_paths_outer);
    let mut incr_sum = 0.0;
    let mut incr_sq = 0.0;
    for o in outs {
        let o = o?;
        sups.push(o.sup);
        incr_sum += o.incr_sum;
        incr_sq += o.incr_sq;
    }
    let (v_upper, se_upper) = mean_se(&sups);
    let n_incr = (cfg.n_paths_outer * steps) as f64;
    let incr_mean = incr_sum / n_incr;
    let incr_var = (incr_sq - incr_sum * incr_sum / n_incr) / (n_incr - 1.0).max(1.0);
    Ok(UpperBoundDetail {
        v_upper,
        se_upper,
        increment_mean: incr_mean,
        increment_se: (incr_var.max(0.0) / n_incr).sqrt(),
    })
}

/// Lower and upper bounds in one call.
pub fn bounds(
    result: &PriceResult,
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    cfg: &BoundsConfig,
) -> Result<BoundsResult, BoundsError> {
    let (v_lower, se_lower) = lower_bound(result, params, spec, tg, cfg)?;
    let (v_upper, se_upper) = upper_bound(result, params, spec, tg, cfg)?;
    Ok(BoundsResult {
        v_lower,
        se_lower,
        v_upper,
        se_upper,
        gap: v_upper - v_lower,
    })
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::FitConfig;
    use crate::gridgen::{build_grid, split, SobolConfig};
    use crate::lattice::{backward_induct, PricerConfig};
    use crate::model::{MarketParams, PayoffKind, PayoffSpec, TimeGrid};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn market_2d() -> MarketParams {
        MarketParams::from_vols_correlation(
            0.05,
            &[0.2, 0.3],
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            DVector::from_row_slice(&[100.0, 100.0]),
        )
        .unwrap()
    }

    fn priced(
        params: &MarketParams,
        spec: &PayoffSpec,
        tg: &TimeGrid,
        style: crate::lattice::ExerciseStyle,
        n_grid: usize,
    ) -> PriceResult {
        let grid = build_grid(params, tg.maturity, 1.5, n_grid, &SobolConfig::new(params.dim()))
            .unwrap();
        let grid = split(&grid, 0.2, 1).unwrap();
        let cfg = PricerConfig {
            style,
            fit: FitConfig {
                max_terms: 40,
                seed: 2,
                ..FitConfig::default()
            },
            seed: 5,
            ..PricerConfig::default()
        };
        backward_induct(params, spec, tg, &grid, &cfg).unwrap()
    }

    #[test]
    fn deep_itm_exercises_at_time_zero() {
        // low vol and a high rate: waiting forfeits interest on the strike
        let params = MarketParams::from_vols_correlation(
            0.10,
            &[0.05, 0.05],
            &DMatrix::identity(2, 2),
            DVector::from_row_slice(&[100.0, 100.0]),
        )
        .unwrap();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 300.0);
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::American, 512);
        let (v, se) = lower_bound(&result, &params, &spec, &tg, &BoundsConfig::default()).unwrap();
        assert_eq!(v, 200.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn european_rule_collapses_to_terminal_mc() {
        let params = market_2d();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::European, 512);
        let cfg = BoundsConfig {
            n_paths_lower: 100_000,
            seed: 3,
            ..BoundsConfig::default()
        };
        let (v, se) = lower_bound(&result, &params, &spec, &tg, &cfg).unwrap();

        // terminal Monte Carlo with the same dynamics
        let sampler = StepSampler::new(&params, tg.dt).unwrap();
        let mut sum = 0.0;
        let n = 100_000;
        let mut rng = substream(77, &[0]);
        let x0: Vec<f64> = params.log_spot().iter().cloned().collect();
        for _ in 0..n {
            let mut x = x0.clone();
            sampler.step_in_place(&mut x, &mut rng);
            sampler.step_in_place(&mut x, &mut rng);
            sum += (-params.rate() * tg.maturity).exp() * payoff_log(&spec, &x);
        }
        let mc = sum / n as f64;
        assert!(
            (v - mc).abs() <= 4.0 * se.max(0.02),
            "lower bound {v} vs terminal MC {mc}"
        );
    }

    #[test]
    fn martingale_is_flat_for_degenerate_dynamics() {
        // zero vol, zero rate: the state never moves and Vbar is constant
        let params = crate::model::tests::diag_market(0.0, &[0.0, 0.0], &[90.0, 120.0]);
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::American, 64);
        let d = 2;
        let x0: Vec<f64> = params.log_spot().iter().cloned().collect();
        let mut path = vec![0.0; (tg.steps + 1) * d];
        for t in 0..=tg.steps {
            path[t * d..(t + 1) * d].copy_from_slice(&x0);
        }
        let m = martingale_path(&result, &params, &path, 1, 0, 0).unwrap();
        for &mt in &m {
            assert_relative_eq!(mt, m[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn martingale_increments_center_on_zero() {
        let params = market_2d();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::American, 1024);
        let cfg = BoundsConfig {
            n_paths_outer: 400,
            n_inner: 32,
            seed: 11,
            ..BoundsConfig::default()
        };
        let detail = upper_bound_detailed(&result, &params, &spec, &tg, &cfg).unwrap();
        assert!(
            detail.increment_mean.abs() <= 3.0 * detail.increment_se,
            "increment mean {} vs se {}",
            detail.increment_mean,
            detail.increment_se
        );
    }

    #[test]
    fn bounds_bracket_each_other() {
        let params = market_2d();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::American, 1024);
        let cfg = BoundsConfig {
            n_paths_lower: 20_000,
            n_paths_outer: 500,
            n_inner: 32,
            seed: 7,
        };
        let b = bounds(&result, &params, &spec, &tg, &cfg).unwrap();
        assert!(
            b.v_lower - 3.0 * b.se_lower <= b.v_upper + 3.0 * b.se_upper,
            "lower {} upper {}",
            b.v_lower,
            b.v_upper
        );
        assert!(b.v_lower > 0.0);
        assert_relative_eq!(b.gap, b.v_upper - b.v_lower, epsilon = 1e-14);
        // the pricer's value should sit inside the (noise-padded) sandwich
        assert!(result.value0 >= b.v_lower - 3.0 * b.se_lower - 0.2);
        assert!(result.value0 <= b.v_upper + 3.0 * b.se_upper + 0.2);
    }

    #[test]
    fn config_validation() {
        let cfg = BoundsConfig {
            n_inner: 1,
            ..BoundsConfig::default()
        };
        let params = market_2d();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let result = priced(&params, &spec, &tg, crate::lattice::ExerciseStyle::American, 64);
        assert!(matches!(
            lower_bound(&result, &params, &spec, &tg, &cfg),
            Err(BoundsError::BadConfig(_))
        ));
    }
}
