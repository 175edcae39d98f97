//! Risk-neutral factor dynamics and rainbow payoffs.
//!
//! Assets follow correlated geometric Brownian motion under the pricing
//! measure. All stepping is exact in log space, so time discretization
//! introduces no bias: only the exercise dates are discrete.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{domain, substream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension must be >= 1")]
    EmptyDimension,
    #[error("covariance matrix must be square ({rows}x{cols} given)")]
    NonSquareCovariance { rows: usize, cols: usize },
    #[error("covariance matrix is not symmetric at ({i},{j})")]
    AsymmetricCovariance { i: usize, j: usize },
    #[error("covariance matrix is not positive semi-definite (eigenvalue {eig})")]
    NotPositiveSemiDefinite { eig: f64 },
    #[error("spot price at index {index} must be > 0 (got {value})")]
    NonPositiveSpot { index: usize, value: f64 },
    #[error("price at index {index} must be > 0 (got {value})")]
    NonPositivePrice { index: usize, value: f64 },
    #[error("spot vector length {spots} does not match covariance dimension {dim}")]
    DimensionMismatch { spots: usize, dim: usize },
    #[error("maturity must be > 0 (got {0})")]
    NonPositiveMaturity(f64),
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("dt must be > 0 (got {0})")]
    NonPositiveDt(f64),
}

/// Relative tolerance under which a negative covariance eigenvalue is
/// treated as rounding noise and clipped to zero.
const PSD_TOL: f64 = 1e-10;

/// Risk-neutral market: rate, covariance of annualized log-returns, spots.
///
/// The covariance is stored directly (not as vols plus correlations) so the
/// positive semi-definite invariant is checked once at construction.
/// Degenerate (singular, even zero) covariance is allowed.
#[derive(Debug, Clone)]
pub struct MarketParams {
    rate: f64,
    sigma: DMatrix<f64>,
    spot: DVector<f64>,
    /// Factor L with L Lᵀ = sigma, precomputed at construction.
    factor: DMatrix<f64>,
}

impl MarketParams {
    pub fn new(rate: f64, sigma: DMatrix<f64>, spot: DVector<f64>) -> Result<Self, ModelError> {
        let d = spot.len();
        if d == 0 {
            return Err(ModelError::EmptyDimension);
        }
        if sigma.nrows() != sigma.ncols() {
            return Err(ModelError::NonSquareCovariance {
                rows: sigma.nrows(),
                cols: sigma.ncols(),
            });
        }
        if sigma.nrows() != d {
            return Err(ModelError::DimensionMismatch {
                spots: d,
                dim: sigma.nrows(),
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if sigma[(i, j)] != sigma[(j, i)] {
                    return Err(ModelError::AsymmetricCovariance { i, j });
                }
            }
        }
        for (index, &value) in spot.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::NonPositiveSpot { index, value });
            }
        }
        let factor = psd_factor(&sigma)?;
        Ok(Self {
            rate,
            sigma,
            spot,
            factor,
        })
    }

    /// Builds the covariance from per-asset vols and a correlation matrix.
    pub fn from_vols_correlation(
        rate: f64,
        vols: &[f64],
        correlation: &DMatrix<f64>,
        spot: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let d = vols.len();
        let mut sigma = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                sigma[(i, j)] = vols[i] * vols[j] * correlation[(i, j)];
            }
        }
        // symmetrize exactly: vols[i]*vols[j]*c can round differently from
        // vols[j]*vols[i]*c on some targets
        for i in 0..d {
            for j in (i + 1)..d {
                sigma[(j, i)] = sigma[(i, j)];
            }
        }
        Self::new(rate, sigma, spot)
    }

    pub fn dim(&self) -> usize {
        self.spot.len()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn spot(&self) -> &DVector<f64> {
        &self.spot
    }

    /// Natural logarithm of the spot vector.
    pub fn log_spot(&self) -> DVector<f64> {
        self.spot.map(f64::ln)
    }

    /// A factor L with L Lᵀ = sigma (not necessarily triangular).
    pub fn sigma_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
}

/// Factors a symmetric PSD matrix as L Lᵀ; Cholesky first, with an
/// eigendecomposition fallback that clips eigenvalues in
/// `[-PSD_TOL * max_eig, 0]` to zero. Rejects anything more negative.
pub(crate) fn psd_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    if let Some(chol) = sigma.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = sigma.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let floor = -PSD_TOL * max_eig.max(0.0);
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < floor {
            return Err(ModelError::NotPositiveSemiDefinite { eig: lambda });
        }
        let s = lambda.max(0.0).sqrt();
        for r in 0..scaled.nrows() {
            scaled[(r, k)] *= s;
        }
    }
    Ok(scaled)
}

/// Rainbow payoff family over the asset-price vector, all floored at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffKind {
    MinPut,
    MaxPut,
    MinCall,
    MaxCall,
    GeoMeanPut,
    GeoMeanCall,
}

#[derive(Debug, Clone, Copy)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    pub strike: f64,
}

impl PayoffSpec {
    pub fn new(kind: PayoffKind, strike: f64) -> Self {
        Self { kind, strike }
    }
}

/// Intrinsic value `max(f(K, S), 0)` of the rainbow payoff.
pub fn payoff(spec: &PayoffSpec, prices: &[f64]) -> Result<f64, ModelError> {
    for (index, &value) in prices.iter().enumerate() {
        if !(value > 0.0) {
            return Err(ModelError::NonPositivePrice { index, value });
        }
    }
    Ok(payoff_unchecked(spec, prices))
}

/// Same as [`payoff`] but skips the positivity check; used on the hot path
/// where prices come from `exp` of a finite log-state.
pub fn payoff_unchecked(spec: &PayoffSpec, prices: &[f64]) -> f64 {
    let k = spec.strike;
    let f = match spec.kind {
        PayoffKind::MinPut => k - min_price(prices),
        PayoffKind::MaxPut => k - max_price(prices),
        PayoffKind::MinCall => min_price(prices) - k,
        PayoffKind::MaxCall => max_price(prices) - k,
        PayoffKind::GeoMeanPut => k - geo_mean(prices),
        PayoffKind::GeoMeanCall => geo_mean(prices) - k,
    };
    f.max(0.0)
}

/// Payoff evaluated at a log-price state.
pub fn payoff_log(spec: &PayoffSpec, log_prices: &[f64]) -> f64 {
    // min/max commute with exp; the geometric mean is exp of the mean log.
    let k = spec.strike;
    let min = || log_prices.iter().cloned().fold(f64::INFINITY, f64::min).exp();
    let max = || log_prices.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    let geo = || (log_prices.iter().sum::<f64>() / log_prices.len() as f64).exp();
    let f = match spec.kind {
        PayoffKind::MinPut => k - min(),
        PayoffKind::MaxPut => k - max(),
        PayoffKind::MinCall => min() - k,
        PayoffKind::MaxCall => max() - k,
        PayoffKind::GeoMeanPut => k - geo(),
        PayoffKind::GeoMeanCall => geo() - k,
    };
    f.max(0.0)
}

fn min_price(prices: &[f64]) -> f64 {
    prices.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn max_price(prices: &[f64]) -> f64 {
    prices.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn geo_mean(prices: &[f64]) -> f64 {
    (prices.iter().map(|p| p.ln()).sum::<f64>() / prices.len() as f64).exp()
}

/// Uniform exercise-date grid: `steps` intervals of length `dt` up to `maturity`.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub maturity: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(maturity: f64, steps: usize) -> Result<Self, ModelError> {
        if !(maturity > 0.0) {
            return Err(ModelError::NonPositiveMaturity(maturity));
        }
        if steps == 0 {
            return Err(ModelError::ZeroSteps);
        }
        Ok(Self {
            maturity,
            steps,
            dt: maturity / steps as f64,
        })
    }
}

/// Exact moments of the log-price increment over `dt`:
/// `mean_i = (r - sigma_ii / 2) dt`, `cov = sigma * dt`.
pub fn log_step_moments(
    params: &MarketParams,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveDt(dt));
    }
    let d = params.dim();
    let mean = DVector::from_fn(d, |i, _| (params.rate - 0.5 * params.sigma[(i, i)]) * dt);
    Ok((mean, &params.sigma * dt))
}

/// One-step sampler for the exact log-price transition over a fixed `dt`.
#[derive(Debug, Clone)]
pub struct StepSampler {
    mean: DVector<f64>,
    factor_dt: DMatrix<f64>,
    dim: usize,
}

impl StepSampler {
    pub fn new(params: &MarketParams, dt: f64) -> Result<Self, ModelError> {
        let (mean, _) = log_step_moments(params, dt)?;
        Ok(Self {
            mean,
            factor_dt: params.sigma_factor() * dt.sqrt(),
            dim: params.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Advances `x` in place by one exact GBM log-step.
    pub fn step_in_place(&self, x: &mut [f64], rng: &mut ChaCha8Rng) {
        let d = self.dim;
        let mut z = vec![0.0; d];
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        self.apply(x, &z);
    }

    /// Advances `x` using the caller-provided standard normal draws `z`
    /// (or their negation for antithetic stepping).
    pub fn apply(&self, x: &mut [f64], z: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut shock = 0.0;
            for j in 0..d {
                shock += self.factor_dt[(i, j)] * z[j];
            }
            x[i] += self.mean[i] + shock;
        }
    }
}

/// Simulated price paths, `n_paths x (steps + 1) x dim`, `path[.][0] = spot`.
#[derive(Debug, Clone)]
pub struct PathSet {
    data: Vec<f64>,
    n_paths: usize,
    n_states: usize,
    dim: usize,
}

impl PathSet {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Price vector of path `p` at time slice `t`.
    pub fn state(&self, p: usize, t: usize) -> &[f64] {
        let base = (p * self.n_states + t) * self.dim;
        &self.data[base..base + self.dim]
    }
}

/// Simulates `n_paths` exact GBM paths on the time grid.
///
/// Path `p` consumes the substream keyed by `(seed, p)` only, so output is
/// bit-identical for a fixed seed under any worker count.
pub fn simulate_paths(
    params: &MarketParams,
    tg: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet, ModelError> {
    let sampler = StepSampler::new(params, tg.dt)?;
    let d = params.dim();
    let n_states = tg.steps + 1;
    let log_spot: Vec<f64> = params.log_spot().iter().cloned().collect();

    let mut data = vec![0.0_f64; n_paths * n_states * d];
    data.par_chunks_mut(n_states * d)
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut rng = substream(seed, &[domain::PATH_SIM, p as u64]);
            let mut x = log_spot.clone();
            for i in 0..d {
                chunk[i] = x[i].exp();
            }
            for t in 1..n_states {
                sampler.step_in_place(&mut x, &mut rng);
                for i in 0..d {
                    chunk[t * d + i] = x[i].exp();
                }
            }
        });

    Ok(PathSet {
        data,
        n_paths,
        n_states,
        dim: d,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn diag_market(rate: f64, vars: &[f64], spots: &[f64]) -> MarketParams {
        let d = vars.len();
        let sigma = DMatrix::from_fn(d, d, |i, j| if i == j { vars[i] } else { 0.0 });
        MarketParams::new(rate, sigma, DVector::from_row_slice(spots)).unwrap()
    }

    #[test]
    fn payoff_min_put_itm() {
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        assert_eq!(payoff(&spec, &[90.0, 110.0]).unwrap(), 10.0);
    }

    #[test]
    fn payoff_min_put_otm_floored() {
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        assert_eq!(payoff(&spec, &[120.0, 110.0]).unwrap(), 0.0);
    }

    #[test]
    fn payoff_geo_mean_at_strike() {
        let spec = PayoffSpec::new(PayoffKind::GeoMeanPut, 100.0);
        let v = payoff(&spec, &[100.0; 5]).unwrap();
        assert!(v.abs() < 1e-12, "geo mean at strike should be 0, got {v}");
    }

    #[test]
    fn payoff_rejects_non_positive_price() {
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        assert!(payoff(&spec, &[100.0, 0.0]).is_err());
        assert!(payoff(&spec, &[-1.0, 50.0]).is_err());
    }

    #[test]
    fn payoff_matches_log_form() {
        let spec = PayoffSpec::new(PayoffKind::GeoMeanCall, 95.0);
        let prices = [80.0_f64, 123.0, 101.5];
        let logs: Vec<f64> = prices.iter().map(|p| p.ln()).collect();
        assert_relative_eq!(
            payoff(&spec, &prices).unwrap(),
            payoff_log(&spec, &logs),
            epsilon = 1e-12
        );
    }

    #[test]
    fn min_put_monotone_in_each_asset() {
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let base = payoff(&spec, &[95.0, 105.0]).unwrap();
        assert!(payoff(&spec, &[96.0, 105.0]).unwrap() <= base);
        assert!(payoff(&spec, &[95.0, 106.0]).unwrap() <= base);
        let call = PayoffSpec::new(PayoffKind::MinCall, 100.0);
        let cb = payoff(&call, &[95.0, 105.0]).unwrap();
        assert!(payoff(&call, &[96.0, 105.0]).unwrap() >= cb);
    }

    #[test]
    fn moments_match_direct_formula() {
        let params = diag_market(0.05, &[0.04], &[100.0]);
        let (mean, cov) = log_step_moments(&params, 1.0).unwrap();
        assert_relative_eq!(mean[0], 0.03, epsilon = 1e-15);
        assert_relative_eq!(cov[(0, 0)], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn moments_vanish_as_dt_vanishes() {
        let params = diag_market(0.05, &[0.04], &[100.0]);
        let (mean, cov) = log_step_moments(&params, 1e-8).unwrap();
        assert!(mean[0].abs() < 1e-9);
        assert!(cov[(0, 0)].abs() < 1e-9);
        assert!(log_step_moments(&params, 0.0).is_err());
    }

    #[test]
    fn moments_scale_off_diagonal() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.02, 0.02, 0.04]);
        let params =
            MarketParams::new(0.0, sigma, DVector::from_row_slice(&[100.0, 100.0])).unwrap();
        let (_, cov) = log_step_moments(&params, 0.5).unwrap();
        assert_relative_eq!(cov[(0, 1)], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn moments_linear_in_dt() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.09, -0.01, -0.01, 0.04]);
        let params =
            MarketParams::new(0.03, sigma, DVector::from_row_slice(&[50.0, 80.0])).unwrap();
        let (m1, c1) = log_step_moments(&params, 0.25).unwrap();
        let (m2, c2) = log_step_moments(&params, 0.5).unwrap();
        assert_relative_eq!(m2[0], 2.0 * m1[0], epsilon = 1e-14);
        assert_relative_eq!(m2[1], 2.0 * m1[1], epsilon = 1e-14);
        assert_relative_eq!(c2[(0, 1)], 2.0 * c1[(0, 1)], epsilon = 1e-14);
    }

    #[test]
    fn rejects_asymmetric_and_non_psd() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.04, 0.021, 0.02, 0.04]);
        assert!(MarketParams::new(0.0, asym, DVector::from_row_slice(&[1.0, 1.0])).is_err());
        // correlation -1.5 equivalent: eigenvalue clearly negative
        let npsd = DMatrix::from_row_slice(2, 2, &[0.04, 0.06, 0.06, 0.04]);
        assert!(matches!(
            MarketParams::new(0.0, npsd, DVector::from_row_slice(&[1.0, 1.0])),
            Err(ModelError::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn zero_vol_paths_are_deterministic_forwards() {
        let params = diag_market(0.05, &[0.0, 0.0], &[100.0, 80.0]);
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let paths = simulate_paths(&params, &tg, 3, 7).unwrap();
        for p in 0..3 {
            for t in 0..=4 {
                let time = t as f64 * tg.dt;
                let s = paths.state(p, t);
                assert_relative_eq!(s[0], 100.0 * (0.05 * time).exp(), epsilon = 1e-10);
                assert_relative_eq!(s[1], 80.0 * (0.05 * time).exp(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn equal_seeds_give_identical_paths() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let params =
            MarketParams::new(0.02, sigma, DVector::from_row_slice(&[100.0, 90.0])).unwrap();
        let tg = TimeGrid::new(0.5, 3).unwrap();
        let a = simulate_paths(&params, &tg, 20, 99).unwrap();
        let b = simulate_paths(&params, &tg, 20, 99).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_paths(&params, &tg, 20, 100).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn discounted_price_is_martingale() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.018, 0.018, 0.09]);
        let params =
            MarketParams::new(0.05, sigma, DVector::from_row_slice(&[100.0, 90.0])).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let n = 200_000;
        let paths = simulate_paths(&params, &tg, n, 2024).unwrap();
        let disc = (-params.rate() * tg.maturity).exp();
        for i in 0..2 {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for p in 0..n {
                let v = disc * paths.state(p, tg.steps)[i];
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let var = (sum_sq - sum * sum / n as f64) / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            let err = (mean - params.spot()[i]).abs();
            assert!(
                err <= 3.0 * se,
                "asset {i}: |{mean} - {}| = {err} > 3 se = {}",
                params.spot()[i],
                3.0 * se
            );
        }
    }
}
