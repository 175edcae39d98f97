//! Independent pricing references used to validate the grid pricer:
//! the closed-form European min-option formulas, plain Monte Carlo,
//! least-squares Monte Carlo, and the geometric-average reduction to a
//! one-dimensional binomial tree.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::lattice::ExerciseStyle;
use crate::model::{
    payoff, payoff_log, simulate_paths, MarketParams, ModelError, PayoffKind, PayoffSpec,
    StepSampler, TimeGrid,
};
use crate::rng::{domain, stream_key, substream};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("correlation {0} outside [-1, 1]")]
    BadCorrelation(f64),
    #[error("formula requires exactly 2 assets (got {0})")]
    NotTwoAssets(usize),
    #[error("payoff kind is not a geometric-average option")]
    NotGeoMean,
    #[error("baseline config: {0}")]
    BadConfig(String),
}

#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Gauss-Legendre nodes/weights used by the bivariate normal quadrature.
const GL3_W: [f64; 3] = [0.1713244923791705, 0.3607615730481384, 0.4679139345726904];
const GL3_X: [f64; 3] = [0.9324695142031522, 0.6612093864662647, 0.2386191860831970];
const GL6_W: [f64; 6] = [
    0.04717533638651177,
    0.1069393259953183,
    0.1600783285433464,
    0.2031674267230659,
    0.2334925365383547,
    0.2491470458134029,
];
const GL6_X: [f64; 6] = [
    0.9815606342467191,
    0.9041172563704750,
    0.7699026741943050,
    0.5873179542866171,
    0.3678314989981802,
    0.1252334085114692,
];
const GL10_W: [f64; 10] = [
    0.01761400713915212,
    0.04060142980038694,
    0.06267204833410906,
    0.08327674157670475,
    0.1019301198172404,
    0.1181945319615184,
    0.1316886384491766,
    0.1420961093183821,
    0.1491729864726037,
    0.1527533871307259,
];
const GL10_X: [f64; 10] = [
    0.9931285991850949,
    0.9639719272779138,
    0.9122344282513259,
    0.8391169718222188,
    0.7463319064601508,
    0.6360536807265150,
    0.5108670019508271,
    0.3737060887154196,
    0.2277858511416451,
    0.07652652113349733,
];

/// Upper-orthant probability `P(X > h, Y > k)` for standard bivariate
/// normals with correlation `r`; Gauss-Legendre quadrature on the
/// tetrachoric integral with the high-correlation series of the usual
/// numerically stable decomposition.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL3_W, &GL3_X)
    } else if r.abs() < 0.75 {
        (&GL6_W, &GL6_X)
    } else {
        (&GL10_W, &GL10_X)
    };
    let h = h;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        if r.abs() > 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for i in 0..w.len() {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x[i] + 1.0) / 2.0).sin();
                    bvn += w[i] * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn = bvn * asr / (2.0 * two_pi);
        }
        bvn + normal_cdf(-h) * normal_cdf(-k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_sq = (1.0 - r) * (1.0 + r);
            let a = a_sq.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / a_sq + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp()
                    * (1.0 - c * (bs - a_sq) * (1.0 - d * bs / 5.0) / 3.0
                        + c * d * a_sq * a_sq / 5.0);
            }
            if -hk < 100.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * two_pi.sqrt()
                    * normal_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            let a = a / 2.0;
            for i in 0..w.len() {
                for is in [-1.0, 1.0] {
                    let xs = (a * (is * x[i] + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr = -(bs / xs + hk) / 2.0;
                    if asr > -100.0 {
                        bvn += a * w[i] * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn + normal_cdf(-h.max(k))
        } else {
            bvn = -bvn;
            if k > h {
                bvn += normal_cdf(k) - normal_cdf(h);
            }
            bvn
        }
    }
}

/// `P(Z1 <= a, Z2 <= b)` for standard bivariate normals with correlation
/// `rho`; absolute error below 5e-8 over the whole parameter range.
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: f64) -> Result<f64, BaselineError> {
    if !(rho.abs() <= 1.0) {
        return Err(BaselineError::BadCorrelation(rho));
    }
    Ok(bvn_upper(-a, -b, rho).clamp(0.0, 1.0))
}

/// Black-Scholes price for a single lognormal asset with continuous
/// dividend yield `div_yield`.
pub fn black_scholes_1d(
    s0: f64,
    sigma: f64,
    div_yield: f64,
    rate: f64,
    strike: f64,
    maturity: f64,
    is_call: bool,
) -> f64 {
    let df_r = (-rate * maturity).exp();
    let df_q = (-div_yield * maturity).exp();
    let vol = sigma * maturity.sqrt();
    if vol < 1e-12 || strike <= 0.0 {
        let forward = s0 * df_q / df_r;
        let intrinsic = if is_call {
            forward - strike
        } else {
            strike - forward
        };
        return df_r * intrinsic.max(0.0);
    }
    let d1 = ((s0 / strike).ln() + (rate - div_yield + 0.5 * sigma * sigma) * maturity) / vol;
    let d2 = d1 - vol;
    if is_call {
        s0 * df_q * normal_cdf(d1) - strike * df_r * normal_cdf(d2)
    } else {
        strike * df_r * normal_cdf(-d2) - s0 * df_q * normal_cdf(-d1)
    }
}

struct TwoAsset {
    s1: f64,
    s2: f64,
    v1: f64,
    v2: f64,
    rho: f64,
}

fn two_asset(params: &MarketParams) -> Result<TwoAsset, BaselineError> {
    if params.dim() != 2 {
        return Err(BaselineError::NotTwoAssets(params.dim()));
    }
    let sig = params.sigma();
    let v1 = sig[(0, 0)].max(0.0).sqrt();
    let v2 = sig[(1, 1)].max(0.0).sqrt();
    let rho = if v1 > 0.0 && v2 > 0.0 {
        (sig[(0, 1)] / (v1 * v2)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(TwoAsset {
        s1: params.spot()[0],
        s2: params.spot()[1],
        v1,
        v2,
        rho,
    })
}

/// European call on the minimum of two assets (no dividends); `strike = 0`
/// gives the value of receiving the minimum outright.
pub fn call_on_min(params: &MarketParams, strike: f64, maturity: f64) -> Result<f64, BaselineError> {
    let p = two_asset(params)?;
    let r = params.rate();
    let t = maturity;
    let sqrt_t = t.sqrt();
    let spread_var = p.v1 * p.v1 - 2.0 * p.rho * p.v1 * p.v2 + p.v2 * p.v2;
    let spread_vol = spread_var.max(0.0).sqrt();

    if p.v1 * sqrt_t < 1e-12 && p.v2 * sqrt_t < 1e-12 {
        // fully deterministic forwards
        let fwd_min = (p.s1 * (r * t).exp()).min(p.s2 * (r * t).exp());
        return Ok((-r * t).exp() * (fwd_min - strike).max(0.0));
    }
    if spread_vol * sqrt_t < 1e-12 {
        // the two assets never cross: a vanilla call on the smaller one
        let (s, v) = if p.s1 <= p.s2 {
            (p.s1, p.v1)
        } else {
            (p.s2, p.v2)
        };
        return Ok(black_scholes_1d(s, v, 0.0, r, strike, t, true));
    }

    let theta1 = ((p.s2 / p.s1).ln() - 0.5 * spread_var * t) / (spread_vol * sqrt_t);
    let theta2 = ((p.s1 / p.s2).ln() - 0.5 * spread_var * t) / (spread_vol * sqrt_t);
    if strike <= 0.0 {
        return Ok(p.s1 * normal_cdf(theta1) + p.s2 * normal_cdf(theta2));
    }
    let gamma1 = ((p.s1 / strike).ln() + (r - 0.5 * p.v1 * p.v1) * t) / (p.v1 * sqrt_t);
    let gamma2 = ((p.s2 / strike).ln() + (r - 0.5 * p.v2 * p.v2) * t) / (p.v2 * sqrt_t);
    let rho1 = (p.rho * p.v2 - p.v1) / spread_vol;
    let rho2 = (p.rho * p.v1 - p.v2) / spread_vol;

    let m1 = bivariate_normal_cdf(gamma1 + p.v1 * sqrt_t, theta1, rho1)?;
    let m2 = bivariate_normal_cdf(gamma2 + p.v2 * sqrt_t, theta2, rho2)?;
    let m3 = bivariate_normal_cdf(gamma1, gamma2, p.rho)?;
    Ok(p.s1 * m1 + p.s2 * m2 - strike * (-r * t).exp() * m3)
}

/// European put on the minimum of two assets by put-call parity on the
/// minimum: `P = K e^{-rT} - C_min(0) + C_min(K)`.
pub fn stulz_european_min_put(
    params: &MarketParams,
    strike: f64,
    maturity: f64,
) -> Result<f64, BaselineError> {
    if strike <= 0.0 {
        return Err(BaselineError::BadConfig(format!(
            "strike must be > 0 (got {strike})"
        )));
    }
    let r = params.rate();
    let receive_min = call_on_min(params, 0.0, maturity)?;
    let call_k = call_on_min(params, strike, maturity)?;
    Ok((strike * (-r * maturity).exp() - receive_min + call_k).max(0.0))
}

/// Terminal-sampling European Monte Carlo with antithetic pairs.
pub fn european_mc(
    params: &MarketParams,
    spec: &PayoffSpec,
    maturity: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64), BaselineError> {
    if n_paths < 100 {
        return Err(BaselineError::BadConfig(format!(
            "need at least 100 paths (got {n_paths})"
        )));
    }
    let sampler = StepSampler::new(params, maturity)?;
    let d = params.dim();
    let disc = (-params.rate() * maturity).exp();
    let x0: Vec<f64> = params.log_spot().iter().cloned().collect();
    let n_pairs = n_paths.div_ceil(2);

    const CHUNK: usize = 8192;
    let n_chunks = n_pairs.div_ceil(CHUNK);
    let partials: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut z = vec![0.0; d];
            let mut y = vec![0.0; d];
            for pair in c * CHUNK..((c + 1) * CHUNK).min(n_pairs) {
                let mut rng = substream(seed, &[domain::EUROPEAN_MC, pair as u64]);
                for zi in z.iter_mut() {
                    *zi = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                }
                y.copy_from_slice(&x0);
                sampler.apply(&mut y, &z);
                let p1 = payoff_log(spec, &y);
                for zi in z.iter_mut() {
                    *zi = -*zi;
                }
                y.copy_from_slice(&x0);
                sampler.apply(&mut y, &z);
                let p2 = payoff_log(spec, &y);
                let v = disc * 0.5 * (p1 + p2);
                sum += v;
                sum_sq += v * v;
            }
            (sum, sum_sq)
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (s, q) in partials {
        sum += s;
        sum_sq += q;
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = ((sum_sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Least-squares Monte Carlo configuration: polynomial regressors of total
/// degree `degree` in the asset prices, plus the payoff itself.
#[derive(Debug, Clone)]
pub struct LsmcConfig {
    pub n_paths: usize,
    pub degree: usize,
    pub seed: u64,
}

impl Default for LsmcConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            degree: 2,
            seed: 0,
        }
    }
}

/// Exponent tuples of all monomials in `d` variables with total degree
/// `<= degree`, in a fixed deterministic order.
fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; d];
    fn rec(out: &mut Vec<Vec<usize>>, current: &mut Vec<usize>, pos: usize, remaining: usize) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=remaining {
            current[pos] = e;
            rec(out, current, pos + 1, remaining - e);
        }
        current[pos] = 0;
    }
    rec(&mut out, &mut current, 0, degree);
    out
}

/// Longstaff-Schwartz style American pricer: backward regression of
/// discounted realized cashflows on in-the-money paths, exercising where
/// the intrinsic value beats the fitted continuation.
///
/// The returned standard error is in-sample (the exercise rule was chosen
/// on the same paths).
pub fn lsmc_american(
    params: &MarketParams,
    spec: &PayoffSpec,
    tg: &TimeGrid,
    cfg: &LsmcConfig,
) -> Result<(f64, f64), BaselineError> {
    if cfg.degree < 1 {
        return Err(BaselineError::BadConfig("degree must be >= 1".into()));
    }
    let d = params.dim();
    let exponents = monomial_exponents(d, cfg.degree);
    let n_basis = exponents.len() + 1; // plus the payoff regressor
    if cfg.n_paths < 10 * n_basis {
        return Err(BaselineError::BadConfig(format!(
            "need n_paths >= 10 * basis size = {} (got {})",
            10 * n_basis,
            cfg.n_paths
        )));
    }

    let paths = simulate_paths(params, tg, cfg.n_paths, stream_key(cfg.seed, &[domain::LSMC]))?;
    let n = cfg.n_paths;
    let steps = tg.steps;
    let disc = (-params.rate() * tg.dt).exp();
    let scale = 1.0 / spec.strike.max(params.spot().mean());

    // realized cashflow per path, discounted to the current slice
    let mut cash: Vec<f64> = (0..n)
        .map(|p| payoff(spec, paths.state(p, steps)).unwrap_or(0.0))
        .collect();

    for t in (1..steps).rev() {
        for c in cash.iter_mut() {
            *c *= disc;
        }
        let itm: Vec<usize> = (0..n)
            .filter(|&p| payoff(spec, paths.state(p, t)).map(|v| v > 0.0).unwrap_or(false))
            .collect();
        if itm.len() < n_basis {
            continue;
        }
        let features = |p: usize| -> Vec<f64> {
            let prices = paths.state(p, t);
            let mut row = Vec::with_capacity(n_basis);
            for exps in &exponents {
                let mut v = 1.0;
                for (i, &e) in exps.iter().enumerate() {
                    for _ in 0..e {
                        v *= prices[i] * scale;
                    }
                }
                row.push(v);
            }
            row.push(payoff(spec, prices).unwrap_or(0.0) * scale);
            row
        };
        // normal equations with an SVD solve, so collinear columns are
        // dropped rather than blowing up
        let mut xtx = DMatrix::<f64>::zeros(n_basis, n_basis);
        let mut xty = DVector::<f64>::zeros(n_basis);
        for &p in &itm {
            let row = features(p);
            for i in 0..n_basis {
                xty[i] += row[i] * cash[p];
                for j in i..n_basis {
                    xtx[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..n_basis {
            for j in 0..i {
                xtx[(i, j)] = xtx[(j, i)];
            }
        }
        let svd = xtx.svd(true, true);
        let beta = match svd.solve(&xty, 1e-10 * svd.singular_values.max()) {
            Ok(b) => b,
            Err(_) => continue,
        };
        for &p in &itm {
            let row = features(p);
            let continuation: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let intrinsic = payoff(spec, paths.state(p, t)).unwrap_or(0.0);
            if intrinsic >= continuation {
                cash[p] = intrinsic;
            }
        }
    }
    for c in cash.iter_mut() {
        *c *= disc;
    }
    let nf = n as f64;
    let mean = cash.iter().sum::<f64>() / nf;
    let spot_prices: Vec<f64> = params.spot().iter().cloned().collect();
    let intrinsic0 = payoff(spec, &spot_prices)?;
    if intrinsic0 > mean {
        // exercising everything at the valuation date dominates
        return Ok((intrinsic0, 0.0));
    }
    let var = cash.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// One-dimensional dynamics of the geometric average of the assets.
#[derive(Debug, Clone, Copy)]
pub struct GeoReduction {
    /// Initial geometric average.
    pub g0: f64,
    /// Volatility of the average.
    pub sigma_g: f64,
    /// Effective dividend yield induced by the averaging.
    pub delta_g: f64,
}

/// The geometric average of correlated GBM assets is itself a GBM:
/// `sigma_g^2 = sum_ij sigma_ij / d^2` and the drift shortfall acts as a
/// dividend yield `delta_g = sum_i sigma_ii / (2d) - sigma_g^2 / 2`.
pub fn geo_reduce(params: &MarketParams, spec: &PayoffSpec) -> Result<GeoReduction, BaselineError> {
    if !matches!(spec.kind, PayoffKind::GeoMeanPut | PayoffKind::GeoMeanCall) {
        return Err(BaselineError::NotGeoMean);
    }
    let d = params.dim() as f64;
    let sigma = params.sigma();
    let total: f64 = sigma.iter().sum();
    let trace: f64 = (0..params.dim()).map(|i| sigma[(i, i)]).sum();
    let sigma_g_sq = total / (d * d);
    let delta_g = trace / (2.0 * d) - sigma_g_sq / 2.0;
    let g0 = (params.spot().iter().map(|s| s.ln()).sum::<f64>() / d).exp();
    Ok(GeoReduction {
        g0,
        sigma_g: sigma_g_sq.max(0.0).sqrt(),
        delta_g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind1d {
    Put,
    Call,
}

/// Recombining binomial tree with a continuous dividend yield; the drift
/// sits in the node spacing so the risk-neutral probability stays inside
/// (0, 1) even for tiny volatilities.
pub fn binomial_1d(
    s0: f64,
    sigma: f64,
    div_yield: f64,
    rate: f64,
    strike: f64,
    maturity: f64,
    steps: usize,
    kind: OptionKind1d,
    style: ExerciseStyle,
) -> Result<f64, BaselineError> {
    if steps == 0 {
        return Err(BaselineError::BadConfig("steps must be >= 1".into()));
    }
    if !(s0 > 0.0) || !(sigma >= 0.0) || !(maturity > 0.0) {
        return Err(BaselineError::BadConfig(
            "need s0 > 0, sigma >= 0, maturity > 0".into(),
        ));
    }
    let dt = maturity / steps as f64;
    let sig = sigma.max(1e-9);
    let nu = (rate - div_yield - 0.5 * sig * sig) * dt;
    let up = nu + sig * dt.sqrt();
    let dn = nu - sig * dt.sqrt();
    let growth = ((rate - div_yield) * dt).exp();
    let p = (growth - dn.exp()) / (up.exp() - dn.exp());
    if !(0.0..=1.0).contains(&p) {
        return Err(BaselineError::BadConfig(format!(
            "risk-neutral probability {p} outside [0, 1]; refine the tree"
        )));
    }
    let disc = (-rate * dt).exp();
    let ln_s0 = s0.ln();
    let intrinsic = |s: f64| match kind {
        OptionKind1d::Put => (strike - s).max(0.0),
        OptionKind1d::Call => (s - strike).max(0.0),
    };
    let mut values: Vec<f64> = (0..=steps)
        .map(|j| intrinsic((ln_s0 + j as f64 * up + (steps - j) as f64 * dn).exp()))
        .collect();
    for t in (0..steps).rev() {
        for j in 0..=t {
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = match style {
                ExerciseStyle::American => {
                    let s = (ln_s0 + j as f64 * up + (t - j) as f64 * dn).exp();
                    intrinsic(s).max(cont)
                }
                ExerciseStyle::European => cont,
            };
        }
    }
    Ok(values[0])
}

/// American tree price with two-point averaging of `steps` and `steps+1`
/// to damp the odd-even oscillation.
pub fn binomial_american_1d(
    s0: f64,
    sigma: f64,
    div_yield: f64,
    rate: f64,
    strike: f64,
    maturity: f64,
    steps: usize,
    kind: OptionKind1d,
) -> Result<f64, BaselineError> {
    let a = binomial_1d(
        s0,
        sigma,
        div_yield,
        rate,
        strike,
        maturity,
        steps,
        kind,
        ExerciseStyle::American,
    )?;
    let b = binomial_1d(
        s0,
        sigma,
        div_yield,
        rate,
        strike,
        maturity,
        steps + 1,
        kind,
        ExerciseStyle::American,
    )?;
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn generic_market() -> MarketParams {
        MarketParams::from_vols_correlation(
            0.05,
            &[0.2, 0.3],
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            DVector::from_row_slice(&[100.0, 100.0]),
        )
        .unwrap()
    }

    /// Simpson-rule oracle: P(Z1<=a, Z2<=b) = int_-inf^a phi(x) Phi((b-rho x)/sqrt(1-rho^2)) dx.
    fn bvn_quadrature(a: f64, b: f64, rho: f64) -> f64 {
        let lo = -9.0;
        let hi = a.min(9.0);
        if hi <= lo {
            return 0.0;
        }
        let n = 8000; // even
        let h = (hi - lo) / n as f64;
        let denom = (1.0 - rho * rho).sqrt();
        let f = |x: f64| {
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let inner = if denom > 0.0 {
                normal_cdf((b - rho * x) / denom)
            } else if rho > 0.0 {
                if x <= b { 1.0 } else { 0.0 }
            } else if -x <= b {
                1.0
            } else {
                0.0
            };
            pdf * inner
        };
        let mut sum = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            sum += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * h / 3.0
    }

    #[test]
    fn bvn_total_mass_and_independence() {
        let p = bivariate_normal_cdf(8.0, 8.0, 0.3).unwrap();
        assert!((p - 1.0).abs() < 1e-10);
        for (a, b) in [(0.3, -0.7), (-1.2, 0.4), (2.0, 1.0)] {
            let p = bivariate_normal_cdf(a, b, 0.0).unwrap();
            assert_relative_eq!(p, normal_cdf(a) * normal_cdf(b), epsilon = 5e-8);
        }
    }

    #[test]
    fn bvn_orthant_closed_form() {
        // P(Z1<=0, Z2<=0) = 1/4 + asin(rho)/(2 pi)
        for rho in [-0.9, -0.5, 0.0, 0.3, 0.5, 0.75, 0.95] {
            let p = bivariate_normal_cdf(0.0, 0.0, rho).unwrap();
            let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
            assert!((p - exact).abs() < 5e-8, "rho {rho}: {p} vs {exact}");
        }
        assert!((bivariate_normal_cdf(0.0, 0.0, 0.5).unwrap() - 1.0 / 3.0).abs() < 5e-8);
    }

    #[test]
    fn bvn_matches_reference_probes() {
        // frozen from an independent high-precision implementation
        assert!((bivariate_normal_cdf(0.3, -0.2, 0.35).unwrap() - 0.3125558350185912).abs() < 5e-8);
        assert!((bivariate_normal_cdf(1.0, 0.5, 0.99).unwrap() - 0.6914602981405215).abs() < 5e-8);
        assert!(
            (bivariate_normal_cdf(-1.0, 2.0, -0.97).unwrap() - 0.13590527740007446).abs() < 5e-8
        );
    }

    #[test]
    fn bvn_matches_quadrature_sweep() {
        for &rho in &[-0.99, -0.925, -0.6, -0.2, 0.0, 0.31, 0.74, 0.9, 0.95, 0.999] {
            for &a in &[-2.5, -0.6, 0.0, 0.8, 2.2] {
                for &b in &[-1.7, 0.0, 0.4, 1.9] {
                    let got = bivariate_normal_cdf(a, b, rho).unwrap();
                    let want = bvn_quadrature(a, b, rho);
                    assert!(
                        (got - want).abs() < 5e-8,
                        "({a}, {b}, {rho}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn bvn_rejects_bad_correlation() {
        assert!(bivariate_normal_cdf(0.0, 0.0, 1.2).is_err());
        assert!(bivariate_normal_cdf(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn bvn_degenerate_correlations() {
        // rho = 1: P = Phi(min(a,b)); rho = -1: P = max(Phi(a) + Phi(b) - 1, 0)
        assert_relative_eq!(
            bivariate_normal_cdf(0.5, 1.5, 1.0).unwrap(),
            normal_cdf(0.5),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            bivariate_normal_cdf(0.5, 0.2, -1.0).unwrap(),
            (normal_cdf(0.5) + normal_cdf(0.2) - 1.0).max(0.0),
            epsilon = 1e-10
        );
    }

    #[test]
    fn stulz_deterministic_limits() {
        // zero vol, both forwards above the strike: worthless put
        let p0 = MarketParams::from_vols_correlation(
            0.05,
            &[0.0, 0.0],
            &DMatrix::identity(2, 2),
            DVector::from_row_slice(&[100.0, 110.0]),
        )
        .unwrap();
        assert_relative_eq!(
            stulz_european_min_put(&p0, 100.0, 1.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // min forward below the strike: discounted intrinsic on the forward
        let p1 = MarketParams::from_vols_correlation(
            0.05,
            &[0.0, 0.0],
            &DMatrix::identity(2, 2),
            DVector::from_row_slice(&[80.0, 110.0]),
        )
        .unwrap();
        let expect = (-0.05_f64).exp() * (100.0 - 80.0 * (0.05_f64).exp());
        assert_relative_eq!(
            stulz_european_min_put(&p1, 100.0, 1.0).unwrap(),
            expect,
            epsilon = 1e-10
        );
    }

    #[test]
    fn stulz_matches_quadrature_oracle() {
        // independent oracle: adaptive quadrature of the distribution
        // integrals E[(K-min)^+] = int_0^K P(min < u) du etc., computed to
        // ~1e-11 for the generic instance (spots 100/100, vols 0.2/0.3,
        // corr 0.5, r 5%, K 100, T 1)
        let params = generic_market();
        let price = stulz_european_min_put(&params, 100.0, 1.0).unwrap();
        assert_relative_eq!(price, 11.5003492955, epsilon = 1e-7);
        let recv_min = call_on_min(&params, 0.0, 1.0).unwrap();
        assert_relative_eq!(recv_min, 89.4756842179, epsilon = 1e-7);
        let call = call_on_min(&params, 100.0, 1.0).unwrap();
        assert_relative_eq!(call, 5.8530910643, epsilon = 1e-7);
    }

    #[test]
    fn european_mc_agrees_with_formula() {
        let params = generic_market();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let (mc, se) = european_mc(&params, &spec, 1.0, 400_000, 42).unwrap();
        let exact = stulz_european_min_put(&params, 100.0, 1.0).unwrap();
        assert!(
            (mc - exact).abs() <= 3.0 * se,
            "MC {mc} +- {se} vs formula {exact}"
        );
    }

    #[test]
    fn european_mc_zero_vol_is_exact() {
        let params = MarketParams::from_vols_correlation(
            0.05,
            &[0.0, 0.0],
            &DMatrix::identity(2, 2),
            DVector::from_row_slice(&[80.0, 110.0]),
        )
        .unwrap();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let (mc, se) = european_mc(&params, &spec, 1.0, 1000, 1).unwrap();
        let expect = (-0.05_f64).exp() * (100.0 - 80.0 * (0.05_f64).exp());
        assert_relative_eq!(mc, expect, epsilon = 1e-10);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn min_put_increases_as_correlation_falls() {
        // common random numbers: identical substreams, different loadings
        let mk = |rho: f64| {
            MarketParams::from_vols_correlation(
                0.05,
                &[0.2, 0.3],
                &DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
                DVector::from_row_slice(&[100.0, 100.0]),
            )
            .unwrap()
        };
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let (hi, _) = european_mc(&mk(0.8), &spec, 1.0, 200_000, 7).unwrap();
        let (lo, _) = european_mc(&mk(0.1), &spec, 1.0, 200_000, 7).unwrap();
        assert!(lo > hi, "corr 0.1 price {lo} should exceed corr 0.8 price {hi}");
    }

    #[test]
    fn lsmc_single_step_is_terminal_average() {
        let params = generic_market();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let cfg = LsmcConfig {
            n_paths: 50_000,
            degree: 2,
            seed: 3,
        };
        let (lsmc, se_l) = lsmc_american(&params, &spec, &tg, &cfg).unwrap();
        let (mc, se_m) = european_mc(&params, &spec, 1.0, 400_000, 9).unwrap();
        assert!(
            (lsmc - mc).abs() <= 3.0 * (se_l + se_m),
            "lsmc {lsmc} vs mc {mc}"
        );
    }

    #[test]
    fn lsmc_deep_itm_exercises_immediately() {
        // low vol and a high rate make waiting strictly suboptimal
        let params = MarketParams::from_vols_correlation(
            0.10,
            &[0.05, 0.05],
            &DMatrix::identity(2, 2),
            DVector::from_row_slice(&[100.0, 100.0]),
        )
        .unwrap();
        let spec = PayoffSpec::new(PayoffKind::MinPut, 300.0);
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let cfg = LsmcConfig {
            n_paths: 20_000,
            degree: 2,
            seed: 4,
        };
        let (price, se) = lsmc_american(&params, &spec, &tg, &cfg).unwrap();
        assert_eq!(price, 200.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn geo_reduce_identity_and_iid() {
        let p1 = crate::model::tests::diag_market(0.02, &[0.09], &[100.0]);
        let spec = PayoffSpec::new(PayoffKind::GeoMeanPut, 100.0);
        let g = geo_reduce(&p1, &spec).unwrap();
        assert_relative_eq!(g.sigma_g * g.sigma_g, 0.09, epsilon = 1e-14);
        assert_relative_eq!(g.delta_g, 0.0, epsilon = 1e-14);
        assert_relative_eq!(g.g0, 100.0, epsilon = 1e-10);

        // d iid assets, variance v, zero correlation
        let d = 5;
        let v = 0.04;
        let p5 = crate::model::tests::diag_market(0.02, &[v; 5], &[100.0; 5]);
        let g = geo_reduce(&p5, &spec).unwrap();
        assert_relative_eq!(g.sigma_g * g.sigma_g, v / d as f64, epsilon = 1e-14);
        assert_relative_eq!(
            g.delta_g,
            v / 2.0 - v / (2.0 * d as f64),
            epsilon = 1e-14
        );
        let not_geo = PayoffSpec::new(PayoffKind::MinPut, 100.0);
        assert!(geo_reduce(&p5, &not_geo).is_err());
    }

    #[test]
    fn geo_average_follows_reduced_gbm_moments() {
        // simulate the full basket and check log G against the 1-d moments
        let params = MarketParams::from_vols_correlation(
            0.05,
            &[0.2, 0.25, 0.3],
            &DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.0],
            ),
            DVector::from_row_slice(&[100.0, 90.0, 110.0]),
        )
        .unwrap();
        let spec = PayoffSpec::new(PayoffKind::GeoMeanCall, 100.0);
        let g = geo_reduce(&params, &spec).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let n = 400_000;
        let paths = simulate_paths(&params, &tg, n, 11).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for p in 0..n {
            let state = paths.state(p, 1);
            let lg = state.iter().map(|s| s.ln()).sum::<f64>() / 3.0;
            sum += lg;
            sum_sq += lg * lg;
        }
        let mean = sum / n as f64;
        let var = (sum_sq - sum * sum / n as f64) / (n as f64 - 1.0);
        let expect_mean = g.g0.ln() + (params.rate() - g.delta_g - 0.5 * g.sigma_g * g.sigma_g);
        let expect_var = g.sigma_g * g.sigma_g;
        let se_mean = (var / n as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() <= 3.0 * se_mean,
            "log G mean {mean} vs {expect_mean}"
        );
        assert!((var - expect_var).abs() / expect_var < 0.02);
    }

    #[test]
    fn binomial_degenerate_put_is_intrinsic() {
        let p = binomial_american_1d(80.0, 1e-6, 0.0, 0.05, 100.0, 1.0, 500, OptionKind1d::Put)
            .unwrap();
        assert_relative_eq!(p, 20.0, epsilon = 1e-6);
    }

    #[test]
    fn binomial_european_matches_black_scholes() {
        let tree = binomial_1d(
            100.0,
            0.25,
            0.03,
            0.05,
            95.0,
            1.5,
            2000,
            OptionKind1d::Put,
            ExerciseStyle::European,
        )
        .unwrap();
        let tree2 = binomial_1d(
            100.0,
            0.25,
            0.03,
            0.05,
            95.0,
            1.5,
            2001,
            OptionKind1d::Put,
            ExerciseStyle::European,
        )
        .unwrap();
        let avg = 0.5 * (tree + tree2);
        let bs = black_scholes_1d(100.0, 0.25, 0.03, 0.05, 95.0, 1.5, false);
        assert!((avg - bs).abs() < 5e-3, "tree {avg} vs closed form {bs}");
    }

    #[test]
    fn binomial_american_dominates_european() {
        for steps in [500, 501] {
            let us = binomial_1d(
                100.0, 0.2, 0.02, 0.05, 105.0, 1.0, steps, OptionKind1d::Put,
                ExerciseStyle::American,
            )
            .unwrap();
            let eu = binomial_1d(
                100.0, 0.2, 0.02, 0.05, 105.0, 1.0, steps, OptionKind1d::Put,
                ExerciseStyle::European,
            )
            .unwrap();
            assert!(us >= eu);
        }
    }
}
