//! Irregular grid generation in log-price space.
//!
//! Points come from a Sobol sequence in the unit cube, mapped through the
//! inverse normal CDF and an affine transform matched to the risk-neutral
//! log-price distribution at a reference horizon. The grid is then split
//! into training and validation subsets for cross-validated fitting.

mod sobol;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::model::{log_step_moments, MarketParams, ModelError};
use crate::rng::{domain, substream};

pub use sobol::MAX_DIMENSION;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension {0} outside supported range 1..={MAX_DIMENSION}")]
    UnsupportedDimension(usize),
    #[error("need at least one point")]
    EmptySequence,
    #[error("quantile argument {0} outside (0, 1)")]
    QuantileDomain(f64),
    #[error("grid needs at least d + 2 = {min} points (got {got})")]
    TooFewPoints { min: usize, got: usize },
    #[error("grid horizon must be > 0 (got {0})")]
    BadHorizon(f64),
    #[error("spread must be > 0 (got {0})")]
    BadSpread(f64),
    #[error("validation fraction {0} outside (0, 1)")]
    BadValFraction(f64),
    #[error("grid dimension {grid} does not match market dimension {market}")]
    DimensionMismatch { grid: usize, market: usize },
    #[error("malformed grid file: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sobol generator configuration.
#[derive(Debug, Clone)]
pub struct SobolConfig {
    pub dimension: usize,
    /// Leading points to discard; defaults to 1 so the all-zero point never
    /// reaches the inverse normal transform.
    pub skip: usize,
    pub scramble_seed: Option<u64>,
}

impl SobolConfig {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            skip: 1,
            scramble_seed: None,
        }
    }
}

/// First `n` points of the configured Sobol sequence, one row per point,
/// values in `[0, 1)`.
pub fn sobol_sequence(cfg: &SobolConfig, n: usize) -> Result<DMatrix<f64>, GridError> {
    if cfg.dimension == 0 || cfg.dimension > MAX_DIMENSION {
        return Err(GridError::UnsupportedDimension(cfg.dimension));
    }
    if n == 0 {
        return Err(GridError::EmptySequence);
    }
    let d = cfg.dimension;
    let mut seq = sobol::SobolSequence::new(d, cfg.scramble_seed);
    let mut buf = vec![0.0; d];
    for _ in 0..cfg.skip {
        seq.next_point(&mut buf);
    }
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        seq.next_point(&mut buf);
        for j in 0..d {
            out[(i, j)] = buf[j];
        }
    }
    Ok(out)
}

/// Standard normal quantile, Wichura's AS 241 (PPND16) algorithm.
///
/// Absolute error of the composed check `|Phi(result) - u|` stays below
/// 1e-9 over the full open interval.
pub fn inverse_normal_cdf(u: f64) -> Result<f64, GridError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(GridError::QuantileDomain(u));
    }
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * poly7(&A_CENTRAL, r) / poly7(&B_CENTRAL, r));
    }
    let mut r = if q < 0.0 { u } else { 1.0 - u };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly7(&C_TAIL, r) / poly7(&D_TAIL, r)
    } else {
        let r = r - 5.0;
        poly7(&E_FAR_TAIL, r) / poly7(&F_FAR_TAIL, r)
    };
    Ok(if q < 0.0 { -x } else { x })
}

fn poly7(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

const A_CENTRAL: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B_CENTRAL: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const C_TAIL: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const D_TAIL: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E_FAR_TAIL: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F_FAR_TAIL: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Quasi-random point set in log-price space with a train/validation
/// partition. Immutable once built; `split` returns a repartitioned copy.
#[derive(Debug, Clone)]
pub struct Grid {
    /// Point-major storage: point `i` occupies `data[i*dim .. (i+1)*dim]`.
    data: Vec<f64>,
    dim: usize,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl Grid {
    pub fn n_points(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-price coordinates of point `i`.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Point-major flat storage, for zero-copy fitting views.
    pub fn flat_data(&self) -> &[f64] {
        &self.data
    }

    pub fn train_idx(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_idx(&self) -> &[usize] {
        &self.val_idx
    }

    /// Writes the grid as CSV: metadata comment lines, then one row of d
    /// coordinates per point.
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), GridError> {
        writeln!(w, "# grid d={} n={}", self.dim(), self.n_points())?;
        if !self.val_idx.is_empty() {
            let ids: Vec<String> = self.val_idx.iter().map(|i| i.to_string()).collect();
            writeln!(w, "# val_idx={}", ids.join(";"))?;
        }
        for i in 0..self.n_points() {
            let row: Vec<String> = self.point(i).iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn from_csv<R: std::io::BufRead>(r: R) -> Result<Self, GridError> {
        let mut dims: Option<(usize, usize)> = None;
        let mut val_idx = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for tok in meta.split_whitespace() {
                    if let Some(v) = tok.strip_prefix("d=") {
                        let d = v.parse().map_err(|_| GridError::Parse(tok.into()))?;
                        let n = dims.map(|(_, n)| n).unwrap_or(0);
                        dims = Some((d, n));
                    } else if let Some(v) = tok.strip_prefix("n=") {
                        let n = v.parse().map_err(|_| GridError::Parse(tok.into()))?;
                        let d = dims.map(|(d, _)| d).unwrap_or(0);
                        dims = Some((d, n));
                    } else if let Some(v) = tok.strip_prefix("val_idx=") {
                        val_idx = v
                            .split(';')
                            .map(|s| s.parse().map_err(|_| GridError::Parse(s.into())))
                            .collect::<Result<_, _>>()?;
                    }
                }
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| GridError::Parse(s.into())))
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        let (d, n) = dims.ok_or_else(|| GridError::Parse("missing metadata line".into()))?;
        if rows.len() != n || rows.iter().any(|r| r.len() != d) {
            return Err(GridError::Parse(format!(
                "expected {n} rows of {d} columns, got {} rows",
                rows.len()
            )));
        }
        let data = rows.into_iter().flatten().collect();
        let val_set: std::collections::HashSet<usize> = val_idx.iter().cloned().collect();
        let train_idx = (0..n).filter(|i| !val_set.contains(i)).collect();
        Ok(Self {
            data,
            dim: d,
            train_idx,
            val_idx,
        })
    }
}

/// Builds the grid `x = c + L z` where `z` are inverse-normal-transformed
/// Sobol points, `c` is the mean log-price at `grid_horizon` and
/// `L Lᵀ = spread² sigma h`, so the grid concentrates where the factor
/// distribution at the reference horizon lives.
pub fn build_grid(
    params: &MarketParams,
    grid_horizon: f64,
    spread: f64,
    n: usize,
    cfg: &SobolConfig,
) -> Result<Grid, GridError> {
    let d = params.dim();
    if cfg.dimension != d {
        return Err(GridError::DimensionMismatch {
            grid: cfg.dimension,
            market: d,
        });
    }
    if !(grid_horizon > 0.0) {
        return Err(GridError::BadHorizon(grid_horizon));
    }
    if !(spread > 0.0) {
        return Err(GridError::BadSpread(spread));
    }
    if n < d + 2 {
        return Err(GridError::TooFewPoints { min: d + 2, got: n });
    }
    let uniforms = sobol_sequence(cfg, n)?;
    let (center, _) = log_step_moments(params, grid_horizon)?;
    let center = params.log_spot() + center;
    let l = params.sigma_factor() * (spread * grid_horizon.sqrt());

    // keep scrambled coordinates clear of the endpoints of (0,1)
    const EPS: f64 = 1.0 / 8_589_934_592.0; // 2^-33
    let mut data = vec![0.0; n * d];
    let mut z = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            let u = uniforms[(i, j)].clamp(EPS, 1.0 - EPS);
            z[j] = inverse_normal_cdf(u)?;
        }
        let x = &center + &l * &z;
        data[i * d..(i + 1) * d].copy_from_slice(x.as_slice());
    }
    Ok(Grid {
        data,
        dim: d,
        train_idx: (0..n).collect(),
        val_idx: Vec::new(),
    })
}

/// Repartitions the grid into train/validation sets.
///
/// `|val| = round_ties_even(val_fraction * n)`; assignment is a seeded
/// shuffle, so it is independent of the Sobol ordering.
pub fn split(grid: &Grid, val_fraction: f64, seed: u64) -> Result<Grid, GridError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(GridError::BadValFraction(val_fraction));
    }
    let n = grid.n_points();
    let k = (val_fraction * n as f64).round_ties_even() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, &[domain::GRID_SPLIT]);
    order.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = order[..k].to_vec();
    let mut train_idx: Vec<usize> = order[k..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Grid {
        data: grid.data.clone(),
        dim: grid.dim,
        train_idx,
        val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::function::erf::erfc;

    fn normal_cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    fn market_2d() -> MarketParams {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.03, 0.03, 0.09]);
        MarketParams::new(0.05, sigma, DVector::from_row_slice(&[100.0, 95.0])).unwrap()
    }

    #[test]
    fn sequence_respects_skip_and_reference_values() {
        let mut cfg = SobolConfig::new(1);
        cfg.skip = 1;
        let pts = sobol_sequence(&cfg, 4).unwrap();
        let col: Vec<f64> = (0..4).map(|i| pts[(i, 0)]).collect();
        assert_eq!(col, vec![0.5, 0.75, 0.25, 0.375]);
    }

    #[test]
    fn sequence_rejects_unsupported_dimension() {
        assert!(sobol_sequence(&SobolConfig::new(0), 4).is_err());
        assert!(sobol_sequence(&SobolConfig::new(MAX_DIMENSION + 1), 4).is_err());
        assert!(sobol_sequence(&SobolConfig::new(21), 4).is_ok());
    }

    #[test]
    fn sequence_is_deterministic() {
        let cfg = SobolConfig::new(5);
        assert_eq!(sobol_sequence(&cfg, 64).unwrap(), sobol_sequence(&cfg, 64).unwrap());
    }

    #[test]
    fn quantile_symmetry_and_center() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
        for u in [0.001, 0.0499, 0.23, 0.4, 0.77, 0.9999] {
            let a = inverse_normal_cdf(u).unwrap();
            let b = inverse_normal_cdf(1.0 - u).unwrap();
            assert_relative_eq!(a, -b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn quantile_reference_value() {
        // high-precision oracle for the 97.5th percentile
        assert_relative_eq!(
            inverse_normal_cdf(0.975).unwrap(),
            1.959963984540054,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        let mut u = 1e-12;
        while u < 1.0 {
            let x = inverse_normal_cdf(u).unwrap();
            assert!(
                (normal_cdf(x) - u).abs() <= 1e-9,
                "u = {u}: Phi(q(u)) = {}",
                normal_cdf(x)
            );
            u = (u * 1.07 + 1e-6).min(1.0 - 1e-12 + u * 0.5);
            if u >= 1.0 - 1e-12 {
                break;
            }
        }
        assert!(inverse_normal_cdf(0.0).is_err());
        assert!(inverse_normal_cdf(1.0).is_err());
        assert!(inverse_normal_cdf(-0.2).is_err());
    }

    #[test]
    fn grid_matches_target_moments() {
        // diagonal sigma, spread 1: sample covariance ~ sigma * horizon
        let params = crate::model::tests::diag_market(0.02, &[0.04, 0.09], &[100.0, 80.0]);
        let n = 4096;
        let grid = build_grid(&params, 1.0, 1.0, n, &SobolConfig::new(2)).unwrap();
        let mut mean = [0.0; 2];
        for i in 0..n {
            let p = grid.point(i);
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        let mut cov = [[0.0; 2]; 2];
        for i in 0..n {
            let p = grid.point(i);
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]);
                }
            }
        }
        for row in cov.iter_mut() {
            for v in row.iter_mut() {
                *v /= n as f64 - 1.0;
            }
        }
        assert!((cov[0][0] - 0.04).abs() / 0.04 < 0.10);
        assert!((cov[1][1] - 0.09).abs() / 0.09 < 0.10);
    }

    #[test]
    fn minimal_grid_constructs() {
        let params = market_2d();
        assert!(build_grid(&params, 1.0, 1.5, 4, &SobolConfig::new(2)).is_ok());
        assert!(matches!(
            build_grid(&params, 1.0, 1.5, 3, &SobolConfig::new(2)),
            Err(GridError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn spread_scales_standard_deviation() {
        let params = market_2d();
        let n = 2048;
        let g1 = build_grid(&params, 1.0, 1.0, n, &SobolConfig::new(2)).unwrap();
        let g2 = build_grid(&params, 1.0, 2.0, n, &SobolConfig::new(2)).unwrap();
        for j in 0..2 {
            let sd = |g: &Grid| {
                let m: f64 = (0..n).map(|i| g.point(i)[j]).sum::<f64>() / n as f64;
                ((0..n).map(|i| (g.point(i)[j] - m).powi(2)).sum::<f64>() / n as f64).sqrt()
            };
            assert_relative_eq!(sd(&g2) / sd(&g1), 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn transform_round_trips_to_sobol_points() {
        let params = market_2d();
        let n = 256;
        let cfg = SobolConfig::new(2);
        let grid = build_grid(&params, 1.0, 1.5, n, &cfg).unwrap();
        let uniforms = sobol_sequence(&cfg, n).unwrap();
        let (center, _) = log_step_moments(&params, 1.0).unwrap();
        let center = params.log_spot() + center;
        let l = params.sigma_factor() * 1.5;
        let lu = l.clone().lu();
        for i in 0..n {
            let x = DVector::from_column_slice(grid.point(i)) - &center;
            let z = lu.solve(&x).unwrap();
            for j in 0..2 {
                let u = normal_cdf(z[j]);
                assert!(
                    (u - uniforms[(i, j)]).abs() < 1e-6,
                    "point {i} dim {j}: {u} vs {}",
                    uniforms[(i, j)]
                );
            }
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let params = market_2d();
        let grid = build_grid(&params, 1.0, 1.5, 100, &SobolConfig::new(2)).unwrap();
        let s = split(&grid, 0.2, 5).unwrap();
        assert_eq!(s.val_idx().len(), 20);
        assert_eq!(s.train_idx().len(), 80);
        let s2 = split(&grid, 0.2, 5).unwrap();
        assert_eq!(s.val_idx(), s2.val_idx());
        let s3 = split(&grid, 0.2, 6).unwrap();
        assert_ne!(s.val_idx(), s3.val_idx());

        // disjoint cover
        let mut all: Vec<usize> = s.train_idx().iter().chain(s.val_idx()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_rounds_ties_to_even() {
        let params = market_2d();
        let grid = build_grid(&params, 1.0, 1.5, 5, &SobolConfig::new(2)).unwrap();
        // 0.5 * 5 = 2.5 rounds to 2 under ties-to-even
        let s = split(&grid, 0.5, 1).unwrap();
        assert_eq!(s.val_idx().len(), 2);
        assert_eq!(s.train_idx().len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let params = market_2d();
        let grid = build_grid(&params, 1.0, 1.5, 32, &SobolConfig::new(2)).unwrap();
        let grid = split(&grid, 0.25, 3).unwrap();
        let mut buf = Vec::new();
        grid.to_csv(&mut buf).unwrap();
        let back = Grid::from_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.n_points(), 32);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.val_idx(), grid.val_idx());
        assert_eq!(back.train_idx(), grid.train_idx());
        for i in 0..32 {
            assert_eq!(back.point(i), grid.point(i));
        }
    }

    // Low-discrepancy sanity: per-axis Kolmogorov-Smirnov statistic of the
    // Sobol sequence beats a pseudo-random sample of the same size.
    #[test]
    fn sobol_beats_pseudo_random_on_ks_statistic() {
        use rand::Rng;
        for d in 1..=3usize {
            let n = 1 << 10;
            let cfg = SobolConfig::new(d);
            let sob = sobol_sequence(&cfg, n).unwrap();
            let mut rng = crate::rng::substream(17, &[99, d as u64]);
            let ks = |col: &mut Vec<f64>| {
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                col.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let lo = (x - i as f64 / n as f64).abs();
                        let hi = (x - (i + 1) as f64 / n as f64).abs();
                        lo.max(hi)
                    })
                    .fold(0.0_f64, f64::max)
            };
            let mut ks_sob = 0.0;
            let mut ks_rand = 0.0;
            for j in 0..d {
                let mut col: Vec<f64> = (0..n).map(|i| sob[(i, j)]).collect();
                ks_sob += ks(&mut col);
                let mut rcol: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                ks_rand += ks(&mut rcol);
            }
            assert!(
                ks_sob / d as f64 <= ks_rand / d as f64,
                "d={d}: sobol KS {ks_sob} vs random KS {ks_rand}"
            );
        }
    }
}
