//! Run configuration: TOML with strict keys, explicit defaults, and
//! validation messages that name the offending field path.

use ilat::approx::{FitConfig, RgaMode};
use ilat::bounds::BoundsConfig;
use ilat::lattice::{DescendantScheme, ExerciseStyle, PricerConfig, Propagation};
use ilat::model::{MarketParams, PayoffKind, PayoffSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Price,
    Bounds,
    Benchmark,
    RateCheck,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffKindCfg {
    MinPut,
    MaxPut,
    MinCall,
    MaxCall,
    GeoMeanPut,
    GeoMeanCall,
}

impl From<PayoffKindCfg> for PayoffKind {
    fn from(k: PayoffKindCfg) -> Self {
        match k {
            PayoffKindCfg::MinPut => PayoffKind::MinPut,
            PayoffKindCfg::MaxPut => PayoffKind::MaxPut,
            PayoffKindCfg::MinCall => PayoffKind::MinCall,
            PayoffKindCfg::MaxCall => PayoffKind::MaxCall,
            PayoffKindCfg::GeoMeanPut => PayoffKind::GeoMeanPut,
            PayoffKindCfg::GeoMeanCall => PayoffKind::GeoMeanCall,
        }
    }
}

pub fn payoff_kind_name(k: PayoffKind) -> &'static str {
    match k {
        PayoffKind::MinPut => "min-put",
        PayoffKind::MaxPut => "max-put",
        PayoffKind::MinCall => "min-call",
        PayoffKind::MaxCall => "max-call",
        PayoffKind::GeoMeanPut => "geo-mean-put",
        PayoffKind::GeoMeanCall => "geo-mean-call",
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    job: JobKind,
    #[serde(default)]
    seed: u64,
    market: MarketSection,
    payoff: PayoffSection,
    time: TimeSection,
    grid: GridSection,
    #[serde(default)]
    fit: FitSection,
    #[serde(default)]
    pricer: PricerSection,
    #[serde(default)]
    bounds: BoundsSection,
    #[serde(default)]
    lsmc: LsmcSection,
    #[serde(default)]
    benchmark: BenchmarkSection,
    #[serde(default)]
    rate_check: RateCheckSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketSection {
    spots: Vec<f64>,
    rate: f64,
    vols: Option<Vec<f64>>,
    correlation: Option<Vec<Vec<f64>>>,
    covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayoffSection {
    kind: PayoffKindCfg,
    strike: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeSection {
    maturity: f64,
    steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    n_points: usize,
    #[serde(default = "default_spread")]
    spread: f64,
    /// Reference horizon of the Gaussian transform; defaults to maturity.
    horizon: Option<f64>,
    #[serde(default = "default_skip")]
    sobol_skip: usize,
    scramble_seed: Option<u64>,
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
}

fn default_spread() -> f64 {
    1.5
}
fn default_skip() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitSection {
    max_terms: usize,
    n_center_candidates: usize,
    n_precision_scales: usize,
    patience: usize,
    rga_mode: RgaModeCfg,
    refine_iters: usize,
    diagonal_precision: bool,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RgaModeCfg {
    Convex,
    Affine,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            max_terms: d.max_terms,
            n_center_candidates: d.n_center_candidates,
            n_precision_scales: d.n_precision_scales,
            patience: d.patience,
            rga_mode: RgaModeCfg::Affine,
            refine_iters: d.refine_iters,
            diagonal_precision: d.diagonal_precision,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PricerSection {
    propagation: PropagationCfg,
    n_descendants: usize,
    descendant_scheme: SchemeCfg,
    style: StyleCfg,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PropagationCfg {
    Analytic,
    Cluster,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SchemeCfg {
    Pseudo,
    Antithetic,
    Sobol,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum StyleCfg {
    American,
    European,
}

impl Default for PricerSection {
    fn default() -> Self {
        Self {
            propagation: PropagationCfg::Cluster,
            n_descendants: 256,
            descendant_scheme: SchemeCfg::Antithetic,
            style: StyleCfg::American,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BoundsSection {
    n_paths_lower: usize,
    n_paths_outer: usize,
    n_inner: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        let d = BoundsConfig::default();
        Self {
            n_paths_lower: d.n_paths_lower,
            n_paths_outer: d.n_paths_outer,
            n_inner: d.n_inner,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LsmcSection {
    n_paths: usize,
    degree: usize,
}

impl Default for LsmcSection {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            degree: 2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchmarkSection {
    mc_paths: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { mc_paths: 1_000_000 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateCheckSection {
    pub n_targets: usize,
    pub max_terms: usize,
    pub n_points: usize,
    pub dims: Vec<usize>,
    pub exact_dictionary: bool,
}

impl Default for RateCheckSection {
    fn default() -> Self {
        Self {
            n_targets: 20,
            max_terms: 100,
            n_points: 2048,
            dims: vec![1, 2, 3],
            exact_dictionary: true,
        }
    }
}

/// Grid-stage settings retained after validation.
#[derive(Debug, Clone)]
pub struct GridSettings {
    pub n_points: usize,
    pub spread: f64,
    pub horizon: f64,
    pub sobol_skip: usize,
    pub scramble_seed: Option<u64>,
    pub val_fraction: f64,
}

/// Fully validated run configuration in library types.
#[derive(Debug)]
pub struct RunConfig {
    pub job: JobKind,
    pub seed: u64,
    pub params: MarketParams,
    pub spec: PayoffSpec,
    pub tg: TimeGrid,
    pub grid: GridSettings,
    pub pricer: PricerConfig,
    pub bounds: BoundsConfig,
    pub lsmc_paths: usize,
    pub lsmc_degree: usize,
    pub mc_paths: usize,
    pub rate_check: RateCheckSection,
    /// Original config text, echoed into manifests.
    pub source: String,
}

pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    let d = raw.market.spots.len();
    if d == 0 {
        return Err("market.spots: must list at least one asset".into());
    }
    for (i, &s) in raw.market.spots.iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(format!("market.spots[{i}]: must be > 0 (got {s})"));
        }
    }

    let params = match (&raw.market.covariance, &raw.market.vols, &raw.market.correlation) {
        (Some(cov), None, None) => {
            check_square(cov, d, "market.covariance")?;
            let sigma = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
            MarketParams::new(
                raw.market.rate,
                sigma,
                DVector::from_vec(raw.market.spots.clone()),
            )
            .map_err(|e| format!("market.covariance: {e}"))?
        }
        (None, Some(vols), Some(corr)) => {
            if vols.len() != d {
                return Err(format!(
                    "market.vols: expected {d} entries, got {}",
                    vols.len()
                ));
            }
            for (i, &v) in vols.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(format!("market.vols[{i}]: must be >= 0 (got {v})"));
                }
            }
            check_square(corr, d, "market.correlation")?;
            for i in 0..d {
                if corr[i][i] != 1.0 {
                    return Err(format!(
                        "market.correlation[{i}][{i}]: diagonal must be 1 (got {})",
                        corr[i][i]
                    ));
                }
                for j in 0..d {
                    let c = corr[i][j];
                    if !(-1.0..=1.0).contains(&c) {
                        return Err(format!(
                            "market.correlation[{i}][{j}]: must lie in [-1, 1] (got {c})"
                        ));
                    }
                }
            }
            let corr_m = DMatrix::from_fn(d, d, |i, j| corr[i][j]);
            MarketParams::from_vols_correlation(
                raw.market.rate,
                vols,
                &corr_m,
                DVector::from_vec(raw.market.spots.clone()),
            )
            .map_err(|e| format!("market.correlation: {e}"))?
        }
        _ => {
            return Err(
                "market: provide either `covariance` or both `vols` and `correlation`".into(),
            )
        }
    };

    if raw.payoff.strike < 0.0 {
        return Err(format!(
            "payoff.strike: must be >= 0 (got {})",
            raw.payoff.strike
        ));
    }
    let spec = PayoffSpec::new(raw.payoff.kind.into(), raw.payoff.strike);

    let tg = TimeGrid::new(raw.time.maturity, raw.time.steps)
        .map_err(|e| format!("time: {e}"))?;

    if raw.grid.n_points < d + 2 {
        return Err(format!(
            "grid.n_points: need at least d + 2 = {} points (got {})",
            d + 2,
            raw.grid.n_points
        ));
    }
    if !(raw.grid.val_fraction > 0.0 && raw.grid.val_fraction < 1.0) {
        return Err(format!(
            "grid.val_fraction: must lie in (0, 1) (got {})",
            raw.grid.val_fraction
        ));
    }
    let horizon = raw.grid.horizon.unwrap_or(raw.time.maturity);
    if !(horizon > 0.0) {
        return Err(format!("grid.horizon: must be > 0 (got {horizon})"));
    }
    if !(raw.grid.spread > 0.0) {
        return Err(format!("grid.spread: must be > 0 (got {})", raw.grid.spread));
    }

    let scheme = match raw.pricer.descendant_scheme {
        SchemeCfg::Pseudo => DescendantScheme::Pseudo,
        SchemeCfg::Antithetic => DescendantScheme::Antithetic,
        SchemeCfg::Sobol => DescendantScheme::Sobol,
    };
    if raw.pricer.n_descendants < 2 {
        return Err(format!(
            "pricer.n_descendants: must be >= 2 (got {})",
            raw.pricer.n_descendants
        ));
    }
    if scheme == DescendantScheme::Antithetic && raw.pricer.n_descendants % 2 != 0 {
        return Err(format!(
            "pricer.n_descendants: antithetic scheme needs an even count (got {})",
            raw.pricer.n_descendants
        ));
    }
    if raw.bounds.n_inner < 2 {
        return Err(format!(
            "bounds.n_inner: must be >= 2 (got {})",
            raw.bounds.n_inner
        ));
    }
    if raw.fit.max_terms == 0 {
        return Err("fit.max_terms: must be >= 1".into());
    }

    let fit = FitConfig {
        max_terms: raw.fit.max_terms,
        n_center_candidates: raw.fit.n_center_candidates,
        n_precision_scales: raw.fit.n_precision_scales,
        patience: raw.fit.patience,
        rga_mode: match raw.fit.rga_mode {
            RgaModeCfg::Convex => RgaMode::Convex,
            RgaModeCfg::Affine => RgaMode::Affine,
        },
        refine_iters: raw.fit.refine_iters,
        diagonal_precision: raw.fit.diagonal_precision,
        seed: raw.seed,
    };
    let pricer = PricerConfig {
        propagation: match raw.pricer.propagation {
            PropagationCfg::Analytic => Propagation::Analytic,
            PropagationCfg::Cluster => Propagation::Cluster,
        },
        n_descendants: raw.pricer.n_descendants,
        descendant_scheme: scheme,
        style: match raw.pricer.style {
            StyleCfg::American => ExerciseStyle::American,
            StyleCfg::European => ExerciseStyle::European,
        },
        fit,
        seed: raw.seed,
    };

    for (i, &dim) in raw.rate_check.dims.iter().enumerate() {
        if dim == 0 {
            return Err(format!("rate_check.dims[{i}]: dimension must be >= 1"));
        }
    }

    Ok(RunConfig {
        job: raw.job,
        seed: raw.seed,
        params,
        spec,
        tg,
        grid: GridSettings {
            n_points: raw.grid.n_points,
            spread: raw.grid.spread,
            horizon,
            sobol_skip: raw.grid.sobol_skip,
            scramble_seed: raw.grid.scramble_seed,
            val_fraction: raw.grid.val_fraction,
        },
        pricer,
        bounds: BoundsConfig {
            n_paths_lower: raw.bounds.n_paths_lower,
            n_paths_outer: raw.bounds.n_paths_outer,
            n_inner: raw.bounds.n_inner,
            seed: raw.seed,
        },
        lsmc_paths: raw.lsmc.n_paths,
        lsmc_degree: raw.lsmc.degree,
        mc_paths: raw.benchmark.mc_paths,
        rate_check: raw.rate_check,
        source: text.to_string(),
    })
}

fn check_square(m: &[Vec<f64>], d: usize, path: &str) -> Result<(), String> {
    if m.len() != d {
        return Err(format!("{path}: expected {d} rows, got {}", m.len()));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != d {
            return Err(format!(
                "{path}[{i}]: expected {d} columns, got {}",
                row.len()
            ));
        }
    }
    Ok(())
}
