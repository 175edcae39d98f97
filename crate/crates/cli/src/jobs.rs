//! Job execution and report emission.
//!
//! Every CSV is reproducible bit-for-bit from (config, seed): runtime
//! figures go to stdout and the manifest only.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ilat::approx::{synthetic_target, theorem_rate_check, FitConfig, RateCheck};
use ilat::baselines::{
    binomial_1d, european_mc, geo_reduce, lsmc_american, stulz_european_min_put, LsmcConfig,
    OptionKind1d,
};
use ilat::bounds::{bounds, BoundsResult};
use ilat::gridgen::{build_grid, split, Grid, SobolConfig};
use ilat::lattice::{backward_induct, ExerciseStyle, PriceResult};
use ilat::model::PayoffKind;
use ilat::rng::{stream_key, substream};
use rand::Rng;

use crate::config::{payoff_kind_name, JobKind, RunConfig};

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Numerical(String),
    Violation(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Violation(_) => 4,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "configuration error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
            AppError::Violation(m) => write!(f, "property violation: {m}"),
        }
    }
}

fn io_err(e: std::io::Error) -> AppError {
    AppError::Numerical(format!("io: {e}"))
}

pub struct PriceRun {
    pub grid: Grid,
    pub result: PriceResult,
}

fn make_grid(cfg: &RunConfig) -> Result<Grid, AppError> {
    let sobol = SobolConfig {
        dimension: cfg.params.dim(),
        skip: cfg.grid.sobol_skip,
        scramble_seed: cfg.grid.scramble_seed,
    };
    let grid = build_grid(
        &cfg.params,
        cfg.grid.horizon,
        cfg.grid.spread,
        cfg.grid.n_points,
        &sobol,
    )
    .map_err(|e| AppError::Config(format!("grid: {e}")))?;
    split(&grid, cfg.grid.val_fraction, cfg.seed)
        .map_err(|e| AppError::Config(format!("grid.val_fraction: {e}")))
}

pub fn execute_price(cfg: &RunConfig) -> Result<PriceRun, AppError> {
    let grid = make_grid(cfg)?;
    let result = backward_induct(&cfg.params, &cfg.spec, &cfg.tg, &grid, &cfg.pricer)
        .map_err(|e| AppError::Numerical(e.to_string()))?;
    Ok(PriceRun { grid, result })
}

fn style_name(style: ExerciseStyle) -> &'static str {
    match style {
        ExerciseStyle::American => "american",
        ExerciseStyle::European => "european",
    }
}

fn fit_rms_max(result: &PriceResult) -> f64 {
    result
        .fit_reports
        .iter()
        .map(|r| r.residual_val_rms)
        .fold(0.0, f64::max)
}

fn terms_total(result: &PriceResult) -> usize {
    result.fit_reports.iter().map(|r| r.n_terms_selected).sum()
}

fn price_csv(cfg: &RunConfig, result: &PriceResult) -> String {
    let mut s = String::new();
    s.push_str("# ilat-csv v1 price\n");
    s.push_str("payoff,strike,dim,style,steps,grid_points,seed,value0,terms_total,fit_rms_max\n");
    s.push_str(&format!(
        "{},{:?},{},{},{},{},{},{:?},{},{:?}\n",
        payoff_kind_name(cfg.spec.kind),
        cfg.spec.strike,
        cfg.params.dim(),
        style_name(cfg.pricer.style),
        cfg.tg.steps,
        cfg.grid.n_points,
        cfg.seed,
        result.value0,
        terms_total(result),
        fit_rms_max(result),
    ));
    s
}

fn write_price_artifacts(
    cfg: &RunConfig,
    run: &PriceRun,
    out: &Path,
) -> Result<(), AppError> {
    fs::create_dir_all(out.join("surfaces")).map_err(io_err)?;
    fs::write(out.join("summary.csv"), price_csv(cfg, &run.result)).map_err(io_err)?;

    let mut grid_file = Vec::new();
    run.grid.to_csv(&mut grid_file).map_err(|e| AppError::Numerical(e.to_string()))?;
    fs::write(out.join("grid.csv"), grid_file).map_err(io_err)?;

    let mut manifest = String::new();
    manifest.push_str("ilat manifest v1\n");
    manifest.push_str(&format!("job=price\nseed={}\n", cfg.seed));
    manifest.push_str(&format!("value0={:?}\n", run.result.value0));
    manifest.push_str(&format!("style={}\n", style_name(run.result.style)));
    manifest.push_str(&format!("slices={}\n", run.result.surfaces.len()));
    for (t, (surface, report)) in run
        .result
        .surfaces
        .iter()
        .zip(&run.result.fit_reports)
        .enumerate()
    {
        let file = format!("surfaces/slice_{t}.mix");
        let mut buf = Vec::new();
        surface
            .mixture
            .to_text(&mut buf)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        fs::write(out.join(&file), buf).map_err(io_err)?;
        manifest.push_str(&format!(
            "slice {t}: file={file} offset={:?} terms={} val_rms={:?}\n",
            surface.offset, report.n_terms_selected, report.residual_val_rms
        ));
    }
    // wall-clock figures are informational and excluded from reproducibility
    manifest.push_str(&format!(
        "timing_continuation_ms={}\ntiming_fitting_ms={}\ntiming_total_ms={}\n",
        run.result.timing.continuation.as_millis(),
        run.result.timing.fitting.as_millis(),
        run.result.timing.total.as_millis()
    ));
    manifest.push_str("config:\n");
    for line in cfg.source.lines() {
        manifest.push_str("  ");
        manifest.push_str(line);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.txt"), manifest).map_err(io_err)?;
    Ok(())
}

pub fn run_price(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let run = execute_price(cfg)?;
    let r = &run.result;
    println!(
        "value0 = {:.6}  ({} K={}, {}, m={}, grid {})",
        r.value0,
        payoff_kind_name(cfg.spec.kind),
        cfg.spec.strike,
        style_name(r.style),
        cfg.tg.steps,
        cfg.grid.n_points
    );
    let terms: Vec<usize> = r.fit_reports.iter().map(|f| f.n_terms_selected).collect();
    println!(
        "slice fits: terms {:?}, max val rms {:.3e}",
        terms,
        fit_rms_max(r)
    );
    println!(
        "timing: continuation {:.1?}, fitting {:.1?}, total {:.1?}",
        r.timing.continuation, r.timing.fitting, r.timing.total
    );
    if let Some(out) = out {
        write_price_artifacts(cfg, &run, out)?;
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

pub fn run_bounds(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let run = execute_price(cfg)?;
    let b = bounds(&run.result, &cfg.params, &cfg.spec, &cfg.tg, &cfg.bounds)
        .map_err(|e| AppError::Numerical(e.to_string()))?;
    print_bounds(&run.result, &b);
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err)?;
        let mut s = String::new();
        s.push_str("# ilat-csv v1 bounds\n");
        s.push_str("payoff,strike,dim,steps,seed,value0,v_lower,se_lower,v_upper,se_upper,gap\n");
        s.push_str(&format!(
            "{},{:?},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            payoff_kind_name(cfg.spec.kind),
            cfg.spec.strike,
            cfg.params.dim(),
            cfg.tg.steps,
            cfg.seed,
            run.result.value0,
            b.v_lower,
            b.se_lower,
            b.v_upper,
            b.se_upper,
            b.gap
        ));
        fs::write(out.join("bounds.csv"), s).map_err(io_err)?;
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn print_bounds(result: &PriceResult, b: &BoundsResult) {
    println!("value0  = {:.6}", result.value0);
    println!("lower   = {:.6}  (se {:.2e})", b.v_lower, b.se_lower);
    println!("upper   = {:.6}  (se {:.2e})", b.v_upper, b.se_upper);
    println!(
        "gap     = {:.6}  ({:.2}% of lower)",
        b.gap,
        100.0 * b.gap / b.v_lower.max(1e-12)
    );
}

struct BenchRow {
    method: &'static str,
    price: f64,
    err: f64,
    err_kind: &'static str,
    runtime_s: f64,
}

pub fn run_benchmark(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let mut rows: Vec<BenchRow> = Vec::new();

    let t0 = Instant::now();
    let run = execute_price(cfg)?;
    rows.push(BenchRow {
        method: "il",
        price: run.result.value0,
        err: fit_rms_max(&run.result),
        err_kind: "fit_rms",
        runtime_s: t0.elapsed().as_secs_f64(),
    });

    let american = cfg.pricer.style == ExerciseStyle::American;
    let european = !american;

    if american {
        let t = Instant::now();
        let b = bounds(&run.result, &cfg.params, &cfg.spec, &cfg.tg, &cfg.bounds)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        let dt = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            method: "lower-bound",
            price: b.v_lower,
            err: b.se_lower,
            err_kind: "se",
            runtime_s: dt / 2.0,
        });
        rows.push(BenchRow {
            method: "upper-bound",
            price: b.v_upper,
            err: b.se_upper,
            err_kind: "se",
            runtime_s: dt / 2.0,
        });

        let t = Instant::now();
        let lsmc_cfg = LsmcConfig {
            n_paths: cfg.lsmc_paths,
            degree: cfg.lsmc_degree,
            seed: cfg.seed,
        };
        let (p, se) = lsmc_american(&cfg.params, &cfg.spec, &cfg.tg, &lsmc_cfg)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        rows.push(BenchRow {
            method: "lsmc",
            price: p,
            err: se,
            err_kind: "se",
            runtime_s: t.elapsed().as_secs_f64(),
        });
    }

    if european {
        let t = Instant::now();
        let (p, se) = european_mc(
            &cfg.params,
            &cfg.spec,
            cfg.tg.maturity,
            cfg.mc_paths,
            cfg.seed,
        )
        .map_err(|e| AppError::Numerical(e.to_string()))?;
        rows.push(BenchRow {
            method: "mc",
            price: p,
            err: se,
            err_kind: "se",
            runtime_s: t.elapsed().as_secs_f64(),
        });
        if cfg.params.dim() == 2 && cfg.spec.kind == PayoffKind::MinPut {
            let t = Instant::now();
            let p = stulz_european_min_put(&cfg.params, cfg.spec.strike, cfg.tg.maturity)
                .map_err(|e| AppError::Numerical(e.to_string()))?;
            rows.push(BenchRow {
                method: "stulz",
                price: p,
                err: 0.0,
                err_kind: "exact",
                runtime_s: t.elapsed().as_secs_f64(),
            });
        }
    }

    if matches!(
        cfg.spec.kind,
        PayoffKind::GeoMeanPut | PayoffKind::GeoMeanCall
    ) {
        let t = Instant::now();
        let red = geo_reduce(&cfg.params, &cfg.spec)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        let kind = match cfg.spec.kind {
            PayoffKind::GeoMeanPut => OptionKind1d::Put,
            _ => OptionKind1d::Call,
        };
        let steps = 2000;
        let mut price = 0.0;
        for s in [steps, steps + 1] {
            price += 0.5
                * binomial_1d(
                    red.g0,
                    red.sigma_g,
                    red.delta_g,
                    cfg.params.rate(),
                    cfg.spec.strike,
                    cfg.tg.maturity,
                    s,
                    kind,
                    cfg.pricer.style,
                )
                .map_err(|e| AppError::Numerical(e.to_string()))?;
        }
        rows.push(BenchRow {
            method: "binomial-geo",
            price,
            err: 0.0,
            err_kind: "exact",
            runtime_s: t.elapsed().as_secs_f64(),
        });
    }

    println!(
        "{:<14} {:>14} {:>12} {:>9} {:>9}",
        "method", "price", "err", "err_kind", "runtime"
    );
    for r in &rows {
        println!(
            "{:<14} {:>14.6} {:>12.3e} {:>9} {:>8.2}s",
            r.method, r.price, r.err, r.err_kind, r.runtime_s
        );
    }

    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err)?;
        let mut s = String::new();
        s.push_str("# ilat-csv v1 benchmark\n");
        s.push_str("method,price,err,err_kind\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{:?},{:?},{}\n",
                r.method, r.price, r.err, r.err_kind
            ));
        }
        fs::write(out.join("benchmark.csv"), s).map_err(io_err)?;
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

pub fn run_rate_check(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let rc = &cfg.rate_check;
    let mut csv = String::from("# ilat-csv v1 rate-check\ntarget,dim,coef_mass,n,eps_sq,bound,ok\n");
    let mut worst: Option<(usize, f64, f64)> = None;
    let mut violated = false;

    for t in 0..rc.n_targets {
        let dim = rc.dims[t % rc.dims.len()];
        let mut rng = substream(cfg.seed, &[0x7a7e, t as u64]);
        let n_terms = rng.gen_range(1..=5usize);
        let coef_mass: f64 = rng.gen_range(1.0..=5.0);
        let target = synthetic_target(dim, n_terms, coef_mass, stream_key(cfg.seed, &[t as u64]));
        let fit = FitConfig {
            max_terms: rc.max_terms,
            patience: rc.max_terms,
            seed: stream_key(cfg.seed, &[0x5eed, t as u64]),
            ..FitConfig::default()
        };
        let check: RateCheck = theorem_rate_check(&target, rc.n_points, &fit, rc.exact_dictionary)
            .map_err(|e| AppError::Numerical(e.to_string()))?;
        for row in &check.rows {
            let ok = row.eps_sq <= row.bound;
            violated |= !ok;
            if !ok || worst.map_or(true, |(_, e, b)| row.eps_sq / row.bound > e / b) {
                worst = Some((row.n, row.eps_sq, row.bound));
            }
            csv.push_str(&format!(
                "{},{},{:?},{},{:?},{:?},{}\n",
                t, dim, check.coef_mass, row.n, row.eps_sq, row.bound, ok
            ));
        }
    }

    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err)?;
        fs::write(out.join("rate_check.csv"), &csv).map_err(io_err)?;
    }

    if !rc.exact_dictionary {
        println!(
            "hypothesis unmet: candidate pool excludes the target dictionary; bound not asserted"
        );
        if violated {
            println!("(informational: some rows exceeded the would-be bound)");
        }
        return Ok(());
    }
    match worst {
        Some((n, e, b)) if violated => Err(AppError::Violation(format!(
            "recursion rate bound violated at n={n}: eps^2 = {e:.3e} > bound {b:.3e}"
        ))),
        Some((n, e, b)) => {
            println!(
                "all {} targets within the recursion bound (tightest at n={n}: eps^2 {e:.3e} vs bound {b:.3e})",
                rc.n_targets
            );
            Ok(())
        }
        None => Ok(()),
    }
}

pub fn dispatch(cfg: &RunConfig, job: JobKind, out: Option<&Path>) -> Result<(), AppError> {
    match job {
        JobKind::Price => run_price(cfg, out),
        JobKind::Bounds => run_bounds(cfg, out),
        JobKind::Benchmark => run_benchmark(cfg, out),
        JobKind::RateCheck => run_rate_check(cfg, out),
    }
}

// writer helper kept for potential streaming use
#[allow(dead_code)]
fn write_all(path: &Path, content: &str) -> Result<(), AppError> {
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(content.as_bytes()).map_err(io_err)
}
