// scratch diagnostics for the backward recursion (not part of the API)
use ilat::approx::FitConfig;
use ilat::gridgen::{build_grid, split, SobolConfig};
use ilat::lattice::{backward_induct, ExerciseStyle, PricerConfig, Propagation};
use ilat::model::{MarketParams, PayoffKind, PayoffSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let spread: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let n_grid: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let max_terms: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let patience: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cands: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(24);
    let diag: bool = args.get(6).map(|s| s == "diag").unwrap_or(false);
    let scales: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_desc: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(256);
    let scheme = match args.get(9).map(|s| s.as_str()) {
        Some("sobol") => ilat::lattice::DescendantScheme::Sobol,
        Some("pseudo") => ilat::lattice::DescendantScheme::Pseudo,
        _ => ilat::lattice::DescendantScheme::Antithetic,
    };

    let params = MarketParams::from_vols_correlation(
        0.05,
        &[0.2, 0.3],
        &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        DVector::from_row_slice(&[100.0, 100.0]),
    )
    .unwrap();
    let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
    let tg = TimeGrid::new(1.0, 8).unwrap();
    let grid = build_grid(&params, 1.0, spread, n_grid, &SobolConfig::new(2)).unwrap();
    let grid = split(&grid, 0.2, 42).unwrap();
    let cfg = PricerConfig {
        style: ExerciseStyle::European,
        propagation: Propagation::Analytic,
        n_descendants: n_desc,
        descendant_scheme: scheme,
        fit: FitConfig {
            max_terms,
            patience,
            n_center_candidates: cands,
            n_precision_scales: scales,
            diagonal_precision: diag,
            seed: 42,
            ..FitConfig::default()
        },
        seed: 42,
        ..PricerConfig::default()
    };
    let start = std::time::Instant::now();
    let result = backward_induct(&params, &spec, &tg, &grid, &cfg).unwrap();
    println!(
        "spread={spread} n={n_grid} terms={max_terms} pat={patience} cands={cands} diag={diag}"
    );
    println!(
        "value0 = {}  (exact 11.500349)  err {:+.4}  [{:.1?}]",
        result.value0,
        result.value0 - 11.500349295500,
        start.elapsed()
    );
    // per-slice error injected at the spot: fit_t(x0) vs exact propagation
    // of the next fitted surface evaluated at x0
    let x0: Vec<f64> = params.log_spot().iter().cloned().collect();
    let disc = (-params.rate() * tg.dt).exp();
    for (t, (s, r)) in result
        .surfaces
        .iter()
        .zip(&result.fit_reports)
        .enumerate()
    {
        let center_err = if t + 1 < result.surfaces.len() {
            let next = &result.surfaces[t + 1];
            let prop =
                ilat::lattice::propagate_analytic(&next.mixture, &params, tg.dt, params.rate())
                    .unwrap();
            let exact = prop.eval_unchecked(&x0) + next.offset * disc;
            s.eval_unchecked(&x0) - exact
        } else {
            f64::NAN
        };
        println!(
            "slice {t}: terms={:3} coef_mass={:10.3e} offset={:+8.3} val_rms={:.3e} center_err={:+.4}",
            r.n_terms_selected, r.coef_mass, s.offset, r.residual_val_rms, center_err
        );
    }
}
