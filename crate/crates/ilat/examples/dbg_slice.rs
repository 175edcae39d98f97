// scratch: fit quality on one terminal-slice continuation target
use ilat::approx::{fit_rga, FitConfig, Points};
use ilat::gridgen::{build_grid, split, SobolConfig};
use ilat::lattice::{descendants, DescendantScheme};
use ilat::model::{payoff_log, MarketParams, PayoffKind, PayoffSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let max_terms: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let patience: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let scales: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cands: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4096);
    let diag: bool = args.get(6).map(|s| s == "diag").unwrap_or(false);
    let refine: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(12);

    let params = MarketParams::from_vols_correlation(
        0.05,
        &[0.2, 0.3],
        &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        DVector::from_row_slice(&[100.0, 100.0]),
    )
    .unwrap();
    let spec = PayoffSpec::new(PayoffKind::MinPut, 100.0);
    let tg = TimeGrid::new(1.0, 8).unwrap();
    let grid = build_grid(&params, 1.0, 1.5, n, &SobolConfig::new(2)).unwrap();
    let grid = split(&grid, 0.2, 42).unwrap();
    let disc = (-params.rate() * tg.dt).exp();

    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let cloud =
                descendants(grid.point(i), &params, tg.dt, 1024, DescendantScheme::Sobol, 7)
                    .unwrap();
            disc * cloud.chunks_exact(2).map(|y| payoff_log(&spec, y)).sum::<f64>() / 1024.0
        })
        .collect();

    let cfg = FitConfig {
        max_terms,
        patience,
        n_center_candidates: cands,
        n_precision_scales: scales,
        diagonal_precision: diag,
        refine_iters: refine,
        seed: 1,
        ..FitConfig::default()
    };
    let points = Points::new(grid.flat_data(), 2);
    let t0 = std::time::Instant::now();
    let (surface, report) = fit_rga(points, &ys, grid.train_idx(), grid.val_idx(), &cfg).unwrap();
    println!(
        "terms={} mass={:.3e} [{:?}]",
        report.n_terms_selected,
        report.coef_mass,
        t0.elapsed()
    );
    let tr = &report.val_mse_trace;
    for k in [0, 1, 2, 5, 10, 20, 40, 80, 150, 300] {
        if k < tr.len() {
            println!("  val rms after {k:3} terms: {:.4e}", tr[k].sqrt());
        }
    }
    let x0 = [100.0_f64.ln(), 100.0_f64.ln()];
    // high-accuracy reference at the spot
    let cloud = descendants(&x0, &params, tg.dt, 1 << 16, DescendantScheme::Sobol, 9).unwrap();
    let exact = disc * cloud.chunks_exact(2).map(|y| payoff_log(&spec, y)).sum::<f64>()
        / (1 << 16) as f64;
    println!(
        "center: fit {:.6} vs exact {:.6} (err {:+.4})",
        surface.eval_unchecked(&x0),
        exact,
        surface.eval_unchecked(&x0) - exact
    );
}
