use rhl_core::agmodel::{fit_ag, log_partial_likelihood, CovariateSpec, FitOptions};
use rhl_core::curve::{uniform_grid, GridCurve};
use rhl_core::dataio::{ObservationWindow, RecurrentEventDataset, RecurrentEventRow};
use rhl_core::simulate::thinning_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // KS with fixed-count gap collection: first 50 gaps per replication
    let grid = uniform_grid(101);
    let ramp_values: Vec<f64> = grid.iter().map(|t| 200.0 * t).collect();
    let ramp = GridCurve::new(grid.clone(), ramp_values).unwrap();
    let mut gaps: Vec<f64> = Vec::new();
    let mut seed = 40_000u64;
    while gaps.len() < 6000 {
        let events = thinning_sample(&ramp, seed);
        let mut last = 0.0;
        for (i, t) in events.iter().enumerate() {
            if i >= 50 { break; }
            let rescaled = 100.0 * t * t;
            gaps.push(rescaled - last);
            last = rescaled;
        }
        seed += 1;
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = gaps.len() as f64;
    let mut d_stat = 0.0f64;
    for (i, g) in gaps.iter().enumerate() {
        let cdf = 1.0 - (-g).exp();
        d_stat = d_stat.max((i as f64 + 1.0) / m - cdf).max(cdf - i as f64 / m);
    }
    let d_crit = 1.6276 / m.sqrt();
    println!("ks fixed-count: n {} D {d_stat:.5} crit {d_crit:.5} pass {}", gaps.len(), d_stat < d_crit);

    // criterion 3 with denser, screened datasets
    let mut worst: f64 = 0.0;
    let mut used = 0;
    let mut ds_seed = 0u64;
    while used < 20 {
        ds_seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + ds_seed);
        let n_cov = 1 + (ds_seed as usize % 5).min(4);
        let n_units = 6;
        let mut rows = Vec::new();
        for u in 0..n_units {
            let n_events = rng.random_range(2..5usize);
            let mut times: Vec<f64> = (0..n_events).map(|_| rng.random_range(1..1000) as f64 / 1000.0).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup();
            let mut bounds = vec![0.0];
            bounds.extend(&times);
            bounds.push(1.0);
            for k in 0..bounds.len() - 1 {
                rows.push(RecurrentEventRow {
                    cluster_id: "c".into(),
                    unit_id: format!("u{u}"),
                    start: bounds[k],
                    stop: bounds[k + 1],
                    status: k < times.len(),
                    enum_count: k as u32,
                    marks: vec![],
                    covariates: (0..n_cov).map(|_| rng.random_range(-1.0..1.0)).collect(),
                });
            }
        }
        if rows.len() > 50 { continue; }
        let names: Vec<String> = (0..n_cov).map(|i| format!("x{i}")).collect();
        let dataset = RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], names.clone()).unwrap();
        let spec = CovariateSpec { x_names: names, z_names: vec![] };
        let Ok(fit) = fit_ag(&dataset, &spec, FitOptions::default()) else { continue; };
        if fit.coefficients().iter().any(|c| c.abs() > 5.0) { continue; }
        used += 1;

        let value_at = |c: &[f64]| log_partial_likelihood(&dataset, &spec, c).map(|(v, _, _)| v).unwrap_or(f64::NEG_INFINITY);
        let mut oracle = vec![0.0; n_cov];
        for _ in 0..300 {
            let mut moved = 0.0f64;
            for a in 0..n_cov {
                let current = {
                    let c = oracle.clone();
                    value_at(&c)
                };
                let mut best = (oracle[a], current);
                for step in [0.1, 0.01, 1e-3, 1e-4] {
                    let center = best.0;
                    let mut b = center - 12.0 * step;
                    while b <= center + 12.0 * step {
                        let mut c = oracle.clone();
                        c[a] = b;
                        let v = value_at(&c);
                        if v > best.1 { best = (b, v); }
                        b += step;
                    }
                }
                moved = moved.max((best.0 - oracle[a]).abs());
                oracle[a] = best.0;
            }
            if moved < 1e-5 { break; }
        }
        let max_diff = fit.coefficients().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        worst = worst.max(max_diff);
    }
    println!("criterion 3 (screened): worst |newton - oracle| = {worst:.2e} over {used} datasets");
}
