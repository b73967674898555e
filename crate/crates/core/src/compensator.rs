//! Per-unit compensator reconstruction from a fitted model: the interval sum
//! `sum_k exp(eta_k) * [baseline(t_{k+1} ^ t) - baseline(t_k)]` over the
//! unit's rows, with covariates frozen at each interval's left endpoint.

use crate::agmodel::AGFit;
use crate::curve::{is_nondecreasing, GridCurve, MonotoneCubic};
use crate::dataio::{RecurrentEventDataset, RecurrentEventRow};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::io::{BufRead, Write};
use std::path::Path;

/// Compensator curves of all units on a shared grid, rows ordered by
/// (cluster_id, unit_id).
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorSet {
    grid: Vec<f64>,
    /// n x |grid|.
    curves: DMatrix<f64>,
    cluster_ids: Vec<String>,
    unit_ids: Vec<String>,
}

impl CompensatorSet {
    pub fn new(
        grid: Vec<f64>,
        curves: DMatrix<f64>,
        cluster_ids: Vec<String>,
        unit_ids: Vec<String>,
    ) -> Result<Self> {
        let n = curves.nrows();
        if curves.ncols() != grid.len() || cluster_ids.len() != n || unit_ids.len() != n || n == 0 {
            return Err(Error::InvalidValue {
                context: "CompensatorSet".into(),
                detail: "curve matrix, grid, and label lengths disagree".into(),
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            (cluster_ids[a].as_str(), unit_ids[a].as_str())
                .cmp(&(cluster_ids[b].as_str(), unit_ids[b].as_str()))
        });
        let curves = DMatrix::from_fn(n, grid.len(), |i, j| curves[(order[i], j)]);
        let cluster_ids: Vec<String> = order.iter().map(|&i| cluster_ids[i].clone()).collect();
        let unit_ids: Vec<String> = order.iter().map(|&i| unit_ids[i].clone()).collect();
        for i in 0..n {
            let row: Vec<f64> = curves.row(i).iter().copied().collect();
            if row[0].abs() > 1e-9 || !is_nondecreasing(&row) {
                return Err(Error::InvalidValue {
                    context: "CompensatorSet".into(),
                    detail: format!("curve of unit {} is not cumulative", unit_ids[i]),
                });
            }
        }
        Ok(Self {
            grid,
            curves,
            cluster_ids,
            unit_ids,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.curves
    }

    pub fn n_curves(&self) -> usize {
        self.curves.nrows()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn curve(&self, i: usize) -> GridCurve {
        GridCurve::new(self.grid.clone(), self.curves.row(i).iter().copied().collect())
            .expect("stored rows are valid curves")
    }

    /// Long-format export: `cluster_id,unit_id,t,value`.
    pub fn write_long_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "cluster_id,unit_id,t,value")?;
        for i in 0..self.n_curves() {
            for (j, t) in self.grid.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    self.cluster_ids[i],
                    self.unit_ids[i],
                    t,
                    self.curves[(i, j)]
                )?;
            }
        }
        Ok(())
    }

    /// Read curves written by [`write_long_csv`]; every unit must cover the
    /// same grid in the same order.
    pub fn read_long_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "cluster_id,unit_id,t,value" {
            return Err(Error::MissingColumn(
                "cluster_id,unit_id,t,value header".into(),
            ));
        }
        let mut grid: Vec<f64> = Vec::new();
        let mut rows: Vec<(String, String, Vec<f64>)> = Vec::new();
        let mut first = true;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(4, ',');
            let (c, u, t, v) = (
                parts.next().unwrap_or_default().to_string(),
                parts.next().unwrap_or_default().to_string(),
                parts.next().unwrap_or_default(),
                parts.next().unwrap_or_default(),
            );
            let t: f64 = t.parse().map_err(|_| Error::Parse {
                context: "curve grid point".into(),
                value: t.into(),
            })?;
            let v: f64 = v.parse().map_err(|_| Error::Parse {
                context: "curve value".into(),
                value: v.into(),
            })?;
            let new_unit = match rows.last() {
                Some((lc, lu, _)) => *lc != c || *lu != u,
                None => true,
            };
            if new_unit {
                if !rows.is_empty() {
                    first = false;
                }
                rows.push((c, u, Vec::new()));
            }
            let (_, _, values) = rows.last_mut().unwrap();
            if first {
                grid.push(t);
            } else {
                let j = values.len();
                if j >= grid.len() || (grid[j] - t).abs() > 1e-12 {
                    return Err(Error::BasisMismatch {
                        detail: "curves do not share one grid".into(),
                    });
                }
            }
            values.push(v);
        }
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = rows.len();
        for (_, u, values) in &rows {
            if values.len() != grid.len() {
                return Err(Error::BasisMismatch {
                    detail: format!("unit {u} covers {} of {} grid points", values.len(), grid.len()),
                });
            }
        }
        let curves = DMatrix::from_fn(n, grid.len(), |i, j| rows[i].2[j]);
        let cluster_ids = rows.iter().map(|(c, _, _)| c.clone()).collect();
        let unit_ids = rows.iter().map(|(_, u, _)| u.clone()).collect();
        Self::new(grid, curves, cluster_ids, unit_ids)
    }
}

/// Evaluate one unit's reconstructed compensator on `grid`.
///
/// The row covering `(start, stop]` contributes
/// `exp(eta) * [baseline(stop ^ t) - baseline(start)]` once `t` passes its
/// start; between rows (no observation) the compensator is flat.
pub fn reconstruct_compensator(
    unit_rows: &[RecurrentEventRow],
    dataset: &RecurrentEventDataset,
    fit: &AGFit,
    baseline: &GridCurve,
    grid: &[f64],
) -> Result<GridCurve> {
    let interp = MonotoneCubic::new(baseline.grid().to_vec(), baseline.values().to_vec())?;
    reconstruct_with_interpolant(unit_rows, dataset, fit, &interp, baseline, grid)
}

fn reconstruct_with_interpolant(
    unit_rows: &[RecurrentEventRow],
    dataset: &RecurrentEventDataset,
    fit: &AGFit,
    interp: &MonotoneCubic,
    baseline: &GridCurve,
    grid: &[f64],
) -> Result<GridCurve> {
    if grid.is_empty()
        || grid[0] < baseline.start() - 1e-12
        || *grid.last().unwrap() > baseline.end() + 1e-12
    {
        return Err(Error::GridOutsideBaseline {
            lo: baseline.start(),
            hi: baseline.end(),
        });
    }

    // prefix[k]: compensator value accumulated over rows 0..k, evaluated at
    // the k-th row's start
    let mut weights = Vec::with_capacity(unit_rows.len());
    let mut prefix = Vec::with_capacity(unit_rows.len() + 1);
    prefix.push(0.0);
    for row in unit_rows {
        let eta = fit.linear_predictor(dataset, row);
        if eta.abs() > 700.0 {
            return Err(Error::NumericalOverflow { eta });
        }
        let w = eta.exp();
        weights.push(w);
        let increment = (w * (interp.eval(row.stop) - interp.eval(row.start))).max(0.0);
        prefix.push(prefix.last().unwrap() + increment);
    }

    let mut values = Vec::with_capacity(grid.len());
    let mut k = 0usize; // first row with stop >= t
    let mut previous = f64::NEG_INFINITY;
    for &t in grid {
        while k < unit_rows.len() && unit_rows[k].stop < t {
            k += 1;
        }
        let v = if k == unit_rows.len() {
            prefix[k]
        } else {
            let row = &unit_rows[k];
            if t <= row.start {
                prefix[k]
            } else {
                prefix[k] + weights[k] * (interp.eval(t) - interp.eval(row.start))
            }
        };
        // increments are nonnegative up to rounding of the interpolant
        let v = v.max(previous).max(0.0);
        previous = v;
        values.push(v);
    }
    GridCurve::new(grid.to_vec(), values)
}

/// Reconstruct every unit of the dataset onto a shared grid.
pub fn reconstruct_all(
    dataset: &RecurrentEventDataset,
    fit: &AGFit,
    baseline: &GridCurve,
    grid: &[f64],
) -> Result<CompensatorSet> {
    let interp = MonotoneCubic::new(baseline.grid().to_vec(), baseline.values().to_vec())?;
    let n = dataset.n_units();
    let mut curves = DMatrix::zeros(n, grid.len());
    let mut cluster_ids = Vec::with_capacity(n);
    let mut unit_ids = Vec::with_capacity(n);
    for (i, unit) in dataset.units().iter().enumerate() {
        let curve = reconstruct_with_interpolant(
            dataset.unit_rows(unit),
            dataset,
            fit,
            &interp,
            baseline,
            grid,
        )?;
        for (j, v) in curve.values().iter().enumerate() {
            curves[(i, j)] = *v;
        }
        cluster_ids.push(unit.cluster_id.clone());
        unit_ids.push(unit.unit_id.clone());
    }
    CompensatorSet::new(grid.to_vec(), curves, cluster_ids, unit_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agmodel::{fit_ag, CovariateSpec, FitOptions};
    use crate::curve::uniform_grid;
    use crate::dataio::ObservationWindow;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn row(
        unit: &str,
        start: f64,
        stop: f64,
        status: bool,
        enum_count: u32,
        covariates: Vec<f64>,
    ) -> RecurrentEventRow {
        RecurrentEventRow {
            cluster_id: "c1".into(),
            unit_id: unit.into(),
            start,
            stop,
            status,
            enum_count,
            marks: Vec::new(),
            covariates,
        }
    }

    /// Fit whose coefficient on the single covariate `x` is pinned by hand.
    fn pinned_fit(dataset: &RecurrentEventDataset, beta: f64) -> AGFit {
        AGFit {
            beta: vec![beta],
            theta: vec![],
            covariance: DMatrix::zeros(1, 1),
            loglik: 0.0,
            iterations: 0,
            converged: true,
            tie_method: "breslow".into(),
            x_names: vec!["x".into()],
            z_names: vec![],
            columns: vec![dataset.column("x").unwrap()],
        }
    }

    fn identity_baseline(n: usize) -> GridCurve {
        let grid = uniform_grid(n);
        GridCurve::cumulative(grid.clone(), grid.clone()).unwrap()
    }

    #[test]
    fn zero_coefficients_reproduce_the_baseline() {
        let rows = vec![
            row("u1", 0.0, 0.3, true, 0, vec![0.7]),
            row("u1", 0.3, 1.0, false, 1, vec![-0.2]),
        ];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec!["x".into()])
                .unwrap();
        let fit = pinned_fit(&dataset, 0.0);
        let baseline = identity_baseline(101);
        let grid = uniform_grid(101);
        let curve =
            reconstruct_compensator(dataset.rows(), &dataset, &fit, &baseline, &grid).unwrap();
        for (v, b) in curve.values().iter().zip(baseline.values()) {
            assert_abs_diff_eq!(*v, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_two_interval_sum() {
        // one jump at 0.5; covariate switches 0 -> 1 at the jump; beta = ln 2
        let rows = vec![
            row("u1", 0.0, 0.5, true, 0, vec![0.0]),
            row("u1", 0.5, 1.0, false, 1, vec![1.0]),
        ];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec!["x".into()])
                .unwrap();
        let fit = pinned_fit(&dataset, 2.0f64.ln());
        let baseline = identity_baseline(201);
        let grid = uniform_grid(201);
        let curve =
            reconstruct_compensator(dataset.rows(), &dataset, &fit, &baseline, &grid).unwrap();
        for (t, v) in grid.iter().zip(curve.values()) {
            let expected = if *t <= 0.5 { *t } else { 0.5 + 2.0 * (t - 0.5) };
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(curve.values()[0], 0.0);
    }

    #[test]
    fn constant_covariates_scale_the_baseline_exactly() {
        let rows = vec![
            row("u1", 0.0, 0.4, true, 0, vec![0.5]),
            row("u1", 0.4, 1.0, false, 1, vec![0.5]),
        ];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec!["x".into()])
                .unwrap();
        let beta = 0.9;
        let fit = pinned_fit(&dataset, beta);
        let baseline = identity_baseline(101);
        let grid = uniform_grid(101);
        let curve =
            reconstruct_compensator(dataset.rows(), &dataset, &fit, &baseline, &grid).unwrap();
        let factor = (beta * 0.5).exp();
        for (t, v) in grid.iter().zip(curve.values()) {
            assert_abs_diff_eq!(*v, factor * t, epsilon = 1e-10);
        }
    }

    #[test]
    fn refining_the_grid_preserves_shared_points() {
        let rows = vec![
            row("u1", 0.0, 0.35, true, 0, vec![1.0]),
            row("u1", 0.35, 1.0, false, 1, vec![-1.0]),
        ];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec!["x".into()])
                .unwrap();
        let fit = pinned_fit(&dataset, 0.6);
        let baseline = identity_baseline(501);
        let coarse = uniform_grid(11);
        let fine = uniform_grid(101);
        let on_coarse =
            reconstruct_compensator(dataset.rows(), &dataset, &fit, &baseline, &coarse).unwrap();
        let on_fine =
            reconstruct_compensator(dataset.rows(), &dataset, &fit, &baseline, &fine).unwrap();
        for (i, t) in coarse.iter().enumerate() {
            let j = fine.iter().position(|x| (x - t).abs() < 1e-12).unwrap();
            assert_abs_diff_eq!(on_coarse.values()[i], on_fine.values()[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn evaluation_outside_baseline_domain_is_rejected() {
        let rows = vec![row("u1", 0.0, 1.0, false, 0, vec![])];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec![]).unwrap();
        let fit = {
            let rows2 = vec![
                row("u1", 0.0, 0.5, true, 0, vec![]),
                row("u1", 0.5, 1.0, false, 1, vec![]),
            ];
            let d2 = RecurrentEventDataset::new(rows2, ObservationWindow::unit(), vec![], vec![])
                .unwrap();
            fit_ag(&d2, &CovariateSpec::empty(), FitOptions::default()).unwrap()
        };
        let half_grid: Vec<f64> = uniform_grid(11).iter().map(|t| t * 0.5).collect();
        let baseline = GridCurve::cumulative(half_grid.clone(), half_grid.clone()).unwrap();
        let err = reconstruct_compensator(
            dataset.rows(),
            &dataset,
            &fit,
            &baseline,
            &uniform_grid(11),
        )
        .unwrap_err();
        assert!(matches!(err, Error::GridOutsideBaseline { .. }));
    }

    #[test]
    fn identical_units_yield_identical_curves_in_canonical_order() {
        let rows = vec![
            row("u2", 0.0, 0.5, true, 0, vec![]),
            row("u2", 0.5, 1.0, false, 1, vec![]),
            row("u1", 0.0, 0.5, true, 0, vec![]),
            row("u1", 0.5, 1.0, false, 1, vec![]),
        ];
        let dataset =
            RecurrentEventDataset::new(rows, ObservationWindow::unit(), vec![], vec![]).unwrap();
        let fit = fit_ag(&dataset, &CovariateSpec::empty(), FitOptions::default()).unwrap();
        let baseline = identity_baseline(51);
        let grid = uniform_grid(51);
        let set = reconstruct_all(&dataset, &fit, &baseline, &grid).unwrap();
        assert_eq!(set.unit_ids(), &["u1".to_string(), "u2".to_string()]);
        for j in 0..grid.len() {
            assert_abs_diff_eq!(set.matrix()[(0, j)], set.matrix()[(1, j)], epsilon = 1e-14);
        }
        for i in 0..set.n_curves() {
            let values: Vec<f64> = set.matrix().row(i).iter().copied().collect();
            assert!(crate::curve::is_nondecreasing(&values));
        }
    }

    #[test]
    fn long_csv_round_trip() {
        let grid = uniform_grid(6);
        let curves = DMatrix::from_row_slice(
            2,
            6,
            &[
                0.0, 0.1, 0.2, 0.4, 0.8, 1.6, //
                0.0, 0.3, 0.6, 0.9, 1.2, 1.5,
            ],
        );
        let set = CompensatorSet::new(
            grid,
            curves,
            vec!["c1".into(), "c2".into()],
            vec!["u1".into(), "u2".into()],
        )
        .unwrap();
        let mut buffer = Vec::new();
        set.write_long_csv(&mut buffer).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        std::fs::write(&path, &buffer).unwrap();
        let reread = CompensatorSet::read_long_csv(&path).unwrap();
        assert_eq!(set, reread);
    }
}
