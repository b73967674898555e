//! Proportional-intensity model for recurrent events in start/stop format:
//! partial-likelihood Newton fit, Breslow baseline, monotone smoothing, and
//! martingale residuals.
//!
//! The intensity is `Y(t) * lambda_0(t) * exp(beta'x(t) + theta'z(t))`; rows
//! carry left-continuous covariates (values measured at the row start) and
//! ties across units share the Breslow denominator.

use crate::compensator::CompensatorSet;
use crate::curve::{GridCurve, MonotoneCubic, StepFunction};
use crate::dataio::{ColumnRef, RecurrentEventDataset, RecurrentEventRow};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Names of the covariates entering the `beta` (x) and `theta` (z) terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateSpec {
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl CovariateSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_z(names: &[&str]) -> Self {
        Self {
            x_names: Vec::new(),
            z_names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x_names.len() + self.z_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolve names against the dataset; x and z must be disjoint and exist.
    pub fn resolve(&self, dataset: &RecurrentEventDataset) -> Result<Vec<ColumnRef>> {
        if self.x_names.iter().any(|x| self.z_names.contains(x)) {
            return Err(Error::InvalidValue {
                context: "CovariateSpec".into(),
                detail: "x and z covariate sets must be disjoint".into(),
            });
        }
        self.x_names
            .iter()
            .chain(&self.z_names)
            .map(|name| {
                dataset.column(name).ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect()
    }
}

/// Options of the Newton partial-likelihood maximizer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Fitted model: coefficient estimates, observed-information covariance, and
/// the convergence record.
#[derive(Debug, Clone)]
pub struct AGFit {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    /// Inverse observed information, (Q+P) x (Q+P).
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tie_method: String,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub(crate) columns: Vec<ColumnRef>,
}

impl AGFit {
    /// beta followed by theta.
    pub fn coefficients(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.theta).copied().collect()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        self.x_names.iter().chain(&self.z_names).cloned().collect()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.covariance.nrows())
            .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }

    /// Two-sided Wald p-values against the standard normal.
    pub fn wald_p_values(&self) -> Vec<f64> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        self.coefficients()
            .iter()
            .zip(self.standard_errors())
            .map(|(c, se)| {
                if se == 0.0 {
                    f64::NAN
                } else {
                    2.0 * (1.0 - normal.cdf((c / se).abs()))
                }
            })
            .collect()
    }

    /// Linear predictor of one row under the fitted coefficients.
    pub(crate) fn linear_predictor(&self, dataset: &RecurrentEventDataset, row: &RecurrentEventRow) -> f64 {
        let coeffs = self.coefficients();
        self.columns
            .iter()
            .zip(&coeffs)
            .map(|(col, c)| c * dataset.row_value(row, *col))
            .sum()
    }
}

/// Per-unit view with resolved covariate values, shared by the likelihood,
/// the baseline estimator, and the reconstruction.
struct ResolvedData {
    /// Per unit: (start, stop, status, covariate vector) sorted by start.
    units: Vec<Vec<(f64, f64, bool, Vec<f64>)>>,
    /// Distinct event times, ascending, with multiplicity.
    event_times: Vec<(f64, usize)>,
    dim: usize,
}

fn resolve_data(dataset: &RecurrentEventDataset, columns: &[ColumnRef]) -> Result<ResolvedData> {
    let mut units = Vec::with_capacity(dataset.n_units());
    let mut all_events = Vec::new();
    for unit in dataset.units() {
        let rows = dataset.unit_rows(unit);
        let mut resolved = Vec::with_capacity(rows.len());
        for row in rows {
            let covs: Vec<f64> = columns.iter().map(|c| dataset.row_value(row, *c)).collect();
            if row.status {
                all_events.push(row.stop);
            }
            resolved.push((row.start, row.stop, row.status, covs));
        }
        units.push(resolved);
    }
    if all_events.is_empty() {
        return Err(Error::NoEvents);
    }
    all_events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut event_times: Vec<(f64, usize)> = Vec::new();
    for t in all_events {
        match event_times.last_mut() {
            Some((last, d)) if *last == t => *d += 1,
            _ => event_times.push((t, 1)),
        }
    }
    Ok(ResolvedData {
        units,
        event_times,
        dim: columns.len(),
    })
}

const ETA_LIMIT: f64 = 700.0;

/// Log partial likelihood with analytic gradient and hessian.
///
/// Sums, over event rows, the event's linear predictor minus the log of the
/// risk-set sum of `exp(eta)`; the risk set at time `t` holds the rows with
/// `start < t <= stop`.
pub fn log_partial_likelihood(
    dataset: &RecurrentEventDataset,
    spec: &CovariateSpec,
    coeffs: &[f64],
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let columns = spec.resolve(dataset)?;
    let data = resolve_data(dataset, &columns)?;
    partial_likelihood_inner(&data, coeffs)
}

fn partial_likelihood_inner(
    data: &ResolvedData,
    coeffs: &[f64],
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let p = data.dim;
    assert_eq!(coeffs.len(), p, "coefficient length must match the covariate spec");
    let mut value = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);

    // per-unit pointer to the row whose interval can still cover the next
    // event time; rows are sorted so pointers only advance
    let mut ptr = vec![0usize; data.units.len()];
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);

    for &(t, _d) in &data.event_times {
        let mut s0 = 0.0;
        s1.fill(0.0);
        s2.fill(0.0);
        let mut n_events_here = 0usize;

        for (u, rows) in data.units.iter().enumerate() {
            while ptr[u] < rows.len() && rows[ptr[u]].1 < t {
                ptr[u] += 1;
            }
            let Some((start, stop, status, covs)) = rows.get(ptr[u]) else {
                continue;
            };
            if !(*start < t && t <= *stop) {
                continue;
            }
            let eta: f64 = covs.iter().zip(coeffs).map(|(x, c)| x * c).sum();
            if eta.abs() > ETA_LIMIT {
                return Err(Error::NumericalOverflow { eta });
            }
            let w = eta.exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * covs[a];
                for b in 0..=a {
                    s2[(a, b)] += w * covs[a] * covs[b];
                }
            }
            if *status && *stop == t {
                n_events_here += 1;
                value += eta;
                for a in 0..p {
                    grad[a] += covs[a];
                }
            }
        }

        debug_assert!(n_events_here > 0, "every event time must have an event row at risk");
        let d = n_events_here as f64;
        value -= d * s0.ln();
        let inv_s0 = 1.0 / s0;
        for a in 0..p {
            let mean_a = s1[a] * inv_s0;
            grad[a] -= d * mean_a;
            for b in 0..=a {
                let mean_b = s1[b] * inv_s0;
                let h = d * (s2[(a, b)] * inv_s0 - mean_a * mean_b);
                hess[(a, b)] -= h;
                if a != b {
                    hess[(b, a)] -= h;
                }
            }
        }
    }
    Ok((value, grad, hess))
}

/// Newton maximization with step-halving from the zero start.
pub fn fit_ag(
    dataset: &RecurrentEventDataset,
    spec: &CovariateSpec,
    options: FitOptions,
) -> Result<AGFit> {
    let columns = spec.resolve(dataset)?;
    let data = resolve_data(dataset, &columns)?;
    let p = data.dim;

    let sup_norm = |g: &DVector<f64>| if g.is_empty() { 0.0 } else { g.amax() };
    let mut coeffs = vec![0.0; p];
    let (mut value, mut grad, mut hess) = partial_likelihood_inner(&data, &coeffs)?;
    let mut iterations = 0;
    let mut converged = sup_norm(&grad) <= options.tol;

    while !converged {
        if iterations >= options.max_iter {
            return Err(Error::NotConverged {
                max_iter: options.max_iter,
                grad_norm: sup_norm(&grad),
            });
        }
        iterations += 1;

        let info = -&hess;
        let chol = info.clone().cholesky().ok_or(Error::SingularInformation {
            context: "partial likelihood".into(),
        })?;
        let direction = chol.solve(&grad);

        // monotone ascent up to rounding: halve the step until the log
        // likelihood stops decreasing beyond the fp noise of its magnitude
        let slack = 1e-12 * value.abs().max(1.0);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let candidate: Vec<f64> = coeffs
                .iter()
                .zip(direction.iter())
                .map(|(c, d)| c + step * d)
                .collect();
            match partial_likelihood_inner(&data, &candidate) {
                Ok((v, g, h)) if v.is_finite() && v >= value - slack => {
                    accepted = Some((candidate, v, g, h));
                    break;
                }
                Ok(_) | Err(Error::NumericalOverflow { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((candidate, v, g, h)) = accepted else {
            return Err(Error::NotConverged {
                max_iter: options.max_iter,
                grad_norm: sup_norm(&grad),
            });
        };

        let rel_change = ((v - value) / value.abs().max(1.0)).abs();
        let previous_grad_norm = sup_norm(&grad);
        coeffs = candidate;
        value = v;
        grad = g;
        hess = h;
        if sup_norm(&grad) <= options.tol {
            converged = true;
        } else if rel_change <= 1e-12 && sup_norm(&grad) >= 0.5 * previous_grad_norm {
            // stalled: likelihood flat and the gradient no longer shrinking
            break;
        }
    }

    let covariance = if p == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let info = -&hess;
        info.clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::SingularInformation {
                context: "observed information at the optimum".into(),
            })?
    };

    let q = spec.x_names.len();
    Ok(AGFit {
        beta: coeffs[..q].to_vec(),
        theta: coeffs[q..].to_vec(),
        covariance,
        loglik: value,
        iterations,
        converged,
        tie_method: "breslow".into(),
        x_names: spec.x_names.clone(),
        z_names: spec.z_names.clone(),
        columns,
    })
}

/// Breslow estimator of the baseline cumulative hazard: a jump of
/// `d_k / sum_{risk set} exp(eta_hat)` at every distinct event time.
pub fn breslow_baseline(
    dataset: &RecurrentEventDataset,
    fit: &AGFit,
) -> Result<StepFunction> {
    let data = resolve_data(dataset, &fit.columns)?;
    let coeffs = fit.coefficients();
    let mut ptr = vec![0usize; data.units.len()];
    let mut jump_times = Vec::with_capacity(data.event_times.len());
    let mut cum_values = Vec::with_capacity(data.event_times.len());
    let mut cum = 0.0;

    for &(t, d) in &data.event_times {
        let mut s0 = 0.0;
        for (u, rows) in data.units.iter().enumerate() {
            while ptr[u] < rows.len() && rows[ptr[u]].1 < t {
                ptr[u] += 1;
            }
            let Some((start, stop, _, covs)) = rows.get(ptr[u]) else {
                continue;
            };
            if !(*start < t && t <= *stop) {
                continue;
            }
            let eta: f64 = covs.iter().zip(&coeffs).map(|(x, c)| x * c).sum();
            if eta.abs() > ETA_LIMIT {
                return Err(Error::NumericalOverflow { eta });
            }
            s0 += eta.exp();
        }
        cum += d as f64 / s0;
        jump_times.push(t);
        cum_values.push(cum);
    }
    StepFunction::new(jump_times, cum_values)
}

/// The monotone C1 interpolant through `(0, 0)` and every Breslow knot,
/// extended flat to the window end.
pub fn baseline_interpolant(step: &StepFunction, t_end: f64) -> Result<MonotoneCubic> {
    let mut x = vec![0.0];
    let mut y = vec![0.0];
    for (t, v) in step.jump_times().iter().zip(step.cum_values()) {
        if *t > t_end + 1e-12 {
            return Err(Error::GridOutsideBaseline { lo: 0.0, hi: t_end });
        }
        x.push(*t);
        y.push(*v);
    }
    if let Some(last) = x.last() {
        if *last < t_end {
            x.push(t_end);
            y.push(*y.last().unwrap());
        }
    }
    MonotoneCubic::new(x, y)
}

/// Smooth the Breslow step function onto a grid: monotone, exact at knots.
pub fn smooth_baseline(step: &StepFunction, grid: &[f64]) -> Result<GridCurve> {
    if grid.len() < 2 || grid[0] != 0.0 {
        return Err(Error::InvalidValue {
            context: "smooth_baseline".into(),
            detail: "grid must start at 0 and contain at least 2 points".into(),
        });
    }
    let interp = baseline_interpolant(step, *grid.last().unwrap())?;
    let mut values = interp.sample(grid);
    // the interpolant is monotone; a running max removes rounding-level dips
    for i in 1..values.len() {
        if values[i] < values[i - 1] {
            values[i] = values[i - 1];
        }
    }
    GridCurve::cumulative(grid.to_vec(), values)
}

/// Martingale residual per unit at the window end: `N(T) - Lambda_hat(T)`,
/// ordered like the compensator set.
pub fn martingale_residuals(
    dataset: &RecurrentEventDataset,
    compensators: &CompensatorSet,
) -> Result<Vec<f64>> {
    if dataset.n_units() != compensators.n_curves() {
        return Err(Error::UnitMismatch {
            detail: format!(
                "{} dataset units vs {} curves",
                dataset.n_units(),
                compensators.n_curves()
            ),
        });
    }
    dataset
        .units()
        .iter()
        .enumerate()
        .map(|(i, unit)| {
            if compensators.unit_ids()[i] != unit.unit_id
                || compensators.cluster_ids()[i] != unit.cluster_id
            {
                return Err(Error::UnitMismatch {
                    detail: format!("unit {} out of alignment", unit.unit_id),
                });
            }
            let n_t = dataset.unit_event_count(unit) as f64;
            Ok(n_t - compensators.curve(i).values().last().copied().unwrap_or(0.0))
        })
        .collect()
}
