//! Functions sampled on a grid, step functions, and the monotone interpolant
//! shared by the baseline smoother and the compensator reconstruction.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A function sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl GridCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::InvalidValue {
                context: "GridCurve".into(),
                detail: format!("grid length {} != values length {}", grid.len(), values.len()),
            });
        }
        if grid.len() < 2 {
            return Err(Error::InvalidValue {
                context: "GridCurve".into(),
                detail: "need at least 2 grid points".into(),
            });
        }
        if !is_strictly_increasing(&grid) {
            return Err(Error::InvalidValue {
                context: "GridCurve".into(),
                detail: "grid must be strictly increasing and finite".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue {
                context: "GridCurve".into(),
                detail: "values must be finite".into(),
            });
        }
        Ok(Self { grid, values })
    }

    /// A curve flagged cumulative: nondecreasing with value 0 at the grid start.
    pub fn cumulative(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let curve = Self::new(grid, values)?;
        if curve.values[0].abs() > 1e-12 {
            return Err(Error::InvalidValue {
                context: "GridCurve::cumulative".into(),
                detail: format!("first value must be 0, got {}", curve.values[0]),
            });
        }
        if !is_nondecreasing(&curve.values) {
            return Err(Error::InvalidValue {
                context: "GridCurve::cumulative".into(),
                detail: "values must be nondecreasing".into(),
            });
        }
        Ok(curve)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.grid[0]
    }

    pub fn end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Piecewise-linear evaluation; clamps outside the grid range.
    pub fn eval_linear(&self, t: f64) -> f64 {
        let g = &self.grid;
        let v = &self.values;
        if t <= g[0] {
            return v[0];
        }
        if t >= g[g.len() - 1] {
            return v[v.len() - 1];
        }
        // first index with g[idx] > t; t lives in (g[idx-1], g[idx]]
        let idx = g.partition_point(|&x| x <= t);
        let (x0, x1) = (g[idx - 1], g[idx]);
        let w = (t - x0) / (x1 - x0);
        v[idx - 1] * (1.0 - w) + v[idx] * w
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_grid(&self, other: &GridCurve) -> bool {
        self.grid == other.grid
    }
}

/// A nondecreasing step function with value 0 before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    jump_times: Vec<f64>,
    cum_values: Vec<f64>,
}

impl StepFunction {
    pub fn new(jump_times: Vec<f64>, cum_values: Vec<f64>) -> Result<Self> {
        if jump_times.len() != cum_values.len() {
            return Err(Error::InvalidValue {
                context: "StepFunction".into(),
                detail: "jump_times and cum_values must have equal length".into(),
            });
        }
        if !is_strictly_increasing(&jump_times) {
            return Err(Error::InvalidValue {
                context: "StepFunction".into(),
                detail: "jump times must be strictly increasing and finite".into(),
            });
        }
        if !is_nondecreasing(&cum_values) || cum_values.first().map_or(false, |&v| v < 0.0) {
            return Err(Error::InvalidValue {
                context: "StepFunction".into(),
                detail: "cumulative values must be nonnegative and nondecreasing".into(),
            });
        }
        Ok(Self {
            jump_times,
            cum_values,
        })
    }

    /// The identically-zero step function.
    pub fn zero() -> Self {
        Self {
            jump_times: Vec::new(),
            cum_values: Vec::new(),
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn cum_values(&self) -> &[f64] {
        &self.cum_values
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Right-continuous evaluation: the cumulative value of the last jump at or before `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&x| x <= t);
        if idx == 0 {
            0.0
        } else {
            self.cum_values[idx - 1]
        }
    }
}

/// Monotone piecewise-cubic Hermite interpolant with Fritsch-Carlson slopes.
///
/// Exact at the knots and C1; preserves monotone runs of the data, so a
/// nondecreasing input yields a nondecreasing interpolant.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::InvalidValue {
                context: "MonotoneCubic".into(),
                detail: "need >= 2 knots with matching values".into(),
            });
        }
        if !is_strictly_increasing(&x) {
            return Err(Error::InvalidValue {
                context: "MonotoneCubic".into(),
                detail: "knot abscissae must be strictly increasing".into(),
            });
        }
        let slope = fritsch_carlson_slopes(&x, &y);
        Ok(Self { x, y, slope })
    }

    /// Hermite evaluation; constant extension outside the knot range.
    pub fn eval(&self, t: f64) -> f64 {
        let x = &self.x;
        let n = x.len();
        if t <= x[0] {
            return self.y[0];
        }
        if t >= x[n - 1] {
            return self.y[n - 1];
        }
        let idx = x.partition_point(|&v| v <= t) - 1;
        let h = x[idx + 1] - x[idx];
        let s = (t - x[idx]) / h;
        let (y0, y1) = (self.y[idx], self.y[idx + 1]);
        let (d0, d1) = (self.slope[idx], self.slope[idx + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
    }

    /// Sample the interpolant on a grid.
    pub fn sample(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.eval(t)).collect()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }
}

/// Fritsch-Carlson shape-preserving slopes for monotone cubic interpolation.
fn fritsch_carlson_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();

    if n == 2 {
        return vec![delta[0], delta[0]];
    }

    let mut d = vec![0.0; n];
    // interior: weighted harmonic mean when the secants share a sign, else 0
    for i in 1..n - 1 {
        let (dl, dr) = (delta[i - 1], delta[i]);
        if dl == 0.0 || dr == 0.0 || dl.signum() != dr.signum() {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / dl + w2 / dr);
        }
    }
    d[0] = boundary_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = boundary_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn boundary_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    if del0 == 0.0 {
        return 0.0;
    }
    let mut d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        d = 0.0;
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        d = 3.0 * del0;
    }
    d
}

/// `n` equispaced points on `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least 2 points");
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { 1.0 } else { i as f64 * h })
        .collect()
}

/// Trapezoid quadrature weights for a (possibly non-uniform) grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    assert!(n >= 2);
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = grid[i + 1] - grid[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Quadrature inner product sum(w * f * g).
pub fn inner_product(weights: &[f64], f: &[f64], g: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), f.len());
    debug_assert_eq!(weights.len(), g.len());
    let mut acc = 0.0;
    for i in 0..weights.len() {
        acc += weights[i] * f[i] * g[i];
    }
    acc
}

/// Cumulative trapezoid integral of values sampled on `grid`, anchored at 0.
pub fn cumulative_trapezoid(grid: &[f64], values: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut out = vec![0.0; n];
    for i in 1..n {
        let h = grid[i] - grid[i - 1];
        out[i] = out[i - 1] + 0.5 * h * (values[i] + values[i - 1]);
    }
    out
}

pub fn is_strictly_increasing(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite()) && xs.windows(2).all(|w| w[0] < w[1])
}

pub fn is_nondecreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] <= w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn step_function_eval() {
        let s = StepFunction::new(vec![1.0, 2.0], vec![0.5, 1.25]).unwrap();
        assert_eq!(s.eval(0.5), 0.0);
        assert_eq!(s.eval(1.0), 0.5);
        assert_eq!(s.eval(1.5), 0.5);
        assert_eq!(s.eval(2.0), 1.25);
        assert_eq!(s.eval(9.0), 1.25);
    }

    #[test]
    fn cumulative_curve_rejects_decreasing() {
        let err = GridCurve::cumulative(vec![0.0, 0.5, 1.0], vec![0.0, 0.4, 0.3]);
        assert!(err.is_err());
    }

    #[test]
    fn monotone_cubic_is_exact_on_linear_data() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|&t| 3.0 * t + 1.0).collect();
        let m = MonotoneCubic::new(x, y).unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert_abs_diff_eq!(m.eval(t), 3.0 * t + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn monotone_cubic_interpolates_knots() {
        let x = vec![0.0, 0.13, 0.5, 0.9, 1.0];
        let y = vec![0.0, 0.2, 0.21, 2.0, 2.0];
        let m = MonotoneCubic::new(x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_abs_diff_eq!(m.eval(*xi), *yi, epsilon = 1e-12);
        }
    }

    #[test]
    fn trapezoid_weights_sum_to_span() {
        let g = uniform_grid(101);
        let w = trapezoid_weights(&g);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cumulative_trapezoid_of_constant() {
        let g = uniform_grid(11);
        let v = vec![2.0; 11];
        let c = cumulative_trapezoid(&g, &v);
        for (t, ci) in g.iter().zip(&c) {
            assert_abs_diff_eq!(*ci, 2.0 * t, epsilon = 1e-12);
        }
    }

    proptest! {
        // nondecreasing knots => nondecreasing interpolant, sampled densely
        #[test]
        fn monotone_cubic_preserves_monotonicity(
            raw in prop::collection::vec(0.0f64..1.0, 3..12),
            incs in prop::collection::vec(0.0f64..1.0, 3..12),
        ) {
            let n = raw.len().min(incs.len());
            let mut x: Vec<f64> = raw[..n].to_vec();
            x.sort_by(|a, b| a.partial_cmp(b).unwrap());
            x.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            prop_assume!(x.len() >= 2);
            let mut y = vec![0.0];
            for i in 1..x.len() {
                let prev = y[i - 1];
                y.push(prev + incs[i % incs.len()]);
            }
            let m = MonotoneCubic::new(x.clone(), y).unwrap();
            let lo = x[0];
            let hi = x[x.len() - 1];
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=400 {
                let t = lo + (hi - lo) * k as f64 / 400.0;
                let v = m.eval(t);
                prop_assert!(v >= prev - 1e-10);
                prev = v;
            }
        }
    }
}
