//! Clustered intensity generator and NHPP sampler: a one-way functional
//! ANOVA intensity model with fixed Fourier / shifted-Legendre bases,
//! trapezoid integration to cumulative hazards, and thinning under a
//! constant majorant.
//!
//! Everything is deterministic given the root seed: each cluster and unit
//! draws from its own hashed substream, so per-unit generation is
//! order-independent.

use crate::agmodel::{fit_ag, breslow_baseline, smooth_baseline, AGFit, CovariateSpec, FitOptions};
use crate::compensator::{reconstruct_all, CompensatorSet};
use crate::curve::{cumulative_trapezoid, trapezoid_weights, uniform_grid, GridCurve, StepFunction};
use crate::dataio::{build_counting_format, ObservationWindow, RecurrentEventDataset, UnitEvents};
use crate::error::{Error, Result};
use crate::mfpca::{alignment, mfpca, MFPCAResult};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Cluster-dependent scale multiplying the random part of the intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterScale {
    /// `2 * i` with 1-based cluster index `i`.
    TwoTimesIndex,
    /// The same constant for every cluster.
    Constant(f64),
}

impl ClusterScale {
    pub fn factor(&self, cluster_index_1based: usize) -> f64 {
        match self {
            ClusterScale::TwoTimesIndex => 2.0 * cluster_index_1based as f64,
            ClusterScale::Constant(c) => *c,
        }
    }
}

impl fmt::Display for ClusterScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterScale::TwoTimesIndex => f.write_str("2*i"),
            ClusterScale::Constant(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for ClusterScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "2*i" || s == "2i" {
            return Ok(ClusterScale::TwoTimesIndex);
        }
        s.parse::<f64>()
            .map(ClusterScale::Constant)
            .map_err(|_| Error::Parse {
                context: "cluster_scale".into(),
                value: s.to_string(),
            })
    }
}

impl Serialize for ClusterScale {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClusterScale {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Number of clusters I.
    pub clusters: usize,
    /// Units per cluster J.
    pub units_per_cluster: usize,
    /// Level-1 components K (at most 4).
    pub level1_components: usize,
    /// Level-2 components L (at most 4).
    pub level2_components: usize,
    /// Constant mean level of the intensity.
    pub mu_const: f64,
    /// Score variances per level-1 component; defaults to 0.9^(k-1).
    pub level1_eigenvalues: Vec<f64>,
    /// Score variances per level-2 component; defaults to 0.2^(l-1).
    pub level2_eigenvalues: Vec<f64>,
    /// Noise standard deviation of the intensity (0 disables noise draws).
    pub sigma: f64,
    pub cluster_scale: ClusterScale,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            clusters: 20,
            units_per_cluster: 4,
            level1_components: 4,
            level2_components: 4,
            mu_const: 100.0,
            level1_eigenvalues: (0..4).map(|k| 0.9f64.powi(k)).collect(),
            level2_eigenvalues: (0..4).map(|l| 0.2f64.powi(l)).collect(),
            sigma: 0.0,
            cluster_scale: ClusterScale::TwoTimesIndex,
            grid_size: 1001,
            seed: 42,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |cond: bool, detail: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidValue {
                    context: "SimulationConfig".into(),
                    detail: detail.into(),
                })
            }
        };
        check(self.clusters >= 1, "clusters must be >= 1")?;
        check(self.units_per_cluster >= 1, "units_per_cluster must be >= 1")?;
        check(
            (1..=4).contains(&self.level1_components),
            "level1_components must lie in 1..=4",
        )?;
        check(
            (1..=4).contains(&self.level2_components),
            "level2_components must lie in 1..=4",
        )?;
        check(self.grid_size >= 2, "grid_size must be >= 2")?;
        check(self.sigma >= 0.0, "sigma must be >= 0")?;
        check(
            self.level1_eigenvalues.len() >= self.level1_components
                && self.level1_eigenvalues.iter().all(|l| *l >= 0.0),
            "level1_eigenvalues must cover the components and be nonnegative",
        )?;
        check(
            self.level2_eigenvalues.len() >= self.level2_components
                && self.level2_eigenvalues.iter().all(|l| *l >= 0.0),
            "level2_eigenvalues must cover the components and be nonnegative",
        )?;
        Ok(())
    }

    pub fn cluster_label(&self, i: usize) -> String {
        let width = self.clusters.to_string().len();
        format!("c{i:0width$}")
    }

    pub fn unit_label(&self, i: usize, j: usize) -> String {
        let width = self.units_per_cluster.to_string().len();
        format!("{}u{j:0width$}", self.cluster_label(i))
    }
}

/// One simulated unit: intensity, cumulative hazard, sampled events, and the
/// generating scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedProcess {
    pub cluster_id: String,
    pub unit_id: String,
    /// 1-based indices (i, j).
    pub cluster_index: usize,
    pub unit_index: usize,
    pub intensity: GridCurve,
    pub cumulative: GridCurve,
    pub event_times: Vec<f64>,
    /// (xi of the unit's cluster, zeta of the unit).
    pub true_scores: (Vec<f64>, Vec<f64>),
    /// Fraction of grid points clamped up to zero.
    pub clamp_fraction: f64,
}

/// Orthonormal Fourier basis on [0, 1] (level 1).
pub fn basis_level1(t: f64) -> [f64; 4] {
    let s = 2.0_f64.sqrt();
    [
        s * (2.0 * PI * t).sin(),
        s * (2.0 * PI * t).cos(),
        s * (4.0 * PI * t).sin(),
        s * (4.0 * PI * t).cos(),
    ]
}

/// Orthonormal shifted-Legendre basis on [0, 1] (level 2).
pub fn basis_level2(t: f64) -> [f64; 4] {
    [
        1.0,
        3.0_f64.sqrt() * (2.0 * t - 1.0),
        5.0_f64.sqrt() * (6.0 * t * t - 6.0 * t + 1.0),
        7.0_f64.sqrt() * (20.0 * t * t * t - 30.0 * t * t + 12.0 * t - 1.0),
    ]
}

/// Domain-separated substream seeds derived from the root seed.
#[derive(Debug, Clone, Copy)]
enum StreamDomain {
    ClusterScores = 1,
    UnitScores = 2,
    Thinning = 3,
    Cohort = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn substream(seed: u64, domain: StreamDomain, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ (domain as u64));
    h = splitmix(h ^ a);
    splitmix(h ^ b)
}

pub(crate) fn cohort_stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, StreamDomain::Cohort, a, b))
}

/// Draw scores and assemble clamped intensities on the grid.
///
/// `lambda_ij(t) = mu + scale(i) * (sum_k xi_ik phi1_k(t) + sum_l zeta_ijl
/// phi2_l(t) + eps_ij(t))`, clamped at zero with the clamped fraction
/// recorded per unit.
pub fn generate_intensities(config: &SimulationConfig) -> Result<Vec<SimulatedProcess>> {
    config.validate()?;
    let grid = uniform_grid(config.grid_size);
    let k = config.level1_components;
    let l = config.level2_components;
    let mut processes = Vec::with_capacity(config.clusters * config.units_per_cluster);

    for i in 1..=config.clusters {
        let mut cluster_rng =
            ChaCha8Rng::seed_from_u64(substream(config.seed, StreamDomain::ClusterScores, i as u64, 0));
        let xi: Vec<f64> = (0..k)
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut cluster_rng);
                config.level1_eigenvalues[c].sqrt() * z
            })
            .collect();
        let scale = config.cluster_scale.factor(i);

        for j in 1..=config.units_per_cluster {
            let mut unit_rng = ChaCha8Rng::seed_from_u64(substream(
                config.seed,
                StreamDomain::UnitScores,
                i as u64,
                j as u64,
            ));
            let zeta: Vec<f64> = (0..l)
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut unit_rng);
                    config.level2_eigenvalues[c].sqrt() * z
                })
                .collect();

            let mut clamped = 0usize;
            let values: Vec<f64> = grid
                .iter()
                .map(|&t| {
                    let b1 = basis_level1(t);
                    let b2 = basis_level2(t);
                    let mut random_part = 0.0;
                    for (c, x) in xi.iter().enumerate() {
                        random_part += x * b1[c];
                    }
                    for (c, z) in zeta.iter().enumerate() {
                        random_part += z * b2[c];
                    }
                    if config.sigma > 0.0 {
                        let eps: f64 = StandardNormal.sample(&mut unit_rng);
                        random_part += config.sigma * eps;
                    }
                    let v = config.mu_const + scale * random_part;
                    if v < 0.0 {
                        clamped += 1;
                        0.0
                    } else {
                        v
                    }
                })
                .collect();

            let intensity = GridCurve::new(grid.clone(), values)?;
            processes.push(SimulatedProcess {
                cluster_id: config.cluster_label(i),
                unit_id: config.unit_label(i, j),
                cluster_index: i,
                unit_index: j,
                cumulative: integrate_intensity(&intensity)?,
                intensity,
                event_times: Vec::new(),
                true_scores: (xi.clone(), zeta),
                clamp_fraction: clamped as f64 / config.grid_size as f64,
            });
        }
    }
    Ok(processes)
}

/// Cumulative trapezoid integral of a nonnegative intensity.
pub fn integrate_intensity(intensity: &GridCurve) -> Result<GridCurve> {
    if let Some(at) = intensity
        .grid()
        .iter()
        .zip(intensity.values())
        .find(|(_, v)| **v < 0.0)
        .map(|(t, _)| *t)
    {
        return Err(Error::NegativeIntensity { at });
    }
    GridCurve::cumulative(
        intensity.grid().to_vec(),
        cumulative_trapezoid(intensity.grid(), intensity.values()),
    )
}

/// Thinning sampler over `[0, 1]` with the grid maximum as majorant.
///
/// Homogeneous proposals arrive at rate `lambda_max`; a proposal at `t` is
/// kept with probability `lambda(t) / lambda_max` under linear interpolation
/// of the intensity. A zero intensity yields no events.
pub fn thinning_sample(intensity: &GridCurve, seed: u64) -> Vec<f64> {
    let lambda_max = intensity.max_value();
    if lambda_max <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut t = 0.0_f64;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / lambda_max;
        if t >= 1.0 {
            break;
        }
        let accept: f64 = rng.random();
        if accept * lambda_max <= intensity.eval_linear(t)
            && t > 0.0
            && events.last().is_none_or(|last| t > *last)
        {
            events.push(t);
        }
    }
    events
}

/// Generate intensities and sample each unit's events from its own substream.
pub fn simulate_processes(config: &SimulationConfig) -> Result<Vec<SimulatedProcess>> {
    let mut processes = generate_intensities(config)?;
    for p in &mut processes {
        let seed = substream(
            config.seed,
            StreamDomain::Thinning,
            p.cluster_index as u64,
            p.unit_index as u64,
        );
        p.event_times = thinning_sample(&p.intensity, seed);
    }
    Ok(processes)
}

/// Counting-format dataset of the simulated events over the unit window.
pub fn processes_to_dataset(processes: &[SimulatedProcess]) -> Result<RecurrentEventDataset> {
    let units: Vec<UnitEvents> = processes
        .iter()
        .map(|p| UnitEvents::bare(&p.cluster_id, &p.unit_id, p.event_times.clone()))
        .collect();
    build_counting_format(&units, &ObservationWindow::unit())
}

/// True cumulative hazards as a grid-aligned curve set.
pub fn true_compensators(processes: &[SimulatedProcess]) -> Result<CompensatorSet> {
    let grid = processes[0].cumulative.grid().to_vec();
    let n = processes.len();
    let curves = DMatrix::from_fn(n, grid.len(), |i, j| processes[i].cumulative.values()[j]);
    CompensatorSet::new(
        grid,
        curves,
        processes.iter().map(|p| p.cluster_id.clone()).collect(),
        processes.iter().map(|p| p.unit_id.clone()).collect(),
    )
}

/// Comparison summary of the decomposition before and after event sampling.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub config: SimulationConfig,
    pub total_events: usize,
    pub overall_clamp_fraction: f64,
    pub theta_hat: Vec<f64>,
    pub fit_iterations: usize,
    pub fit_converged: bool,
    pub true_level1_components: usize,
    pub true_level2_components: usize,
    pub reconstructed_level1_components: usize,
    pub reconstructed_level2_components: usize,
    pub true_level1_eigenvalues: Vec<f64>,
    pub true_level2_eigenvalues: Vec<f64>,
    pub reconstructed_level1_eigenvalues: Vec<f64>,
    pub reconstructed_level2_eigenvalues: Vec<f64>,
    /// Alignment of shared leading eigenfunctions, per level.
    pub level1_alignment: Vec<f64>,
    pub level2_alignment: Vec<f64>,
    pub notes: Vec<String>,
}

/// Everything produced by one simulation-study run.
#[derive(Debug)]
pub struct SimulationStudy {
    pub processes: Vec<SimulatedProcess>,
    pub dataset: RecurrentEventDataset,
    pub fit: AGFit,
    pub baseline_step: StepFunction,
    pub baseline_smooth: GridCurve,
    pub true_curves: CompensatorSet,
    pub reconstructed: CompensatorSet,
    pub mfpca_true: MFPCAResult,
    pub mfpca_reconstructed: MFPCAResult,
    pub report: StudyReport,
}

/// Simulate, fit the event-count model (z = enum), reconstruct compensators,
/// and decompose both the true and the reconstructed curve sets.
pub fn run_simulation_study(
    config: &SimulationConfig,
    pve1: f64,
    pve2: f64,
) -> Result<SimulationStudy> {
    let processes = simulate_processes(config)?;
    let dataset = processes_to_dataset(&processes)?;
    let grid = uniform_grid(config.grid_size);

    let spec = CovariateSpec::with_z(&["enum"]);
    let fit = fit_ag(&dataset, &spec, FitOptions::default())?;
    let baseline_step = breslow_baseline(&dataset, &fit)?;
    let baseline_smooth = smooth_baseline(&baseline_step, &grid)?;
    let reconstructed = reconstruct_all(&dataset, &fit, &baseline_smooth, &grid)?;
    let true_curves = true_compensators(&processes)?;

    let mfpca_true = mfpca(&true_curves, pve1, pve2)?;
    let mfpca_reconstructed = mfpca(&reconstructed, pve1, pve2)?;

    let weights = trapezoid_weights(&grid);
    let align = |a: &[GridCurve], b: &[GridCurve]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| alignment(x, y, &weights))
            .collect()
    };
    let total_events = dataset.total_events();
    let overall_clamp_fraction = processes.iter().map(|p| p.clamp_fraction).sum::<f64>()
        / processes.len() as f64;

    let report = StudyReport {
        config: config.clone(),
        total_events,
        overall_clamp_fraction,
        theta_hat: fit.theta.clone(),
        fit_iterations: fit.iterations,
        fit_converged: fit.converged,
        true_level1_components: mfpca_true.level1.n_components(),
        true_level2_components: mfpca_true.level2.n_components(),
        reconstructed_level1_components: mfpca_reconstructed.level1.n_components(),
        reconstructed_level2_components: mfpca_reconstructed.level2.n_components(),
        true_level1_eigenvalues: mfpca_true.level1.eigenvalues.clone(),
        true_level2_eigenvalues: mfpca_true.level2.eigenvalues.clone(),
        reconstructed_level1_eigenvalues: mfpca_reconstructed.level1.eigenvalues.clone(),
        reconstructed_level2_eigenvalues: mfpca_reconstructed.level2.eigenvalues.clone(),
        level1_alignment: align(
            &mfpca_true.level1.eigenfunctions,
            &mfpca_reconstructed.level1.eigenfunctions,
        ),
        level2_alignment: align(
            &mfpca_true.level2.eigenfunctions,
            &mfpca_reconstructed.level2.eigenfunctions,
        ),
        notes: vec![format!(
            "mean level mu_const = {}; 200 is a commonly used alternative for this generator",
            config.mu_const
        )],
    };

    Ok(SimulationStudy {
        processes,
        dataset,
        fit,
        baseline_step,
        baseline_smooth,
        true_curves,
        reconstructed,
        mfpca_true,
        mfpca_reconstructed,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::inner_product;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{DiscreteCDF, Poisson};

    #[test]
    fn basis_values_at_zero() {
        let s2 = 2.0f64.sqrt();
        let b1 = basis_level1(0.0);
        assert_abs_diff_eq!(b1[0], 0.0);
        assert_abs_diff_eq!(b1[1], s2);
        assert_abs_diff_eq!(b1[2], 0.0);
        assert_abs_diff_eq!(b1[3], s2);
        let b2 = basis_level2(0.0);
        assert_abs_diff_eq!(b2[0], 1.0);
        assert_abs_diff_eq!(b2[1], -(3.0f64.sqrt()));
        assert_abs_diff_eq!(b2[2], 5.0f64.sqrt());
        assert_abs_diff_eq!(b2[3], -(7.0f64.sqrt()));
    }

    #[test]
    fn within_level_gram_matrices_are_identity() {
        let grid = uniform_grid(1001);
        let weights = trapezoid_weights(&grid);
        for level in [1, 2] {
            let eval = |t: f64| if level == 1 { basis_level1(t) } else { basis_level2(t) };
            let columns: Vec<Vec<f64>> = (0..4)
                .map(|c| grid.iter().map(|&t| eval(t)[c]).collect())
                .collect();
            for a in 0..4 {
                for b in 0..=a {
                    let ip = inner_product(&weights, &columns[a], &columns[b]);
                    let expected = if a == b { 1.0 } else { 0.0 };
                    assert!(
                        (ip - expected).abs() < 1e-4,
                        "level {level} gram[{a},{b}] = {ip}"
                    );
                }
            }
        }
    }

    /// Closed-form cross-level inner products on [0, 1], derived by
    /// integration by parts. Several pairs are genuinely nonzero: the two
    /// bases are each orthonormal but not mutually orthogonal.
    fn analytic_cross_product(a: usize, b: usize) -> f64 {
        use std::f64::consts::PI;
        let s6 = 6.0f64.sqrt();
        let s10 = 10.0f64.sqrt();
        let s14 = 14.0f64.sqrt();
        match (a, b) {
            (0, 1) => -s6 / PI,
            (2, 1) => -s6 / (2.0 * PI),
            (1, 2) => 3.0 * s10 / (PI * PI),
            (3, 2) => 3.0 * s10 / (4.0 * PI * PI),
            (0, 3) => s14 * (15.0 - PI * PI) / PI.powi(3),
            (2, 3) => s14 * (15.0 / (8.0 * PI.powi(3)) - 1.0 / (2.0 * PI)),
            _ => 0.0,
        }
    }

    #[test]
    fn cross_level_products_match_the_integration_oracle() {
        // independent oracle: composite Simpson quadrature on 20001 points
        let n = 20001usize;
        let h = 1.0 / (n - 1) as f64;
        let simpson = |a: usize, b: usize| -> f64 {
            let f = |t: f64| basis_level1(t)[a] * basis_level2(t)[b];
            let mut acc = f(0.0) + f(1.0);
            for i in 1..n - 1 {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(i as f64 * h);
            }
            acc * h / 3.0
        };
        for a in 0..4 {
            for b in 0..4 {
                let numeric = simpson(a, b);
                let analytic = analytic_cross_product(a, b);
                assert!(
                    (numeric - analytic).abs() < 1e-8,
                    "pair ({a},{b}): simpson {numeric} vs analytic {analytic}"
                );
            }
        }
        // the largest nonzero pair for reference: <sqrt2 sin(2 pi t), sqrt3 (2t-1)>
        assert!(analytic_cross_product(0, 1).abs() > 0.7);
    }

    #[test]
    fn degenerate_scores_give_constant_intensity() {
        let config = SimulationConfig {
            clusters: 3,
            units_per_cluster: 2,
            level1_eigenvalues: vec![0.0; 4],
            level2_eigenvalues: vec![0.0; 4],
            mu_const: 17.0,
            grid_size: 51,
            ..SimulationConfig::default()
        };
        let processes = generate_intensities(&config).unwrap();
        assert_eq!(processes.len(), 6);
        for p in &processes {
            for v in p.intensity.values() {
                assert_abs_diff_eq!(*v, 17.0, epsilon = 1e-12);
            }
            assert_eq!(p.clamp_fraction, 0.0);
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let config = SimulationConfig {
            grid_size: 101,
            ..SimulationConfig::default()
        };
        let a = simulate_processes(&config).unwrap();
        let b = simulate_processes(&config).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.intensity.values(), y.intensity.values());
            assert_eq!(x.event_times, y.event_times);
            assert_eq!(x.true_scores, y.true_scores);
        }
    }

    #[test]
    fn default_config_produces_80_curves_with_unit_variance_first_scores() {
        // pool first-component cluster scores across seeds; their variance
        // estimates lambda_1 = 0.9^0 = 1
        let mut pooled = Vec::new();
        for seed in 0..25u64 {
            let config = SimulationConfig {
                seed,
                grid_size: 101,
                ..SimulationConfig::default()
            };
            let processes = generate_intensities(&config).unwrap();
            assert_eq!(processes.len(), 80);
            for p in processes.iter().filter(|p| p.unit_index == 1) {
                pooled.push(p.true_scores.0[0]);
            }
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let variance = pooled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let three_se = 3.0 * (2.0 / (n - 1.0)).sqrt();
        assert!(
            (variance - 1.0).abs() < three_se,
            "variance {variance}, tolerance {three_se}"
        );
    }

    #[test]
    fn integration_of_constant_is_linear() {
        let grid = uniform_grid(101);
        let intensity = GridCurve::new(grid.clone(), vec![100.0; 101]).unwrap();
        let cumulative = integrate_intensity(&intensity).unwrap();
        for (t, v) in grid.iter().zip(cumulative.values()) {
            assert_abs_diff_eq!(*v, 100.0 * t, epsilon = 1e-10);
        }
    }

    #[test]
    fn integration_of_shifted_sine_hits_closed_form() {
        let grid = uniform_grid(1001);
        let values: Vec<f64> = grid
            .iter()
            .map(|&t| 2.0f64.sqrt() * (2.0 * PI * t).sin() + 2.0)
            .collect();
        let intensity = GridCurve::new(grid, values).unwrap();
        let cumulative = integrate_intensity(&intensity).unwrap();
        assert_abs_diff_eq!(*cumulative.values().last().unwrap(), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn integration_refinement_is_stable() {
        let build = |n: usize| {
            let config = SimulationConfig {
                grid_size: n,
                ..SimulationConfig::default()
            };
            let p = generate_intensities(&config).unwrap();
            *p[40].cumulative.values().last().unwrap()
        };
        // same seed, same unit, finer grid: endpoint moves by < 1e-4 relative
        let coarse = build(1001);
        let fine = build(2001);
        assert!(
            (coarse - fine).abs() <= 1e-4 * coarse.abs().max(1.0),
            "coarse {coarse} vs fine {fine}"
        );
    }

    #[test]
    fn integration_is_linear_in_the_integrand() {
        let grid = uniform_grid(101);
        let f: Vec<f64> = grid.iter().map(|&t| 1.0 + t * t).collect();
        let g: Vec<f64> = grid.iter().map(|&t| 2.0 - t).collect();
        let (a, b) = (2.5, 0.5);
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let int_f = integrate_intensity(&GridCurve::new(grid.clone(), f).unwrap()).unwrap();
        let int_g = integrate_intensity(&GridCurve::new(grid.clone(), g).unwrap()).unwrap();
        let int_c = integrate_intensity(&GridCurve::new(grid.clone(), combo).unwrap()).unwrap();
        for i in 0..grid.len() {
            assert_abs_diff_eq!(
                int_c.values()[i],
                a * int_f.values()[i] + b * int_g.values()[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn negative_intensity_is_rejected_by_integration() {
        let grid = uniform_grid(11);
        let mut values = vec![1.0; 11];
        values[5] = -0.1;
        let curve = GridCurve::new(grid, values).unwrap();
        assert!(matches!(
            integrate_intensity(&curve).unwrap_err(),
            Error::NegativeIntensity { .. }
        ));
    }

    #[test]
    fn thinning_of_zero_intensity_is_empty() {
        let grid = uniform_grid(11);
        let intensity = GridCurve::new(grid, vec![0.0; 11]).unwrap();
        assert!(thinning_sample(&intensity, 99).is_empty());
    }

    #[test]
    fn thinning_times_are_strictly_increasing_inside_the_window() {
        let grid = uniform_grid(101);
        let values: Vec<f64> = grid.iter().map(|&t| 200.0 * t).collect();
        let intensity = GridCurve::new(grid, values).unwrap();
        for seed in 0..20 {
            let events = thinning_sample(&intensity, seed);
            for pair in events.windows(2) {
                assert!(pair[0] < pair[1]);
            }
            assert!(events.iter().all(|t| *t > 0.0 && *t < 1.0));
        }
        let a = thinning_sample(&intensity, 5);
        let b = thinning_sample(&intensity, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn thinning_count_tracks_the_integrated_rate() {
        let grid = uniform_grid(101);
        let intensity = GridCurve::new(grid, vec![100.0; 101]).unwrap();
        let reps = 300;
        let total: usize = (0..reps)
            .map(|seed| thinning_sample(&intensity, seed).len())
            .sum();
        let mean = total as f64 / reps as f64;
        // 5 sigma band around 100 for a 300-rep average
        assert!((mean - 100.0).abs() < 5.0 * (100.0f64 / reps as f64).sqrt());
    }

    #[test]
    fn event_counts_pass_exact_poisson_screen() {
        // two-sided exact test per unit at alpha = 0.001; allow 2 of 80
        let config = SimulationConfig::default();
        let processes = simulate_processes(&config).unwrap();
        let mut failures = 0;
        for p in &processes {
            let mean = *p.cumulative.values().last().unwrap();
            if mean <= 0.0 {
                assert!(p.event_times.is_empty());
                continue;
            }
            let dist = Poisson::new(mean).unwrap();
            let x = p.event_times.len() as u64;
            let lower = dist.cdf(x);
            let upper = 1.0 - if x == 0 { 0.0 } else { dist.cdf(x - 1) };
            let p_value = (2.0 * lower.min(upper)).min(1.0);
            if p_value < 0.001 {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} units failed the Poisson screen");
    }

    #[test]
    fn clamping_vanishes_when_the_mean_dominates() {
        // at mu = 200 the random part rarely reaches the floor
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let config = SimulationConfig {
                mu_const: 200.0,
                seed,
                grid_size: 501,
                ..SimulationConfig::default()
            };
            let processes = generate_intensities(&config).unwrap();
            let overall = processes.iter().map(|p| p.clamp_fraction).sum::<f64>()
                / processes.len() as f64;
            worst = worst.max(overall);
        }
        assert!(worst < 0.01, "worst clamp fraction {worst}");
    }

    #[test]
    fn small_study_runs_end_to_end_and_is_deterministic() {
        let config = SimulationConfig {
            clusters: 4,
            units_per_cluster: 3,
            mu_const: 60.0,
            grid_size: 201,
            seed: 7,
            ..SimulationConfig::default()
        };
        let study = run_simulation_study(&config, 0.99, 0.99).unwrap();
        assert!(study.report.fit_converged);
        assert!(study.report.true_level1_components >= 1);
        assert!(study.report.reconstructed_level1_components >= 1);
        for a in study
            .report
            .level1_alignment
            .iter()
            .chain(&study.report.level2_alignment)
        {
            assert!((0.0..=1.0 + 1e-9).contains(a));
        }
        let again = run_simulation_study(&config, 0.99, 0.99).unwrap();
        let a = serde_json::to_string(&study.report).unwrap();
        let b = serde_json::to_string(&again.report).unwrap();
        assert_eq!(a, b);
    }
}
