//! Run configuration: one TOML file with named sections; CLI flags override
//! the seed, output directory, and thread count. Unknown keys are rejected.

use rhl_core::dataio::{TimePoint, WindowSpec};
use rhl_core::predict::CohortConfig;
use rhl_core::simulate::{ClusterScale, SimulationConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub io: IoSection,
    pub simulate: SimulateSection,
    pub fit: FitSection,
    pub mfpca: MfpcaSection,
    pub predict: PredictSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 1,
            io: IoSection::default(),
            simulate: SimulateSection::default(),
            fit: FitSection::default(),
            mfpca: MfpcaSection::default(),
            predict: PredictSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub grid_size: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            grid_size: 1001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub clusters: usize,
    pub units_per_cluster: usize,
    pub level1_components: usize,
    pub level2_components: usize,
    pub mu_const: f64,
    /// Defaults to 0.9^(k-1) over the level-1 components.
    pub level1_eigenvalues: Option<Vec<f64>>,
    /// Defaults to 0.2^(l-1) over the level-2 components.
    pub level2_eigenvalues: Option<Vec<f64>>,
    pub sigma: f64,
    pub cluster_scale: ClusterScale,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let base = SimulationConfig::default();
        Self {
            clusters: base.clusters,
            units_per_cluster: base.units_per_cluster,
            level1_components: base.level1_components,
            level2_components: base.level2_components,
            mu_const: base.mu_const,
            level1_eigenvalues: None,
            level2_eigenvalues: None,
            sigma: base.sigma,
            cluster_scale: base.cluster_scale,
        }
    }
}

impl SimulateSection {
    pub fn to_simulation_config(&self, seed: u64, grid_size: usize) -> SimulationConfig {
        SimulationConfig {
            clusters: self.clusters,
            units_per_cluster: self.units_per_cluster,
            level1_components: self.level1_components,
            level2_components: self.level2_components,
            mu_const: self.mu_const,
            level1_eigenvalues: self.level1_eigenvalues.clone().unwrap_or_else(|| {
                (0..self.level1_components as i32).map(|k| 0.9f64.powi(k)).collect()
            }),
            level2_eigenvalues: self.level2_eigenvalues.clone().unwrap_or_else(|| {
                (0..self.level2_components as i32).map(|l| 0.2f64.powi(l)).collect()
            }),
            sigma: self.sigma,
            cluster_scale: self.cluster_scale,
            grid_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Events CSV consumed by `fit`; defaults to `<out_dir>/events.csv`.
    pub events: Option<PathBuf>,
    /// Covariate names entering the beta term.
    pub x: Vec<String>,
    /// Covariate names entering the theta (mark) term.
    pub z: Vec<String>,
    pub tol: f64,
    pub max_iter: usize,
    /// Window boundaries as plain reals or ISO dates.
    pub window_t0: String,
    pub window_t1: String,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            events: None,
            x: Vec::new(),
            z: vec!["enum".to_string()],
            tol: 1e-8,
            max_iter: 50,
            window_t0: "0".into(),
            window_t1: "1".into(),
        }
    }
}

impl FitSection {
    pub fn window(&self) -> Result<WindowSpec, rhl_core::Error> {
        Ok(WindowSpec {
            t0: self.window_t0.parse::<TimePoint>()?,
            t1: self.window_t1.parse::<TimePoint>()?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfpcaSection {
    /// Curves CSV consumed by `decompose`; defaults to `<out_dir>/compensators.csv`.
    pub input: Option<PathBuf>,
    pub pve1: f64,
    pub pve2: f64,
}

impl Default for MfpcaSection {
    fn default() -> Self {
        Self {
            input: None,
            pve1: 0.99,
            pve2: 0.99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Students CSV; when absent a synthetic cohort is drawn from the scores.
    pub students: Option<PathBuf>,
    /// Scores CSV; defaults to `<out_dir>/scores.csv`.
    pub scores: Option<PathBuf>,
    /// Level-1 score terms in the model.
    pub k: usize,
    /// Level-2 score terms in the model.
    pub l: usize,
    pub threshold: f64,
    /// Also fit the score-free nested model and report deltas.
    pub compare: bool,
    pub cohort: CohortSection,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            students: None,
            scores: None,
            k: 2,
            l: 1,
            threshold: 0.5,
            compare: true,
            cohort: CohortSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    pub students_per_unit: usize,
    pub score_effect_level1: f64,
    pub score_effect_level2: f64,
}

impl Default for CohortSection {
    fn default() -> Self {
        let base = CohortConfig::default();
        Self {
            students_per_unit: base.students_per_unit,
            score_effect_level1: base.score_effect_level1,
            score_effect_level2: base.score_effect_level2,
        }
    }
}

impl CohortSection {
    pub fn to_cohort_config(&self, k: usize, l: usize) -> CohortConfig {
        CohortConfig {
            students_per_unit: self.students_per_unit,
            k,
            l,
            score_effect_level1: self.score_effect_level1,
            score_effect_level2: self.score_effect_level2,
        }
    }
}

/// Load and validate a config file; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, String> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| format!("invalid config: {e}"))?
        }
        None => RunConfig::default(),
    };
    if config.threads == 0 {
        return Err("threads must be >= 1".into());
    }
    if config.io.grid_size < 2 {
        return Err("io.grid_size must be >= 2".into());
    }
    for (name, pve) in [("mfpca.pve1", config.mfpca.pve1), ("mfpca.pve2", config.mfpca.pve2)] {
        if !(pve > 0.0 && pve <= 1.0) {
            return Err(format!("{name} must lie in (0, 1]"));
        }
    }
    if !(config.predict.threshold > 0.0 && config.predict.threshold < 1.0) {
        return Err("predict.threshold must lie in (0, 1)".into());
    }
    // normalize eigenvalue defaults so reports echo the resolved values
    let sim = &mut config.simulate;
    sim.level1_eigenvalues = Some(
        sim.to_simulation_config(0, 2).level1_eigenvalues,
    );
    sim.level2_eigenvalues = Some(sim.to_simulation_config(0, 2).level2_eigenvalues);
    Ok(config)
}
