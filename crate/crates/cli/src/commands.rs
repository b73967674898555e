//! Pipeline stages: each command reads its inputs from files, writes its
//! outputs under the run directory, and embeds the resolved configuration in
//! every report.

use crate::config::RunConfig;
use rhl_core::agmodel::{breslow_baseline, fit_ag, smooth_baseline, AGFit, CovariateSpec, FitOptions};
use rhl_core::compensator::{reconstruct_all, CompensatorSet};
use rhl_core::curve::uniform_grid;
use rhl_core::dataio::{
    parse_event_table, write_raw_events_csv, write_students_csv, EventTableSchema,
    PredictionDataset, UnitEvents,
};
use rhl_core::mfpca::{mfpca, perturbation_curves, MfpcaLevel, MFPCAResult};
use rhl_core::predict::{
    build_design, compare_models, evaluate, fit_logistic, predict_probabilities,
    synthesize_cohort, ClassificationMetrics, CohortTruth, LogisticFit, LogisticOptions,
    ScoreTable,
};
use rhl_core::simulate::{run_simulation_study, SimulationStudy};
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

/// A stage failure with the stage name attached.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: rhl_core::Error,
}

pub type StageResult<T> = Result<T, StageError>;

trait StageContext<T> {
    fn stage(self, stage: &'static str) -> StageResult<T>;
}

impl<T> StageContext<T> for Result<T, rhl_core::Error> {
    fn stage(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

fn io_error(stage: &'static str, e: std::io::Error) -> StageError {
    StageError {
        stage,
        error: rhl_core::Error::Io(e),
    }
}

fn write_file(stage: &'static str, path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), rhl_core::Error>) -> StageResult<()> {
    let file = fs::File::create(path).map_err(|e| io_error(stage, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out).stage(stage)?;
    out.flush().map_err(|e| io_error(stage, e))
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> StageResult<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| io_error(stage, e))
}

fn ensure_out_dir(stage: &'static str, dir: &Path) -> StageResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(stage, e))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StudyReportFile<'a> {
    resolved_config: &'a RunConfig,
    #[serde(flatten)]
    report: &'a rhl_core::simulate::StudyReport,
}

/// Emits events.csv, true_curves.csv, study_report.json.
pub fn cmd_simulate(config: &RunConfig) -> StageResult<SimulationStudy> {
    let out = &config.io.out_dir;
    ensure_out_dir("simulate", out)?;
    let sim_config = config
        .simulate
        .to_simulation_config(config.seed, config.io.grid_size);
    let study =
        run_simulation_study(&sim_config, config.mfpca.pve1, config.mfpca.pve2).stage("simulate")?;

    let units: Vec<UnitEvents> = study
        .processes
        .iter()
        .map(|p| UnitEvents::bare(&p.cluster_id, &p.unit_id, p.event_times.clone()))
        .collect();
    write_file("simulate", &out.join("events.csv"), |w| {
        write_raw_events_csv(&units, &study.dataset.window(), w)
    })?;
    write_file("simulate", &out.join("true_curves.csv"), |w| {
        study.true_curves.write_long_csv(w)
    })?;
    write_json(
        "simulate",
        &out.join("study_report.json"),
        &StudyReportFile {
            resolved_config: config,
            report: &study.report,
        },
    )?;
    Ok(study)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CoefficientReport {
    name: String,
    estimate: f64,
    std_error: f64,
    p_value: f64,
}

#[derive(Serialize)]
struct AgFitReport<'a> {
    resolved_config: &'a RunConfig,
    tie_method: String,
    loglik: f64,
    iterations: usize,
    converged: bool,
    n_units: usize,
    n_events: usize,
    coefficients: Vec<CoefficientReport>,
}

fn coefficient_rows(fit: &AGFit) -> Vec<CoefficientReport> {
    let p_values = fit.wald_p_values();
    fit.coefficient_names()
        .into_iter()
        .zip(fit.coefficients())
        .zip(fit.standard_errors())
        .zip(p_values)
        .map(|(((name, estimate), std_error), p_value)| CoefficientReport {
            name,
            estimate,
            std_error,
            p_value,
        })
        .collect()
}

/// Emits ag_fit.json, baseline.csv (step + smoothed), compensators.csv.
pub fn cmd_fit(config: &RunConfig) -> StageResult<CompensatorSet> {
    let out = &config.io.out_dir;
    ensure_out_dir("fit", out)?;
    let events_path = config
        .fit
        .events
        .clone()
        .unwrap_or_else(|| out.join("events.csv"));
    let window = config.fit.window().stage("fit")?;
    let dataset =
        parse_event_table(&events_path, &EventTableSchema::default(), &window).stage("fit")?;

    let spec = CovariateSpec {
        x_names: config.fit.x.clone(),
        z_names: config.fit.z.clone(),
    };
    let options = FitOptions {
        tol: config.fit.tol,
        max_iter: config.fit.max_iter,
    };
    let fit = fit_ag(&dataset, &spec, options).stage("fit")?;
    let step = breslow_baseline(&dataset, &fit).stage("fit")?;
    let grid = uniform_grid(config.io.grid_size);
    let smooth = smooth_baseline(&step, &grid).stage("fit")?;
    let compensators = reconstruct_all(&dataset, &fit, &smooth, &grid).stage("fit")?;

    write_json(
        "fit",
        &out.join("ag_fit.json"),
        &AgFitReport {
            resolved_config: config,
            tie_method: fit.tie_method.clone(),
            loglik: fit.loglik,
            iterations: fit.iterations,
            converged: fit.converged,
            n_units: dataset.n_units(),
            n_events: dataset.total_events(),
            coefficients: coefficient_rows(&fit),
        },
    )?;
    write_file("fit", &out.join("baseline.csv"), |w| {
        writeln!(w, "kind,t,value")?;
        for (t, v) in step.jump_times().iter().zip(step.cum_values()) {
            writeln!(w, "step,{t},{v}")?;
        }
        for (t, v) in smooth.grid().iter().zip(smooth.values()) {
            writeln!(w, "smooth,{t},{v}")?;
        }
        Ok(())
    })?;
    write_file("fit", &out.join("compensators.csv"), |w| {
        compensators.write_long_csv(w)
    })?;
    Ok(compensators)
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LevelReport {
    components: usize,
    eigenvalues: Vec<f64>,
    total_variance: f64,
    achieved_pve: f64,
    clipped_negative_mass: f64,
}

#[derive(Serialize)]
struct MfpcaReport<'a> {
    resolved_config: &'a RunConfig,
    n_curves: usize,
    n_clusters: usize,
    level1: LevelReport,
    level2: LevelReport,
    rho: f64,
    residual_fraction: f64,
}

fn level_report(deco: &rhl_core::mfpca::LevelDecomposition) -> LevelReport {
    LevelReport {
        components: deco.n_components(),
        eigenvalues: deco.eigenvalues.clone(),
        total_variance: deco.total_variance,
        achieved_pve: deco.achieved_pve,
        clipped_negative_mass: deco.clipped_negative_mass,
    }
}

/// Emits eigenfunctions.csv, scores.csv, perturbations.csv, mfpca_report.json.
pub fn cmd_decompose(config: &RunConfig) -> StageResult<MFPCAResult> {
    let out = &config.io.out_dir;
    ensure_out_dir("decompose", out)?;
    let input = config
        .mfpca
        .input
        .clone()
        .unwrap_or_else(|| out.join("compensators.csv"));
    let curves = CompensatorSet::read_long_csv(&input).stage("decompose")?;
    let result = mfpca(&curves, config.mfpca.pve1, config.mfpca.pve2).stage("decompose")?;

    write_file("decompose", &out.join("eigenfunctions.csv"), |w| {
        writeln!(w, "level,component,t,value")?;
        for (level_no, deco) in [(1, &result.level1), (2, &result.level2)] {
            for (c, phi) in deco.eigenfunctions.iter().enumerate() {
                for (t, v) in phi.grid().iter().zip(phi.values()) {
                    writeln!(w, "{level_no},{},{t},{v}", c + 1)?;
                }
            }
        }
        Ok(())
    })?;
    write_file("decompose", &out.join("scores.csv"), |w| {
        ScoreTable::from(&result).write_csv(w)
    })?;
    write_file("decompose", &out.join("perturbations.csv"), |w| {
        writeln!(w, "level,component,direction,t,value")?;
        for (level_no, level, deco) in [
            (1, MfpcaLevel::Level1, &result.level1),
            (2, MfpcaLevel::Level2, &result.level2),
        ] {
            for c in 0..deco.n_components() {
                let (plus, minus) = perturbation_curves(&result, level, c)
                    .expect("retained components are in range");
                for (direction, curve) in [("plus", &plus), ("minus", &minus)] {
                    for (t, v) in curve.grid().iter().zip(curve.values()) {
                        writeln!(w, "{level_no},{},{direction},{t},{v}", c + 1)?;
                    }
                }
            }
        }
        Ok(())
    })?;
    write_json(
        "decompose",
        &out.join("mfpca_report.json"),
        &MfpcaReport {
            resolved_config: config,
            n_curves: curves.n_curves(),
            n_clusters: result.cluster_ids.len(),
            level1: level_report(&result.level1),
            level2: level_report(&result.level2),
            rho: result.rho,
            residual_fraction: result.residual_fraction,
        },
    )?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MetricsReport<'a> {
    resolved_config: &'a RunConfig,
    n_students: usize,
    k: usize,
    l: usize,
    converged: bool,
    separation: bool,
    loglik: f64,
    aic: f64,
    /// All metrics are in-sample (fitted on the full cohort).
    in_sample: ClassificationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic_truth: Option<CohortTruth>,
}

#[derive(Serialize)]
struct ComparisonReport {
    aic_without_scores: f64,
    auc_without_scores: f64,
    delta_aic: f64,
    delta_auc: f64,
}

fn logistic_report_rows(fit: &LogisticFit) -> Vec<CoefficientReport> {
    fit.column_names
        .iter()
        .zip(&fit.coefficients)
        .zip(&fit.standard_errors)
        .zip(&fit.p_values)
        .map(|(((name, estimate), std_error), p_value)| CoefficientReport {
            name: name.clone(),
            estimate: *estimate,
            std_error: *std_error,
            p_value: *p_value,
        })
        .collect()
}

/// Emits logistic_report.csv and metrics.json; synthesizes and writes
/// students.csv when no cohort file is configured.
pub fn cmd_predict(config: &RunConfig) -> StageResult<()> {
    let out = &config.io.out_dir;
    ensure_out_dir("predict", out)?;
    let scores_path = config
        .predict
        .scores
        .clone()
        .unwrap_or_else(|| out.join("scores.csv"));
    let scores = ScoreTable::read_csv(&scores_path).stage("predict")?;
    let k = config.predict.k.min(scores.k_available());
    let l = config.predict.l.min(scores.l_available());

    let mut synthetic_truth = None;
    let students: PredictionDataset = match &config.predict.students {
        Some(path) => rhl_core::dataio::read_students_csv(path).stage("predict")?,
        None => {
            let cohort_config = config.predict.cohort.to_cohort_config(k, l);
            let (cohort, truth) =
                synthesize_cohort(&scores, &cohort_config, config.seed).stage("predict")?;
            write_file("predict", &out.join("students.csv"), |w| {
                write_students_csv(&cohort, w)
            })?;
            synthetic_truth = Some(truth);
            cohort
        }
    };

    let design = build_design(&students, &scores, k, l).stage("predict")?;
    let options = LogisticOptions::default();
    let fit = fit_logistic(&design, options).stage("predict")?;
    let metrics = evaluate(&fit, &design, config.predict.threshold).stage("predict")?;
    let _ = predict_probabilities(&fit, &design);

    let comparison = if config.predict.compare && k + l > 0 {
        let reduced = build_design(&students, &scores, 0, 0).stage("predict")?;
        let cmp =
            compare_models(&design, &reduced, options, config.predict.threshold).stage("predict")?;
        Some(ComparisonReport {
            aic_without_scores: cmp.fit_without.aic,
            auc_without_scores: cmp.metrics_without.auc,
            delta_aic: cmp.delta_aic,
            delta_auc: cmp.delta_auc,
        })
    } else {
        None
    };

    write_file("predict", &out.join("logistic_report.csv"), |w| {
        writeln!(w, "parameter,estimate,std_error,p_value")?;
        for row in logistic_report_rows(&fit) {
            writeln!(w, "{},{},{},{}", row.name, row.estimate, row.std_error, row.p_value)?;
        }
        Ok(())
    })?;
    write_json(
        "predict",
        &out.join("metrics.json"),
        &MetricsReport {
            resolved_config: config,
            n_students: students.records.len(),
            k,
            l,
            converged: fit.converged,
            separation: fit.separation,
            loglik: fit.loglik,
            aic: fit.aic,
            in_sample: metrics,
            comparison,
            synthetic_truth,
        },
    )?;
    Ok(())
}

/// All stages in sequence on one seed and one output directory.
pub fn cmd_pipeline(config: &RunConfig) -> StageResult<()> {
    cmd_simulate(config)?;
    cmd_fit(config)?;
    cmd_decompose(config)?;
    cmd_predict(config)?;
    Ok(())
}

