//! Student-level logistic model: one-hot design with replicated functional
//! scores, IRLS fitting with Wald inference, classification metrics, nested
//! model comparison, and a synthetic cohort generator with a known logit.

use crate::dataio::{
    Gender, HighschoolType, Income, Origins, PredictionDataset, StudentRecord,
};
use crate::error::{Error, Result};
use crate::mfpca::MFPCAResult;
use crate::simulate::cohort_stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Level-1 and level-2 scores keyed by cluster / unit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub cluster_ids: Vec<String>,
    /// clusters x K_available.
    pub xi: DMatrix<f64>,
    pub unit_labels: Vec<(String, String)>,
    /// units x L_available.
    pub zeta: DMatrix<f64>,
}

impl From<&MFPCAResult> for ScoreTable {
    fn from(result: &MFPCAResult) -> Self {
        Self {
            cluster_ids: result.cluster_ids.clone(),
            xi: result.level1.scores.clone(),
            unit_labels: result.unit_labels.clone(),
            zeta: result.level2.scores.clone(),
        }
    }
}

impl ScoreTable {
    pub fn k_available(&self) -> usize {
        self.xi.ncols()
    }

    pub fn l_available(&self) -> usize {
        self.zeta.ncols()
    }

    /// Long-format export: `level,cluster_id,unit_id,component,value` with
    /// 1-based components and empty unit for level-1 rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "level,cluster_id,unit_id,component,value")?;
        for (i, cluster) in self.cluster_ids.iter().enumerate() {
            for k in 0..self.xi.ncols() {
                writeln!(out, "1,{},,{},{}", cluster, k + 1, self.xi[(i, k)])?;
            }
        }
        for (i, (cluster, unit)) in self.unit_labels.iter().enumerate() {
            for l in 0..self.zeta.ncols() {
                writeln!(out, "2,{},{},{},{}", cluster, unit, l + 1, self.zeta[(i, l)])?;
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "level,cluster_id,unit_id,component,value" {
            return Err(Error::MissingColumn(
                "level,cluster_id,unit_id,component,value header".into(),
            ));
        }
        let mut level1: Vec<(String, Vec<f64>)> = Vec::new();
        let mut level2: Vec<((String, String), Vec<f64>)> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(5, ',').collect();
            if parts.len() != 5 {
                return Err(Error::Parse {
                    context: "score row".into(),
                    value: line.clone(),
                });
            }
            let value: f64 = parts[4].parse().map_err(|_| Error::Parse {
                context: "score value".into(),
                value: parts[4].into(),
            })?;
            let component: usize = parts[3].parse().map_err(|_| Error::Parse {
                context: "score component".into(),
                value: parts[3].into(),
            })?;
            match parts[0] {
                "1" => {
                    let cluster = parts[1].to_string();
                    if level1.last().map(|(c, _)| c != &cluster).unwrap_or(true) {
                        level1.push((cluster, Vec::new()));
                    }
                    let row = &mut level1.last_mut().unwrap().1;
                    if row.len() + 1 != component {
                        return Err(Error::Parse {
                            context: "score component order".into(),
                            value: line.clone(),
                        });
                    }
                    row.push(value);
                }
                "2" => {
                    let key = (parts[1].to_string(), parts[2].to_string());
                    if level2.last().map(|(k, _)| k != &key).unwrap_or(true) {
                        level2.push((key, Vec::new()));
                    }
                    level2.last_mut().unwrap().1.push(value);
                }
                other => {
                    return Err(Error::Parse {
                        context: "score level".into(),
                        value: other.into(),
                    })
                }
            }
        }
        let k = level1.first().map_or(0, |(_, v)| v.len());
        let l = level2.first().map_or(0, |(_, v)| v.len());
        let xi = DMatrix::from_fn(level1.len(), k, |i, j| level1[i].1[j]);
        let zeta = DMatrix::from_fn(level2.len(), l, |i, j| level2[i].1[j]);
        Ok(Self {
            cluster_ids: level1.into_iter().map(|(c, _)| c).collect(),
            xi,
            unit_labels: level2.into_iter().map(|(k, _)| k).collect(),
            zeta,
        })
    }
}

/// Design matrix with outcome, one row per student.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub column_names: Vec<String>,
    pub matrix: DMatrix<f64>,
    pub outcome: Vec<bool>,
    pub student_ids: Vec<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Fixed column layout: intercept, one-hot covariates in table order,
/// numeric covariates, then the replicated level-1 and level-2 scores.
pub fn design_column_names(k: usize, l: usize) -> Vec<String> {
    let mut names = vec![
        "intercept".to_string(),
        "origins_commuter".to_string(),
        "origins_offsite".to_string(),
        "gender_female".to_string(),
        "highschool_classical".to_string(),
        "highschool_others".to_string(),
        "highschool_technical".to_string(),
        "income_grant".to_string(),
        "income_high".to_string(),
        "income_low".to_string(),
        "age19_1".to_string(),
        "admission_score".to_string(),
        "ects1sem".to_string(),
    ];
    names.extend((1..=k).map(|c| format!("school_score_{c}")));
    names.extend((1..=l).map(|c| format!("course_score_{c}")));
    names
}

fn covariate_row(record: &StudentRecord) -> [f64; 13] {
    [
        1.0,
        f64::from(record.origins == Origins::Commuter),
        f64::from(record.origins == Origins::Offsite),
        f64::from(record.gender == Gender::Female),
        f64::from(record.highschool_type == HighschoolType::Classical),
        f64::from(record.highschool_type == HighschoolType::Others),
        f64::from(record.highschool_type == HighschoolType::Technical),
        f64::from(record.income == Income::Grant),
        f64::from(record.income == Income::High),
        f64::from(record.income == Income::Low),
        f64::from(record.age19),
        record.admission_score,
        record.ects1sem as f64,
    ]
}

/// Assemble the design: student covariates plus the first `k` level-1 and
/// `l` level-2 scores joined by exact (school, course) label match.
pub fn build_design(
    students: &PredictionDataset,
    scores: &ScoreTable,
    k: usize,
    l: usize,
) -> Result<DesignMatrix> {
    if students.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k > scores.k_available() {
        return Err(Error::ComponentOutOfRange {
            level: 1,
            component: k,
            retained: scores.k_available(),
        });
    }
    if l > scores.l_available() {
        return Err(Error::ComponentOutOfRange {
            level: 2,
            component: l,
            retained: scores.l_available(),
        });
    }
    let column_names = design_column_names(k, l);
    let p = column_names.len();
    let n = students.records.len();
    let mut matrix = DMatrix::zeros(n, p);
    let mut outcome = Vec::with_capacity(n);
    let mut student_ids = Vec::with_capacity(n);

    for (row, record) in students.records.iter().enumerate() {
        let base = covariate_row(record);
        for (j, v) in base.iter().enumerate() {
            matrix[(row, j)] = *v;
        }
        let ci = scores
            .cluster_ids
            .iter()
            .position(|c| *c == record.school_id)
            .ok_or_else(|| Error::UnmatchedGroupLabel {
                student: record.student_id.clone(),
                label: record.school_id.clone(),
            })?;
        for c in 0..k {
            matrix[(row, 13 + c)] = scores.xi[(ci, c)];
        }
        let ui = scores
            .unit_labels
            .iter()
            .position(|(_, u)| *u == record.course_id)
            .ok_or_else(|| Error::UnmatchedGroupLabel {
                student: record.student_id.clone(),
                label: record.course_id.clone(),
            })?;
        for c in 0..l {
            matrix[(row, 13 + k + c)] = scores.zeta[(ui, c)];
        }
        outcome.push(record.dropout3y);
        student_ids.push(record.student_id.clone());
    }
    Ok(DesignMatrix {
        column_names,
        matrix,
        outcome,
        student_ids,
    })
}

/// IRLS options.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LogisticOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Fitted logistic model with Wald inference.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Monotone-likelihood warning: huge coefficients or near-singular information.
    pub separation: bool,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-(eta.abs())).exp().ln_1p()
}

fn bernoulli_loglik(eta: &DVector<f64>, y: &[bool]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(e, yi)| if *yi { e - softplus(*e) } else { -softplus(*e) })
        .sum()
}

/// Newton/IRLS maximum likelihood from the zero start.
pub fn fit_logistic(design: &DesignMatrix, options: LogisticOptions) -> Result<LogisticFit> {
    let x = &design.matrix;
    let n = x.nrows();
    let p = x.ncols();
    let y = &design.outcome;

    // cheap, nameable rank check: constant non-intercept columns
    for j in 1..p {
        let first = x[(0, j)];
        if (0..n).all(|i| x[(i, j)] == first) {
            return Err(Error::RankDeficient {
                column: design.column_names[j].clone(),
            });
        }
    }

    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut loglik = bernoulli_loglik(&eta, y);
    let mut iterations = 0;
    let mut converged = false;
    let mut information = DMatrix::zeros(p, p);

    loop {
        let mu: DVector<f64> = eta.map(sigmoid);
        let residual = DVector::from_fn(n, |i, _| f64::from(y[i]) - mu[i]);
        let gradient = x.transpose() * &residual;
        information.fill(0.0);
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            for a in 0..p {
                let xa = x[(i, a)] * w;
                for b in 0..=a {
                    information[(a, b)] += xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                information[(b, a)] = information[(a, b)];
            }
        }

        if gradient.amax() <= options.tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;

        let Some(chol) = information.clone().cholesky() else {
            if iterations == 1 {
                return Err(Error::RankDeficient {
                    column: "unidentified collinear set".into(),
                });
            }
            break; // flat weights from separation; keep the current estimate
        };
        let direction = chol.solve(&gradient);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..=30 {
            let candidate = &beta + &direction * step;
            let eta_c = x * &candidate;
            let ll = bernoulli_loglik(&eta_c, y);
            if ll.is_finite() && ll >= loglik - 1e-14 {
                beta = candidate;
                eta = eta_c;
                loglik = ll;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }

    let separation = beta.iter().any(|b| b.abs() > 30.0)
        || information.clone().cholesky().is_none();
    if separation {
        log::warn!("possible separation: coefficients or information ill-conditioned");
    }

    let covariance = information.clone().cholesky().map(|c| c.inverse());
    let standard_errors: Vec<f64> = match &covariance {
        Some(cov) => (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p_values: Vec<f64> = beta
        .iter()
        .zip(&standard_errors)
        .map(|(b, se)| {
            if !se.is_finite() || *se == 0.0 {
                f64::NAN
            } else {
                2.0 * (1.0 - normal.cdf((b / se).abs()))
            }
        })
        .collect();

    Ok(LogisticFit {
        column_names: design.column_names.clone(),
        coefficients: beta.iter().copied().collect(),
        standard_errors,
        p_values,
        loglik,
        aic: 2.0 * p as f64 - 2.0 * loglik,
        converged,
        iterations,
        separation,
    })
}

/// Fitted probabilities of a design under a fit.
pub fn predict_probabilities(fit: &LogisticFit, design: &DesignMatrix) -> Vec<f64> {
    let beta = DVector::from_vec(fit.coefficients.clone());
    (&design.matrix * beta).iter().map(|e| sigmoid(*e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub threshold: f64,
    pub confusion: Confusion,
}

/// Rank-based AUC counting ties as 1/2 (Mann-Whitney statistic).
pub fn auc_concordance(scores: &[f64], outcomes: &[bool]) -> Result<f64> {
    let n_pos = outcomes.iter().filter(|o| **o).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateOutcome);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // mid-rank of the tied block [i, j)
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if outcomes[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Confusion counts at the threshold plus AUC on the fitted probabilities.
pub fn evaluate(
    fit: &LogisticFit,
    design: &DesignMatrix,
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidValue {
            context: "evaluate".into(),
            detail: format!("threshold must lie in (0, 1), got {threshold}"),
        });
    }
    let probabilities = predict_probabilities(fit, design);
    let auc = auc_concordance(&probabilities, &design.outcome)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, y) in probabilities.iter().zip(&design.outcome) {
        match (*p >= threshold, *y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = design.outcome.len() as f64;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            f64::NAN
        } else {
            num as f64 / den as f64
        }
    };
    Ok(ClassificationMetrics {
        auc,
        accuracy: (tp + tn) as f64 / n,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
        threshold,
        confusion: Confusion { tp, tn, fp, fn_ },
    })
}

/// Paired fits of nested designs with AIC and AUC differences
/// (with-scores minus without-scores).
#[derive(Debug, Clone)]
pub struct ModelComparison {
    pub fit_with: LogisticFit,
    pub fit_without: LogisticFit,
    pub metrics_with: ClassificationMetrics,
    pub metrics_without: ClassificationMetrics,
    pub delta_aic: f64,
    pub delta_auc: f64,
}

pub fn compare_models(
    design_with: &DesignMatrix,
    design_without: &DesignMatrix,
    options: LogisticOptions,
    threshold: f64,
) -> Result<ModelComparison> {
    if design_with.n_rows() != design_without.n_rows()
        || design_with.outcome != design_without.outcome
    {
        return Err(Error::InvalidValue {
            context: "compare_models".into(),
            detail: "designs must cover the same rows and outcomes".into(),
        });
    }
    if !design_without
        .column_names
        .iter()
        .all(|c| design_with.column_names.contains(c))
    {
        return Err(Error::InvalidValue {
            context: "compare_models".into(),
            detail: "column sets must be nested".into(),
        });
    }
    let fit_with = fit_logistic(design_with, options)?;
    let fit_without = fit_logistic(design_without, options)?;
    let metrics_with = evaluate(&fit_with, design_with, threshold)?;
    let metrics_without = evaluate(&fit_without, design_without, threshold)?;
    Ok(ModelComparison {
        delta_aic: fit_with.aic - fit_without.aic,
        delta_auc: metrics_with.auc - metrics_without.auc,
        fit_with,
        fit_without,
        metrics_with,
        metrics_without,
    })
}

// ---------------------------------------------------------------------------
// Synthetic cohort
// ---------------------------------------------------------------------------

/// Settings of the synthetic student cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub students_per_unit: usize,
    /// Score terms entering the generating logit.
    pub k: usize,
    pub l: usize,
    /// Per-standard-deviation logit effect of the level-1 scores.
    pub score_effect_level1: f64,
    /// Per-standard-deviation logit effect of the level-2 scores.
    pub score_effect_level2: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            students_per_unit: 20,
            k: 2,
            l: 1,
            score_effect_level1: 0.8,
            score_effect_level2: 0.5,
        }
    }
}

/// The generating coefficients of a synthetic cohort, ordered like the
/// design columns of `build_design(students, scores, k, l)`.
#[derive(Debug, Clone, Serialize)]
pub struct CohortTruth {
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
}

const TRUE_GAMMA: [f64; 13] = [
    -1.0,  // intercept
    0.25,  // origins_commuter
    -0.1,  // origins_offsite
    -0.3,  // gender_female
    0.1,   // highschool_classical
    0.15,  // highschool_others
    0.45,  // highschool_technical
    0.2,   // income_grant
    0.15,  // income_high
    -0.2,  // income_low
    0.5,   // age19_1
    0.015, // admission_score
    -0.06, // ects1sem
];

fn column_sd(m: &DMatrix<f64>, col: usize) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let mean = m.column(col).sum() / n as f64;
    let var = m
        .column(col)
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n as f64 - 1.0);
    var.sqrt()
}

/// Draw a student cohort whose dropout outcome follows a known logit with
/// the given score terms. Score coefficients are scaled to the realized
/// score spread so each contributes `score_effect / sd` per unit of score.
pub fn synthesize_cohort(
    scores: &ScoreTable,
    config: &CohortConfig,
    seed: u64,
) -> Result<(PredictionDataset, CohortTruth)> {
    let k = config.k.min(scores.k_available());
    let l = config.l.min(scores.l_available());
    let alpha1: Vec<f64> = (0..k)
        .map(|c| {
            let sd = column_sd(&scores.xi, c);
            if sd > 1e-9 {
                config.score_effect_level1 / sd
            } else {
                0.0
            }
        })
        .collect();
    let alpha2: Vec<f64> = (0..l)
        .map(|c| {
            let sd = column_sd(&scores.zeta, c);
            if sd > 1e-9 {
                config.score_effect_level2 / sd
            } else {
                0.0
            }
        })
        .collect();

    let mut records = Vec::new();
    for (ui, (cluster, unit)) in scores.unit_labels.iter().enumerate() {
        let ci = scores
            .cluster_ids
            .iter()
            .position(|c| c == cluster)
            .expect("score table is internally consistent");
        let mut rng = cohort_stream(seed, ui as u64, 0);
        for h in 0..config.students_per_unit {
            let origins = match rng.random::<f64>() {
                v if v < 0.22 => Origins::OnSite,
                v if v < 0.93 => Origins::Commuter,
                _ => Origins::Offsite,
            };
            let gender = if rng.random::<f64>() < 0.68 {
                Gender::Male
            } else {
                Gender::Female
            };
            let highschool_type = match rng.random::<f64>() {
                v if v < 0.66 => HighschoolType::Scientific,
                v if v < 0.73 => HighschoolType::Classical,
                v if v < 0.85 => HighschoolType::Others,
                _ => HighschoolType::Technical,
            };
            let income = match rng.random::<f64>() {
                v if v < 0.20 => Income::Medium,
                v if v < 0.50 => Income::Grant,
                v if v < 0.88 => Income::High,
                _ => Income::Low,
            };
            let record = StudentRecord {
                student_id: format!("{unit}_h{h:03}"),
                origins,
                gender,
                highschool_type,
                income,
                age19: rng.random::<f64>() < 0.13,
                admission_score: 60.0 + 40.0 * rng.random::<f64>(),
                ects1sem: rng.random_range(0..=60u32),
                course_id: unit.clone(),
                school_id: cluster.clone(),
                dropout3y: false,
            };
            let base = covariate_row(&record);
            let mut logit: f64 = base.iter().zip(&TRUE_GAMMA).map(|(x, g)| x * g).sum();
            for (c, a) in alpha1.iter().enumerate() {
                logit += a * scores.xi[(ci, c)];
            }
            for (c, a) in alpha2.iter().enumerate() {
                logit += a * scores.zeta[(ui, c)];
            }
            let dropout3y = rng.random::<f64>() < sigmoid(logit);
            records.push(StudentRecord { dropout3y, ..record });
        }
    }

    let mut coefficients = TRUE_GAMMA.to_vec();
    coefficients.extend(&alpha1);
    coefficients.extend(&alpha2);
    Ok((
        PredictionDataset::new(records)?,
        CohortTruth {
            column_names: design_column_names(k, l),
            coefficients,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PredictionDataset;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn student(
        id: &str,
        gender: Gender,
        ects: u32,
        course: &str,
        school: &str,
        dropout: bool,
    ) -> StudentRecord {
        StudentRecord {
            student_id: id.into(),
            origins: Origins::OnSite,
            gender,
            highschool_type: HighschoolType::Scientific,
            income: Income::Medium,
            age19: false,
            admission_score: 70.0,
            ects1sem: ects,
            course_id: course.into(),
            school_id: school.into(),
            dropout3y: dropout,
        }
    }

    fn toy_scores() -> ScoreTable {
        ScoreTable {
            cluster_ids: vec!["sA".into(), "sB".into()],
            xi: DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -1.0, 0.5]),
            unit_labels: vec![
                ("sA".into(), "P01".into()),
                ("sA".into(), "P02".into()),
                ("sB".into(), "P03".into()),
            ],
            zeta: DMatrix::from_row_slice(3, 1, &[0.2, -0.1, 0.3]),
        }
    }

    fn design_from(records: Vec<StudentRecord>, k: usize, l: usize) -> DesignMatrix {
        let students = PredictionDataset::new(records).unwrap();
        build_design(&students, &toy_scores(), k, l).unwrap()
    }

    #[test]
    fn design_without_scores_has_pure_covariate_columns() {
        let design = design_from(
            vec![
                student("s1", Gender::Male, 30, "P01", "sA", false),
                student("s2", Gender::Female, 10, "P03", "sB", true),
            ],
            0,
            0,
        );
        assert_eq!(design.n_cols(), 13);
        assert_eq!(design.column_names[0], "intercept");
        assert_eq!(design.matrix[(0, 0)], 1.0);
        assert_eq!(design.matrix[(1, 3)], 1.0); // gender_female
        assert_eq!(design.matrix[(0, 12)], 30.0); // ects1sem
    }

    #[test]
    fn students_in_one_course_share_score_columns() {
        let design = design_from(
            vec![
                student("s1", Gender::Male, 30, "P02", "sA", false),
                student("s2", Gender::Female, 10, "P02", "sA", true),
            ],
            2,
            1,
        );
        let k0 = design.column_names.iter().position(|c| c == "school_score_1").unwrap();
        let l0 = design.column_names.iter().position(|c| c == "course_score_1").unwrap();
        for col in [k0, k0 + 1, l0] {
            assert_eq!(design.matrix[(0, col)], design.matrix[(1, col)]);
        }
        assert_eq!(design.matrix[(0, l0)], -0.1);
    }

    #[test]
    fn unknown_course_label_is_rejected() {
        let students = PredictionDataset::new(vec![student(
            "s1",
            Gender::Male,
            30,
            "P99",
            "sA",
            false,
        )])
        .unwrap();
        let err = build_design(&students, &toy_scores(), 1, 1).unwrap_err();
        assert!(matches!(err, Error::UnmatchedGroupLabel { .. }));
    }

    #[test]
    fn requesting_too_many_components_is_rejected() {
        let students =
            PredictionDataset::new(vec![student("s1", Gender::Male, 30, "P01", "sA", false)])
                .unwrap();
        let err = build_design(&students, &toy_scores(), 3, 1).unwrap_err();
        assert!(matches!(err, Error::ComponentOutOfRange { level: 1, .. }));
    }

    /// Intercept-only design with the given outcomes.
    fn intercept_only(outcomes: &[bool]) -> DesignMatrix {
        DesignMatrix {
            column_names: vec!["intercept".into()],
            matrix: DMatrix::from_element(outcomes.len(), 1, 1.0),
            outcome: outcomes.to_vec(),
            student_ids: (0..outcomes.len()).map(|i| format!("s{i}")).collect(),
        }
    }

    #[test]
    fn balanced_intercept_only_fit_is_zero() {
        let design = intercept_only(&[true, false, true, false]);
        let fit = fit_logistic(&design, LogisticOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-10);
        let p = predict_probabilities(&fit, &design);
        for v in p {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_by_two_slope_equals_log_odds_ratio() {
        // binary covariate x; cell counts (x=1,y=1)=a, (x=1,y=0)=b,
        // (x=0,y=1)=c, (x=0,y=0)=d; slope = ln(ad / bc)
        let (a, b, c, d) = (20usize, 10usize, 5usize, 15usize);
        let mut rows = Vec::new();
        let mut outcome = Vec::new();
        for (x, y, count) in [(1.0, true, a), (1.0, false, b), (0.0, true, c), (0.0, false, d)] {
            for _ in 0..count {
                rows.push([1.0, x]);
                outcome.push(y);
            }
        }
        let design = DesignMatrix {
            column_names: vec!["intercept".into(), "x".into()],
            matrix: DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]),
            outcome,
            student_ids: (0..rows.len()).map(|i| format!("s{i}")).collect(),
        };
        let fit = fit_logistic(&design, LogisticOptions::default()).unwrap();
        let expected = ((a * d) as f64 / (b * c) as f64).ln();
        assert_abs_diff_eq!(fit.coefficients[1], expected, epsilon = 1e-6);
        // intercept reproduces the x=0 log odds
        assert_abs_diff_eq!(fit.coefficients[0], (c as f64 / d as f64).ln(), epsilon = 1e-6);
    }

    #[test]
    fn aic_identity_against_recomputed_loglik() {
        let design = design_from(
            vec![
                student("s1", Gender::Male, 30, "P01", "sA", false),
                student("s2", Gender::Female, 10, "P02", "sA", true),
                student("s3", Gender::Male, 50, "P03", "sB", false),
                student("s4", Gender::Female, 5, "P03", "sB", true),
                student("s5", Gender::Male, 20, "P01", "sA", true),
                student("s6", Gender::Female, 45, "P02", "sA", false),
            ],
            1,
            0,
        );
        // keep only identifiable columns: intercept, gender, ects, score
        let keep = ["intercept", "gender_female", "ects1sem", "school_score_1"];
        let cols: Vec<usize> = keep
            .iter()
            .map(|k| design.column_names.iter().position(|c| c == k).unwrap())
            .collect();
        let reduced = DesignMatrix {
            column_names: keep.iter().map(|s| s.to_string()).collect(),
            matrix: DMatrix::from_fn(design.n_rows(), cols.len(), |i, j| {
                design.matrix[(i, cols[j])]
            }),
            outcome: design.outcome.clone(),
            student_ids: design.student_ids.clone(),
        };
        let fit = fit_logistic(&reduced, LogisticOptions::default()).unwrap();
        let probabilities = predict_probabilities(&fit, &reduced);
        let loglik: f64 = probabilities
            .iter()
            .zip(&reduced.outcome)
            .map(|(p, y)| if *y { p.ln() } else { (1.0 - p).ln() })
            .sum();
        assert_abs_diff_eq!(fit.aic, 2.0 * 4.0 - 2.0 * loglik, epsilon = 1e-8);
        // score equation for the intercept: mean fitted = outcome rate
        let rate = reduced.outcome.iter().filter(|y| **y).count() as f64 / 6.0;
        let mean_p: f64 = probabilities.iter().sum::<f64>() / 6.0;
        assert_abs_diff_eq!(mean_p, rate, epsilon = 1e-8);
    }

    #[test]
    fn row_permutation_leaves_coefficients_unchanged() {
        let base = vec![
            student("s1", Gender::Male, 30, "P01", "sA", false),
            student("s2", Gender::Female, 10, "P02", "sA", true),
            student("s3", Gender::Male, 50, "P03", "sB", false),
            student("s4", Gender::Female, 5, "P03", "sB", true),
        ];
        let mut permuted = base.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 2);
        let d0 = design_from(base, 0, 0);
        let d1 = design_from(permuted, 0, 0);
        // drop non-identifiable one-hots for this 4-row toy
        let keep = ["intercept", "gender_female", "ects1sem"];
        let shrink = |d: &DesignMatrix| {
            let cols: Vec<usize> = keep
                .iter()
                .map(|k| d.column_names.iter().position(|c| c == k).unwrap())
                .collect();
            DesignMatrix {
                column_names: keep.iter().map(|s| s.to_string()).collect(),
                matrix: DMatrix::from_fn(d.n_rows(), cols.len(), |i, j| d.matrix[(i, cols[j])]),
                outcome: d.outcome.clone(),
                student_ids: d.student_ids.clone(),
            }
        };
        let f0 = fit_logistic(&shrink(&d0), LogisticOptions::default()).unwrap();
        let f1 = fit_logistic(&shrink(&d1), LogisticOptions::default()).unwrap();
        for (a, b) in f0.coefficients.iter().zip(&f1.coefficients) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_column_is_reported_rank_deficient() {
        let design = DesignMatrix {
            column_names: vec!["intercept".into(), "flat".into()],
            matrix: DMatrix::from_fn(4, 2, |_, j| if j == 0 { 1.0 } else { 3.0 }),
            outcome: vec![true, false, true, false],
            student_ids: (0..4).map(|i| format!("s{i}")).collect(),
        };
        let err = fit_logistic(&design, LogisticOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { column } if column == "flat"));
    }

    #[test]
    fn separation_is_flagged_but_returns_a_fit() {
        let design = DesignMatrix {
            column_names: vec!["intercept".into(), "x".into()],
            matrix: DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { i as f64 }),
            outcome: (0..8).map(|i| i >= 4).collect(),
            student_ids: (0..8).map(|i| format!("s{i}")).collect(),
        };
        let fit = fit_logistic(&design, LogisticOptions::default()).unwrap();
        assert!(fit.separation);
    }

    #[test]
    fn auc_of_perfect_separation_is_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let outcomes = [false, false, true, true];
        assert_abs_diff_eq!(auc_concordance(&scores, &outcomes).unwrap(), 1.0);
    }

    #[test]
    fn auc_of_constant_scores_is_half() {
        let scores = [0.4; 6];
        let outcomes = [true, false, true, false, false, true];
        assert_abs_diff_eq!(auc_concordance(&scores, &outcomes).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_enumeration_fixture() {
        // pairs: concordant {0.35>0.1}, {0.8>0.1}, {0.8>0.4}; discordant {0.35<0.4}
        let scores = [0.1, 0.4, 0.35, 0.8];
        let outcomes = [false, false, true, true];
        assert_abs_diff_eq!(auc_concordance(&scores, &outcomes).unwrap(), 0.75);
    }

    #[test]
    fn degenerate_outcome_is_an_error() {
        let scores = [0.1, 0.4];
        let outcomes = [true, true];
        assert!(matches!(
            auc_concordance(&scores, &outcomes).unwrap_err(),
            Error::DegenerateOutcome
        ));
    }

    #[test]
    fn evaluate_reports_confusion_at_threshold() {
        let design = intercept_only(&[true, true, true, false]);
        let fit = fit_logistic(&design, LogisticOptions::default()).unwrap();
        // fitted probability is 0.75 everywhere; threshold 0.5 calls all positive
        let metrics = evaluate(&fit, &design, 0.5).unwrap();
        assert_eq!(metrics.confusion.tp, 3);
        assert_eq!(metrics.confusion.fp, 1);
        assert_abs_diff_eq!(metrics.accuracy, 0.75);
        assert_abs_diff_eq!(metrics.sensitivity, 1.0);
        assert_abs_diff_eq!(metrics.auc, 0.5);
    }

    #[test]
    fn comparing_identical_designs_gives_zero_deltas() {
        let design = design_from(
            vec![
                student("s1", Gender::Male, 30, "P01", "sA", false),
                student("s2", Gender::Female, 10, "P02", "sA", true),
                student("s3", Gender::Male, 50, "P03", "sB", false),
                student("s4", Gender::Female, 25, "P03", "sB", true),
            ],
            0,
            0,
        );
        let keep = ["intercept", "gender_female", "ects1sem"];
        let cols: Vec<usize> = keep
            .iter()
            .map(|k| design.column_names.iter().position(|c| c == k).unwrap())
            .collect();
        let reduced = DesignMatrix {
            column_names: keep.iter().map(|s| s.to_string()).collect(),
            matrix: DMatrix::from_fn(design.n_rows(), cols.len(), |i, j| {
                design.matrix[(i, cols[j])]
            }),
            outcome: design.outcome.clone(),
            student_ids: design.student_ids.clone(),
        };
        let cmp = compare_models(&reduced, &reduced, LogisticOptions::default(), 0.5).unwrap();
        assert_abs_diff_eq!(cmp.delta_aic, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cmp.delta_auc, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn score_csv_round_trip() {
        let table = toy_scores();
        let mut buffer = Vec::new();
        table.write_csv(&mut buffer).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, &buffer).unwrap();
        let reread = ScoreTable::read_csv(&path).unwrap();
        assert_eq!(table, reread);
    }

    #[test]
    fn synthetic_cohort_is_deterministic_and_balanced() {
        let scores = toy_scores();
        let config = CohortConfig {
            students_per_unit: 50,
            ..CohortConfig::default()
        };
        let (cohort_a, truth_a) = synthesize_cohort(&scores, &config, 11).unwrap();
        let (cohort_b, _) = synthesize_cohort(&scores, &config, 11).unwrap();
        assert_eq!(cohort_a, cohort_b);
        assert_eq!(cohort_a.records.len(), 150);
        assert_eq!(truth_a.coefficients.len(), truth_a.column_names.len());
        let dropouts = cohort_a.records.iter().filter(|r| r.dropout3y).count();
        assert!(dropouts > 0 && dropouts < 150);
        let (cohort_c, _) = synthesize_cohort(&scores, &config, 12).unwrap();
        assert_ne!(cohort_a, cohort_c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        // AUC is invariant under strictly increasing transforms of the scores
        #[test]
        fn auc_is_invariant_under_monotone_transforms(
            scores in prop::collection::vec(-3.0f64..3.0, 4..40),
            flips in prop::collection::vec(any::<bool>(), 4..40),
        ) {
            let n = scores.len().min(flips.len());
            let scores = &scores[..n];
            let outcomes = &flips[..n];
            prop_assume!(outcomes.iter().any(|o| *o) && outcomes.iter().any(|o| !*o));
            let base = auc_concordance(scores, outcomes).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 3.0 * s + 7.0).collect();
            let shifted = auc_concordance(&transformed, outcomes).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }
    }
}
