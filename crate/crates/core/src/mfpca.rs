//! Multilevel functional PCA on grid-aligned curves: mean estimation,
//! between/within covariance split, weighted eigendecomposition, PVE
//! truncation, projection scores, and perturbation curves.
//!
//! Level 1 captures cluster-level variation, level 2 the unit-within-cluster
//! remainder. Covariances are method-of-moments on the grid; scores are
//! quadrature projections.

use crate::compensator::CompensatorSet;
use crate::curve::{trapezoid_weights, GridCurve};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Hierarchy level selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfpcaLevel {
    /// Cluster level.
    Level1,
    /// Unit-within-cluster level.
    Level2,
}

/// Eigenvalues (descending, negatives clipped to zero) and eigenfunctions of
/// one covariance operator under the quadrature inner product.
#[derive(Debug, Clone)]
pub struct EigenOutput {
    /// All eigenvalues after clipping, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions of the strictly positive eigenvalues, quadrature-orthonormal.
    pub eigenfunctions: Vec<GridCurve>,
    /// Total magnitude of clipped negative eigenvalues (indefiniteness diagnostic).
    pub clipped_negative_mass: f64,
}

/// One level of the decomposition.
#[derive(Debug, Clone)]
pub struct LevelDecomposition {
    /// Retained eigenfunctions.
    pub eigenfunctions: Vec<GridCurve>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Projection scores: clusters x K (level 1) or units x L (level 2).
    pub scores: DMatrix<f64>,
    /// Sum of all positive eigenvalues of this level's operator.
    pub total_variance: f64,
    pub clipped_negative_mass: f64,
    /// Share of total variance covered by the retained components.
    pub achieved_pve: f64,
}

impl LevelDecomposition {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Full decomposition result.
#[derive(Debug, Clone)]
pub struct MFPCAResult {
    pub mean: GridCurve,
    pub level1: LevelDecomposition,
    pub level2: LevelDecomposition,
    pub pve1: f64,
    pub pve2: f64,
    /// Proportion of retained variability attributed to level 1.
    pub rho: f64,
    /// Quadrature fraction of centered variation left unexplained.
    pub residual_fraction: f64,
    /// Cluster label per level-1 score row.
    pub cluster_ids: Vec<String>,
    /// (cluster, unit) label per level-2 score row.
    pub unit_labels: Vec<(String, String)>,
}

/// Pointwise mean curve of the set.
pub fn estimate_mean(curves: &CompensatorSet) -> GridCurve {
    let m = curves.matrix();
    let n = m.nrows() as f64;
    let mean: Vec<f64> = (0..m.ncols()).map(|j| m.column(j).sum() / n).collect();
    GridCurve::new(curves.grid().to_vec(), mean).expect("grid validated on construction")
}

/// Group row indices by cluster label, in first-appearance order.
fn cluster_groups(labels: &[String]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((label.clone(), vec![i])),
        }
    }
    groups
}

fn check_cluster_structure(groups: &[(String, Vec<usize>)]) -> Result<()> {
    if groups.len() < 2 || groups.iter().all(|(_, idx)| idx.len() < 2) {
        return Err(Error::InsufficientClusters {
            clusters: groups.len(),
        });
    }
    Ok(())
}

/// Method-of-moments covariance split on the grid.
///
/// `K_between(s,t)` averages, over clusters with at least two units, the
/// cross-products of distinct same-cluster units; `K_within` is the
/// difference from the total covariance. Both come back symmetrized.
pub fn covariance_split(
    centered: &DMatrix<f64>,
    cluster_labels: &[String],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let groups = cluster_groups(cluster_labels);
    check_cluster_structure(&groups)?;
    let n = centered.nrows();
    assert_eq!(cluster_labels.len(), n);

    let b_between = between_coefficients(&groups, n);
    let k_between = coefficient_covariance(centered, &b_between);
    let b_total = DMatrix::from_diagonal_element(n, n, 1.0 / n as f64);
    let k_total = coefficient_covariance(centered, &b_total);
    let k_within = &k_total - &k_between;
    Ok((symmetrize(k_between), symmetrize(k_within)))
}

/// n x n coefficient matrix B such that `X' B X` is the between-cluster
/// covariance: same-cluster off-diagonal pairs weighted by
/// `1 / (I' * J_i * (J_i - 1))` over the I' clusters that contribute pairs.
fn between_coefficients(groups: &[(String, Vec<usize>)], n: usize) -> DMatrix<f64> {
    let contributing = groups.iter().filter(|(_, idx)| idx.len() >= 2).count();
    let mut b = DMatrix::zeros(n, n);
    for (_, idx) in groups {
        let j = idx.len();
        if j < 2 {
            continue;
        }
        let w = 1.0 / (contributing as f64 * j as f64 * (j - 1) as f64);
        for &a in idx {
            for &c in idx {
                if a != c {
                    b[(a, c)] = w;
                }
            }
        }
    }
    b
}

/// Dense `X' B X` for an n x G curve matrix.
fn coefficient_covariance(x: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * b * x
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Fix each eigenfunction's sign: nonnegative quadrature integral, with the
/// first non-tiny value made positive on ties.
fn orient(phi: &mut [f64], weights: &[f64]) {
    let integral: f64 = phi.iter().zip(weights).map(|(p, w)| p * w).sum();
    let flip = if integral.abs() > 1e-9 {
        integral < 0.0
    } else {
        phi.iter().find(|v| v.abs() > 1e-9).is_some_and(|v| *v < 0.0)
    };
    if flip {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

fn validate_weights(weights: &[f64], len: usize) -> Result<()> {
    if weights.len() != len || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidValue {
            context: "quadrature weights".into(),
            detail: "weights must be positive and match the grid".into(),
        });
    }
    Ok(())
}

/// Solve the weighted eigenproblem of a dense G x G covariance matrix so the
/// returned eigenfunctions are orthonormal under `sum(w * f * g)`.
pub fn eigen_decompose(
    k: &DMatrix<f64>,
    grid: &[f64],
    weights: &[f64],
) -> Result<EigenOutput> {
    let g = k.nrows();
    if k.ncols() != g || g != grid.len() {
        return Err(Error::InvalidValue {
            context: "eigen_decompose".into(),
            detail: "covariance matrix must be square on the grid".into(),
        });
    }
    validate_weights(weights, g)?;
    let scale = k.amax().max(1.0);
    for i in 0..g {
        for j in 0..i {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::InvalidValue {
                    context: "eigen_decompose".into(),
                    detail: "covariance matrix is not symmetric".into(),
                });
            }
        }
    }

    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = k.clone();
    for i in 0..g {
        for j in 0..g {
            a[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }
    let a = symmetrize(a);
    let eig = a
        .try_symmetric_eigen(f64::EPSILON, 50_000)
        .ok_or(Error::EigenFailure)?;

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    let mut eigenvalues = Vec::with_capacity(g);
    let mut eigenfunctions = Vec::new();
    let mut clipped = 0.0;
    for &idx in &order {
        let lambda = eig.eigenvalues[idx];
        if lambda < 0.0 {
            clipped += -lambda;
            eigenvalues.push(0.0);
            continue;
        }
        eigenvalues.push(lambda);
        if lambda > 0.0 {
            let mut phi: Vec<f64> = eig
                .eigenvectors
                .column(idx)
                .iter()
                .zip(&sqrt_w)
                .map(|(u, sw)| u / sw)
                .collect();
            orient(&mut phi, weights);
            eigenfunctions.push(GridCurve::new(grid.to_vec(), phi)?);
        }
    }
    Ok(EigenOutput {
        eigenvalues,
        eigenfunctions,
        clipped_negative_mass: clipped,
    })
}

/// Eigenpairs of `X' B X` (same operator as [`eigen_decompose`] on the
/// assembled matrix) computed in the n-dimensional curve span. Exact for all
/// nonzero eigenvalues and avoids the dense G x G solve.
fn eigen_factored(
    x: &DMatrix<f64>,
    b: &DMatrix<f64>,
    grid: &[f64],
    weights: &[f64],
) -> Result<EigenOutput> {
    let n = x.nrows();
    let g = x.ncols();
    validate_weights(weights, g)?;
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut y = x.clone();
    for j in 0..g {
        let sw = sqrt_w[j];
        for i in 0..n {
            y[(i, j)] *= sw;
        }
    }

    // gram = Y Y'; its eigenbasis spans the curve coefficients
    let gram = &y * y.transpose();
    let gram_eig = symmetrize(gram)
        .try_symmetric_eigen(f64::EPSILON, 50_000)
        .ok_or(Error::EigenFailure)?;
    let s_max = gram_eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n)
        .filter(|&i| gram_eig.eigenvalues[i] > s_max * 1e-12 && gram_eig.eigenvalues[i] > 0.0)
        .collect();
    if keep.is_empty() {
        return Ok(EigenOutput {
            eigenvalues: vec![0.0; n],
            eigenfunctions: Vec::new(),
            clipped_negative_mass: 0.0,
        });
    }
    let r = keep.len();
    let v_r = DMatrix::from_fn(n, r, |i, j| gram_eig.eigenvectors[(i, keep[j])]);
    let s_sqrt = DVector::from_fn(r, |i, _| gram_eig.eigenvalues[keep[i]].sqrt());

    // m = S^1/2 V' B V S^1/2 carries the operator restricted to the span
    let mut m = v_r.transpose() * b * &v_r;
    for i in 0..r {
        for j in 0..r {
            m[(i, j)] *= s_sqrt[i] * s_sqrt[j];
        }
    }
    let m_eig = symmetrize(m)
        .try_symmetric_eigen(f64::EPSILON, 50_000)
        .ok_or(Error::EigenFailure)?;

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| m_eig.eigenvalues[j].partial_cmp(&m_eig.eigenvalues[i]).unwrap());

    let mut eigenvalues = Vec::with_capacity(r);
    let mut eigenfunctions = Vec::new();
    let mut clipped = 0.0;
    for &idx in &order {
        let lambda = m_eig.eigenvalues[idx];
        if lambda < 0.0 {
            clipped += -lambda;
            eigenvalues.push(0.0);
            continue;
        }
        eigenvalues.push(lambda);
        if lambda > 0.0 {
            // u = Y' V S^-1/2 w, already unit-norm; phi = u / sqrt(weights)
            let mut coeff = DVector::zeros(r);
            for i in 0..r {
                coeff[i] = m_eig.eigenvectors[(i, idx)] / s_sqrt[i];
            }
            let u = y.transpose() * (&v_r * coeff);
            let mut phi: Vec<f64> = u.iter().zip(&sqrt_w).map(|(ui, sw)| ui / sw).collect();
            orient(&mut phi, weights);
            eigenfunctions.push(GridCurve::new(grid.to_vec(), phi)?);
        }
    }
    Ok(EigenOutput {
        eigenvalues,
        eigenfunctions,
        clipped_negative_mass: clipped,
    })
}

/// Smallest count of leading eigenvalues reaching the requested share of the
/// total; 0 only when every eigenvalue is 0.
pub fn truncate_by_pve(eigenvalues: &[f64], pve: f64) -> usize {
    assert!(pve > 0.0 && pve <= 1.0, "pve must lie in (0, 1]");
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let positive = eigenvalues.iter().filter(|l| **l > 0.0).count();
    if pve >= 1.0 {
        return positive;
    }
    let mut acc = 0.0;
    for (m, lambda) in eigenvalues.iter().enumerate() {
        acc += lambda;
        if acc / total >= pve - 1e-15 {
            return m + 1;
        }
    }
    positive
}

/// Projection score estimators: level-1 scores project cluster-mean curves
/// onto the level-1 basis; level-2 scores project within-cluster deviations.
pub fn estimate_scores(
    centered: &DMatrix<f64>,
    cluster_labels: &[String],
    level1_basis: &[GridCurve],
    level2_basis: &[GridCurve],
    grid: &[f64],
    weights: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = centered.nrows();
    let g = centered.ncols();
    validate_weights(weights, g)?;
    for basis in level1_basis.iter().chain(level2_basis) {
        if basis.grid() != grid {
            return Err(Error::BasisMismatch {
                detail: "eigenfunction grid differs from curve grid".into(),
            });
        }
    }
    let groups = cluster_groups(cluster_labels);
    let project = |row: &DVector<f64>, basis: &GridCurve| -> f64 {
        row.iter()
            .zip(basis.values())
            .zip(weights)
            .map(|((x, p), w)| x * p * w)
            .sum()
    };

    let mut xi = DMatrix::zeros(groups.len(), level1_basis.len());
    let mut zeta = DMatrix::zeros(n, level2_basis.len());
    for (gi, (_, idx)) in groups.iter().enumerate() {
        let mut mean = DVector::zeros(g);
        for &row in idx {
            mean += centered.row(row).transpose();
        }
        mean /= idx.len() as f64;
        for (k, basis) in level1_basis.iter().enumerate() {
            xi[(gi, k)] = project(&mean, basis);
        }
        for &row in idx {
            let deviation = centered.row(row).transpose() - &mean;
            for (l, basis) in level2_basis.iter().enumerate() {
                zeta[(row, l)] = project(&deviation, basis);
            }
        }
    }
    Ok((xi, zeta))
}

/// Run the full decomposition with PVE-based truncation at both levels.
pub fn mfpca(curves: &CompensatorSet, pve1: f64, pve2: f64) -> Result<MFPCAResult> {
    for (name, pve) in [("pve1", pve1), ("pve2", pve2)] {
        if !(pve > 0.0 && pve <= 1.0) {
            return Err(Error::InvalidValue {
                context: "mfpca".into(),
                detail: format!("{name} must lie in (0, 1], got {pve}"),
            });
        }
    }
    let grid = curves.grid();
    let weights = trapezoid_weights(grid);
    let labels = curves.cluster_ids();
    let groups = cluster_groups(labels);
    check_cluster_structure(&groups)?;

    let mean = estimate_mean(curves);
    let n = curves.n_curves();
    let mut centered = curves.matrix().clone();
    for i in 0..n {
        for j in 0..grid.len() {
            centered[(i, j)] -= mean.values()[j];
        }
    }

    let b_between = between_coefficients(&groups, n);
    let b_within = DMatrix::from_diagonal_element(n, n, 1.0 / n as f64) - &b_between;
    let eig1 = eigen_factored(&centered, &symmetrize(b_between), grid, &weights)?;
    let eig2 = eigen_factored(&centered, &symmetrize(b_within), grid, &weights)?;

    let k = truncate_by_pve(&eig1.eigenvalues, pve1);
    let l = truncate_by_pve(&eig2.eigenvalues, pve2);
    let basis1: Vec<GridCurve> = eig1.eigenfunctions[..k].to_vec();
    let basis2: Vec<GridCurve> = eig2.eigenfunctions[..l].to_vec();
    let (xi, zeta) = estimate_scores(&centered, labels, &basis1, &basis2, grid, &weights)?;

    // reconstruction residual under the truncated expansion
    let mut residual_num = 0.0;
    let mut residual_den = 0.0;
    for (gi, (_, idx)) in groups.iter().enumerate() {
        for &row in idx {
            for j in 0..grid.len() {
                let mut fitted = 0.0;
                for (c, basis) in basis1.iter().enumerate() {
                    fitted += xi[(gi, c)] * basis.values()[j];
                }
                for (c, basis) in basis2.iter().enumerate() {
                    fitted += zeta[(row, c)] * basis.values()[j];
                }
                let x = centered[(row, j)];
                residual_num += weights[j] * (x - fitted) * (x - fitted);
                residual_den += weights[j] * x * x;
            }
        }
    }
    let residual_fraction = if residual_den > 0.0 {
        residual_num / residual_den
    } else {
        0.0
    };

    let retained1: f64 = eig1.eigenvalues[..k].iter().sum();
    let retained2: f64 = eig2.eigenvalues[..l].iter().sum();
    let rho = if retained1 + retained2 > 0.0 {
        retained1 / (retained1 + retained2)
    } else {
        0.0
    };
    let total1: f64 = eig1.eigenvalues.iter().sum();
    let total2: f64 = eig2.eigenvalues.iter().sum();

    Ok(MFPCAResult {
        mean,
        level1: LevelDecomposition {
            eigenfunctions: basis1,
            eigenvalues: eig1.eigenvalues[..k].to_vec(),
            scores: xi,
            total_variance: total1,
            clipped_negative_mass: eig1.clipped_negative_mass,
            achieved_pve: if total1 > 0.0 { retained1 / total1 } else { 0.0 },
        },
        level2: LevelDecomposition {
            eigenfunctions: basis2,
            eigenvalues: eig2.eigenvalues[..l].to_vec(),
            scores: zeta,
            total_variance: total2,
            clipped_negative_mass: eig2.clipped_negative_mass,
            achieved_pve: if total2 > 0.0 { retained2 / total2 } else { 0.0 },
        },
        pve1,
        pve2,
        rho,
        residual_fraction,
        cluster_ids: groups.iter().map(|(l, _)| l.clone()).collect(),
        unit_labels: labels
            .iter()
            .zip(curves.unit_ids())
            .map(|(c, u)| (c.clone(), u.clone()))
            .collect(),
    })
}

/// Mean curve perturbed by one retained component:
/// `mu(t) +/- sqrt(lambda) * phi(t)`. `component` is 0-based.
pub fn perturbation_curves(
    result: &MFPCAResult,
    level: MfpcaLevel,
    component: usize,
) -> Result<(GridCurve, GridCurve)> {
    let (deco, level_no) = match level {
        MfpcaLevel::Level1 => (&result.level1, 1),
        MfpcaLevel::Level2 => (&result.level2, 2),
    };
    if component >= deco.n_components() {
        return Err(Error::ComponentOutOfRange {
            level: level_no,
            component,
            retained: deco.n_components(),
        });
    }
    let sd = deco.eigenvalues[component].sqrt();
    let phi = &deco.eigenfunctions[component];
    let plus: Vec<f64> = result
        .mean
        .values()
        .iter()
        .zip(phi.values())
        .map(|(m, p)| m + sd * p)
        .collect();
    let minus: Vec<f64> = result
        .mean
        .values()
        .iter()
        .zip(phi.values())
        .map(|(m, p)| m - sd * p)
        .collect();
    Ok((
        GridCurve::new(result.mean.grid().to_vec(), plus)?,
        GridCurve::new(result.mean.grid().to_vec(), minus)?,
    ))
}

/// Absolute normalized quadrature inner product between two curves on the
/// same grid; used for eigenfunction alignment diagnostics.
pub fn alignment(a: &GridCurve, b: &GridCurve, weights: &[f64]) -> f64 {
    let ip: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .zip(weights)
        .map(|((x, y), w)| x * y * w)
        .sum();
    let na: f64 = a.values().iter().zip(weights).map(|(x, w)| x * x * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().iter().zip(weights).map(|(x, w)| x * x * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (ip / (na * nb)).abs()
    }
}
