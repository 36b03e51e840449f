//! Where does the between-condition variance end up?
//!
//! Two families of checks live here. The first compares within-condition
//! loadings with between-condition loadings: identical matrices, or a first
//! column that matches up to a positive scale `θ_i` (`θ_i a_i = a_b`), allow
//! the within and between parts to be merged into one component without
//! spreading the condition effect. The second measures the spread itself:
//! the between-condition variance each component carries and the share that
//! lands off the target component.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{condition_means_of, ConditionDataset};
use crate::error::{Error, Result};
use crate::linalg::{canonicalize_columns, column_space_projector, max_abs, max_abs_diff};
use crate::pca::PcaSolution;

/// Default matching tolerance when working from exact moments.
pub const POPULATION_TOL: f64 = 1e-6;
/// Default relative residual tolerance for finite samples.
pub const SAMPLE_TOL: f64 = 0.05;

/// Per-condition `‖A_i − A_b‖_max < tol` after putting both in canonical
/// sign form.
pub fn loading_identity_test(
    within_loadings: &[Array2<f64>],
    between_loadings: &Array2<f64>,
    tol: f64,
) -> Result<Vec<bool>> {
    let mut reference = between_loadings.clone();
    canonicalize_columns(&mut reference);
    within_loadings
        .iter()
        .map(|a| {
            if a.dim() != reference.dim() {
                return Err(Error::Shape(format!(
                    "within loadings {:?} vs between loadings {:?}",
                    a.dim(),
                    reference.dim()
                )));
            }
            let mut a = a.clone();
            canonicalize_columns(&mut a);
            Ok(max_abs_diff(a.view(), reference.view()) < tol)
        })
        .collect()
}

/// Least-squares scale of `a` onto `b` and the relative misfit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    /// `(a·b)/(a·a)`; may be nonpositive.
    pub theta: f64,
    /// `‖θ a − b‖ / ‖b‖`.
    pub residual_norm: f64,
}

pub fn fit_scale(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<ScaleFit> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let aa = a.dot(&a);
    let bb = b.dot(&b);
    if aa == 0.0 {
        return Err(Error::DegenerateVector("within loading vector is zero"));
    }
    if bb == 0.0 {
        return Err(Error::DegenerateVector("between loading vector is zero"));
    }
    let theta = a.dot(&b) / aa;
    let misfit: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (theta * x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ScaleFit {
        theta,
        residual_norm: misfit / bb.sqrt(),
    })
}

/// Positive `θ` with `θ a ≈ b` in the least-squares sense.
pub fn estimate_theta(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    let fit = fit_scale(a, b)?;
    if fit.theta > 0.0 {
        Ok(fit.theta)
    } else {
        Err(Error::NoMatch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionShapeMatch {
    /// Absent when no positive scale exists.
    pub theta: Option<f64>,
    pub residual_norm: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMatchReport {
    /// Zero-based within-condition component compared.
    pub within_component: usize,
    /// Zero-based between-condition component compared.
    pub between_component: usize,
    pub tolerance: f64,
    pub per_condition: Vec<ConditionShapeMatch>,
    /// Every condition matches with `θ_i = 1` (identical loadings).
    pub identical: bool,
    /// Every condition matches with some positive `θ_i`.
    pub proportional: bool,
}

impl ShapeMatchReport {
    pub fn thetas(&self) -> Vec<Option<f64>> {
        self.per_condition.iter().map(|c| c.theta).collect()
    }

    pub fn residual_norms(&self) -> Vec<f64> {
        self.per_condition.iter().map(|c| c.residual_norm).collect()
    }
}

/// Compare within column `component` of every condition with the between
/// column of the same index.
pub fn shape_match_test(
    within: &[PcaSolution],
    between: &PcaSolution,
    component: usize,
    tol: f64,
) -> Result<ShapeMatchReport> {
    shape_match_pair(within, between, component, component, tol)
}

/// Compare within column `within_component` of every condition with between
/// column `between_component`.
pub fn shape_match_pair(
    within: &[PcaSolution],
    between: &PcaSolution,
    within_component: usize,
    between_component: usize,
    tol: f64,
) -> Result<ShapeMatchReport> {
    if between_component >= between.r() {
        return Err(Error::BadComponentCount(format!(
            "between component {} of {}",
            between_component + 1,
            between.r()
        )));
    }
    let b = between.loadings.column(between_component);
    if b.iter().all(|&x| x == 0.0) {
        return Err(Error::NoBetweenEffect(between_component + 1));
    }
    let mut per_condition = Vec::with_capacity(within.len());
    for sol in within {
        if within_component >= sol.r() || sol.p() != b.len() {
            return Err(Error::Shape(format!(
                "within solution is {}x{}, asked for component {}",
                sol.p(),
                sol.r(),
                within_component + 1
            )));
        }
        let entry = match fit_scale(sol.loadings.column(within_component), b) {
            Ok(fit) => {
                let theta = (fit.theta > 0.0).then_some(fit.theta);
                ConditionShapeMatch {
                    theta,
                    residual_norm: fit.residual_norm,
                    matched: theta.is_some() && fit.residual_norm < tol,
                }
            }
            Err(Error::DegenerateVector(_)) => ConditionShapeMatch {
                theta: None,
                residual_norm: 1.0,
                matched: false,
            },
            Err(e) => return Err(e),
        };
        per_condition.push(entry);
    }
    let proportional = per_condition.iter().all(|c| c.matched);
    let identical = proportional
        && per_condition
            .iter()
            .all(|c| c.theta.is_some_and(|t| (t - 1.0).abs() < tol));
    Ok(ShapeMatchReport {
        within_component,
        between_component,
        tolerance: tol,
        per_condition,
        identical,
        proportional,
    })
}

/// Place per-condition score blocks back into observation order.
pub fn assemble_blocks(ds: &ConditionDataset, blocks: &[Array2<f64>]) -> Result<Array2<f64>> {
    if blocks.len() != ds.k() {
        return Err(Error::Shape(format!(
            "{} score blocks for {} conditions",
            blocks.len(),
            ds.k()
        )));
    }
    let r = blocks[0].nrows();
    let mut out = Array2::zeros((r, ds.n()));
    for (level, block) in blocks.iter().enumerate() {
        let idx = ds.indices_of(level);
        if block.dim() != (r, idx.len()) {
            return Err(Error::Shape(format!(
                "score block {} is {}x{}, expected {}x{}",
                level + 1,
                block.nrows(),
                block.ncols(),
                r,
                idx.len()
            )));
        }
        for (col, &t) in idx.iter().enumerate() {
            out.column_mut(t).assign(&block.column(col));
        }
    }
    Ok(out)
}

/// Max-norm residual of `x − A (c_v + c_b)`, where `c_v` is assembled from
/// the per-condition within scores and `c_b` covers all observations.
pub fn verify_combination(
    ds: &ConditionDataset,
    shared_loadings: &Array2<f64>,
    within_scores: &[Array2<f64>],
    between_scores: &Array2<f64>,
) -> Result<f64> {
    let r = shared_loadings.ncols();
    if shared_loadings.nrows() != ds.p() || between_scores.dim() != (r, ds.n()) {
        return Err(Error::Shape(format!(
            "loadings {:?}, between scores {:?}, data {}x{}",
            shared_loadings.dim(),
            between_scores.dim(),
            ds.p(),
            ds.n()
        )));
    }
    let combined = assemble_blocks(ds, within_scores)? + between_scores;
    let rebuilt = shared_loadings.dot(&combined);
    Ok(max_abs_diff(rebuilt.view(), ds.data().view()))
}

/// Merging one within component with one between component.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCombination {
    /// `c = w_i c^v_i + c^b`, one entry per observation.
    pub combined_scores: Array1<f64>,
    /// `x − a_b c`, `p × n`.
    pub residual: Array2<f64>,
    /// Max-norm of `x − Σ_{s≠target} a_si c_si − a_b c`.
    pub reconstruction_error: f64,
    /// Max-norm of the part of `residual` outside the span of the other
    /// within components of each condition.
    pub leak: f64,
}

/// Combine within column `component` of every condition with the between
/// column of the same index, weighting condition `i`'s within scores by
/// `weights[i]`.
///
/// With `a_i = a_b / θ_i` the weight that reproduces the data is `1 / θ_i`.
pub fn partial_combination(
    ds: &ConditionDataset,
    within: &[PcaSolution],
    between: &PcaSolution,
    component: usize,
    weights: &[f64],
) -> Result<PartialCombination> {
    if within.len() != ds.k() || weights.len() != ds.k() {
        return Err(Error::Shape(format!(
            "{} within solutions and {} weights for {} conditions",
            within.len(),
            weights.len(),
            ds.k()
        )));
    }
    let between_scores = between
        .scores
        .as_ref()
        .ok_or_else(|| Error::Invalid("between solution has no scores".into()))?;
    if component >= between.r() || between_scores.ncols() != ds.n() {
        return Err(Error::Shape("between scores do not match the data".into()));
    }
    let a_b = between.loadings.column(component).to_owned();

    let mut combined = between_scores.row(component).to_owned();
    let mut rest = Array2::<f64>::zeros((ds.p(), ds.n()));
    let mut projectors = Vec::with_capacity(ds.k());
    for (level, sol) in within.iter().enumerate() {
        let scores = sol.scores.as_ref().ok_or_else(|| {
            Error::Invalid(format!("within solution {} has no scores", level + 1))
        })?;
        let idx = ds.indices_of(level);
        if scores.ncols() != idx.len() || component >= sol.r() {
            return Err(Error::Shape(format!(
                "within scores for condition {} do not match the data",
                level + 1
            )));
        }
        let others: Vec<usize> = (0..sol.r()).filter(|&s| s != component).collect();
        let other_loadings = sol.loadings.select(Axis(1), &others);
        let other_scores = scores.select(Axis(0), &others);
        let part = other_loadings.dot(&other_scores);
        for (col, &t) in idx.iter().enumerate() {
            combined[t] += weights[level] * scores[[component, col]];
            rest.column_mut(t).assign(&part.column(col));
        }
        projectors.push(column_space_projector(&other_loadings)?);
    }

    let mut residual = ds.data().clone();
    for (mut col, &c) in residual.axis_iter_mut(Axis(1)).zip(combined.iter()) {
        col.scaled_add(-c, &a_b);
    }
    let reconstruction_error = max_abs((&residual - &rest).view());

    let mut leak = 0.0_f64;
    for (level, proj) in projectors.iter().enumerate() {
        let block = ds.select_level(&residual, level);
        let outside = &block - &proj.dot(&block);
        leak = leak.max(max_abs(outside.view()));
    }
    Ok(PartialCombination {
        combined_scores: combined,
        residual,
        reconstruction_error,
        leak,
    })
}

/// Between-condition variance per component and its spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misallocation {
    /// `b_j = Σ_i π_i (mean score j in condition i)²`.
    pub component_between_variance: Vec<f64>,
    /// `1 − b_target / Σ_j b_j`, or 0 when there is no between variance.
    pub misallocation_index: f64,
    /// Zero-based target component.
    pub target: usize,
}

/// Misallocation from per-condition expected scores (`q × k`).
pub fn misallocation_from_means(
    means: &Array2<f64>,
    proportions: &[f64],
    target: usize,
) -> Result<Misallocation> {
    let (q, k) = means.dim();
    if proportions.len() != k {
        return Err(Error::Shape(format!(
            "{k} conditions, {} proportions",
            proportions.len()
        )));
    }
    if target >= q {
        return Err(Error::BadComponentCount(format!(
            "target component {} of {}",
            target + 1,
            q
        )));
    }
    let b: Vec<f64> = means
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(proportions).map(|(m, w)| w * m * m).sum())
        .collect();
    let total: f64 = b.iter().sum();
    let index = if total > 0.0 {
        (1.0 - b[target] / total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(Misallocation {
        component_between_variance: b,
        misallocation_index: index,
        target,
    })
}

/// Misallocation of `q × n` (rotated) scores aligned with `ds`.
pub fn misallocation_index(
    rotated_scores: &Array2<f64>,
    ds: &ConditionDataset,
    target: usize,
) -> Result<Misallocation> {
    if rotated_scores.ncols() != ds.n() {
        return Err(Error::Shape(format!(
            "{} score columns for {} observations",
            rotated_scores.ncols(),
            ds.n()
        )));
    }
    let means = condition_score_means(rotated_scores, ds);
    misallocation_from_means(&means, ds.proportions(), target)
}

/// Per-condition means of score rows, `q × k`.
pub fn condition_score_means(scores: &Array2<f64>, ds: &ConditionDataset) -> Array2<f64> {
    let cols = condition_means_of(scores, ds.labels(), ds.k());
    let mut out = Array2::zeros((scores.nrows(), ds.k()));
    for (i, c) in cols.iter().enumerate() {
        out.column_mut(i).assign(c);
    }
    out
}

/// Tucker's congruence coefficient.
pub fn congruence(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let xx = x.dot(&x);
    let yy = y.dot(&y);
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateVector("zero vector has no direction"));
    }
    Ok((x.dot(&y) / (xx * yy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of two loading vectors.
pub fn pearson_loadings(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::DegenerateVector("need at least two loadings"));
    }
    let cx = x.to_owned() - x.mean().unwrap_or(0.0);
    let cy = y.to_owned() - y.mean().unwrap_or(0.0);
    // relative cutoff so that round-off in the mean does not pass as variation
    let scale = |v: ArrayView1<'_, f64>| v.iter().fold(0.0_f64, |m, &a| m.max(a.abs()));
    if max_abs_vec(&cx) <= 1e-14 * scale(x) || max_abs_vec(&cy) <= 1e-14 * scale(y) {
        return Err(Error::DegenerateVector(
            "constant vector has no correlation",
        ));
    }
    congruence(cx.view(), cy.view())
}

fn max_abs_vec(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, &a| m.max(a.abs()))
}

/// Rows are conditions, columns within components; `None` marks a degenerate pair.
pub type DiagnosticTable = Vec<Vec<Option<f64>>>;

/// Report assembled by `analyze`; field names are part of the JSON format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub component_between_variance: Vec<f64>,
    pub misallocation_index: f64,
    /// One-based.
    pub target_component: usize,
    /// Per condition; `null` where no positive scale exists.
    pub theta: Vec<Option<f64>>,
    pub residual_norm: Vec<f64>,
    /// `congruence[i][s]`: within component `s` of condition `i` against the
    /// compared between component.
    pub congruence: DiagnosticTable,
    pub pearson: DiagnosticTable,
}

/// Congruence and Pearson tables of every wanted within component against
/// one between loading column; degenerate pairs are `None`.
pub fn diagnostic_tables(
    within: &[PcaSolution],
    between_column: ArrayView1<'_, f64>,
    components: usize,
) -> (DiagnosticTable, DiagnosticTable) {
    let mut cong = Vec::with_capacity(within.len());
    let mut pear = Vec::with_capacity(within.len());
    for sol in within {
        let upto = components.min(sol.r());
        cong.push(
            (0..upto)
                .map(|s| congruence(sol.loadings.column(s), between_column).ok())
                .collect(),
        );
        pear.push(
            (0..upto)
                .map(|s| pearson_loadings(sol.loadings.column(s), between_column).ok())
                .collect(),
        );
    }
    (cong, pear)
}
