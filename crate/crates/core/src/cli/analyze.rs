use std::collections::BTreeMap;

use clap::ValueEnum;
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{numbered, paper_refs, LongTable, RotationKind};
use crate::allocation::{
    diagnostic_tables, loading_identity_test, misallocation_from_means, shape_match_pair,
    AllocationReport, ShapeMatchReport,
};
use crate::dataset::{ConditionDataset, ConditionMoments, CovarianceMode};
use crate::error::{Error, Result};
use crate::pca::{pca_of_covariance, split_wanted, within_and_between_from_moments};
use crate::rotation::{varimax, RotationStatus, VarimaxOptions};

/// Which covariance supplies the components that are kept and rotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Covariance of all observations around the grand mean.
    Total,
    /// Weighted average of the within-condition covariances.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Csv,
    Moments,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub q: usize,
    pub rotation: RotationKind,
    pub normalize: bool,
    pub basis: Basis,
    pub tolerance: f64,
    pub mode: CovarianceMode,
    /// One-based.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub source: Source,
    pub p: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub q: usize,
    pub mode: CovarianceMode,
    pub basis: Basis,
    pub rotation: RotationKind,
    pub normalize: bool,
    pub tolerance: f64,
    pub levels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variables: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    /// Grand mean removed from the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    pub proportions: Vec<f64>,
    pub basis_eigenvalues: Vec<f64>,
    pub within_eigenvalues: Vec<Vec<f64>>,
    pub between_eigenvalues: Vec<f64>,
    pub between_rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_status: Option<RotationStatus>,
    /// `q × q` rotation `T` applied to the wanted loadings.
    #[serde(with = "crate::json::matrix")]
    pub transform: Array2<f64>,
    /// `p × q`.
    #[serde(with = "crate::json::matrix")]
    pub rotated_loadings: Array2<f64>,
    /// `q × k` condition means of the unrotated component scores.
    #[serde(with = "crate::json::matrix")]
    pub unrotated_means: Array2<f64>,
    /// `q × k` condition means of the counter-rotated scores.
    #[serde(with = "crate::json::matrix")]
    pub rotated_means: Array2<f64>,
    /// `t*_{j,target} × unrotated mean of the target component`.
    #[serde(with = "crate::json::matrix")]
    pub predicted_means: Array2<f64>,
    pub allocation: AllocationReport,
    /// First within loadings against the first between loading.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_match: Option<ShapeMatchReport>,
    /// Per condition: within loadings equal the between loadings over the
    /// between-condition rank.
    pub loading_identity: Vec<bool>,
    pub paper_refs: BTreeMap<String, String>,
}

/// Analysis of exact or estimated condition moments.
pub fn analyze_moments(
    moments: &ConditionMoments,
    levels: Vec<String>,
    opts: &AnalysisOptions,
    source: Source,
) -> Result<AnalysisReport> {
    let (p, k, q) = (moments.p(), moments.k(), opts.q);
    if q == 0 || q > p {
        return Err(Error::BadComponentCount(format!(
            "wanted components must be in 1..={p}, got {q}"
        )));
    }
    if opts.target == 0 || opts.target > q {
        return Err(Error::BadComponentCount(format!(
            "target component must be in 1..={q}, got {}",
            opts.target
        )));
    }
    if opts.tolerance.is_nan() || opts.tolerance <= 0.0 {
        return Err(Error::Invalid(format!(
            "tolerance must be positive, got {}",
            opts.tolerance
        )));
    }
    let levels = if levels.len() == k {
        levels
    } else {
        numbered("c", k)
    };
    let target = opts.target - 1;

    let pca = within_and_between_from_moments(moments)?;
    let basis_cov = match opts.basis {
        Basis::Total => moments.total_covariance(),
        Basis::Pooled => moments.pooled_within(),
    };
    let basis = pca_of_covariance(basis_cov.view())?;
    let wanted = split_wanted(&basis, q)?;

    let mut centred = moments.mean_matrix();
    let grand = moments.grand_mean();
    for mut col in centred.axis_iter_mut(Axis(1)) {
        col -= &grand;
    }
    let map = basis.score_map();
    let unrotated = map.slice(s![..q, ..]).dot(&centred);

    let (transform, status) = match opts.rotation {
        RotationKind::None => (Array2::eye(q), None),
        RotationKind::Varimax => {
            let r = varimax(
                &wanted.wanted_loadings,
                &VarimaxOptions {
                    normalize: opts.normalize,
                    ..Default::default()
                },
            )?;
            (r.transform, Some(r.status))
        }
    };
    let rotated_loadings = wanted.wanted_loadings.dot(&transform);
    let rotated_means = transform.t().dot(&unrotated);
    let mut predicted = Array2::zeros((q, k));
    for j in 0..q {
        for i in 0..k {
            predicted[[j, i]] = transform[[target, j]] * unrotated[[target, i]];
        }
    }
    let mis = misallocation_from_means(&rotated_means, &moments.proportions, target)?;

    let between_rank = pca.between.rank();
    let (shape_match, congruence, pearson) = if between_rank > 0 {
        let report = shape_match_pair(&pca.within, &pca.between, 0, 0, opts.tolerance)?;
        let (c, r) = diagnostic_tables(&pca.within, pca.between.loadings.column(0), q);
        (Some(report), c, r)
    } else {
        (None, Vec::new(), Vec::new())
    };
    let loading_identity = if between_rank > 0 {
        let head = |a: &Array2<f64>| a.slice(s![.., ..between_rank]).to_owned();
        let within: Vec<Array2<f64>> = pca.within.iter().map(|w| head(&w.loadings)).collect();
        loading_identity_test(&within, &head(&pca.between.loadings), opts.tolerance)?
    } else {
        Vec::new()
    };

    let allocation = AllocationReport {
        component_between_variance: mis.component_between_variance,
        misallocation_index: mis.misallocation_index,
        target_component: opts.target,
        theta: shape_match.as_ref().map(|m| m.thetas()).unwrap_or_default(),
        residual_norm: shape_match
            .as_ref()
            .map(|m| m.residual_norms())
            .unwrap_or_default(),
        congruence,
        pearson,
    };

    Ok(AnalysisReport {
        source,
        p,
        k,
        n: None,
        q,
        mode: opts.mode,
        basis: opts.basis,
        rotation: opts.rotation,
        normalize: opts.normalize,
        tolerance: opts.tolerance,
        levels,
        variables: None,
        counts: None,
        offset: None,
        proportions: moments.proportions.clone(),
        basis_eigenvalues: basis.eigenvalues.to_vec(),
        within_eigenvalues: pca.within.iter().map(|w| w.eigenvalues.to_vec()).collect(),
        between_eigenvalues: pca.between.eigenvalues.to_vec(),
        between_rank,
        rotation_status: status,
        transform,
        rotated_loadings,
        unrotated_means: unrotated,
        rotated_means,
        predicted_means: predicted,
        allocation,
        shape_match,
        loading_identity,
        paper_refs: paper_refs(&["pca", "theorem1", "theorem2", "theorem4", "diagnostics"]),
    })
}

/// Analysis of a raw dataset through its moments.
pub fn analyze_dataset(ds: &ConditionDataset, opts: &AnalysisOptions) -> Result<AnalysisReport> {
    let moments = ds.condition_moments(opts.mode)?;
    let mut report = analyze_moments(
        &moments,
        ds.level_names().to_vec(),
        opts,
        super::Source::Csv,
    )?;
    report.n = Some(ds.n());
    report.variables = Some(ds.variable_names().to_vec());
    report.counts = Some(ds.counts().to_vec());
    report.offset = Some(ds.offset().to_vec());
    Ok(report)
}

impl AnalysisReport {
    /// Plot-ready long table of the numeric results.
    pub fn to_csv(&self) -> Result<String> {
        let components = numbered("", self.q);
        let mut t = LongTable::new()?;
        for (j, v) in self.basis_eigenvalues.iter().enumerate() {
            t.push("basis_eigenvalues", &(j + 1).to_string(), "value", *v)?;
        }
        for (j, v) in self
            .allocation
            .component_between_variance
            .iter()
            .enumerate()
        {
            t.push("between_variance", &(j + 1).to_string(), "value", *v)?;
        }
        t.push(
            "misallocation_index",
            &self.allocation.target_component.to_string(),
            "value",
            self.allocation.misallocation_index,
        )?;
        t.matrix(
            "unrotated_means",
            &components,
            &self.levels,
            &self.unrotated_means,
        )?;
        t.matrix(
            "rotated_means",
            &components,
            &self.levels,
            &self.rotated_means,
        )?;
        t.matrix(
            "predicted_means",
            &components,
            &self.levels,
            &self.predicted_means,
        )?;
        let variables = self
            .variables
            .clone()
            .unwrap_or_else(|| numbered("x", self.p));
        t.matrix(
            "rotated_loadings",
            &variables,
            &components,
            &self.rotated_loadings,
        )?;
        for (i, level) in self.levels.iter().enumerate() {
            if let Some(Some(theta)) = self.allocation.theta.get(i) {
                t.push("theta", level, "value", *theta)?;
            }
            if let Some(r) = self.allocation.residual_norm.get(i) {
                t.push("residual_norm", level, "value", *r)?;
            }
            for (name, table) in [
                ("congruence", &self.allocation.congruence),
                ("pearson", &self.allocation.pearson),
            ] {
                if let Some(row) = table.get(i) {
                    for (s, v) in row.iter().enumerate() {
                        if let Some(v) = v {
                            t.push(name, level, &(s + 1).to_string(), *v)?;
                        }
                    }
                }
            }
        }
        t.finish()
    }
}
