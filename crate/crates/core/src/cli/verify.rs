use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::Serialize;

use super::paper_refs;
use crate::allocation::{
    congruence, misallocation_from_means, partial_combination, pearson_loadings, shape_match_pair,
    shape_match_test, verify_combination,
};
use crate::dataset::ConditionMoments;
use crate::error::{Error, Result};
use crate::linalg::{canonicalize_columns, max_abs_diff};
use crate::pca::{
    pca_of_covariance, within_and_between_from_moments, within_and_between_pca, PcaSolution,
};
use crate::rotation::{varimax, VarimaxOptions};
use crate::synthgen::{moment_matched_sample, population_moments, Preset, ScenarioSpec};

/// Exact-arithmetic identities (up to round-off).
pub const EXACT_TOL: f64 = 1e-8;
pub const RECONSTRUCTION_TOL: f64 = 1e-10;
pub const ZERO_MEAN_TOL: f64 = 1e-12;
pub const UNIT_TOL: f64 = 1e-10;
pub const MISALLOCATION_TOL: f64 = 1e-6;
/// Minimum misallocation expected when first loadings differ in shape.
pub const MISMATCH_MIN_INDEX: f64 = 0.05;
pub const MISMATCH_MAX_PEARSON: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub group: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(group: &str, name: String, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let passed = match comparison {
            Comparison::Below => value < threshold,
            Comparison::Above => value > threshold,
        };
        Self {
            name,
            group: group.to_string(),
            value,
            comparison,
            threshold,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub preset: Preset,
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// `match`, `misallocation` or `mismatch`.
    pub expected_verdict: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub paper_refs: BTreeMap<String, String>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Suite {
    group: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn below(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check::new(
            self.group,
            name.into(),
            value,
            Comparison::Below,
            threshold,
        ));
    }

    fn above(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check::new(
            self.group,
            name.into(),
            value,
            Comparison::Above,
            threshold,
        ));
    }
}

/// Largest component index carrying a condition effect (one-based), 0 if none.
fn effect_component(spec: &ScenarioSpec) -> usize {
    spec.condition_effects
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&x| x != 0.0))
        .map(|(j, _)| j + 1)
        .max()
        .unwrap_or(0)
}

/// Condition means expressed as scores of the first `q` components of `basis`.
fn score_means(basis: &PcaSolution, moments: &ConditionMoments, q: usize) -> Array2<f64> {
    basis
        .score_map()
        .slice(s![..q, ..])
        .dot(&moments.mean_matrix())
}

fn canonical_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (mut a, mut b) = (a.clone(), b.clone());
    canonicalize_columns(&mut a);
    canonicalize_columns(&mut b);
    max_abs_diff(a.view(), b.view())
}

/// Run the property checks implied by the scenario's preset.
pub fn verify_scenario(
    spec: &ScenarioSpec,
    q: usize,
    tolerance: f64,
    seed: u64,
) -> Result<VerifyReport> {
    spec.validate()?;
    let effect = effect_component(spec);
    if q == 0 || q > spec.p || q < effect {
        return Err(Error::BadComponentCount(format!(
            "q = {q} must be in 1..={} and cover the effect component {effect}",
            spec.p
        )));
    }
    let moments = population_moments(spec)?;
    let pca = within_and_between_from_moments(&moments)?;
    let pooled = pca_of_covariance(moments.pooled_within().view())?;
    let means = score_means(&pooled, &moments, q);
    let props = &moments.proportions;

    let mut checks = Vec::new();
    let mut pca_suite = Suite {
        group: "pca",
        checks: Vec::new(),
    };
    for (i, (sol, cov)) in pca.within.iter().zip(&moments.covariances).enumerate() {
        pca_suite.below(
            format!("reconstruction_c{}", i + 1),
            max_abs_diff(sol.reproduced_covariance().view(), cov.view()),
            RECONSTRUCTION_TOL,
        );
    }
    pca_suite.below(
        "reconstruction_between",
        max_abs_diff(
            pca.between.reproduced_covariance().view(),
            moments.between_covariance.view(),
        ),
        RECONSTRUCTION_TOL,
    );
    checks.append(&mut pca_suite.checks);

    let expected_theta: Vec<f64> = (0..spec.k)
        .map(|i| spec.effect_size * spec.theta.as_ref().map_or(1.0, |t| t[i]))
        .collect();

    let (group, verdict, refs): (&'static str, &str, &[&str]) = match spec.preset {
        Preset::Theorem1 => ("theorem1", "misallocation", &["pca", "theorem1"]),
        Preset::Theorem2 => ("theorem2", "match", &["pca", "theorem2"]),
        Preset::Theorem3 => ("theorem3", "match", &["pca", "theorem3"]),
        Preset::Theorem4 => ("theorem4", "match", &["pca", "theorem4", "diagnostics"]),
        Preset::Mismatch => ("mismatch", "mismatch", &["pca", "mismatch", "diagnostics"]),
    };
    let mut suite = Suite {
        group,
        checks: Vec::new(),
    };

    if spec.preset != Preset::Mismatch {
        let unrotated = misallocation_from_means(&means, props, 0)?;
        suite.below(
            "unrotated_misallocation",
            unrotated.misallocation_index,
            MISALLOCATION_TOL,
        );
    }

    match spec.preset {
        Preset::Theorem1 => {
            let off = means
                .slice(s![1.., ..])
                .iter()
                .fold(0.0_f64, |m, &x| m.max(x.abs()));
            suite.below("identity_off_component_means", off, ZERO_MEAN_TOL);
            if q >= 2 {
                let wanted = pooled.loadings.slice(s![.., ..q]).to_owned();
                for (label, normalize) in [("raw", false), ("normalized", true)] {
                    let rot = varimax(
                        &wanted,
                        &VarimaxOptions {
                            normalize,
                            ..Default::default()
                        },
                    )?;
                    let rotated = rot.inverse_transform.dot(&means);
                    let mut predicted = Array2::zeros(rotated.dim());
                    for j in 0..q {
                        for i in 0..spec.k {
                            predicted[[j, i]] = rot.inverse_transform[[j, 0]] * means[[0, i]];
                        }
                    }
                    suite.below(
                        format!("varimax_{label}_prediction"),
                        max_abs_diff(rotated.view(), predicted.view()),
                        EXACT_TOL,
                    );
                    let mis = misallocation_from_means(&rotated, props, 0)?;
                    suite.above(
                        format!("varimax_{label}_misallocation"),
                        mis.misallocation_index,
                        tolerance,
                    );
                }
            }
        }
        Preset::Theorem2 => {
            for (i, w) in pca.within.iter().enumerate() {
                suite.below(
                    format!("loading_identity_c{}", i + 1),
                    canonical_diff(&w.loadings, &spec.between_loadings),
                    EXACT_TOL,
                );
            }
            let ds = moment_matched_sample(spec, 2 * spec.p, seed)?;
            let sample = within_and_between_pca(&ds)?;
            let shared = &sample.within[0];
            let between_scores = shared.score_map().dot(&ds.between_replicate());
            let within_scores = sample
                .within
                .iter()
                .map(|w| w.scores.clone().expect("data PCA has scores"))
                .collect::<Vec<_>>();
            suite.below(
                "combination_residual",
                verify_combination(&ds, &shared.loadings, &within_scores, &between_scores)?,
                EXACT_TOL,
            );
        }
        Preset::Theorem3 | Preset::Theorem4 => {
            let report = shape_match_test(&pca.within, &pca.between, 0, tolerance)?;
            for (i, c) in report.per_condition.iter().enumerate() {
                let theta_err = c
                    .theta
                    .map_or(f64::INFINITY, |t| (t - expected_theta[i]).abs());
                suite.below(format!("theta_c{}", i + 1), theta_err, tolerance);
                suite.below(
                    format!("shape_residual_c{}", i + 1),
                    c.residual_norm,
                    tolerance,
                );
            }
            if spec.preset == Preset::Theorem3 {
                for s in 1..q {
                    let later = shape_match_pair(&pca.within, &pca.between, s, 0, tolerance)?;
                    let closest = later
                        .residual_norms()
                        .into_iter()
                        .fold(f64::INFINITY, f64::min);
                    suite.above(format!("component{}_rejected", s + 1), closest, tolerance);
                }
            } else {
                for (i, w) in pca.within.iter().enumerate() {
                    let a = w.loadings.column(0);
                    let b = pca.between.loadings.column(0);
                    suite.below(
                        format!("congruence_c{}", i + 1),
                        (1.0 - congruence(a, b)?).abs(),
                        UNIT_TOL,
                    );
                    suite.below(
                        format!("pearson_c{}", i + 1),
                        (1.0 - pearson_loadings(a, b)?).abs(),
                        UNIT_TOL,
                    );
                }
            }
            let ds = moment_matched_sample(spec, 2 * spec.p, seed)?;
            let sample = within_and_between_pca(&ds)?;
            let fitted = shape_match_test(&sample.within, &sample.between, 0, tolerance)?;
            let weights = fitted
                .thetas()
                .into_iter()
                .map(|t| t.map(|t| 1.0 / t).ok_or(Error::NoMatch))
                .collect::<Result<Vec<_>>>()?;
            let combo = partial_combination(&ds, &sample.within, &sample.between, 0, &weights)?;
            suite.below(
                "combination_reconstruction",
                combo.reconstruction_error,
                EXACT_TOL,
            );
            suite.below("combination_leak", combo.leak, EXACT_TOL);
        }
        Preset::Mismatch => {
            let report = shape_match_test(&pca.within, &pca.between, 0, tolerance)?;
            let closest = report
                .residual_norms()
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            suite.above("first_loadings_mismatch", closest, tolerance);
            let pearson = pca
                .within
                .iter()
                .map(|w| pearson_loadings(w.loadings.column(0), pca.between.loadings.column(0)))
                .collect::<Result<Vec<_>>>()?;
            suite.below(
                "pearson_max",
                pearson.into_iter().fold(f64::NEG_INFINITY, f64::max),
                MISMATCH_MAX_PEARSON,
            );
            let unrotated = misallocation_from_means(&means, props, 0)?;
            suite.above(
                "misallocation_none",
                unrotated.misallocation_index,
                MISMATCH_MIN_INDEX,
            );
            if q >= 2 {
                let wanted = pooled.loadings.slice(s![.., ..q]).to_owned();
                for (label, normalize) in [("raw", false), ("normalized", true)] {
                    let rot = varimax(
                        &wanted,
                        &VarimaxOptions {
                            normalize,
                            ..Default::default()
                        },
                    )?;
                    let rotated = rot.inverse_transform.dot(&means);
                    let mis = misallocation_from_means(&rotated, props, 0)?;
                    suite.above(
                        format!("misallocation_varimax_{label}"),
                        mis.misallocation_index,
                        MISMATCH_MIN_INDEX,
                    );
                }
            }
        }
    }
    checks.append(&mut suite.checks);

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        preset: spec.preset,
        p: spec.p,
        k: spec.k,
        q,
        tolerance,
        seed,
        expected_verdict: verdict.to_string(),
        passed,
        checks,
        paper_refs: paper_refs(refs),
    })
}
