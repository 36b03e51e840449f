//! Synthetic scenarios with known within- and between-condition structure.
//!
//! Every preset starts from one shared loading matrix `A`. Its leading
//! columns are smooth half-sine bumps at distinct offsets, orthonormalised
//! and then mixed by a fixed rotation, so the unrotated components are broad
//! and a simple-structure rotation has real work to do. The remaining columns
//! complete an orthonormal basis from discrete sine waves. Column norms
//! decrease strictly, which makes `A` exactly the PCA loading matrix of
//! `A Aᵀ`.
//!
//! The condition effect is a zero-sum contrast on component 1 and reaches
//! the variables through the first column of `A`, which is therefore the
//! between-condition loading whenever the effect has unit size.
//!
//! Random draws use `ChaCha8Rng` seeded with `seed_from_u64` and
//! `rand_distr::StandardNormal`; both are platform independent, so samples
//! (and the CSV files written from them) are bit-reproducible.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionDataset, ConditionMoments};
use crate::error::{Error, Result};
use crate::linalg::{canonicalize_columns, sym_inv_sqrt, sym_sqrt};
use crate::rotation::givens;

pub const DEFAULT_P: usize = 12;
pub const DEFAULT_K: usize = 2;
pub const DEFAULT_EFFECT: f64 = 1.0;
/// Number of bump-shaped leading components.
pub const BUMPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Common loadings; effect on component 1 (to be rotated).
    Theorem1,
    /// Identical within and between loadings in every condition.
    Theorem2,
    /// First column shared, later columns condition specific.
    Theorem3,
    /// First columns proportional, `θ_i a_i = a_b`.
    Theorem4,
    /// First columns with different shapes.
    Mismatch,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Theorem1 => "theorem1",
            Preset::Theorem2 => "theorem2",
            Preset::Theorem3 => "theorem3",
            Preset::Theorem4 => "theorem4",
            Preset::Mismatch => "mismatch",
        }
    }

    pub const ALL: [Preset; 5] = [
        Preset::Theorem1,
        Preset::Theorem2,
        Preset::Theorem3,
        Preset::Theorem4,
        Preset::Mismatch,
    ];
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::BadPreset(s.to_string()))
    }
}

/// Generative description of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub preset: Preset,
    pub p: usize,
    pub k: usize,
    /// Wanted components used when analysing the scenario.
    pub q: usize,
    pub effect_size: f64,
    /// Scale factors with `θ_i a_i = a_b` (theorem4 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    pub noise_sd: f64,
    pub seed: u64,
    pub proportions: Vec<f64>,
    /// `q × k` expected component scores per condition.
    #[serde(with = "crate::json::matrix")]
    pub condition_effects: Array2<f64>,
    /// Shared loading matrix through which condition effects act, `p × p`.
    #[serde(with = "crate::json::matrix")]
    pub between_loadings: Array2<f64>,
    /// `k` loading matrices `A_i`, each `p × p` with orthogonal columns.
    #[serde(with = "crate::json::matrices")]
    pub within_loadings: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    pub p: usize,
    pub k: usize,
    pub q: Option<usize>,
    pub effect_size: f64,
    pub theta: Option<Vec<f64>>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            p: DEFAULT_P,
            k: DEFAULT_K,
            q: None,
            effect_size: DEFAULT_EFFECT,
            theta: None,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

/// Preset scenario with default noise (none), seed 0 and default θ.
pub fn preset(name: &str, p: usize, k: usize, effect_size: f64) -> Result<ScenarioSpec> {
    let preset = Preset::from_str(name)?;
    build_preset(
        preset,
        &PresetOptions {
            p,
            k,
            effect_size,
            ..Default::default()
        },
    )
}

/// Default `θ` for `k` conditions: geometric from 2 down to 1/2.
pub fn default_theta(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    (0..k)
        .map(|i| 2f64.powf(1.0 - 2.0 * i as f64 / (k - 1) as f64))
        .collect()
}

/// Strictly decreasing column norms of the shared loading matrix.
pub fn column_norms(p: usize) -> Vec<f64> {
    (0..p).map(|j| 2.0 * 0.75f64.powi(j as i32)).collect()
}

pub fn build_preset(preset: Preset, opts: &PresetOptions) -> Result<ScenarioSpec> {
    let PresetOptions { p, k, .. } = *opts;
    if p < 2 || k < 2 {
        return Err(Error::Invalid(format!(
            "presets need p >= 2 and k >= 2, got p={p}, k={k}"
        )));
    }
    if !opts.effect_size.is_finite() || opts.effect_size < 0.0 {
        return Err(Error::Invalid("effect size must be finite and >= 0".into()));
    }
    if !opts.noise_sd.is_finite() || opts.noise_sd < 0.0 {
        return Err(Error::Invalid("noise sd must be finite and >= 0".into()));
    }
    let q = opts.q.unwrap_or_else(|| BUMPS.min(p));
    if q == 0 || q > p {
        return Err(Error::BadComponentCount(format!(
            "q must be in 1..={p}, got {q}"
        )));
    }
    let theta = match (preset, &opts.theta) {
        (Preset::Theorem4, Some(t)) => {
            if t.len() != k || t.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::Invalid(format!(
                    "theta needs {k} positive values, got {t:?}"
                )));
            }
            Some(t.clone())
        }
        (Preset::Theorem4, None) => Some(default_theta(k)),
        (_, Some(_)) => {
            return Err(Error::Invalid(
                "theta only applies to the theorem4 preset".into(),
            ))
        }
        (_, None) => None,
    };

    let basis = mixed_basis(p)?;
    let norms = column_norms(p);
    let shared = with_norms(&basis, &norms);

    let within_loadings = (0..k)
        .map(|i| {
            let mut a = match preset {
                Preset::Theorem1 | Preset::Theorem2 => shared.clone(),
                Preset::Theorem3 => theorem3_loadings(&basis, &norms, i),
                Preset::Theorem4 => {
                    theorem4_loadings(&basis, &norms, theta.as_ref().expect("set above")[i])
                }
                Preset::Mismatch => mismatch_loadings(&basis, &norms, i, k),
            };
            canonicalize_columns(&mut a);
            a
        })
        .collect();

    let proportions = vec![1.0 / k as f64; k];
    let mut condition_effects = Array2::zeros((q, k));
    for (i, c) in contrast(k).into_iter().enumerate() {
        condition_effects[[0, i]] = opts.effect_size * c;
    }

    Ok(ScenarioSpec {
        preset,
        p,
        k,
        q,
        effect_size: opts.effect_size,
        theta,
        noise_sd: opts.noise_sd,
        seed: opts.seed,
        proportions,
        condition_effects,
        between_loadings: shared,
        within_loadings,
    })
}

/// Linear zero-sum contrast with unit mean square under equal weights,
/// decreasing from the first condition: `(1, -1)` for two levels.
fn contrast(k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|i| (k as f64 - 1.0) / 2.0 - i as f64).collect();
    let ms = raw.iter().map(|c| c * c).sum::<f64>() / k as f64;
    raw.into_iter().map(|c| c / ms.sqrt()).collect()
}

/// Half-sine bump of the given width centred at `centre`, sampled at 0..p.
fn bump(p: usize, centre: f64, width: f64) -> Array1<f64> {
    Array1::from_iter((0..p).map(|t| {
        let u = (t as f64 - centre) / width;
        if u.abs() < 0.5 {
            (PI * (u + 0.5)).sin()
        } else {
            0.0
        }
    }))
}

/// Orthonormal `p × p` basis whose leading columns are mixed bumps.
pub fn mixed_basis(p: usize) -> Result<Array2<f64>> {
    let m = BUMPS.min(p);
    let width = (p as f64 / 2.0).max(2.0);
    let mut candidates: Vec<Array1<f64>> = (0..m)
        .map(|j| bump(p, (j + 1) as f64 * (p as f64 - 1.0) / (m + 1) as f64, width))
        .collect();
    // discrete sine waves span R^p and complete the basis
    let norm = (2.0 / (p as f64 + 1.0)).sqrt();
    for f in 1..=p {
        candidates.push(Array1::from_iter((0..p).map(|t| {
            norm * (PI * f as f64 * (t + 1) as f64 / (p as f64 + 1.0)).sin()
        })));
    }

    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(p);
    for c in candidates {
        if basis.len() == p {
            break;
        }
        let original = c.dot(&c).sqrt();
        if original == 0.0 {
            continue;
        }
        let mut v = c;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.scaled_add(-proj, b);
            }
        }
        let len = v.dot(&v).sqrt();
        if len > 1e-6 * original {
            basis.push(v / len);
        }
    }
    if basis.len() != p {
        return Err(Error::Invalid(format!("could not build a basis for p={p}")));
    }
    let mut out = Array2::zeros((p, p));
    for (j, b) in basis.iter().enumerate() {
        out.column_mut(j).assign(b);
    }

    let mix = mixing_rotation(m);
    let head = out.slice(s![.., ..m]).dot(&mix);
    out.slice_mut(s![.., ..m]).assign(&head);
    canonicalize_columns(&mut out);
    Ok(out)
}

fn mixing_rotation(m: usize) -> Array2<f64> {
    if m < 2 {
        return Array2::eye(m);
    }
    let mut r = givens(m, 0, 1, 40f64.to_radians());
    if m >= 3 {
        r = r.dot(&givens(m, 0, 2, 30f64.to_radians()));
        r = r.dot(&givens(m, 1, 2, 50f64.to_radians()));
    }
    r
}

fn with_norms(basis: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut a = basis.clone();
    for (mut col, &d) in a.axis_iter_mut(Axis(1)).zip(norms) {
        col.mapv_inplace(|x| x * d);
    }
    a
}

fn rotate_pair(basis: &Array2<f64>, j: usize, l: usize, angle: f64) -> Array2<f64> {
    basis.dot(&givens(basis.ncols(), j, l, angle))
}

fn theorem3_loadings(basis: &Array2<f64>, norms: &[f64], level: usize) -> Array2<f64> {
    let p = basis.ncols();
    let b = if p >= 3 {
        rotate_pair(basis, 1, 2, level as f64 * PI / 6.0)
    } else {
        basis.clone()
    };
    let shrink = 1.0 / (1.0 + 0.25 * level as f64);
    let mut d = norms.to_vec();
    for x in d.iter_mut().skip(1) {
        *x *= shrink;
    }
    with_norms(&b, &d)
}

fn theorem4_loadings(basis: &Array2<f64>, norms: &[f64], theta: f64) -> Array2<f64> {
    let first = norms[0] / theta;
    // later columns stay below the first so component order is preserved
    let shrink = (0.8 * first / norms[1]).min(1.0);
    let mut d = norms.to_vec();
    d[0] = first;
    for x in d.iter_mut().skip(1) {
        *x *= shrink;
    }
    with_norms(basis, &d)
}

fn mismatch_loadings(basis: &Array2<f64>, norms: &[f64], level: usize, k: usize) -> Array2<f64> {
    let angle = (25.0 + 40.0 * level as f64 / (k - 1) as f64).to_radians();
    with_norms(&rotate_pair(basis, 0, 1, angle), norms)
}

impl ScenarioSpec {
    /// Condition means `A_b[:, ..q] × effects[:, i]`.
    pub fn condition_means(&self) -> Vec<Array1<f64>> {
        let head = self.between_loadings.slice(s![.., ..self.q]);
        (0..self.k)
            .map(|i| head.dot(&self.condition_effects.column(i)))
            .collect()
    }

    /// `A_i A_iᵀ + σ² I`.
    pub fn within_covariance(&self, level: usize) -> Array2<f64> {
        let a = &self.within_loadings[level];
        let mut s = a.dot(&a.t());
        for j in 0..self.p {
            s[[j, j]] += self.noise_sd * self.noise_sd;
        }
        crate::linalg::symmetrize(&mut s);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let (p, k, q) = (self.p, self.k, self.q);
        if self.within_loadings.len() != k
            || self.within_loadings.iter().any(|a| a.dim() != (p, p))
            || self.between_loadings.dim() != (p, p)
            || self.condition_effects.dim() != (q, k)
            || self.proportions.len() != k
            || q == 0
            || q > p
        {
            return Err(Error::Shape("scenario dimensions are inconsistent".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(
                "scenario proportions do not sum to 1".into(),
            ));
        }
        for row in self.condition_effects.rows() {
            let weighted: f64 = row.iter().zip(&self.proportions).map(|(e, w)| e * w).sum();
            if weighted.abs() > 1e-12 {
                return Err(Error::Invalid(
                    "condition effects must have zero weighted mean".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Exact moments implied by the scenario.
pub fn population_moments(spec: &ScenarioSpec) -> Result<ConditionMoments> {
    spec.validate()?;
    let covariances = (0..spec.k).map(|i| spec.within_covariance(i)).collect();
    ConditionMoments::new(
        spec.condition_means(),
        covariances,
        spec.proportions.clone(),
    )
}

fn level_name(i: usize) -> String {
    format!("c{}", i + 1)
}

fn standard_normal_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    // filled observation by observation so the stream order is fixed
    let mut z = Array2::zeros((rows, cols));
    for t in 0..cols {
        for j in 0..rows {
            z[[j, t]] = StandardNormal.sample(rng);
        }
    }
    z
}

/// Draw `n_per_condition` observations per condition: `x = A_i z + μ_i + σ ε`
/// with standard normal `z` and `ε`.
pub fn sample(spec: &ScenarioSpec, n_per_condition: usize, seed: u64) -> Result<ConditionDataset> {
    spec.validate()?;
    if n_per_condition < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 observations per condition, got {n_per_condition}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = spec.condition_means();
    let n = n_per_condition * spec.k;
    let mut data = Array2::zeros((spec.p, n));
    let mut labels = Vec::with_capacity(n);
    for (level, mean) in means.iter().enumerate() {
        let z = standard_normal_block(&mut rng, spec.p, n_per_condition);
        let mut x = spec.within_loadings[level].dot(&z);
        if spec.noise_sd > 0.0 {
            let eps = standard_normal_block(&mut rng, spec.p, n_per_condition);
            x.scaled_add(spec.noise_sd, &eps);
        }
        for (col, t) in x.axis_iter(Axis(1)).zip(level * n_per_condition..) {
            data.column_mut(t).assign(&(&col + mean));
            labels.push(level_name(level));
        }
    }
    ConditionDataset::from_named_labels(data, &labels)
}

/// A sample whose per-condition moments equal the population moments up to
/// round-off: the standard normal draws are centred and whitened per
/// condition before the loadings are applied. Needs `n_per_condition > p`.
pub fn moment_matched_sample(
    spec: &ScenarioSpec,
    n_per_condition: usize,
    seed: u64,
) -> Result<ConditionDataset> {
    spec.validate()?;
    if n_per_condition <= spec.p {
        return Err(Error::InsufficientData(format!(
            "moment matching needs more than {} observations per condition, got {}",
            spec.p, n_per_condition
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = spec.condition_means();
    let n = n_per_condition * spec.k;
    let mut data = Array2::zeros((spec.p, n));
    let mut labels = Vec::with_capacity(n);
    for (level, mean) in means.iter().enumerate() {
        let mut z = standard_normal_block(&mut rng, spec.p, n_per_condition);
        let centre = z.mean_axis(Axis(1)).expect("n > 0");
        for mut col in z.axis_iter_mut(Axis(1)) {
            col -= &centre;
        }
        let cov = z.dot(&z.t()) / n_per_condition as f64;
        let z = sym_inv_sqrt(cov.view())?.dot(&z);
        let factor = if spec.noise_sd > 0.0 {
            sym_sqrt(spec.within_covariance(level).view())?
        } else {
            spec.within_loadings[level].clone()
        };
        let x = factor.dot(&z);
        for (col, t) in x.axis_iter(Axis(1)).zip(level * n_per_condition..) {
            data.column_mut(t).assign(&(&col + mean));
            labels.push(level_name(level));
        }
    }
    ConditionDataset::from_named_labels(data, &labels)
}
