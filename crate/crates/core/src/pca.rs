//! Principal components of covariance matrices.
//!
//! Loadings are eigenvectors scaled by the square roots of their eigenvalues,
//! so `A Aᵀ` reproduces the analysed covariance and the matching scores have
//! identity covariance. Eigenvalues are nonincreasing; each eigenvector is
//! signed so that its largest-magnitude element is positive (lowest row wins
//! ties).

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionDataset, ConditionMoments};
use crate::error::{Error, Result};
use crate::linalg::{self, asymmetry, canonicalize_columns, max_abs, scale_columns};

/// Allowed asymmetry of an input covariance, relative to `max(1, max|Σ|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues in `[-PSD_FLOOR, 0)` are clamped to zero.
pub const PSD_FLOOR: f64 = 1e-8;
/// Eigenvalues below this fraction of the absolute trace are round-off.
pub const ZERO_EIGENVALUE_REL: f64 = 1e-13;

pub use crate::linalg::canonicalize_columns as canonicalize_signs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSolution {
    /// `p × r`; column `j` is eigenvector `j` times `sqrt(eigenvalue_j)`.
    #[serde(with = "crate::json::matrix")]
    pub loadings: Array2<f64>,
    #[serde(with = "crate::json::vector")]
    pub eigenvalues: Array1<f64>,
    /// Unit eigenvectors with the canonical sign, `p × r`.
    #[serde(with = "crate::json::matrix")]
    pub eigenvectors: Array2<f64>,
    /// `r × n` component scores, when raw data were supplied.
    #[serde(
        with = "crate::json::opt_matrix",
        skip_serializing_if = "Option::is_none",
        default
    )]
    pub scores: Option<Array2<f64>>,
    /// Components that could not be scored because their eigenvalue is zero.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub dropped: Vec<usize>,
}

impl PcaSolution {
    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn r(&self) -> usize {
        self.loadings.ncols()
    }

    /// Number of strictly positive eigenvalues.
    pub fn rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count()
    }

    /// `A Aᵀ`.
    pub fn reproduced_covariance(&self) -> Array2<f64> {
        self.loadings.dot(&self.loadings.t())
    }

    /// The linear map `D^{-1/2} Vᵀ` from centred data to scores. Rows of
    /// zero-eigenvalue components are zero.
    pub fn score_map(&self) -> Array2<f64> {
        let mut map = self.eigenvectors.t().to_owned();
        for (j, mut row) in map.rows_mut().into_iter().enumerate() {
            let l = self.eigenvalues[j];
            if is_scorable(l, &self.eigenvalues) {
                row.mapv_inplace(|x| x / l.sqrt());
            } else {
                row.fill(0.0);
            }
        }
        map
    }
}

fn is_scorable(l: f64, all: &Array1<f64>) -> bool {
    let top = all.iter().fold(0.0_f64, |m, &x| m.max(x));
    l > 0.0 && l > top * 1e-12
}

/// PCA of a symmetric positive semidefinite matrix.
pub fn pca_of_covariance(sigma: ArrayView2<'_, f64>) -> Result<PcaSolution> {
    let (p, c) = sigma.dim();
    if p != c || p == 0 {
        return Err(Error::Shape(format!(
            "covariance must be square, got {p}x{c}"
        )));
    }
    let asym = asymmetry(sigma);
    if asym > SYMMETRY_TOL * max_abs(sigma).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let eig = linalg::sym_eigen(sigma)?;
    let trace_scale: f64 = eig.values.iter().map(|l| l.abs()).sum();
    let mut eigenvalues = eig.values;
    for l in eigenvalues.iter_mut() {
        if *l < -PSD_FLOOR {
            return Err(Error::NotPsd(*l));
        }
        if *l < 0.0 || l.abs() <= ZERO_EIGENVALUE_REL * trace_scale {
            *l = 0.0;
        }
    }
    let mut eigenvectors = eig.vectors;
    canonicalize_columns(&mut eigenvectors);
    let roots = eigenvalues.mapv(f64::sqrt);
    let loadings = scale_columns(&eigenvectors, &roots);
    Ok(PcaSolution {
        loadings,
        eigenvalues,
        eigenvectors,
        scores: None,
        dropped: Vec::new(),
    })
}

/// Scores `c = D^{-1/2} Vᵀ x` for centred `p × n` data.
///
/// Fails with [`Error::RankDeficient`] if any component has a zero
/// eigenvalue; see [`component_scores_lenient`] for the variant that drops
/// such components instead.
pub fn component_scores(solution: &PcaSolution, centered: &Array2<f64>) -> Result<Array2<f64>> {
    let (scores, dropped) = component_scores_lenient(solution, centered)?;
    match dropped.first() {
        Some(&j) => Err(Error::RankDeficient(j + 1)),
        None => Ok(scores),
    }
}

/// Like [`component_scores`], but components with zero eigenvalue get a zero
/// score row and are listed in the second return value (zero-based).
pub fn component_scores_lenient(
    solution: &PcaSolution,
    centered: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if centered.nrows() != solution.p() {
        return Err(Error::Shape(format!(
            "data has {} variables, solution has {}",
            centered.nrows(),
            solution.p()
        )));
    }
    let dropped = (0..solution.r())
        .filter(|&j| !is_scorable(solution.eigenvalues[j], &solution.eigenvalues))
        .collect();
    Ok((solution.score_map().dot(centered), dropped))
}

/// PCA of a centred data block with scores attached.
pub fn pca_of_block(
    centered: &Array2<f64>,
    covariance: ArrayView2<'_, f64>,
) -> Result<PcaSolution> {
    let mut sol = pca_of_covariance(covariance)?;
    let (scores, dropped) = component_scores_lenient(&sol, centered)?;
    sol.scores = Some(scores);
    sol.dropped = dropped;
    Ok(sol)
}

/// One PCA per condition level plus one of the condition means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPca {
    pub within: Vec<PcaSolution>,
    pub between: PcaSolution,
}

/// Within-condition PCAs (scores from each condition's centred block) and the
/// between-condition PCA (scores from the mean-replicated block), using
/// population covariances.
pub fn within_and_between_pca(ds: &ConditionDataset) -> Result<ConditionPca> {
    let moments = ds.condition_moments(crate::dataset::CovarianceMode::Population)?;
    let within_block = ds.center_within();
    let within = moments
        .covariances
        .iter()
        .enumerate()
        .map(|(level, cov)| pca_of_block(&ds.select_level(&within_block, level), cov.view()))
        .collect::<Result<Vec<_>>>()?;
    let between = pca_of_block(&ds.between_replicate(), moments.between_covariance.view())?;
    Ok(ConditionPca { within, between })
}

/// Within and between PCAs from moments alone (no scores).
pub fn within_and_between_from_moments(moments: &ConditionMoments) -> Result<ConditionPca> {
    let within = moments
        .covariances
        .iter()
        .map(|c| pca_of_covariance(c.view()))
        .collect::<Result<Vec<_>>>()?;
    let between = pca_of_covariance(moments.between_covariance.view())?;
    Ok(ConditionPca { within, between })
}

/// PCA of the pooled data, ignoring the condition structure.
pub fn total_pca(ds: &ConditionDataset) -> Result<PcaSolution> {
    let moments = ds.condition_moments(crate::dataset::CovarianceMode::Population)?;
    pca_of_block(ds.data(), moments.total_covariance().view())
}

/// Wanted (`M`, `w`) and unwanted (`N`, `u`) components.
#[derive(Debug, Clone, PartialEq)]
pub struct WantedSplit {
    pub wanted_loadings: Array2<f64>,
    pub unwanted_loadings: Array2<f64>,
    pub wanted_scores: Option<Array2<f64>>,
    pub unwanted_scores: Option<Array2<f64>>,
}

impl WantedSplit {
    pub fn q(&self) -> usize {
        self.wanted_loadings.ncols()
    }

    /// `M Mᵀ + N Nᵀ`.
    pub fn reproduced_covariance(&self) -> Array2<f64> {
        self.wanted_loadings.dot(&self.wanted_loadings.t())
            + self.unwanted_loadings.dot(&self.unwanted_loadings.t())
    }
}

/// Keep the first `q` components as wanted.
pub fn split_wanted(solution: &PcaSolution, q: usize) -> Result<WantedSplit> {
    let r = solution.r();
    if q == 0 || q > r {
        return Err(Error::BadComponentCount(format!(
            "wanted components must be in 1..={r}, got {q}"
        )));
    }
    let scores = solution.scores.as_ref();
    Ok(WantedSplit {
        wanted_loadings: solution.loadings.slice(s![.., ..q]).to_owned(),
        unwanted_loadings: solution.loadings.slice(s![.., q..]).to_owned(),
        wanted_scores: scores.map(|c| c.slice(s![..q, ..]).to_owned()),
        unwanted_scores: scores.map(|c| c.slice(s![q.., ..]).to_owned()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::population_covariance;
    use crate::linalg::max_abs_diff;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_gives_identity_loadings() {
        let sol = pca_of_covariance(Array2::<f64>::eye(2).view()).unwrap();
        assert_eq!(sol.eigenvalues, array![1.0, 1.0]);
        assert_eq!(sol.loadings, Array2::<f64>::eye(2));
    }

    #[test]
    fn diagonal_case() {
        let sol = pca_of_covariance(array![[2.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(sol.eigenvalues, array![2.0, 1.0]);
        assert_abs_diff_eq!(sol.loadings[[0, 0]], 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_eq!(sol.loadings[[1, 0]], 0.0);
        assert_eq!(sol.loadings[[1, 1]], 1.0);
    }

    #[test]
    fn equicorrelated_pair() {
        // λ = 1 ± 0.5, v1 = (1,1)/√2 so loading = √1.5/√2 = 0.8660...
        let sol = pca_of_covariance(array![[1.0, 0.5], [0.5, 1.0]].view()).unwrap();
        assert_abs_diff_eq!(sol.eigenvalues[0], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.eigenvalues[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.loadings[[0, 0]], 0.75_f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(sol.loadings[[1, 0]], 0.75_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            pca_of_covariance(array![[1.0, 0.5], [0.4, 1.0]].view()),
            Err(Error::NotSymmetric(_))
        ));
        assert!(matches!(
            pca_of_covariance(array![[1.0, 0.0], [0.0, -0.1]].view()),
            Err(Error::NotPsd(_))
        ));
        let tiny = pca_of_covariance(array![[1.0, 0.0], [0.0, -1e-9]].view()).unwrap();
        assert_eq!(tiny.eigenvalues[1], 0.0);
        assert_eq!(tiny.loadings.column(1), array![0.0, 0.0]);
    }

    #[test]
    fn scores_divide_by_root_eigenvalue() {
        let sol = pca_of_covariance(array![[4.0, 0.0], [0.0, 1.0]].view()).unwrap();
        let c = component_scores(&sol, &array![[2.0], [1.0]]).unwrap();
        assert_eq!(c, array![[1.0], [1.0]]);
    }

    #[test]
    fn single_variable_scores_are_standardised() {
        let x = array![[1.0, -3.0, 2.0]];
        let mean = x.mean().unwrap();
        let centred = x.mapv(|v| v - mean);
        let cov = population_covariance(centred.view());
        let sol = pca_of_covariance(cov.view()).unwrap();
        let c = component_scores(&sol, &centred).unwrap();
        let sd = cov[[0, 0]].sqrt();
        assert!(max_abs_diff(c.view(), centred.mapv(|v| v / sd).view()) < 1e-14);
    }

    #[test]
    fn rank_deficient_scores() {
        let sol = pca_of_covariance(array![[1.0, 0.0], [0.0, 0.0]].view()).unwrap();
        assert!(matches!(
            component_scores(&sol, &array![[1.0], [0.0]]),
            Err(Error::RankDeficient(2))
        ));
        let (c, dropped) = component_scores_lenient(&sol, &array![[1.0], [0.0]]).unwrap();
        assert_eq!(dropped, vec![1]);
        assert_eq!(c, array![[1.0], [0.0]]);
    }

    #[test]
    fn wanted_split() {
        let sigma = array![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.1]];
        let sol = pca_of_covariance(sigma.view()).unwrap();
        let split = split_wanted(&sol, 2).unwrap();
        let carried: Vec<f64> = split
            .wanted_loadings
            .columns()
            .into_iter()
            .map(|c| c.dot(&c))
            .collect();
        assert_abs_diff_eq!(carried[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(carried[1], 1.0, epsilon = 1e-14);
        assert!(max_abs_diff(split.reproduced_covariance().view(), sigma.view()) < 1e-14);

        let all = split_wanted(&sol, 3).unwrap();
        assert_eq!(all.unwanted_loadings.ncols(), 0);
        assert_eq!(all.wanted_loadings, sol.loadings);
        assert!(matches!(
            split_wanted(&sol, 0),
            Err(Error::BadComponentCount(_))
        ));
        assert!(matches!(
            split_wanted(&sol, 4),
            Err(Error::BadComponentCount(_))
        ));
    }

    #[test]
    fn between_pca_of_symmetric_effect() {
        // μ_1 = -μ_2 = (δ, 0), δ = 0.7
        let delta = 0.7;
        let data = array![[delta, delta, -delta, -delta], [0.0, 0.0, 0.0, 0.0]];
        let ds = ConditionDataset::partition_by_condition(data, &[1, 1, 2, 2]).unwrap();
        let cp = within_and_between_pca(&ds).unwrap();
        assert_abs_diff_eq!(cp.between.eigenvalues[0], delta * delta, epsilon = 1e-15);
        assert_eq!(cp.between.eigenvalues[1], 0.0);
        assert_abs_diff_eq!(cp.between.loadings[[0, 0]], delta, epsilon = 1e-15);
        assert_eq!(cp.between.rank(), 1);
        assert_eq!(cp.between.dropped, vec![1]);
    }

    #[test]
    fn no_condition_effect_means_zero_between() {
        let data = array![[1.0, -1.0, 2.0, -2.0], [0.0, 0.0, 1.0, -1.0]];
        let ds = ConditionDataset::partition_by_condition(data, &[1, 1, 2, 2]).unwrap();
        let cp = within_and_between_pca(&ds).unwrap();
        assert!(cp.between.eigenvalues.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn identical_within_covariances_identical_loadings() {
        let data = array![
            [1.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0],
            [0.5, -0.5, 2.0, -2.0, 0.5, -0.5, 2.0, -2.0]
        ];
        let ds = ConditionDataset::partition_by_condition(data, &[1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
        let cp = within_and_between_pca(&ds).unwrap();
        assert_eq!(cp.within[0].loadings, cp.within[1].loadings);
    }

    #[test]
    fn scores_have_identity_covariance() {
        let data = array![
            [1.0, 2.0, -0.5, 0.3, -1.7, 0.9],
            [0.2, -1.0, 0.4, 2.0, -0.6, 0.1],
            [1.1, 0.0, -2.2, 0.7, 0.3, -0.4]
        ];
        let ds = ConditionDataset::partition_by_condition(data, &[1; 6]).unwrap();
        let sol = total_pca(&ds).unwrap();
        let c = sol.scores.as_ref().unwrap();
        let cov = population_covariance(c.view());
        assert!(max_abs_diff(cov.view(), Array2::<f64>::eye(3).view()) < 1e-12);
        assert!(max_abs_diff(sol.loadings.dot(c).view(), ds.data().view()) < 1e-12);
    }
}
