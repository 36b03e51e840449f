//! Orthogonal rotation of wanted loadings and counter-rotation of scores.
//!
//! Loadings are postmultiplied by `T` and scores premultiplied by
//! `T⁻¹ = Tᵀ`, so `M T Tᵀ w = M w`. Any condition effect that sits on one
//! unrotated component is smeared over every rotated component `j` in
//! proportion to `T*_{j1}`; [`rotated_condition_means`] gives that
//! prediction directly.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, orthogonality_defect, sign_pivot};

/// Allowed deviation of `TᵀT` from the identity.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationStatus {
    Converged,
    /// Columns are linearly dependent; the identity is returned.
    Degenerate,
    /// Sweep limit reached before the criterion settled.
    MaxSweeps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationResult {
    /// `q × q` orthogonal `T`.
    pub transform: Array2<f64>,
    /// `T* = T⁻¹ = Tᵀ`.
    pub inverse_transform: Array2<f64>,
    /// `M T`.
    pub rotated_loadings: Array2<f64>,
    /// `T⁻¹ w`, when scores were supplied.
    pub rotated_scores: Option<Array2<f64>>,
    pub status: RotationStatus,
    pub sweeps: usize,
}

impl RotationResult {
    /// Attach counter-rotated scores.
    pub fn with_scores(mut self, w: &Array2<f64>) -> Result<Self> {
        check_scores(&self.transform, w)?;
        self.rotated_scores = Some(self.inverse_transform.dot(w));
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarimaxOptions {
    /// Kaiser row normalisation by communality.
    pub normalize: bool,
    /// Stop when a full sweep gains less than this (relative above 1).
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for VarimaxOptions {
    fn default() -> Self {
        Self {
            normalize: false,
            tolerance: 1e-12,
            max_sweeps: 1000,
        }
    }
}

/// Raw varimax criterion: summed variance of squared loadings per column.
pub fn varimax_criterion(loadings: &Array2<f64>) -> f64 {
    let p = loadings.nrows() as f64;
    loadings
        .columns()
        .into_iter()
        .map(|col| {
            let s2: f64 = col.iter().map(|x| x * x).sum();
            let s4: f64 = col.iter().map(|x| x.powi(4)).sum();
            (p * s4 - s2 * s2) / (p * p)
        })
        .sum()
}

/// Varimax rotation by pairwise planar rotations.
///
/// Output columns are ordered by explained variance (sum of squared
/// loadings, descending) and signed like PCA loadings.
pub fn varimax(m: &Array2<f64>, opts: &VarimaxOptions) -> Result<RotationResult> {
    let (p, q) = m.dim();
    if q < 2 {
        return Err(Error::NothingToRotate(q));
    }
    if is_degenerate(m)? {
        return identity_result(m, RotationStatus::Degenerate);
    }

    let weights: Vec<f64> = if opts.normalize {
        m.rows()
            .into_iter()
            .map(|r| {
                let h = r.dot(&r).sqrt();
                if h > 0.0 {
                    1.0 / h
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; p]
    };
    let mut work = m.clone();
    for (mut row, &w) in work.rows_mut().into_iter().zip(&weights) {
        row.mapv_inplace(|x| x * w);
    }

    let mut t = Array2::<f64>::eye(q);
    let mut criterion = varimax_criterion(&work);
    let mut sweeps = 0;
    let mut status = RotationStatus::MaxSweeps;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for j in 0..q {
            for l in (j + 1)..q {
                let angle = pair_angle(&work, j, l);
                if angle == 0.0 {
                    continue;
                }
                let (sin, cos) = angle.sin_cos();
                planar_rotate(&mut work, j, l, cos, sin);
                planar_rotate(&mut t, j, l, cos, sin);
            }
        }
        let next = varimax_criterion(&work);
        let gain = next - criterion;
        criterion = next;
        if gain < opts.tolerance * criterion.abs().max(1.0) {
            status = RotationStatus::Converged;
            break;
        }
    }

    let rotated = m.dot(&t);
    let order = order_by_variance(&rotated);
    let mut t = t.select(Axis(1), &order);
    let mut rotated = rotated.select(Axis(1), &order);
    for j in 0..q {
        if let Some(i) = sign_pivot(rotated.column(j)) {
            if rotated[[i, j]] < 0.0 {
                rotated.column_mut(j).mapv_inplace(|x| -x);
                t.column_mut(j).mapv_inplace(|x| -x);
            }
        }
    }
    Ok(RotationResult {
        inverse_transform: t.t().to_owned(),
        transform: t,
        rotated_loadings: rotated,
        rotated_scores: None,
        status,
        sweeps,
    })
}

/// Angle maximising the varimax criterion for columns `j` and `l`.
fn pair_angle(a: &Array2<f64>, j: usize, l: usize) -> f64 {
    let p = a.nrows() as f64;
    let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.nrows() {
        let x = a[[i, j]];
        let y = a[[i, l]];
        let u = x * x - y * y;
        let v = 2.0 * x * y;
        sa += u;
        sb += v;
        sc += u * u - v * v;
        sd += 2.0 * u * v;
    }
    let num = sd - 2.0 * sa * sb / p;
    let den = sc - (sa * sa - sb * sb) / p;
    if num == 0.0 && den >= 0.0 {
        return 0.0;
    }
    0.25 * num.atan2(den)
}

fn planar_rotate(a: &mut Array2<f64>, j: usize, l: usize, cos: f64, sin: f64) {
    for i in 0..a.nrows() {
        let x = a[[i, j]];
        let y = a[[i, l]];
        a[[i, j]] = x * cos + y * sin;
        a[[i, l]] = -x * sin + y * cos;
    }
}

fn order_by_variance(a: &Array2<f64>) -> Vec<usize> {
    let var: Vec<f64> = a.columns().into_iter().map(|c| c.dot(&c)).collect();
    let mut order: Vec<usize> = (0..a.ncols()).collect();
    order.sort_by(|&x, &y| {
        var[y]
            .partial_cmp(&var[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Columns linearly dependent (including all-zero) within round-off.
fn is_degenerate(m: &Array2<f64>) -> Result<bool> {
    let gram = m.t().dot(m);
    let eig = linalg::sym_eigen(gram.view())?;
    let top = eig.values[0];
    let low = eig.values[eig.values.len() - 1];
    Ok(top <= 0.0 || low <= top * 1e-12)
}

fn identity_result(m: &Array2<f64>, status: RotationStatus) -> Result<RotationResult> {
    let q = m.ncols();
    Ok(RotationResult {
        transform: Array2::eye(q),
        inverse_transform: Array2::eye(q),
        rotated_loadings: m.clone(),
        rotated_scores: None,
        status,
        sweeps: 0,
    })
}

fn check_scores(t: &Array2<f64>, w: &Array2<f64>) -> Result<()> {
    if w.nrows() != t.nrows() {
        return Err(Error::Shape(format!(
            "scores have {} rows, transform is {}x{}",
            w.nrows(),
            t.nrows(),
            t.ncols()
        )));
    }
    Ok(())
}

/// Rotate loadings by an orthogonal `T` and counter-rotate scores by `Tᵀ`.
pub fn apply_rotation(
    m: &Array2<f64>,
    w: Option<&Array2<f64>>,
    t: &Array2<f64>,
) -> Result<RotationResult> {
    let q = m.ncols();
    if t.dim() != (q, q) {
        return Err(Error::Shape(format!(
            "transform must be {q}x{q}, got {}x{}",
            t.nrows(),
            t.ncols()
        )));
    }
    let defect = orthogonality_defect(t.view());
    if defect > ORTHOGONALITY_TOL {
        return Err(Error::NotOrthogonal(defect));
    }
    let result = RotationResult {
        transform: t.clone(),
        inverse_transform: t.t().to_owned(),
        rotated_loadings: m.dot(t),
        rotated_scores: None,
        status: RotationStatus::Converged,
        sweeps: 0,
    };
    match w {
        Some(w) => result.with_scores(w),
        None => Ok(result),
    }
}

/// `T* × E`, where column `i` of `baseline_means` holds the expected scores
/// of condition `i`.
pub fn rotated_condition_means(
    t_star: &Array2<f64>,
    baseline_means: &Array2<f64>,
) -> Result<Array2<f64>> {
    let q = t_star.nrows();
    if t_star.ncols() != q || baseline_means.nrows() != q {
        return Err(Error::Shape(format!(
            "T* is {}x{}, baseline means have {} rows",
            t_star.nrows(),
            t_star.ncols(),
            baseline_means.nrows()
        )));
    }
    Ok(t_star.dot(baseline_means))
}

/// Planar rotation by `angle` radians in the `(j, l)` plane of a `q × q`
/// identity.
pub fn givens(q: usize, j: usize, l: usize, angle: f64) -> Array2<f64> {
    let mut t = Array2::eye(q);
    let (s, c) = angle.sin_cos();
    t[[j, j]] = c;
    t[[l, l]] = c;
    t[[j, l]] = -s;
    t[[l, j]] = s;
    t
}
