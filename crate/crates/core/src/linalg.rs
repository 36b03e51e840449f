//! Dense symmetric linear algebra used throughout the crate.
//!
//! The eigen solver is a cyclic Jacobi iteration. It is slower than a
//! tridiagonal QR for large matrices, but it is deterministic and accurate to
//! the last few ulps for the small covariance matrices handled here.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Maximum number of full Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Off-diagonal convergence threshold relative to the matrix trace.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition sorted by nonincreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Array1<f64>,
    /// Eigenvectors as columns, aligned with `values`.
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

pub fn max_abs(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// Largest absolute difference between `a` and its transpose.
pub fn asymmetry(a: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Largest deviation of `TᵀT` from the identity.
pub fn orthogonality_defect(t: ArrayView2<'_, f64>) -> f64 {
    let gram = t.t().dot(&t);
    let eye = Array2::<f64>::eye(gram.nrows());
    max_abs_diff(gram.view(), eye.view())
}

pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps stop once every off-diagonal magnitude is below
/// `OFF_DIAGONAL_TOL` times the absolute trace, followed by one polishing
/// sweep (convergence is quadratic, so this reaches round-off level).
/// Eigenvalues come back in
/// nonincreasing order; equal eigenvalues keep the order of the axis they
/// converged on.
pub fn sym_eigen(a: ArrayView2<'_, f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut m = a.to_owned();
    symmetrize(&mut m);
    let mut v = Array2::<f64>::eye(n);

    let mut scale: f64 = (0..n).map(|i| m[[i, i]].abs()).sum();
    if scale == 0.0 {
        scale = max_abs(m.view());
    }
    let threshold = OFF_DIAGONAL_TOL * scale;

    let mut sweeps = 0;
    let mut polished = false;
    loop {
        let off = max_off_diagonal(&m);
        if off == 0.0 || polished {
            break;
        }
        if off <= threshold {
            polished = true;
        } else if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    m[[p, q]] = 0.0;
                    m[[q, p]] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s, t, apq);
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their axis order
    order.sort_by(|&i, &j| {
        diag[j]
            .partial_cmp(&diag[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let values = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let vectors = v.select(Axis(1), &order);
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

fn max_off_diagonal(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max(m[[i, j]].abs());
        }
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn rotate(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    p: usize,
    q: usize,
    c: f64,
    s: f64,
    t: f64,
    apq: f64,
) {
    let n = m.nrows();
    let tau = s / (1.0 + c);
    m[[p, p]] -= t * apq;
    m[[q, q]] += t * apq;
    m[[p, q]] = 0.0;
    m[[q, p]] = 0.0;
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = m[[r, p]];
        let arq = m[[r, q]];
        let new_rp = arp - s * (arq + tau * arp);
        let new_rq = arq + s * (arp - tau * arq);
        m[[r, p]] = new_rp;
        m[[p, r]] = new_rp;
        m[[r, q]] = new_rq;
        m[[q, r]] = new_rq;
    }
    for r in 0..n {
        let vrp = v[[r, p]];
        let vrq = v[[r, q]];
        v[[r, p]] = vrp - s * (vrq + tau * vrp);
        v[[r, q]] = vrq + s * (vrp - tau * vrq);
    }
}

/// Index of the element that decides a vector's sign: the largest magnitude,
/// with near-ties going to the lowest index.
pub fn sign_pivot(v: ArrayView1<'_, f64>) -> Option<usize> {
    let biggest = v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    if biggest == 0.0 {
        return None;
    }
    let cutoff = biggest * (1.0 - 1e-9);
    v.iter().position(|&x| x.abs() >= cutoff)
}

/// Flip column signs so each column's pivot element is positive.
///
/// Returns the applied signs (`1.0` or `-1.0`); zero columns keep `1.0`.
pub fn canonicalize_columns(a: &mut Array2<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(a.ncols());
    for mut col in a.axis_iter_mut(Axis(1)) {
        let flip = match sign_pivot(col.view()) {
            Some(i) if col[i] < 0.0 => -1.0,
            _ => 1.0,
        };
        if flip < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        signs.push(flip);
    }
    signs
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn sym_sqrt(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(a)?;
    let roots = eig.values.mapv(|x| x.max(0.0).sqrt());
    Ok(scale_columns(&eig.vectors, &roots).dot(&eig.vectors.t()))
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn sym_inv_sqrt(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(a)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    if let Some(&low) = eig.values.last() {
        if low <= top * 1e-12 || low <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "matrix is singular (smallest eigenvalue {low:e})"
            )));
        }
    }
    let inv_roots = eig.values.mapv(|x| 1.0 / x.sqrt());
    Ok(scale_columns(&eig.vectors, &inv_roots).dot(&eig.vectors.t()))
}

pub fn scale_columns(a: &Array2<f64>, factors: &Array1<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for (mut col, &f) in out.axis_iter_mut(Axis(1)).zip(factors.iter()) {
        col.mapv_inplace(|x| x * f);
    }
    out
}

/// Least-squares coordinates of the columns of `block` in the column space
/// of `basis`: `(BᵀB)⁺ Bᵀ X`. Zero basis columns get zero coordinates.
pub fn project_onto_columns(basis: &Array2<f64>, block: &Array2<f64>) -> Result<Array2<f64>> {
    if basis.nrows() != block.nrows() {
        return Err(Error::Shape(format!(
            "basis has {} rows, block has {}",
            basis.nrows(),
            block.nrows()
        )));
    }
    let gram = basis.t().dot(basis);
    let pinv = sym_pinv(&gram)?;
    Ok(pinv.dot(&basis.t()).dot(block))
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
pub fn sym_pinv(a: &Array2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(a.view())?;
    let top = eig.values.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
    let cutoff = top * 1e-12;
    let inv = eig.values.mapv(|x| {
        if x.abs() > cutoff && x != 0.0 {
            1.0 / x
        } else {
            0.0
        }
    });
    Ok(scale_columns(&eig.vectors, &inv).dot(&eig.vectors.t()))
}

/// Orthogonal projector onto the column space of `basis`.
pub fn column_space_projector(basis: &Array2<f64>) -> Result<Array2<f64>> {
    let gram = basis.t().dot(basis);
    let pinv = sym_pinv(&gram)?;
    Ok(basis.dot(&pinv).dot(&basis.t()))
}
