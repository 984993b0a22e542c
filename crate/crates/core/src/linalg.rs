//! Small dense linear-algebra helpers shared by the estimation and audit code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GmmError, Result};

/// Condition number above which a symmetric matrix is treated as singular.
pub const SINGULAR_COND: f64 = 1e12;

/// Largest absolute entry of `a - a'` relative to the largest absolute entry of `a`.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues (ascending) and matching eigenvectors of a symmetric matrix.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn extreme_eigenvalues(a: &DMatrix<f64>) -> (f64, f64) {
    let (vals, _) = sym_eigen(a);
    (vals[0], vals[vals.len() - 1])
}

/// Ratio of extreme eigenvalue magnitudes; infinite when the smallest is not positive.
pub fn sym_condition(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let (lo, hi) = extreme_eigenvalues(a);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive-definite matrix, rejecting near-singular input.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (vals, vecs) = sym_eigen(a);
    let hi = vals[vals.len() - 1];
    let lo = vals[0];
    let cond = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
    if !(cond <= SINGULAR_COND) || hi <= 0.0 {
        return Err(GmmError::Rank {
            what: what.to_string(),
            cond,
        });
    }
    let inv_vals = vals.map(|v| 1.0 / v);
    Ok(symmetrize(&(&vecs * DMatrix::from_diagonal(&inv_vals) * vecs.transpose())))
}

/// Inverse of a general square matrix with an SVD-based condition check.
pub fn general_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin <= 0.0 { f64::INFINITY } else { smax / smin };
    if !(cond <= 1e14) {
        return Err(GmmError::Rank {
            what: what.to_string(),
            cond,
        });
    }
    a.clone().try_inverse().ok_or(GmmError::Rank {
        what: what.to_string(),
        cond,
    })
}

/// Inverse of a covariance matrix used to form a weight, with ridge repair
/// `sigma + lambda I`, `lambda = 1e-10 tr(sigma) / k`, when the condition
/// number exceeds [`SINGULAR_COND`]. The flag reports whether repair was needed.
pub fn ridge_inverse(sigma: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = sigma.nrows();
    let s = symmetrize(sigma);
    if sym_condition(&s) <= SINGULAR_COND {
        if let Ok(inv) = spd_inverse(&s, "covariance") {
            return (inv, false);
        }
    }
    let mut lambda = 1e-10 * s.trace() / k as f64;
    if !(lambda > 0.0) {
        lambda = 1.0;
    }
    let mut ridged = s;
    for i in 0..k {
        ridged[(i, i)] += lambda;
    }
    let (vals, vecs) = sym_eigen(&ridged);
    let inv_vals = vals.map(|v| 1.0 / v.max(lambda));
    (
        symmetrize(&(&vecs * DMatrix::from_diagonal(&inv_vals) * vecs.transpose())),
        true,
    )
}

/// Symmetric square root and inverse square root of an SPD matrix.
pub fn sym_sqrt_pair(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (vals, vecs) = sym_eigen(a);
    if vals.len() > 0 && vals[0] <= 0.0 {
        return Err(GmmError::NotPositiveDefinite { eig_min: vals[0] });
    }
    let sqrt = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let inv_sqrt = &vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * vecs.transpose();
    Ok((symmetrize(&sqrt), symmetrize(&inv_sqrt)))
}

/// Orthonormal basis for the null space of `a'` (the orthogonal complement of
/// the column space of `a`), from a full SVD of `a`.
pub fn left_null_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, p) = a.shape();
    let mut padded = DMatrix::zeros(k, k);
    padded.view_mut((0, 0), (k, p)).copy_from(a);
    let svd = padded.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(f64::MIN_POSITIVE);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let null: Vec<usize> = idx
        .into_iter()
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut out = DMatrix::zeros(k, null.len());
    for (c, &i) in null.iter().enumerate() {
        out.set_column(c, &u.column(i));
    }
    out
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated dot product (Ogita-Rump-Oishi `Dot2`): result as if computed
/// in twice the working precision, then rounded.
pub fn dot2<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for (a, b) in pairs {
        let (p, pe) = two_prod(a, b);
        let (t, se) = two_sum(s, p);
        s = t;
        c += pe + se;
    }
    s + c
}

/// Matrix product with every entry computed by [`dot2`].
pub fn accurate_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions");
    DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| {
        dot2((0..a.ncols()).map(|l| (a[(i, l)], b[(l, j)])))
    })
}

pub fn accurate_mul_vec(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(a.ncols(), x.len(), "inner dimensions");
    DVector::from_fn(a.nrows(), |i, _| {
        dot2((0..a.ncols()).map(|l| (a[(i, l)], x[l])))
    })
}

pub fn accurate_dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    dot2(a.iter().copied().zip(b.iter().copied()))
}

/// Quadratic form `x' a x` with compensated accumulation.
pub fn accurate_quad(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    accurate_dot(x, &accurate_mul_vec(a, x))
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean with one refinement pass; exact for constant input.
pub fn mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    m + xs.iter().map(|v| v - m).sum::<f64>() / n
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}
