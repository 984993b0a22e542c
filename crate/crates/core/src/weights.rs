//! Positive-definite weighting matrices and the eigenvalue-bounded class
//! `{W : 1/kappa <= eig(W) <= kappa}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{GmmError, Result};
use crate::linalg::{extreme_eigenvalues, relative_asymmetry, symmetrize};
use crate::rng::{standard_normal, Rng};

/// Symmetric tolerance for weight matrices (relative to the largest entry).
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    eig_min: f64,
    eig_max: f64,
}

impl WeightMatrix {
    /// Validate a symmetric positive-definite matrix. The stored matrix is the
    /// exact symmetrization of the input.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(GmmError::Dimension(format!(
                "weight matrix must be square, got {:?}",
                values.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidArgument("non-finite weight entry".into()));
        }
        let asymmetry = relative_asymmetry(&values);
        if asymmetry > SYMMETRY_TOL {
            return Err(GmmError::Asymmetric { asymmetry });
        }
        let values = symmetrize(&values);
        let (eig_min, eig_max) = extreme_eigenvalues(&values);
        if !(eig_min > 0.0) {
            return Err(GmmError::NotPositiveDefinite { eig_min });
        }
        Ok(Self {
            values,
            eig_min,
            eig_max,
        })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            values: DMatrix::identity(k, k),
            eig_min: 1.0,
            eig_max: 1.0,
        }
    }

    /// `diag(d)` for strictly positive `d`.
    pub fn diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn eig_min(&self) -> f64 {
        self.eig_min
    }

    pub fn eig_max(&self) -> f64 {
        self.eig_max
    }

    /// Smallest `kappa` with this matrix in the bounded class.
    pub fn kappa(&self) -> f64 {
        self.eig_max.max(1.0 / self.eig_min)
    }

    /// Smallest `kappa` attainable by rescaling this matrix (the estimator is
    /// invariant to positive rescaling of the weight).
    pub fn scale_free_kappa(&self) -> f64 {
        (self.eig_max / self.eig_min).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(GmmError::InvalidArgument(format!("scale {c} must be positive")));
        }
        Ok(Self {
            values: &self.values * c,
            eig_min: self.eig_min * c,
            eig_max: self.eig_max * c,
        })
    }

    /// Rescaled copy whose extreme eigenvalues are reciprocal.
    pub fn balanced(&self) -> Self {
        let c = 1.0 / (self.eig_min * self.eig_max).sqrt();
        self.scaled(c).expect("positive scale")
    }
}

/// Which eigenvalue bound a candidate weight violates.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub kappa: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub below_lower: bool,
    pub above_upper: bool,
}

impl std::fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.below_lower {
            parts.push(format!("min eigenvalue {:e} < 1/kappa = {:e}", self.eig_min, 1.0 / self.kappa));
        }
        if self.above_upper {
            parts.push(format!("max eigenvalue {:e} > kappa = {:e}", self.eig_max, self.kappa));
        }
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightCheck {
    Accepted(WeightMatrix),
    Rejected(BoundViolation),
}

impl WeightCheck {
    pub fn accepted(&self) -> Option<&WeightMatrix> {
        match self {
            WeightCheck::Accepted(w) => Some(w),
            WeightCheck::Rejected(_) => None,
        }
    }
}

/// Check membership of `w` in the class with eigenvalues in `[1/kappa, kappa]`,
/// with tolerance `1e-10 kappa` on both bounds.
pub fn check_weight(w: &DMatrix<f64>, kappa: f64) -> Result<WeightCheck> {
    if !(kappa >= 1.0) {
        return Err(GmmError::InvalidArgument(format!("kappa {kappa} must be >= 1")));
    }
    if !w.is_square() {
        return Err(GmmError::Dimension(format!(
            "weight matrix must be square, got {:?}",
            w.shape()
        )));
    }
    let asymmetry = relative_asymmetry(w);
    if asymmetry > SYMMETRY_TOL {
        return Err(GmmError::Asymmetric { asymmetry });
    }
    let sym = symmetrize(w);
    let (eig_min, eig_max) = extreme_eigenvalues(&sym);
    let tol = 1e-10 * kappa;
    let below_lower = eig_min < 1.0 / kappa - tol;
    let above_upper = eig_max > kappa + tol;
    if below_lower || above_upper {
        return Ok(WeightCheck::Rejected(BoundViolation {
            kappa,
            eig_min,
            eig_max,
            below_lower,
            above_upper,
        }));
    }
    Ok(WeightCheck::Accepted(WeightMatrix {
        values: sym,
        eig_min,
        eig_max,
    }))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the sign
/// of each column fixed by the diagonal of R.
pub fn random_orthogonal(k: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| standard_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random member of the bounded class: `Q diag(lambda) Q'` with Haar `Q` and
/// eigenvalues log-uniform on `[1/kappa, kappa]`.
pub fn random_weight(k: usize, kappa: f64, rng: &mut Rng) -> WeightMatrix {
    assert!(kappa >= 1.0, "kappa must be >= 1");
    if kappa == 1.0 {
        return WeightMatrix::identity(k);
    }
    let q = random_orthogonal(k, rng);
    let log_k = kappa.ln();
    let lambda: Vec<f64> = (0..k)
        .map(|_| {
            if log_k == 0.0 {
                1.0
            } else {
                rng.random_range(-log_k..=log_k).exp()
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(lambda.clone()));
    let values = symmetrize(&(&q * d * q.transpose()));
    let lo = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    WeightMatrix {
        values,
        eig_min: lo,
        eig_max: hi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    #[test]
    fn identity_accepted_at_kappa_one() {
        let check = check_weight(&DMatrix::identity(3, 3), 1.0).unwrap();
        assert!(check.accepted().is_some());
    }

    #[test]
    fn diag_three_third_rejected_on_both_bounds() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0 / 3.0]));
        match check_weight(&w, 2.0).unwrap() {
            WeightCheck::Rejected(v) => {
                assert!(v.below_lower && v.above_upper);
                assert!(v.to_string().contains("min eigenvalue"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn correlated_two_by_two_accepted() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        // eigenvalues of [[1, r], [r, 1]] are 1 - r and 1 + r
        let (lo, hi) = (0.5, 1.5);
        let (elo, ehi) = extreme_eigenvalues(&w);
        assert!((elo - lo).abs() < 1e-14 && (ehi - hi).abs() < 1e-14);
        let acc = check_weight(&w, 2.0).unwrap();
        let acc = acc.accepted().expect("accepted");
        assert!((acc.eig_min() - lo).abs() < 1e-10);
        assert!((acc.eig_max() - hi).abs() < 1e-10);
    }

    #[test]
    fn asymmetric_input_is_an_error() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(check_weight(&w, 2.0), Err(GmmError::Asymmetric { .. })));
        assert!(matches!(WeightMatrix::new(w), Err(GmmError::Asymmetric { .. })));
    }

    #[test]
    fn kappa_below_one_is_invalid() {
        assert!(check_weight(&DMatrix::identity(2, 2), 0.5).is_err());
    }

    #[test]
    fn sampler_stays_in_class_with_consistent_cache() {
        let mut rng = sub_rng(11, 0);
        for k in 1..6 {
            for _ in 0..50 {
                let w = random_weight(k, 30.0, &mut rng);
                let (lo, hi) = extreme_eigenvalues(w.values());
                assert!((lo - w.eig_min()).abs() <= 1e-10 * hi.max(1.0));
                assert!((hi - w.eig_max()).abs() <= 1e-10 * hi.max(1.0));
                assert!(check_weight(w.values(), 30.0).unwrap().accepted().is_some());
            }
        }
        let one = random_weight(4, 1.0, &mut rng);
        assert!((one.values() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn orthogonal_sampler_is_orthogonal() {
        let mut rng = sub_rng(3, 1);
        let q = random_orthogonal(5, &mut rng);
        assert!((q.transpose() * &q - DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn balanced_weight_has_reciprocal_extremes() {
        let w = WeightMatrix::diagonal(&[4.0, 9.0, 1.0]).unwrap().balanced();
        assert!((w.eig_min() * w.eig_max() - 1.0).abs() < 1e-12);
        assert!((w.kappa() - 3.0).abs() < 1e-12);
    }
}
