//! The Gaussian limit experiment `Y = -Gamma phi + eta + Sigma^{1/2} eps`:
//! GMM analogs, the canonical reparametrization `QY = (Lambda Y, Z)`,
//! constructive weighting matrices, and exact checks of the attainable-set
//! and t-statistic results.

use nalgebra::{DMatrix, DVector};

use crate::audit::{cs_intersection, min_max_t_points, Interval};
use crate::error::{GmmError, Result};
use crate::linalg::{
    accurate_dot, accurate_mul, accurate_mul_vec, accurate_quad, general_inverse, left_null_basis,
    relative_asymmetry, spd_inverse, symmetrize, SINGULAR_COND,
};
use crate::rng::{standard_normal, sub_rng, Rng};
use crate::weights::{random_weight, WeightMatrix, SYMMETRY_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct LimitProblem {
    pub gamma: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub h: DVector<f64>,
    pub eta: DVector<f64>,
    pub phi: DVector<f64>,
}

impl LimitProblem {
    pub fn new(
        gamma: DMatrix<f64>,
        sigma: DMatrix<f64>,
        h: DVector<f64>,
        eta: DVector<f64>,
        phi: DVector<f64>,
    ) -> Result<Self> {
        let (k, p) = gamma.shape();
        if p == 0 || k < p {
            return Err(GmmError::Dimension(format!("Gamma is {k}x{p}; need k >= p >= 1")));
        }
        if sigma.shape() != (k, k) || h.len() != p || eta.len() != k || phi.len() != p {
            return Err(GmmError::Dimension(format!(
                "Sigma {:?}, h {}, eta {}, phi {} inconsistent with Gamma {k}x{p}",
                sigma.shape(),
                h.len(),
                eta.len(),
                phi.len()
            )));
        }
        let asymmetry = relative_asymmetry(&sigma);
        if asymmetry > SYMMETRY_TOL {
            return Err(GmmError::Asymmetric { asymmetry });
        }
        let sigma = symmetrize(&sigma);
        let (eig_min, _) = crate::linalg::extreme_eigenvalues(&sigma);
        if !(eig_min > 0.0) {
            return Err(GmmError::NotPositiveDefinite { eig_min });
        }
        let sv = gamma.clone().svd(false, false).singular_values;
        let cond = sv.max() / sv.min();
        if !(cond <= SINGULAR_COND) {
            return Err(GmmError::Rank {
                what: "Gamma".into(),
                cond,
            });
        }
        Ok(Self {
            gamma,
            sigma,
            h,
            eta,
            phi,
        })
    }

    pub fn k(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn p(&self) -> usize {
        self.gamma.ncols()
    }

    /// Mean of `Y`.
    pub fn mean(&self) -> DVector<f64> {
        -(&self.gamma * &self.phi) + &self.eta
    }

    pub fn sigma_inverse(&self) -> Result<WeightMatrix> {
        WeightMatrix::new(spd_inverse(&self.sigma, "Sigma")?)
    }
}

/// Random well-posed instance: Gaussian `Gamma`, `h`, `eta`, `phi` and
/// `Sigma = A A'/k + 0.2 I`.
pub fn random_problem(k: usize, p: usize, rng: &mut Rng) -> LimitProblem {
    assert!(k >= p && p >= 1, "need k >= p >= 1");
    loop {
        let gamma = DMatrix::from_fn(k, p, |_, _| standard_normal(rng));
        let a = DMatrix::from_fn(k, k, |_, _| standard_normal(rng));
        let sigma = symmetrize(&(&a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.2));
        let h = DVector::from_fn(p, |_, _| standard_normal(rng));
        let eta = DVector::from_fn(k, |_, _| standard_normal(rng));
        let phi = DVector::from_fn(p, |_, _| standard_normal(rng));
        let sv = gamma.clone().svd(false, false).singular_values;
        if sv.min() < 1e-3 * sv.max() || h.norm() < 1e-3 {
            continue;
        }
        if let Ok(problem) = LimitProblem::new(gamma, sigma, h, eta, phi) {
            return problem;
        }
    }
}

/// `Y = -Gamma phi + eta + chol(Sigma) eps`.
pub fn draw(problem: &LimitProblem, seed: u64) -> DVector<f64> {
    let mut rng = sub_rng(seed, 0);
    draw_with(problem, &mut rng)
}

pub fn draw_with(problem: &LimitProblem, rng: &mut Rng) -> DVector<f64> {
    let l = problem
        .sigma
        .clone()
        .cholesky()
        .expect("validated positive definite")
        .l();
    let eps = DVector::from_fn(problem.k(), |_, _| standard_normal(rng));
    problem.mean() + l * eps
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalForm {
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub mtilde_rank_tol: f64,
    pub sigma_star_phi: DMatrix<f64>,
    pub sigma_star_z: DMatrix<f64>,
    pub sigma_star_z_inv: DMatrix<f64>,
}

/// Relative SVD threshold for the rows of `M~`.
pub const MTILDE_RANK_TOL: f64 = 1e-12;

pub fn canonical_form(problem: &LimitProblem) -> Result<CanonicalForm> {
    let (k, p) = (problem.k(), problem.p());
    let gamma = &problem.gamma;
    let sigma = &problem.sigma;
    let sigma_inv = spd_inverse(sigma, "Sigma")?;
    let gs = gamma.transpose() * &sigma_inv;
    let sigma_star_phi = spd_inverse(&symmetrize(&(&gs * gamma)), "Gamma' Sigma^-1 Gamma")?;
    let lambda = -(&sigma_star_phi * &gs);

    let m = if k == p {
        DMatrix::zeros(0, k)
    } else {
        // I + Gamma Lambda is an oblique projector of rank k - p
        let proj = DMatrix::identity(k, k) + gamma * &lambda;
        let svd = proj.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let smax = svd.singular_values.max();
        let tol = MTILDE_RANK_TOL * smax;
        let mut idx: Vec<usize> = (0..k).filter(|&i| svd.singular_values[i] > tol).collect();
        if idx.len() != k - p {
            return Err(GmmError::Construction(format!(
                "I + Gamma Lambda has numerical rank {} but k - p = {}",
                idx.len(),
                k - p
            )));
        }
        idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let mut mtilde = DMatrix::zeros(k - p, k);
        for (r, &i) in idx.iter().enumerate() {
            mtilde.set_row(r, &u.column(i).transpose());
        }
        mtilde * proj
    };

    let sigma_star_z = symmetrize(&(&m * sigma * m.transpose()));
    let sigma_star_z_inv = spd_inverse(&sigma_star_z, "M Sigma M'")?;
    let mut q = DMatrix::zeros(k, k);
    q.view_mut((0, 0), (p, k)).copy_from(&lambda);
    q.view_mut((p, 0), (k - p, k)).copy_from(&m);
    let mut q_inv = DMatrix::zeros(k, k);
    q_inv.view_mut((0, 0), (k, p)).copy_from(&(-gamma));
    q_inv
        .view_mut((0, p), (k, k - p))
        .copy_from(&(sigma * m.transpose() * &sigma_star_z_inv));
    Ok(CanonicalForm {
        q,
        q_inv,
        lambda,
        m,
        mtilde_rank_tol: MTILDE_RANK_TOL,
        sigma_star_phi,
        sigma_star_z,
        sigma_star_z_inv,
    })
}

/// Largest absolute deviations from the identities the canonical form must
/// satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalResiduals {
    pub q_q_inv: f64,
    pub m_gamma: f64,
    pub lambda_sigma_m: f64,
    pub off_block: f64,
}

impl CanonicalResiduals {
    pub fn max(&self) -> f64 {
        self.q_q_inv.max(self.m_gamma).max(self.lambda_sigma_m).max(self.off_block)
    }
}

pub fn canonical_residuals(problem: &LimitProblem, cf: &CanonicalForm) -> CanonicalResiduals {
    let (k, p) = (problem.k(), problem.p());
    let amax = |m: DMatrix<f64>| if m.is_empty() { 0.0 } else { m.amax() };
    let qsq = &cf.q * &problem.sigma * cf.q.transpose();
    CanonicalResiduals {
        q_q_inv: amax(&cf.q * &cf.q_inv - DMatrix::identity(k, k)),
        m_gamma: amax(&cf.m * &problem.gamma),
        lambda_sigma_m: amax(&cf.lambda * &problem.sigma * cf.m.transpose()),
        off_block: amax(qsq.view((0, p), (p, k - p)).into_owned()),
    }
}

impl CanonicalForm {
    pub fn z(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * y
    }

    /// `v_Omega = -(M Sigma M')^{-1} M Sigma q` for the direction `q` of a weight.
    pub fn v_of_q(&self, sigma: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
        -(&self.sigma_star_z_inv * (&self.m * accurate_mul_vec(sigma, q)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitEstimate {
    pub phi: DVector<f64>,
    pub theta: f64,
    pub var_theta: f64,
    /// `Omega Gamma (Gamma' Omega Gamma)^{-1} h`, so that `theta = -q'Y`.
    pub q: DVector<f64>,
}

/// `phi_Omega = -(Gamma' W Gamma)^{-1} Gamma' W Y` with its exact variance
/// under the known `Sigma`, computed as the least-squares problem
/// `min |L'(Y + Gamma phi)|` for `W = L L'` by QR, with compensated products.
/// Estimate and variance both refer to the same factored weight, which keeps
/// strongly oblique weights consistent to near working precision.
pub fn phi_hat(problem: &LimitProblem, w: &WeightMatrix, y: &DVector<f64>) -> Result<LimitEstimate> {
    let gamma = &problem.gamma;
    let p = problem.p();
    if w.k() != problem.k() || y.len() != problem.k() {
        return Err(GmmError::Dimension(format!(
            "weight {}x{} and Y {} for k = {}",
            w.k(),
            w.k(),
            y.len(),
            problem.k()
        )));
    }
    let l = w
        .values()
        .clone()
        .cholesky()
        .ok_or(GmmError::NotPositiveDefinite { eig_min: w.eig_min() })?
        .l();
    let lt = l.transpose();
    let a = accurate_mul(&lt, gamma);
    let qr = a.qr();
    let (qa, ra) = (qr.q(), qr.r());
    let sv = ra.clone().svd(false, false).singular_values;
    let cond = (sv.max() / sv.min()).powi(2);
    if !(cond <= SINGULAR_COND) {
        return Err(GmmError::Rank {
            what: "Gamma' W Gamma".into(),
            cond,
        });
    }
    let b = accurate_mul_vec(&qa.transpose(), &accurate_mul_vec(&lt, y));
    let phi = -ra.solve_upper_triangular(&b).expect("checked nonsingular");
    let theta = accurate_dot(&problem.h, &phi);
    let z = ra.transpose().solve_lower_triangular(&problem.h).expect("checked nonsingular");
    let q = accurate_mul_vec(&l, &accurate_mul_vec(&qa, &z));
    let var_theta = accurate_quad(&problem.sigma, &q);
    debug_assert_eq!(phi.len(), p);
    Ok(LimitEstimate {
        phi,
        theta,
        var_theta,
        q,
    })
}

/// Both computations of the J analog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JAnalog {
    /// `(Y + Gamma u)' Sigma^{-1} (Y + Gamma u)` at the efficient `u`.
    pub quadratic: f64,
    /// `Z' (M Sigma M')^{-1} Z`.
    pub z_norm: f64,
}

impl JAnalog {
    pub fn value(&self) -> f64 {
        self.quadratic
    }
}

pub fn j_analog(problem: &LimitProblem, y: &DVector<f64>) -> Result<JAnalog> {
    let cf = canonical_form(problem)?;
    j_analog_with(problem, &cf, y)
}

pub fn j_analog_with(problem: &LimitProblem, cf: &CanonicalForm, y: &DVector<f64>) -> Result<JAnalog> {
    let sigma_inv = problem.sigma_inverse()?;
    let eff = phi_hat(problem, &sigma_inv, y)?;
    let resid = y + accurate_mul_vec(&problem.gamma, &eff.phi);
    let quadratic = accurate_quad(sigma_inv.values(), &resid).max(0.0);
    let z = cf.z(y);
    let z_norm = if z.is_empty() {
        0.0
    } else {
        accurate_quad(&cf.sigma_star_z_inv, &z).max(0.0)
    };
    if (quadratic - z_norm).abs() > 1e-8 * quadratic.max(1.0) {
        return Err(GmmError::Construction(format!(
            "J analog mismatch: quadratic form {quadratic} vs Z norm {z_norm}"
        )));
    }
    Ok(JAnalog { quadratic, z_norm })
}

fn direction_tolerance(gamma: &DMatrix<f64>, q: &DVector<f64>) -> f64 {
    1e-10 * (q.norm() * gamma.norm()).max(1.0)
}

/// Positive-definite `Omega` with `Omega Gamma (Gamma' Omega Gamma)^{-1} h = q`
/// for any `q` with `Gamma' q = h`:
/// `Gamma Gamma' + a (u w' + w u') + b w^ w^' + P_V`, where `u` is the
/// least-squares direction, `w = q - u`, `w^ = w / |w|`,
/// `a = 1 / (h' (Gamma'Gamma)^{-2} h)`, `b = 2 a |w|^2 + 1` and `V` spans the
/// rest of the space.
pub fn weight_for_direction(gamma: &DMatrix<f64>, h: &DVector<f64>, q: &DVector<f64>) -> Result<WeightMatrix> {
    let (k, p) = gamma.shape();
    if h.len() != p || q.len() != k {
        return Err(GmmError::Dimension(format!(
            "Gamma {k}x{p}, h {}, q {}",
            h.len(),
            q.len()
        )));
    }
    if h.amax() == 0.0 {
        return Err(GmmError::InvalidArgument("h must be nonzero".into()));
    }
    let residual = (gamma.transpose() * q - h).amax();
    if residual > direction_tolerance(gamma, q) {
        return Err(GmmError::Direction { residual });
    }
    let gtg_inv = general_inverse(&(gamma.transpose() * gamma), "Gamma'Gamma")?;
    let g2h = &gtg_inv * h;
    let u = gamma * &g2h;
    let a = 1.0 / (&gtg_inv * h).norm_squared();
    let mut w = q - &u;
    // remove any numerical component along range(Gamma)
    let back = gamma * (&gtg_inv * (gamma.transpose() * &w));
    w -= back;
    let w_norm = w.norm();

    let mut omega = gamma * gamma.transpose();
    if w_norm <= 1e-14 * u.norm().max(1.0) {
        let n = left_null_basis(gamma);
        omega += &n * n.transpose();
    } else {
        let w_hat = &w / w_norm;
        let cross = &u * w.transpose();
        omega += (&cross + cross.transpose()) * a;
        omega += &w_hat * w_hat.transpose() * (2.0 * a * w_norm * w_norm + 1.0);
        let mut span = DMatrix::zeros(k, p + 1);
        span.view_mut((0, 0), (k, p)).copy_from(gamma);
        span.set_column(p, &w_hat);
        let v = left_null_basis(&span);
        omega += &v * v.transpose();
    }
    WeightMatrix::new(symmetrize(&omega))
}

/// Direction `q` (with `Gamma' q = h`) whose weight has `v_Omega = v`:
/// `q = u + N b` with `N` a basis of `null(Gamma')` and
/// `(M Sigma N) b = -(M Sigma M') v - M Sigma u`.
pub fn direction_for_v(problem: &LimitProblem, cf: &CanonicalForm, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (k, p) = (problem.k(), problem.p());
    if v.len() != k - p {
        return Err(GmmError::Dimension(format!("v has length {}, need {}", v.len(), k - p)));
    }
    let gamma = &problem.gamma;
    let gtg_inv = general_inverse(&(gamma.transpose() * gamma), "Gamma'Gamma")?;
    let u = gamma * (gtg_inv * &problem.h);
    if k == p {
        return Ok(u);
    }
    let n = left_null_basis(gamma);
    let ms = &cf.m * &problem.sigma;
    let a = &ms * &n;
    let rhs = -(&cf.sigma_star_z * v) - &ms * &u;
    let b = general_inverse(&a, "M Sigma N")? * rhs;
    Ok(u + n * b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactInterval {
    pub interval: Interval,
    pub theta_eff: f64,
    /// `sigma_eff^2 = h' (Gamma' Sigma^{-1} Gamma)^{-1} h`.
    pub sigma_eff: f64,
    pub j: f64,
    pub tau: f64,
    /// Weights attaining the lower and upper endpoints.
    pub endpoint_weights: [WeightMatrix; 2],
    /// Estimates the endpoint weights produce.
    pub endpoint_estimates: [LimitEstimate; 2],
}

/// Tolerance for the constructive endpoint weights reproducing the endpoints.
pub const ENDPOINT_TOL: f64 = 1e-8;

/// Weight attaining `theta_eff + s tau sigma_eff sqrt(J)` with variance
/// `(1 + tau^2) sigma_eff^2`, for `s = +-1`: `v = s c (M Sigma M')^{-1} Z`,
/// `c^2 = tau^2 sigma_eff^2 / J`. Requires `J > 0`.
pub fn extremal_weight(
    problem: &LimitProblem,
    cf: &CanonicalForm,
    y: &DVector<f64>,
    j: f64,
    tau: f64,
    sign: f64,
) -> Result<WeightMatrix> {
    if !(j > 0.0) {
        return Err(GmmError::InvalidArgument("extremal weights need J > 0".into()));
    }
    let sigma_eff = cf.sigma_star_phi_var(&problem.h).sqrt();
    let c = tau * sigma_eff / j.sqrt();
    let v = &cf.sigma_star_z_inv * cf.z(y) * (sign * c);
    let q = direction_for_v(problem, cf, &v)?;
    weight_for_direction(&problem.gamma, &problem.h, &q)
}

impl CanonicalForm {
    /// `h' Sigma*_phi h`, the efficient variance of `h' phi`.
    pub fn sigma_star_phi_var(&self, h: &DVector<f64>) -> f64 {
        accurate_quad(&self.sigma_star_phi, h).max(0.0)
    }
}

/// `[theta_eff -+ tau sigma_eff sqrt(J)]` with weights attaining both endpoints.
pub fn exact_interval(problem: &LimitProblem, y: &DVector<f64>, tau: f64) -> Result<ExactInterval> {
    if !(tau >= 0.0) {
        return Err(GmmError::InvalidArgument(format!("tau {tau} must be >= 0")));
    }
    let cf = canonical_form(problem)?;
    let sigma_inv = problem.sigma_inverse()?;
    let eff = phi_hat(problem, &sigma_inv, y)?;
    let sigma_eff = cf.sigma_star_phi_var(&problem.h).sqrt();
    let j = j_analog_with(problem, &cf, y)?.value();
    let radius = tau * sigma_eff * j.sqrt();
    let interval = Interval::new(eff.theta - radius, eff.theta + radius)?;
    if j <= 0.0 || tau == 0.0 {
        return Ok(ExactInterval {
            interval,
            theta_eff: eff.theta,
            sigma_eff,
            j,
            tau,
            endpoint_weights: [sigma_inv.clone(), sigma_inv],
            endpoint_estimates: [eff.clone(), eff.clone()],
        });
    }
    let lo_w = extremal_weight(problem, &cf, y, j, tau, -1.0)?;
    let hi_w = extremal_weight(problem, &cf, y, j, tau, 1.0)?;
    let lo_e = phi_hat(problem, &lo_w, y)?;
    let hi_e = phi_hat(problem, &hi_w, y)?;
    for (est, target) in [(&lo_e, interval.lo), (&hi_e, interval.hi)] {
        let err = (est.theta - target).abs();
        if err > ENDPOINT_TOL * target.abs().max(1.0) {
            return Err(GmmError::Construction(format!(
                "endpoint weight gives {} instead of {target} (error {err:e})",
                est.theta
            )));
        }
    }
    Ok(ExactInterval {
        interval,
        theta_eff: eff.theta,
        sigma_eff,
        j,
        tau,
        endpoint_weights: [lo_w, hi_w],
        endpoint_estimates: [lo_e, hi_e],
    })
}

/// Outcome of brute-force verification of the attainable-set result on one
/// instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttainableCheck {
    pub interval: Interval,
    /// Random weights meeting the variance bound.
    pub accepted: usize,
    /// Largest distance of an accepted estimate outside the interval.
    pub max_excess: f64,
    /// Largest endpoint reproduction error of the constructive weights.
    pub endpoint_error: f64,
}

/// Kappa of the brute-force weight oracle, standing in for "all weights".
pub const ORACLE_KAPPA: f64 = 1e6;

pub fn check_attainable(
    problem: &LimitProblem,
    y: &DVector<f64>,
    tau: f64,
    n_weights: usize,
    rng: &mut Rng,
) -> Result<AttainableCheck> {
    let exact = exact_interval(problem, y, tau)?;
    let bound = (1.0 + tau * tau) * exact.sigma_eff * exact.sigma_eff;
    let mut accepted = 0;
    let mut max_excess: f64 = 0.0;
    for _ in 0..n_weights {
        let w = random_weight(problem.k(), ORACLE_KAPPA, rng);
        let est = match phi_hat(problem, &w, y) {
            Ok(e) => e,
            Err(GmmError::Rank { .. }) => continue,
            Err(e) => return Err(e),
        };
        if est.var_theta <= bound {
            accepted += 1;
            max_excess = max_excess.max(exact.interval.distance(est.theta));
        }
    }
    let endpoint_error = (exact.endpoint_estimates[0].theta - exact.interval.lo)
        .abs()
        .max((exact.endpoint_estimates[1].theta - exact.interval.hi).abs());
    Ok(AttainableCheck {
        interval: exact.interval,
        accepted,
        max_excess,
        endpoint_error,
    })
}

/// Cost ladder for the weights approaching the supremum of |t|.
pub const T_LADDER: [f64; 7] = [0.5, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5];

/// Estimates and standard deviations for the extremal-weight ladder plus
/// `n_random` oracle weights.
pub fn weight_set_points(
    problem: &LimitProblem,
    y: &DVector<f64>,
    n_random: usize,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    let cf = canonical_form(problem)?;
    let j = j_analog_with(problem, &cf, y)?.value();
    let mut weights = vec![problem.sigma_inverse()?];
    if j > 0.0 {
        for tau in T_LADDER {
            for sign in [-1.0, 1.0] {
                weights.push(extremal_weight(problem, &cf, y, j, tau, sign)?);
            }
        }
    }
    for _ in 0..n_random {
        weights.push(random_weight(problem.k(), ORACLE_KAPPA, rng));
    }
    let mut points = Vec::with_capacity(weights.len());
    for w in &weights {
        match phi_hat(problem, w, y) {
            Ok(e) => points.push((e.theta, e.var_theta.sqrt())),
            Err(GmmError::Rank { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(points)
}

/// Exact t-statistic and confidence-set results on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TStatCheck {
    pub sqrt_j: f64,
    pub theta_eff: f64,
    pub min_max_t: f64,
    pub min_max_theta0: f64,
    pub c_star: f64,
    pub cs_point: f64,
}

pub fn check_tstat(problem: &LimitProblem, y: &DVector<f64>, n_random: usize, rng: &mut Rng) -> Result<TStatCheck> {
    let points = weight_set_points(problem, y, n_random, rng)?;
    let j = j_analog(problem, y)?.value();
    let eff = phi_hat(problem, &problem.sigma_inverse()?, y)?;
    let (min_max_t, min_max_theta0) = min_max_t_points(&points)?;
    let (c_star, cs_point) = cs_intersection(&points)?;
    Ok(TStatCheck {
        sqrt_j: j.sqrt(),
        theta_eff: eff.theta,
        min_max_t,
        min_max_theta0,
        c_star,
        cs_point,
    })
}

/// `|v - v_Omega(weight_for_direction(q(v)))|` for a target `v`.
pub fn surjectivity_residual(problem: &LimitProblem, cf: &CanonicalForm, v: &DVector<f64>) -> Result<f64> {
    let q = direction_for_v(problem, cf, v)?;
    let w = weight_for_direction(&problem.gamma, &problem.h, &q)?;
    let y = DVector::zeros(problem.k());
    let est = phi_hat(problem, &w, &y)?;
    let back = cf.v_of_q(&problem.sigma, &est.q);
    Ok(if v.is_empty() { 0.0 } else { (back - v).amax() })
}
