//! Conventional and misspecification-robust covariance estimates, the
//! J-statistic, and nonparametric bootstrap inference.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmmError, Result};
use crate::estimation::{fit, minimize_criterion, FitStrategy, GmmFit, OptimizerSettings};
use crate::linalg::{general_inverse, mean, quantile_sorted, ridge_inverse, sym_condition, symmetrize, SINGULAR_COND};
use crate::moments::{fd_step, mean_jacobian, moment_matrix, sample_moments, Dataset, MomentModel};
use crate::rng::sub_rng;
use crate::weights::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovFlavor {
    Conventional,
    Robust,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    /// Covariance of `psi_hat` (already divided by n).
    pub cov_psi: DMatrix<f64>,
    /// Delta-method standard error of `theta_hat`.
    pub se_theta: f64,
    pub flavor: CovFlavor,
    pub bread: DMatrix<f64>,
    pub meat: DMatrix<f64>,
}

fn delta_se(cov: &DMatrix<f64>, h: &DVector<f64>) -> f64 {
    (h.transpose() * cov * h)[(0, 0)].max(0.0).sqrt()
}

/// `(G'WG)^{-1} G'W S W G (G'WG)^{-1} / n` at the fitted values.
pub fn conventional_cov(fit: &GmmFit) -> Result<CovEstimate> {
    let gamma = &fit.stats.gamma_hat;
    let w = fit.weight.values();
    let gw = gamma.transpose() * w;
    let bread = symmetrize(&(&gw * gamma));
    let cond = sym_condition(&bread);
    if !(cond <= SINGULAR_COND) {
        return Err(GmmError::Rank {
            what: "G'WG".into(),
            cond,
        });
    }
    let bread_inv = general_inverse(&bread, "G'WG")?;
    let meat = symmetrize(&(&gw * &fit.stats.sigma_hat * gw.transpose()));
    let cov_psi = symmetrize(&(&bread_inv * &meat * &bread_inv / fit.n as f64));
    Ok(CovEstimate {
        se_theta: delta_se(&cov_psi, &fit.target_grad),
        cov_psi,
        flavor: CovFlavor::Conventional,
        bread,
        meat,
    })
}

/// Gradient of `0.5 g_bar' W g_bar`.
fn half_criterion_grad(model: &MomentModel, data: &Dataset, w: &DMatrix<f64>, psi: &[f64]) -> Result<DVector<f64>> {
    let g = sample_moments(model, data, psi)?;
    let gamma = mean_jacobian(model, data, psi)?;
    Ok(gamma.transpose() * w * g)
}

/// Hessian of `0.5 g_bar' W g_bar` by central differences of its gradient.
pub fn criterion_hessian(model: &MomentModel, data: &Dataset, w: &DMatrix<f64>, psi: &[f64]) -> Result<DMatrix<f64>> {
    let p = psi.len();
    let mut hess = DMatrix::zeros(p, p);
    let mut work = psi.to_vec();
    for j in 0..p {
        let h = fd_step(psi[j]);
        work[j] = psi[j] + h;
        let up = half_criterion_grad(model, data, w, &work)?;
        work[j] = psi[j] - h;
        let down = half_criterion_grad(model, data, w, &work)?;
        work[j] = psi[j];
        hess.set_column(j, &((up - down) / (2.0 * h)));
    }
    Ok(symmetrize(&hess))
}

/// Sandwich covariance valid when the moments do not average to zero at the
/// estimate. The bread is the full Hessian of the half criterion; the meat is
/// the outer product of the per-observation scores
/// `G'W(g_i - g_bar) + (dg_i - G)' W g_bar`.
pub fn robust_cov(fit: &GmmFit, model: &MomentModel, data: &Dataset) -> Result<CovEstimate> {
    if !fit.diagnostics.converged {
        return Err(GmmError::InvalidArgument("robust covariance needs a converged fit".into()));
    }
    let (k, p) = (model.k(), model.p());
    let w = fit.weight.values();
    let psi = &fit.psi_hat;
    let bread = criterion_hessian(model, data, w, psi)?;
    let bread_inv = general_inverse(&bread, "criterion Hessian")?;

    let gamma = &fit.stats.gamma_hat;
    let g_bar = &fit.stats.g_bar;
    let gw = gamma.transpose() * w;
    let w_gbar = w * g_bar;
    let g = moment_matrix(model, data, psi)?;
    let mut jac = DMatrix::zeros(k, p);
    let mut meat = DMatrix::zeros(p, p);
    let mut centered = DVector::zeros(k);
    for (i, row) in data.rows().enumerate() {
        model.jacobian_at(row, psi, &mut jac);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::Evaluation {
                row: i,
                detail: "non-finite Jacobian".into(),
            });
        }
        for j in 0..k {
            centered[j] = g[(i, j)] - g_bar[j];
        }
        let score = &gw * &centered + (&jac - gamma).transpose() * &w_gbar;
        meat += &score * score.transpose();
    }
    meat /= data.n() as f64;
    let meat = symmetrize(&meat);
    let cov_psi = symmetrize(&(&bread_inv * &meat * &bread_inv / fit.n as f64));
    Ok(CovEstimate {
        se_theta: delta_se(&cov_psi, &fit.target_grad),
        cov_psi,
        flavor: CovFlavor::Robust,
        bread,
        meat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JStatistic {
    pub j: f64,
    /// Degrees of overidentification `k - p`.
    pub df: usize,
    pub psi: Vec<f64>,
    /// Covariance whose inverse weights the criterion.
    pub sigma_used: DMatrix<f64>,
    pub ridge_repaired: bool,
    /// The two-step efficient fit the statistic comes from.
    pub fit: GmmFit,
}

/// `min_psi n g_bar' S^{-1} g_bar` with `S` the moment covariance used for the
/// final-round weight of the two-step efficient fit.
pub fn j_statistic(model: &MomentModel, data: &Dataset, settings: &OptimizerSettings) -> Result<JStatistic> {
    let fit = fit(model, data, &FitStrategy::two_step().with_optimizer(settings.clone()))?;
    let sigma_used = general_inverse(fit.weight.values(), "efficient weight")?;
    Ok(JStatistic {
        j: fit.criterion.max(0.0),
        df: model.k() - model.p(),
        psi: fit.psi_hat.clone(),
        sigma_used: symmetrize(&sigma_used),
        ridge_repaired: fit.diagnostics.ridge_repaired,
        fit,
    })
}

/// J-type statistic for a supplied moment covariance: the minimized
/// `n g_bar' sigma^{-1} g_bar` and its minimizer.
pub fn j_with_sigma(
    model: &MomentModel,
    data: &Dataset,
    sigma: &DMatrix<f64>,
    settings: &OptimizerSettings,
) -> Result<(f64, Vec<f64>, bool)> {
    let (inv, ridged) = ridge_inverse(sigma);
    let w = WeightMatrix::new(inv)?;
    let min = minimize_criterion(model, data, &w, settings)?;
    Ok((min.criterion.max(0.0), min.psi, ridged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapScheme {
    /// iid row resampling with the original moment function.
    Plain,
    /// Moments shifted by the original-sample mean at the original estimate,
    /// so the bootstrap world satisfies the moment restrictions.
    Recentered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub theta_hat: f64,
    /// Replicate estimates in replicate order, failures excluded.
    pub draws: Vec<f64>,
    pub se: f64,
    /// `None` when fewer than 100 replicates were requested.
    pub percentile_ci: Option<(f64, f64)>,
    pub alpha: f64,
    pub scheme: BootstrapScheme,
    pub seed: u64,
    pub replicates: usize,
    pub failures: usize,
    pub failure_log: Vec<String>,
}

/// Largest tolerated share of failed replicates.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.05;

/// Percentile bootstrap for the target of a GMM fit. Replicate `r` draws its
/// rows from stream `r` of `seed`, so results do not depend on scheduling.
pub fn bootstrap(
    model: &MomentModel,
    data: &Dataset,
    strategy: &FitStrategy,
    replicates: usize,
    alpha: f64,
    scheme: BootstrapScheme,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates == 0 {
        return Err(GmmError::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GmmError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let original = fit(model, data, strategy)?;
    let boot_model = match scheme {
        BootstrapScheme::Plain => model.clone(),
        BootstrapScheme::Recentered => model.recentered(&original.stats.g_bar)?,
    };
    let mut rep_strategy = strategy.clone();
    rep_strategy.optimizer.init = Some(original.psi_hat.clone());
    let n = data.n();
    let outcomes: Vec<std::result::Result<f64, String>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = sub_rng(seed, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.select_rows(&idx);
            fit(&boot_model, &sample, &rep_strategy)
                .map(|f| f.theta_hat)
                .map_err(|e| format!("replicate {r}: {e}"))
        })
        .collect();
    let mut draws = Vec::with_capacity(replicates);
    let mut failure_log = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => draws.push(t),
            Err(e) => failure_log.push(e),
        }
    }
    let failures = failure_log.len();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE_RATE * replicates as f64 || draws.is_empty() {
        return Err(GmmError::BootstrapUnstable {
            failures,
            attempted: replicates,
            log: failure_log,
        });
    }
    let m = draws.len() as f64;
    let mean = mean(&draws);
    let se = if draws.len() > 1 {
        (draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let percentile_ci = (replicates >= 100).then(|| {
        let mut sorted = draws.clone();
        sorted.sort_by(f64::total_cmp);
        (
            quantile_sorted(&sorted, alpha / 2.0),
            quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        )
    });
    Ok(BootstrapResult {
        theta_hat: original.theta_hat,
        draws,
        se,
        percentile_ci,
        alpha,
        scheme,
        seed,
        replicates,
        failures,
        failure_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::FitDiagnostics;
    use crate::moments::{linear_iv, mean_square_match, MomentFn, MomentStats};
    use crate::rng::standard_normal;
    use std::sync::Arc;

    fn synthetic_fit(gamma: DMatrix<f64>, sigma: DMatrix<f64>, w: WeightMatrix, n: usize) -> GmmFit {
        let (k, p) = gamma.shape();
        let mut h = DVector::zeros(p);
        h[0] = 1.0;
        GmmFit {
            psi_hat: vec![0.0; p],
            theta_hat: 0.0,
            weight: w,
            stats: MomentStats {
                g_bar: DVector::zeros(k),
                gamma_hat: gamma,
                sigma_hat: sigma,
            },
            criterion: 0.0,
            n,
            target_grad: h,
            strategy: "fixed_weight",
            diagnostics: FitDiagnostics {
                converged: true,
                grad_norm: 0.0,
                iterations: 0,
                rounds: 1,
                iteration_settled: true,
                ridge_repaired: false,
            },
        }
    }

    #[test]
    fn conventional_collapses_for_identity_inputs() {
        let f = synthetic_fit(-DMatrix::identity(3, 3), DMatrix::identity(3, 3), WeightMatrix::identity(3), 100);
        let c = conventional_cov(&f).unwrap();
        assert!((c.cov_psi - DMatrix::<f64>::identity(3, 3) / 100.0).amax() < 1e-16);
        assert!((c.se_theta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn conventional_with_efficient_weight_simplifies() {
        let gamma = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 1.0, 0.3, 0.7]);
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.5]);
        let w = WeightMatrix::new(sigma.clone().try_inverse().unwrap()).unwrap();
        let f = synthetic_fit(gamma.clone(), sigma.clone(), w.clone(), 250);
        let c = conventional_cov(&f).unwrap();
        let expected = (gamma.transpose() * w.values() * &gamma).try_inverse().unwrap() / 250.0;
        assert!((c.cov_psi - expected).amax() < 1e-14);
    }

    #[test]
    fn singular_bread_is_rank_error() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = synthetic_fit(gamma, DMatrix::identity(2, 2), WeightMatrix::identity(2), 10);
        assert!(matches!(conventional_cov(&f), Err(GmmError::Rank { .. })));
    }

    fn iv_dataset(n: usize, seed: u64, het: bool) -> Dataset {
        let mut rng = sub_rng(seed, 0);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let z1 = standard_normal(&mut rng);
            let z2 = standard_normal(&mut rng);
            let v = standard_normal(&mut rng);
            let e = 0.5 * v + standard_normal(&mut rng) * if het { 0.5 + z1.abs() } else { 1.0 };
            let w = 1.0 + 0.8 * z1 + 0.5 * z2 + v;
            let y = 0.5 + 1.5 * w + e;
            rows.push(vec![y, 1.0, w, z1, z2]);
        }
        Dataset::new(
            ["y", "one", "w", "z1", "z2"].iter().map(|s| s.to_string()).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn just_identified_iv_matches_direct_sandwich() {
        let data = iv_dataset(50, 4, true);
        let model = linear_iv(0, vec![1, 2], vec![1, 3]).unwrap();
        let f = fit(&model, &data, &FitStrategy::fixed(WeightMatrix::identity(2))).unwrap();
        let conv = conventional_cov(&f).unwrap();

        // direct IV oracle: b = (Z'X)^{-1} Z'y, V = (Z'X)^{-1} (sum e^2 z z') (X'Z)^{-1}
        let n = data.n();
        let mut zx: DMatrix<f64> = DMatrix::zeros(2, 2);
        let mut zy: DVector<f64> = DVector::zeros(2);
        for r in data.rows() {
            let z = [r[1], r[3]];
            let x = [r[1], r[2]];
            for a in 0..2 {
                zy[a] += z[a] * r[0];
                for b in 0..2 {
                    zx[(a, b)] += z[a] * x[b];
                }
            }
        }
        let zx_inv = zx.clone().try_inverse().unwrap();
        let b: DVector<f64> = &zx_inv * zy;
        let mut s: DMatrix<f64> = DMatrix::zeros(2, 2);
        for r in data.rows() {
            let e = r[0] - b[0] * r[1] - b[1] * r[2];
            let z = DVector::from_vec(vec![r[1], r[3]]);
            s += &z * z.transpose() * (e * e);
        }
        let v = &zx_inv * s * zx_inv.transpose();
        assert!((b[0] - f.psi_hat[0]).abs() < 1e-10);
        assert!((v.clone() - &conv.cov_psi).amax() < 1e-10 * v.amax());
        let _ = n;
    }

    #[test]
    fn robust_equals_conventional_when_just_identified() {
        let data = iv_dataset(80, 9, true);
        let model = linear_iv(0, vec![1, 2], vec![1, 4]).unwrap();
        let f = fit(&model, &data, &FitStrategy::two_step()).unwrap();
        let conv = conventional_cov(&f).unwrap();
        let rob = robust_cov(&f, &model, &data).unwrap();
        assert!((&conv.cov_psi - &rob.cov_psi).amax() <= 1e-6 * conv.cov_psi.amax());
    }

    #[test]
    fn ols_moments_match_hc0() {
        let mut rng = sub_rng(17, 3);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let x = standard_normal(&mut rng);
                let y = 1.0 - 2.0 * x + (0.3 + x * x) * standard_normal(&mut rng);
                vec![y, 1.0, x]
            })
            .collect();
        let data = Dataset::new(vec!["y".into(), "one".into(), "x".into()], rows).unwrap();
        // OLS is IV with the regressors as their own instruments
        let model = linear_iv(0, vec![1, 2], vec![1, 2]).unwrap();
        let f = fit(&model, &data, &FitStrategy::fixed(WeightMatrix::identity(2))).unwrap();
        let rob = robust_cov(&f, &model, &data).unwrap();

        let mut xtx = DMatrix::zeros(2, 2);
        let mut xty = DVector::zeros(2);
        for r in data.rows() {
            let x = DVector::from_vec(vec![r[1], r[2]]);
            xtx += &x * x.transpose();
            xty += &x * r[0];
        }
        let inv = xtx.clone().try_inverse().unwrap();
        let beta = &inv * xty;
        let mut meat = DMatrix::zeros(2, 2);
        for r in data.rows() {
            let x = DVector::from_vec(vec![r[1], r[2]]);
            let e = r[0] - beta.dot(&x);
            meat += &x * x.transpose() * (e * e);
        }
        let hc0 = &inv * meat * &inv;
        assert!((hc0.clone() - &rob.cov_psi).amax() < 1e-8 * hc0.amax());
    }

    #[test]
    fn covariance_invariant_to_weight_scale() {
        let data = iv_dataset(120, 21, true);
        let model = linear_iv(0, vec![1, 2], vec![1, 3, 4]).unwrap();
        let w = WeightMatrix::new(DMatrix::from_row_slice(3, 3, &[2.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 0.5])).unwrap();
        let a = fit(&model, &data, &FitStrategy::fixed(w.clone())).unwrap();
        let b = fit(&model, &data, &FitStrategy::fixed(w.scaled(37.0).unwrap())).unwrap();
        for (ca, cb) in [
            (conventional_cov(&a).unwrap(), conventional_cov(&b).unwrap()),
            (robust_cov(&a, &model, &data).unwrap(), robust_cov(&b, &model, &data).unwrap()),
        ] {
            assert!((ca.se_theta - cb.se_theta).abs() < 1e-8 * ca.se_theta.max(1e-12));
            assert!(relative_asym(&ca.cov_psi) < 1e-12);
            let (lo, _) = crate::linalg::extreme_eigenvalues(&ca.cov_psi);
            assert!(lo >= -1e-10);
        }
    }

    fn relative_asym(m: &DMatrix<f64>) -> f64 {
        crate::linalg::relative_asymmetry(m)
    }

    #[test]
    fn j_zero_when_just_identified() {
        let data = iv_dataset(60, 5, false);
        let model = linear_iv(0, vec![1, 2], vec![1, 3]).unwrap();
        let j = j_statistic(&model, &data, &OptimizerSettings::default()).unwrap();
        assert!(j.j < 1e-8);
        assert_eq!(j.df, 0);
    }

    #[test]
    fn j_for_two_linear_targets() {
        let g: MomentFn = Arc::new(|row: &[f64], psi: &[f64], out: &mut [f64]| {
            out[0] = row[0] - psi[0];
            out[1] = row[1] - psi[0];
        });
        let model = MomentModel::new("two_target", 2, 1, g).unwrap();
        let data = Dataset::new(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0]; 100]).unwrap();
        let (j, psi, _) = j_with_sigma(&model, &data, &DMatrix::identity(2, 2), &OptimizerSettings::default()).unwrap();
        // closed form: min n((1-psi)^2 + (2-psi)^2) = n/2 at psi = 1.5
        assert!((j - 50.0).abs() < 1e-9);
        assert!((psi[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn bootstrap_on_identical_rows_is_degenerate() {
        let data = Dataset::from_column("x", &[1.3; 30]).unwrap();
        let s = FitStrategy::fixed(WeightMatrix::identity(2));
        let b = bootstrap(&mean_square_match(0), &data, &s, 120, 0.05, BootstrapScheme::Plain, 3).unwrap();
        assert_eq!(b.se, 0.0);
        let (lo, hi) = b.percentile_ci.unwrap();
        assert_eq!(lo, b.theta_hat);
        assert_eq!(hi, b.theta_hat);
    }

    #[test]
    fn bootstrap_small_b_has_no_interval() {
        let data = Dataset::from_column("x", &[0.1, 0.9, 1.4, 2.2, 0.6, 1.8]).unwrap();
        let s = FitStrategy::fixed(WeightMatrix::identity(2)).with_optimizer(OptimizerSettings::default().with_multistart(1));
        let b = bootstrap(&mean_square_match(0), &data, &s, 20, 0.05, BootstrapScheme::Plain, 8).unwrap();
        assert!(b.percentile_ci.is_none());
        assert_eq!(b.draws.len() + b.failures, 20);
    }

    #[test]
    fn bootstrap_rejects_bad_alpha() {
        let data = Dataset::from_column("x", &[0.1, 0.9]).unwrap();
        let s = FitStrategy::fixed(WeightMatrix::identity(2));
        assert!(bootstrap(&mean_square_match(0), &data, &s, 10, 1.5, BootstrapScheme::Plain, 8).is_err());
    }
}
