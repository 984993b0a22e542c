//! Sample-level weighting audits: the attainable-estimate interval, searches
//! over eigenvalue-bounded weights, adversarial t-statistics and the
//! confidence-set intersection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmmError, Result};
use crate::estimation::{fit, FitStrategy, GmmFit, OptimizerSettings};
use crate::inference::{conventional_cov, j_statistic, robust_cov};
use crate::limit::{canonical_form, direction_for_v, weight_for_direction, CanonicalForm, LimitProblem};
use crate::linalg::{general_inverse, sym_sqrt_pair, symmetrize};
use crate::moments::{Dataset, MomentModel};
use crate::rng::sub_rng;
use crate::weights::{random_weight, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(GmmError::InvalidArgument(format!("interval [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn radius(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    /// Distance from `x` to the interval (zero inside).
    pub fn distance(&self, x: f64) -> f64 {
        (self.lo - x).max(x - self.hi).max(0.0)
    }

    /// Smallest interval containing all values; `None` for no values.
    pub fn hull(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        values.into_iter().fold(None, |acc, x| match acc {
            None => Some(Self::point(x)),
            Some(iv) => Some(Self {
                lo: iv.lo.min(x),
                hi: iv.hi.max(x),
            }),
        })
    }
}

/// `[theta_eff -+ tau sqrt(J) se_eff]`. Negative inputs are treated as zero.
pub fn attainable_interval(theta_eff: f64, se_eff: f64, j: f64, tau: f64) -> Interval {
    let radius = tau.max(0.0) * j.max(0.0).sqrt() * se_eff.max(0.0);
    Interval {
        lo: theta_eff - radius,
        hi: theta_eff + radius,
    }
}

/// Hausdorff distance between two closed intervals.
pub fn hausdorff(a: &Interval, b: &Interval) -> f64 {
    (a.lo - b.lo).abs().max((a.hi - b.hi).abs())
}

fn check_points(points: &[(f64, f64)]) -> Result<()> {
    if points.is_empty() {
        return Err(GmmError::InvalidArgument("no points".into()));
    }
    if let Some(&(t, s)) = points.iter().find(|(t, s)| !(*s > 0.0) || !t.is_finite() || !s.is_finite()) {
        return Err(GmmError::InvalidArgument(format!(
            "point ({t}, {s}) needs a finite estimate and positive standard error"
        )));
    }
    Ok(())
}

/// `max_i |theta_i - theta0| / s_i` and the maximizing index.
pub fn max_abs_t(points: &[(f64, f64)], theta0: f64) -> (f64, usize) {
    points
        .iter()
        .enumerate()
        .map(|(i, (t, s))| ((t - theta0).abs() / s, i))
        .fold((f64::NEG_INFINITY, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Smallest `c` for which all intervals `theta_i -+ c s_i` intersect, and the
/// intersection point at that `c`.
pub fn cs_intersection(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    check_points(points)?;
    let gap = |c: f64| {
        let (mut upper_lo, mut lower_hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut i_max, mut j_min) = (0, 0);
        for (idx, &(t, s)) in points.iter().enumerate() {
            if t - c * s > upper_lo {
                upper_lo = t - c * s;
                i_max = idx;
            }
            if t + c * s < lower_hi {
                lower_hi = t + c * s;
                j_min = idx;
            }
        }
        (upper_lo - lower_hi, i_max, j_min)
    };
    let (g0, i0, j0) = gap(0.0);
    if g0 <= 0.0 {
        return Ok((0.0, points[i0].0));
    }
    let s_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, g0 / s_min);
    let (mut cand_i, mut cand_j) = (vec![i0], vec![j0]);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-12 * hi {
            break;
        }
        let (g, i, j) = gap(mid);
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        cand_i = vec![i];
        cand_j = vec![j];
    }
    for c in [lo, hi] {
        let (_, i, j) = gap(c);
        cand_i.push(i);
        cand_j.push(j);
    }
    // the optimum is attained by an active pair: c = (t_i - t_j) / (s_i + s_j)
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &i in &cand_i {
        for &j in &cand_j {
            let (ti, si) = points[i];
            let (tj, sj) = points[j];
            let c = (ti - tj) / (si + sj);
            if c > best.0 {
                best = (c, (ti * sj + tj * si) / (si + sj));
            }
        }
    }
    Ok((best.0.max(0.0), best.1))
}

/// `min over theta0 of max_i |theta_i - theta0| / s_i`: grid then
/// golden-section search over the (convex) objective, polished with the
/// confidence-set intersection point.
pub fn min_max_t_points(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    check_points(points)?;
    let f = |x: f64| max_abs_t(points, x).0;
    let lo0 = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi0 = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if lo0 == hi0 {
        return Ok((0.0, lo0));
    }
    let grid: usize = 64;
    let step = (hi0 - lo0) / grid as f64;
    let best_i = (0..=grid)
        .map(|i| (f(lo0 + i as f64 * step), i))
        .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b })
        .1;
    let mut a = lo0 + best_i.saturating_sub(1) as f64 * step;
    let mut b = (lo0 + (best_i + 1) as f64 * step).min(hi0);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if b - a <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
    }
    let mut best = if f1 <= f2 { (f1, x1) } else { (f2, x2) };
    let (_, cs_point) = cs_intersection(points)?;
    let at_cs = f(cs_point);
    if at_cs < best.0 {
        best = (at_cs, cs_point);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointSource {
    /// The efficient weight of the reference fit.
    Efficient,
    /// Random member of the bounded class.
    Random,
    /// Constructive weight pushed toward an endpoint at cost `tau`.
    Extremal { tau: f64, sign: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub theta: f64,
    pub se: f64,
    /// Smallest kappa of the class containing the weight used.
    pub kappa_omega: f64,
    pub source: PointSource,
    /// Weight in the bounded class and variance within `(1 + tau^2) se_eff^2`.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSettings {
    pub kappa: f64,
    pub tau: f64,
    pub n_draws: usize,
    pub seed: u64,
    /// Settings for the efficient fit; weight refits start from its estimate.
    pub optimizer: OptimizerSettings,
    /// Multistart count for each weight refit.
    pub refit_multistart: usize,
    pub robust_se: bool,
    /// Costs of the extra extremal weights used in t-statistic searches.
    pub t_ladder: Vec<f64>,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            kappa: 100.0,
            tau: 0.5,
            n_draws: 200,
            seed: 0,
            optimizer: OptimizerSettings::default(),
            refit_multistart: 1,
            robust_se: false,
            t_ladder: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

impl AuditSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 1.0) {
            return Err(GmmError::InvalidArgument(format!("kappa {} must be >= 1", self.kappa)));
        }
        if !(self.tau >= 0.0) {
            return Err(GmmError::InvalidArgument(format!("tau {} must be >= 0", self.tau)));
        }
        if self.refit_multistart == 0 {
            return Err(GmmError::InvalidArgument("refit_multistart must be >= 1".into()));
        }
        Ok(())
    }
}

/// Efficient reference fit and the plug-in limit problem in whitened
/// coordinates: `Sigma^{-1/2} Gamma = G R` with orthonormal `G`, `h~ = R^{-T} h`.
#[derive(Debug, Clone)]
pub struct AuditBasis {
    pub efficient: GmmFit,
    pub j: f64,
    pub df: usize,
    pub se_eff: f64,
    pub robust_se: bool,
    sigma_inv_sqrt: DMatrix<f64>,
    whitened: LimitProblem,
    cf: Option<CanonicalForm>,
    y: DVector<f64>,
    limit_scale: f64,
}

impl AuditBasis {
    pub fn new(model: &MomentModel, data: &Dataset, optimizer: &OptimizerSettings, robust_se: bool) -> Result<Self> {
        let js = j_statistic(model, data, optimizer)?;
        let efficient = js.fit;
        let se_eff = if robust_se {
            robust_cov(&efficient, model, data)?.se_theta
        } else {
            conventional_cov(&efficient)?.se_theta
        };
        let (_, sigma_inv_sqrt) = sym_sqrt_pair(&js.sigma_used)?;
        let gt = &sigma_inv_sqrt * &efficient.stats.gamma_hat;
        let qr = gt.qr();
        let (g, r) = (qr.q(), qr.r());
        let h = general_inverse(&r, "whitened Jacobian")?.transpose() * &efficient.target_grad;
        let p = efficient.target_grad.len();
        let k = g.nrows();
        let whitened = LimitProblem::new(g, DMatrix::identity(k, k), h, DVector::zeros(k), DVector::zeros(p))?;
        let y = &sigma_inv_sqrt * &efficient.stats.g_bar * (efficient.n as f64).sqrt();
        let mut cf = None;
        let mut limit_scale = 0.0;
        if js.df > 0 {
            let form = canonical_form(&whitened)?;
            let z = form.z(&y);
            let j_limit = (z.transpose() * &form.sigma_star_z_inv * &z)[(0, 0)];
            if j_limit > 0.0 {
                limit_scale = form.sigma_star_phi_var(&whitened.h).sqrt() / j_limit.sqrt();
                cf = Some(form);
            }
        }
        Ok(Self {
            j: js.j,
            df: js.df,
            efficient,
            se_eff,
            robust_se,
            sigma_inv_sqrt,
            whitened,
            cf,
            y,
            limit_scale,
        })
    }

    pub fn interval(&self, tau: f64) -> Interval {
        attainable_interval(self.efficient.theta_hat, self.se_eff, self.j, tau)
    }

    /// Whether extremal weights exist (overidentified with `J > 0`).
    pub fn has_extremal(&self) -> bool {
        self.cf.is_some()
    }

    /// Constructive weight for direction `sign (M Sigma M')^{-1} Z` at
    /// `scale` times the limit-theory cost `tau`, rescaled to reciprocal
    /// extreme eigenvalues.
    pub fn extremal_weight(&self, tau: f64, sign: f64, scale: f64) -> Result<WeightMatrix> {
        let cf = self
            .cf
            .as_ref()
            .ok_or_else(|| GmmError::InvalidArgument("no extremal weights when J = 0 or k = p".into()))?;
        let c = scale * tau * self.limit_scale * sign;
        let v = &cf.sigma_star_z_inv * cf.z(&self.y) * c;
        let q = direction_for_v(&self.whitened, cf, &v)?;
        let omega_w = weight_for_direction(&self.whitened.gamma, &self.whitened.h, &q)?;
        let omega = symmetrize(&(&self.sigma_inv_sqrt * omega_w.values() * &self.sigma_inv_sqrt));
        Ok(WeightMatrix::new(omega)?.balanced())
    }

    fn refit_settings(&self, base: &OptimizerSettings, multistart: usize) -> OptimizerSettings {
        base.clone()
            .with_init(self.efficient.psi_hat.clone())
            .with_multistart(multistart)
    }
}

/// Estimate and standard error under a fixed weight.
pub fn weighted_estimate(
    model: &MomentModel,
    data: &Dataset,
    w: &WeightMatrix,
    optimizer: &OptimizerSettings,
    robust_se: bool,
) -> Result<(f64, f64)> {
    let f = fit(model, data, &FitStrategy::fixed(w.clone()).with_optimizer(optimizer.clone()))?;
    let se = if robust_se {
        robust_cov(&f, model, data)?.se_theta
    } else {
        conventional_cov(&f)?.se_theta
    };
    Ok((f.theta_hat, se))
}

/// Extremal weight whose refit variance meets `(1 + tau^2) se_eff^2` from
/// below, found by regula falsi (Illinois) on the direction scale.
fn bisect_extremal(
    model: &MomentModel,
    data: &Dataset,
    basis: &AuditBasis,
    tau: f64,
    sign: f64,
    opt: &OptimizerSettings,
) -> Result<(WeightMatrix, f64, f64)> {
    let target = (1.0 + tau * tau) * basis.se_eff * basis.se_eff;
    let eval = |s: f64| -> Result<(WeightMatrix, f64, f64)> {
        let w = basis.extremal_weight(tau, sign, s)?;
        let (t, se) = weighted_estimate(model, data, &w, opt, basis.robust_se)?;
        Ok((w, t, se))
    };
    let mut lo = (0.0, basis.se_eff * basis.se_eff - target);
    let mut lo_fit = None;
    let mut hi_s = 1.0;
    let mut hi_fit = eval(hi_s)?;
    let mut hi = (hi_s, hi_fit.2 * hi_fit.2 - target);
    let mut doublings = 0;
    while hi.1 < 0.0 {
        lo = hi;
        lo_fit = Some(hi_fit);
        hi_s *= 2.0;
        doublings += 1;
        if doublings > 20 {
            return Err(GmmError::Construction("extremal variance never reaches its bound".into()));
        }
        hi_fit = eval(hi_s)?;
        hi = (hi_s, hi_fit.2 * hi_fit.2 - target);
    }
    if hi.1 == 0.0 {
        return Ok(hi_fit);
    }
    // Illinois: halve the retained end's value after two updates on one side
    let mut side = 0i8;
    for _ in 0..60 {
        if hi.0 - lo.0 <= 1e-10 * hi.0 {
            break;
        }
        let mut s = lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1);
        if !(s > lo.0 && s < hi.0) {
            s = 0.5 * (lo.0 + hi.0);
        }
        let cand = eval(s)?;
        let fs = cand.2 * cand.2 - target;
        if fs <= 0.0 {
            lo = (s, fs);
            lo_fit = Some(cand);
            if fs.abs() <= 1e-12 * target {
                break;
            }
            if side == 1 {
                hi.1 *= 0.5;
            }
            side = 1;
        } else {
            hi = (s, fs);
            if side == -1 {
                lo.1 *= 0.5;
            }
            side = -1;
        }
    }
    match lo_fit {
        Some(f) => Ok(f),
        None => eval(lo.0.max(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub j_stat: f64,
    pub df: usize,
    pub theta_eff: f64,
    pub se_eff: f64,
    pub tau: f64,
    pub kappa: f64,
    pub interval: Interval,
    pub sampled_points: Vec<AuditPoint>,
    /// Hull of the accepted estimates.
    pub hull: Option<Interval>,
    /// Hausdorff distance between `interval` and `hull`.
    pub d_h: Option<f64>,
    pub minmax_t: f64,
    pub minmax_theta0: f64,
    pub cs_critical: f64,
    pub cs_point: f64,
    /// Weight refits that failed and were excluded.
    pub failures: usize,
}

/// Point set for searches: efficient weight, `n_draws` random weights with
/// eigenvalues in `[1/kappa, kappa]`, and extremal weights (bisected to the
/// variance bound for `tau`, plus unconstrained ones along `ladder`).
fn collect_points(
    model: &MomentModel,
    data: &Dataset,
    basis: &AuditBasis,
    settings: &AuditSettings,
    tau: Option<f64>,
    ladder: &[f64],
) -> (Vec<(AuditPoint, WeightMatrix)>, usize) {
    let opt = basis.refit_settings(&settings.optimizer, settings.refit_multistart);
    let bound = tau.map(|t| (1.0 + t * t) * basis.se_eff * basis.se_eff);
    let k = model.k();
    let make_point = |w: WeightMatrix, theta: f64, se: f64, source: PointSource| {
        let kappa_omega = w.kappa();
        let in_class = kappa_omega <= settings.kappa * (1.0 + 1e-10);
        let accepted = in_class && bound.map_or(true, |b| se * se <= b);
        (
            AuditPoint {
                theta,
                se,
                kappa_omega,
                source,
                accepted,
            },
            w,
        )
    };

    enum Job {
        Efficient,
        Random(usize),
        Bisect(f64, f64),
        Ladder(f64, f64),
    }
    let mut jobs = vec![Job::Efficient];
    jobs.extend((0..settings.n_draws).map(Job::Random));
    if basis.has_extremal() {
        for sign in [-1.0, 1.0] {
            if let Some(t) = tau.filter(|t| *t > 0.0) {
                jobs.push(Job::Bisect(t, sign));
            }
            for &t in ladder {
                jobs.push(Job::Ladder(t, sign));
            }
        }
    }
    let results: Vec<Result<(AuditPoint, WeightMatrix)>> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Efficient => {
                let w = basis.efficient.weight.balanced();
                let (t, se) = weighted_estimate(model, data, &w, &opt, basis.robust_se)?;
                Ok(make_point(w, t, se, PointSource::Efficient))
            }
            Job::Random(i) => {
                let mut rng = sub_rng(settings.seed, i as u64);
                let w = random_weight(k, settings.kappa, &mut rng);
                let (t, se) = weighted_estimate(model, data, &w, &opt, basis.robust_se)?;
                Ok(make_point(w, t, se, PointSource::Random))
            }
            Job::Bisect(t, sign) => {
                let (w, theta, se) = bisect_extremal(model, data, basis, t, sign, &opt)?;
                Ok(make_point(w, theta, se, PointSource::Extremal { tau: t, sign }))
            }
            Job::Ladder(t, sign) => {
                let w = basis.extremal_weight(t, sign, 1.0)?;
                let (theta, se) = weighted_estimate(model, data, &w, &opt, basis.robust_se)?;
                Ok(make_point(w, theta, se, PointSource::Extremal { tau: t, sign }))
            }
        })
        .collect();
    let mut points = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(p) if p.0.se > 0.0 && p.0.theta.is_finite() => points.push(p),
            _ => failures += 1,
        }
    }
    (points, failures)
}

/// Full audit at one `(kappa, tau)`.
pub fn audit(model: &MomentModel, data: &Dataset, settings: &AuditSettings) -> Result<AuditReport> {
    settings.validate()?;
    let basis = AuditBasis::new(model, data, &settings.optimizer, settings.robust_se)?;
    audit_with_basis(model, data, &basis, settings)
}

pub fn audit_with_basis(
    model: &MomentModel,
    data: &Dataset,
    basis: &AuditBasis,
    settings: &AuditSettings,
) -> Result<AuditReport> {
    settings.validate()?;
    let (points, failures) = collect_points(model, data, basis, settings, Some(settings.tau), &settings.t_ladder);
    let interval = basis.interval(settings.tau);
    // variance-constrained points for the attainable set; every in-class
    // point (including the unconstrained ladder) for the t searches
    let sampled: Vec<AuditPoint> = points
        .iter()
        .filter(|(p, _)| !matches!(p.source, PointSource::Extremal { tau, .. } if tau != settings.tau))
        .map(|(p, _)| p.clone())
        .collect();
    let hull = Interval::hull(sampled.iter().filter(|p| p.accepted).map(|p| p.theta));
    let d_h = hull.as_ref().map(|h| hausdorff(&interval, h));
    let in_class: Vec<(f64, f64)> = points
        .iter()
        .filter(|(p, _)| p.kappa_omega <= settings.kappa * (1.0 + 1e-10))
        .map(|(p, _)| (p.theta, p.se))
        .collect();
    let (minmax_t, minmax_theta0, cs_critical, cs_point) = if in_class.is_empty() {
        (0.0, basis.efficient.theta_hat, 0.0, basis.efficient.theta_hat)
    } else {
        let (v, t0) = min_max_t_points(&in_class)?;
        let (c, pt) = cs_intersection(&in_class)?;
        (v, t0, c, pt)
    };
    Ok(AuditReport {
        j_stat: basis.j,
        df: basis.df,
        theta_eff: basis.efficient.theta_hat,
        se_eff: basis.se_eff,
        tau: settings.tau,
        kappa: settings.kappa,
        interval,
        sampled_points: sampled,
        hull,
        d_h,
        minmax_t,
        minmax_theta0,
        cs_critical,
        cs_point,
        failures,
    })
}

fn default_settings(kappa: f64, n_draws: usize, seed: u64) -> AuditSettings {
    AuditSettings {
        kappa,
        n_draws,
        seed,
        ..AuditSettings::default()
    }
}

/// Estimates from random bounded-class weights plus the extremal weights for
/// `tau`, flagged by whether they satisfy the variance bound.
pub fn sample_attainable(
    model: &MomentModel,
    data: &Dataset,
    kappa: f64,
    tau: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<AuditPoint>> {
    let settings = AuditSettings {
        tau,
        ..default_settings(kappa, n_draws, seed)
    };
    settings.validate()?;
    if n_draws == 0 {
        return Err(GmmError::InvalidArgument("n_draws must be >= 1".into()));
    }
    let basis = AuditBasis::new(model, data, &settings.optimizer, false)?;
    let (points, _) = collect_points(model, data, &basis, &settings, Some(tau), &[]);
    Ok(points.into_iter().map(|(p, _)| p).collect())
}

/// Cached estimates for t-statistic searches; independent of `theta0`.
#[derive(Debug, Clone)]
pub struct WeightCache {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<WeightMatrix>,
    pub failures: usize,
}

pub fn weight_cache(
    model: &MomentModel,
    data: &Dataset,
    kappa: f64,
    budget: usize,
    seed: u64,
) -> Result<WeightCache> {
    let settings = default_settings(kappa, budget, seed);
    settings.validate()?;
    let basis = AuditBasis::new(model, data, &settings.optimizer, false)?;
    weight_cache_with_basis(model, data, &basis, &settings)
}

/// [`weight_cache`] on an existing basis, drawing `settings.n_draws` random
/// weights.
pub fn weight_cache_with_basis(
    model: &MomentModel,
    data: &Dataset,
    basis: &AuditBasis,
    settings: &AuditSettings,
) -> Result<WeightCache> {
    settings.validate()?;
    if settings.n_draws == 0 {
        return Err(GmmError::InvalidArgument("budget must be >= 1".into()));
    }
    let (points, failures) = collect_points(model, data, basis, settings, None, &settings.t_ladder);
    let (points, weights) = points
        .into_iter()
        .filter(|(p, _)| p.accepted)
        .map(|(p, w)| ((p.theta, p.se), w))
        .unzip();
    Ok(WeightCache {
        points,
        weights,
        failures,
    })
}

/// Largest `|theta_Omega - theta0| / se_Omega` found over the extremal and
/// random bounded-class weights, with the weight attaining it.
pub fn adversarial_t(
    model: &MomentModel,
    data: &Dataset,
    theta0: f64,
    kappa: f64,
    budget: usize,
    seed: u64,
) -> Result<(f64, WeightMatrix)> {
    let cache = weight_cache(model, data, kappa, budget, seed)?;
    if cache.points.is_empty() {
        return Err(GmmError::InvalidArgument("no weight in the class produced a fit".into()));
    }
    let (v, i) = max_abs_t(&cache.points, theta0);
    Ok((v, cache.weights[i].clone()))
}

/// `inf over theta0 of sup over weights of |t|` on the cached weight set,
/// with the minimizing `theta0`.
pub fn min_max_t(model: &MomentModel, data: &Dataset, kappa: f64, budget: usize, seed: u64) -> Result<(f64, f64)> {
    let cache = weight_cache(model, data, kappa, budget, seed)?;
    min_max_t_points(&cache.points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{linear_iv_local, normal_mean_square};
    use crate::moments::mean_square_match;

    #[test]
    fn interval_examples() {
        let iv = attainable_interval(0.0, 1.0 / 2f64.sqrt(), 2.0, 1.0);
        assert!((iv.lo + 1.0).abs() < 1e-15 && (iv.hi - 1.0).abs() < 1e-15);
        assert_eq!(attainable_interval(3.0, 2.0, 5.0, 0.0), Interval::point(3.0));
        assert_eq!(attainable_interval(3.0, 2.0, 0.0, 4.0), Interval::point(3.0));
    }

    #[test]
    fn interval_radius_linear_in_tau_and_root_j() {
        for &tau in &[0.1, 0.5, 1.0, 3.0] {
            for &j in &[0.25, 1.0, 4.0, 9.0] {
                let iv = attainable_interval(1.0, 0.3, j, tau);
                assert!((iv.radius() - tau * j.sqrt() * 0.3).abs() < 1e-14);
                assert!((iv.center() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hausdorff_examples() {
        let unit = Interval::new(0.0, 1.0).unwrap();
        assert_eq!(hausdorff(&unit, &unit), 0.0);
        assert_eq!(hausdorff(&unit, &Interval::new(0.5, 2.0).unwrap()), 1.0);
        assert_eq!(hausdorff(&Interval::new(-1.0, 1.0).unwrap(), &Interval::point(0.0)), 1.0);
        assert!(Interval::new(1.0, 0.0).is_err());
    }

    /// Brute-force oracle: `max over pairs of (t_i - t_j) / (s_i + s_j)`.
    fn pair_oracle(points: &[(f64, f64)]) -> f64 {
        let mut best: f64 = 0.0;
        for a in points {
            for b in points {
                best = best.max((a.0 - b.0) / (a.1 + b.1));
            }
        }
        best
    }

    #[test]
    fn cs_intersection_examples() {
        assert_eq!(cs_intersection(&[(2.5, 0.3)]).unwrap(), (0.0, 2.5));
        let (c, pt) = cs_intersection(&[(-1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert!((c - 1.0).abs() < 1e-15 && pt.abs() < 1e-15);
        assert!(cs_intersection(&[]).is_err());
        assert!(cs_intersection(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn min_max_t_equals_cs_critical() {
        let mut rng = sub_rng(3, 3);
        use rand::Rng as _;
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0)))
                .collect();
            let (c, pt) = cs_intersection(&pts).unwrap();
            let oracle = pair_oracle(&pts);
            assert!((c - oracle).abs() <= 1e-12 * oracle.max(1.0));
            assert!(max_abs_t(&pts, pt).0 <= c * (1.0 + 1e-12) + 1e-15);
            let (v, t0) = min_max_t_points(&pts).unwrap();
            assert!((v - c).abs() <= 1e-10 * c.max(1.0));
            assert!(v <= max_abs_t(&pts, t0).0 + 1e-15);
            // never above the objective on a grid
            for i in 0..=100 {
                let x = -5.0 + 0.1 * i as f64;
                assert!(v <= max_abs_t(&pts, x).0 + 1e-12);
            }
        }
    }

    fn sample_iv(n: usize, seed: u64, drift: f64) -> (MomentModel, Dataset) {
        linear_iv_local(n, 4, drift, 0.5, seed)
    }

    #[test]
    fn kappa_one_admits_only_identity() {
        let (model, data) = sample_iv(300, 1, 2.0);
        let pts = sample_attainable(&model, &data, 1.0, 0.5, 5, 2).unwrap();
        let accepted: Vec<&AuditPoint> = pts.iter().filter(|p| p.accepted).collect();
        assert!(!accepted.is_empty());
        let first = accepted[0].theta;
        assert!(accepted.iter().all(|p| p.theta == first && p.source == PointSource::Random));
        let ident = weighted_estimate(&model, &data, &WeightMatrix::identity(4), &OptimizerSettings::default(), false).unwrap();
        assert!((first - ident.0).abs() < 1e-10);
    }

    #[test]
    fn just_identified_points_coincide() {
        let (model, data) = linear_iv_local(200, 1, 0.0, 0.3, 5);
        let pts = sample_attainable(&model, &data, 50.0, 1.0, 20, 1).unwrap();
        let t0 = pts[0].theta;
        for p in pts.iter().filter(|p| p.accepted) {
            assert!((p.theta - t0).abs() < 1e-8);
        }
    }

    fn check_report_filter(report: &AuditReport, kappa: f64) -> usize {
        let bound = (1.0 + report.tau * report.tau) * report.se_eff * report.se_eff;
        let mut n_acc = 0;
        for p in report.sampled_points.iter().filter(|p| p.accepted) {
            n_acc += 1;
            assert!(p.se * p.se <= bound * (1.0 + 1e-10) && p.kappa_omega <= kappa * (1.0 + 1e-10));
        }
        assert!((report.interval.center() - report.theta_eff).abs() < 1e-15);
        n_acc
    }

    fn inflated(report: &AuditReport, factor: f64) -> Interval {
        Interval {
            lo: report.theta_eff - factor * report.interval.radius(),
            hi: report.theta_eff + factor * report.interval.radius(),
        }
    }

    /// The sample filter uses `Sigma_hat` at each refit, so the accepted set
    /// overshoots the interval by a margin that vanishes with n.
    #[test]
    fn local_drift_points_within_inflated_interval() {
        let (model, data) = sample_iv(8000, 11, 1.0);
        let settings = AuditSettings {
            kappa: 100.0,
            tau: 0.5,
            n_draws: 400,
            seed: 5,
            ..AuditSettings::default()
        };
        let report = audit(&model, &data, &settings).unwrap();
        let wide = inflated(&report, 1.1);
        assert!(check_report_filter(&report, 100.0) > 10);
        for p in report.sampled_points.iter().filter(|p| p.accepted) {
            assert!(wide.contains(p.theta, 0.0), "{p:?} outside {wide:?}");
        }
    }

    /// `mean_square_match` on normal data is misspecified at every sample size
    /// (J/n tends to 1/2), so only the efficient and extremal points are
    /// guaranteed to track the interval.
    #[test]
    fn mean_square_match_extremal_points_track_interval() {
        let data = normal_mean_square(500, 0.2, 1.0, 11);
        let model = mean_square_match(0);
        let settings = AuditSettings {
            kappa: 100.0,
            tau: 0.5,
            n_draws: 400,
            seed: 5,
            ..AuditSettings::default()
        };
        let report = audit(&model, &data, &settings).unwrap();
        assert!(report.j_stat > 0.0);
        assert!(check_report_filter(&report, 100.0) > 10);
        let wide = inflated(&report, 1.1);
        let mut n_extremal = 0;
        for p in report.sampled_points.iter().filter(|p| p.accepted) {
            if !matches!(p.source, PointSource::Random) {
                n_extremal += 1;
                assert!(wide.contains(p.theta, 0.0), "{p:?} outside {wide:?}");
            }
        }
        assert!(n_extremal >= 1);
        assert!(report.minmax_t >= 0.0 && report.cs_critical >= 0.0);
    }

    #[test]
    fn adversarial_t_examples() {
        let (model, data) = sample_iv(1000, 21, 1.0);
        let basis = AuditBasis::new(&model, &data, &OptimizerSettings::default(), false).unwrap();
        let sqrt_j = basis.j.sqrt();
        assert!(sqrt_j > 1.0);
        let (t, _) = adversarial_t(&model, &data, basis.efficient.theta_hat, 1e8, 50, 3).unwrap();
        assert!(t >= 0.95 * sqrt_j, "t {t} vs sqrt J {sqrt_j}");
        let far = basis.efficient.theta_hat + 100.0 * basis.se_eff;
        let (t_far, _) = adversarial_t(&model, &data, far, 10.0, 20, 3).unwrap();
        assert!(t_far > 1.96);

        let (v, t0) = min_max_t(&model, &data, 1e8, 50, 3).unwrap();
        assert!(v >= 0.9 * sqrt_j && v <= 1.0 * sqrt_j * (1.0 + 1e-3), "{v} vs {sqrt_j}");
        assert!((t0 - basis.efficient.theta_hat).abs() <= 2.0 * basis.se_eff);
        // the min-max never exceeds the sup at any fixed theta0 on the same cache
        let cache = weight_cache(&model, &data, 1e8, 50, 3).unwrap();
        for i in -10..=10 {
            let x = basis.efficient.theta_hat + 0.3 * i as f64 * basis.se_eff;
            assert!(v <= max_abs_t(&cache.points, x).0 + 1e-12);
        }
    }

    #[test]
    fn just_identified_t_is_zero() {
        let (model, data) = linear_iv_local(200, 1, 0.0, 0.3, 5);
        let basis = AuditBasis::new(&model, &data, &OptimizerSettings::default(), false).unwrap();
        let (t, _) = adversarial_t(&model, &data, basis.efficient.theta_hat, 10.0, 10, 1).unwrap();
        assert!(t < 1e-6);
        let (v, _) = min_max_t(&model, &data, 10.0, 10, 1).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn cs_homogeneous_in_scale() {
        let pts = vec![(0.3, 1.0), (1.2, 0.5), (-0.4, 2.0), (0.9, 0.7)];
        let (c, p) = cs_intersection(&pts).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(t, s)| (t, 4.0 * s)).collect();
        let (c4, p4) = cs_intersection(&scaled).unwrap();
        assert!((c4 - c / 4.0).abs() < 1e-14);
        assert!((p4 - p).abs() < 1e-12);
    }
}
