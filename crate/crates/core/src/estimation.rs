//! GMM criterion minimization and weighting strategies.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{GmmError, Result};
use crate::linalg::{general_inverse, ridge_inverse, sym_condition, SINGULAR_COND};
use crate::moments::{mean_jacobian, moment_stats, sample_moments, Dataset, MomentModel, MomentStats};
use crate::rng::{derive_seed, sub_rng};
use crate::weights::WeightMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    /// Number of starts: the user initial point (if any) plus Latin-hypercube draws.
    pub multistart: usize,
    pub max_iter: usize,
    /// Stop when the criterion gradient norm is below `grad_tol * max(1, criterion)`.
    pub grad_tol: f64,
    /// Secondary stop on relative parameter change.
    pub param_tol: f64,
    pub seed: u64,
    pub init: Option<Vec<f64>>,
    /// Box for start draws when the model has no parameter bounds.
    pub default_box: (f64, f64),
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            multistart: 8,
            max_iter: 200,
            grad_tol: 1e-10,
            param_tol: 1e-12,
            seed: 0,
            init: None,
            default_box: (-10.0, 10.0),
        }
    }
}

impl OptimizerSettings {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init(mut self, init: Vec<f64>) -> Self {
        self.init = Some(init);
        self
    }

    pub fn with_multistart(mut self, m: usize) -> Self {
        self.multistart = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategyKind {
    FixedWeight(WeightMatrix),
    TwoStep,
    Iterated { max_rounds: usize, tol: f64 },
    DiagInverse,
    IdentityScaled(Vec<f64>),
}

impl StrategyKind {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::FixedWeight(_) => "fixed_weight",
            StrategyKind::TwoStep => "two_step",
            StrategyKind::Iterated { .. } => "iterated",
            StrategyKind::DiagInverse => "diag_inverse",
            StrategyKind::IdentityScaled(_) => "identity_scaled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitStrategy {
    pub kind: StrategyKind,
    pub optimizer: OptimizerSettings,
    /// First-round weight for two-step and iterated fits (identity when unset).
    pub first_step: Option<WeightMatrix>,
}

impl FitStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            optimizer: OptimizerSettings::default(),
            first_step: None,
        }
    }

    pub fn fixed(w: WeightMatrix) -> Self {
        Self::new(StrategyKind::FixedWeight(w))
    }

    pub fn two_step() -> Self {
        Self::new(StrategyKind::TwoStep)
    }

    pub fn iterated(max_rounds: usize, tol: f64) -> Self {
        Self::new(StrategyKind::Iterated { max_rounds, tol })
    }

    pub fn diag_inverse() -> Self {
        Self::new(StrategyKind::DiagInverse)
    }

    pub fn identity_scaled(scale: Vec<f64>) -> Self {
        Self::new(StrategyKind::IdentityScaled(scale))
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerSettings) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn validate(&self, k: usize, p: usize) -> Result<()> {
        if let Some(init) = &self.optimizer.init {
            if init.len() != p {
                return Err(GmmError::Dimension(format!(
                    "initial point of length {} for p={p}",
                    init.len()
                )));
            }
        }
        if self.optimizer.multistart == 0 && self.optimizer.init.is_none() {
            return Err(GmmError::Config("multistart must be >= 1".into()));
        }
        if let Some(w) = &self.first_step {
            if w.k() != k {
                return Err(GmmError::Dimension(format!("first-step weight of size {} for k={k}", w.k())));
            }
        }
        match &self.kind {
            StrategyKind::FixedWeight(w) if w.k() != k => Err(GmmError::Dimension(format!(
                "weight of size {} for k={k}",
                w.k()
            ))),
            StrategyKind::Iterated { max_rounds, tol } => {
                if *max_rounds < 1 {
                    Err(GmmError::Config("iterated max_rounds must be >= 1".into()))
                } else if !(*tol >= 0.0) {
                    Err(GmmError::Config("iterated tol must be >= 0".into()))
                } else {
                    Ok(())
                }
            }
            StrategyKind::IdentityScaled(s) => {
                if s.len() != k {
                    Err(GmmError::Dimension(format!("scale of length {} for k={k}", s.len())))
                } else if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    Err(GmmError::Config("identity_scaled entries must be strictly positive".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    ParameterChange,
    MaxIterations,
    NoProgress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeDiagnostics {
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub best_start: usize,
    pub starts: usize,
    pub starts_converged: usize,
    /// Criterion value at each start point, in start order.
    pub start_criteria: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub psi: Vec<f64>,
    /// `n g_bar' W g_bar` at `psi`.
    pub criterion: f64,
    pub diagnostics: MinimizeDiagnostics,
}

struct Local {
    psi: Vec<f64>,
    criterion: f64,
    grad_norm: f64,
    iterations: usize,
    stop: StopReason,
}

impl Local {
    fn converged(&self) -> bool {
        matches!(self.stop, StopReason::Gradient | StopReason::ParameterChange)
    }
}

fn project(psi: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (x, &(lo, hi)) in psi.iter_mut().zip(b) {
            *x = x.clamp(lo, hi);
        }
    }
}

fn criterion_at(model: &MomentModel, data: &Dataset, w: &DMatrix<f64>, psi: &[f64]) -> Result<(DVector<f64>, f64)> {
    let g = sample_moments(model, data, psi)?;
    let q = data.n() as f64 * (g.transpose() * w * &g)[(0, 0)];
    Ok((g, q))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `2 n Gamma' W g_bar` at `psi`.
fn criterion_gradient(model: &MomentModel, data: &Dataset, w: &DMatrix<f64>, psi: &[f64]) -> Result<DVector<f64>> {
    let g = sample_moments(model, data, psi)?;
    let gamma = mean_jacobian(model, data, psi)?;
    Ok(gamma.transpose() * w * g * (2.0 * data.n() as f64))
}

/// Central differences of the analytic gradient, symmetrized. `None` when a
/// shifted point is infeasible or the result is not positive definite.
fn newton_hessian(model: &MomentModel, data: &Dataset, w: &DMatrix<f64>, psi: &[f64]) -> Option<DMatrix<f64>> {
    let p = psi.len();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * psi[j].abs().max(1.0);
        let mut up = psi.to_vec();
        let mut down = psi.to_vec();
        up[j] += step;
        down[j] -= step;
        model.check_psi(&up).ok()?;
        model.check_psi(&down).ok()?;
        let diff = criterion_gradient(model, data, w, &up).ok()? - criterion_gradient(model, data, w, &down).ok()?;
        h.set_column(j, &(diff / (2.0 * step)));
    }
    let h = (&h + h.transpose()) * 0.5;
    (h.iter().all(|v| v.is_finite()) && h.clone().cholesky().is_some()).then_some(h)
}

/// Damped Newton on the residual `sqrt(n) L' g_bar(psi)` with `W = L L'`: the
/// full Hessian when it is positive definite (large residuals under
/// misspecification), otherwise Gauss-Newton, with backtracking line search,
/// Levenberg damping when the normal equations are ill-conditioned and a
/// steepest-descent fallback.
fn local_minimize(
    model: &MomentModel,
    data: &Dataset,
    w: &DMatrix<f64>,
    chol_l: &DMatrix<f64>,
    start: Vec<f64>,
    settings: &OptimizerSettings,
) -> Result<Local> {
    let n = data.n() as f64;
    let sqrt_n = n.sqrt();
    let bounds = model.bounds();
    let p = model.p();
    let mut psi = start;
    project(&mut psi, bounds);
    let (mut g, mut q) = criterion_at(model, data, w, &psi)?;
    let mut grad_norm = f64::INFINITY;
    for iter in 0..settings.max_iter {
        let gamma = mean_jacobian(model, data, &psi)?;
        let jac = chol_l.transpose() * &gamma * sqrt_n;
        let resid = chol_l.transpose() * &g * sqrt_n;
        let grad = jac.transpose() * &resid * 2.0;
        grad_norm = grad.norm();
        if grad_norm <= settings.grad_tol * q.max(1.0) {
            return Ok(Local { psi, criterion: q, grad_norm, iterations: iter, stop: StopReason::Gradient });
        }
        let jtj = match newton_hessian(model, data, w, &psi) {
            // halved to match the residual form, where `grad = 2 J'r`
            Some(h) => h * 0.5,
            None => jac.transpose() * &jac,
        };
        let jtr = jac.transpose() * &resid;
        let scale = (0..p).map(|i| jtj[(i, i)]).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
        let mut mu = if sym_condition(&jtj) > SINGULAR_COND { 1e-10 * scale } else { 0.0 };
        let mut accepted: Option<(Vec<f64>, DVector<f64>, f64, f64)> = None;
        let mut smallest_step = f64::INFINITY;
        for attempt in 0..12 {
            let dir: DVector<f64> = if attempt == 11 {
                -&grad
            } else {
                let mut lhs = jtj.clone();
                for i in 0..p {
                    lhs[(i, i)] += mu;
                }
                match lhs.cholesky() {
                    Some(c) => -c.solve(&jtr),
                    None => {
                        mu = (mu * 10.0).max(1e-8 * scale);
                        continue;
                    }
                }
            };
            smallest_step = smallest_step.min(dir.norm());
            let slope = grad.dot(&dir);
            if !(slope < 0.0) {
                mu = (mu * 10.0).max(1e-8 * scale);
                continue;
            }
            let mut t = 1.0;
            for _ in 0..60 {
                let mut trial: Vec<f64> = psi.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
                project(&mut trial, bounds);
                if let Ok((g_new, q_new)) = criterion_at(model, data, w, &trial) {
                    if q_new.is_finite() && q_new <= q + 1e-4 * t * slope {
                        let step = norm(&trial.iter().zip(&psi).map(|(a, b)| a - b).collect::<Vec<_>>());
                        accepted = Some((trial, g_new, q_new, step));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            mu = (mu * 10.0).max(1e-6 * scale);
        }
        match accepted {
            Some((trial, g_new, q_new, step)) => {
                let small = step <= settings.param_tol * norm(&psi).max(1.0);
                psi = trial;
                g = g_new;
                q = q_new;
                if small {
                    return Ok(Local {
                        psi,
                        criterion: q,
                        grad_norm,
                        iterations: iter + 1,
                        stop: StopReason::ParameterChange,
                    });
                }
            }
            None => {
                // no descent at working precision: stationary if the Newton step is negligible
                let stop = if smallest_step <= 1e-7 * norm(&psi).max(1.0) {
                    StopReason::ParameterChange
                } else {
                    StopReason::NoProgress
                };
                return Ok(Local { psi, criterion: q, grad_norm, iterations: iter + 1, stop });
            }
        }
    }
    Ok(Local {
        psi,
        criterion: q,
        grad_norm,
        iterations: settings.max_iter,
        stop: StopReason::MaxIterations,
    })
}

/// Start points: the user initial point (if any) followed by a Latin-hypercube
/// sample in the parameter box, `multistart` points in total.
pub fn start_points(model: &MomentModel, settings: &OptimizerSettings) -> Vec<Vec<f64>> {
    let p = model.p();
    let mut starts = Vec::new();
    if let Some(init) = &settings.init {
        starts.push(init.clone());
    }
    let draws = settings.multistart.saturating_sub(starts.len());
    if draws == 0 {
        return starts;
    }
    let boxes: Vec<(f64, f64)> = match model.bounds() {
        Some(b) => b.to_vec(),
        None => vec![settings.default_box; p],
    };
    let mut rng = sub_rng(settings.seed, 0);
    let strata: Vec<Vec<usize>> = (0..p)
        .map(|_| {
            let mut s: Vec<usize> = (0..draws).collect();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    for i in 0..draws {
        let point = (0..p)
            .map(|j| {
                let (lo, hi) = boxes[j];
                let u: f64 = rng.random();
                lo + (strata[j][i] as f64 + u) / draws as f64 * (hi - lo)
            })
            .collect();
        starts.push(point);
    }
    starts
}

/// Minimize `psi -> n g_bar(psi)' W g_bar(psi)` from several starts and return
/// the best converged local minimizer (ties broken by start index).
pub fn minimize_criterion(
    model: &MomentModel,
    data: &Dataset,
    w: &WeightMatrix,
    settings: &OptimizerSettings,
) -> Result<Minimum> {
    if w.k() != model.k() {
        return Err(GmmError::Dimension(format!(
            "weight of size {} for k={}",
            w.k(),
            model.k()
        )));
    }
    if let Some(init) = &settings.init {
        model.check_psi(init)?;
    }
    let chol_l = w
        .values()
        .clone()
        .cholesky()
        .ok_or(GmmError::NotPositiveDefinite { eig_min: w.eig_min() })?
        .l();
    let starts = start_points(model, settings);
    if starts.is_empty() {
        return Err(GmmError::Config("no start points".into()));
    }
    let mut start_criteria = Vec::with_capacity(starts.len());
    let mut results = Vec::with_capacity(starts.len());
    let mut first_error = None;
    for start in starts {
        let mut projected = start.clone();
        project(&mut projected, model.bounds());
        match criterion_at(model, data, w.values(), &projected) {
            Ok((_, q0)) => start_criteria.push(q0),
            Err(e) => {
                start_criteria.push(f64::NAN);
                first_error.get_or_insert(e);
                results.push(None);
                continue;
            }
        }
        match local_minimize(model, data, w.values(), &chol_l, start, settings) {
            Ok(local) => results.push(Some(local)),
            Err(e) => {
                first_error.get_or_insert(e);
                results.push(None);
            }
        }
    }
    let starts_converged = results.iter().flatten().filter(|r| r.converged()).count();
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().filter(|l| l.converged()).map(|l| (i, l)))
        .min_by(|a, b| a.1.criterion.total_cmp(&b.1.criterion).then(a.0.cmp(&b.0)));
    match best {
        Some((i, local)) => Ok(Minimum {
            psi: local.psi.clone(),
            criterion: local.criterion,
            diagnostics: MinimizeDiagnostics {
                converged: true,
                grad_norm: local.grad_norm,
                iterations: local.iterations,
                stop: local.stop,
                best_start: i,
                starts: results.len(),
                starts_converged,
                start_criteria,
            },
        }),
        None => {
            let fallback = results
                .iter()
                .flatten()
                .min_by(|a, b| a.criterion.total_cmp(&b.criterion));
            match (fallback, first_error) {
                (Some(l), _) => Err(GmmError::NonConvergence {
                    best: l.psi.clone(),
                    criterion: l.criterion,
                    grad_norm: l.grad_norm,
                }),
                (None, Some(e)) => Err(e),
                (None, None) => Err(GmmError::NonConvergence {
                    best: vec![],
                    criterion: f64::NAN,
                    grad_norm: f64::NAN,
                }),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Number of criterion minimizations performed.
    pub rounds: usize,
    /// Iterated GMM: whether successive estimates settled within `tol`.
    pub iteration_settled: bool,
    /// A singular moment covariance was ridge-repaired when forming the weight.
    pub ridge_repaired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub psi_hat: Vec<f64>,
    pub theta_hat: f64,
    /// Weight used in the final minimization.
    pub weight: WeightMatrix,
    pub stats: MomentStats,
    /// `n g_bar' W g_bar` at `psi_hat`.
    pub criterion: f64,
    pub n: usize,
    /// Gradient of the target map at `psi_hat`.
    pub target_grad: DVector<f64>,
    pub strategy: &'static str,
    pub diagnostics: FitDiagnostics,
}

fn finish_fit(
    model: &MomentModel,
    data: &Dataset,
    weight: WeightMatrix,
    min: Minimum,
    strategy: &'static str,
    rounds: usize,
    iterations: usize,
    iteration_settled: bool,
    ridge_repaired: bool,
) -> Result<GmmFit> {
    let stats = moment_stats(model, data, &min.psi)?;
    let n = data.n();
    let criterion = n as f64 * (stats.g_bar.transpose() * weight.values() * &stats.g_bar)[(0, 0)];
    Ok(GmmFit {
        theta_hat: model.theta(&min.psi),
        target_grad: model.theta_grad(&min.psi),
        psi_hat: min.psi,
        weight,
        stats,
        criterion,
        n,
        strategy,
        diagnostics: FitDiagnostics {
            converged: min.diagnostics.converged,
            grad_norm: min.diagnostics.grad_norm,
            iterations,
            rounds,
            iteration_settled,
            ridge_repaired,
        },
    })
}

fn efficient_weight(sigma: &DMatrix<f64>) -> Result<(WeightMatrix, bool)> {
    let (inv, ridged) = ridge_inverse(sigma);
    Ok((WeightMatrix::new(inv)?, ridged))
}

fn round_settings(base: &OptimizerSettings, round: usize, init: Option<Vec<f64>>) -> OptimizerSettings {
    let mut s = base.clone();
    s.seed = derive_seed(base.seed, round as u64);
    if init.is_some() {
        s.init = init;
    }
    s
}

/// Fit the model under a weighting strategy.
pub fn fit(model: &MomentModel, data: &Dataset, strategy: &FitStrategy) -> Result<GmmFit> {
    let k = model.k();
    strategy.validate(k, model.p())?;
    let opt = &strategy.optimizer;
    let label = strategy.kind.label();
    match &strategy.kind {
        StrategyKind::FixedWeight(w) => {
            let min = minimize_criterion(model, data, w, opt)?;
            let it = min.diagnostics.iterations;
            finish_fit(model, data, w.clone(), min, label, 1, it, true, false)
        }
        StrategyKind::IdentityScaled(scale) => {
            let w = WeightMatrix::diagonal(&scale.iter().map(|s| s * s).collect::<Vec<_>>())?;
            let min = minimize_criterion(model, data, &w, opt)?;
            let it = min.diagnostics.iterations;
            finish_fit(model, data, w, min, label, 1, it, true, false)
        }
        StrategyKind::DiagInverse => {
            let first = minimize_criterion(model, data, &WeightMatrix::identity(k), opt)?;
            let stats = moment_stats(model, data, &first.psi)?;
            let diag: Vec<f64> = (0..k).map(|i| stats.sigma_hat[(i, i)]).collect();
            let floor = 1e-10 * diag.iter().sum::<f64>() / k as f64;
            let mut ridged = false;
            let inv: Vec<f64> = diag
                .iter()
                .map(|&d| {
                    if d > floor && d > 0.0 {
                        1.0 / d
                    } else {
                        ridged = true;
                        1.0 / if floor > 0.0 { floor } else { 1.0 }
                    }
                })
                .collect();
            let w = WeightMatrix::diagonal(&inv)?;
            let second = minimize_criterion(model, data, &w, &round_settings(opt, 1, Some(first.psi.clone())))?;
            let it = first.diagnostics.iterations + second.diagnostics.iterations;
            finish_fit(model, data, w, second, label, 2, it, true, ridged)
        }
        StrategyKind::TwoStep => iterate(model, data, strategy, 2, 0.0, label),
        StrategyKind::Iterated { max_rounds, tol } => iterate(model, data, strategy, *max_rounds, *tol, label),
    }
}

/// Round 1 uses the first-step weight; each later round re-weights with the
/// inverse centered covariance at the previous round's estimate. Two-step GMM
/// is the case `max_rounds = 2` with no early stop.
fn iterate(
    model: &MomentModel,
    data: &Dataset,
    strategy: &FitStrategy,
    max_rounds: usize,
    tol: f64,
    label: &'static str,
) -> Result<GmmFit> {
    let k = model.k();
    let opt = &strategy.optimizer;
    let mut weight = strategy.first_step.clone().unwrap_or_else(|| WeightMatrix::identity(k));
    let mut min = minimize_criterion(model, data, &weight, opt)?;
    let mut iterations = min.diagnostics.iterations;
    let mut ridge_repaired = false;
    let mut rounds = 1;
    let mut settled = max_rounds == 1;
    while rounds < max_rounds {
        let stats = moment_stats(model, data, &min.psi)?;
        let (w, ridged) = efficient_weight(&stats.sigma_hat)?;
        ridge_repaired |= ridged;
        let next = minimize_criterion(model, data, &w, &round_settings(opt, rounds, Some(min.psi.clone())))?;
        iterations += next.diagnostics.iterations;
        rounds += 1;
        let change = norm(&next.psi.iter().zip(&min.psi).map(|(a, b)| a - b).collect::<Vec<_>>());
        weight = w;
        min = next;
        if label == "iterated" && change <= tol {
            settled = true;
            break;
        }
    }
    if label == "two_step" {
        settled = true;
    }
    finish_fit(model, data, weight, min, label, rounds, iterations, settled, ridge_repaired)
}

/// Exact minimizer for moments linear in the parameter, `g_bar(psi) = a - B psi`:
/// `(B' W B)^{-1} B' W a`.
pub fn closed_form_linear(a: &DVector<f64>, b: &DMatrix<f64>, w: &WeightMatrix) -> Result<DVector<f64>> {
    if a.len() != b.nrows() || w.k() != a.len() {
        return Err(GmmError::Dimension(format!(
            "a: {}, B: {:?}, W: {}",
            a.len(),
            b.shape(),
            w.k()
        )));
    }
    let btw = b.transpose() * w.values();
    let lhs = &btw * b;
    let inv = general_inverse(&lhs, "B'WB")?;
    Ok(inv * btw * a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{linear_iv, mean_square_match, MomentFn};
    use std::sync::Arc;

    /// Moments `(x1 - psi, x2 - psi)` on two-column rows; with rows all
    /// equal to (1, 2) the sample moments are (1 - psi, 2 - psi).
    pub(crate) fn two_target_model() -> MomentModel {
        let g: MomentFn = Arc::new(|row: &[f64], psi: &[f64], out: &mut [f64]| {
            out[0] = row[0] - psi[0];
            out[1] = row[1] - psi[0];
        });
        MomentModel::new("two_target", 2, 1, g).unwrap()
    }

    pub(crate) fn two_target_data(n: usize) -> Dataset {
        Dataset::new(vec!["x1".into(), "x2".into()], vec![vec![1.0, 2.0]; n]).unwrap()
    }

    fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
        let mut best = (lo, f(lo));
        let mut x = lo;
        while x <= hi {
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
            x += step;
        }
        best.0
    }

    #[test]
    fn symmetric_targets_under_identity() {
        let min = minimize_criterion(&two_target_model(), &two_target_data(5), &WeightMatrix::identity(2), &OptimizerSettings::default()).unwrap();
        assert!((min.psi[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn weighted_targets_match_grid_oracle() {
        let w = WeightMatrix::diagonal(&[3.0, 1.0]).unwrap();
        let min = minimize_criterion(&two_target_model(), &two_target_data(5), &w, &OptimizerSettings::default()).unwrap();
        let grid = grid_argmin(|p| 3.0 * (1.0 - p).powi(2) + (2.0 - p).powi(2), 0.0, 3.0, 1e-5);
        assert!((grid - 1.25).abs() < 1e-4);
        assert!((min.psi[0] - 1.25).abs() < 1e-10);
    }

    #[test]
    fn mean_square_match_identity_weight_matches_grid() {
        let data = Dataset::from_column("x", &[1.0, 2.0, 3.0]).unwrap();
        let model = mean_square_match(0);
        let min = minimize_criterion(&model, &data, &WeightMatrix::identity(2), &OptimizerSettings::default()).unwrap();
        let crit = |p: f64| (2.0 - p).powi(2) + (14.0 / 3.0 - p * p).powi(2);
        let grid = grid_argmin(crit, 0.0, 4.0, 1e-5);
        assert!((min.psi[0] - grid).abs() < 2e-5);
        // stationary point: psi^3 - (25/6) psi - 1 = 0
        let r = min.psi[0];
        assert!((r.powi(3) - 25.0 / 6.0 * r - 1.0).abs() < 1e-9);
        // the quoted 2.1518 sits 2.4e-4 below the root 2.15205
        assert!((r - 2.1518).abs() < 5e-4);
    }

    #[test]
    fn two_step_changes_estimand_under_misspecification() {
        let data = Dataset::from_column("x", &[1.0, 2.0, 3.0]).unwrap();
        let model = mean_square_match(0);
        let id = fit(&model, &data, &FitStrategy::fixed(WeightMatrix::identity(2))).unwrap();
        let two = fit(&model, &data, &FitStrategy::two_step()).unwrap();
        assert!((two.psi_hat[0] - id.psi_hat[0]).abs() > 1e-3);
        // grid oracle under the fixed second-round weight
        let w = two.weight.values().clone();
        let crit = |p: f64| {
            let g = DVector::from_vec(vec![2.0 - p, 14.0 / 3.0 - p * p]);
            (g.transpose() * &w * &g)[(0, 0)]
        };
        let grid = grid_argmin(crit, 0.0, 4.0, 1e-5);
        assert!((two.psi_hat[0] - grid).abs() < 2e-5);
        assert_eq!(two.diagnostics.rounds, 2);
    }

    #[test]
    fn identity_scaled_ones_equals_identity_fixed() {
        let data = Dataset::from_column("x", &[0.2, 1.9, 3.3, 0.7]).unwrap();
        let model = mean_square_match(0);
        let a = fit(&model, &data, &FitStrategy::identity_scaled(vec![1.0, 1.0])).unwrap();
        let b = fit(&model, &data, &FitStrategy::fixed(WeightMatrix::identity(2))).unwrap();
        assert_eq!(a.psi_hat, b.psi_hat);
        assert_eq!(a.criterion, b.criterion);
    }

    #[test]
    fn just_identified_iv_solves_exactly() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let z = (i as f64 * 0.37).sin() + 1.5;
                let w = 0.8 * z + (i as f64 * 1.3).cos();
                let y = 2.0 * w + (i as f64 * 0.71).sin();
                vec![y, w, z]
            })
            .collect();
        let data = Dataset::new(vec!["y".into(), "w".into(), "z".into()], rows).unwrap();
        let model = linear_iv(0, vec![1], vec![2]).unwrap();
        let f = fit(&model, &data, &FitStrategy::two_step()).unwrap();
        assert!(f.criterion <= 1e-16 * data.n() as f64);
        assert!(f.stats.g_bar.amax() < 1e-10);
    }

    #[test]
    fn closed_form_examples() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!((closed_form_linear(&a, &b, &WeightMatrix::identity(2)).unwrap()[0] - 1.5).abs() < 1e-15);
        let w = WeightMatrix::diagonal(&[3.0, 1.0]).unwrap();
        assert!((closed_form_linear(&a, &b, &w).unwrap()[0] - 1.25).abs() < 1e-15);
        let a3 = DVector::from_vec(vec![0.3, -2.0, 5.0]);
        let w3 = WeightMatrix::new(DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 4.0])).unwrap();
        let exact = closed_form_linear(&a3, &DMatrix::identity(3, 3), &w3).unwrap();
        assert!((exact - a3).amax() < 1e-14);
        let singular = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(closed_form_linear(&a, &singular, &WeightMatrix::identity(2)), Err(GmmError::Rank { .. })));
    }

    #[test]
    fn invalid_strategies_rejected() {
        let model = mean_square_match(0);
        let data = Dataset::from_column("x", &[1.0, 2.0]).unwrap();
        assert!(fit(&model, &data, &FitStrategy::identity_scaled(vec![1.0, 0.0])).is_err());
        assert!(fit(&model, &data, &FitStrategy::identity_scaled(vec![1.0])).is_err());
        assert!(fit(&model, &data, &FitStrategy::iterated(0, 1e-10)).is_err());
        assert!(fit(&model, &data, &FitStrategy::fixed(WeightMatrix::identity(3))).is_err());
    }

    #[test]
    fn iterated_reports_rounds() {
        let data = Dataset::from_column("x", &[0.1, 1.2, 0.4, 2.8, 1.1, 0.9, 1.7]).unwrap();
        let f = fit(&mean_square_match(0), &data, &FitStrategy::iterated(50, 1e-10)).unwrap();
        assert!(f.diagnostics.rounds >= 2 && f.diagnostics.rounds <= 50);
        let two = fit(&mean_square_match(0), &data, &FitStrategy::iterated(2, 0.0)).unwrap();
        let reference = fit(&mean_square_match(0), &data, &FitStrategy::two_step()).unwrap();
        assert_eq!(two.psi_hat, reference.psi_hat);
    }

    #[test]
    fn multistart_is_deterministic_and_beats_starts() {
        let data = Dataset::from_column("x", &[0.5, -1.0, 2.5, 0.25, 1.5]).unwrap();
        let s = OptimizerSettings::default().with_seed(99);
        let a = minimize_criterion(&mean_square_match(0), &data, &WeightMatrix::identity(2), &s).unwrap();
        let b = minimize_criterion(&mean_square_match(0), &data, &WeightMatrix::identity(2), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.diagnostics.start_criteria.len(), 8);
        for &c in &a.diagnostics.start_criteria {
            assert!(a.criterion <= c);
        }
    }
}
