//! Monte Carlo experiments: J-statistic distribution, interval coverage and
//! convergence of sampled attainable sets, plus bootstrap coverage.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::audit::{audit_with_basis, AuditBasis, AuditSettings};
use crate::dgp::Dgp;
use crate::error::{GmmError, Result};
use crate::estimation::{fit, FitStrategy, OptimizerSettings};
use crate::inference::{bootstrap, conventional_cov, robust_cov, BootstrapScheme};
use crate::linalg::{mean, median, quantile_sorted};
use crate::rng::{derive_seed, sub_rng};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Largest tolerated share of failed replications per sample size.
pub const MAX_MC_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct McSpec {
    pub dgp: Dgp,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    /// Estimator whose interval coverage is recorded; the J-statistic always
    /// comes from the two-step efficient fit.
    pub estimator: FitStrategy,
    /// Target for coverage flags.
    pub theta_star: Option<f64>,
    pub kappa: f64,
    pub tau: f64,
    /// Random weights per replication in the attainable-set audit; 0 skips it.
    pub n_draws: usize,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub n: usize,
    pub rep: usize,
    pub j: f64,
    pub theta_eff: f64,
    pub se_eff: f64,
    pub theta_hat: f64,
    pub se_conventional: f64,
    pub se_robust: f64,
    pub d_h: Option<f64>,
    pub cover_conventional: Option<bool>,
    pub cover_robust: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub n: usize,
    pub completed: usize,
    pub failures: usize,
    pub j_mean: f64,
    pub j_median: f64,
    pub j_q95: f64,
    pub theta_median: f64,
    pub coverage_conventional: Option<f64>,
    pub coverage_robust: Option<f64>,
    pub median_sqrt_n_dh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub rows: Vec<McRow>,
    pub summaries: Vec<McSummary>,
    pub failure_log: Vec<String>,
}

impl McSpec {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(GmmError::InvalidArgument("reps must be >= 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GmmError::InvalidArgument("n_grid must be nonempty and strictly ascending".into()));
        }
        if self.n_grid[0] < 2 {
            return Err(GmmError::InvalidArgument("sample sizes must be >= 2".into()));
        }
        Ok(())
    }
}

fn replication(spec: &McSpec, n: usize, rep: usize) -> Result<McRow> {
    let model = spec.dgp.model();
    let mut rng = sub_rng(derive_seed(spec.seed, n as u64), rep as u64);
    let data = spec.dgp.sample(n, &mut rng);
    let basis = AuditBasis::new(&model, &data, &spec.optimizer, false)?;
    let est = fit(&model, &data, &spec.estimator)?;
    let se_conventional = conventional_cov(&est)?.se_theta;
    let se_robust = robust_cov(&est, &model, &data)?.se_theta;
    let cover = |se: f64| spec.theta_star.map(|t| (est.theta_hat - t).abs() <= Z_95 * se);
    let d_h = if spec.n_draws > 0 {
        let settings = AuditSettings {
            kappa: spec.kappa,
            tau: spec.tau,
            n_draws: spec.n_draws,
            seed: derive_seed(spec.seed, ((n as u64) << 32) | rep as u64),
            optimizer: spec.optimizer.clone(),
            t_ladder: Vec::new(),
            ..AuditSettings::default()
        };
        audit_with_basis(&model, &data, &basis, &settings)?.d_h
    } else {
        None
    };
    Ok(McRow {
        n,
        rep,
        j: basis.j,
        theta_eff: basis.efficient.theta_hat,
        se_eff: basis.se_eff,
        theta_hat: est.theta_hat,
        se_conventional,
        se_robust,
        d_h,
        cover_conventional: cover(se_conventional),
        cover_robust: cover(se_robust),
    })
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let v: Vec<bool> = flags.flatten().collect();
    (!v.is_empty()).then(|| v.iter().filter(|b| **b).count() as f64 / v.len() as f64)
}

fn summarize(n: usize, rows: &[McRow], failures: usize) -> McSummary {
    let mut js: Vec<f64> = rows.iter().map(|r| r.j).collect();
    js.sort_by(f64::total_cmp);
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta_hat).collect();
    let dh: Vec<f64> = rows.iter().filter_map(|r| r.d_h).map(|d| d * (n as f64).sqrt()).collect();
    McSummary {
        n,
        completed: rows.len(),
        failures,
        j_mean: mean(&js),
        j_median: quantile_sorted(&js, 0.5),
        j_q95: quantile_sorted(&js, 0.95),
        theta_median: median(&thetas),
        coverage_conventional: rate(rows.iter().map(|r| r.cover_conventional)),
        coverage_robust: rate(rows.iter().map(|r| r.cover_robust)),
        median_sqrt_n_dh: (!dh.is_empty()).then(|| median(&dh)),
    }
}

/// Replications over `n_grid`, deterministic per seed and independent of
/// thread count.
pub fn mc_local(spec: &McSpec) -> Result<McResult> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut failure_log = Vec::new();
    for &n in &spec.n_grid {
        let outcomes: Vec<Result<McRow>> = (0..spec.reps).into_par_iter().map(|r| replication(spec, n, r)).collect();
        let mut ok = Vec::with_capacity(spec.reps);
        let mut failures = 0;
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(row) => ok.push(row),
                Err(e) => {
                    failures += 1;
                    failure_log.push(format!("n={n} rep={r}: {e}"));
                }
            }
        }
        if failures as f64 > MAX_MC_FAILURE_RATE * spec.reps as f64 || ok.is_empty() {
            return Err(GmmError::MonteCarloUnstable {
                failures,
                attempted: spec.reps,
            });
        }
        summaries.push(summarize(n, &ok, failures));
        rows.extend(ok);
    }
    Ok(McResult {
        rows,
        summaries,
        failure_log,
    })
}

/// One row per replication: `n, rep, J, theta_eff, se_eff, theta_hat,
/// se_conventional, se_robust, dH, cover_conventional, cover_robust`.
pub fn write_rows_csv<W: Write>(rows: &[McRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "rep",
        "J",
        "theta_eff",
        "se_eff",
        "theta_hat",
        "se_conventional",
        "se_robust",
        "dH",
        "cover_conventional",
        "cover_robust",
    ])?;
    let opt_f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    let opt_b = |v: Option<bool>| v.map_or(String::new(), |x| (x as u8).to_string());
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.rep.to_string(),
            format!("{:?}", r.j),
            format!("{:?}", r.theta_eff),
            format!("{:?}", r.se_eff),
            format!("{:?}", r.theta_hat),
            format!("{:?}", r.se_conventional),
            format!("{:?}", r.se_robust),
            opt_f(r.d_h),
            opt_b(r.cover_conventional),
            opt_b(r.cover_robust),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapCoverage {
    pub plain: f64,
    pub recentered: f64,
    pub completed: usize,
    pub failures: usize,
}

/// Percentile-interval coverage of `theta_star` for plain and recentered
/// bootstraps on the same simulated samples.
pub fn bootstrap_coverage(
    dgp: &Dgp,
    n: usize,
    reps: usize,
    replicates: usize,
    strategy: &FitStrategy,
    theta_star: f64,
    seed: u64,
) -> Result<BootstrapCoverage> {
    let model = dgp.model();
    let outcomes: Vec<Result<(bool, bool)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = sub_rng(derive_seed(seed, n as u64), r as u64);
            let data = dgp.sample(n, &mut rng);
            let bseed = derive_seed(seed, r as u64 + 1);
            let covers = |scheme| -> Result<bool> {
                let b = bootstrap(&model, &data, strategy, replicates, 0.05, scheme, bseed)?;
                let (lo, hi) = b
                    .percentile_ci
                    .ok_or_else(|| GmmError::InvalidArgument("percentile intervals need >= 100 replicates".into()))?;
                Ok(lo <= theta_star && theta_star <= hi)
            };
            Ok((covers(BootstrapScheme::Plain)?, covers(BootstrapScheme::Recentered)?))
        })
        .collect();
    let ok: Vec<(bool, bool)> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
    let failures = reps - ok.len();
    if failures as f64 > MAX_MC_FAILURE_RATE * reps as f64 || ok.is_empty() {
        return Err(GmmError::MonteCarloUnstable {
            failures,
            attempted: reps,
        });
    }
    let m = ok.len() as f64;
    Ok(BootstrapCoverage {
        plain: ok.iter().filter(|c| c.0).count() as f64 / m,
        recentered: ok.iter().filter(|c| c.1).count() as f64 / m,
        completed: ok.len(),
        failures,
    })
}
