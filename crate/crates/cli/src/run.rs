//! The `run` and `limit-lab` commands: config in, report files out.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use gmm_audit_core::audit::{
    audit_with_basis, cs_intersection, max_abs_t, min_max_t_points, weight_cache_with_basis, AuditBasis,
    AuditPoint, AuditSettings, Interval,
};
use gmm_audit_core::estimation::{fit, FitStrategy, OptimizerSettings};
use gmm_audit_core::inference::{bootstrap, conventional_cov, j_statistic, robust_cov, CovEstimate};
use gmm_audit_core::moments::{builtin_model, Dataset, MomentModel};
use gmm_audit_core::rng::derive_seed;
use gmm_audit_core::GmmError;

use crate::config::{build_strategy, parse_scheme, resolve, strategy_label, ConfigError, LimitLabSpec, RunConfig};
use crate::config::{CONFIG_DIALECT, CONFIG_VERSION};
use crate::ingest::{ingest_reader, IngestError};
use crate::limit_lab::{run_exact, run_mc};
use crate::report::{
    render_markdown, write_atomic, write_audit_points, AdversarialBlock, AuditBlock, BootstrapBlock, ErrorBlock,
    JBlock, LimitLabBlock, ModelBlock, Provenance, Report, SeBlock, Status, StrategyBlock, TauBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    LimitLab,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::LimitLab => "limit-lab",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum RunError {
    /// The configuration is invalid; nothing was written.
    Config(ConfigError),
    /// The run failed; report.json in `output_dir` carries the error.
    Failed { output_dir: PathBuf, error: ErrorBlock },
    /// Output files could not be written.
    Output(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "invalid configuration: {e}"),
            RunError::Failed { output_dir, error } => write!(
                f,
                "run failed ({}): {}; details in {}",
                error.kind,
                error.message,
                output_dir.join("report.json").display()
            ),
            RunError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub report: Report,
    pub files: Vec<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn timestamp() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_else(|_| "unknown".into())
}

fn module_error(e: &GmmError) -> ErrorBlock {
    ErrorBlock {
        kind: e.kind().into(),
        message: e.to_string(),
    }
}

fn ingest_error(e: &IngestError) -> ErrorBlock {
    ErrorBlock {
        kind: e.kind().into(),
        message: e.to_string(),
    }
}

/// Everything computed from the config before any estimation.
struct Prepared {
    model: MomentModel,
    data: Dataset,
    strategies: Vec<(String, FitStrategy)>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn strategy_block(
    label: &str,
    strategy: &FitStrategy,
    cfg: &RunConfig,
    p: &Prepared,
    seed: u64,
    index: usize,
) -> Result<StrategyBlock, GmmError> {
    let est = fit(&p.model, &p.data, strategy)?;
    let conv: Option<CovEstimate> = if cfg.inference.conventional {
        Some(conventional_cov(&est)?)
    } else {
        None
    };
    let rob: Option<CovEstimate> = if cfg.inference.robust {
        Some(robust_cov(&est, &p.model, &p.data)?)
    } else {
        None
    };
    let boot = match &cfg.inference.bootstrap {
        Some(b) => {
            let scheme = parse_scheme(&b.scheme).expect("validated");
            let bseed = derive_seed(seed, 100 + index as u64);
            let r = bootstrap(&p.model, &p.data, strategy, b.replicates, b.alpha, scheme, bseed)?;
            let ci = r.percentile_ci.map(|(lo, hi)| Interval { lo, hi });
            Some(BootstrapBlock {
                scheme: b.scheme.clone(),
                replicates: r.replicates,
                failures: r.failures,
                alpha: r.alpha,
                seed: bseed,
                se: r.se,
                contains_estimate: ci.map(|c| c.contains(est.theta_hat, 0.0)),
                percentile_ci: ci,
            })
        }
        None => None,
    };
    Ok(StrategyBlock {
        label: label.to_string(),
        kind: est.strategy.to_string(),
        psi_hat: est.psi_hat.clone(),
        theta_hat: est.theta_hat,
        criterion: est.criterion,
        converged: est.diagnostics.converged,
        rounds: est.diagnostics.rounds,
        iteration_settled: est.diagnostics.iteration_settled,
        ridge_repaired: est.diagnostics.ridge_repaired,
        se: SeBlock {
            conventional: conv.as_ref().map(|c| c.se_theta),
            robust: rob.as_ref().map(|c| c.se_theta),
        },
        cov_psi_conventional: conv.as_ref().map(|c| rows(&c.cov_psi)),
        cov_psi_robust: rob.as_ref().map(|c| rows(&c.cov_psi)),
        bootstrap: boot,
    })
}

fn audit_block(
    cfg: &RunConfig,
    p: &Prepared,
    optimizer: &OptimizerSettings,
    seed: u64,
    points: &mut Vec<(f64, AuditPoint)>,
) -> Result<Option<AuditBlock>, GmmError> {
    let Some(a) = &cfg.audit else { return Ok(None) };
    let basis = AuditBasis::new(&p.model, &p.data, optimizer, a.robust_se)?;
    let base = AuditSettings {
        kappa: a.kappa,
        n_draws: a.n_draws,
        optimizer: optimizer.clone(),
        robust_se: a.robust_se,
        ..AuditSettings::default()
    };
    let mut per_tau = Vec::with_capacity(a.tau.len());
    for (i, &tau) in a.tau.iter().enumerate() {
        let settings = AuditSettings {
            tau,
            seed: derive_seed(seed, 200 + i as u64),
            ..base.clone()
        };
        let r = audit_with_basis(&p.model, &p.data, &basis, &settings)?;
        per_tau.push(TauBlock {
            tau,
            interval: r.interval,
            width: r.interval.hi - r.interval.lo,
            hull: r.hull,
            d_h: r.d_h,
            sampled: r.sampled_points.len(),
            accepted: r.sampled_points.iter().filter(|q| q.accepted).count(),
            failures: r.failures,
            minmax_t: r.minmax_t,
            minmax_theta0: r.minmax_theta0,
            cs_critical: r.cs_critical,
            cs_point: r.cs_point,
        });
        points.extend(r.sampled_points.into_iter().map(|q| (tau, q)));
    }
    let budget = a.adversarial_budget.unwrap_or(a.n_draws);
    let adv_settings = AuditSettings {
        n_draws: budget,
        seed: derive_seed(seed, 300),
        ..base.clone()
    };
    let cache = weight_cache_with_basis(&p.model, &p.data, &basis, &adv_settings)?;
    if cache.points.is_empty() {
        return Err(GmmError::InvalidArgument("no weight in the class produced a fit".into()));
    }
    let theta0 = basis.efficient.theta_hat;
    let (sup_abs_t, _) = max_abs_t(&cache.points, theta0);
    let (min_max_t, min_max_theta0) = min_max_t_points(&cache.points)?;
    let (cs_critical, cs_point) = cs_intersection(&cache.points)?;
    Ok(Some(AuditBlock {
        kappa: a.kappa,
        n_draws: a.n_draws,
        se_flavor: if a.robust_se { "robust" } else { "conventional" }.into(),
        theta_eff: basis.efficient.theta_hat,
        se_eff: basis.se_eff,
        j: basis.j,
        df: basis.df,
        per_tau,
        adversarial: AdversarialBlock {
            budget,
            theta0,
            sup_abs_t,
            sqrt_j: basis.j.sqrt(),
            min_max_t,
            min_max_theta0,
            cs_critical,
            cs_point,
            weights_used: cache.points.len(),
            failures: cache.failures,
        },
    }))
}

fn analyze(
    cfg: &RunConfig,
    p: &Prepared,
    optimizer: &OptimizerSettings,
    seed: u64,
    report: &mut Report,
    points: &mut Vec<(f64, AuditPoint)>,
) -> Result<(), GmmError> {
    for (i, (label, strategy)) in p.strategies.iter().enumerate() {
        report.strategies.push(strategy_block(label, strategy, cfg, p, seed, i)?);
    }
    let js = j_statistic(&p.model, &p.data, optimizer)?;
    let tail = (js.df > 0)
        .then(|| ChiSquared::new(js.df as f64).ok().map(|d| d.sf(js.j)))
        .flatten();
    report.j = Some(JBlock {
        j: js.j,
        df: js.df,
        chi2_tail_probability: tail,
        ridge_repaired: js.ridge_repaired,
    });
    report.audit = audit_block(cfg, p, optimizer, seed, points)?;
    Ok(())
}

/// Load, validate and execute a config, writing report files. Validation
/// problems return [`RunError::Config`] before anything is written.
pub fn execute(config_path: &Path, command: Command, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let (cfg, raw) = RunConfig::load(config_path)?;
    if command == Command::LimitLab && cfg.limit_lab.is_none() {
        return Err(ConfigError::new("limit_lab", "missing; the limit-lab command needs a [limit_lab] section").into());
    }
    let seed = opts.seed.or(cfg.seed).expect("validated");
    let output_dir = match (&opts.output_dir, &cfg.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => resolve(config_path, d),
        (None, None) => resolve(config_path, Path::new("output")),
    };
    let optimizer = cfg.optimizer_settings(derive_seed(seed, 1));
    let do_estimation = command == Command::Run && !cfg.strategies.is_empty();

    let mut provenance = Provenance {
        tool: "gmm-audit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        config_dialect: CONFIG_DIALECT.into(),
        config_version: CONFIG_VERSION,
        config_sha256: sha256_hex(&raw),
        seed,
        data_path: None,
        data_sha256: None,
        timestamp: timestamp(),
    };

    // data and model; a data problem is a run failure, a config/data
    // mismatch is a validation failure
    let mut prepared: Result<Option<Prepared>, ErrorBlock> = Ok(None);
    if do_estimation {
        let data_rel = cfg.data_path.as_ref().expect("validated");
        let data_path = resolve(config_path, data_rel);
        provenance.data_path = Some(data_rel.display().to_string());
        prepared = match std::fs::read(&data_path) {
            Err(e) => Err(ingest_error(&IngestError::Io(format!("{}: {e}", data_path.display())))),
            Ok(bytes) => {
                provenance.data_sha256 = Some(sha256_hex(&bytes));
                match ingest_reader(bytes.as_slice()) {
                    Err(e) => Err(ingest_error(&e)),
                    Ok(data) => {
                        let spec = cfg.model.as_ref().expect("validated");
                        let model = builtin_model(&spec.name, &spec.params, data.columns())
                            .map_err(|e| ConfigError::new("model", e.to_string()))?;
                        let mut strategies = Vec::with_capacity(cfg.strategies.len());
                        for (i, s) in cfg.strategies.iter().enumerate() {
                            let st = build_strategy(&format!("strategies[{i}]"), s, model.k(), model.p(), &optimizer)?;
                            strategies.push((strategy_label(s), st));
                        }
                        Ok(Some(Prepared {
                            model,
                            data,
                            strategies,
                        }))
                    }
                }
            }
        };
    }
    // limit-lab config problems that need the design (estimator dimensions)
    let mut mc_rows: Option<Vec<u8>> = None;
    let mut report = Report::new(provenance);
    let mut points = Vec::new();

    let outcome: Result<(), ErrorBlock> = (|| {
        if let Some(p) = prepared? {
            report.model = Some(ModelBlock {
                name: p.model.name().to_string(),
                k: p.model.k(),
                p: p.model.p(),
                n: p.data.n(),
            });
            analyze(&cfg, &p, &optimizer, seed, &mut report, &mut points).map_err(|e| module_error(&e))?;
        }
        Ok(())
    })();
    let outcome = match outcome {
        Err(e) => Err(e),
        Ok(()) => match &cfg.limit_lab {
            None => Ok(()),
            Some(LimitLabSpec::Exact {
                instances,
                n_weights,
                tau,
                max_k,
                max_p,
            }) => run_exact(*instances, *n_weights, *tau, *max_k, *max_p, derive_seed(seed, 400))
                .map(|b| report.limit_lab = Some(LimitLabBlock::Exact(b)))
                .map_err(|e| module_error(&e)),
            Some(LimitLabSpec::McLocal {
                dgp,
                n_grid,
                reps,
                kappa,
                tau,
                n_draws,
                estimator,
                theta_star,
            }) => {
                let run = run_mc(
                    dgp,
                    n_grid,
                    *reps,
                    *kappa,
                    *tau,
                    *n_draws,
                    estimator.as_ref(),
                    theta_star.as_ref(),
                    &optimizer,
                    derive_seed(seed, 400),
                )?;
                run.map(|r| {
                    report.limit_lab = Some(LimitLabBlock::McLocal(r.block));
                    mc_rows = Some(r.rows_csv);
                })
                .map_err(|e| module_error(&e))
            }
        },
    };

    std::fs::create_dir_all(&output_dir)
        .map_err(|e| RunError::Output(format!("{}: {e}", output_dir.display())))?;
    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), RunError> {
        let path = output_dir.join(name);
        write_atomic(&path, bytes).map_err(|e| RunError::Output(format!("{}: {e}", path.display())))?;
        files.push(path);
        Ok(())
    };
    if let Err(error) = outcome {
        report = Report {
            status: Status::Error,
            error: Some(error.clone()),
            ..Report::new(report.provenance)
        };
        put("report.json", report.to_json().as_bytes())?;
        put("report.md", render_markdown(&report).as_bytes())?;
        return Err(RunError::Failed { output_dir, error });
    }
    if report.audit.is_some() {
        let mut csv = Vec::new();
        write_audit_points(&points, &mut csv).map_err(|e| RunError::Output(e.to_string()))?;
        put("audit_points.csv", &csv)?;
    }
    if let Some(bytes) = &mc_rows {
        put("mc_rows.csv", bytes)?;
    }
    put("report.md", render_markdown(&report).as_bytes())?;
    put("report.json", report.to_json().as_bytes())?;
    Ok(RunOutcome {
        output_dir,
        report,
        files,
    })
}
