//! Report schema (report.json), its Markdown rendering, and atomic file output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gmm_audit_core::audit::{AuditPoint, Interval, PointSource};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBlock {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_dialect: String,
    pub config_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub data_path: Option<String>,
    pub data_sha256: Option<String>,
    /// RFC 3339 UTC; the only field that differs between identical runs.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBlock {
    pub name: String,
    pub k: usize,
    pub p: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeBlock {
    pub conventional: Option<f64>,
    pub robust: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBlock {
    pub scheme: String,
    pub replicates: usize,
    pub failures: usize,
    pub alpha: f64,
    pub seed: u64,
    pub se: f64,
    /// Percentile interval; absent below 100 replicates.
    pub percentile_ci: Option<Interval>,
    pub contains_estimate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyBlock {
    pub label: String,
    pub kind: String,
    pub psi_hat: Vec<f64>,
    pub theta_hat: f64,
    /// `n g_bar' W g_bar` at the estimate.
    pub criterion: f64,
    pub converged: bool,
    pub rounds: usize,
    pub iteration_settled: bool,
    pub ridge_repaired: bool,
    pub se: SeBlock,
    pub cov_psi_conventional: Option<Vec<Vec<f64>>>,
    pub cov_psi_robust: Option<Vec<Vec<f64>>>,
    pub bootstrap: Option<BootstrapBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JBlock {
    pub j: f64,
    pub df: usize,
    /// Upper tail of the chi-square(df) reference at J. Descriptive context
    /// only; the report draws no accept/reject conclusion from it.
    pub chi2_tail_probability: Option<f64>,
    pub ridge_repaired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauBlock {
    pub tau: f64,
    pub interval: Interval,
    pub width: f64,
    /// Hull of the accepted sampled estimates.
    pub hull: Option<Interval>,
    pub d_h: Option<f64>,
    pub sampled: usize,
    pub accepted: usize,
    pub failures: usize,
    pub minmax_t: f64,
    pub minmax_theta0: f64,
    pub cs_critical: f64,
    pub cs_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialBlock {
    pub budget: usize,
    pub theta0: f64,
    pub sup_abs_t: f64,
    pub sqrt_j: f64,
    pub min_max_t: f64,
    pub min_max_theta0: f64,
    pub cs_critical: f64,
    pub cs_point: f64,
    pub weights_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBlock {
    pub kappa: f64,
    pub n_draws: usize,
    pub se_flavor: String,
    pub theta_eff: f64,
    pub se_eff: f64,
    pub j: f64,
    pub df: usize,
    pub per_tau: Vec<TauBlock>,
    pub adversarial: AdversarialBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactBlock {
    pub instances: usize,
    pub n_weights: usize,
    pub tau: f64,
    pub accepted_weights: usize,
    pub max_interval_excess: f64,
    pub max_endpoint_error: f64,
    pub max_canonical_residual: f64,
    pub max_j_gap: f64,
    pub overidentified: usize,
    pub max_min_max_t_error: f64,
    pub max_cs_critical_error: f64,
    pub max_cs_point_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummaryBlock {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McBlock {
    pub dgp: crate::config::DgpSpec,
    pub estimator: String,
    pub theta_star: Option<f64>,
    pub kappa: f64,
    pub tau: f64,
    pub n_draws: usize,
    pub reps: usize,
    pub summaries: Vec<McSummaryBlock>,
    pub failure_log: Vec<String>,
    pub rows_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum LimitLabBlock {
    Exact(ExactBlock),
    McLocal(McBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub status: Status,
    pub error: Option<ErrorBlock>,
    pub provenance: Provenance,
    pub model: Option<ModelBlock>,
    pub strategies: Vec<StrategyBlock>,
    pub j: Option<JBlock>,
    pub audit: Option<AuditBlock>,
    pub limit_lab: Option<LimitLabBlock>,
}

impl Report {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            status: Status::Ok,
            error: None,
            provenance,
            model: None,
            strategies: Vec::new(),
            j: None,
            audit: None,
            limit_lab: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn num(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.4e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), num)
}

fn interval(iv: &Interval) -> String {
    format!("[{}, {}]", num(iv.lo), num(iv.hi))
}

pub fn render_markdown(r: &Report) -> String {
    let mut md = String::new();
    let p = &r.provenance;
    let _ = writeln!(md, "# GMM weighting audit\n");
    let _ = writeln!(
        md,
        "{} {} `{}`, seed {}, config sha256 `{}`, generated {}.\n",
        p.tool, p.version, p.command, p.seed, p.config_sha256, p.timestamp
    );
    if let Some(e) = &r.error {
        let _ = writeln!(md, "## Error\n\n`{}`: {}\n", e.kind, e.message);
        return md;
    }
    if let Some(m) = &r.model {
        let _ = writeln!(
            md,
            "Model `{}` with k = {} moments, p = {} parameters, n = {} observations.\n",
            m.name, m.k, m.p, m.n
        );
    }
    if !r.strategies.is_empty() {
        let _ = writeln!(md, "## Estimates by strategy\n");
        let _ = writeln!(
            md,
            "| strategy | theta | SE (conventional) | SE (robust) | criterion | converged | bootstrap SE | bootstrap interval |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        for s in &r.strategies {
            let (bse, bci) = match &s.bootstrap {
                Some(b) => (num(b.se), b.percentile_ci.as_ref().map_or("n/a".into(), interval)),
                None => ("n/a".into(), "n/a".into()),
            };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                s.label,
                num(s.theta_hat),
                opt(s.se.conventional),
                opt(s.se.robust),
                num(s.criterion),
                if s.converged { "yes" } else { "no" },
                bse,
                bci
            );
        }
        let _ = writeln!(md);
    }
    if let Some(j) = &r.j {
        let _ = writeln!(md, "## J-statistic\n");
        let _ = writeln!(
            md,
            "J = {} with k - p = {}. Reference chi-square tail probability {} (descriptive only).\n",
            num(j.j),
            j.df,
            opt(j.chi2_tail_probability)
        );
    }
    if let Some(a) = &r.audit {
        let _ = writeln!(md, "## Attainable estimates\n");
        let _ = writeln!(
            md,
            "Efficient estimate {} (SE {}, {}), kappa = {}, {} random weights per cost.\n",
            num(a.theta_eff),
            num(a.se_eff),
            a.se_flavor,
            num(a.kappa),
            a.n_draws
        );
        let _ = writeln!(
            md,
            "| tau | interval | width | sampled hull | d_H | accepted / sampled | min-max t | CS critical value |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        for t in &a.per_tau {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} / {} | {} | {} |",
                num(t.tau),
                interval(&t.interval),
                num(t.width),
                t.hull.as_ref().map_or("n/a".into(), interval),
                opt(t.d_h),
                t.accepted,
                t.sampled,
                num(t.minmax_t),
                num(t.cs_critical)
            );
        }
        let adv = &a.adversarial;
        let _ = writeln!(md, "\n## Adversarial t-statistics\n");
        let _ = writeln!(
            md,
            "Largest |t| at theta0 = {} over {} weights: {} (sqrt J = {}).",
            num(adv.theta0),
            adv.weights_used,
            num(adv.sup_abs_t),
            num(adv.sqrt_j)
        );
        let _ = writeln!(
            md,
            "Smallest over theta0 of the largest |t|: {} at theta0 = {}.",
            num(adv.min_max_t),
            num(adv.min_max_theta0)
        );
        let _ = writeln!(
            md,
            "All confidence sets intersect from critical value {} at {}.\n",
            num(adv.cs_critical),
            num(adv.cs_point)
        );
    }
    match &r.limit_lab {
        Some(LimitLabBlock::Exact(e)) => {
            let _ = writeln!(md, "## Limit experiment checks\n");
            let _ = writeln!(md, "| quantity | value |\n|---|---|");
            let _ = writeln!(md, "| instances | {} |", e.instances);
            let _ = writeln!(md, "| random weights per instance | {} |", e.n_weights);
            let _ = writeln!(md, "| tau | {} |", num(e.tau));
            let _ = writeln!(md, "| max interval excess | {} |", num(e.max_interval_excess));
            let _ = writeln!(md, "| max endpoint error | {} |", num(e.max_endpoint_error));
            let _ = writeln!(md, "| max canonical residual | {} |", num(e.max_canonical_residual));
            let _ = writeln!(md, "| max J gap | {} |", num(e.max_j_gap));
            let _ = writeln!(md, "| max min-max t error | {} |", num(e.max_min_max_t_error));
            let _ = writeln!(md, "| max CS critical error | {} |", num(e.max_cs_critical_error));
            let _ = writeln!(md, "| max CS point error | {} |\n", num(e.max_cs_point_error));
        }
        Some(LimitLabBlock::McLocal(m)) => {
            let _ = writeln!(md, "## Monte Carlo\n");
            let _ = writeln!(
                md,
                "Estimator `{}`, {} replications per n, target {}. Rows in `{}`.\n",
                m.estimator,
                m.reps,
                opt(m.theta_star),
                m.rows_csv
            );
            let _ = writeln!(
                md,
                "| n | completed | mean J | q95 J | median theta | coverage (conventional) | coverage (robust) | median sqrt(n) d_H |"
            );
            let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
            for s in &m.summaries {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    s.n,
                    s.completed,
                    num(s.j_mean),
                    num(s.j_q95),
                    num(s.theta_median),
                    opt(s.coverage_conventional),
                    opt(s.coverage_robust),
                    opt(s.median_sqrt_n_dh)
                );
            }
            let _ = writeln!(md);
        }
        None => {}
    }
    md
}

pub fn write_audit_points<W: std::io::Write>(rows: &[(f64, AuditPoint)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "theta", "se", "kappa_omega", "source", "extremal_tau", "extremal_sign", "accepted"])?;
    for (tau, p) in rows {
        let (source, et, es) = match p.source {
            PointSource::Efficient => ("efficient", String::new(), String::new()),
            PointSource::Random => ("random", String::new(), String::new()),
            PointSource::Extremal { tau, sign } => ("extremal", format!("{tau:?}"), format!("{sign:?}")),
        };
        w.write_record([
            format!("{tau:?}"),
            format!("{:?}", p.theta),
            format!("{:?}", p.se),
            format!("{:?}", p.kappa_omega),
            source.to_string(),
            et,
            es,
            (p.accepted as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
