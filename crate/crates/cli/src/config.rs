//! Run configuration: a TOML file with `config_version = 1`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gmm_audit_core::dgp::{Dgp, LinearIvDgp};
use gmm_audit_core::estimation::{FitStrategy, OptimizerSettings, StrategyKind};
use gmm_audit_core::inference::BootstrapScheme;
use gmm_audit_core::moments::ModelParams;
use gmm_audit_core::weights::WeightMatrix;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_DIALECT: &str = "toml";
pub const STRATEGY_KINDS: &[&str] = &["fixed_weight", "two_step", "iterated", "diag_inverse", "identity_scaled"];

/// A configuration problem, located by its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub inference: InferenceSpec,
    pub audit: Option<AuditSpec>,
    pub limit_lab: Option<LimitLabSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: ModelParams,
}

/// One weighting strategy. `kind` selects which of the optional fields apply.
#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: String,
    pub label: Option<String>,
    /// `fixed_weight`: the k x k weight, row by row.
    pub weight: Option<Vec<Vec<f64>>>,
    /// `iterated`
    pub max_rounds: Option<usize>,
    pub tol: Option<f64>,
    /// `identity_scaled`
    pub scale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub multistart: Option<usize>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub param_tol: Option<f64>,
    pub init: Option<Vec<f64>>,
    pub default_box: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    #[serde(default = "yes")]
    pub conventional: bool,
    #[serde(default = "yes")]
    pub robust: bool,
    pub bootstrap: Option<BootstrapSpec>,
}

fn yes() -> bool {
    true
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self {
            conventional: true,
            robust: true,
            bootstrap: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_scheme() -> String {
    "plain".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    pub kappa: f64,
    pub tau: Vec<f64>,
    pub n_draws: usize,
    /// Random weights in the adversarial t search; defaults to `n_draws`.
    pub adversarial_budget: Option<usize>,
    #[serde(default)]
    pub robust_se: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum LimitLabSpec {
    /// Brute-force checks of the exact limit-experiment results on random
    /// instances.
    Exact {
        instances: usize,
        #[serde(default = "default_weights")]
        n_weights: usize,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_max_k")]
        max_k: usize,
        #[serde(default = "default_max_p")]
        max_p: usize,
    },
    /// Monte Carlo under a simulated design.
    McLocal {
        dgp: DgpSpec,
        n_grid: Vec<usize>,
        reps: usize,
        kappa: f64,
        tau: f64,
        n_draws: usize,
        estimator: Option<StrategySpec>,
        theta_star: Option<ThetaStarSpec>,
    },
}

fn default_weights() -> usize {
    2000
}

fn default_tau() -> f64 {
    1.0
}

fn default_max_k() -> usize {
    6
}

fn default_max_p() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpSpec {
    LinearIv {
        k: usize,
        drift: f64,
        rho: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_pi")]
        pi: f64,
    },
    MeanSquareMatch { mu: f64, sd: f64 },
}

fn default_beta() -> f64 {
    1.0
}

fn default_pi() -> f64 {
    0.6
}

impl DgpSpec {
    pub fn to_dgp(&self) -> Dgp {
        match self {
            DgpSpec::LinearIv { k, drift, rho, beta, pi } => {
                let mut d = LinearIvDgp::standard(*k, *drift, *rho);
                d.beta = *beta;
                d.pi = vec![*pi; *k];
                Dgp::LinearIv(d)
            }
            DgpSpec::MeanSquareMatch { mu, sd } => Dgp::NormalMeanSquare { mu: *mu, sd: *sd },
        }
    }
}

/// Coverage target: a number, or `"population"` for the large-population
/// pseudo-true value of the estimator.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum ThetaStarSpec {
    Value(f64),
    Named(String),
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be a positive number, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .map(|s| format!("config (bytes {}..{})", s.start, s.end))
                .unwrap_or_else(|| "config".into());
            ConfigError::new(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| ConfigError::new("config", "file is not UTF-8"))?;
        Ok((Self::parse(text)?, bytes))
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::new(
                "config_version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.config_version),
            ));
        }
        if self.seed.is_none() {
            return Err(ConfigError::new("seed", "missing; every run must be seeded"));
        }
        if self.strategies.is_empty() && self.limit_lab.is_none() {
            return Err(ConfigError::new("strategies", "need at least one strategy or a [limit_lab] section"));
        }
        if !self.strategies.is_empty() {
            if self.model.is_none() {
                return Err(ConfigError::new("model", "missing; required with strategies"));
            }
            if self.data_path.is_none() {
                return Err(ConfigError::new("data_path", "missing; required with strategies"));
            }
        }
        let mut labels = std::collections::BTreeSet::new();
        for (i, s) in self.strategies.iter().enumerate() {
            validate_strategy(&format!("strategies[{i}]"), s)?;
            if !labels.insert(strategy_label(s)) {
                return Err(ConfigError::new(
                    format!("strategies[{i}].label"),
                    format!("duplicate label `{}`", strategy_label(s)),
                ));
            }
        }
        let o = &self.optimizer;
        if o.multistart == Some(0) && o.init.is_none() {
            return Err(ConfigError::new("optimizer.multistart", "must be >= 1 without an init point"));
        }
        if o.max_iter == Some(0) {
            return Err(ConfigError::new("optimizer.max_iter", "must be >= 1"));
        }
        if let Some(t) = o.grad_tol {
            positive("optimizer.grad_tol", t)?;
        }
        if let Some(t) = o.param_tol {
            positive("optimizer.param_tol", t)?;
        }
        if let Some([lo, hi]) = o.default_box {
            if !(lo < hi) {
                return Err(ConfigError::new("optimizer.default_box", "lower bound must be below upper bound"));
            }
        }
        if let Some(b) = &self.inference.bootstrap {
            if b.replicates == 0 {
                return Err(ConfigError::new("inference.bootstrap.replicates", "must be >= 1"));
            }
            if !(b.alpha > 0.0 && b.alpha < 1.0) {
                return Err(ConfigError::new("inference.bootstrap.alpha", "must lie in (0, 1)"));
            }
            parse_scheme(&b.scheme)?;
        }
        if let Some(a) = &self.audit {
            if self.strategies.is_empty() {
                return Err(ConfigError::new("audit", "requires model, data and strategies"));
            }
            if !(a.kappa >= 1.0) {
                return Err(ConfigError::new("audit.kappa", format!("must be >= 1, got {}", a.kappa)));
            }
            if a.tau.is_empty() {
                return Err(ConfigError::new("audit.tau", "list at least one cost"));
            }
            for (i, t) in a.tau.iter().enumerate() {
                if !(*t >= 0.0 && t.is_finite()) {
                    return Err(ConfigError::new(format!("audit.tau[{i}]"), format!("must be >= 0, got {t}")));
                }
            }
            if a.n_draws == 0 {
                return Err(ConfigError::new("audit.n_draws", "must be >= 1"));
            }
            if a.adversarial_budget == Some(0) {
                return Err(ConfigError::new("audit.adversarial_budget", "must be >= 1"));
            }
        }
        if let Some(l) = &self.limit_lab {
            validate_limit_lab(l)?;
        }
        Ok(())
    }

    pub fn optimizer_settings(&self, seed: u64) -> OptimizerSettings {
        let o = &self.optimizer;
        let mut s = OptimizerSettings::default().with_seed(seed);
        if let Some(m) = o.multistart {
            s.multistart = m;
        }
        if let Some(m) = o.max_iter {
            s.max_iter = m;
        }
        if let Some(t) = o.grad_tol {
            s.grad_tol = t;
        }
        if let Some(t) = o.param_tol {
            s.param_tol = t;
        }
        if let Some(init) = &o.init {
            s.init = Some(init.clone());
        }
        if let Some([lo, hi]) = o.default_box {
            s.default_box = (lo, hi);
        }
        s
    }
}

pub fn strategy_label(s: &StrategySpec) -> String {
    s.label.clone().unwrap_or_else(|| s.kind.clone())
}

fn validate_strategy(field: &str, s: &StrategySpec) -> Result<(), ConfigError> {
    let unexpected = |name: &str, present: bool| {
        if present {
            Err(ConfigError::new(
                format!("{field}.{name}"),
                format!("not used by strategy kind `{}`", s.kind),
            ))
        } else {
            Ok(())
        }
    };
    match s.kind.as_str() {
        "fixed_weight" => {
            if s.weight.is_none() {
                return Err(ConfigError::new(format!("{field}.weight"), "required for fixed_weight"));
            }
            unexpected("max_rounds", s.max_rounds.is_some())?;
            unexpected("tol", s.tol.is_some())?;
            unexpected("scale", s.scale.is_some())
        }
        "two_step" | "diag_inverse" => {
            unexpected("weight", s.weight.is_some())?;
            unexpected("max_rounds", s.max_rounds.is_some())?;
            unexpected("tol", s.tol.is_some())?;
            unexpected("scale", s.scale.is_some())
        }
        "iterated" => {
            if s.max_rounds == Some(0) {
                return Err(ConfigError::new(format!("{field}.max_rounds"), "must be >= 1"));
            }
            if let Some(t) = s.tol {
                if !(t >= 0.0) {
                    return Err(ConfigError::new(format!("{field}.tol"), "must be >= 0"));
                }
            }
            unexpected("weight", s.weight.is_some())?;
            unexpected("scale", s.scale.is_some())
        }
        "identity_scaled" => {
            let scale = s
                .scale
                .as_ref()
                .ok_or_else(|| ConfigError::new(format!("{field}.scale"), "required for identity_scaled"))?;
            if scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(ConfigError::new(format!("{field}.scale"), "entries must be strictly positive"));
            }
            unexpected("weight", s.weight.is_some())?;
            unexpected("max_rounds", s.max_rounds.is_some())?;
            unexpected("tol", s.tol.is_some())
        }
        other => Err(ConfigError::new(
            format!("{field}.kind"),
            format!("unknown strategy kind `{other}` (valid: {})", STRATEGY_KINDS.join(", ")),
        )),
    }
}

fn validate_limit_lab(l: &LimitLabSpec) -> Result<(), ConfigError> {
    match l {
        LimitLabSpec::Exact {
            instances,
            n_weights,
            tau,
            max_k,
            max_p,
        } => {
            if *instances == 0 {
                return Err(ConfigError::new("limit_lab.instances", "must be >= 1"));
            }
            if *n_weights == 0 {
                return Err(ConfigError::new("limit_lab.n_weights", "must be >= 1"));
            }
            if !(*tau >= 0.0 && tau.is_finite()) {
                return Err(ConfigError::new("limit_lab.tau", "must be >= 0"));
            }
            if *max_p == 0 || max_k < max_p {
                return Err(ConfigError::new("limit_lab.max_k", "need max_k >= max_p >= 1"));
            }
            Ok(())
        }
        LimitLabSpec::McLocal {
            dgp,
            n_grid,
            reps,
            kappa,
            tau,
            estimator,
            theta_star,
            ..
        } => {
            if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] < 2 {
                return Err(ConfigError::new(
                    "limit_lab.n_grid",
                    "must be strictly ascending sample sizes >= 2",
                ));
            }
            if *reps == 0 {
                return Err(ConfigError::new("limit_lab.reps", "must be >= 1"));
            }
            if !(*kappa >= 1.0) {
                return Err(ConfigError::new("limit_lab.kappa", "must be >= 1"));
            }
            if !(*tau >= 0.0) {
                return Err(ConfigError::new("limit_lab.tau", "must be >= 0"));
            }
            match dgp {
                DgpSpec::LinearIv { k, rho, .. } => {
                    if *k == 0 {
                        return Err(ConfigError::new("limit_lab.dgp.k", "must be >= 1"));
                    }
                    if !(rho.abs() < 1.0) {
                        return Err(ConfigError::new("limit_lab.dgp.rho", "must lie in (-1, 1)"));
                    }
                }
                DgpSpec::MeanSquareMatch { sd, .. } => positive("limit_lab.dgp.sd", *sd)?,
            }
            if let Some(e) = estimator {
                validate_strategy("limit_lab.estimator", e)?;
            }
            if let Some(ThetaStarSpec::Named(name)) = theta_star {
                if name != "population" {
                    return Err(ConfigError::new(
                        "limit_lab.theta_star",
                        format!("expected a number or \"population\", got `{name}`"),
                    ));
                }
            }
            Ok(())
        }
    }
}

pub fn parse_scheme(s: &str) -> Result<BootstrapScheme, ConfigError> {
    match s {
        "plain" => Ok(BootstrapScheme::Plain),
        "recentered" => Ok(BootstrapScheme::Recentered),
        other => Err(ConfigError::new(
            "inference.bootstrap.scheme",
            format!("unknown scheme `{other}` (valid: plain, recentered)"),
        )),
    }
}

/// Core strategy for a validated spec on a model with `k` moments and `p`
/// parameters.
pub fn build_strategy(
    field: &str,
    s: &StrategySpec,
    k: usize,
    p: usize,
    optimizer: &OptimizerSettings,
) -> Result<FitStrategy, ConfigError> {
    let kind = match s.kind.as_str() {
        "fixed_weight" => {
            let rows = s.weight.as_ref().expect("validated");
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(ConfigError::new(format!("{field}.weight"), format!("must be {k} x {k}")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let w = WeightMatrix::new(nalgebra::DMatrix::from_row_slice(k, k, &flat))
                .map_err(|e| ConfigError::new(format!("{field}.weight"), e.to_string()))?;
            StrategyKind::FixedWeight(w)
        }
        "two_step" => StrategyKind::TwoStep,
        "iterated" => StrategyKind::Iterated {
            max_rounds: s.max_rounds.unwrap_or(50),
            tol: s.tol.unwrap_or(1e-10),
        },
        "diag_inverse" => StrategyKind::DiagInverse,
        "identity_scaled" => StrategyKind::IdentityScaled(s.scale.clone().expect("validated")),
        other => {
            return Err(ConfigError::new(
                format!("{field}.kind"),
                format!("unknown strategy kind `{other}`"),
            ))
        }
    };
    let strategy = FitStrategy::new(kind).with_optimizer(optimizer.clone());
    strategy
        .validate(k, p)
        .map_err(|e| ConfigError::new(field.to_string(), e.to_string()))?;
    Ok(strategy)
}

/// `path` relative to the directory holding the config, unless absolute.
pub fn resolve(config_path: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        config_path.parent().unwrap_or_else(|| Path::new(".")).join(path)
    }
}
