//! The `verify` command: exact limit-experiment checks on random instances.

use std::path::Path;

use serde::Serialize;

use crate::limit_lab::{exact_verdicts, run_exact};
use crate::report::{write_atomic, ExactBlock};

pub const DEFAULT_INSTANCES: usize = 100;
pub const DEFAULT_WEIGHTS: usize = 2000;
pub const DEFAULT_SEED: u64 = 20240601;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub pass: bool,
    pub exact: ExactBlock,
    pub verdicts: Vec<Verdict>,
}

pub fn verify(instances: usize, n_weights: usize, seed: u64) -> gmm_audit_core::Result<VerifyReport> {
    let exact = run_exact(instances, n_weights, 1.0, 6, 3, seed)?;
    let verdicts: Vec<Verdict> = exact_verdicts(&exact)
        .into_iter()
        .map(|(check, value, tolerance)| Verdict {
            check: check.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        })
        .collect();
    Ok(VerifyReport {
        seed,
        pass: verdicts.iter().all(|v| v.pass),
        exact,
        verdicts,
    })
}

pub fn print_verdicts(r: &VerifyReport) {
    for v in &r.verdicts {
        println!(
            "{} {}: {:.3e} (tolerance {:.0e})",
            if v.pass { "PASS" } else { "FAIL" },
            v.check,
            v.value,
            v.tolerance
        );
    }
}

pub fn write_report(r: &VerifyReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(r).map_err(std::io::Error::other)?;
    text.push('\n');
    write_atomic(&dir.join("verify.json"), text.as_bytes())
}
