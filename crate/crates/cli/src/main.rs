use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gmm_audit_cli::run::{execute, Command, RunError, RunOptions};
use gmm_audit_cli::verify::{print_verdicts, verify, write_report, DEFAULT_INSTANCES, DEFAULT_SEED, DEFAULT_WEIGHTS};

#[derive(Parser)]
#[command(name = "gmm-audit", version, about = "GMM estimation and weight-sensitivity audits")]
struct Cli {
    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report files.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate, run inference and audit as described by a config file.
    Run { config: PathBuf },
    /// Run only the [limit_lab] section of a config file.
    LimitLab { config: PathBuf },
    /// Check the exact limit-experiment results on random instances.
    Verify {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_WEIGHTS)]
        weights: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let opts = RunOptions {
        seed: cli.seed,
        output_dir: cli.output_dir.clone(),
    };
    let (config, command) = match cli.command {
        Cmd::Run { config } => (config, Command::Run),
        Cmd::LimitLab { config } => (config, Command::LimitLab),
        Cmd::Verify { instances, weights } => {
            let seed = cli.seed.unwrap_or(DEFAULT_SEED);
            let r = match verify(instances, weights, seed) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            print_verdicts(&r);
            if let Some(dir) = &cli.output_dir {
                if let Err(e) = write_report(&r, dir) {
                    eprintln!("error: cannot write output: {e}");
                    return ExitCode::from(1);
                }
            }
            return ExitCode::from(if r.pass { 0 } else { 1 });
        }
    };
    match execute(&config, command, &opts) {
        Ok(out) => {
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                RunError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
