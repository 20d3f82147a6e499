//! Verification suites behind the `reafuse` command line: the equivariance
//! matrix over pyramid variants, naive-loop oracle comparisons, gradient
//! checks and a deterministic demo export.

mod config;
mod demo;
mod gradcheck_suite;
mod oracle_suite;
mod verify;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub use config::{GradcheckConfig, HarnessConfig, InputConfig, OracleConfig, Thresholds};
pub use demo::{demo, DemoLevel, DemoReport};
pub use gradcheck_suite::{gradcheck_suite, GradcheckSuiteReport, GradientEquivariance};
pub use oracle_suite::{oracle_suite, OracleCheck, OracleReport};
pub use verify::{equivariance_matrix, EquivarianceReport, TrialResiduals, VariantReport, Verdict};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const CONFIG_OR_IO: i32 = 2;
    pub const NON_FINITE: i32 = 3;
    pub const INCONCLUSIVE: i32 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Oracle,
    Gradcheck,
    Demo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Oracle => "oracle",
            Command::Gradcheck => "gradcheck",
            Command::Demo => "demo",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub seed: u64,
    pub rng: &'static str,
    pub config: HarnessConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivariance: Option<EquivarianceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSuiteReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo: Option<DemoReport>,
    /// Seconds per phase; only present when `record_timings` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
    pub passed: bool,
    pub exit_code: i32,
}

impl Report {
    /// Exit code implied by the recorded results alone.
    pub fn derive_exit_code(&self) -> i32 {
        let mut code = exit::OK;
        if let Some(eq) = &self.equivariance {
            if eq.variants.iter().any(|v| v.verdict == Verdict::Fail) {
                return exit::VERIFICATION_FAILED;
            }
            if eq.variants.iter().any(|v| v.verdict == Verdict::Inconclusive) {
                code = exit::INCONCLUSIVE;
            }
        }
        if let Some(o) = &self.oracle {
            if !o.checks.iter().all(|c| c.passed) {
                return exit::VERIFICATION_FAILED;
            }
        }
        if let Some(g) = &self.gradcheck {
            if !g.passed() {
                return exit::VERIFICATION_FAILED;
            }
        }
        if let Some(d) = &self.demo {
            if !d.layout_ok() {
                return exit::VERIFICATION_FAILED;
            }
        }
        code
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per checked item, for terminals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        if let Some(eq) = &self.equivariance {
            for v in &eq.variants {
                let expect = if v.expect_equivariant { "equivariant" } else { "broken" };
                out += &format!(
                    "{:<12} {:<26} expect {:<11} max {:.3e} min-trial-max {:.3e} {:?}\n",
                    v.variant.key(),
                    v.label,
                    expect,
                    v.max_residual,
                    v.min_trial_max,
                    v.verdict
                );
            }
        }
        if let Some(o) = &self.oracle {
            for c in &o.checks {
                out += &format!(
                    "{:<20} n={:<4} max |dev| {:.3e} <= {:.0e} {}\n",
                    c.name,
                    c.instances,
                    c.max_abs_deviation,
                    c.threshold,
                    mark(c.passed)
                );
            }
        }
        if let Some(g) = &self.gradcheck {
            for c in &g.checks {
                out += &format!(
                    "{:<26} coords {:<5} kinks {:<3} max rel {:.3e} {}\n",
                    c.name,
                    c.coords_checked,
                    c.kinks_excluded,
                    c.max_rel_error,
                    mark(c.passed)
                );
            }
            for c in &g.gradient_equivariance {
                out += &format!(
                    "grad-equivariance {:<18} max {:.3e} {}\n",
                    c.name,
                    c.max_residual,
                    mark(c.passed)
                );
            }
        }
        if let Some(d) = &self.demo {
            for l in &d.levels {
                out += &format!("{:<4} {:?} |P| {:.6e}\n", l.name, l.shape, l.frobenius_norm);
            }
        }
        out += &format!("exit code {}\n", self.exit_code);
        out
    }
}

/// Runs one command. `out` is required for `demo` and ignored otherwise.
pub fn run(command: Command, cfg: &HarnessConfig, out: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let mut report = Report {
        tool: "reafuse",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        rng: Rng::ALGORITHM,
        config: cfg.clone(),
        equivariance: None,
        oracle: None,
        gradcheck: None,
        demo: None,
        timings: None,
        passed: false,
        exit_code: exit::OK,
    };
    match command {
        Command::Verify => report.equivariance = Some(equivariance_matrix(cfg)?),
        Command::Oracle => report.oracle = Some(oracle_suite(cfg)?),
        Command::Gradcheck => report.gradcheck = Some(gradcheck_suite(cfg)?),
        Command::Demo => {
            let dir = out.ok_or_else(|| Error::Config("demo needs an output directory (--out)".into()))?;
            report.demo = Some(demo(cfg, dir)?);
        }
    }
    timings.insert(command.name().to_owned(), start.elapsed().as_secs_f64());
    if cfg.record_timings {
        report.timings = Some(timings);
    }
    report.exit_code = report.derive_exit_code();
    report.passed = report.exit_code == exit::OK;
    Ok(report)
}

/// Exit code for a command that could not produce a report.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => exit::NON_FINITE,
        _ => exit::CONFIG_OR_IO,
    }
}
