//! Finite-difference check over every primitive, layer, loss and head.

use crate::error::{CliError, Result};
use mtl_core::gradsuite::{components, run_suite, ComponentReport, SuiteOptions, DEFAULT_TOLERANCE};
use std::fmt::Write as _;

pub struct GradcheckOutcome {
    pub reports: Vec<ComponentReport>,
    pub tolerance: f64,
}

impl GradcheckOutcome {
    pub fn failures(&self) -> Vec<String> {
        self.reports
            .iter()
            .filter(|r| !r.passed(self.tolerance))
            .map(|r| r.name.to_string())
            .collect()
    }

    /// One line per component.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let verdict = if r.passed(self.tolerance) { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<24} max_rel_err {:.3e}  checked {:>6}  kinks {:>4}  {verdict}",
                r.name, r.max_rel_error, r.checked, r.flagged
            );
        }
        out
    }

    pub fn into_result(self) -> Result<Self> {
        let failed = self.failures();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(CliError::GradCheck(failed))
        }
    }
}

pub fn gradcheck(opts: &SuiteOptions) -> Result<GradcheckOutcome> {
    if opts.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    if let Some(name) = &opts.corrupt {
        if !components().iter().any(|c| c.name == name) {
            let names: Vec<&str> = components().iter().map(|c| c.name).collect();
            return Err(CliError::Usage(format!(
                "unknown component `{name}`; components: {}",
                names.join(", ")
            )));
        }
    }
    Ok(GradcheckOutcome {
        reports: run_suite(opts)?,
        tolerance: DEFAULT_TOLERANCE,
    })
}
