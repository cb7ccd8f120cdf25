use std::path::Path;

use clap::ValueEnum;
use mtda_core::grad_suite::{run_suite, SuiteOptions, SuiteReport, SuiteSize};
use serde::Serialize;

use crate::config::SeedSource;
use crate::failure::{CliResult, Failure};
use crate::manifest::{create_dir, write_json, ManifestBuilder, MANIFEST_FILE};

pub const REPORT_FILE: &str = "gradcheck.json";

/// Deliberate bugs for checking that the suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Fault {
    /// Gradient reversal passes `+lambda` instead of `-lambda`.
    GrlSign,
}

#[derive(Serialize)]
struct Settings {
    size: SuiteSize,
    seed: u64,
    tolerance: f64,
    fault: Option<Fault>,
}

#[derive(Serialize)]
struct Document<'a> {
    manifest: &'a str,
    #[serde(flatten)]
    report: &'a SuiteReport,
}

pub fn table(report: &SuiteReport) -> String {
    let width = report.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$} {:>12} {:>8} {:>6}  result\n",
        "op", "max rel err", "elements", "kinks"
    );
    for r in &report.results {
        out += &format!(
            "{:<width$} {:>12.3e} {:>8} {:>6}  {}\n",
            r.name,
            r.max_rel_error,
            r.elements,
            r.kink_fallbacks,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out += &format!(
        "{} checks, tolerance {:e}, {:.2}s\n",
        report.results.len(),
        report.tolerance,
        report.seconds
    );
    out
}

pub fn run(size: SuiteSize, seed: u64, fault: Option<Fault>, out: Option<&Path>) -> CliResult<()> {
    let opts = SuiteOptions {
        size,
        seed,
        grl_sign_fault: fault == Some(Fault::GrlSign),
        ..SuiteOptions::default()
    };
    let settings = Settings {
        size,
        seed,
        tolerance: opts.tolerance,
        fault,
    };
    let manifest = ManifestBuilder::start("gradcheck", &settings, Some(seed), SeedSource::Config);
    let report = run_suite(&opts)?;
    print!("{}", table(&report));
    if let Some(dir) = out {
        let mut manifest = manifest;
        create_dir(dir)?;
        let path = dir.join(REPORT_FILE);
        write_json(
            &path,
            &Document {
                manifest: MANIFEST_FILE,
                report: &report,
            },
        )?;
        manifest.output(&path);
        manifest.finish(dir)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::verification(format!(
            "gradient check failed for: {}",
            report.failures().join(", ")
        )))
    }
}
