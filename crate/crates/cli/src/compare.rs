//! Merge calibration reports from several run directories into one
//! per-variable, per-method table.

use std::path::Path;

use pinn_uq_core::uq::CalibrationReport;
use pinn_uq_core::{CoreError, Result};

use crate::pipeline::load_manifest;

pub struct RunEntry {
    pub method: String,
    pub problem: String,
    pub report: CalibrationReport,
}

pub fn load_runs(dirs: &[impl AsRef<Path>]) -> Result<Vec<RunEntry>> {
    if dirs.is_empty() {
        return Err(CoreError::InvalidConfig(
            "compare needs at least one run directory".into(),
        ));
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let manifest = load_manifest(&dir.join("manifest.json"))?;
        let report = CalibrationReport::load_json(&dir.join("report.json"))?;
        runs.push(RunEntry {
            method: manifest.config.method,
            problem: manifest.config.problem,
            report,
        });
    }
    let first = &runs[0].problem;
    if runs.iter().any(|r| &r.problem != first) {
        return Err(CoreError::InvalidConfig(
            "compare requires runs on the same problem".into(),
        ));
    }
    Ok(runs)
}

/// Mean predictive sigma over the Reynolds-force variables (all variables
/// when none are named `f*`, as in the oscillator problem).
pub fn mean_force_sigma(report: &CalibrationReport) -> f64 {
    let force: Vec<f64> = report
        .variables
        .iter()
        .filter(|v| v.name.starts_with('f'))
        .map(|v| v.mean_raw_sigma)
        .collect();
    let pool: Vec<f64> = if force.is_empty() {
        report.variables.iter().map(|v| v.mean_raw_sigma).collect()
    } else {
        force
    };
    pool.iter().sum::<f64>() / pool.len() as f64
}

pub fn render_table(runs: &[RunEntry]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:<8} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "variable", "rmse", "sigma_raw", "sigma_cal", "c_raw", "c_cal", "ratio", "alpha"
    ));
    for run in runs {
        for v in &run.report.variables {
            out.push_str(&format!(
                "{:<18} {:<8} {:>10.4} {:>10.4} {:>10.4} {:>7.1}% {:>7.1}% {:>8.3} {:>8.3}\n",
                run.method,
                v.name,
                v.rmse,
                v.mean_raw_sigma,
                v.mean_cal_sigma,
                v.coverage_raw,
                v.coverage_cal,
                v.mean_ratio,
                v.alpha
            ));
        }
    }
    if let Some(contrast) = collapse_contrast(runs) {
        out.push_str(&contrast);
    }
    out
}

/// When both a vanilla ensemble and a repulsive ensemble are present, report
/// the spread contrast that exposes ensemble collapse.
pub fn collapse_contrast(runs: &[RunEntry]) -> Option<String> {
    let vanilla = runs.iter().find(|r| r.method == "vanilla-ensemble")?;
    let rde = runs.iter().find(|r| r.method.starts_with("rde-"))?;
    let sv = mean_force_sigma(&vanilla.report);
    let sr = mean_force_sigma(&rde.report);
    let ratio = sr / sv.max(f64::MIN_POSITIVE);
    Some(format!(
        "collapse contrast: vanilla mean sigma {sv:.6} vs {} {sr:.6} (ratio {ratio:.2}x)\n",
        rde.method
    ))
}

pub fn write_table_csv(path: &Path, runs: &[RunEntry]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "method,variable,rmse,sigma_raw,sigma_cal,c_raw,c_cal,ratio,alpha"
    )?;
    for run in runs {
        for v in &run.report.variables {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                run.method,
                v.name,
                v.rmse,
                v.mean_raw_sigma,
                v.mean_cal_sigma,
                v.coverage_raw,
                v.coverage_cal,
                v.mean_ratio,
                v.alpha
            )?;
        }
    }
    Ok(())
}
