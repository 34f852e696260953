//! Predictive statistics from sample collections, post-hoc recalibration,
//! coverage metrics, and the tempering-exponent tuning loop.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::network::{DropoutMode, NetworkSpec, ParamVector};

/// Raw predictive standard deviations below this value are floored before
/// any ratio computation (collapsed ensembles produce sigma ~ 0).
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-point, per-output predictive mean and standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveSummary {
    /// `mean[point][output]`.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation across samples, same layout.
    pub raw_std: Vec<Vec<f64>>,
    /// Recalibrated standard deviation, if recalibration was applied.
    pub cal_std: Option<Vec<Vec<f64>>>,
    pub n_samples: usize,
    /// Set when every raw standard deviation sits at or below the floor.
    pub collapsed: bool,
}

impl PredictiveSummary {
    pub fn n_points(&self) -> usize {
        self.mean.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.mean.first().map_or(0, |r| r.len())
    }

    /// Column of means for one output variable.
    pub fn mean_of(&self, output: usize) -> Vec<f64> {
        self.mean.iter().map(|r| r[output]).collect()
    }

    pub fn raw_std_of(&self, output: usize) -> Vec<f64> {
        self.raw_std.iter().map(|r| r[output]).collect()
    }

    pub fn cal_std_of(&self, output: usize) -> Option<Vec<f64>> {
        self.cal_std
            .as_ref()
            .map(|s| s.iter().map(|r| r[output]).collect())
    }
}

/// Mean and population std across samples of an `S x Q x K` prediction
/// array.
pub fn predictive_stats(predictions: &[Vec<Vec<f64>>]) -> Result<PredictiveSummary> {
    let s = predictions.len();
    if s < 2 {
        return Err(CoreError::TooFewSamples { need: 2, got: s });
    }
    let q = predictions[0].len();
    let k = predictions[0].first().map_or(0, |r| r.len());
    let mut mean = vec![vec![0.0; k]; q];
    let mut raw_std = vec![vec![0.0; k]; q];
    for sample in predictions {
        if sample.len() != q {
            return Err(CoreError::DimensionMismatch {
                expected: q,
                got: sample.len(),
                context: "predictive_stats points",
            });
        }
        for (pt, row) in sample.iter().enumerate() {
            for (o, v) in row.iter().enumerate() {
                mean[pt][o] += v;
            }
        }
    }
    for row in mean.iter_mut() {
        for v in row.iter_mut() {
            *v /= s as f64;
        }
    }
    for sample in predictions {
        for (pt, row) in sample.iter().enumerate() {
            for (o, v) in row.iter().enumerate() {
                let d = v - mean[pt][o];
                raw_std[pt][o] += d * d;
            }
        }
    }
    let mut collapsed = true;
    for row in raw_std.iter_mut() {
        for v in row.iter_mut() {
            *v = (*v / s as f64).sqrt();
            if *v > SIGMA_FLOOR {
                collapsed = false;
            }
        }
    }
    Ok(PredictiveSummary {
        mean,
        raw_std,
        cal_std: None,
        n_samples: s,
        collapsed,
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_linear(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return f64::NAN;
    }
    let h = p * (v.len() as f64 - 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }
}

/// `alpha = 0.5 * P95(|truth - mean| / sigma_raw)`, with the sigma floor
/// applied first.
pub fn recalibration_factor(truth: &[f64], mean: &[f64], raw_sigma: &[f64]) -> Result<f64> {
    if truth.len() != mean.len() || truth.len() != raw_sigma.len() || truth.is_empty() {
        return Err(CoreError::DimensionMismatch {
            expected: truth.len(),
            got: mean.len().min(raw_sigma.len()),
            context: "recalibration_factor",
        });
    }
    let ratios: Vec<f64> = truth
        .iter()
        .zip(mean)
        .zip(raw_sigma)
        .map(|((t, m), s)| (t - m).abs() / s.max(SIGMA_FLOOR))
        .collect();
    let alpha = 0.5 * quantile_linear(&ratios, 0.95);
    if !alpha.is_finite() || alpha == 0.0 {
        return Err(CoreError::DegenerateAlpha { alpha });
    }
    Ok(alpha)
}

/// Scale raw standard deviations by per-variable factors. `alphas[o]` must be
/// present for every output except `pressure_index`, whose factor is the
/// average of the factors of outputs 0 and 1.
pub fn apply_recalibration(
    summary: &PredictiveSummary,
    alphas: &[Option<f64>],
    pressure_index: Option<usize>,
) -> Result<PredictiveSummary> {
    let k = summary.n_outputs();
    if alphas.len() != k {
        return Err(CoreError::DimensionMismatch {
            expected: k,
            got: alphas.len(),
            context: "apply_recalibration",
        });
    }
    let mut factor = vec![0.0; k];
    for o in 0..k {
        factor[o] = match (alphas[o], pressure_index) {
            (Some(a), _) => a,
            (None, Some(p)) if p == o => {
                let au = alphas
                    .first()
                    .copied()
                    .flatten()
                    .ok_or_else(|| CoreError::MissingAlpha("u".into()))?;
                let av = alphas
                    .get(1)
                    .copied()
                    .flatten()
                    .ok_or_else(|| CoreError::MissingAlpha("v".into()))?;
                0.5 * (au + av)
            }
            (None, _) => return Err(CoreError::MissingAlpha(format!("output {o}"))),
        };
    }
    let cal_std: Vec<Vec<f64>> = summary
        .raw_std
        .iter()
        .map(|row| row.iter().zip(&factor).map(|(s, a)| a * s).collect())
        .collect();
    Ok(PredictiveSummary {
        cal_std: Some(cal_std),
        ..summary.clone()
    })
}

/// Fraction (percent) of points with `|e| < 2 sigma`, the mean
/// error-to-uncertainty ratio, and the RMSE.
pub fn coverage_metrics(truth: &[f64], mean: &[f64], sigma: &[f64]) -> Result<(f64, f64, f64)> {
    if truth.is_empty() || truth.len() != mean.len() || truth.len() != sigma.len() {
        return Err(CoreError::DimensionMismatch {
            expected: truth.len(),
            got: mean.len().min(sigma.len()),
            context: "coverage_metrics",
        });
    }
    let n = truth.len() as f64;
    let mut inside = 0usize;
    let mut ratio = 0.0;
    let mut sse = 0.0;
    for i in 0..truth.len() {
        let e = (truth[i] - mean[i]).abs();
        let s = sigma[i].max(SIGMA_FLOOR);
        if e < 2.0 * s {
            inside += 1;
        }
        ratio += e / s;
        sse += e * e;
    }
    Ok((
        100.0 * inside as f64 / n,
        ratio / n,
        (sse / n).sqrt(),
    ))
}

/// One row of a calibration report (one physical variable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableReport {
    pub name: String,
    pub rmse: f64,
    pub mean_raw_sigma: f64,
    pub mean_cal_sigma: f64,
    pub coverage_raw: f64,
    pub coverage_cal: f64,
    pub mean_ratio: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub variables: Vec<VariableReport>,
}

impl CalibrationReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "variable,rmse,sigma_raw,sigma_cal,c_raw,c_cal,ratio,alpha")?;
        for v in &self.variables {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
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
        Ok(())
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn variable(&self, name: &str) -> Option<&VariableReport> {
        self.variables.iter().find(|v| v.name == name)
    }
}

/// Build a per-variable calibration report: compute alpha on the evaluation
/// set, apply it, and summarize raw/calibrated coverage. `truth[o]` holds the
/// true values of output `o` at the summary's points; entries with `None`
/// are unobserved (pressure) and get the averaged factor.
pub fn calibration_report(
    names: &[&str],
    truth: &[Option<Vec<f64>>],
    summary: &PredictiveSummary,
    pressure_index: Option<usize>,
) -> Result<(CalibrationReport, PredictiveSummary)> {
    let k = summary.n_outputs();
    let mut alphas: Vec<Option<f64>> = vec![None; k];
    for o in 0..k {
        if Some(o) == pressure_index {
            continue;
        }
        let t = truth[o]
            .as_ref()
            .ok_or_else(|| CoreError::MissingAlpha(names[o].to_string()))?;
        alphas[o] = Some(recalibration_factor(
            t,
            &summary.mean_of(o),
            &summary.raw_std_of(o),
        )?);
    }
    let calibrated = apply_recalibration(summary, &alphas, pressure_index)?;
    let mut variables = Vec::new();
    for o in 0..k {
        let t = match &truth[o] {
            Some(t) => t.clone(),
            None => continue,
        };
        let mean = calibrated.mean_of(o);
        let raw = calibrated.raw_std_of(o);
        let cal = calibrated.cal_std_of(o).unwrap();
        let (c_raw, ratio, rmse) = coverage_metrics(&t, &mean, &raw)?;
        let (c_cal, _, _) = coverage_metrics(&t, &mean, &cal)?;
        let alpha = match alphas[o] {
            Some(a) => a,
            // Unobserved output: report the averaged factor itself so the
            // row is exact, not a cal/raw round trip.
            None => {
                let au = alphas.first().copied().flatten();
                let av = alphas.get(1).copied().flatten();
                match (au, av) {
                    (Some(au), Some(av)) => 0.5 * (au + av),
                    _ => cal[0] / raw[0].max(SIGMA_FLOOR),
                }
            }
        };
        variables.push(VariableReport {
            name: names[o].to_string(),
            rmse,
            mean_raw_sigma: raw.iter().sum::<f64>() / raw.len() as f64,
            mean_cal_sigma: cal.iter().sum::<f64>() / cal.len() as f64,
            coverage_raw: c_raw,
            coverage_cal: c_cal,
            mean_ratio: ratio,
            alpha,
        });
    }
    Ok((CalibrationReport { variables }, calibrated))
}

/// Rules for the tempering-exponent tuning loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRules {
    /// Raw coverage below this (percent) lowers beta.
    pub low: f64,
    /// Raw coverage above this raises beta.
    pub high: f64,
    /// Stopping band for every variable's raw coverage.
    pub band: (f64, f64),
    pub step: f64,
    pub max_iters: usize,
    /// Relative posterior-mean RMSE increase vs MAP that counts as degraded.
    pub rmse_degradation: f64,
}

impl Default for TuneRules {
    fn default() -> Self {
        Self {
            low: 90.0,
            high: 98.0,
            band: (70.0, 85.0),
            step: 0.05,
            max_iters: 10,
            rmse_degradation: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub beta: (f64, f64, f64),
    pub iterations: usize,
    pub converged: bool,
    /// `(beta, raw coverages)` per evaluated setting.
    pub history: Vec<((f64, f64, f64), Vec<f64>)>,
}

fn clamp_beta(b: f64) -> f64 {
    b.clamp(0.05 + f64::EPSILON, 1.0)
}

/// Iteratively adjust the tempering exponents until every variable's raw
/// coverage falls in the stopping band or the iteration cap is reached; on
/// cap, the setting whose coverages were closest to the band is returned.
pub fn tune_tempering_exponents<F>(
    mut run: F,
    init: (f64, f64, f64),
    rules: &TuneRules,
    map_rmse: &[f64],
) -> Result<TuneOutcome>
where
    F: FnMut(&(f64, f64, f64)) -> Result<CalibrationReport>,
{
    let mut beta = init;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, init);
    let mid = 0.5 * (rules.band.0 + rules.band.1);
    for it in 1..=rules.max_iters {
        let report = run(&beta)?;
        let coverages: Vec<f64> = report.variables.iter().map(|v| v.coverage_raw).collect();
        history.push((beta, coverages.clone()));
        let dist = coverages
            .iter()
            .map(|c| (c - mid).abs())
            .fold(0.0f64, f64::max);
        if dist < best.0 {
            best = (dist, beta);
        }
        let all_in_band = coverages
            .iter()
            .all(|&c| c >= rules.band.0 && c <= rules.band.1);
        if all_in_band {
            return Ok(TuneOutcome {
                beta,
                iterations: it,
                converged: true,
                history,
            });
        }
        let min_cov = coverages.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_cov = coverages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let degraded = report
            .variables
            .iter()
            .zip(map_rmse)
            .any(|(v, &m)| m > 0.0 && v.rmse > (1.0 + rules.rmse_degradation) * m);
        if min_cov < rules.low {
            beta = (
                clamp_beta(beta.0 - rules.step),
                clamp_beta(beta.1 - rules.step),
                clamp_beta(beta.2 - rules.step),
            );
        } else if max_cov > rules.high || degraded {
            beta = (
                clamp_beta(beta.0 + rules.step),
                clamp_beta(beta.1 + rules.step),
                clamp_beta(beta.2 + rules.step),
            );
        } else {
            // Between the hard thresholds but outside the band: nudge toward
            // the band midpoint.
            let dir = if min_cov > mid { 1.0 } else { -1.0 };
            beta = (
                clamp_beta(beta.0 + dir * rules.step),
                clamp_beta(beta.1 + dir * rules.step),
                clamp_beta(beta.2 + dir * rules.step),
            );
        }
    }
    Ok(TuneOutcome {
        beta: best.1,
        iterations: rules.max_iters,
        converged: false,
        history,
    })
}

/// Predictions of each parameter sample at the query points:
/// `out[sample][point][output]`.
pub fn sample_predictions(
    net: &NetworkSpec,
    samples: &[Vec<f64>],
    points: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .map(|row| {
            let p = ParamVector(row.clone());
            points
                .iter()
                .map(|x| crate::network::forward(net, &p, x, DropoutMode::Off))
                .collect()
        })
        .collect()
}

/// `S` stochastic forward passes with dropout active at inference.
pub fn mc_dropout_predict(
    net: &NetworkSpec,
    params: &ParamVector,
    points: &[Vec<f64>],
    s: usize,
    seed: u64,
) -> Result<PredictiveSummary> {
    let predictions: Vec<Vec<Vec<f64>>> = (0..s)
        .map(|i| {
            let mode = DropoutMode::Stochastic(crate::trainers::derive_seed(seed, i as u64));
            points
                .iter()
                .map(|x| crate::network::forward(net, params, x, mode))
                .collect()
        })
        .collect::<Result<_>>()?;
    predictive_stats(&predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predictive_stats_identical_samples_have_zero_std() {
        let sample = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let preds = vec![sample.clone(), sample.clone(), sample];
        let s = predictive_stats(&preds).unwrap();
        assert!(s.raw_std.iter().flatten().all(|&v| v == 0.0));
        assert!(s.collapsed);
    }

    #[test]
    fn predictive_stats_two_samples() {
        let preds = vec![vec![vec![1.0]], vec![vec![3.0]]];
        let s = predictive_stats(&preds).unwrap();
        assert_eq!(s.mean[0][0], 2.0);
        assert_eq!(s.raw_std[0][0], 1.0); // |a - b| / 2
    }

    #[test]
    fn predictive_stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<Vec<Vec<f64>>> = (0..50)
            .map(|_| {
                (0..7)
                    .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let s = predictive_stats(&preds).unwrap();
        for pt in 0..7 {
            for o in 0..3 {
                let vals: Vec<f64> = preds.iter().map(|p| p[pt][o]).collect();
                let m = vals.iter().sum::<f64>() / 50.0;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 50.0;
                assert!((s.mean[pt][o] - m).abs() < 1e-12);
                assert!((s.raw_std[pt][o] - var.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predictive_stats_mean_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut preds: Vec<Vec<Vec<f64>>> = (0..9)
            .map(|_| vec![(0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()])
            .collect();
        let a = predictive_stats(&preds).unwrap();
        preds.reverse();
        preds.swap(1, 4);
        let b = predictive_stats(&preds).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn predictive_stats_requires_two_samples() {
        let preds = vec![vec![vec![1.0]]];
        assert!(matches!(
            predictive_stats(&preds),
            Err(CoreError::TooFewSamples { need: 2, got: 1 })
        ));
    }

    #[test]
    fn recalibration_factor_constant_ratio() {
        let truth = vec![2.0; 20];
        let mean = vec![0.0; 20];
        let sigma = vec![1.0; 20];
        // |e|/sigma = 2 everywhere -> P95 = 2 -> alpha = 1.
        let a = recalibration_factor(&truth, &mean, &sigma).unwrap();
        assert!((a - 1.0).abs() < 1e-14);
    }

    #[test]
    fn recalibration_factor_quantile_interpolation() {
        // Ratios 1..=100 -> P95 = 95.05 with linear interpolation.
        let truth: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let mean = vec![0.0; 100];
        let sigma = vec![1.0; 100];
        let a = recalibration_factor(&truth, &mean, &sigma).unwrap();
        assert!((a - 95.05 / 2.0).abs() < 1e-12, "alpha {a}");
    }

    #[test]
    fn recalibration_factor_degenerate_when_errors_vanish() {
        let truth = vec![1.0; 10];
        let mean = vec![1.0; 10];
        let sigma = vec![0.5; 10];
        assert!(matches!(
            recalibration_factor(&truth, &mean, &sigma),
            Err(CoreError::DegenerateAlpha { .. })
        ));
    }

    fn random_summary(k: usize, q: usize, seed: u64) -> PredictiveSummary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictiveSummary {
            mean: (0..q)
                .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            raw_std: (0..q)
                .map(|_| (0..k).map(|_| rng.gen_range(0.01..1.0)).collect())
                .collect(),
            cal_std: None,
            n_samples: 10,
            collapsed: false,
        }
    }

    #[test]
    fn apply_recalibration_identity_and_pressure_rule() {
        let s = random_summary(5, 8, 3);
        let ones = vec![Some(1.0); 5];
        let cal = apply_recalibration(&s, &ones, None).unwrap();
        assert_eq!(cal.cal_std.as_ref().unwrap(), &s.raw_std);
        // alpha_u = 2, alpha_v = 4 -> alpha_P = 3.
        let alphas = vec![Some(2.0), Some(4.0), None, Some(1.0), Some(1.0)];
        let cal = apply_recalibration(&s, &alphas, Some(2)).unwrap();
        let c = cal.cal_std.unwrap();
        for pt in 0..8 {
            assert!((c[pt][2] - 3.0 * s.raw_std[pt][2]).abs() < 1e-14);
            assert!((c[pt][0] - 2.0 * s.raw_std[pt][0]).abs() < 1e-14);
        }
        // Missing alpha without a pressure rule is an error.
        assert!(apply_recalibration(&s, &alphas, None).is_err());
    }

    #[test]
    fn recalibration_preserves_sigma_ranks() {
        let s = random_summary(2, 30, 4);
        let alphas = vec![Some(1.7), Some(0.3)];
        let cal = apply_recalibration(&s, &alphas, None).unwrap();
        for o in 0..2 {
            let raw = s.raw_std_of(o);
            let c = cal.cal_std_of(o).unwrap();
            let rank = |v: &[f64]| -> Vec<usize> {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
                idx
            };
            assert_eq!(rank(&raw), rank(&c));
        }
    }

    #[test]
    fn coverage_metrics_boundary_cases() {
        let truth = vec![1.0, 2.0, 3.0];
        let (c, r, rmse) = coverage_metrics(&truth, &truth, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(c, 100.0);
        assert_eq!(r, 0.0);
        assert_eq!(rmse, 0.0);
        let mean = vec![0.0; 3];
        let sigma: Vec<f64> = truth.iter().map(|t| t / 3.0).collect();
        let (c, r, _) = coverage_metrics(&truth, &mean, &sigma).unwrap();
        assert_eq!(c, 0.0);
        assert!((r - 3.0).abs() < 1e-14);
    }

    #[test]
    fn coverage_metrics_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<f64> = (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean: Vec<f64> = (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..200).map(|_| rng.gen_range(0.1..1.5)).collect();
        let (c, r, rmse) = coverage_metrics(&truth, &mean, &sigma).unwrap();
        let mut inside = 0;
        let mut ratio = 0.0;
        let mut sse = 0.0;
        for i in 0..200 {
            let e = (truth[i] - mean[i]).abs();
            if e < 2.0 * sigma[i] {
                inside += 1;
            }
            ratio += e / sigma[i];
            sse += e * e;
        }
        assert!((c - 100.0 * inside as f64 / 200.0).abs() < 1e-12);
        assert!((r - ratio / 200.0).abs() < 1e-12);
        assert!((rmse * rmse - sse / 200.0).abs() < 1e-12);
    }

    #[test]
    fn recalibration_by_construction_covers_at_least_94_percent() {
        // On the calibration set itself, coverage after recalibration must
        // land in [94, 100] for >= 500 points.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 800;
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
        let mean: Vec<f64> = truth
            .iter()
            .zip(&sigma)
            .map(|(t, s)| {
                let z: f64 = {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                // Deliberately overconfident sigma: errors are 5x larger.
                t + 5.0 * s * z
            })
            .collect();
        let alpha = recalibration_factor(&truth, &mean, &sigma).unwrap();
        let cal: Vec<f64> = sigma.iter().map(|s| alpha * s).collect();
        let (c, _, _) = coverage_metrics(&truth, &mean, &cal).unwrap();
        assert!((94.0..=100.0).contains(&c), "coverage {c}");
    }

    #[test]
    fn tuning_converges_on_monotone_mock() {
        // Coverage rises as beta falls; hits 80% at beta 0.6.
        let mock = |beta: &(f64, f64, f64)| -> Result<CalibrationReport> {
            let cov = 80.0 + (0.6 - beta.0) * 400.0;
            Ok(CalibrationReport {
                variables: vec![VariableReport {
                    name: "u".into(),
                    rmse: 0.01,
                    mean_raw_sigma: 0.1,
                    mean_cal_sigma: 0.1,
                    coverage_raw: cov,
                    coverage_cal: 95.0,
                    mean_ratio: 1.0,
                    alpha: 1.0,
                }],
            })
        };
        let out = tune_tempering_exponents(
            mock,
            (0.7, 0.7, 0.7),
            &TuneRules::default(),
            &[0.01],
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 3, "iterations {}", out.iterations);
        assert!((out.beta.0 - 0.6).abs() < 1e-12, "beta {:?}", out.beta);
    }

    #[test]
    fn tuning_stops_immediately_in_band() {
        let mock = |_: &(f64, f64, f64)| -> Result<CalibrationReport> {
            Ok(CalibrationReport {
                variables: vec![VariableReport {
                    name: "u".into(),
                    rmse: 0.01,
                    mean_raw_sigma: 0.1,
                    mean_cal_sigma: 0.1,
                    coverage_raw: 77.0,
                    coverage_cal: 95.0,
                    mean_ratio: 1.0,
                    alpha: 1.0,
                }],
            })
        };
        let out = tune_tempering_exponents(
            mock,
            (0.7, 0.6, 0.5),
            &TuneRules::default(),
            &[0.01],
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.beta, (0.7, 0.6, 0.5));
    }

    #[test]
    fn tuning_caps_iterations_on_oscillating_mock() {
        // Coverage alternates far below and far above the band.
        let mut flip = false;
        let mock = move |_: &(f64, f64, f64)| -> Result<CalibrationReport> {
            flip = !flip;
            Ok(CalibrationReport {
                variables: vec![VariableReport {
                    name: "u".into(),
                    rmse: 0.01,
                    mean_raw_sigma: 0.1,
                    mean_cal_sigma: 0.1,
                    coverage_raw: if flip { 40.0 } else { 99.5 },
                    coverage_cal: 95.0,
                    mean_ratio: 1.0,
                    alpha: 1.0,
                }],
            })
        };
        let rules = TuneRules::default();
        let out =
            tune_tempering_exponents(mock, (0.7, 0.7, 0.7), &rules, &[0.01]).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, rules.max_iters);
        assert!(out.beta.0 > 0.05 && out.beta.0 <= 1.0);
    }

    #[test]
    fn beta_stays_clamped() {
        let mock = |_: &(f64, f64, f64)| -> Result<CalibrationReport> {
            Ok(CalibrationReport {
                variables: vec![VariableReport {
                    name: "u".into(),
                    rmse: 0.01,
                    mean_raw_sigma: 0.1,
                    mean_cal_sigma: 0.1,
                    coverage_raw: 10.0, // always forces beta downward
                    coverage_cal: 95.0,
                    mean_ratio: 1.0,
                    alpha: 1.0,
                }],
            })
        };
        let rules = TuneRules {
            max_iters: 10,
            ..TuneRules::default()
        };
        let out = tune_tempering_exponents(mock, (0.1, 0.1, 0.1), &rules, &[0.01]).unwrap();
        assert!(out.beta.0 > 0.05);
    }

    #[test]
    fn mc_dropout_predict_basics() {
        use crate::network::{init_params, NetworkSpec};
        let net = NetworkSpec::new(vec![1, 16, 1]).with_dropout(0.2);
        let params = init_params(&net, 7);
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![0.2 * i as f64]).collect();
        let a = mc_dropout_predict(&net, &params, &points, 200, 11).unwrap();
        let b = mc_dropout_predict(&net, &params, &points, 200, 11).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.raw_std, b.raw_std);
        assert!(!a.collapsed);
        assert!(a.raw_std.iter().flatten().any(|&s| s > 0.0));
        // Rate 0 degenerates to zero spread.
        let net0 = NetworkSpec::new(vec![1, 16, 1]);
        let p0 = init_params(&net0, 7);
        let d = mc_dropout_predict(&net0, &p0, &points, 50, 11).unwrap();
        assert!(d.collapsed);
    }

    #[test]
    fn dropout_mask_survival_frequency() {
        // Single hidden unit: the output differs from the bias only when the
        // unit survives; survival frequency ~ Bernoulli(1 - p).
        use crate::network::{DropoutMode, NetworkSpec};
        let net = NetworkSpec::new(vec![1, 1, 1]).with_dropout(0.3);
        let mut params = ParamVector::zeros(net.param_count());
        params.0[0] = 1.0; // hidden weight
        params.0[1] = 0.0; // hidden bias
        params.0[2] = 1.0; // output weight
        params.0[3] = 0.0; // output bias
        let s = 10_000;
        let mut survived = 0usize;
        for i in 0..s {
            let y = crate::network::forward(
                &net,
                &params,
                &[1.0],
                DropoutMode::Stochastic(crate::trainers::derive_seed(3, i as u64)),
            )
            .unwrap();
            if y[0].abs() > 1e-9 {
                survived += 1;
            }
        }
        let freq = survived as f64 / s as f64;
        let se = (0.3f64 * 0.7 / s as f64).sqrt();
        assert!(
            (freq - 0.7).abs() < 3.0 * se,
            "survival {freq}, se {se}"
        );
    }

    #[test]
    fn calibration_report_roundtrip_and_pressure_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 600;
        let mut mean = Vec::new();
        let mut raw = Vec::new();
        let mut t_u = Vec::new();
        let mut t_v = Vec::new();
        for _ in 0..n {
            let m: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..0.2)).collect();
            t_u.push(m[0] + rng.gen_range(-0.3..0.3));
            t_v.push(m[1] + rng.gen_range(-0.3..0.3));
            mean.push(m);
            raw.push(s);
        }
        let summary = PredictiveSummary {
            mean,
            raw_std: raw,
            cal_std: None,
            n_samples: 100,
            collapsed: false,
        };
        let truth = vec![Some(t_u), Some(t_v), None];
        let (report, calibrated) =
            calibration_report(&["u", "v", "p"], &truth, &summary, Some(2)).unwrap();
        assert_eq!(report.variables.len(), 2);
        for v in &report.variables {
            assert!((94.0..=100.0).contains(&v.coverage_cal), "{v:?}");
        }
        // Pressure factor is exactly the average of alpha_u and alpha_v.
        let au = report.variable("u").unwrap().alpha;
        let av = report.variable("v").unwrap().alpha;
        let c = calibrated.cal_std.as_ref().unwrap();
        let expect = 0.5 * (au + av);
        for pt in 0..n {
            let got = c[pt][2] / summary.raw_std[pt][2];
            assert!((got - expect).abs() < 1e-12);
        }
        // CSV/JSON round trip.
        let dir = std::env::temp_dir().join("uq_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let jp = dir.join("report.json");
        report.write_json(&jp).unwrap();
        let loaded = CalibrationReport::load_json(&jp).unwrap();
        assert_eq!(loaded.variables.len(), report.variables.len());
        assert_eq!(loaded.variable("u").unwrap().alpha, au);
        report.write_csv(&dir.join("report.csv")).unwrap();
        let text = std::fs::read_to_string(dir.join("report.csv")).unwrap();
        assert!(text.starts_with("variable,rmse,sigma_raw,sigma_cal,c_raw,c_cal,ratio,alpha"));
    }
}
