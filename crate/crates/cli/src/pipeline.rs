//! End-to-end experiment execution: dataset construction, method dispatch,
//! and run-directory artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use pinn_uq_core::data_io::{
    integrate_vdp, load_grid_csv, make_vdp_observations, sample_collocation, manufactured_fields_at,
    CircleMask, Domain, ManufacturedParams,
};
use pinn_uq_core::network::{init_params, InputNorm, NetworkSpec};
use pinn_uq_core::physics::{Problem, VdpParams};
use pinn_uq_core::posterior::{
    NegLogPosterior, ObservationSet, ObservedComponent, RepulsionVariant, TemperedPosteriorSpec,
};
use pinn_uq_core::samplers::{
    fixed_subsample, hmc_sample, nuts_sample, preconditioner_mass, HmcConfig, NegatedLoss,
    NutsConfig,
};
use pinn_uq_core::trainers::{
    derive_seed, run_map_pretraining, train_mc_dropout, train_repulsive_ensemble, EnsemblePlan,
    LossRecord, StagePlan, write_loss_history_csv,
};
use pinn_uq_core::uq::{
    calibration_report, mc_dropout_predict, predictive_stats, sample_predictions,
    CalibrationReport, PredictiveSummary,
};
use pinn_uq_core::{CoreError, Result};

use crate::config::ExperimentConfig;

// Seed streams: every RNG consumer derives from the config seed with a
// distinct stream index so that runs are fully reproducible.
const STREAM_OBS_NOISE: u64 = 1_000;
const STREAM_OBS_POINTS: u64 = 1_500;
const STREAM_COLLOCATION: u64 = 2_000;
const STREAM_TEST: u64 = 3_000;
const STREAM_REPULSION: u64 = 3_500;
const STREAM_INIT: u64 = 10;
const STREAM_TRAIN: u64 = 20;
const STREAM_SAMPLER: u64 = 30;
const STREAM_SUBSAMPLE: u64 = 31;
const STREAM_MASS: u64 = 32;
const STREAM_PREDICT: u64 = 40;

/// Everything a method pipeline needs: observations, collocation/test
/// points, and per-output ground truth on the test points.
pub struct Dataset {
    pub observations: ObservationSet,
    pub collocation: Vec<Vec<f64>>,
    pub test_points: Vec<Vec<f64>>,
    /// Ground truth per network output on the test points; `None` where the
    /// reference data lacks the field.
    pub truth: Vec<Option<Vec<f64>>>,
    pub names: Vec<&'static str>,
    pub problem: Problem,
    /// Output index inferred without observations (pressure), if any.
    pub pressure_index: Option<usize>,
    /// Extra points for the functional repulsion term.
    pub repulsion_points: Vec<Vec<f64>>,
}

/// Artifacts of a completed run.
pub struct RunOutputs {
    pub report: CalibrationReport,
    pub summary: PredictiveSummary,
    pub out_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: ExperimentConfig,
    pub versions: std::collections::BTreeMap<String, String>,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.problem.as_str() {
        "vdp" => build_vdp_dataset(cfg),
        "rans-manufactured" => build_manufactured_dataset(cfg),
        "rans-csv" => build_csv_dataset(cfg),
        other => Err(CoreError::InvalidConfig(format!("unknown problem '{other}'"))),
    }
}

fn build_vdp_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let params = VdpParams::paper_defaults();
    let traj = integrate_vdp(&params, 1.0, 0.0, cfg.t_end, 1e-9)?;
    let observations = make_vdp_observations(
        &traj,
        cfg.obs_stride,
        cfg.noise_sigma,
        derive_seed(cfg.seed, STREAM_OBS_NOISE),
    )?;
    let domain = Domain {
        lo: vec![0.0],
        hi: vec![cfg.t_end],
    };
    let collocation = sample_collocation(
        &domain,
        cfg.n_collocation,
        derive_seed(cfg.seed, STREAM_COLLOCATION),
        None,
    )?;
    // Uniformly spaced test points drawn from the dense reference grid.
    let n = cfg.n_test.min(traj.times.len());
    let mut test_points = Vec::with_capacity(n);
    let mut truth_u = Vec::with_capacity(n);
    for i in 0..n {
        let idx = i * (traj.times.len() - 1) / (n - 1).max(1);
        test_points.push(vec![traj.times[idx]]);
        truth_u.push(traj.values[idx]);
    }
    let repulsion_points = sample_collocation(
        &domain,
        cfg.n_repulsion.max(1),
        derive_seed(cfg.seed, STREAM_REPULSION),
        None,
    )?;
    Ok(Dataset {
        observations,
        collocation,
        test_points,
        truth: vec![Some(truth_u)],
        names: vec!["u"],
        problem: Problem::Vdp {
            params,
            residual_scale: cfg.residual_scale,
        },
        pressure_index: None,
        repulsion_points,
    })
}

fn rans_domain() -> (Domain, CircleMask) {
    (
        Domain {
            lo: vec![-2.0, -3.0],
            hi: vec![8.0, 3.0],
        },
        CircleMask {
            center: (0.0, 0.0),
            radius: 0.5,
        },
    )
}

const RANS_NAMES: [&str; 5] = ["U", "V", "P", "fx", "fy"];
/// Output indices carrying observations in the RANS problems (pressure,
/// index 2, is never observed).
const RANS_OBSERVED: [usize; 4] = [0, 1, 3, 4];

fn build_manufactured_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mp = ManufacturedParams::default();
    let (domain, mask) = rans_domain();
    let obs_points = sample_collocation(
        &domain,
        cfg.n_obs,
        derive_seed(cfg.seed, STREAM_OBS_POINTS),
        Some(&mask),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_OBS_NOISE));
    let normal = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|_| CoreError::InvalidConfig("noise_sigma".into()))?;
    let mut components: Vec<ObservedComponent> = RANS_OBSERVED
        .iter()
        .map(|&idx| ObservedComponent {
            output_index: idx,
            values: Vec::with_capacity(obs_points.len()),
        })
        .collect();
    for p in &obs_points {
        let f = manufactured_fields_at(cfg.reynolds, &mp, p[0], p[1]);
        for (c, clean) in components.iter_mut().zip([f.u, f.v, f.f_x, f.f_y]) {
            c.values.push(clean + normal.sample(&mut rng));
        }
    }
    let collocation = sample_collocation(
        &domain,
        cfg.n_collocation,
        derive_seed(cfg.seed, STREAM_COLLOCATION),
        Some(&mask),
    )?;
    let test_points = sample_collocation(
        &domain,
        cfg.n_test,
        derive_seed(cfg.seed, STREAM_TEST),
        Some(&mask),
    )?;
    let mut truth: Vec<Vec<f64>> = vec![Vec::with_capacity(test_points.len()); 5];
    for p in &test_points {
        let f = manufactured_fields_at(cfg.reynolds, &mp, p[0], p[1]);
        for (t, v) in truth.iter_mut().zip([f.u, f.v, f.p, f.f_x, f.f_y]) {
            t.push(v);
        }
    }
    let repulsion_points = sample_collocation(
        &domain,
        cfg.n_repulsion.max(1),
        derive_seed(cfg.seed, STREAM_REPULSION),
        Some(&mask),
    )?;
    Ok(Dataset {
        observations: ObservationSet {
            points: obs_points,
            components,
        },
        collocation,
        test_points,
        truth: truth.into_iter().map(Some).collect(),
        names: RANS_NAMES.to_vec(),
        problem: Problem::Rans { re: cfg.reynolds },
        pressure_index: Some(2),
        repulsion_points,
    })
}

fn build_csv_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let grid = load_grid_csv(Path::new(&cfg.csv_path))?;
    if grid.is_empty() {
        return Err(CoreError::InvalidConfig("reference grid is empty".into()));
    }
    let (u, v) = match (&grid.u, &grid.v) {
        (Some(u), Some(v)) => (u, v),
        _ => {
            return Err(CoreError::InvalidConfig(
                "reference grid must provide U and V columns".into(),
            ))
        }
    };
    let n_rows = grid.len();
    let pick = |n: usize, stream: u64| -> Vec<usize> {
        if n >= n_rows {
            return (0..n_rows).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n_rows, n).into_vec();
        idx.sort_unstable();
        idx
    };
    let obs_idx = pick(cfg.n_obs, STREAM_OBS_POINTS);
    let test_idx = pick(cfg.n_test, STREAM_TEST);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_OBS_NOISE));
    let normal = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|_| CoreError::InvalidConfig("noise_sigma".into()))?;
    let columns: [(usize, Option<&Vec<f64>>); 4] = [
        (0, Some(u)),
        (1, Some(v)),
        (3, grid.fx.as_ref()),
        (4, grid.fy.as_ref()),
    ];
    let mut components = Vec::new();
    for (output_index, col) in columns {
        if let Some(col) = col {
            let values = obs_idx
                .iter()
                .map(|&i| col[i] + normal.sample(&mut rng))
                .collect();
            components.push(ObservedComponent {
                output_index,
                values,
            });
        }
    }
    let obs_points: Vec<Vec<f64>> = obs_idx.iter().map(|&i| vec![grid.x[i], grid.y[i]]).collect();
    let test_points: Vec<Vec<f64>> =
        test_idx.iter().map(|&i| vec![grid.x[i], grid.y[i]]).collect();
    let take = |col: &Option<Vec<f64>>| -> Option<Vec<f64>> {
        col.as_ref().map(|c| test_idx.iter().map(|&i| c[i]).collect())
    };
    let truth = vec![take(&grid.u), take(&grid.v), take(&grid.p), take(&grid.fx), take(&grid.fy)];

    // Collocation over the data bounding box; the file carries no mask.
    let (lo_x, hi_x) = min_max(&grid.x);
    let (lo_y, hi_y) = min_max(&grid.y);
    let domain = Domain {
        lo: vec![lo_x, lo_y],
        hi: vec![hi_x, hi_y],
    };
    let collocation = sample_collocation(
        &domain,
        cfg.n_collocation,
        derive_seed(cfg.seed, STREAM_COLLOCATION),
        None,
    )?;
    let repulsion_points = sample_collocation(
        &domain,
        cfg.n_repulsion.max(1),
        derive_seed(cfg.seed, STREAM_REPULSION),
        None,
    )?;
    Ok(Dataset {
        observations: ObservationSet {
            points: obs_points,
            components,
        },
        collocation,
        test_points,
        truth,
        names: RANS_NAMES.to_vec(),
        problem: Problem::Rans { re: cfg.reynolds },
        pressure_index: Some(2),
        repulsion_points,
    })
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v.max(lo.min(v) + 1e-9)))
    })
}

fn posterior_spec(cfg: &ExperimentConfig, data: &Dataset) -> TemperedPosteriorSpec {
    let mut spec = if cfg.problem == "vdp" {
        TemperedPosteriorSpec::vdp_defaults(data.observations.len(), data.collocation.len())
    } else {
        TemperedPosteriorSpec::rans_defaults(data.observations.len(), data.collocation.len())
    };
    spec.sigma_prior = cfg.sigma_prior;
    spec.sigma_u = cfg.noise_sigma;
    spec.sigma_v = cfg.noise_sigma;
    spec.sigma_fx = cfg.noise_sigma;
    spec.sigma_fy = cfg.noise_sigma;
    spec.sigma_pde = cfg.sigma_pde;
    spec.beta_d = cfg.beta_d;
    spec.beta_f = cfg.beta_f;
    spec.beta_r = cfg.beta_r;
    spec
}

fn network_spec(cfg: &ExperimentConfig, data: &Dataset) -> NetworkSpec {
    let mut net = NetworkSpec::new(cfg.layers())
        .with_input_norm(InputNorm::from_points(&data.collocation));
    if cfg.method == "mc-dropout" {
        net = net.with_dropout(cfg.dropout_rate);
    }
    net
}

fn stage_plan(cfg: &ExperimentConfig) -> StagePlan {
    StagePlan {
        stage_a_iters: cfg.stage_a_iters,
        stage_b_iters: cfg.stage_b_iters,
        stage_c_iters: cfg.stage_c_iters,
        ramp_window: cfg.ramp_window,
        pde_minibatch: cfg.pde_minibatch,
        lr_a: cfg.lr_a,
        lr_b: cfg.lr_b,
        ..StagePlan::paper_defaults()
    }
}

/// Run one experiment and write all artifacts into `out_dir`.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data = build_dataset(cfg)?;
    let net = network_spec(cfg, &data);
    let spec = posterior_spec(cfg, &data);
    let init = init_params(&net, derive_seed(cfg.seed, STREAM_INIT));

    let mut history: Vec<LossRecord> = Vec::new();

    let summary = match cfg.method.as_str() {
        "bpinn-hmc" | "bpinn-nuts" => {
            let start = if cfg.map_pretrain {
                let (map, h) = run_map_pretraining(
                    &net,
                    &init,
                    &data.observations,
                    &data.collocation,
                    &spec,
                    &data.problem,
                    &stage_plan(cfg),
                    derive_seed(cfg.seed, STREAM_TRAIN),
                )?;
                history = h;
                map
            } else {
                init.clone()
            };
            let samples = if cfg.method == "bpinn-hmc" {
                let loss = NegLogPosterior {
                    spec: &spec,
                    net: &net,
                    obs: &data.observations,
                    collocation: &data.collocation,
                    problem: &data.problem,
                    physics_weight: 1.0,
                };
                let target = NegatedLoss(&loss);
                // Precondition with the posterior curvature at the start
                // point: the stiffest parameter directions are several
                // orders sharper than the prior scale, and the fixed step
                // with an identity metric would sit outside the leapfrog
                // stability region.
                let mass = preconditioner_mass(
                    &loss,
                    &start.0,
                    cfg.hmc_step_size,
                    1.0 / (cfg.sigma_prior * cfg.sigma_prior),
                    64,
                    derive_seed(cfg.seed, STREAM_MASS),
                )?;
                let hmc = HmcConfig {
                    step_size: cfg.hmc_step_size,
                    n_leapfrog: cfg.hmc_leapfrog,
                    burn_in: cfg.hmc_burn_in,
                    n_samples: cfg.hmc_samples,
                    abort_on_all_rejected: true,
                    mass_diag: Some(mass),
                };
                hmc_sample(&target, &start.0, &hmc, derive_seed(cfg.seed, STREAM_SAMPLER))?
            } else {
                // The physics likelihood uses a frozen collocation subsample;
                // the tempered weight still reflects the full N_c.
                let subsample = fixed_subsample(
                    &data.collocation,
                    cfg.nuts_subsample,
                    derive_seed(cfg.seed, STREAM_SUBSAMPLE),
                );
                let loss = NegLogPosterior {
                    spec: &spec,
                    net: &net,
                    obs: &data.observations,
                    collocation: &subsample,
                    problem: &data.problem,
                    physics_weight: 1.0,
                };
                let target = NegatedLoss(&loss);
                let nuts = NutsConfig {
                    max_tree_depth: cfg.nuts_max_depth,
                    target_accept: cfg.nuts_target_accept,
                    warmup: cfg.nuts_warmup,
                    n_samples: cfg.nuts_samples,
                    collocation_subsample: cfg.nuts_subsample,
                };
                nuts_sample(&target, &start.0, &nuts, derive_seed(cfg.seed, STREAM_SAMPLER))?
            };
            samples.write_csv(&out_dir.join("samples.csv"))?;
            samples.write_diagnostics_json(&out_dir.join("diagnostics.json"))?;
            let preds = sample_predictions(&net, &samples.samples, &data.test_points)?;
            predictive_stats(&preds)?
        }
        "mc-dropout" => {
            let (params, h) = train_mc_dropout(
                &net,
                &init,
                &data.observations,
                &data.collocation,
                &data.problem,
                cfg.dropout_epochs,
                cfg.dropout_lr,
                cfg.weight_decay,
                cfg.lambda_pde,
                cfg.ramp_window,
                derive_seed(cfg.seed, STREAM_TRAIN),
            )?;
            history = h;
            write_param_rows(&out_dir.join("samples.csv"), std::slice::from_ref(&params.0))?;
            mc_dropout_predict(
                &net,
                &params,
                &data.test_points,
                cfg.dropout_passes,
                derive_seed(cfg.seed, STREAM_PREDICT),
            )?
        }
        "rde-function" | "rde-parameter" | "vanilla-ensemble" => {
            let plan = EnsemblePlan {
                n_members: cfg.n_members,
                epochs: cfg.ensemble_epochs,
                lr0: cfg.ensemble_lr,
                weight_decay: cfg.weight_decay,
                lambda_pde: cfg.lambda_pde,
                lambda_rep: if cfg.method == "vanilla-ensemble" {
                    0.0
                } else {
                    cfg.lambda_rep
                },
                variant: if cfg.method == "rde-parameter" {
                    RepulsionVariant::ParameterSpace
                } else {
                    RepulsionVariant::FunctionSpace
                },
                bandwidth: cfg.repulsion_bandwidth,
                bandwidth_warmup_frac: 0.1,
                repulsion_points: data.repulsion_points.clone(),
                ramp_window: cfg.ramp_window,
                pde_minibatch: cfg.pde_minibatch,
                log_every: 100,
            };
            let (members, h) = train_repulsive_ensemble(
                &net,
                &data.observations,
                &data.collocation,
                &data.problem,
                &plan,
                derive_seed(cfg.seed, STREAM_TRAIN),
            )?;
            history = h;
            let rows: Vec<Vec<f64>> = members.iter().map(|m| m.0.clone()).collect();
            write_param_rows(&out_dir.join("samples.csv"), &rows)?;
            let preds = sample_predictions(&net, &rows, &data.test_points)?;
            predictive_stats(&preds)?
        }
        other => {
            return Err(CoreError::InvalidConfig(format!("unknown method '{other}'")))
        }
    };

    // Pressure is inferred only up to a gauge constant; align it to the
    // reference by mean-matching before scoring.
    let mut summary = summary;
    if let Some(pi) = data.pressure_index {
        if let Some(truth_p) = &data.truth[pi] {
            let n = truth_p.len() as f64;
            let offset = truth_p.iter().sum::<f64>() / n
                - summary.mean.iter().map(|row| row[pi]).sum::<f64>() / n;
            for row in summary.mean.iter_mut() {
                row[pi] += offset;
            }
        }
    }

    let (report, calibrated) =
        calibration_report(&data.names, &data.truth, &summary, data.pressure_index)?;

    write_loss_history_csv(&out_dir.join("loss_history.csv"), &history)?;
    report.write_csv(&out_dir.join("report.csv"))?;
    report.write_json(&out_dir.join("report.json"))?;
    write_predictive_csv(&out_dir.join("predictive.csv"), &data, &calibrated)?;
    write_manifest(&out_dir.join("manifest.json"), cfg)?;
    Ok(RunOutputs {
        report,
        summary: calibrated,
        out_dir: out_dir.to_path_buf(),
    })
}

fn write_param_rows(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Tidy per-point, per-variable prediction table for external plotting.
fn write_predictive_csv(path: &Path, data: &Dataset, summary: &PredictiveSummary) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = data.test_points.first().map_or(1, |p| p.len());
    let coords = if dim == 1 { "x" } else { "x,y" };
    writeln!(f, "{coords},variable,truth,mean,sigma_raw,sigma_cal,abs_err")?;
    for (pi, point) in data.test_points.iter().enumerate() {
        let coord: Vec<String> = point.iter().map(|v| format!("{v}")).collect();
        for (o, name) in data.names.iter().enumerate() {
            let mean = summary.mean[pi][o];
            let raw = summary.raw_std[pi][o];
            let cal = summary
                .cal_std
                .as_ref()
                .map_or(String::new(), |c| format!("{}", c[pi][o]));
            let (truth, err) = match &data.truth[o] {
                Some(t) => (format!("{}", t[pi]), format!("{}", (t[pi] - mean).abs())),
                None => (String::new(), String::new()),
            };
            writeln!(
                f,
                "{},{name},{truth},{mean},{raw},{cal},{err}",
                coord.join(",")
            )?;
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut normalized = cfg.clone();
    normalized.out_dir = String::new();
    let mut versions = std::collections::BTreeMap::new();
    versions.insert(
        "pinn-uq-cli".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    let manifest = Manifest {
        format: 1,
        config: normalized,
        versions,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    m.config.validate()?;
    Ok(m)
}

/// One-line-per-variable text rendering of a report.
pub fn render_report(method: &str, report: &CalibrationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:<8} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "variable", "rmse", "sigma_raw", "sigma_cal", "c_raw", "c_cal", "ratio", "alpha"
    ));
    for v in &report.variables {
        out.push_str(&format!(
            "{:<18} {:<8} {:>10.4} {:>10.4} {:>10.4} {:>7.1}% {:>7.1}% {:>8.3} {:>8.3}\n",
            method,
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
    out
}
