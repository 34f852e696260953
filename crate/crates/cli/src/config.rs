//! Experiment configuration: a flat key-value schema with per-problem,
//! per-method defaults, parsed from either a `key = value` text file or the
//! JSON equivalent. Unknown keys are rejected.

use pinn_uq_core::{CoreError, Result};
use serde::{Deserialize, Serialize};

pub const PROBLEMS: &[&str] = &["vdp", "rans-manufactured", "rans-csv"];
pub const METHODS: &[&str] = &[
    "bpinn-hmc",
    "bpinn-nuts",
    "mc-dropout",
    "rde-function",
    "rde-parameter",
    "vanilla-ensemble",
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub method: String,
    /// Reference grid CSV; required when problem = rans-csv.
    pub csv_path: String,
    pub seed: u64,
    /// Normalized to "" inside manifests; the output directory is always
    /// taken from the command line.
    pub out_dir: String,

    // Network.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,

    // Data generation.
    pub noise_sigma: f64,
    pub n_collocation: usize,
    pub obs_stride: usize,
    pub n_obs: usize,
    pub t_end: f64,
    pub reynolds: f64,
    pub n_test: usize,

    // Posterior.
    pub sigma_prior: f64,
    pub sigma_pde: f64,
    pub beta_d: f64,
    pub beta_f: f64,
    pub beta_r: f64,
    pub residual_scale: f64,

    // Staged MAP pre-training.
    pub map_pretrain: bool,
    pub stage_a_iters: usize,
    pub stage_b_iters: usize,
    pub stage_c_iters: usize,
    pub ramp_window: usize,
    pub pde_minibatch: usize,
    pub lr_a: f64,
    pub lr_b: f64,

    // HMC.
    pub hmc_step_size: f64,
    pub hmc_leapfrog: usize,
    pub hmc_burn_in: usize,
    pub hmc_samples: usize,

    // NUTS.
    pub nuts_max_depth: usize,
    pub nuts_target_accept: f64,
    pub nuts_warmup: usize,
    pub nuts_samples: usize,
    pub nuts_subsample: usize,

    // MC dropout.
    pub dropout_epochs: usize,
    pub dropout_lr: f64,
    pub dropout_passes: usize,

    // Ensembles.
    pub n_members: usize,
    pub ensemble_epochs: usize,
    pub ensemble_lr: f64,
    pub weight_decay: f64,
    pub lambda_pde: f64,
    pub lambda_rep: f64,
    pub n_repulsion: usize,
    /// Kernel bandwidth; 0 selects the median heuristic.
    pub repulsion_bandwidth: f64,
}

fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    /// Default configuration for a problem/method pair.
    pub fn defaults(problem: &str, method: &str) -> Result<Self> {
        if !PROBLEMS.contains(&problem) {
            return Err(config_err(format!(
                "unknown problem '{problem}' (expected one of {PROBLEMS:?})"
            )));
        }
        if !METHODS.contains(&method) {
            return Err(config_err(format!(
                "unknown method '{method}' (expected one of {METHODS:?})"
            )));
        }
        let vdp = problem == "vdp";
        let mut cfg = Self {
            problem: problem.to_string(),
            method: method.to_string(),
            csv_path: String::new(),
            seed: 0,
            out_dir: String::new(),
            hidden_layers: if vdp { 2 } else { 5 },
            hidden_width: if vdp { 50 } else { 64 },
            dropout_rate: 0.0,
            noise_sigma: 0.05,
            n_collocation: if vdp { 120 } else { 2_000 },
            obs_stride: 1_500,
            n_obs: 200,
            t_end: 1.5,
            reynolds: if problem == "rans-manufactured" {
                100.0
            } else {
                3_900.0
            },
            n_test: if vdp { 1_001 } else { 800 },
            sigma_prior: if vdp { 1.0 } else { 2.0 },
            sigma_pde: if vdp { 0.05 } else { 0.3 },
            beta_d: if vdp { 1.0 } else { 0.70 },
            beta_f: if vdp { 1.0 } else { 0.60 },
            beta_r: if vdp { 1.0 } else { 0.50 },
            residual_scale: if vdp { 1e-4 } else { 1.0 },
            map_pretrain: true,
            stage_a_iters: 5_000,
            stage_b_iters: 10_000,
            stage_c_iters: 5_000,
            ramp_window: 5_000,
            pde_minibatch: 2_000,
            lr_a: 1e-3,
            lr_b: 1e-3,
            hmc_step_size: 0.01,
            hmc_leapfrog: 50,
            hmc_burn_in: 1_000,
            hmc_samples: 1_000,
            nuts_max_depth: 6,
            nuts_target_accept: 0.65,
            nuts_warmup: 500,
            nuts_samples: 500,
            nuts_subsample: 1_000,
            dropout_epochs: 200_000,
            dropout_lr: 1e-4,
            dropout_passes: 1_000,
            n_members: 10,
            ensemble_epochs: if vdp { 300_000 } else { 100_000 },
            ensemble_lr: if vdp { 1e-4 } else { 1e-3 },
            weight_decay: 1e-4,
            lambda_pde: 1.0,
            lambda_rep: 1.0,
            n_repulsion: if vdp { 64 } else { 200 },
            repulsion_bandwidth: 0.0,
        };
        match method {
            "mc-dropout" => {
                if vdp {
                    cfg.hidden_layers = 4;
                    cfg.hidden_width = 48;
                }
                cfg.dropout_rate = 0.001;
            }
            "rde-function" | "rde-parameter" | "vanilla-ensemble" => {
                if vdp {
                    cfg.hidden_layers = 4;
                    cfg.hidden_width = 32;
                    cfg.n_collocation = 200;
                }
                if method == "vanilla-ensemble" {
                    cfg.lambda_rep = 0.0;
                }
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !PROBLEMS.contains(&self.problem.as_str()) {
            return Err(config_err(format!("unknown problem '{}'", self.problem)));
        }
        if !METHODS.contains(&self.method.as_str()) {
            return Err(config_err(format!("unknown method '{}'", self.method)));
        }
        if self.problem == "rans-csv" && self.csv_path.is_empty() {
            return Err(config_err("problem rans-csv requires csv_path"));
        }
        if self.method == "mc-dropout" && !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(config_err("mc-dropout requires dropout_rate in (0, 1)"));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(config_err("network needs at least one hidden unit"));
        }
        if self.n_collocation == 0 || self.n_test == 0 {
            return Err(config_err("n_collocation and n_test must be positive"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("sigma_prior", self.sigma_prior),
            ("sigma_pde", self.sigma_pde),
            ("t_end", self.t_end),
            ("reynolds", self.reynolds),
            ("residual_scale", self.residual_scale),
            ("hmc_step_size", self.hmc_step_size),
            ("nuts_target_accept", self.nuts_target_accept),
        ] {
            if !(v > 0.0) {
                return Err(config_err(format!("{name} must be > 0")));
            }
        }
        for (name, b) in [
            ("beta_d", self.beta_d),
            ("beta_f", self.beta_f),
            ("beta_r", self.beta_r),
        ] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(config_err(format!("{name} must be in (0, 1]")));
            }
        }
        if self.is_ensemble() && self.n_members < 2 {
            return Err(config_err("ensembles need n_members >= 2"));
        }
        Ok(())
    }

    pub fn is_ensemble(&self) -> bool {
        matches!(
            self.method.as_str(),
            "rde-function" | "rde-parameter" | "vanilla-ensemble"
        )
    }

    /// Network layer widths for this configuration.
    pub fn layers(&self) -> Vec<usize> {
        let (input, output) = if self.problem == "vdp" { (1, 1) } else { (2, 5) };
        let mut layers = vec![input];
        layers.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        layers.push(output);
        layers
    }

    /// Render as the key = value text format (also what `show-defaults`
    /// prints).
    pub fn to_key_value(&self) -> String {
        let obj = match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut out = String::new();
        for (k, v) in obj {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parse a config file (JSON if it starts with '{', key = value
    /// otherwise), applying defaults for the declared problem/method and
    /// rejecting unknown keys.
    pub fn from_str(text: &str) -> Result<Self> {
        let overlay = parse_overlay(text)?;
        Self::from_overlay(overlay)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Build a config from defaults plus explicit key overrides.
    pub fn from_overlay(overlay: serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let get_str = |key: &str| -> Result<String> {
            match overlay.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(other) => Err(config_err(format!("{key} must be a string, got {other}"))),
                None => Err(config_err(format!("missing required key '{key}'"))),
            }
        };
        let problem = get_str("problem")?;
        let method = get_str("method")?;
        let defaults = Self::defaults(&problem, &method)?;
        let mut obj = match serde_json::to_value(&defaults)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        for (k, v) in overlay {
            if !obj.contains_key(&k) {
                return Err(config_err(format!("unknown config key '{k}'")));
            }
            obj.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| config_err(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse either JSON or `key = value` lines into an overlay map.
pub fn parse_overlay(text: &str) -> Result<serde_json::Map<String, serde_json::Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| config_err(format!("invalid JSON config: {e}")))?;
        return match v {
            serde_json::Value::Object(m) => Ok(m),
            _ => Err(config_err("JSON config must be an object")),
        };
    }
    let mut map = serde_json::Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_err(format!("line {}: expected 'key = value'", i + 1))
        })?;
        map.insert(key.trim().to_string(), coerce(value.trim()));
    }
    Ok(map)
}

/// Interpret a raw value: JSON scalar if it parses, bare string otherwise.
pub fn coerce(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}
