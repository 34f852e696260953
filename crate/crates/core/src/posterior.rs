//! Log-prior, likelihood components, the tempered log-posterior, the
//! deterministic PINN loss, and the repulsive ensemble objectives.
//!
//! Additive normalization constants of the Gaussian log-densities are dropped
//! everywhere; they affect neither sampling nor optimization.

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_params, forward_jets, LossFn, OutputAdjoints};
use crate::error::{CoreError, Result};
use crate::network::{NetworkSpec, ParamVector};
use crate::physics::Problem;

/// Measurement points with per-component observed values. Components are
/// identified by the network output index they constrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedComponent {
    pub output_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub points: Vec<Vec<f64>>,
    pub components: Vec<ObservedComponent>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn component(&self, output_index: usize) -> Option<&ObservedComponent> {
        self.components
            .iter()
            .find(|c| c.output_index == output_index)
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        if self.points.is_empty() {
            return Err(CoreError::EmptyObservations);
        }
        for c in &self.components {
            if c.values.len() != self.points.len() {
                return Err(CoreError::InvalidConfig(
                    "observation component length mismatch".into(),
                ));
            }
            if c.output_index >= problem.n_outputs() {
                return Err(CoreError::InvalidConfig(
                    "observation component index out of range".into(),
                ));
            }
        }
        // Pressure is never observed; it is recovered through the equations.
        if matches!(problem, Problem::Rans { .. }) && self.component(2).is_some() {
            return Err(CoreError::InvalidConfig(
                "pressure observations are not allowed".into(),
            ));
        }
        Ok(())
    }
}

/// Noise scales, tempering exponents, and counts defining the tempered
/// posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperedPosteriorSpec {
    pub sigma_prior: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub sigma_fx: f64,
    pub sigma_fy: f64,
    pub sigma_pde: f64,
    pub beta_d: f64,
    pub beta_f: f64,
    pub beta_r: f64,
    /// Observation count entering the tempered weights.
    pub n_d: usize,
    /// Collocation count entering the tempered weights.
    pub n_c: usize,
}

impl TemperedPosteriorSpec {
    /// Paper defaults for the RANS cases: prior sigma 2.0, pde sigma 0.3,
    /// exponents (0.70, 0.60, 0.50).
    pub fn rans_defaults(n_d: usize, n_c: usize) -> Self {
        Self {
            sigma_prior: 2.0,
            sigma_u: 0.05,
            sigma_v: 0.05,
            sigma_fx: 0.05,
            sigma_fy: 0.05,
            sigma_pde: 0.3,
            beta_d: 0.70,
            beta_f: 0.60,
            beta_r: 0.50,
            n_d,
            n_c,
        }
    }

    /// Van der Pol: un-tempered likelihood with fixed sigma = 0.05 for both
    /// data and (pre-scaled) residuals, prior sigma 1.0.
    pub fn vdp_defaults(n_d: usize, n_c: usize) -> Self {
        Self {
            sigma_prior: 1.0,
            sigma_u: 0.05,
            sigma_v: 0.05,
            sigma_fx: 0.05,
            sigma_fy: 0.05,
            sigma_pde: 0.05,
            beta_d: 1.0,
            beta_f: 1.0,
            beta_r: 1.0,
            n_d,
            n_c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.sigma_prior,
            self.sigma_u,
            self.sigma_v,
            self.sigma_fx,
            self.sigma_fy,
            self.sigma_pde,
        ];
        if sigmas.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::InvalidConfig("all sigma must be > 0".into()));
        }
        for b in [self.beta_d, self.beta_f, self.beta_r] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(CoreError::InvalidConfig(
                    "tempering exponents must be in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Which space the repulsion kernel acts in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepulsionVariant {
    ParameterSpace,
    FunctionSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsionSpec {
    pub variant: RepulsionVariant,
    /// Kernel bandwidth: sigma_theta or sigma_f depending on the variant.
    pub bandwidth: f64,
    pub lambda_rep: f64,
    /// Evaluation points for the function-space kernel; unused otherwise.
    pub repulsion_points: Vec<Vec<f64>>,
}

/// `-||theta||^2 / (2 sigma^2)`, constant dropped.
pub fn log_prior(params: &ParamVector, sigma_prior: f64) -> f64 {
    let ss: f64 = params.0.iter().map(|v| v * v).sum();
    -ss / (2.0 * sigma_prior * sigma_prior)
}

fn log_lik_components(
    net: &NetworkSpec,
    params: &ParamVector,
    obs: &ObservationSet,
    comps: &[(usize, f64)],
) -> Result<f64> {
    if obs.is_empty() {
        return Err(CoreError::EmptyObservations);
    }
    let mut acc = 0.0;
    for (i, x) in obs.points.iter().enumerate() {
        let y = crate::network::forward(net, params, x, crate::network::DropoutMode::Off)?;
        for &(idx, sigma) in comps {
            if let Some(c) = obs.component(idx) {
                let r = (y[idx] - c.values[i]) / sigma;
                acc -= 0.5 * r * r;
            }
        }
    }
    Ok(acc)
}

/// Velocity data log-likelihood (outputs 0 and 1; for single-output problems
/// only component 0 contributes).
pub fn log_lik_velocity(
    net: &NetworkSpec,
    params: &ParamVector,
    obs: &ObservationSet,
    sigma_u: f64,
    sigma_v: f64,
) -> Result<f64> {
    log_lik_components(net, params, obs, &[(0, sigma_u), (1, sigma_v)])
}

/// Reynolds-force data log-likelihood (outputs 3 and 4).
pub fn log_lik_reynolds(
    net: &NetworkSpec,
    params: &ParamVector,
    obs: &ObservationSet,
    sigma_fx: f64,
    sigma_fy: f64,
) -> Result<f64> {
    log_lik_components(net, params, obs, &[(3, sigma_fx), (4, sigma_fy)])
}

/// Physics residual log-likelihood: `-1/(2 sigma^2) * sum_j sum_r r^2`.
pub fn log_lik_pde(
    net: &NetworkSpec,
    params: &ParamVector,
    collocation: &[Vec<f64>],
    sigma_pde: f64,
    problem: &Problem,
) -> Result<f64> {
    if collocation.is_empty() {
        return Err(CoreError::EmptyCollocation);
    }
    let residuals = crate::physics::residual_batch(net, params, collocation, problem)?;
    let ss: f64 = residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(-ss / (2.0 * sigma_pde * sigma_pde))
}

/// Tempered log-posterior (Gaussian constants dropped):
/// `log p(theta) + N_d^bd * mean(lik_uv) + N_d^bf * mean(lik_f) + N_c^br * mean(lik_r)`
/// where each mean is over per-point log-likelihood contributions of the
/// provided point sets. Data terms whose components are absent are skipped.
pub fn tempered_log_posterior(
    spec: &TemperedPosteriorSpec,
    net: &NetworkSpec,
    params: &ParamVector,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    problem: &Problem,
) -> Result<f64> {
    spec.validate()?;
    obs.validate(problem)?;
    let mut lp = log_prior(params, spec.sigma_prior);
    let n_obs = obs.len() as f64;
    let has_velocity = obs.component(0).is_some() || obs.component(1).is_some();
    if has_velocity {
        let l = log_lik_velocity(net, params, obs, spec.sigma_u, spec.sigma_v)?;
        lp += (spec.n_d as f64).powf(spec.beta_d) * (l / n_obs);
    }
    let has_reynolds = obs.component(3).is_some() || obs.component(4).is_some();
    if has_reynolds {
        let l = log_lik_reynolds(net, params, obs, spec.sigma_fx, spec.sigma_fy)?;
        lp += (spec.n_d as f64).powf(spec.beta_f) * (l / n_obs);
    }
    if !collocation.is_empty() {
        let l = log_lik_pde(net, params, collocation, spec.sigma_pde, problem)?;
        lp += (spec.n_c as f64).powf(spec.beta_r) * (l / collocation.len() as f64);
    }
    Ok(lp)
}

/// Deterministic PINN loss: mean squared data misfit over all observed
/// (point, component) pairs plus `lambda_pde` times the mean (over
/// collocation points) of the summed squared residuals.
pub fn pinn_loss(
    net: &NetworkSpec,
    params: &ParamVector,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    lambda_pde: f64,
    problem: &Problem,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(CoreError::EmptyObservations);
    }
    PinnLoss {
        net,
        obs,
        collocation,
        problem,
        lambda_pde,
        physics_weight: 1.0,
        dropout_seed: None,
    }
    .value(params)
}

/// `sum_{i<j} exp(-||theta_i - theta_j||^2 / sigma_theta^2)`.
pub fn repulsion_parameter_space(members: &[ParamVector], sigma_theta: f64) -> f64 {
    let m = members.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: f64 = members[i]
                .0
                .iter()
                .zip(&members[j].0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += (-d2 / (sigma_theta * sigma_theta)).exp();
        }
    }
    acc
}

/// Member outputs at the repulsion points: `outs[member][point][output]`.
fn member_outputs(
    net: &NetworkSpec,
    members: &[ParamVector],
    points: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    members
        .iter()
        .map(|m| {
            points
                .iter()
                .map(|x| crate::network::forward(net, m, x, crate::network::DropoutMode::Off))
                .collect()
        })
        .collect()
}

/// `(1/N) sum_n sum_{i<j} exp(-||f_i(x_n) - f_j(x_n)||^2 / sigma_f^2)`, with
/// the output-space norm summed over all network outputs.
pub fn repulsion_function_space(
    net: &NetworkSpec,
    members: &[ParamVector],
    points: &[Vec<f64>],
    sigma_f: f64,
) -> Result<f64> {
    let outs = member_outputs(net, members, points)?;
    let m = members.len();
    let n = points.len() as f64;
    let mut acc = 0.0;
    for pt in 0..points.len() {
        for i in 0..m {
            for j in (i + 1)..m {
                let d2: f64 = outs[i][pt]
                    .iter()
                    .zip(&outs[j][pt])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                acc += (-d2 / (sigma_f * sigma_f)).exp();
            }
        }
    }
    Ok(acc / n)
}

fn repulsion_value(
    net: &NetworkSpec,
    members: &[ParamVector],
    rep: &RepulsionSpec,
) -> Result<f64> {
    match rep.variant {
        RepulsionVariant::ParameterSpace => Ok(repulsion_parameter_space(members, rep.bandwidth)),
        RepulsionVariant::FunctionSpace => {
            repulsion_function_space(net, members, &rep.repulsion_points, rep.bandwidth)
        }
    }
}

/// Full objective of ensemble member `i`:
/// `pinn_loss(theta_i) + lambda_rep * repulsion(all members)`.
pub fn ensemble_objective(
    member: usize,
    members: &[ParamVector],
    net: &NetworkSpec,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    rep: &RepulsionSpec,
    lambda_pde: f64,
    problem: &Problem,
) -> Result<f64> {
    // The data term is allowed to be empty here (pure-repulsion training).
    let base = PinnLoss {
        net,
        obs,
        collocation,
        problem,
        lambda_pde,
        physics_weight: 1.0,
        dropout_seed: None,
    }
    .value(&members[member])?;
    Ok(base + rep.lambda_rep * repulsion_value(net, members, rep)?)
}

/// Gradient of [`ensemble_objective`] w.r.t. member `i` only; the other
/// members are treated as constants (mean-field particle update).
pub fn ensemble_objective_grad(
    member: usize,
    members: &[ParamVector],
    net: &NetworkSpec,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    rep: &RepulsionSpec,
    lambda_pde: f64,
    physics_weight: f64,
    problem: &Problem,
) -> Result<(f64, Vec<f64>)> {
    let base = PinnLoss {
        net,
        obs,
        collocation,
        problem,
        lambda_pde,
        physics_weight,
        dropout_seed: None,
    };
    let (mut value, mut grad) = base.value_and_grad(&members[member])?;

    if rep.lambda_rep > 0.0 && members.len() >= 2 {
        match rep.variant {
            RepulsionVariant::ParameterSpace => {
                let s2 = rep.bandwidth * rep.bandwidth;
                value += rep.lambda_rep * repulsion_parameter_space(members, rep.bandwidth);
                for (j, other) in members.iter().enumerate() {
                    if j == member {
                        continue;
                    }
                    let d2: f64 = members[member]
                        .0
                        .iter()
                        .zip(&other.0)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let k = (-d2 / s2).exp();
                    let c = rep.lambda_rep * k * (-2.0 / s2);
                    for ((g, a), b) in grad.iter_mut().zip(&members[member].0).zip(&other.0) {
                        *g += c * (a - b);
                    }
                }
            }
            RepulsionVariant::FunctionSpace => {
                let points = &rep.repulsion_points;
                let outs = member_outputs(net, members, points)?;
                let s2 = rep.bandwidth * rep.bandwidth;
                let n = points.len() as f64;
                value +=
                    rep.lambda_rep * repulsion_function_space(net, members, points, rep.bandwidth)?;
                let dim = net.input_dim();
                let n_out = net.output_dim();
                for (pt, x) in points.iter().enumerate() {
                    let mut adj = OutputAdjoints::zeros(n_out, dim);
                    let mut any = false;
                    for (j, oj) in outs.iter().enumerate() {
                        if j == member {
                            continue;
                        }
                        let d2: f64 = outs[member][pt]
                            .iter()
                            .zip(&oj[pt])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        let k = (-d2 / s2).exp();
                        let c = rep.lambda_rep * k * (-2.0 / s2) / n;
                        for o in 0..n_out {
                            adj.v[o] += c * (outs[member][pt][o] - oj[pt][o]);
                        }
                        any = true;
                    }
                    if any {
                        let tape = forward_jets(net, &members[member], x, None)?;
                        backward_params(net, &members[member], &tape, &adj, &mut grad);
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

/// Residual adjoints -> output jet adjoints for one collocation point.
/// `dldr[r]` is `d loss / d residual_r`.
pub(crate) fn accumulate_residual_adjoints(
    problem: &Problem,
    out: &crate::autodiff::Jets,
    dldr: &[f64],
    adj: &mut OutputAdjoints,
) {
    let w = out.width;
    match problem {
        Problem::Vdp {
            params,
            residual_scale,
        } => {
            let u = out.v[0];
            let u_dot = out.g[0];
            let s = *residual_scale;
            let d = dldr[0] * s;
            adj.v[0] += d * (2.0 * params.epsilon * params.omega0 * u * u_dot
                + params.omega0 * params.omega0);
            adj.g[0] += d * (-params.epsilon * params.omega0 * (1.0 - u * u));
            adj.h[0] += d;
        }
        Problem::Rans { re } => {
            let nu = 1.0 / re;
            let (xu, yu) = (0, w); // direction offsets into g/h
            let u = out.v[0];
            let v = out.v[1];
            let u_x = out.g[xu];
            let u_y = out.g[yu];
            let v_x = out.g[xu + 1];
            let v_y = out.g[yu + 1];
            let (d1, d2, d3) = (dldr[0], dldr[1], dldr[2]);
            // r1 = U U_x + V U_y + P_x - nu (U_xx + U_yy) + f_x
            adj.v[0] += d1 * u_x;
            adj.v[1] += d1 * u_y;
            adj.g[xu] += d1 * u;
            adj.g[yu] += d1 * v;
            adj.g[xu + 2] += d1; // P_x
            adj.h[xu] += -d1 * nu;
            adj.h[yu] += -d1 * nu;
            adj.v[3] += d1;
            // r2 = U V_x + V V_y + P_y - nu (V_xx + V_yy) + f_y
            adj.v[0] += d2 * v_x;
            adj.v[1] += d2 * v_y;
            adj.g[xu + 1] += d2 * u;
            adj.g[yu + 1] += d2 * v;
            adj.g[yu + 2] += d2; // P_y
            adj.h[xu + 1] += -d2 * nu;
            adj.h[yu + 1] += -d2 * nu;
            adj.v[4] += d2;
            // r3 = U_x + V_y
            adj.g[xu] += d3;
            adj.g[yu + 1] += d3;
        }
    }
}

/// Deterministic PINN loss with analytic gradient. `physics_weight` ramps the
/// PDE term during training; `dropout_seed` draws fresh masks (MC-dropout
/// training).
pub struct PinnLoss<'a> {
    pub net: &'a NetworkSpec,
    pub obs: &'a ObservationSet,
    pub collocation: &'a [Vec<f64>],
    pub problem: &'a Problem,
    pub lambda_pde: f64,
    pub physics_weight: f64,
    pub dropout_seed: Option<u64>,
}

impl PinnLoss<'_> {
    fn masks(&self) -> Option<Vec<Vec<f64>>> {
        self.dropout_seed
            .map(|seed| crate::network::draw_masks(self.net, seed))
    }
}

impl LossFn for PinnLoss<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.value_and_grad_impl(params, false)?.0)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.value_and_grad_impl(params, true)?;
        Ok((v, g.unwrap()))
    }
}

impl PinnLoss<'_> {
    fn value_and_grad_impl(
        &self,
        params: &ParamVector,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let masks = self.masks();
        let dim = self.net.input_dim();
        let n_out = self.net.output_dim();
        let mut grad = if want_grad {
            Some(vec![0.0; params.len()])
        } else {
            None
        };
        // Data term: mean over observed (point, component) entries.
        let n_entries: usize = self
            .obs
            .components
            .iter()
            .map(|c| c.values.len())
            .sum::<usize>()
            .max(1);
        let mut data_acc = 0.0;
        for (i, x) in self.obs.points.iter().enumerate() {
            let tape = forward_jets(self.net, params, x, masks.as_deref())?;
            let out = tape.output();
            let mut adj = OutputAdjoints::zeros(n_out, dim);
            for c in &self.obs.components {
                let e = out.v[c.output_index] - c.values[i];
                data_acc += e * e;
                adj.v[c.output_index] += 2.0 * e / n_entries as f64;
            }
            if let Some(g) = grad.as_deref_mut() {
                backward_params(self.net, params, &tape, &adj, g);
            }
        }
        let mut total = data_acc / n_entries as f64;

        let w_pde = self.lambda_pde * self.physics_weight;
        if w_pde != 0.0 && !self.collocation.is_empty() {
            let n_c = self.collocation.len() as f64;
            for (j, x) in self.collocation.iter().enumerate() {
                let tape = forward_jets(self.net, params, x, masks.as_deref())?;
                let out = tape.output();
                let res = self.problem.residuals_from_traces(&jets_to_traces(out));
                if res.iter().any(|r| !r.is_finite()) {
                    return Err(CoreError::NonFiniteResidual { point: j });
                }
                total += w_pde * res.iter().map(|r| r * r).sum::<f64>() / n_c;
                if let Some(g) = grad.as_deref_mut() {
                    let dldr: Vec<f64> = res.iter().map(|r| 2.0 * w_pde * r / n_c).collect();
                    let mut adj = OutputAdjoints::zeros(n_out, dim);
                    accumulate_residual_adjoints(self.problem, out, &dldr, &mut adj);
                    backward_params(self.net, params, &tape, &adj, g);
                }
            }
        }
        Ok((total, grad))
    }
}

pub(crate) fn jets_to_traces(out: &crate::autodiff::Jets) -> Vec<crate::autodiff::DualTrace> {
    (0..out.width)
        .map(|k| crate::autodiff::DualTrace {
            value: out.v[k],
            input_tangents: (0..out.dirs).map(|d| out.g[d * out.width + k]).collect(),
            second_tangents: (0..out.dirs).map(|d| out.h[d * out.width + k]).collect(),
        })
        .collect()
}

/// Negative tempered log-posterior with analytic gradient; the loss minimized
/// by MAP pre-training and negated again for the samplers. `physics_weight`
/// ramps the physics term; the observation and collocation point sets may be
/// mini-batches (the tempered weights use the counts in `spec`, while the
/// means are over the provided sets).
pub struct NegLogPosterior<'a> {
    pub spec: &'a TemperedPosteriorSpec,
    pub net: &'a NetworkSpec,
    pub obs: &'a ObservationSet,
    pub collocation: &'a [Vec<f64>],
    pub problem: &'a Problem,
    pub physics_weight: f64,
}

impl LossFn for NegLogPosterior<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.value_and_grad_impl(params, false)?.0)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.value_and_grad_impl(params, true)?;
        Ok((v, g.unwrap()))
    }
}

impl NegLogPosterior<'_> {
    fn value_and_grad_impl(
        &self,
        params: &ParamVector,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        self.obs.validate(self.problem)?;
        let spec = self.spec;
        let dim = self.net.input_dim();
        let n_out = self.net.output_dim();
        let mut grad = if want_grad {
            Some(vec![0.0; params.len()])
        } else {
            None
        };

        // Prior: -log p(theta) = ||theta||^2 / (2 sigma^2).
        let sp2 = spec.sigma_prior * spec.sigma_prior;
        let mut total = params.0.iter().map(|v| v * v).sum::<f64>() / (2.0 * sp2);
        if let Some(g) = grad.as_deref_mut() {
            for (gi, t) in g.iter_mut().zip(&params.0) {
                *gi += t / sp2;
            }
        }

        let n_obs = self.obs.len() as f64;
        let w_vel = (spec.n_d as f64).powf(spec.beta_d) / n_obs;
        let w_rey = (spec.n_d as f64).powf(spec.beta_f) / n_obs;
        // Per-component weight and sigma for each data term.
        let comp_w = |idx: usize| -> Option<(f64, f64)> {
            match idx {
                0 => Some((w_vel, spec.sigma_u)),
                1 => Some((w_vel, spec.sigma_v)),
                3 => Some((w_rey, spec.sigma_fx)),
                4 => Some((w_rey, spec.sigma_fy)),
                _ => None,
            }
        };

        for (i, x) in self.obs.points.iter().enumerate() {
            let tape = forward_jets(self.net, params, x, None)?;
            let out = tape.output();
            let mut adj = OutputAdjoints::zeros(n_out, dim);
            let mut any = false;
            for c in &self.obs.components {
                if let Some((w, sigma)) = comp_w(c.output_index) {
                    let e = out.v[c.output_index] - c.values[i];
                    total += w * 0.5 * (e / sigma) * (e / sigma);
                    adj.v[c.output_index] += w * e / (sigma * sigma);
                    any = true;
                }
            }
            if any {
                if let Some(g) = grad.as_deref_mut() {
                    backward_params(self.net, params, &tape, &adj, g);
                }
            }
        }

        if self.physics_weight != 0.0 && !self.collocation.is_empty() {
            let w_pde = self.physics_weight * (spec.n_c as f64).powf(spec.beta_r)
                / self.collocation.len() as f64
                / (2.0 * spec.sigma_pde * spec.sigma_pde);
            for (j, x) in self.collocation.iter().enumerate() {
                let tape = forward_jets(self.net, params, x, None)?;
                let out = tape.output();
                let res = self.problem.residuals_from_traces(&jets_to_traces(out));
                if res.iter().any(|r| !r.is_finite()) {
                    return Err(CoreError::NonFiniteResidual { point: j });
                }
                total += w_pde * res.iter().map(|r| r * r).sum::<f64>();
                if let Some(g) = grad.as_deref_mut() {
                    let dldr: Vec<f64> = res.iter().map(|r| 2.0 * w_pde * r).collect();
                    let mut adj = OutputAdjoints::zeros(n_out, dim);
                    accumulate_residual_adjoints(self.problem, out, &dldr, &mut adj);
                    backward_params(self.net, params, &tape, &adj, g);
                }
            }
        }
        Ok((total, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use crate::physics::VdpParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rans_problem() -> Problem {
        Problem::Rans { re: 100.0 }
    }

    fn small_rans_setup(seed: u64, n_obs: usize) -> (NetworkSpec, ParamVector, ObservationSet) {
        let net = NetworkSpec::new(vec![2, 8, 8, 5]);
        let params = init_params(&net, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let points: Vec<Vec<f64>> = (0..n_obs)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let mk = |_idx: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n_obs).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let components = vec![
            ObservedComponent {
                output_index: 0,
                values: mk(0, &mut rng),
            },
            ObservedComponent {
                output_index: 1,
                values: mk(1, &mut rng),
            },
            ObservedComponent {
                output_index: 3,
                values: mk(3, &mut rng),
            },
            ObservedComponent {
                output_index: 4,
                values: mk(4, &mut rng),
            },
        ];
        (net, params, ObservationSet { points, components })
    }

    #[test]
    fn log_prior_examples() {
        assert_eq!(log_prior(&ParamVector(vec![0.0; 10]), 2.0), 0.0);
        let mut theta = vec![0.0; 5];
        theta[0] = 2.0;
        assert!((log_prior(&ParamVector(theta), 2.0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_prior_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let sigma = 1.7;
        let oracle: f64 = theta.iter().map(|t| -t * t / (2.0 * sigma * sigma)).sum();
        assert!((log_prior(&ParamVector(theta), sigma) - oracle).abs() < 1e-12);
    }

    #[test]
    fn velocity_likelihood_exact_fit_is_zero() {
        let (net, params, mut obs) = small_rans_setup(3, 6);
        // Replace observations with exact network outputs.
        for i in 0..obs.points.len() {
            let y = crate::network::forward(
                &net,
                &params,
                &obs.points[i],
                crate::network::DropoutMode::Off,
            )
            .unwrap();
            for c in obs.components.iter_mut() {
                c.values[i] = y[c.output_index];
            }
        }
        let l = log_lik_velocity(&net, &params, &obs, 0.1, 0.1).unwrap();
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn velocity_likelihood_single_unit_residual() {
        let net = NetworkSpec::new(vec![2, 4, 5]);
        let params = ParamVector::zeros(net.param_count());
        let sigma_u = 0.3;
        let obs = ObservationSet {
            points: vec![vec![0.0, 0.0]],
            components: vec![ObservedComponent {
                output_index: 0,
                values: vec![-sigma_u], // network outputs 0, residual = sigma_u
            }],
        };
        let l = log_lik_velocity(&net, &params, &obs, sigma_u, 1.0).unwrap();
        assert!((l + 0.5).abs() < 1e-14);
    }

    #[test]
    fn likelihoods_match_loop_oracle() {
        let (net, params, obs) = small_rans_setup(7, 10);
        let (su, sv, sfx, sfy) = (0.05, 0.07, 0.11, 0.13);
        let mut oracle_v = 0.0;
        let mut oracle_f = 0.0;
        for (i, x) in obs.points.iter().enumerate() {
            let y =
                crate::network::forward(&net, &params, x, crate::network::DropoutMode::Off)
                    .unwrap();
            let r0 = (y[0] - obs.component(0).unwrap().values[i]) / su;
            let r1 = (y[1] - obs.component(1).unwrap().values[i]) / sv;
            oracle_v -= 0.5 * (r0 * r0 + r1 * r1);
            let r3 = (y[3] - obs.component(3).unwrap().values[i]) / sfx;
            let r4 = (y[4] - obs.component(4).unwrap().values[i]) / sfy;
            oracle_f -= 0.5 * (r3 * r3 + r4 * r4);
        }
        let lv = log_lik_velocity(&net, &params, &obs, su, sv).unwrap();
        let lf = log_lik_reynolds(&net, &params, &obs, sfx, sfy).unwrap();
        assert!((lv - oracle_v).abs() < 1e-12 * oracle_v.abs().max(1.0));
        assert!((lf - oracle_f).abs() < 1e-12 * oracle_f.abs().max(1.0));
    }

    #[test]
    fn pde_likelihood_scaling_law() {
        let (net, params, _) = small_rans_setup(11, 2);
        let colloc = vec![vec![0.2, 0.3], vec![-0.4, 0.6], vec![0.0, -0.9]];
        let l1 = log_lik_pde(&net, &params, &colloc, 0.3, &rans_problem()).unwrap();
        let l2 = log_lik_pde(&net, &params, &colloc, 0.6, &rans_problem()).unwrap();
        assert!((l2 - l1 / 4.0).abs() < 1e-12 * l1.abs().max(1.0));
    }

    #[test]
    fn constant_net_pde_likelihood_closed_form() {
        let net = NetworkSpec::new(vec![2, 4, 5]);
        let mut params = ParamVector::zeros(net.param_count());
        let n = params.len();
        let (c_fx, c_fy) = (0.8, -0.4);
        params.0[n - 2] = c_fx;
        params.0[n - 1] = c_fy;
        let colloc: Vec<Vec<f64>> = (0..13).map(|i| vec![0.1 * i as f64, 0.0]).collect();
        let sigma = 0.3;
        let l = log_lik_pde(&net, &params, &colloc, sigma, &rans_problem()).unwrap();
        let expected = -(colloc.len() as f64) * (c_fx * c_fx + c_fy * c_fy)
            / (2.0 * sigma * sigma);
        assert!((l - expected).abs() < 1e-10 * expected.abs());
    }

    #[test]
    fn tempering_reduces_to_sum_form_at_beta_one() {
        let (net, params, obs) = small_rans_setup(13, 8);
        let colloc: Vec<Vec<f64>> = (0..5).map(|i| vec![0.2 * i as f64, -0.1]).collect();
        let mut spec = TemperedPosteriorSpec::rans_defaults(obs.len(), colloc.len());
        spec.beta_d = 1.0;
        spec.beta_f = 1.0;
        spec.beta_r = 1.0;
        let lp =
            tempered_log_posterior(&spec, &net, &params, &obs, &colloc, &rans_problem()).unwrap();
        let sum_form = log_prior(&params, spec.sigma_prior)
            + log_lik_velocity(&net, &params, &obs, spec.sigma_u, spec.sigma_v).unwrap()
            + log_lik_reynolds(&net, &params, &obs, spec.sigma_fx, spec.sigma_fy).unwrap()
            + log_lik_pde(&net, &params, &colloc, spec.sigma_pde, &rans_problem()).unwrap();
        assert!((lp - sum_form).abs() < 1e-10 * sum_form.abs().max(1.0));
    }

    #[test]
    fn tempered_posterior_matches_formula_oracle() {
        // Default exponents (0.70, 0.60, 0.50) against an independent
        // reimplementation of the tempered sum.
        let (net, params, obs) = small_rans_setup(17, 9);
        let colloc: Vec<Vec<f64>> = (0..6).map(|i| vec![0.15 * i as f64, 0.25]).collect();
        let spec = TemperedPosteriorSpec::rans_defaults(obs.len(), colloc.len());
        assert_eq!(spec.beta_d, 0.70);
        assert_eq!(spec.beta_f, 0.60);
        assert_eq!(spec.beta_r, 0.50);
        let lp =
            tempered_log_posterior(&spec, &net, &params, &obs, &colloc, &rans_problem()).unwrap();
        let n_d = obs.len() as f64;
        let n_c = colloc.len() as f64;
        let oracle = log_prior(&params, spec.sigma_prior)
            + n_d.powf(spec.beta_d)
                * (log_lik_velocity(&net, &params, &obs, spec.sigma_u, spec.sigma_v).unwrap()
                    / n_d)
            + n_d.powf(spec.beta_f)
                * (log_lik_reynolds(&net, &params, &obs, spec.sigma_fx, spec.sigma_fy).unwrap()
                    / n_d)
            + n_c.powf(spec.beta_r)
                * (log_lik_pde(&net, &params, &colloc, spec.sigma_pde, &rans_problem()).unwrap()
                    / n_c);
        assert!((lp - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn pinn_loss_formula_oracle() {
        let (net, params, obs) = small_rans_setup(19, 7);
        let colloc: Vec<Vec<f64>> = (0..4).map(|i| vec![0.3 * i as f64, 0.1]).collect();
        let lambda = 0.35;
        let l = pinn_loss(&net, &params, &obs, &colloc, lambda, &rans_problem()).unwrap();
        // Hand-computed two-term form.
        let mut data = 0.0;
        let mut n_entries = 0usize;
        for (i, x) in obs.points.iter().enumerate() {
            let y =
                crate::network::forward(&net, &params, x, crate::network::DropoutMode::Off)
                    .unwrap();
            for c in &obs.components {
                let e = y[c.output_index] - c.values[i];
                data += e * e;
                n_entries += 1;
            }
        }
        data /= n_entries as f64;
        let res = crate::physics::residual_batch(&net, &params, &colloc, &rans_problem()).unwrap();
        let phys = res
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / colloc.len() as f64;
        assert!((l - (data + lambda * phys)).abs() < 1e-12 * l.abs().max(1.0));
        // lambda = 0 -> pure data MSE.
        let l0 = pinn_loss(&net, &params, &obs, &colloc, 0.0, &rans_problem()).unwrap();
        assert!((l0 - data).abs() < 1e-12 * data.abs().max(1.0));
    }

    #[test]
    fn repulsion_parameter_space_examples() {
        let theta = ParamVector(vec![1.0, 2.0, 3.0]);
        let members = vec![theta.clone(), theta.clone(), theta.clone(), theta];
        // Identical members -> M(M-1)/2.
        assert!((repulsion_parameter_space(&members, 1.0) - 6.0).abs() < 1e-14);
        // Two members at unit-scaled distance -> exp(-1).
        let m2 = vec![
            ParamVector(vec![0.0, 0.0]),
            ParamVector(vec![3.0, 4.0]), // squared distance 25
        ];
        let r = repulsion_parameter_space(&m2, 5.0);
        assert!((r - (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn repulsion_parameter_space_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let members: Vec<ParamVector> = (0..4)
            .map(|_| ParamVector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let sigma = 0.8;
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i < j {
                    let d2: f64 = members[i]
                        .0
                        .iter()
                        .zip(&members[j].0)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    oracle += (-d2 / (sigma * sigma)).exp();
                }
            }
        }
        assert!((repulsion_parameter_space(&members, sigma) - oracle).abs() < 1e-12);
    }

    #[test]
    fn repulsion_function_space_examples_and_oracle() {
        let net = NetworkSpec::new(vec![1, 6, 2]);
        let base = init_params(&net, 5);
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64]).collect();
        // Identical members -> M(M-1)/2.
        let members = vec![base.clone(), base.clone(), base.clone()];
        let r = repulsion_function_space(&net, &members, &points, 1.0).unwrap();
        assert!((r - 3.0).abs() < 1e-12);
        // Bias shift in one output -> exp(-delta^2/sigma^2), point independent.
        let mut shifted = base.clone();
        let n = shifted.len();
        let delta = 0.4;
        shifted.0[n - 1] += delta;
        let m2 = vec![base.clone(), shifted];
        let sigma_f = 0.9;
        let r2 = repulsion_function_space(&net, &m2, &points, sigma_f).unwrap();
        assert!((r2 - (-delta * delta / (sigma_f * sigma_f)).exp()).abs() < 1e-12);
        // Triple-loop oracle on random members.
        let members: Vec<ParamVector> = (0..3).map(|s| init_params(&net, 100 + s)).collect();
        let r3 = repulsion_function_space(&net, &members, &points, 0.7).unwrap();
        let mut oracle = 0.0;
        for pt in &points {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let yi = crate::network::forward(
                        &net,
                        &members[i],
                        pt,
                        crate::network::DropoutMode::Off,
                    )
                    .unwrap();
                    let yj = crate::network::forward(
                        &net,
                        &members[j],
                        pt,
                        crate::network::DropoutMode::Off,
                    )
                    .unwrap();
                    let d2: f64 = yi.iter().zip(&yj).map(|(a, b)| (a - b) * (a - b)).sum();
                    oracle += (-d2 / (0.7f64 * 0.7)).exp();
                }
            }
        }
        oracle /= points.len() as f64;
        assert!((r3 - oracle).abs() < 1e-12);
    }

    #[test]
    fn repulsion_invariants() {
        // Permutation invariance, positivity, upper bound, monotone decrease
        // with distance.
        let net = NetworkSpec::new(vec![1, 4, 1]);
        let members: Vec<ParamVector> = (0..4).map(|s| init_params(&net, s)).collect();
        let sigma = 1.3;
        let r = repulsion_parameter_space(&members, sigma);
        let mut perm = members.clone();
        perm.swap(0, 3);
        perm.swap(1, 2);
        assert!((repulsion_parameter_space(&perm, sigma) - r).abs() < 1e-12);
        assert!(r > 0.0);
        assert!(r <= 6.0 + 1e-12);
        // 1-parameter family: moving one member away decreases the value.
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let mut fam = members.clone();
            for v in fam[0].0.iter_mut() {
                *v += k as f64 * 0.5;
            }
            let val = repulsion_parameter_space(&fam, sigma);
            assert!(val <= prev + 1e-12);
            prev = val;
        }
    }

    #[test]
    fn ensemble_objective_examples() {
        let (net, _, obs) = small_rans_setup(31, 5);
        let colloc: Vec<Vec<f64>> = (0..3).map(|i| vec![0.2 * i as f64, 0.0]).collect();
        let members: Vec<ParamVector> = (0..3).map(|s| init_params(&net, 200 + s)).collect();
        let problem = rans_problem();
        let rep0 = RepulsionSpec {
            variant: RepulsionVariant::ParameterSpace,
            bandwidth: 1.0,
            lambda_rep: 0.0,
            repulsion_points: vec![],
        };
        let base = pinn_loss(&net, &members[1], &obs, &colloc, 0.5, &problem).unwrap();
        let o0 =
            ensemble_objective(1, &members, &net, &obs, &colloc, &rep0, 0.5, &problem).unwrap();
        assert!((o0 - base).abs() < 1e-12 * base.abs().max(1.0));
        // Identical members, lambda_rep = 1 -> pinn_loss + M(M-1)/2.
        let same = vec![members[0].clone(), members[0].clone(), members[0].clone()];
        let rep1 = RepulsionSpec {
            lambda_rep: 1.0,
            ..rep0.clone()
        };
        let b0 = pinn_loss(&net, &same[0], &obs, &colloc, 0.5, &problem).unwrap();
        let o1 = ensemble_objective(0, &same, &net, &obs, &colloc, &rep1, 0.5, &problem).unwrap();
        assert!((o1 - (b0 + 3.0)).abs() < 1e-10 * o1.abs().max(1.0));
        // Random config: sum of separately computed terms.
        let rep = RepulsionSpec {
            variant: RepulsionVariant::FunctionSpace,
            bandwidth: 0.8,
            lambda_rep: 0.7,
            repulsion_points: vec![vec![0.1, 0.1], vec![-0.3, 0.6]],
        };
        let o = ensemble_objective(2, &members, &net, &obs, &colloc, &rep, 0.5, &problem).unwrap();
        let expected = pinn_loss(&net, &members[2], &obs, &colloc, 0.5, &problem).unwrap()
            + 0.7 * repulsion_function_space(&net, &members, &rep.repulsion_points, 0.8).unwrap();
        assert!((o - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn neg_log_posterior_gradient_matches_finite_differences() {
        let (net, params, obs) = small_rans_setup(41, 5);
        let colloc: Vec<Vec<f64>> = (0..4).map(|i| vec![0.25 * i as f64, -0.2]).collect();
        let spec = TemperedPosteriorSpec::rans_defaults(obs.len(), colloc.len());
        let problem = rans_problem();
        let loss = NegLogPosterior {
            spec: &spec,
            net: &net,
            obs: &obs,
            collocation: &colloc,
            problem: &problem,
            physics_weight: 1.0,
        };
        let (v, grad) = loss.value_and_grad(&params).unwrap();
        assert!(v.is_finite());
        let step = 1e-5;
        for j in (0..params.len()).step_by(11) {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.0[j] += step;
            pm.0[j] -= step;
            let fd = (loss.value(&pp).unwrap() - loss.value(&pm).unwrap()) / (2.0 * step);
            assert!(
                (grad[j] - fd).abs() / fd.abs().max(1.0) < 1e-4,
                "param {j}: {} vs {}",
                grad[j],
                fd
            );
        }
    }

    #[test]
    fn vdp_pinn_loss_gradient_matches_finite_differences() {
        let net = NetworkSpec::new(vec![1, 8, 8, 1]);
        let params = init_params(&net, 51);
        let obs = ObservationSet {
            points: (0..6).map(|i| vec![0.2 * i as f64]).collect(),
            components: vec![ObservedComponent {
                output_index: 0,
                values: (0..6).map(|i| (i as f64 * 0.7).sin()).collect(),
            }],
        };
        let colloc: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 + 0.2 * i as f64]).collect();
        let problem = Problem::Vdp {
            params: VdpParams {
                epsilon: 1.0,
                omega0: 2.0,
            },
            residual_scale: 1.0,
        };
        let loss = PinnLoss {
            net: &net,
            obs: &obs,
            collocation: &colloc,
            problem: &problem,
            lambda_pde: 0.6,
            physics_weight: 1.0,
            dropout_seed: None,
        };
        let (_, grad) = loss.value_and_grad(&params).unwrap();
        let step = 1e-5;
        for j in (0..params.len()).step_by(5) {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.0[j] += step;
            pm.0[j] -= step;
            let fd = (loss.value(&pp).unwrap() - loss.value(&pm).unwrap()) / (2.0 * step);
            assert!(
                (grad[j] - fd).abs() / fd.abs().max(1e-2) < 1e-4,
                "param {j}: {} vs {}",
                grad[j],
                fd
            );
        }
    }

    #[test]
    fn ensemble_gradient_matches_finite_differences() {
        let (net, _, obs) = small_rans_setup(61, 4);
        let colloc: Vec<Vec<f64>> = (0..3).map(|i| vec![0.2 * i as f64, 0.3]).collect();
        let members: Vec<ParamVector> = (0..3).map(|s| init_params(&net, 300 + s)).collect();
        let problem = rans_problem();
        for variant in [RepulsionVariant::ParameterSpace, RepulsionVariant::FunctionSpace] {
            let rep = RepulsionSpec {
                variant,
                bandwidth: 0.9,
                lambda_rep: 0.5,
                repulsion_points: vec![vec![0.0, 0.0], vec![0.5, -0.5]],
            };
            let (_, grad) = ensemble_objective_grad(
                1, &members, &net, &obs, &colloc, &rep, 0.4, 1.0, &problem,
            )
            .unwrap();
            let step = 1e-6;
            for j in (0..members[1].len()).step_by(17) {
                let mut mp = members.to_vec();
                let mut mm = members.to_vec();
                mp[1].0[j] += step;
                mm[1].0[j] -= step;
                let fp =
                    ensemble_objective(1, &mp, &net, &obs, &colloc, &rep, 0.4, &problem).unwrap();
                let fm =
                    ensemble_objective(1, &mm, &net, &obs, &colloc, &rep, 0.4, &problem).unwrap();
                let fd = (fp - fm) / (2.0 * step);
                assert!(
                    (grad[j] - fd).abs() / fd.abs().max(1e-2) < 1e-3,
                    "{variant:?} param {j}: {} vs {}",
                    grad[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn likelihoods_are_nonpositive() {
        let (net, params, obs) = small_rans_setup(71, 6);
        let colloc: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64, 0.2]).collect();
        assert!(log_lik_velocity(&net, &params, &obs, 0.1, 0.1).unwrap() <= 0.0);
        assert!(log_lik_reynolds(&net, &params, &obs, 0.1, 0.1).unwrap() <= 0.0);
        assert!(log_lik_pde(&net, &params, &colloc, 0.3, &rans_problem()).unwrap() <= 0.0);
    }

    #[test]
    fn pressure_observations_rejected() {
        let (_, _, mut obs) = small_rans_setup(81, 3);
        obs.components.push(ObservedComponent {
            output_index: 2,
            values: vec![0.0; 3],
        });
        assert!(obs.validate(&rans_problem()).is_err());
    }
}
