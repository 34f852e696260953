//! Deterministic optimization: Adam/AdamW, cosine schedules, a physics
//! ramp-up, L-BFGS with a strong Wolfe line search, staged MAP pre-training,
//! and the ensemble / MC-dropout training loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::LossFn;
use crate::error::{CoreError, Result};
use crate::network::{init_params, NetworkSpec, ParamVector};
use crate::physics::Problem;
use crate::posterior::{
    repulsion_function_space, repulsion_parameter_space, ensemble_objective_grad, NegLogPosterior,
    ObservationSet, PinnLoss, RepulsionSpec, RepulsionVariant, TemperedPosteriorSpec,
};

/// Derive a per-stream seed from a base seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(1)
}

/// Loss function defined by a closure; used to optimize analytic targets.
pub struct ClosureLoss<F>(pub F)
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)>;

impl<F> LossFn for ClosureLoss<F>
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)>,
{
    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok((self.0)(params)?.0)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        (self.0)(params)
    }
}

/// Adam first/second moment accumulators with a step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam step with bias correction; `weight_decay > 0` applies decoupled
/// decay (AdamW).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamVector,
    grad: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(CoreError::DimensionMismatch {
            expected: params.len(),
            got: grad.len(),
            context: "adam_step",
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFiniteGradient { index: i });
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.0[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * params.0[i]);
    }
    Ok(())
}

/// Physics ramp weight: `0.5 * (1 - cos(pi t / T_w))` for `t <= T_w`, then 1.
pub fn cosine_ramp(t: usize, t_w: usize) -> f64 {
    if t_w == 0 || t >= t_w {
        return 1.0;
    }
    0.5 * (1.0 - (std::f64::consts::PI * t as f64 / t_w as f64).cos())
}

/// Cosine decay of a learning rate from `lr0` at step 0 to 0 at `total`.
pub fn cosine_decay(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub params: ParamVector,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub line_search_failed: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// Strong Wolfe line search (bracket + zoom). Returns the accepted step and
/// the loss/gradient at the new point, or `None` on failure.
#[allow(clippy::too_many_arguments)]
fn wolfe_line_search(
    loss: &dyn LossFn,
    x: &ParamVector,
    f0: f64,
    g0_dot_d: f64,
    d: &[f64],
    c1: f64,
    c2: f64,
) -> Result<Option<(f64, ParamVector, f64, Vec<f64>)>> {
    let eval = |a: f64| -> Result<(ParamVector, f64, Vec<f64>)> {
        let mut xa = x.clone();
        axpy(&mut xa.0, a, d);
        let (f, g) = loss.value_and_grad(&xa)?;
        Ok((xa, f, g))
    };
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = g0_dot_d;
    let mut a = 1.0;
    let a_max = 1e4;

    let zoom = |mut lo: f64,
                mut f_lo: f64,
                mut dphi_lo: f64,
                mut hi: f64,
                mut f_hi: f64|
     -> Result<Option<(f64, ParamVector, f64, Vec<f64>)>> {
        for _ in 0..40 {
            // Quadratic interpolation with a bisection safeguard.
            let denom = 2.0 * (f_hi - f_lo - dphi_lo * (hi - lo));
            let mut aj = if denom.abs() > 1e-300 {
                lo - dphi_lo * (hi - lo) * (hi - lo) / denom
            } else {
                0.5 * (lo + hi)
            };
            let (left, right) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let span = right - left;
            if !aj.is_finite() || aj <= left + 0.05 * span || aj >= right - 0.05 * span {
                aj = 0.5 * (lo + hi);
            }
            let (xj, fj, gj) = eval(aj)?;
            let dphi_j = dot(&gj, d);
            if fj > f0 + c1 * aj * g0_dot_d || fj >= f_lo {
                hi = aj;
                f_hi = fj;
            } else {
                if dphi_j.abs() <= -c2 * g0_dot_d {
                    return Ok(Some((aj, xj, fj, gj)));
                }
                if dphi_j * (hi - lo) >= 0.0 {
                    hi = lo;
                    f_hi = f_lo;
                }
                lo = aj;
                f_lo = fj;
                dphi_lo = dphi_j;
            }
            if (hi - lo).abs() < 1e-16 {
                break;
            }
        }
        Ok(None)
    };

    for i in 0..25 {
        let (xa, fa, ga) = eval(a)?;
        if !fa.is_finite() {
            // Shrink into the finite region.
            a *= 0.25;
            continue;
        }
        let dphi_a = dot(&ga, d);
        if fa > f0 + c1 * a * g0_dot_d || (i > 0 && fa >= f_prev) {
            return zoom(a_prev, f_prev, dphi_prev, a, fa);
        }
        if dphi_a.abs() <= -c2 * g0_dot_d {
            return Ok(Some((a, xa, fa, ga)));
        }
        if dphi_a >= 0.0 {
            return zoom(a, fa, dphi_a, a_prev, f_prev);
        }
        a_prev = a;
        f_prev = fa;
        dphi_prev = dphi_a;
        a = (2.0 * a).min(a_max);
    }
    Ok(None)
}

/// L-BFGS with two-loop recursion and strong Wolfe steps. Stops at
/// `max_iters` or when the gradient norm falls below `grad_tol`; on
/// line-search failure the best iterate so far is returned with a flag.
pub fn lbfgs_minimize(
    loss: &dyn LossFn,
    init: ParamVector,
    opts: &LbfgsOptions,
) -> Result<LbfgsOutcome> {
    let n = init.len();
    let mut x = init;
    let (mut f, mut g) = loss.value_and_grad(&x)?;
    if !f.is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut line_search_failed = false;

    for _ in 0..opts.max_iters {
        let gn = norm(&g);
        if gn < opts.grad_tol {
            break;
        }
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
            axpy(&mut q, -alpha[i], &y_hist[i]);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            axpy(&mut q, alpha[i] - beta, &s_hist[i]);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut g_dot_d = dot(&g, &d);
        if g_dot_d >= 0.0 {
            // Not a descent direction: reset to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            g_dot_d = -gn * gn;
        }
        match wolfe_line_search(loss, &x, f, g_dot_d, &d, opts.c1, opts.c2)? {
            Some((a, x_new, f_new, g_new)) => {
                let s: Vec<f64> = d.iter().map(|v| a * v).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                debug_assert_eq!(x_new.len(), n);
                x = x_new;
                f = f_new;
                g = g_new;
                iterations += 1;
            }
            None => {
                line_search_failed = true;
                break;
            }
        }
    }
    Ok(LbfgsOutcome {
        grad_norm: norm(&g),
        params: x,
        value: f,
        iterations,
        line_search_failed,
    })
}

/// Iteration counts, ramp window, mini-batch size, and learning rates for the
/// three MAP pre-training stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_a_iters: usize,
    pub stage_b_iters: usize,
    pub stage_c_iters: usize,
    /// Ramp window T_w; the physics weight reaches 1 after this many stage-B
    /// iterations.
    pub ramp_window: usize,
    pub pde_minibatch: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub weight_decay: f64,
    /// Stage-C gradient-norm early-stop tolerance.
    pub grad_tol: f64,
    pub log_every: usize,
}

impl StagePlan {
    pub fn paper_defaults() -> Self {
        Self {
            stage_a_iters: 5_000,
            stage_b_iters: 10_000,
            stage_c_iters: 5_000,
            ramp_window: 5_000,
            pde_minibatch: 2_000,
            lr_a: 1e-3,
            lr_b: 1e-3,
            weight_decay: 0.0,
            grad_tol: 1e-7,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_a_iters == 0
            || self.stage_b_iters == 0
            || self.stage_c_iters == 0
            || self.pde_minibatch == 0
        {
            return Err(CoreError::InvalidConfig(
                "stage iteration counts and mini-batch size must be positive".into(),
            ));
        }
        if self.ramp_window > self.stage_b_iters {
            return Err(CoreError::InvalidConfig(
                "ramp window must not exceed stage-B iterations".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training loss history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub iteration: usize,
    pub total: f64,
    pub data: f64,
    pub physics: f64,
    pub ramp_weight: f64,
    pub repulsion: f64,
}

/// Write a loss history as CSV.
pub fn write_loss_history_csv(path: &std::path::Path, records: &[LossRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "stage,iteration,total,data,physics,ramp_weight,repulsion")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.stage, r.iteration, r.total, r.data, r.physics, r.ramp_weight, r.repulsion
        )?;
    }
    Ok(())
}

fn sample_minibatch<'a>(
    collocation: &'a [Vec<f64>],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    if size >= collocation.len() {
        return collocation.to_vec();
    }
    rand::seq::index::sample(rng, collocation.len(), size)
        .into_iter()
        .map(|i| collocation[i].clone())
        .collect::<Vec<_>>()
}

/// Staged MAP pre-training: (a) data-only Adam, (b) Adam with the physics
/// term cosine-ramped over `ramp_window` and fresh residual mini-batches each
/// iteration, (c) L-BFGS on the full tempered negative log-posterior.
#[allow(clippy::too_many_arguments)]
pub fn run_map_pretraining(
    net: &NetworkSpec,
    init: &ParamVector,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    spec: &TemperedPosteriorSpec,
    problem: &Problem,
    plan: &StagePlan,
    seed: u64,
) -> Result<(ParamVector, Vec<LossRecord>)> {
    plan.validate()?;
    spec.validate()?;
    obs.validate(problem)?;
    let mut params = init.clone();
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));

    // Stage A: data-only.
    let mut adam = AdamState::new(params.len());
    for t in 0..plan.stage_a_iters {
        let loss = NegLogPosterior {
            spec,
            net,
            obs,
            collocation: &[],
            problem,
            physics_weight: 0.0,
        };
        let (value, grad) = loss.value_and_grad(&params)?;
        if !value.is_finite() {
            return Err(CoreError::Divergence {
                stage: "map-a",
                iteration: t,
            });
        }
        if t % plan.log_every == 0 {
            history.push(LossRecord {
                stage: "map-a".into(),
                iteration: t,
                total: value,
                data: value,
                physics: 0.0,
                ramp_weight: 0.0,
                repulsion: 0.0,
            });
        }
        adam_step(&mut adam, &mut params, &grad, plan.lr_a, plan.weight_decay)?;
    }

    // Stage B: ramped physics with fresh mini-batches.
    let mut adam = AdamState::new(params.len());
    for t in 0..plan.stage_b_iters {
        let w = cosine_ramp(t, plan.ramp_window);
        let batch = sample_minibatch(collocation, plan.pde_minibatch, &mut rng);
        let loss = NegLogPosterior {
            spec,
            net,
            obs,
            collocation: &batch,
            problem,
            physics_weight: w,
        };
        let (value, grad) = loss.value_and_grad(&params)?;
        if !value.is_finite() {
            return Err(CoreError::Divergence {
                stage: "map-b",
                iteration: t,
            });
        }
        if t % plan.log_every == 0 {
            let data = NegLogPosterior {
                spec,
                net,
                obs,
                collocation: &[],
                problem,
                physics_weight: 0.0,
            }
            .value(&params)?;
            history.push(LossRecord {
                stage: "map-b".into(),
                iteration: t,
                total: value,
                data,
                physics: value - data,
                ramp_weight: w,
                repulsion: 0.0,
            });
        }
        let lr = cosine_decay(t, plan.stage_b_iters, plan.lr_b);
        adam_step(&mut adam, &mut params, &grad, lr, plan.weight_decay)?;
    }

    // Stage C: L-BFGS on the full posterior.
    let loss = NegLogPosterior {
        spec,
        net,
        obs,
        collocation,
        problem,
        physics_weight: 1.0,
    };
    let outcome = lbfgs_minimize(
        &loss,
        params,
        &LbfgsOptions {
            max_iters: plan.stage_c_iters,
            grad_tol: plan.grad_tol,
            ..LbfgsOptions::default()
        },
    )?;
    history.push(LossRecord {
        stage: "map-c".into(),
        iteration: outcome.iterations,
        total: outcome.value,
        data: f64::NAN,
        physics: f64::NAN,
        ramp_weight: 1.0,
        repulsion: 0.0,
    });
    Ok((outcome.params, history))
}

/// Configuration for ensemble training (repulsive or vanilla).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsemblePlan {
    pub n_members: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lambda_pde: f64,
    pub lambda_rep: f64,
    pub variant: RepulsionVariant,
    /// Kernel bandwidth; a non-positive value selects the median heuristic,
    /// frozen after `bandwidth_warmup_frac * epochs` iterations.
    pub bandwidth: f64,
    pub bandwidth_warmup_frac: f64,
    pub repulsion_points: Vec<Vec<f64>>,
    /// Window for the physics ramp and the linear lambda_rep warmup.
    pub ramp_window: usize,
    /// 0 selects the full collocation set every step.
    pub pde_minibatch: usize,
    pub log_every: usize,
}

impl EnsemblePlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(CoreError::InvalidConfig(
                "ensemble needs at least 2 members".into(),
            ));
        }
        if self.lambda_rep > 0.0
            && self.variant == RepulsionVariant::FunctionSpace
            && self.repulsion_points.is_empty()
        {
            return Err(CoreError::InvalidConfig(
                "function-space repulsion needs repulsion points".into(),
            ));
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_bandwidth(
    net: &NetworkSpec,
    members: &[ParamVector],
    variant: RepulsionVariant,
    points: &[Vec<f64>],
) -> Result<f64> {
    let mut d2s = Vec::new();
    match variant {
        RepulsionVariant::ParameterSpace => {
            for i in 0..members.len() {
                for j in (i + 1)..members.len() {
                    let d2: f64 = members[i]
                        .0
                        .iter()
                        .zip(&members[j].0)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d2s.push(d2);
                }
            }
        }
        RepulsionVariant::FunctionSpace => {
            let outs: Vec<Vec<Vec<f64>>> = members
                .iter()
                .map(|m| {
                    points
                        .iter()
                        .map(|x| {
                            crate::network::forward(net, m, x, crate::network::DropoutMode::Off)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            for pt in 0..points.len() {
                for i in 0..members.len() {
                    for j in (i + 1)..members.len() {
                        let d2: f64 = outs[i][pt]
                            .iter()
                            .zip(&outs[j][pt])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        d2s.push(d2);
                    }
                }
            }
        }
    }
    Ok(median(&mut d2s).sqrt().max(1e-8))
}

/// Train an ensemble of `n_members` networks against a shared per-iteration
/// parameter snapshot. `lambda_rep = 0` yields a vanilla deep ensemble whose
/// members train fully independently of one another.
pub fn train_repulsive_ensemble(
    net: &NetworkSpec,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    problem: &Problem,
    plan: &EnsemblePlan,
    seed: u64,
) -> Result<(Vec<ParamVector>, Vec<LossRecord>)> {
    plan.validate()?;
    let m = plan.n_members;
    let mut members: Vec<ParamVector> =
        (0..m).map(|i| init_params(net, derive_seed(seed, i as u64))).collect();
    let mut adam: Vec<AdamState> = (0..m).map(|_| AdamState::new(net.param_count())).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..m)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xB47C_0FFE, i as u64)))
        .collect();
    let mut restarted = vec![false; m];
    let mut history = Vec::new();
    let mut bandwidth = if plan.bandwidth > 0.0 {
        plan.bandwidth
    } else {
        median_bandwidth(net, &members, plan.variant, &plan.repulsion_points)?
    };
    let warmup_end = ((plan.epochs as f64) * plan.bandwidth_warmup_frac).round() as usize;

    for t in 0..plan.epochs {
        if plan.bandwidth <= 0.0 && t > 0 && t <= warmup_end && plan.lambda_rep > 0.0 {
            bandwidth = median_bandwidth(net, &members, plan.variant, &plan.repulsion_points)?;
        }
        let ramp = cosine_ramp(t, plan.ramp_window);
        let rep_warm = if plan.ramp_window == 0 {
            1.0
        } else {
            (t as f64 / plan.ramp_window as f64).min(1.0)
        };
        let rep = RepulsionSpec {
            variant: plan.variant,
            bandwidth,
            lambda_rep: plan.lambda_rep * rep_warm,
            repulsion_points: plan.repulsion_points.clone(),
        };
        let snapshot = members.clone();
        let lr = cosine_decay(t, plan.epochs, plan.lr0);
        for i in 0..m {
            let batch = if plan.pde_minibatch == 0 || collocation.is_empty() {
                collocation.to_vec()
            } else {
                sample_minibatch(collocation, plan.pde_minibatch, &mut rngs[i])
            };
            let mut current = snapshot.clone();
            current[i] = members[i].clone();
            let step = ensemble_objective_grad(
                i,
                &current,
                net,
                obs,
                &batch,
                &rep,
                plan.lambda_pde,
                ramp,
                problem,
            );
            let diverged = match &step {
                Ok((v, _)) => !v.is_finite(),
                Err(_) => true,
            };
            if diverged {
                if restarted[i] {
                    return Err(CoreError::Divergence {
                        stage: "ensemble",
                        iteration: t,
                    });
                }
                restarted[i] = true;
                members[i] = init_params(net, derive_seed(seed.wrapping_add(7777), i as u64));
                adam[i] = AdamState::new(net.param_count());
                continue;
            }
            let (value, grad) = step?;
            if i == 0 && t % plan.log_every == 0 {
                let rep_value = if rep.lambda_rep > 0.0 {
                    match plan.variant {
                        RepulsionVariant::ParameterSpace => {
                            rep.lambda_rep * repulsion_parameter_space(&current, bandwidth)
                        }
                        RepulsionVariant::FunctionSpace => {
                            rep.lambda_rep
                                * repulsion_function_space(
                                    net,
                                    &current,
                                    &plan.repulsion_points,
                                    bandwidth,
                                )?
                        }
                    }
                } else {
                    0.0
                };
                history.push(LossRecord {
                    stage: "ensemble".into(),
                    iteration: t,
                    total: value,
                    data: value - rep_value,
                    physics: f64::NAN,
                    ramp_weight: ramp,
                    repulsion: rep_value,
                });
            }
            adam_step(&mut adam[i], &mut members[i], &grad, lr, plan.weight_decay)?;
        }
    }
    Ok((members, history))
}

/// Train a dropout network by minimizing the PINN loss with fresh stochastic
/// masks every step (cosine physics ramp, constant learning rate AdamW).
#[allow(clippy::too_many_arguments)]
pub fn train_mc_dropout(
    net: &NetworkSpec,
    init: &ParamVector,
    obs: &ObservationSet,
    collocation: &[Vec<f64>],
    problem: &Problem,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    lambda_pde: f64,
    ramp_window: usize,
    seed: u64,
) -> Result<(ParamVector, Vec<LossRecord>)> {
    if net.dropout_rate <= 0.0 {
        return Err(CoreError::InvalidConfig(
            "MC-dropout training requires dropout_rate > 0".into(),
        ));
    }
    let mut params = init.clone();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::new();
    for t in 0..epochs {
        let ramp = cosine_ramp(t, ramp_window);
        let loss = PinnLoss {
            net,
            obs,
            collocation,
            problem,
            lambda_pde,
            physics_weight: ramp,
            dropout_seed: Some(derive_seed(seed, t as u64)),
        };
        let (value, grad) = loss.value_and_grad(&params)?;
        if !value.is_finite() {
            return Err(CoreError::Divergence {
                stage: "mc-dropout",
                iteration: t,
            });
        }
        if t % 100 == 0 {
            history.push(LossRecord {
                stage: "mc-dropout".into(),
                iteration: t,
                total: value,
                data: f64::NAN,
                physics: f64::NAN,
                ramp_weight: ramp,
                repulsion: 0.0,
            });
        }
        adam_step(&mut adam, &mut params, &grad, lr, weight_decay)?;
    }
    Ok((params, history))
}
