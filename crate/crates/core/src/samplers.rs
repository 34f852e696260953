//! Hamiltonian Monte Carlo with a fixed leapfrog length, and a multinomial
//! No-U-Turn sampler with dual-averaging step-size adaptation and diagonal
//! mass-matrix estimation; collocation subsampling for the physics
//! likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::network::{NetworkSpec, ParamVector};
use crate::physics::Problem;
use crate::posterior::TemperedPosteriorSpec;

/// Log-density target: returns `(log p, grad log p)` at a point.
pub trait LogpTarget {
    fn logp_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> LogpTarget for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn logp_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(q)
    }
}

/// Adapter: a loss (negative log-posterior) viewed as a log-density target.
pub struct NegatedLoss<'a>(pub &'a dyn crate::autodiff::LossFn);

impl LogpTarget for NegatedLoss<'_> {
    fn logp_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, mut g) = self.0.value_and_grad(&ParamVector(q.to_vec()))?;
        for gi in g.iter_mut() {
            *gi = -*gi;
        }
        Ok((-v, g))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub burn_in: usize,
    pub n_samples: usize,
    /// Abort if no proposal is accepted during burn-in. Disabled only in
    /// degenerate-configuration tests.
    pub abort_on_all_rejected: bool,
    /// Optional fixed diagonal metric (mass matrix); `None` keeps the
    /// identity. Supplying the local curvature diagonal preconditions stiff
    /// posteriors so the fixed step size stays inside the leapfrog stability
    /// region.
    pub mass_diag: Option<Vec<f64>>,
}

impl HmcConfig {
    /// The fixed-length HMC configuration used for the oscillator benchmark:
    /// step size 0.01, 50 leapfrog steps, 1,000 burn-in, 1,000 samples.
    pub fn paper_defaults() -> Self {
        Self {
            step_size: 0.01,
            n_leapfrog: 50,
            burn_in: 1_000,
            n_samples: 1_000,
            abort_on_all_rejected: true,
            mass_diag: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || self.n_leapfrog == 0 || self.n_samples == 0 {
            return Err(CoreError::InvalidConfig(
                "HMC step size, leapfrog count, and sample count must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NutsConfig {
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub warmup: usize,
    pub n_samples: usize,
    /// Fixed collocation subsample size for the physics likelihood.
    pub collocation_subsample: usize,
}

impl NutsConfig {
    pub fn paper_defaults() -> Self {
        Self {
            max_tree_depth: 6,
            target_accept: 0.65,
            warmup: 500,
            n_samples: 500,
            collocation_subsample: 1_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tree_depth == 0 {
            return Err(CoreError::InvalidConfig("tree depth must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(CoreError::InvalidConfig(
                "target acceptance must lie in (0, 1)".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(CoreError::InvalidConfig("need n_samples > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub acceptance_rate: f64,
    pub final_step_size: f64,
    pub step_size_trace: Vec<f64>,
    pub divergences: usize,
    /// Set when more than 25% of post-warmup trajectories diverged.
    pub divergence_warning: bool,
    /// Inverse mass diagonal (estimated posterior variances); empty for
    /// identity mass.
    pub inv_mass_diag: Vec<f64>,
    /// Leapfrog evaluations per retained draw (NUTS only).
    pub leapfrog_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// Retained draws, one parameter vector per row.
    pub samples: Vec<Vec<f64>>,
    pub diagnostics: SamplerDiagnostics,
}

impl PosteriorSamples {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.samples {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn write_diagnostics_json(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.diagnostics)?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

fn draw_momentum(rng: &mut ChaCha20Rng, inv_mass: &[f64]) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|&im| {
            let z: f64 = rng.sample(StandardNormal);
            z / im.sqrt()
        })
        .collect()
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    p.iter().zip(inv_mass).map(|(pi, im)| 0.5 * pi * pi * im).sum()
}

/// Kick-drift-kick leapfrog under a diagonal metric. Returns the final
/// position/momentum and the cached `(logp, grad)` at the final position, or
/// `None` if a non-finite state was encountered (flagged divergence).
pub fn leapfrog<T: LogpTarget + ?Sized>(
    target: &T,
    position: &[f64],
    momentum: &[f64],
    step_size: f64,
    n_steps: usize,
    inv_mass: &[f64],
) -> Result<Option<(Vec<f64>, Vec<f64>, f64, Vec<f64>)>> {
    let mut q = position.to_vec();
    let mut p = momentum.to_vec();
    let (_, mut grad) = target.logp_grad(&q)?;
    let mut logp = f64::NAN;
    for _ in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step_size * gi;
        }
        for ((qi, pi), im) in q.iter_mut().zip(&p).zip(inv_mass) {
            *qi += step_size * pi * im;
        }
        match target.logp_grad(&q) {
            Ok((lp, g)) => {
                logp = lp;
                grad = g;
            }
            Err(_) => return Ok(None),
        }
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(None);
        }
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step_size * gi;
        }
    }
    Ok(Some((q, p, logp, grad)))
}

/// Hutchinson estimate of the Hessian diagonal of a loss at `at`, using
/// Rademacher probes and finite-difference Hessian-vector products. Intended
/// for preconditioning: pair with [`HmcConfig::mass_diag`] after flooring to
/// a positive value.
pub fn hessian_diag_estimate(
    loss: &dyn crate::autodiff::LossFn,
    at: &[f64],
    probes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = at.len();
    let base = ParamVector(at.to_vec());
    let (_, g0) = loss.value_and_grad(&base)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut diag = vec![0.0; n];
    let h = 1e-5;
    for _ in 0..probes.max(1) {
        let v: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let shifted = ParamVector(at.iter().zip(&v).map(|(a, b)| a + h * b).collect());
        let (_, g1) = loss.value_and_grad(&shifted)?;
        for ((d, vi), (a, b)) in diag.iter_mut().zip(&v).zip(g1.iter().zip(&g0)) {
            *d += vi * (a - b) / h;
        }
    }
    for d in diag.iter_mut() {
        *d /= probes.max(1) as f64;
    }
    Ok(diag)
}

/// Largest eigenvalue of the preconditioned Hessian `M^{-1/2} H M^{-1/2}` of
/// a loss at `at`, by power iteration on finite-difference Hessian-vector
/// products.
pub fn preconditioned_lambda_max(
    loss: &dyn crate::autodiff::LossFn,
    at: &[f64],
    mass: &[f64],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let n = at.len();
    let base = ParamVector(at.to_vec());
    let (_, g0) = loss.value_and_grad(&base)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let h = 1e-5;
    let mut lam = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for x in v.iter_mut() {
            *x /= norm;
        }
        let w: Vec<f64> = v.iter().zip(mass).map(|(x, m)| x / m.sqrt()).collect();
        let shifted = ParamVector(at.iter().zip(&w).map(|(a, b)| a + h * b).collect());
        let (_, g1) = loss.value_and_grad(&shifted)?;
        let hv: Vec<f64> = g1
            .iter()
            .zip(&g0)
            .zip(mass)
            .map(|((a, b), m)| (a - b) / h / m.sqrt())
            .collect();
        lam = hv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = hv;
    }
    Ok(lam.abs())
}

/// Build a fixed diagonal metric that keeps leapfrog stable at `step_size`
/// for the given loss around `at`: the Hutchinson curvature diagonal
/// (floored at `floor`), globally rescaled so the preconditioned spectrum
/// fits inside the stability region with a 2x margin.
pub fn preconditioner_mass(
    loss: &dyn crate::autodiff::LossFn,
    at: &[f64],
    step_size: f64,
    floor: f64,
    probes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(step_size > 0.0) || !(floor > 0.0) {
        return Err(CoreError::InvalidConfig(
            "preconditioner needs positive step size and floor".into(),
        ));
    }
    let diag = hessian_diag_estimate(loss, at, probes, seed)?;
    let mut mass: Vec<f64> = diag.iter().map(|&d| d.max(floor)).collect();
    let lam = preconditioned_lambda_max(loss, at, &mass, 40, seed.wrapping_add(1))?;
    // Leapfrog on mode lambda is stable for step < 2 / sqrt(lambda); scale
    // the metric so the pinned step sits at half that bound.
    let margin = 2.0;
    let k = lam * (step_size * margin / 2.0).powi(2);
    if k > 1.0 {
        for m in mass.iter_mut() {
            *m *= k;
        }
    }
    Ok(mass)
}

/// Fixed-length HMC with a Metropolis correction under an optional fixed
/// diagonal metric (identity by default).
pub fn hmc_sample<T: LogpTarget + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &HmcConfig,
    seed: u64,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dim = init.len();
    let inv_mass: Vec<f64> = match &cfg.mass_diag {
        Some(m) => {
            if m.len() != dim {
                return Err(CoreError::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                    context: "HMC mass diagonal",
                });
            }
            if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(CoreError::InvalidConfig(
                    "HMC mass diagonal must be finite and positive".into(),
                ));
            }
            m.iter().map(|&v| 1.0 / v).collect()
        }
        None => vec![1.0; dim],
    };
    let mut q = init.to_vec();
    let (mut logp, _) = target.logp_grad(&q)?;
    if !logp.is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut accepted_total = 0usize;
    let mut accepted_burn_in = 0usize;
    let total = cfg.burn_in + cfg.n_samples;
    for it in 0..total {
        let p0 = draw_momentum(&mut rng, &inv_mass);
        let h0 = -logp + kinetic(&p0, &inv_mass);
        let proposal = leapfrog(target, &q, &p0, cfg.step_size, cfg.n_leapfrog, &inv_mass)?;
        // The acceptance uniform is drawn unconditionally to keep the RNG
        // stream independent of trajectory fate.
        let u: f64 = rng.gen();
        if let Some((q1, p1, logp1, _)) = proposal {
            let h1 = -logp1 + kinetic(&p1, &inv_mass);
            if u < (h0 - h1).exp() {
                q = q1;
                logp = logp1;
                accepted_total += 1;
                if it < cfg.burn_in {
                    accepted_burn_in += 1;
                }
            }
        }
        if it + 1 == cfg.burn_in
            && cfg.burn_in > 0
            && accepted_burn_in == 0
            && cfg.abort_on_all_rejected
        {
            return Err(CoreError::AllRejected);
        }
        if it >= cfg.burn_in {
            samples.push(q.clone());
        }
    }
    Ok(PosteriorSamples {
        samples,
        diagnostics: SamplerDiagnostics {
            acceptance_rate: accepted_total as f64 / total as f64,
            final_step_size: cfg.step_size,
            step_size_trace: vec![cfg.step_size],
            divergences: 0,
            divergence_warning: false,
            inv_mass_diag: if cfg.mass_diag.is_some() {
                inv_mass.clone()
            } else {
                vec![]
            },
            leapfrog_counts: vec![],
        },
    })
}

/// Energy error beyond which a trajectory is marked divergent.
const DIVERGENCE_ENERGY: f64 = 1_000.0;

struct Node {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Tree {
    minus: Node,
    plus: Node,
    proposal: Vec<f64>,
    proposal_logp: f64,
    log_sum_w: f64,
    sum_alpha: f64,
    n_alpha: usize,
    turning: bool,
    diverged: bool,
    n_leapfrog: usize,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// No-U-turn termination criterion on a (sub)tree's endpoints under a
/// diagonal metric.
pub(crate) fn is_turning(
    q_minus: &[f64],
    q_plus: &[f64],
    p_minus: &[f64],
    p_plus: &[f64],
    inv_mass: &[f64],
) -> bool {
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..q_minus.len() {
        let dq = q_plus[i] - q_minus[i];
        dot_minus += dq * p_minus[i] * inv_mass[i];
        dot_plus += dq * p_plus[i] * inv_mass[i];
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogpTarget + ?Sized>(
    target: &T,
    from: &Node,
    direction: f64,
    depth: usize,
    step_size: f64,
    h0: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<Tree> {
    if depth == 0 {
        let step = leapfrog(target, &from.q, &from.p, direction * step_size, 1, inv_mass)?;
        return Ok(match step {
            Some((q, p, logp, grad)) => {
                let h = -logp + kinetic(&p, inv_mass);
                let log_w = h0 - h;
                let diverged = !log_w.is_finite() || log_w < -DIVERGENCE_ENERGY;
                let alpha = log_w.min(0.0).exp();
                let node = Node {
                    q: q.clone(),
                    p,
                    grad,
                    logp,
                };
                let plus = Node {
                    q: node.q.clone(),
                    p: node.p.clone(),
                    grad: node.grad.clone(),
                    logp: node.logp,
                };
                Tree {
                    minus: node,
                    plus,
                    proposal: q,
                    proposal_logp: logp,
                    log_sum_w: if diverged { f64::NEG_INFINITY } else { log_w },
                    sum_alpha: if alpha.is_finite() { alpha } else { 0.0 },
                    n_alpha: 1,
                    turning: false,
                    diverged,
                    n_leapfrog: 1,
                }
            }
            None => Tree {
                minus: Node {
                    q: from.q.clone(),
                    p: from.p.clone(),
                    grad: from.grad.clone(),
                    logp: from.logp,
                },
                plus: Node {
                    q: from.q.clone(),
                    p: from.p.clone(),
                    grad: from.grad.clone(),
                    logp: from.logp,
                },
                proposal: from.q.clone(),
                proposal_logp: from.logp,
                log_sum_w: f64::NEG_INFINITY,
                sum_alpha: 0.0,
                n_alpha: 1,
                turning: false,
                diverged: true,
                n_leapfrog: 1,
            },
        });
    }
    let mut inner = build_tree(target, from, direction, depth - 1, step_size, h0, inv_mass, rng)?;
    if inner.diverged || inner.turning {
        return Ok(inner);
    }
    let grow_from = if direction > 0.0 { &inner.plus } else { &inner.minus };
    let outer = build_tree(
        target, grow_from, direction, depth - 1, step_size, h0, inv_mass, rng,
    )?;
    let log_sum_w = log_sum_exp(inner.log_sum_w, outer.log_sum_w);
    // Multinomial proposal swap between the halves.
    let take_outer = {
        let u: f64 = rng.gen();
        u.ln() < outer.log_sum_w - log_sum_w
    };
    let (proposal, proposal_logp) = if take_outer && !outer.diverged {
        (outer.proposal.clone(), outer.proposal_logp)
    } else {
        (inner.proposal.clone(), inner.proposal_logp)
    };
    let (minus, plus) = if direction > 0.0 {
        (inner.minus, outer.plus)
    } else {
        (outer.minus, inner.plus)
    };
    let turning = outer.turning
        || is_turning(&minus.q, &plus.q, &minus.p, &plus.p, inv_mass);
    inner.sum_alpha += outer.sum_alpha;
    inner.n_alpha += outer.n_alpha;
    Ok(Tree {
        minus,
        plus,
        proposal,
        proposal_logp,
        log_sum_w,
        sum_alpha: inner.sum_alpha,
        n_alpha: inner.n_alpha,
        turning,
        diverged: outer.diverged,
        n_leapfrog: inner.n_leapfrog + outer.n_leapfrog,
    })
}

/// Streaming mean/variance accumulator (Welford).
struct RunningVar {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVar {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn variance(&self) -> Option<Vec<f64>> {
        if self.n < 2 {
            return None;
        }
        Some(self.m2.iter().map(|m| m / (self.n as f64 - 1.0)).collect())
    }
}

/// Heuristic initial step size: double/halve until the one-step acceptance
/// probability crosses 1/2.
fn initial_step_size<T: LogpTarget + ?Sized>(
    target: &T,
    q: &[f64],
    logp: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let mut eps = 1.0;
    let p0 = draw_momentum(rng, inv_mass);
    let h0 = -logp + kinetic(&p0, inv_mass);
    let accept_logp = |eps: f64| -> Result<f64> {
        match leapfrog(target, q, &p0, eps, 1, inv_mass)? {
            Some((_, p1, logp1, _)) => Ok(h0 - (-logp1 + kinetic(&p1, inv_mass))),
            None => Ok(f64::NEG_INFINITY),
        }
    };
    let mut a = accept_logp(eps)?;
    let dir: f64 = if a > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..60 {
        eps *= 2.0f64.powf(dir);
        a = accept_logp(eps)?;
        let crossed = if dir > 0.0 {
            a <= (0.5f64).ln()
        } else {
            a > (0.5f64).ln()
        };
        if crossed {
            break;
        }
        if eps < 1e-12 || eps > 1e6 {
            break;
        }
    }
    Ok(eps.clamp(1e-12, 1e6))
}

/// Multinomial NUTS with dual-averaging step-size adaptation toward
/// `target_accept` and a diagonal mass matrix estimated over an expanding
/// warmup window. Warmup draws are discarded.
pub fn nuts_sample<T: LogpTarget + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &NutsConfig,
    seed: u64,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dim = init.len();
    let mut inv_mass = vec![1.0; dim];
    let mut q = init.to_vec();
    let (mut logp, mut grad) = target.logp_grad(&q)?;
    if !logp.is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }

    // Dual-averaging state (gamma = 0.05, t0 = 10, kappa = 0.75).
    let mut eps = initial_step_size(target, &q, logp, &inv_mass, &mut rng)?;
    let mu = (10.0 * eps).ln();
    let (gamma, t0, kappa) = (0.05, 10.0, 0.75);
    let mut h_bar = 0.0;
    let mut log_eps_bar = 0.0;

    let mut var_acc = RunningVar::new(dim);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut step_size_trace = Vec::new();
    let mut leapfrog_counts = Vec::new();
    let mut divergences = 0usize;
    let mut sum_alpha_post = 0.0;
    let mut n_alpha_post = 0usize;

    let total = cfg.warmup + cfg.n_samples;
    for it in 0..total {
        let warming = it < cfg.warmup;
        let p0 = draw_momentum(&mut rng, &inv_mass);
        let h0 = -logp + kinetic(&p0, &inv_mass);
        let root = Node {
            q: q.clone(),
            p: p0.clone(),
            grad: grad.clone(),
            logp,
        };
        let mut minus = Node {
            q: root.q.clone(),
            p: root.p.clone(),
            grad: root.grad.clone(),
            logp: root.logp,
        };
        let mut plus = root;
        let mut log_sum_w = 0.0; // weight of the initial point
        let mut proposal = q.clone();
        let mut proposal_logp = logp;
        let mut sum_alpha = 0.0;
        let mut n_alpha = 0usize;
        let mut n_leap = 0usize;
        let mut diverged = false;

        for depth in 0..cfg.max_tree_depth {
            let direction: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let from = if direction > 0.0 { &plus } else { &minus };
            let tree = build_tree(
                target, from, direction, depth, eps, h0, &inv_mass, &mut rng,
            )?;
            n_leap += tree.n_leapfrog;
            sum_alpha += tree.sum_alpha;
            n_alpha += tree.n_alpha;
            if tree.diverged {
                diverged = true;
                break;
            }
            if !tree.turning {
                let u: f64 = rng.gen();
                if u.ln() < tree.log_sum_w - log_sum_w {
                    proposal = tree.proposal.clone();
                    proposal_logp = tree.proposal_logp;
                }
            }
            log_sum_w = log_sum_exp(log_sum_w, tree.log_sum_w);
            if direction > 0.0 {
                plus = tree.plus;
            } else {
                minus = tree.minus;
            }
            if tree.turning
                || is_turning(&minus.q, &plus.q, &minus.p, &plus.p, &inv_mass)
            {
                break;
            }
        }

        if proposal != q {
            q = proposal;
            logp = proposal_logp;
            let (_, g) = target.logp_grad(&q)?;
            grad = g;
        }

        let alpha_stat = if n_alpha > 0 {
            sum_alpha / n_alpha as f64
        } else {
            0.0
        };
        if warming {
            let m = (it + 1) as f64;
            h_bar = (1.0 - 1.0 / (m + t0)) * h_bar
                + (cfg.target_accept - alpha_stat) / (m + t0);
            let log_eps = mu - m.sqrt() / gamma * h_bar;
            eps = log_eps.exp();
            let w = m.powf(-kappa);
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
            step_size_trace.push(eps);
            var_acc.push(&q);
            // Expanding-window mass update.
            if it >= 99 && (it + 1) % 50 == 0 {
                if let Some(var) = var_acc.variance() {
                    let mean_var = var.iter().sum::<f64>() / dim as f64;
                    inv_mass = var
                        .iter()
                        .map(|&v| v.max(1e-6 * mean_var.max(1e-300)))
                        .collect();
                }
            }
            if it + 1 == cfg.warmup {
                eps = log_eps_bar.exp();
                step_size_trace.push(eps);
            }
        } else {
            samples.push(q.clone());
            leapfrog_counts.push(n_leap);
            if diverged {
                divergences += 1;
            }
            sum_alpha_post += alpha_stat;
            n_alpha_post += 1;
        }
    }

    let divergence_warning = divergences * 4 > cfg.n_samples;
    Ok(PosteriorSamples {
        samples,
        diagnostics: SamplerDiagnostics {
            acceptance_rate: if n_alpha_post > 0 {
                sum_alpha_post / n_alpha_post as f64
            } else {
                0.0
            },
            final_step_size: eps,
            step_size_trace,
            divergences,
            divergence_warning,
            inv_mass_diag: inv_mass,
            leapfrog_counts,
        },
    })
}

/// Draw a fixed collocation subsample (without replacement) for a sampler
/// run.
pub fn fixed_subsample(collocation: &[Vec<f64>], size: usize, seed: u64) -> Vec<Vec<f64>> {
    if size >= collocation.len() {
        return collocation.to_vec();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, collocation.len(), size)
        .into_iter()
        .collect();
    idx.sort_unstable();
    idx.into_iter().map(|i| collocation[i].clone()).collect()
}

/// Physics log-likelihood over a fixed random subsample, scaled by
/// `N_c / subsample_size`.
pub fn subsampled_physics_logp(
    spec: &TemperedPosteriorSpec,
    net: &NetworkSpec,
    params: &ParamVector,
    collocation: &[Vec<f64>],
    subsample_size: usize,
    seed: u64,
    problem: &Problem,
) -> Result<f64> {
    if subsample_size > collocation.len() {
        return Err(CoreError::InvalidConfig(
            "subsample size exceeds collocation count".into(),
        ));
    }
    let sub = fixed_subsample(collocation, subsample_size, seed);
    let l = crate::posterior::log_lik_pde(net, params, &sub, spec.sigma_pde, problem)?;
    Ok(l * collocation.len() as f64 / sub.len() as f64)
}
