//! Differentiation engine for tanh MLPs.
//!
//! Input derivatives (up to second order, one direction per input coordinate)
//! are propagated forward as truncated Taylor jets. Parameter gradients of
//! scalar losses, including losses containing input derivatives of the
//! network, are obtained by a reverse sweep over the recorded jet program
//! ([`GradientTape`]). Only the elementary operations needed for the MLPs in
//! this crate are supported: affine layers, tanh, and dropout mask multiply.
//!
//! All derivatives are reported in physical coordinates: the chain-rule
//! factors of the affine input normalization are folded into the jet seeds.

use crate::error::{CoreError, Result};
use crate::network::{draw_masks, DropoutMode, NetworkSpec, ParamVector};

/// Value plus first and second directional derivatives of a single scalar
/// output, one entry per differentiated input direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTrace {
    pub value: f64,
    pub input_tangents: Vec<f64>,
    pub second_tangents: Vec<f64>,
}

/// Jets for one layer of neurons: values, and per input direction the first
/// and second derivatives. `g` and `h` are direction-major with stride
/// `width`.
#[derive(Debug, Clone)]
pub struct Jets {
    pub width: usize,
    pub dirs: usize,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Jets {
    fn zeros(width: usize, dirs: usize) -> Self {
        Self {
            width,
            dirs,
            v: vec![0.0; width],
            g: vec![0.0; width * dirs],
            h: vec![0.0; width * dirs],
        }
    }

    #[inline]
    pub fn g_dir(&self, dir: usize) -> &[f64] {
        &self.g[dir * self.width..(dir + 1) * self.width]
    }

    #[inline]
    pub fn h_dir(&self, dir: usize) -> &[f64] {
        &self.h[dir * self.width..(dir + 1) * self.width]
    }
}

/// Recorded forward jet program for one input point. Replaying it backward
/// assigns exactly one adjoint per parameter; parameters the output does not
/// depend on receive adjoint zero.
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Input jets after normalization seeding.
    input: Jets,
    /// Pre-activation jets per layer.
    pre: Vec<Jets>,
    /// Post-activation (tanh + mask) jets per hidden layer.
    post: Vec<Jets>,
    masks: Option<Vec<Vec<f64>>>,
}

impl GradientTape {
    /// Jets of the network outputs.
    pub fn output(&self) -> &Jets {
        self.pre.last().unwrap()
    }
}

/// Adjoints of the output jets: `d loss / d (value, first, second)` for each
/// output unit. Same layout as [`Jets`].
#[derive(Debug, Clone)]
pub struct OutputAdjoints {
    pub width: usize,
    pub dirs: usize,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl OutputAdjoints {
    pub fn zeros(width: usize, dirs: usize) -> Self {
        Self {
            width,
            dirs,
            v: vec![0.0; width],
            g: vec![0.0; width * dirs],
            h: vec![0.0; width * dirs],
        }
    }
}

/// Forward pass propagating second-order jets, recording the tape.
///
/// `masks`, when present, must hold one inverted-dropout mask per hidden
/// layer.
pub fn forward_jets(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &[f64],
    masks: Option<&[Vec<f64>]>,
) -> Result<GradientTape> {
    let dim = spec.input_dim();
    if x.len() != dim {
        return Err(CoreError::DimensionMismatch {
            expected: dim,
            got: x.len(),
            context: "forward_jets input",
        });
    }
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
            context: "forward_jets params",
        });
    }

    // Seed input jets; derivatives are taken w.r.t. physical coordinates, so
    // the normalization chain-rule factor 1/scale enters the first tangent.
    let mut input = Jets::zeros(dim, dim);
    for j in 0..dim {
        input.v[j] = (x[j] - spec.input_norm.shift[j]) / spec.input_norm.scale[j];
        input.g[j * dim + j] = 1.0 / spec.input_norm.scale[j];
    }

    let n_layers = spec.n_layers();
    let p = &params.0;
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Jets> = Vec::with_capacity(n_layers - 1);
    let mut offset = 0usize;

    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let weights = &p[offset..offset + n_in * n_out];
        let biases = &p[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;

        let z = if l == 0 { &input } else { &post[l - 1] };
        let mut a = Jets::zeros(n_out, dim);
        for j in 0..n_out {
            let row = &weights[j * n_in..(j + 1) * n_in];
            let mut acc = biases[j];
            for (wk, zk) in row.iter().zip(&z.v) {
                acc += wk * zk;
            }
            a.v[j] = acc;
        }
        for dir in 0..dim {
            let zg = z.g_dir(dir);
            let zh = z.h_dir(dir);
            for j in 0..n_out {
                let row = &weights[j * n_in..(j + 1) * n_in];
                let mut accg = 0.0;
                let mut acch = 0.0;
                for k in 0..n_in {
                    accg += row[k] * zg[k];
                    acch += row[k] * zh[k];
                }
                a.g[dir * n_out + j] = accg;
                a.h[dir * n_out + j] = acch;
            }
        }
        for (j, &v) in a.v.iter().enumerate() {
            if !v.is_finite() {
                let _ = j;
                return Err(CoreError::NonFiniteActivation { layer: l });
            }
        }

        let last = l == n_layers - 1;
        if !last {
            // tanh jet: y = tanh(a), y' = (1-y^2) a', y'' = (1-y^2) a'' - 2 y y' a'.
            let mut y = Jets::zeros(n_out, dim);
            for j in 0..n_out {
                let t = a.v[j].tanh();
                y.v[j] = t;
            }
            for dir in 0..dim {
                for j in 0..n_out {
                    let t = y.v[j];
                    let dt = 1.0 - t * t;
                    let ag = a.g[dir * n_out + j];
                    let ah = a.h[dir * n_out + j];
                    y.g[dir * n_out + j] = dt * ag;
                    y.h[dir * n_out + j] = dt * ah - 2.0 * t * dt * ag * ag;
                }
            }
            if let Some(masks) = masks {
                let m = &masks[l];
                for j in 0..n_out {
                    y.v[j] *= m[j];
                }
                for dir in 0..dim {
                    for j in 0..n_out {
                        y.g[dir * n_out + j] *= m[j];
                        y.h[dir * n_out + j] *= m[j];
                    }
                }
            }
            post.push(y);
        }
        pre.push(a);
    }

    Ok(GradientTape {
        input,
        pre,
        post,
        masks: masks.map(|m| m.to_vec()),
    })
}

/// Reverse sweep: accumulates `d loss / d params` into `grad`, given the
/// adjoints of the output jets.
pub fn backward_params(
    spec: &NetworkSpec,
    params: &ParamVector,
    tape: &GradientTape,
    adj: &OutputAdjoints,
    grad: &mut [f64],
) {
    debug_assert_eq!(grad.len(), spec.param_count());
    let dim = spec.input_dim();
    let n_layers = spec.n_layers();
    let p = &params.0;

    // Adjoints of the post-activation jets of the current layer.
    let mut bar = Jets {
        width: adj.width,
        dirs: adj.dirs,
        v: adj.v.clone(),
        g: adj.g.clone(),
        h: adj.h.clone(),
    };

    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let offset = spec.layer_offset(l);
        let weights = &p[offset..offset + n_in * n_out];

        // Through dropout mask and tanh (hidden layers only); the output
        // layer is identity, so `bar` is already the pre-activation adjoint.
        let bar_a = if l < n_layers - 1 {
            let a = &pre_layer(tape, l);
            let mut bar_y = bar;
            if let Some(masks) = &tape.masks {
                let m = &masks[l];
                for j in 0..n_out {
                    bar_y.v[j] *= m[j];
                }
                for dir in 0..dim {
                    for j in 0..n_out {
                        bar_y.g[dir * n_out + j] *= m[j];
                        bar_y.h[dir * n_out + j] *= m[j];
                    }
                }
            }
            let mut bar_a = Jets::zeros(n_out, dim);
            for j in 0..n_out {
                let t = a.v[j].tanh();
                let dt = 1.0 - t * t;
                let mut acc_v = bar_y.v[j] * dt;
                for dir in 0..dim {
                    let idx = dir * n_out + j;
                    let ag = a.g[idx];
                    let ah = a.h[idx];
                    let byg = bar_y.g[idx];
                    let byh = bar_y.h[idx];
                    acc_v += byg * (-2.0 * t * dt * ag);
                    acc_v += byh * (-2.0 * t * dt * ah - 2.0 * dt * (1.0 - 3.0 * t * t) * ag * ag);
                    bar_a.g[idx] = byg * dt + byh * (-4.0 * t * dt * ag);
                    bar_a.h[idx] = byh * dt;
                }
                bar_a.v[j] = acc_v;
            }
            bar_a
        } else {
            bar
        };

        // Affine backward: weight/bias gradients and adjoint of the inputs.
        let z = if l == 0 { &tape.input } else { &tape.post[l - 1] };
        let gw = &mut grad[offset..offset + n_in * n_out];
        for j in 0..n_out {
            let row = &mut gw[j * n_in..(j + 1) * n_in];
            let bav = bar_a.v[j];
            for (k, rk) in row.iter_mut().enumerate() {
                *rk += bav * z.v[k];
            }
            for dir in 0..dim {
                let bag = bar_a.g[dir * n_out + j];
                let bah = bar_a.h[dir * n_out + j];
                let zg = z.g_dir(dir);
                let zh = z.h_dir(dir);
                for (k, rk) in row.iter_mut().enumerate() {
                    *rk += bag * zg[k] + bah * zh[k];
                }
            }
        }
        let gb = &mut grad[offset + n_in * n_out..offset + n_in * n_out + n_out];
        for j in 0..n_out {
            gb[j] += bar_a.v[j];
        }

        if l == 0 {
            break;
        }
        let mut bar_z = Jets::zeros(n_in, dim);
        for j in 0..n_out {
            let row = &weights[j * n_in..(j + 1) * n_in];
            let bav = bar_a.v[j];
            for k in 0..n_in {
                bar_z.v[k] += row[k] * bav;
            }
            for dir in 0..dim {
                let bag = bar_a.g[dir * n_out + j];
                let bah = bar_a.h[dir * n_out + j];
                for k in 0..n_in {
                    bar_z.g[dir * n_in + k] += row[k] * bag;
                    bar_z.h[dir * n_in + k] += row[k] * bah;
                }
            }
        }
        bar = bar_z;
    }
}

fn pre_layer<'a>(tape: &'a GradientTape, l: usize) -> &'a Jets {
    &tape.pre[l]
}

/// Network outputs plus first and diagonal second input derivatives, in
/// physical coordinates. One [`DualTrace`] per output unit.
pub fn evaluate_with_input_derivatives(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &[f64],
) -> Result<Vec<DualTrace>> {
    evaluate_with_input_derivatives_masked(spec, params, x, DropoutMode::Off)
}

/// Same as [`evaluate_with_input_derivatives`], with an explicit dropout mode.
pub fn evaluate_with_input_derivatives_masked(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &[f64],
    mode: DropoutMode,
) -> Result<Vec<DualTrace>> {
    let masks = match mode {
        DropoutMode::Off => None,
        DropoutMode::Stochastic(seed) => Some(draw_masks(spec, seed)),
    };
    let tape = forward_jets(spec, params, x, masks.as_deref())?;
    let out = tape.output();
    let dim = spec.input_dim();
    Ok((0..out.width)
        .map(|k| DualTrace {
            value: out.v[k],
            input_tangents: (0..dim).map(|d| out.g[d * out.width + k]).collect(),
            second_tangents: (0..dim).map(|d| out.h[d * out.width + k]).collect(),
        })
        .collect())
}

/// A scalar loss over the parameter vector with an analytic gradient.
pub trait LossFn {
    fn value(&self, params: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)>;
}

/// Gradient of a scalar loss with finiteness checks.
pub fn loss_gradient<L: LossFn + ?Sized>(loss: &L, params: &ParamVector) -> Result<Vec<f64>> {
    let (v, g) = loss.value_and_grad(params)?;
    if !v.is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }
    if let Some(index) = g.iter().position(|x| !x.is_finite()) {
        return Err(CoreError::NonFiniteGradient { index });
    }
    Ok(g)
}
