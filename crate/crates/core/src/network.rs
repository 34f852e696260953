//! Fully connected tanh networks with optional dropout.
//!
//! Parameters live in a single flat vector ([`ParamVector`]) ordered layer by
//! layer, weights first (row major, one row per output unit) then biases.
//! Hidden layers use tanh, the output layer is linear. Inverted dropout is
//! applied after every hidden layer when a stochastic pass is requested, so
//! the deterministic pass needs no rescaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Affine input normalization: `x_norm = (x - shift) / scale`.
///
/// Derivatives reported by the autodiff engine are always chain-ruled back to
/// physical coordinates through this map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    /// Identity normalization for `dim` inputs.
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Zero-mean / unit-variance normalization computed from a point set.
    pub fn from_points(points: &[Vec<f64>]) -> Self {
        assert!(!points.is_empty(), "normalization needs at least one point");
        let dim = points[0].len();
        let n = points.len() as f64;
        let mut shift = vec![0.0; dim];
        for p in points {
            for (s, &x) in shift.iter_mut().zip(p) {
                *s += x;
            }
        }
        for s in shift.iter_mut() {
            *s /= n;
        }
        let mut var = vec![0.0; dim];
        for p in points {
            for i in 0..dim {
                let d = p[i] - shift[i];
                var[i] += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }
}

/// Architecture of a fully connected tanh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Layer widths including input and output, e.g. `[1, 50, 50, 1]`.
    pub layer_widths: Vec<usize>,
    /// Dropout rate in `[0, 1)`, applied after every hidden layer.
    pub dropout_rate: f64,
    pub input_norm: InputNorm,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        let dim = layer_widths[0];
        Self {
            layer_widths,
            dropout_rate: 0.0,
            input_norm: InputNorm::identity(dim),
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_input_norm(mut self, norm: InputNorm) -> Self {
        self.input_norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(CoreError::InvalidConfig(
                "network needs at least one hidden layer".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig("layer widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::InvalidConfig(
                "dropout rate must be in [0, 1)".into(),
            ));
        }
        if self.input_norm.shift.len() != self.input_dim()
            || self.input_norm.scale.len() != self.input_dim()
        {
            return Err(CoreError::InvalidConfig(
                "input normalization dimension mismatch".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total parameter count: sum of `w_i * w_{i+1} + w_{i+1}`.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `layer`'s weight block in the flat parameter vector.
    pub fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.layer_widths[l] * self.layer_widths[l + 1] + self.layer_widths[l + 1])
            .sum()
    }
}

/// Flat vector of network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// How dropout behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Deterministic pass, no masking.
    Off,
    /// Fresh Bernoulli masks drawn from the given seed, inverted scaling.
    Stochastic(u64),
}

/// Symmetric uniform init with scale `1/sqrt(fan_in)`; biases zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.gen_range(-bound..bound));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector(values)
}

/// Dropout masks for every hidden layer, already divided by the keep rate.
pub(crate) fn draw_masks(spec: &NetworkSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - spec.dropout_rate;
    spec.layer_widths[1..spec.layer_widths.len() - 1]
        .iter()
        .map(|&width| {
            (0..width)
                .map(|_| {
                    if spec.dropout_rate > 0.0 && rng.gen::<f64>() < spec.dropout_rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect()
        })
        .collect()
}

/// Plain forward pass returning the network outputs.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    x: &[f64],
    mode: DropoutMode,
) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.len(),
            context: "forward input",
        });
    }
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
            context: "forward params",
        });
    }
    let masks = match mode {
        DropoutMode::Off => None,
        DropoutMode::Stochastic(seed) => Some(draw_masks(spec, seed)),
    };
    let mut z: Vec<f64> = x
        .iter()
        .zip(&spec.input_norm.shift)
        .zip(&spec.input_norm.scale)
        .map(|((&xi, &s), &c)| (xi - s) / c)
        .collect();
    let p = &params.0;
    let mut offset = 0usize;
    let n_layers = spec.n_layers();
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let weights = &p[offset..offset + n_in * n_out];
        let biases = &p[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let mut a = vec![0.0; n_out];
        for (j, aj) in a.iter_mut().enumerate() {
            let row = &weights[j * n_in..(j + 1) * n_in];
            let mut acc = biases[j];
            for (wk, zk) in row.iter().zip(&z) {
                acc += wk * zk;
            }
            *aj = acc;
        }
        let last = l == n_layers - 1;
        if !last {
            for aj in a.iter_mut() {
                *aj = aj.tanh();
            }
            if let Some(masks) = &masks {
                for (aj, m) in a.iter_mut().zip(&masks[l]) {
                    *aj *= m;
                }
            }
        }
        for (i, aj) in a.iter().enumerate() {
            if !aj.is_finite() {
                let _ = i;
                return Err(CoreError::NonFiniteActivation { layer: l });
            }
        }
        z = a;
    }
    Ok(z)
}
