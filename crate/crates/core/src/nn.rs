//! Dense feed-forward networks in double precision.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. Batched inputs
//! are flat row-major buffers of `n * in_dim` scalars. Hidden layers carry an
//! activation; the output layer is always affine.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;

/// Lower clamp for Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -20.0;
/// Upper clamp for Gaussian log standard deviations.
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside the tanh-squash correction so `log(1 - tanh(u)^2)` stays finite.
pub const TANH_EPS: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"LSRN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    /// One activation per hidden layer, so `activations.len() == layers.len() - 1`.
    activations: Vec<Activation>,
}

/// Partial derivatives with the same shape tree as [`MlpParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grad {
    pub layers: Vec<Layer>,
}

/// Intermediate activations of a batched forward pass, consumed by
/// [`MlpParams::backward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    n: usize,
    /// `values[0]` is the input batch, `values[i]` the (activated) output of layer `i - 1`.
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape holds at least the input")
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable from the given strides,
    // which the callers derive from the same dimensions asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl MlpParams {
    /// Builds a network with layer sizes `sizes = [in, h1, ..., out]`, initialised
    /// uniformly in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
                let mut layer = Layer::zeros(in_dim, out_dim);
                for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect::<Vec<_>>();
        let activations = vec![activation; layers.len() - 1];
        Self { layers, activations }
    }

    pub fn from_layers(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("network has no layers".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(NnError::Shape(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
                return Err(NnError::Shape(format!("layer {i} buffers do not match its dims")));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!("layer {i}")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activations })
    }

    /// Multiplies the output layer's weights and biases by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.iter_mut().for_each(|w| *w *= factor);
        last.bias.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_batch(x, 1)?.values.pop().expect("non-empty"))
    }

    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<Tape, NnError> {
        let in_dim = self.input_dim();
        if x.len() != n * in_dim {
            return Err(NnError::Dim {
                layer: 0,
                expected: n * in_dim,
                got: x.len(),
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = values.last().expect("non-empty");
            let mut out = vec![0.0; n * layer.out_dim];
            for row in out.chunks_exact_mut(layer.out_dim) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                n,
                layer.in_dim,
                layer.out_dim,
                input,
                layer.in_dim as isize,
                1,
                &layer.weight,
                1,
                layer.in_dim as isize,
                &mut out,
                1.0,
            );
            if let Some(act) = self.activations.get(i) {
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            values.push(out);
        }
        Ok(Tape { n, values })
    }

    /// Reverse-mode pass over a recorded batch. `upstream` is `n * out_dim`;
    /// parameter gradients are summed over the batch. Returns the gradient
    /// with respect to the input batch as well.
    pub fn backward_batch(&self, tape: &Tape, upstream: &[f64]) -> Result<(Grad, Vec<f64>), NnError> {
        let n = tape.n;
        if upstream.len() != n * self.output_dim() {
            return Err(NnError::Dim {
                layer: self.layers.len() - 1,
                expected: n * self.output_dim(),
                got: upstream.len(),
            });
        }
        if tape.values.len() != self.layers.len() + 1 {
            return Err(NnError::Shape("tape was recorded by a different network".into()));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(act) = self.activations.get(i) {
                let out = &tape.values[i + 1];
                for (d, y) in delta.iter_mut().zip(out) {
                    *d *= act.derivative_from_output(*y);
                }
            }
            let input = &tape.values[i];
            let mut g = Layer::zeros(layer.in_dim, layer.out_dim);
            // dW = delta^T · input
            gemm(
                layer.out_dim,
                n,
                layer.in_dim,
                &delta,
                1,
                layer.out_dim as isize,
                input,
                layer.in_dim as isize,
                1,
                &mut g.weight,
                0.0,
            );
            for row in delta.chunks_exact(layer.out_dim) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            // d input = delta · W
            let mut dx = vec![0.0; n * layer.in_dim];
            gemm(
                n,
                layer.out_dim,
                layer.in_dim,
                &delta,
                layer.out_dim as isize,
                1,
                &layer.weight,
                layer.in_dim as isize,
                1,
                &mut dx,
                0.0,
            );
            grads.push(g);
            delta = dx;
        }
        grads.reverse();
        Ok((Grad { layers: grads }, delta))
    }

    /// Single-sample reverse-mode pass.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Grad, Vec<f64>), NnError> {
        let tape = self.forward_batch(x, 1)?;
        self.backward_batch(&tape, upstream)
    }

    /// Serializes to the flat little-endian `LSRN` format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for (i, layer) in self.layers.iter().enumerate() {
            w.write_u32::<LittleEndian>(layer.in_dim as u32)?;
            w.write_u32::<LittleEndian>(layer.out_dim as u32)?;
            w.write_u8(self.activations.get(i).map_or(0, |a| a.tag()))?;
            for v in layer.weight.iter().chain(&layer.bias) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut layers = Vec::with_capacity(count);
        let mut activations = Vec::with_capacity(count.saturating_sub(1));
        for i in 0..count {
            let in_dim = r.read_u32::<LittleEndian>()? as usize;
            let out_dim = r.read_u32::<LittleEndian>()? as usize;
            let tag = r.read_u8()?;
            if i + 1 < count {
                activations.push(
                    Activation::from_tag(tag)
                        .ok_or_else(|| NnError::Format(format!("layer {i}: unknown activation tag {tag}")))?,
                );
            } else if tag != 0 {
                return Err(NnError::Format("output layer must be affine".into()));
            }
            let mut layer = Layer::zeros(in_dim, out_dim);
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = r.read_f64::<LittleEndian>()?;
            }
            layers.push(layer);
        }
        Self::from_layers(layers, activations)
    }
}

impl Grad {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Grad) -> Result<(), NnError> {
        if !self.matches(other) {
            return Err(NnError::Shape("gradient trees differ".into()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        Ok(())
    }

    fn matches(&self, other: &Grad) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    fn matches_params(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(a, b)| a.same_shape(b))
    }
}

/// Adam moments for one parameter tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Grad,
    pub v: Grad,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &MlpParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Grad::zeros_like(params),
            v: Grad::zeros_like(params),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update. Rejects non-finite gradients before touching
/// any state.
pub fn adam_step(params: &mut MlpParams, state: &mut AdamState, grad: &Grad, lr: f64) -> Result<(), NnError> {
    if !grad.matches_params(params) || !state.m.matches_params(params) || !state.v.matches_params(params) {
        return Err(NnError::Shape("adam: parameter, moment and gradient trees differ".into()));
    }
    if !grad.is_finite() {
        return Err(NnError::NonFinite("adam gradient".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidArgument(format!("learning rate {lr}")));
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grad.layers)
        .zip(state.m.layers.iter_mut())
        .zip(state.v.layers.iter_mut())
    {
        let ps = p.weight.iter_mut().chain(p.bias.iter_mut());
        let gs = g.weight.iter().chain(&g.bias);
        let ms = m.weight.iter_mut().chain(m.bias.iter_mut());
        let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
        for (((p, g), m), v) in ps.zip(gs).zip(ms).zip(vs) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `target <- target + tau * (online - target)`; `tau = 1` copies exactly.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<(), NnError> {
    if !target.same_shape(online) {
        return Err(NnError::Shape("polyak: target and online networks differ".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::InvalidArgument(format!("polyak tau {tau} outside (0, 1]")));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        let ts = t.weight.iter_mut().chain(t.bias.iter_mut());
        let os = o.weight.iter().chain(&o.bias);
        for (t, o) in ts.zip(os) {
            if tau == 1.0 {
                *t = *o;
            } else {
                *t += tau * (o - *t);
            }
        }
    }
    Ok(())
}

/// Log-density of `tanh(u)` where `u ~ N(mean, exp(log_std))`, summed over dimensions.
pub fn gaussian_tanh_logprob(mean: &[f64], log_std: &[f64], pre_tanh: &[f64]) -> f64 {
    assert!(
        mean.len() == log_std.len() && mean.len() == pre_tanh.len(),
        "gaussian_tanh_logprob: dimension mismatch"
    );
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(pre_tanh)
        .map(|((&mu, &ls), &u)| {
            let z = (u - mu) * (-ls).exp();
            let t = u.tanh();
            -0.5 * z * z - ls - half_log_two_pi - (1.0 - t * t + TANH_EPS).ln()
        })
        .sum()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.is_empty() {
        return Err(NnError::InvalidArgument("log_softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| l - lse).collect())
}
