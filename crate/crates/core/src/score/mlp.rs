//! Fully connected score network `s_theta(x, t)` with a time embedding.
//!
//! The input row is `[x, embed(t)]`; hidden layers apply the activation and
//! the final layer is affine, producing a score vector of the data dimension.
//! Weights are stored input-major: entry `(k, o)` of a layer mapping `inputs`
//! to `outputs` lives at index `k * outputs + o`, so `y = z W + b` for a row
//! vector `z`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{normal, LabRng};
use crate::score::ScoreFunction;

const SCORE_CHUNK_ROWS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            }
            Activation::Tanh => {
                let th = v.tanh();
                1.0 - th * th
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeEmbedding {
    /// Appends `t` itself.
    AppendScalar,
    /// Appends `sin(pi 2^j t), cos(pi 2^j t)` for `j = 0..frequencies`.
    Sinusoidal { frequencies: usize },
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding::Sinusoidal { frequencies: 4 }
    }
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match *self {
            TimeEmbedding::AppendScalar => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    pub fn embed(&self, t: f64, out: &mut [f64]) {
        match *self {
            TimeEmbedding::AppendScalar => out[0] = t,
            TimeEmbedding::Sinusoidal { frequencies } => {
                let mut w = std::f64::consts::PI;
                for j in 0..frequencies {
                    let (s, c) = (w * t).sin_cos();
                    out[2 * j] = s;
                    out[2 * j + 1] = c;
                    w *= 2.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Builds a layer from the conventional `outputs x inputs` matrix `W` (so `y = W z + b`).
    pub fn from_matrix(rows: &[Vec<f64>], bias: Vec<f64>) -> Result<Self> {
        let outputs = rows.len();
        let inputs = rows.first().map(|r| r.len()).unwrap_or(0);
        if bias.len() != outputs || rows.iter().any(|r| r.len() != inputs) {
            return Err(LabError::Format("inconsistent layer matrix shape".into()));
        }
        let mut l = Self::zeros(inputs, outputs);
        for (o, row) in rows.iter().enumerate() {
            for (k, &w) in row.iter().enumerate() {
                l.weights[k * outputs + o] = w;
            }
        }
        l.bias = bias;
        Ok(l)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all row-major unless strides say otherwise.
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
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents match the given shapes and strides.
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

/// Per-layer gradient; `None` for frozen layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

/// Activations retained by a forward pass for backpropagation.
pub(crate) struct ForwardCache {
    rows: usize,
    /// Layer inputs `z_l` (post-activation), one per layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpScoreNet {
    dim: usize,
    activation: Activation,
    time_embed: TimeEmbedding,
    layers: Vec<Layer>,
}

impl MlpScoreNet {
    /// Random initialisation: weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        time_embed: TimeEmbedding,
        rng: &mut LabRng,
    ) -> Result<Self> {
        let mut net = Self::zeros(dim, hidden, activation, time_embed)?;
        for layer in &mut net.layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = scale * normal(rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        time_embed: TimeEmbedding,
    ) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(LabError::InvalidParameter("layer widths must be positive".into()));
        }
        let mut widths = vec![dim + time_embed.width()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            dim,
            activation,
            time_embed,
            layers,
        })
    }

    /// Assembles a network from explicit layers, validating the shape chain.
    pub fn from_layers(
        dim: usize,
        activation: Activation,
        time_embed: TimeEmbedding,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let net = Self {
            dim,
            activation,
            time_embed,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| LabError::Format("network has no layers".into()))?;
        if first.inputs != self.dim + self.time_embed.width() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim + self.time_embed.width(),
                got: first.inputs,
            });
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(LabError::DimensionMismatch {
                    expected: w[0].outputs,
                    got: w[1].inputs,
                });
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.outputs != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                got: last.outputs,
            });
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(LabError::Format("layer buffer sizes do not match shape".into()));
            }
        }
        if !self.all_finite() {
            return Err(LabError::NonFinite("network parameter".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_embed(&self) -> TimeEmbedding {
        self.time_embed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `[inputs of layer 0, outputs of each layer...]`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    fn embed_rows(&self, xs: &[f64], times: TimeInput<'_>) -> Result<(usize, Vec<f64>)> {
        let d = self.dim;
        if !xs.len().is_multiple_of(d) {
            return Err(LabError::DimensionMismatch {
                expected: d,
                got: xs.len() % d,
            });
        }
        let n = xs.len() / d;
        let w = self.time_embed.width();
        let width = d + w;
        let mut z = vec![0.0; n * width];
        let mut shared = vec![0.0; w];
        if let TimeInput::Shared(t) = times {
            self.time_embed.embed(t, &mut shared);
        }
        for i in 0..n {
            let row = &mut z[i * width..(i + 1) * width];
            row[..d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            match times {
                TimeInput::Shared(_) => row[d..].copy_from_slice(&shared),
                TimeInput::PerRow(ts) => self.time_embed.embed(ts[i], &mut row[d..]),
            }
        }
        Ok((n, z))
    }

    pub(crate) fn forward_cached(&self, xs: &[f64], times: TimeInput<'_>) -> Result<ForwardCache> {
        let (n, mut z) = self.embed_rows(xs, times)?;
        if let TimeInput::PerRow(ts) = times {
            if ts.len() != n {
                return Err(LabError::DimensionMismatch {
                    expected: n,
                    got: ts.len(),
                });
            }
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(n * layer.outputs);
            for _ in 0..n {
                out.extend_from_slice(&layer.bias);
            }
            gemm(
                n,
                layer.inputs,
                layer.outputs,
                &z,
                layer.inputs as isize,
                1,
                &layer.weights,
                layer.outputs as isize,
                1,
                1.0,
                &mut out,
            );
            inputs.push(z);
            if l < last {
                let act: Vec<f64> = out.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(out);
                z = act;
            } else {
                z = out;
            }
        }
        Ok(ForwardCache {
            rows: n,
            inputs,
            pre,
            output: z,
        })
    }

    /// Network output for a single point.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.forward_cached(x, TimeInput::Shared(t))?.output)
    }

    /// Backpropagates `d_output` (rows x dim) through the cached pass.
    ///
    /// Layers with index `< freeze_prefix` receive no gradient and the
    /// backward sweep stops at the first trainable layer.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_output: Vec<f64>,
        freeze_prefix: usize,
    ) -> Gradients {
        let n = cache.rows;
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        let mut delta = d_output;
        for l in (freeze_prefix..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &cache.inputs[l];
            let mut gw = vec![0.0; layer.inputs * layer.outputs];
            // dW = z^T delta
            gemm(
                layer.inputs,
                n,
                layer.outputs,
                z,
                1,
                layer.inputs as isize,
                &delta,
                layer.outputs as isize,
                1,
                0.0,
                &mut gw,
            );
            let mut gb = vec![0.0; layer.outputs];
            for row in delta.chunks_exact(layer.outputs) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            grads[l] = Some(LayerGrad {
                weights: gw,
                bias: gb,
            });
            if l == freeze_prefix || l == 0 {
                break;
            }
            // dz = delta W^T, then through the activation of layer l-1.
            let mut dz = vec![0.0; n * layer.inputs];
            gemm(
                n,
                layer.outputs,
                layer.inputs,
                &delta,
                layer.outputs as isize,
                1,
                &layer.weights,
                1,
                layer.outputs as isize,
                0.0,
                &mut dz,
            );
            let pre = &cache.pre[l - 1];
            for (g, &p) in dz.iter_mut().zip(pre) {
                *g *= self.activation.derivative(p);
            }
            delta = dz;
        }
        Gradients { layers: grads }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum TimeInput<'a> {
    Shared(f64),
    PerRow(&'a [f64]),
}

impl ScoreFunction for MlpScoreNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        if xs.len() != out.len() {
            return Err(LabError::DimensionMismatch {
                expected: xs.len(),
                got: out.len(),
            });
        }
        // Chunked to bound activation memory for large particle batches.
        let chunk = SCORE_CHUNK_ROWS * self.dim;
        for (x, o) in xs.chunks(chunk).zip(out.chunks_mut(chunk)) {
            let cache = self.forward_cached(x, TimeInput::Shared(t))?;
            o.copy_from_slice(&cache.output);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpScoreNet::zeros(2, &[16, 16], Activation::Silu, TimeEmbedding::default()).unwrap();
        for (x, t) in [([1.0, -3.0], 0.1), ([0.0, 0.0], 0.9)] {
            assert_eq!(net.forward(&x, t).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let w = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]];
        let b = vec![0.1, -0.2];
        let layer = Layer::from_matrix(&w, b.clone()).unwrap();
        let net = MlpScoreNet::from_layers(2, Activation::Identity, TimeEmbedding::AppendScalar, vec![layer])
            .unwrap();
        let (x, t) = ([0.3, -0.7], 0.4);
        let z = [x[0], x[1], t];
        let out = net.forward(&x, t).unwrap();
        for o in 0..2 {
            let expect: f64 = b[o] + (0..3).map(|k| w[o][k] * z[k]).sum::<f64>();
            assert!((out[o] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = MlpScoreNet::zeros(2, &[8], Activation::Tanh, TimeEmbedding::AppendScalar).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0, 3.0], 0.5), Err(LabError::DimensionMismatch { .. })));
        let mut bad = net.clone();
        bad.layers_mut()[1] = Layer::zeros(7, 2);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batched_matches_single_row_and_repeat() {
        let net = MlpScoreNet::new(2, &[32, 32], Activation::Silu, TimeEmbedding::default(), &mut rng_from_seed(4))
            .unwrap();
        let xs = [0.1, 0.2, -1.0, 0.5, 2.0, -2.0];
        let mut batch = vec![0.0; 6];
        net.score_batch(&xs, 0.37, &mut batch).unwrap();
        for i in 0..3 {
            let single = net.forward(&xs[2 * i..2 * i + 2], 0.37).unwrap();
            for k in 0..2 {
                assert!((single[k] - batch[2 * i + k]).abs() < 1e-12);
            }
        }
        let mut again = vec![0.0; 6];
        net.score_batch(&xs, 0.37, &mut again).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn widths_and_embedding() {
        let net = MlpScoreNet::zeros(2, &[64, 64], Activation::Silu, TimeEmbedding::Sinusoidal { frequencies: 4 })
            .unwrap();
        assert_eq!(net.layer_widths(), vec![10, 64, 64, 2]);
        let mut e = vec![0.0; 8];
        TimeEmbedding::Sinusoidal { frequencies: 4 }.embed(0.0, &mut e);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
