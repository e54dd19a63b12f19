//! Temporal multi-dilated representation with layer attention.
//!
//! A spike window is a `1 x L` sequence per pixel. A stack of dilated 1D
//! convolutions, shared by every pixel, turns it into `n` layer outputs of
//! `C x L`. Layer attention gates each layer with a scalar computed from its
//! global average, and the gated layers are concatenated and averaged over
//! time into an `(n C) x H x W` feature map.

use rand_chacha::ChaCha8Rng;

use crate::diff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, xavier_uniform, LEAK};
use crate::scalar::Scalar;
use crate::spike_stream::StreamWindow;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TmrConfig {
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub channels: usize,
    /// Window half length; `L = 2 * half + 1`.
    pub window_half: usize,
}

impl Default for TmrConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 8],
            kernel: 3,
            channels: 8,
            window_half: 20,
        }
    }
}

impl TmrConfig {
    pub fn layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn window_len(&self) -> usize {
        2 * self.window_half + 1
    }

    pub fn out_channels(&self) -> usize {
        self.layers() * self.channels
    }

    /// `1 + (k - 1) * sum(d)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    /// Closed form: conv weights and biases plus the `n -> n -> n` MLP.
    pub fn param_count(&self) -> usize {
        let (c, k, n) = (self.channels, self.kernel, self.layers());
        let convs: usize = (0..n).map(|i| c * if i == 0 { 1 } else { c } * k + c).sum();
        convs + 2 * (n * n + n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.windows(2).any(|w| w[0] >= w[1]) || self.dilations[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        if self.kernel % 2 == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("kernel must be odd and channels >= 1".into()));
        }
        Ok(())
    }

    /// True when a window is shorter than the receptive field; zero padding
    /// still makes the forward pass well defined.
    pub fn window_shorter_than_receptive_field(&self) -> bool {
        self.window_len() < self.receptive_field()
    }
}

#[derive(Debug, Clone, Copy)]
struct DilatedLayer {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Graph handles for one representation pass.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationOut {
    /// `[n C, H, W]`.
    pub features: Var,
    /// `[1, n]`, each entry in `(0, 1)`.
    pub attention: Var,
}

#[derive(Debug, Clone)]
pub struct Representation {
    config: TmrConfig,
    layers: Vec<DilatedLayer>,
    mlp: Mlp,
}

impl Representation {
    /// Registers parameters under `tmr.*` and `attention.*`.
    pub fn new<T: Scalar>(config: TmrConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, k, n) = (config.channels, config.kernel, config.layers());
        let mut layers = Vec::with_capacity(n);
        for (i, &dilation) in config.dilations.iter().enumerate() {
            let c_in = if i == 0 { 1 } else { c };
            let w = kaiming_uniform(&[c, c_in, k], c_in * k, rng);
            layers.push(DilatedLayer {
                weight: store.add(format!("tmr.layer{}.weight", i + 1), w)?,
                bias: store.add(format!("tmr.layer{}.bias", i + 1), Tensor::zeros(&[c, 1, 1]))?,
                dilation,
            });
        }
        let mlp = Mlp {
            w1: store.add("attention.fc1.weight", kaiming_uniform(&[n, n], n, rng))?,
            b1: store.add("attention.fc1.bias", Tensor::zeros(&[1, n]))?,
            w2: store.add("attention.fc2.weight", xavier_uniform(&[n, n], n, n, rng))?,
            b2: store.add("attention.fc2.bias", Tensor::zeros(&[1, n]))?,
        };
        Ok(Self { config, layers, mlp })
    }

    pub fn config(&self) -> &TmrConfig {
        &self.config
    }

    /// Dilated stack over a `[1, L, P]` input. Returns one `[C, L, P]` output
    /// per layer.
    pub fn tmr_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Vec<Var>> {
        let s = g.shape(input);
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::ShapeMismatch(format!("tmr input must be [1, L, P], got {s:?}")));
        }
        let mut x = input;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = g.conv1d_dilated_bias(x, p[layer.weight], p[layer.bias], layer.dilation)?;
            x = g.leaky_relu(y, T::lit(LEAK));
            outs.push(x);
        }
        Ok(outs)
    }

    /// Gates, concatenates and time-averages the layer outputs.
    pub fn layer_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        layer_outputs: &[Var],
        height: usize,
        width: usize,
    ) -> Result<RepresentationOut> {
        let n = layer_outputs.len();
        if n != self.layers.len() {
            return Err(Error::ShapeMismatch(format!("expected {} layers, got {n}", self.layers.len())));
        }
        let shape = g.shape(layer_outputs[0]).to_vec();
        if layer_outputs.iter().any(|&v| g.shape(v) != shape.as_slice()) || shape[2] != height * width {
            return Err(Error::ShapeMismatch("layer outputs differ in shape".into()));
        }
        let c = shape[0];
        // Averaging over time commutes with the per-layer scalar gate, so the
        // collapse happens first and the gate multiplies the smaller tensor.
        let means = layer_outputs
            .iter()
            .map(|&v| g.mean_axes(v, &[1]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&means, 0)?;
        let stacked = g.reshape(stacked, &[n, c * height * width])?;
        let desc = g.mean_axes(stacked, &[1])?;
        let desc = g.reshape(desc, &[1, n])?;

        let h = g.matmul(desc, p[self.mlp.w1])?;
        let h = g.add(h, p[self.mlp.b1])?;
        let h = g.relu(h);
        let z = g.matmul(h, p[self.mlp.w2])?;
        let z = g.add(z, p[self.mlp.b2])?;
        let attention = g.sigmoid(z);

        let gate = g.reshape(attention, &[n, 1])?;
        let gated = g.mul(stacked, gate)?;
        let features = g.reshape(gated, &[n * c, height, width])?;
        Ok(RepresentationOut { features, attention })
    }

    /// Densifies `window` and runs the full representation.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, window: &StreamWindow<'_>) -> Result<RepresentationOut> {
        if window.half_length() != self.config.window_half {
            return Err(Error::ShapeMismatch(format!(
                "window half length {} != configured {}",
                window.half_length(),
                self.config.window_half
            )));
        }
        let s = window.parent();
        let dense = Tensor::from_vec(&[1, window.len(), s.num_pixels()], window.to_dense::<T>())?;
        let input = g.constant(dense);
        let layers = self.tmr_forward(g, p, input)?;
        self.layer_attention(g, p, &layers, s.height(), s.width())
    }
}
