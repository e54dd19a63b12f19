//! Unsupervised objective: flow-conditioned fusion weights, a bidirectional
//! Charbonnier photometric term on reconstructed intensity, and first-order
//! smoothness.
//!
//! Reconstructed intensities are constants of the graph. Gradients reach the
//! weight head through the fused intensity and the flow through the warps.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::diff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::intensity::{EstimatorTerms, NUM_TERMS};
use crate::nn::{Conv2d, Init};
use crate::scalar::Scalar;

/// Which estimator terms the fused intensity may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Full,
    WindowsOnly,
    /// Interval terms where valid; pixels without a valid interval fall back
    /// to the short window.
    IntervalsOnly,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::WindowsOnly => "windows",
            FusionMode::IntervalsOnly => "intervals",
        }
    }

    fn allowed(self) -> [bool; NUM_TERMS] {
        match self {
            FusionMode::Full => [true; NUM_TERMS],
            FusionMode::WindowsOnly => [true, true, false, false],
            FusionMode::IntervalsOnly => [false, false, true, true],
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FusionMode::Full),
            "windows" => Ok(FusionMode::WindowsOnly),
            "intervals" => Ok(FusionMode::IntervalsOnly),
            _ => Err(Error::InvalidArgument(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub eps: f64,
    pub gamma: f64,
    pub fusion: FusionMode,
    /// The head reads the flow as a constant, and its objective has the
    /// zero-flow photometric loss subtracted, so it prefers terms whose
    /// brightness change the flow explains rather than terms that are simply
    /// flat. The flow is then trained only through warping and smoothness.
    pub static_baseline: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eps: 1e-3,
            gamma: 0.45,
            fusion: FusionMode::Full,
            static_baseline: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps > 0.0 && self.gamma > 0.0) {
            return Err(Error::InvalidArgument("charbonnier eps and gamma must be > 0".into()));
        }
        Ok(())
    }

    pub fn rho(&self, x: f64) -> f64 {
        crate::diff::charbonnier(x, self.eps, self.gamma)
    }
}

/// `[u, v, |f|]` -> conv 3x3 -> 8 -> conv 3x3 -> 4 -> softmax over terms.
#[derive(Debug, Clone)]
pub struct WeightHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub const WEIGHT_HEAD_HIDDEN: usize = 8;

impl WeightHead {
    pub const PREFIX: &'static str = "weights.";

    /// Registers `weights.*`; the output layer starts at zero so the initial
    /// weights are uniform.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, "weights.conv1", 3, WEIGHT_HEAD_HIDDEN, 3, 1, Init::Kaiming, rng)?,
            conv2: Conv2d::new(store, "weights.conv2", WEIGHT_HEAD_HIDDEN, NUM_TERMS, 3, 1, Init::Zero, rng)?,
        })
    }

    pub fn param_count() -> usize {
        Conv2d::num_params(3, WEIGHT_HEAD_HIDDEN, 3) + Conv2d::num_params(WEIGHT_HEAD_HIDDEN, NUM_TERMS, 3)
    }

    /// Per-pixel fusion weights `[4, H, W]` from a `[2, H, W]` flow.
    pub fn fusion_weights<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, flow: Var) -> Result<Var> {
        let s = g.shape(flow).to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::ShapeMismatch(format!("flow must be [2, H, W], got {s:?}")));
        }
        let sq = g.mul(flow, flow)?;
        let sq = g.sum_axes(sq, &[0])?;
        let sq = g.add_scalar(sq, T::lit(1e-6));
        let mag = g.sqrt(sq);
        let x = g.concat(&[flow, mag], 0)?;
        let x = self.conv1.forward_leaky(g, p, x)?;
        let logits = self.conv2.forward(g, p, x)?;
        g.softmax_channels(logits)
    }
}

/// Estimator values and validity as graph constants, `[4, H, W]` each, with
/// the fusion mode already applied to the mask.
pub fn terms_to_tensors<T: Scalar>(terms: &EstimatorTerms<T>, mode: FusionMode) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (terms.terms[0].height(), terms.terms[0].width());
    let hw = h * w;
    let allowed = mode.allowed();
    let mut mask = terms.stacked_mask();
    for p in 0..hw {
        for (k, &ok) in allowed.iter().enumerate() {
            if !ok {
                mask[k * hw + p] = T::zero();
            }
        }
        if (0..NUM_TERMS).all(|k| mask[k * hw + p] == T::zero()) {
            mask[p] = T::one();
        }
    }
    Ok((
        Tensor::from_vec(&[NUM_TERMS, h, w], terms.stacked_values())?,
        Tensor::from_vec(&[NUM_TERMS, h, w], mask)?,
    ))
}

/// `sum_k w_k m_k I_k / sum_k w_k m_k`, shape `[1, H, W]`.
pub fn fuse_intensity<T: Scalar>(g: &mut Graph<T>, weights: Var, values: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
    let vals = g.constant(values.clone());
    let m = g.constant(mask.clone());
    let wm = g.mul(weights, m)?;
    let num = g.mul(wm, vals)?;
    let num = g.sum_axes(num, &[0])?;
    let den = g.sum_axes(wm, &[0])?;
    g.div(num, den)
}

fn masked_mean<T: Scalar>(g: &mut Graph<T>, x: Var, mask: Tensor<T>) -> Result<Var> {
    let count = mask.sum().max(T::one());
    let m = g.constant(mask);
    let xm = g.mul(x, m)?;
    let s = g.sum_all(xm)?;
    Ok(g.scale(s, T::one() / count))
}

/// Bidirectional photometric loss between `[1, H, W]` intensities. Each
/// direction is averaged over pixels whose warp target lies inside the image.
pub fn photometric_loss<T: Scalar>(
    g: &mut Graph<T>,
    flow: Var,
    flow_back: Var,
    i0: Var,
    i1: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let (eps, gamma) = (T::lit(cfg.eps), T::lit(cfg.gamma));
    let (w1, m1) = g.warp_bilinear(i1, flow)?;
    let d = g.sub(i0, w1)?;
    let r = g.charbonnier(d, eps, gamma);
    let fwd = masked_mean(g, r, m1)?;
    let (w0, m0) = g.warp_bilinear(i0, flow_back)?;
    let d = g.sub(w0, i1)?;
    let r = g.charbonnier(d, eps, gamma);
    let bwd = masked_mean(g, r, m0)?;
    g.add(fwd, bwd)
}

/// Mean Charbonnier penalty of horizontal plus vertical first differences of
/// both flow components.
pub fn smoothness_loss<T: Scalar>(g: &mut Graph<T>, flow: Var, cfg: &LossConfig) -> Result<Var> {
    let s = g.shape(flow).to_vec();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(Error::ShapeMismatch(format!("smoothness needs [C, H>=2, W>=2], got {s:?}")));
    }
    let (eps, gamma) = (T::lit(cfg.eps), T::lit(cfg.gamma));
    let mut total = None;
    for axis in [2, 1] {
        let n = s[axis] - 1;
        let hi = g.narrow(flow, axis, 1, n)?;
        let lo = g.narrow(flow, axis, 0, n)?;
        let d = g.sub(hi, lo)?;
        let r = g.charbonnier(d, eps, gamma);
        let m = g.mean_all(r)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("two axes"))
}

/// Graph handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// What training differentiates; equals `total` without a static
    /// baseline.
    pub objective: Var,
    pub photometric: Var,
    pub smoothness: Var,
    /// `[4, H, W]` weights used at `t0` and `t1`.
    pub weights0: Var,
    pub weights1: Var,
}

/// Fuses both intensities with flow-conditioned weights, then returns
/// `photometric + lambda * (smooth(f) + smooth(f'))`. The weights at `t0`
/// come from `f`, those at `t1` from `f'`; with a static baseline the head
/// sees both as constants.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    head: &WeightHead,
    flow: Var,
    flow_back: Var,
    terms0: &(Tensor<T>, Tensor<T>),
    terms1: &(Tensor<T>, Tensor<T>),
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if !cfg.static_baseline {
        let weights0 = head.fusion_weights(g, p, flow)?;
        let weights1 = head.fusion_weights(g, p, flow_back)?;
        return losses(g, weights0, weights1, false, flow, flow_back, terms0, terms1, cfg);
    }
    let f = g.constant(g.value(flow).clone());
    let fb = g.constant(g.value(flow_back).clone());
    let weights0 = head.fusion_weights(g, p, f)?;
    let weights1 = head.fusion_weights(g, p, fb)?;
    losses(g, weights0, weights1, true, flow, flow_back, terms0, terms1, cfg)
}

/// Photometric loss of the fused pair without any warping.
fn static_photometric<T: Scalar>(
    g: &mut Graph<T>,
    weights0: Var,
    weights1: Var,
    terms0: &(Tensor<T>, Tensor<T>),
    terms1: &(Tensor<T>, Tensor<T>),
    cfg: &LossConfig,
) -> Result<Var> {
    let i0 = fuse_intensity(g, weights0, &terms0.0, &terms0.1)?;
    let i1 = fuse_intensity(g, weights1, &terms1.0, &terms1.1)?;
    let zero = g.constant(Tensor::zeros(&[2, g.shape(i0)[1], g.shape(i0)[2]]));
    photometric_loss(g, zero, zero, i0, i1, cfg)
}

/// [`total_loss`] with externally supplied `[4, H, W]` weights; the
/// objective equals the total.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    weights0: Var,
    weights1: Var,
    flow: Var,
    flow_back: Var,
    terms0: &(Tensor<T>, Tensor<T>),
    terms1: &(Tensor<T>, Tensor<T>),
    cfg: &LossConfig,
) -> Result<LossTerms> {
    losses(g, weights0, weights1, false, flow, flow_back, terms0, terms1, cfg)
}

#[allow(clippy::too_many_arguments)]
fn losses<T: Scalar>(
    g: &mut Graph<T>,
    weights0: Var,
    weights1: Var,
    baseline: bool,
    flow: Var,
    flow_back: Var,
    terms0: &(Tensor<T>, Tensor<T>),
    terms1: &(Tensor<T>, Tensor<T>),
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let i0 = fuse_intensity(g, weights0, &terms0.0, &terms0.1)?;
    let i1 = fuse_intensity(g, weights1, &terms1.0, &terms1.1)?;
    let photometric = photometric_loss(g, flow, flow_back, i0, i1, cfg)?;
    let s0 = smoothness_loss(g, flow, cfg)?;
    let s1 = smoothness_loss(g, flow_back, cfg)?;
    let smoothness = g.add(s0, s1)?;
    let reg = g.scale(smoothness, T::lit(cfg.lambda));
    let total = g.add(photometric, reg)?;
    let objective = if baseline {
        let still = static_photometric(g, weights0, weights1, terms0, terms1, cfg)?;
        g.sub(total, still)?
    } else {
        total
    };
    Ok(LossTerms {
        total,
        objective,
        photometric,
        smoothness,
        weights0,
        weights1,
    })
}
