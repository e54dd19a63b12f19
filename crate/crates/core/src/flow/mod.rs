//! Two-level coarse-to-fine flow network.
//!
//! Both representations go through a shared stride-2 encoder. At quarter
//! resolution a cosine cost volume feeds the coarse head; the coarse flow is
//! upsampled, used to warp the half-resolution features of the second frame,
//! and corrected by a residual refinement stack. Flow is in full-resolution
//! pixels at every level.

mod field;

pub use field::FlowField;

use rand_chacha::ChaCha8Rng;

use crate::diff::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::scalar::Scalar;

pub const MAX_FLOW_PARAMS: usize = 700_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Encoder widths at half and quarter resolution.
    pub channels: (usize, usize),
    pub max_displacement: usize,
    pub coarse_hidden: usize,
    /// Hidden widths of the refinement stack; a final 2-channel layer follows.
    pub refine_hidden: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 32,
            channels: (16, 32),
            max_displacement: 3,
            coarse_hidden: 32,
            refine_hidden: (32, 16),
        }
    }
}

impl BackboneConfig {
    pub fn cost_channels(&self) -> usize {
        (2 * self.max_displacement + 1).pow(2)
    }

    pub fn param_count(&self) -> usize {
        let (c1, c2) = self.channels;
        let (r1, r2) = self.refine_hidden;
        Conv2d::num_params(self.in_channels, c1, 3)
            + Conv2d::num_params(c1, c2, 3)
            + Conv2d::num_params(self.cost_channels() + c2, self.coarse_hidden, 3)
            + Conv2d::num_params(self.coarse_hidden, 2, 3)
            + Conv2d::num_params(2 * c1 + 2, r1, 3)
            + Conv2d::num_params(r1, r2, 3)
            + Conv2d::num_params(r2, 2, 3)
    }
}

/// Encoder outputs at half (`l1`) and quarter (`l2`) resolution.
#[derive(Debug, Clone, Copy)]
pub struct Pyramid {
    pub l1: Var,
    pub l2: Var,
}

#[derive(Debug, Clone)]
pub struct FlowNet {
    config: BackboneConfig,
    enc1: Conv2d,
    enc2: Conv2d,
    coarse1: Conv2d,
    coarse2: Conv2d,
    refine1: Conv2d,
    refine2: Conv2d,
    refine3: Conv2d,
}

impl FlowNet {
    /// Registers parameters under `flow.*`. The last layer of both heads
    /// starts at zero, so an untrained network outputs zero flow.
    pub fn new<T: Scalar>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.param_count() > MAX_FLOW_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "flow network has {} parameters, limit {MAX_FLOW_PARAMS}",
                config.param_count()
            )));
        }
        let (c1, c2) = config.channels;
        let (r1, r2) = config.refine_hidden;
        let k = Init::Kaiming;
        let net = Self {
            enc1: Conv2d::new(store, "flow.enc1", config.in_channels, c1, 3, 2, k, rng)?,
            enc2: Conv2d::new(store, "flow.enc2", c1, c2, 3, 2, k, rng)?,
            coarse1: Conv2d::new(store, "flow.coarse1", config.cost_channels() + c2, config.coarse_hidden, 3, 1, k, rng)?,
            coarse2: Conv2d::new(store, "flow.coarse2", config.coarse_hidden, 2, 3, 1, Init::Zero, rng)?,
            refine1: Conv2d::new(store, "flow.refine1", 2 * c1 + 2, r1, 3, 1, k, rng)?,
            refine2: Conv2d::new(store, "flow.refine2", r1, r2, 3, 1, k, rng)?,
            refine3: Conv2d::new(store, "flow.refine3", r2, 2, 3, 1, Init::Zero, rng)?,
            config,
        };
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rep: Var) -> Result<Pyramid> {
        let s = g.shape(rep).to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "flow input must be [{}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::ShapeMismatch(format!("flow input {}x{} must be divisible by 4", s[1], s[2])));
        }
        let l1 = self.enc1.forward_leaky(g, p, rep)?;
        let l2 = self.enc2.forward_leaky(g, p, l1)?;
        Ok(Pyramid { l1, l2 })
    }

    /// Flow `[2, H, W]` from the frame encoded as `a` to the one encoded as `b`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, a: &Pyramid, b: &Pyramid) -> Result<Var> {
        if g.shape(a.l2) != g.shape(b.l2) {
            return Err(Error::ShapeMismatch("flow inputs differ in shape".into()));
        }
        let eps = T::lit(1e-6);
        let na = g.l2_normalize_channels(a.l2, eps)?;
        let nb = g.l2_normalize_channels(b.l2, eps)?;
        let cost = g.correlation(na, nb, self.config.max_displacement)?;
        let x = g.concat(&[cost, a.l2], 0)?;
        let x = self.coarse1.forward_leaky(g, p, x)?;
        let coarse = self.coarse2.forward(g, p, x)?;

        let up = g.upsample_bilinear2x(coarse)?;
        // features at half resolution move by half the full-resolution flow
        let half = g.scale(up, T::lit(0.5));
        let (warped, _) = g.warp_bilinear(b.l1, half)?;
        let x = g.concat(&[a.l1, warped, up], 0)?;
        let x = self.refine1.forward_leaky(g, p, x)?;
        let x = self.refine2.forward_leaky(g, p, x)?;
        let residual = self.refine3.forward(g, p, x)?;
        let fine = g.add(up, residual)?;
        g.upsample_bilinear2x(fine)
    }

    pub fn estimate_flow<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rep0: Var, rep1: Var) -> Result<Var> {
        if g.shape(rep0) != g.shape(rep1) {
            return Err(Error::ShapeMismatch(format!(
                "representations differ: {:?} vs {:?}",
                g.shape(rep0),
                g.shape(rep1)
            )));
        }
        let a = self.encode(g, p, rep0)?;
        let b = self.encode(g, p, rep1)?;
        self.decode(g, p, &a, &b)
    }

    /// `(f, f')`: flow from the first to the second representation and back,
    /// sharing the encoder pass.
    pub fn estimate_bidirectional<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rep0: Var, rep1: Var) -> Result<(Var, Var)> {
        if g.shape(rep0) != g.shape(rep1) {
            return Err(Error::ShapeMismatch("representations differ in shape".into()));
        }
        let a = self.encode(g, p, rep0)?;
        let b = self.encode(g, p, rep1)?;
        let f = self.decode(g, p, &a, &b)?;
        let fr = self.decode(g, p, &b, &a)?;
        Ok((f, fr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::rng;
    use rand::Rng;

    fn net() -> (FlowNet, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let n = FlowNet::new(BackboneConfig::default(), &mut store, &mut rng::stream(1, "init")).unwrap();
        (n, store)
    }

    fn random_rep(seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "rep");
        Tensor::from_fn(&[32, 8, 12], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn param_count_matches_store() {
        let (_, store) = net();
        assert_eq!(store.num_scalars(), BackboneConfig::default().param_count());
        assert!(store.num_scalars() <= MAX_FLOW_PARAMS);
    }

    #[test]
    fn fresh_network_outputs_zero_flow() {
        let (n, store) = net();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.constant(random_rep(1));
        let b = g.constant(random_rep(2));
        let f = n.estimate_flow(&mut g, &p, a, b).unwrap();
        assert_eq!(g.shape(f), &[2, 8, 12]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    fn perturb(store: &mut ParamStore<f64>) {
        let mut r = rng::stream(9, "perturb");
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
    }

    #[test]
    fn swapping_inputs_swaps_outputs() {
        let (n, mut store) = net();
        perturb(&mut store);
        let run = |x: Tensor<f64>, y: Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let (a, b) = (g.constant(x), g.constant(y));
            let (f, fr) = n.estimate_bidirectional(&mut g, &p, a, b).unwrap();
            (g.value(f).clone(), g.value(fr).clone())
        };
        let (f, fr) = run(random_rep(1), random_rep(2));
        let (g_, gr) = run(random_rep(2), random_rep(1));
        assert_eq!(f, gr);
        assert_eq!(fr, g_);
        assert!(f.norm() > 0.0);
    }

    #[test]
    fn bidirectional_matches_single_direction() {
        let (n, mut store) = net();
        perturb(&mut store);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let a = g.constant(random_rep(4));
        let b = g.constant(random_rep(5));
        let (f, _) = n.estimate_bidirectional(&mut g, &p, a, b).unwrap();
        let single = n.estimate_flow(&mut g, &p, a, b).unwrap();
        assert_eq!(g.value(f), g.value(single));
    }

    #[test]
    fn shape_errors() {
        let (n, store) = net();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.constant(Tensor::zeros(&[32, 8, 8]));
        let b = g.constant(Tensor::zeros(&[32, 8, 12]));
        assert!(n.estimate_flow(&mut g, &p, a, b).is_err());
        let odd = g.constant(Tensor::zeros(&[32, 6, 6]));
        assert!(n.estimate_flow(&mut g, &p, odd, odd).is_err());
    }
}
