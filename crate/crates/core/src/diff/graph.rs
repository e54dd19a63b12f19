//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Graph::backward`] walks it once in reverse and
//! accumulates gradients additively across fan-out.

use crate::diff::kernels::{self, Conv1dDims, Conv2dDims};
use crate::diff::tensor::{broadcast_indices, broadcast_shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sqrt(Var),
    Charbonnier { x: Var, eps: T, gamma: T },
    Sum(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Conv1d { input: Var, weight: Var, bias: Option<Var>, dims: Conv1dDims },
    Conv2d { input: Var, weight: Var, dims: Conv2dDims },
    Upsample2x(Var),
    Warp { image: Var, flow: Var },
    Correlation { a: Var, b: Var, max_disp: usize },
    L2NormalizeChannels { x: Var, eps: T },
    SoftmaxChannels(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::ShapeMismatch(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == shape {
            let ib = broadcast_indices(&shape, &sb);
            va.iter().zip(&ib).map(|(&x, &j)| f(x, vb[j])).collect()
        } else {
            let ia = broadcast_indices(&shape, &sa);
            let ib = broadcast_indices(&shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Elementwise `(x^2 + eps^2)^gamma`.
    pub fn charbonnier(&mut self, x: Var, eps: T, gamma: T) -> Var {
        self.unary(
            x,
            |v| charbonnier(v, eps, gamma),
            Op::Charbonnier { x, eps, gamma },
        )
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
            return shape_err(format!("axis {a} out of range for {shape:?}"));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let idx = broadcast_indices(&shape, &out_shape);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (&v, &i) in self.value(x).data().iter().zip(&idx) {
            data[i] += v;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Sum(x),
            rg,
        ))
    }

    /// Mean over `axes`, keeping them as size-1 axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let n: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, T::one() / T::from_usize_lossy(n)))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, T::one() / T::from_usize_lossy(n)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return shape_err(format!("narrow {s:?} axis {axis} [{start}, {start}+{len})"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return shape_err("concat of nothing".into()),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!("concat {first:?} with {s:?} along {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_vec(&out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Same-padded dilated 1D cross-correlation over the time axis.
    ///
    /// `input` is `[C_in, T]` or `[C_in, T, B]` where `B` indexes independent
    /// sequences sharing the kernel; `weight` is `[C_out, C_in, K]` with odd `K`.
    pub fn conv1d_dilated(&mut self, input: Var, weight: Var, dilation: usize) -> Result<Var> {
        self.conv1d(input, weight, None, dilation)
    }

    /// [`Graph::conv1d_dilated`] plus a per-output-channel bias of `C_out`
    /// elements (any shape).
    pub fn conv1d_dilated_bias(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.conv1d(input, weight, Some(bias), dilation)
    }

    fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if !(si.len() == 2 || si.len() == 3) || sw.len() != 3 || sw[1] != si[0] {
            return shape_err(format!("conv1d input {si:?} weight {sw:?}"));
        }
        if sw[2] % 2 == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d needs odd kernel and dilation >= 1 (k={}, d={dilation})",
                sw[2]
            )));
        }
        let dims = Conv1dDims {
            c_in: si[0],
            c_out: sw[0],
            len: si[1],
            batch: si.get(2).copied().unwrap_or(1),
            kernel: sw[2],
            dilation,
        };
        if let Some(b) = bias {
            if self.value(b).numel() != dims.c_out {
                return shape_err(format!("conv1d bias {:?} for {} channels", self.shape(b), dims.c_out));
            }
        }
        let mut out = kernels::conv1d_forward(self.value(input).data(), self.value(weight).data(), dims);
        if let Some(b) = bias {
            let row = dims.len * dims.batch;
            for (orow, &bv) in out.chunks_mut(row).zip(self.value(b).data()) {
                orow.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut shape = si.clone();
        shape[0] = dims.c_out;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// 2D cross-correlation with `K / 2` zero padding: `[C_in, H, W]` with
    /// weight `[C_out, C_in, K, K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return shape_err(format!("conv2d input {si:?} weight {sw:?}"));
        }
        if stride == 0 || sw[2] % 2 == 0 {
            return Err(Error::InvalidArgument("conv2d needs odd kernel and stride >= 1".into()));
        }
        let dims = Conv2dDims {
            c_in: si[0],
            c_out: sw[0],
            h: si[1],
            w: si[2],
            kernel: sw[2],
            stride,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), dims);
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            Tensor::from_vec(&[dims.c_out, dims.out_h(), dims.out_w()], out)?,
            Op::Conv2d {
                input,
                weight,
                dims,
            },
            rg,
        ))
    }

    /// Bilinear x2 upsampling of `[C, H, W]` (half-pixel centers).
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("upsample expects [C, H, W], got {s:?}"));
        }
        let out = kernels::upsample2x_forward(self.value(x).data(), s[0], s[1], s[2]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2]], out)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// Samples `image` (`[C, H, W]`) at `x + flow(x)` with `flow` `[2, H, W]`
    /// (channel 0 horizontal). Returns the warped image and an `[1, H, W]`
    /// mask that is 1 where the sample fell inside the image.
    pub fn warp_bilinear(&mut self, image: Var, flow: Var) -> Result<(Var, Tensor<T>)> {
        let (si, sf) = (self.shape(image).to_vec(), self.shape(flow).to_vec());
        if si.len() != 3 || sf != [2, si[1], si[2]] {
            return shape_err(format!("warp image {si:?} flow {sf:?}"));
        }
        let (out, mask) = kernels::warp_forward(
            self.value(image).data(),
            self.value(flow).data(),
            si[0],
            si[1],
            si[2],
        );
        let rg = self.rg(image) || self.rg(flow);
        let v = self.push(Tensor::from_vec(&si, out)?, Op::Warp { image, flow }, rg);
        Ok((v, Tensor::from_vec(&[1, si[1], si[2]], mask)?))
    }

    /// Cost volume of `(2d+1)^2` displacement channels.
    pub fn correlation(&mut self, a: Var, b: Var, max_disp: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sa != sb {
            return shape_err(format!("correlation {sa:?} vs {sb:?}"));
        }
        let out = kernels::correlation_forward(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sa[2],
            max_disp,
        );
        let side = 2 * max_disp + 1;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[side * side, sa[1], sa[2]], out)?,
            Op::Correlation { a, b, max_disp },
            rg,
        ))
    }

    /// Divides each pixel's channel vector by `sqrt(|x|^2 + eps^2)`.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("l2 normalize expects [C, H, W], got {s:?}"));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(x).data();
        let norms = channel_norms(xv, c, hw, eps);
        let mut out = xv.to_vec();
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] /= norms[p];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&s, out)?, Op::L2NormalizeChannels { x, eps }, rg))
    }

    /// Softmax across axis 0 of a `[C, ...]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return shape_err("softmax of rank-0 tensor".into());
        }
        let c = s[0];
        let inner: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..inner {
            let m = (0..c).map(|k| xv[k * inner + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (xv[k * inner + p] - m).exp();
                out[k * inner + p] = e;
                z += e;
            }
            for k in 0..c {
                out[k * inner + p] /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&s, out)?, Op::SoftmaxChannels(x), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a gradient of broadcast shape back down to `target`'s shape.
    fn reduce_to(&self, g: &Tensor<T>, target: Var) -> Tensor<T> {
        let ts = self.shape(target);
        if g.shape() == ts {
            return g.clone();
        }
        let idx = broadcast_indices(g.shape(), ts);
        let mut out = Tensor::zeros(ts);
        let od = out.data_mut();
        for (&v, &i) in g.data().iter().zip(&idx) {
            od[i] += v;
        }
        out
    }

    /// `(a_value, b_value)` broadcast to the output shape.
    fn broadcast_operands(&self, a: Var, b: Var, out_shape: &[usize]) -> (Vec<T>, Vec<T>) {
        let expand = |v: Var| -> Vec<T> {
            let t = self.value(v);
            if t.shape() == out_shape {
                t.data().to_vec()
            } else {
                broadcast_indices(out_shape, t.shape())
                    .into_iter()
                    .map(|i| t.data()[i])
                    .collect()
            }
        };
        (expand(a), expand(b))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ga, gb) = (self.reduce_to(g, *a), self.reduce_to(g, *b));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(g, *a);
                let gb = self.reduce_to(&g.map(|v| -v), *b);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = self.broadcast_operands(*a, *b, out.shape());
                if self.rg(*a) {
                    let t = Tensor::from_vec(out.shape(), gd.iter().zip(&vb).map(|(&g, &y)| g * y).collect())?;
                    let ga = self.reduce_to(&t, *a);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let t = Tensor::from_vec(out.shape(), gd.iter().zip(&va).map(|(&g, &x)| g * x).collect())?;
                    let gb = self.reduce_to(&t, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = self.broadcast_operands(*a, *b, out.shape());
                if self.rg(*a) {
                    let t = Tensor::from_vec(out.shape(), gd.iter().zip(&vb).map(|(&g, &y)| g / y).collect())?;
                    let ga = self.reduce_to(&t, *a);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let t = Tensor::from_vec(
                        out.shape(),
                        gd.iter()
                            .zip(va.iter().zip(&vb))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect(),
                    )?;
                    let gb = self.reduce_to(&t, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let d = zip_map(gd, out.data(), |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Relu(x) => {
                let d = zip_map(gd, self.value(*x).data(), |g, v| if v > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let d = zip_map(gd, self.value(*x).data(), |g, v| if v > T::zero() { g } else { g * s });
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                let d = zip_map(gd, out.data(), |g, y| g * half / y);
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Charbonnier { x, eps, gamma } => {
                let (e, gm) = (*eps, *gamma);
                let d = zip_map(gd, self.value(*x).data(), |g, v| {
                    g * charbonnier_grad(v, e, gm)
                });
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Sum(x) => {
                let xs = self.shape(*x).to_vec();
                let idx = broadcast_indices(&xs, out.shape());
                let d = idx.iter().map(|&j| gd[j]).collect();
                self.accumulate(grads, *x, Tensor::from_vec(&xs, d)?);
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&xs)?);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let os = out.shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = os[*axis];
                let mut d = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&xs, d)?);
            }
            Op::Concat { inputs, axis } => {
                let os = out.shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[axis + 1..].iter().product();
                let total = os[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let vs = self.shape(v).to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + start..o * total + start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&vs, d)?);
                    }
                    start += chunk;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    // dA = dC B^T
                    let bt = transpose(self.value(*b).data(), k, n);
                    let d = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, d)?);
                }
                if self.rg(*b) {
                    // dB = A^T dC
                    let at = transpose(self.value(*a).data(), m, k);
                    let d = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_vec(&sb, d)?);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            } => {
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    let row = dims.len * dims.batch;
                    let ones = vec![T::one(); row];
                    let d = gd.chunks(row).map(|r| kernels::dot(r, &ones)).collect();
                    let s = self.shape(b).to_vec();
                    self.accumulate(grads, b, Tensor::from_vec(&s, d)?);
                }
                if self.rg(*input) {
                    let d = kernels::conv1d_backward_input(gd, self.value(*weight).data(), *dims);
                    let s = self.shape(*input).to_vec();
                    self.accumulate(grads, *input, Tensor::from_vec(&s, d)?);
                }
                if self.rg(*weight) {
                    let d = kernels::conv1d_backward_weight(gd, self.value(*input).data(), *dims);
                    let s = self.shape(*weight).to_vec();
                    self.accumulate(grads, *weight, Tensor::from_vec(&s, d)?);
                }
            }
            Op::Conv2d {
                input,
                weight,
                dims,
            } => {
                if self.rg(*input) {
                    let d = kernels::conv2d_backward_input(gd, self.value(*weight).data(), *dims);
                    let s = self.shape(*input).to_vec();
                    self.accumulate(grads, *input, Tensor::from_vec(&s, d)?);
                }
                if self.rg(*weight) {
                    let d = kernels::conv2d_backward_weight(gd, self.value(*input).data(), *dims);
                    let s = self.shape(*weight).to_vec();
                    self.accumulate(grads, *weight, Tensor::from_vec(&s, d)?);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let d = kernels::upsample2x_backward(gd, s[0], s[1], s[2]);
                self.accumulate(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::Warp { image, flow } => {
                let s = self.shape(*image).to_vec();
                let (gi, gf) = kernels::warp_backward(
                    gd,
                    self.value(*image).data(),
                    self.value(*flow).data(),
                    s[0],
                    s[1],
                    s[2],
                );
                self.accumulate(grads, *image, Tensor::from_vec(&s, gi)?);
                self.accumulate(grads, *flow, Tensor::from_vec(&[2, s[1], s[2]], gf)?);
            }
            Op::Correlation { a, b, max_disp } => {
                let s = self.shape(*a).to_vec();
                let (ga, gb) = kernels::correlation_backward(
                    gd,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    s[0],
                    s[1],
                    s[2],
                    *max_disp,
                );
                self.accumulate(grads, *a, Tensor::from_vec(&s, ga)?);
                self.accumulate(grads, *b, Tensor::from_vec(&s, gb)?);
            }
            Op::L2NormalizeChannels { x, eps } => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let xv = self.value(*x).data();
                let norms = channel_norms(xv, c, hw, *eps);
                let mut d = vec![T::zero(); xv.len()];
                for p in 0..hw {
                    let n = norms[p];
                    let dot: T = (0..c).map(|ch| gd[ch * hw + p] * xv[ch * hw + p]).sum();
                    let n3 = n * n * n;
                    for ch in 0..c {
                        d[ch * hw + p] = gd[ch * hw + p] / n - xv[ch * hw + p] * dot / n3;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::SoftmaxChannels(x) => {
                let s = out.shape();
                let c = s[0];
                let inner: usize = s[1..].iter().product();
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for p in 0..inner {
                    let dot: T = (0..c).map(|k| gd[k * inner + p] * y[k * inner + p]).sum();
                    for k in 0..c {
                        d[k * inner + p] = y[k * inner + p] * (gd[k * inner + p] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, d)?);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `(x^2 + eps^2)^gamma`.
#[inline]
pub fn charbonnier<T: Scalar>(x: T, eps: T, gamma: T) -> T {
    (x * x + eps * eps).powf(gamma)
}

#[inline]
pub fn charbonnier_grad<T: Scalar>(x: T, eps: T, gamma: T) -> T {
    let two = T::lit(2.0);
    two * gamma * x * (x * x + eps * eps).powf(gamma - T::one())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn channel_norms<T: Scalar>(x: &[T], c: usize, hw: usize, eps: T) -> Vec<T> {
    let mut sq = vec![eps * eps; hw];
    for ch in 0..c {
        for p in 0..hw {
            let v = x[ch * hw + p];
            sq[p] += v * v;
        }
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.variable(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert_eq!(g.grad(y).unwrap().item(), 3.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.5));
        let z = g.add(x, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let z = g.mul(x, c).unwrap();
        g.backward(z).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn sigmoid_fixed_point() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.variable(t(&[2, 1], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 6]);
        let bad = g_shape(&mut g, &[3, 2]);
        assert!(g.add(a, bad).is_err());
    }

    fn g_shape(g: &mut Graph<f64>, shape: &[usize]) -> Var {
        g.constant(Tensor::zeros(shape))
    }

    #[test]
    fn conv1d_identity_and_dilation_geometry() {
        let mut g = Graph::new();
        let input = g.constant(t(&[1, 9], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let ident = g.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let out = g.conv1d_dilated(input, ident, 2).unwrap();
        assert_eq!(g.value(out), g.value(input));

        let mut imp = vec![0.0; 13];
        imp[6] = 1.0;
        let impulse = g.constant(t(&[1, 13], &imp));
        let w = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let out = g.conv1d_dilated(impulse, w, 4).unwrap();
        let nz: Vec<usize> = (0..13).filter(|&i| g.value(out).data()[i] != 0.0).collect();
        assert_eq!(nz, vec![2, 6, 10]);
        let even = g_shape(&mut g, &[1, 1, 2]);
        assert!(g.conv1d_dilated(impulse, even, 1).is_err());
    }

    #[test]
    fn conv2d_identity_and_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 6, 8], |i| i as f64));
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // out0 <- in0 center
        w.data_mut()[18 + 9 + 4] = 1.0; // out1 <- in1 center
        let w = g.constant(w);
        let y = g.conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y2 = g.conv2d(x, w, 2).unwrap();
        assert_eq!(g.shape(y2), &[2, 3, 4]);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut g = Graph::new();
        let img = g.variable(Tensor::from_fn(&[1, 4, 5], |i| (i * i) as f64));
        let flow = g.variable(Tensor::zeros(&[2, 4, 5]));
        let (w, mask) = g.warp_bilinear(img, flow).unwrap();
        assert_eq!(g.value(w), g.value(img));
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn warp_shifts_ramp() {
        let mut g = Graph::new();
        // horizontal ramp 0.5 * x
        let img = g.constant(Tensor::from_fn(&[1, 3, 6], |i| 0.5 * (i % 6) as f64));
        let mut f = Tensor::zeros(&[2, 3, 6]);
        f.data_mut()[..18].iter_mut().for_each(|v| *v = 1.0);
        let flow = g.constant(f);
        let (w, mask) = g.warp_bilinear(img, flow).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(g.value(w).data()[y * 6 + x], 0.5 * (x + 1) as f64);
                assert_eq!(mask.data()[y * 6 + x], 1.0);
            }
            // last column samples outside and is clamped
            assert_eq!(mask.data()[y * 6 + 5], 0.0);
            assert_eq!(g.value(w).data()[y * 6 + 5], 2.5);
        }
    }

    #[test]
    fn constant_image_has_zero_flow_gradient() {
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(&[1, 4, 4], 0.7));
        let flow = g.variable(Tensor::zeros(&[2, 4, 4]));
        let (w, _) = g.warp_bilinear(img, flow).unwrap();
        let s = g.sum_all(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(flow).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn charbonnier_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let y = g.charbonnier(x, 1e-3, 0.45);
        assert!((g.value(y).item() - (1e-3f64).powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 2, 2]));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 3], 1.25));
        let y = g.upsample_bilinear2x(x).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn concat_and_matmul_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[1, 3]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[3, 3]);
        assert!(g.concat(&[a, b], 1).is_err());
        let m = g.constant(Tensor::zeros(&[3, 5]));
        let p = g.matmul(c, m).unwrap();
        assert_eq!(g.shape(p), &[3, 5]);
        assert!(g.matmul(m, c).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
