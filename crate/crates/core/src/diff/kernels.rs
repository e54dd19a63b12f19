//! Raw forward and backward kernels on flat slices. Shapes are validated by the
//! graph before these are called.
//!
//! Kernels that parallelize split work over disjoint output channels, so each
//! output element is reduced in a fixed order regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    /// Independent sequences per channel, innermost axis.
    pub batch: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1dDims {
    /// Valid output time range for tap `j` and the input offset it reads.
    #[inline]
    fn tap(&self, j: usize) -> (usize, usize, isize) {
        let off = self.dilation as isize * (j as isize - (self.kernel as isize - 1) / 2);
        let lo = (-off).max(0) as usize;
        let hi = (self.len as isize - off.max(0)).max(0) as usize;
        (lo.min(hi), hi, off)
    }
}

/// Dot product with eight fixed partial sums so the loop vectorizes while the
/// summation order stays independent of the hardware.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Frames per cache tile of the 1D kernels.
#[inline]
fn time_tile(batch: usize) -> usize {
    (2048 / batch.max(1)).max(1)
}

pub fn conv1d_forward<T: Scalar>(input: &[T], weight: &[T], d: Conv1dDims) -> Vec<T> {
    let (tp, b) = (d.len * d.batch, d.batch);
    let tile = time_tile(b);
    let mut out = vec![T::zero(); d.c_out * tp];
    out.par_chunks_mut(tp).enumerate().for_each(|(co, orow)| {
        for t0 in (0..d.len).step_by(tile) {
            let t1 = (t0 + tile).min(d.len);
            for ci in 0..d.c_in {
                let irow = &input[ci * tp..(ci + 1) * tp];
                for j in 0..d.kernel {
                    let w = weight[(co * d.c_in + ci) * d.kernel + j];
                    let (lo, hi, off) = d.tap(j);
                    let (lo, hi) = (lo.max(t0), hi.min(t1));
                    if w == T::zero() || lo >= hi {
                        continue;
                    }
                    let src = (lo as isize + off) as usize;
                    let o = &mut orow[lo * b..hi * b];
                    let i = &irow[src * b..(src + hi - lo) * b];
                    for (ov, &iv) in o.iter_mut().zip(i) {
                        *ov += w * iv;
                    }
                }
            }
        }
    });
    out
}

pub fn conv1d_backward_input<T: Scalar>(grad_out: &[T], weight: &[T], d: Conv1dDims) -> Vec<T> {
    let (tp, b) = (d.len * d.batch, d.batch);
    let tile = time_tile(b);
    let mut gin = vec![T::zero(); d.c_in * tp];
    gin.par_chunks_mut(tp).enumerate().for_each(|(ci, grow)| {
        for s0 in (0..d.len).step_by(tile) {
            let s1 = (s0 + tile).min(d.len);
            for co in 0..d.c_out {
                let orow = &grad_out[co * tp..(co + 1) * tp];
                for j in 0..d.kernel {
                    let w = weight[(co * d.c_in + ci) * d.kernel + j];
                    let (lo, hi, off) = d.tap(j);
                    // output frames t whose source t + off lies in [s0, s1)
                    let lo = lo.max((s0 as isize - off).max(0) as usize);
                    let hi = hi.min((s1 as isize - off).max(0) as usize);
                    if w == T::zero() || lo >= hi {
                        continue;
                    }
                    let src = (lo as isize + off) as usize;
                    let g = &mut grow[src * b..(src + hi - lo) * b];
                    let o = &orow[lo * b..hi * b];
                    for (gv, &ov) in g.iter_mut().zip(o) {
                        *gv += w * ov;
                    }
                }
            }
        }
    });
    gin
}

pub fn conv1d_backward_weight<T: Scalar>(grad_out: &[T], input: &[T], d: Conv1dDims) -> Vec<T> {
    let (tp, b) = (d.len * d.batch, d.batch);
    let tile = time_tile(b);
    let mut gw = vec![T::zero(); d.c_out * d.c_in * d.kernel];
    gw.par_chunks_mut(d.c_in * d.kernel).enumerate().for_each(|(co, gco)| {
        let orow = &grad_out[co * tp..(co + 1) * tp];
        for t0 in (0..d.len).step_by(tile) {
            let t1 = (t0 + tile).min(d.len);
            for ci in 0..d.c_in {
                let irow = &input[ci * tp..(ci + 1) * tp];
                for j in 0..d.kernel {
                    let (lo, hi, off) = d.tap(j);
                    let (lo, hi) = (lo.max(t0), hi.min(t1));
                    if lo >= hi {
                        continue;
                    }
                    let src = (lo as isize + off) as usize;
                    gco[ci * d.kernel + j] += dot(&orow[lo * b..hi * b], &irow[src * b..(src + hi - lo) * b]);
                }
            }
        }
    });
    gw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2dDims {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    /// Output positions `o` along an axis of input length `n` for which
    /// `o * stride + k - pad` lands inside `[0, n)`.
    #[inline]
    fn valid(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad() as isize);
        let shift = k as isize - p;
        // o * s + shift >= 0  and  o * s + shift <= n - 1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_excl = if (n as isize - 1 - shift) < 0 {
            0
        } else {
            ((n as isize - 1 - shift) / s + 1).min(n_out as isize)
        };
        (lo as usize, (hi_excl.max(lo)) as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], d: Conv2dDims) -> Vec<T> {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (s, p, k) = (d.stride, d.pad(), d.kernel);
    let mut out = vec![T::zero(); d.c_out * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(co, oplane)| {
        for ci in 0..d.c_in {
            let iplane = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..k {
                let (oy0, oy1) = d.valid(ky, d.h, ho);
                for kx in 0..k {
                    let wv = weight[((co * d.c_in + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = d.valid(kx, d.w, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                        let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(grad_out: &[T], weight: &[T], d: Conv2dDims) -> Vec<T> {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (s, p, k) = (d.stride, d.pad(), d.kernel);
    let mut gin = vec![T::zero(); d.c_in * d.h * d.w];
    gin.par_chunks_mut(d.h * d.w).enumerate().for_each(|(ci, gplane)| {
        for co in 0..d.c_out {
            let oplane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..k {
                let (oy0, oy1) = d.valid(ky, d.h, ho);
                for kx in 0..k {
                    let wv = weight[((co * d.c_in + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = d.valid(kx, d.w, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let orow = &oplane[oy * wo..(oy + 1) * wo];
                        let grow = &mut gplane[iy * d.w..(iy + 1) * d.w];
                        for ox in ox0..ox1 {
                            grow[ox * s + kx - p] += wv * orow[ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_backward_weight<T: Scalar>(grad_out: &[T], input: &[T], d: Conv2dDims) -> Vec<T> {
    let (ho, wo) = (d.out_h(), d.out_w());
    let (s, p, k) = (d.stride, d.pad(), d.kernel);
    let mut gw = vec![T::zero(); d.c_out * d.c_in * k * k];
    gw.par_chunks_mut(d.c_in * k * k).enumerate().for_each(|(co, gco)| {
        let oplane = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..d.c_in {
            let iplane = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..k {
                let (oy0, oy1) = d.valid(ky, d.h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = d.valid(kx, d.w, wo);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                        let orow = &oplane[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            acc += orow[ox] * irow[ox * s + kx - p];
                        }
                    }
                    gco[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    gw
}

/// Source index pair and weight for bilinear x2 upsampling along one axis
/// (half-pixel centers, edge clamped).
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

pub fn upsample2x_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let ip = &input[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = upsample_taps(oy, h);
            let fy = T::lit(fy);
            for ox in 0..wo {
                let (x0, x1, fx) = upsample_taps(ox, w);
                let fx = T::lit(fx);
                let top = ip[y0 * w + x0] * (T::one() - fx) + ip[y0 * w + x1] * fx;
                let bot = ip[y1 * w + x0] * (T::one() - fx) + ip[y1 * w + x1] * fx;
                op[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        let gi = &mut gin[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = upsample_taps(oy, h);
            let fy = T::lit(fy);
            for ox in 0..wo {
                let (x0, x1, fx) = upsample_taps(ox, w);
                let fx = T::lit(fx);
                let g = go[oy * wo + ox];
                gi[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                gi[y0 * w + x1] += g * (T::one() - fy) * fx;
                gi[y1 * w + x0] += g * fy * (T::one() - fx);
                gi[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gin
}

/// Clamped sample coordinate along one axis: `(i0, i1, frac, in_bounds)`.
#[inline]
fn warp_axis<T: Scalar>(pos: T, n: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize_lossy(n - 1);
    let inside = pos >= T::zero() && pos <= max;
    let c = pos.max(T::zero()).min(max);
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - T::from_usize_lossy(i0), inside)
}

/// Bilinear backward warp: `out[c, y, x] = image[c, y + v, x + u]` with the
/// sample position clamped to the image. Returns the output and the per-pixel
/// in-bounds mask (`H x W`, 1 = sample was inside).
pub fn warp_forward<T: Scalar>(image: &[T], flow: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    let mut mask = vec![T::zero(); hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, fx, inx) = warp_axis(T::from_usize_lossy(x) + flow[p], w);
            let (y0, y1, fy, iny) = warp_axis(T::from_usize_lossy(y) + flow[hw + p], h);
            mask[p] = if inx && iny { T::one() } else { T::zero() };
            for ch in 0..c {
                let im = &image[ch * hw..(ch + 1) * hw];
                let top = im[y0 * w + x0] * (T::one() - fx) + im[y0 * w + x1] * fx;
                let bot = im[y1 * w + x0] * (T::one() - fx) + im[y1 * w + x1] * fx;
                out[ch * hw + p] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    (out, mask)
}

/// Gradients of [`warp_forward`] w.r.t. image and flow. Clamped axes carry no
/// flow gradient.
pub fn warp_backward<T: Scalar>(
    grad_out: &[T],
    image: &[T],
    flow: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut gimg = vec![T::zero(); c * hw];
    let mut gflow = vec![T::zero(); 2 * hw];
    let max_x = T::from_usize_lossy(w - 1);
    let max_y = T::from_usize_lossy(h - 1);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = T::from_usize_lossy(x) + flow[p];
            let py = T::from_usize_lossy(y) + flow[hw + p];
            let (x0, x1, fx, _) = warp_axis(px, w);
            let (y0, y1, fy, _) = warp_axis(py, h);
            let free_x = px > T::zero() && px < max_x;
            let free_y = py > T::zero() && py < max_y;
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for ch in 0..c {
                let g = grad_out[ch * hw + p];
                if g == T::zero() {
                    continue;
                }
                let im = &image[ch * hw..(ch + 1) * hw];
                let (a, b) = (im[y0 * w + x0], im[y0 * w + x1]);
                let (cc, dd) = (im[y1 * w + x0], im[y1 * w + x1]);
                let gi = &mut gimg[ch * hw..(ch + 1) * hw];
                gi[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                gi[y0 * w + x1] += g * (T::one() - fy) * fx;
                gi[y1 * w + x0] += g * fy * (T::one() - fx);
                gi[y1 * w + x1] += g * fy * fx;
                if free_x {
                    gu += g * ((T::one() - fy) * (b - a) + fy * (dd - cc));
                }
                if free_y {
                    gv += g * ((T::one() - fx) * (cc - a) + fx * (dd - b));
                }
            }
            gflow[p] = gu;
            gflow[hw + p] = gv;
        }
    }
    (gimg, gflow)
}

/// Local correlation: `out[(dy+d)*(2d+1) + dx+d, y, x] = sum_c a[c,y,x] b[c,y+dy,x+dx]`,
/// zero where the displaced position leaves the image.
pub fn correlation_forward<T: Scalar>(a: &[T], b: &[T], c: usize, h: usize, w: usize, d: usize) -> Vec<T> {
    let side = 2 * d + 1;
    let hw = h * w;
    let mut out = vec![T::zero(); side * side * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(k, oplane)| {
        let dy = (k / side) as isize - d as isize;
        let dx = (k % side) as isize - d as isize;
        for ch in 0..c {
            let ap = &a[ch * hw..(ch + 1) * hw];
            let bp = &b[ch * hw..(ch + 1) * hw];
            for y in 0..h {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    oplane[y * w + x] += ap[y * w + x] * bp[yy as usize * w + xx as usize];
                }
            }
        }
    });
    out
}

pub fn correlation_backward<T: Scalar>(
    grad_out: &[T],
    a: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let side = 2 * d + 1;
    let hw = h * w;
    let mut ga = vec![T::zero(); c * hw];
    let mut gb = vec![T::zero(); c * hw];
    ga.par_chunks_mut(hw)
        .zip(gb.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(ch, (gap, gbp))| {
            let ap = &a[ch * hw..(ch + 1) * hw];
            let bp = &b[ch * hw..(ch + 1) * hw];
            for k in 0..side * side {
                let dy = (k / side) as isize - d as isize;
                let dx = (k % side) as isize - d as isize;
                let go = &grad_out[k * hw..(k + 1) * hw];
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let q = yy as usize * w + xx as usize;
                        let g = go[y * w + x];
                        gap[y * w + x] += g * bp[q];
                        gbp[q] += g * ap[y * w + x];
                    }
                }
            }
        });
    (ga, gb)
}
