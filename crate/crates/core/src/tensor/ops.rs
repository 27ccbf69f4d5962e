//! Forward kernels and untraced tensor operations.
//!
//! Every kernel uses a fixed reduction order (channel, then kernel row,
//! then kernel column, per output element), so results are bitwise
//! reproducible. The traced operations in [`super::tape`] call the same
//! kernels, which keeps traced and untraced forward passes identical.

use crate::error::{Error, Result};
use crate::scalar::{from_f64, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

pub(crate) fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let i = input.shape();
    let k = weight.shape();
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if k.h.is_multiple_of(2) || k.w.is_multiple_of(2) {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel size {}x{} must be odd in both dimensions", k.h, k.w),
        ));
    }
    if i.c != k.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channel dimension C={} does not match weight input-channel dimension Cin={}",
                i.c, k.c
            ),
        ));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if bs != Shape::new(1, k.n, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {} does not match (1,{},1,1) for Cout={}",
                    bs, k.n, k.n
                ),
            ));
        }
    }
    if i.h + 2 * padding < k.h || i.w + 2 * padding < k.w {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {}x{} is smaller than kernel {}x{}",
                i.h + 2 * padding,
                i.w + 2 * padding,
                k.h,
                k.w
            ),
        ));
    }
    Ok(ConvDims {
        n: i.n,
        cin: i.c,
        h: i.h,
        w: i.w,
        cout: k.n,
        kh: k.h,
        kw: k.w,
        stride,
        padding,
        hout: (i.h + 2 * padding - k.h) / stride + 1,
        wout: (i.w + 2 * padding - k.w) / stride + 1,
    })
}

pub(crate) fn conv2d_fwd<S: Scalar>(
    x: &[S],
    wgt: &[S],
    bias: Option<&[S]>,
    d: &ConvDims,
) -> Vec<S> {
    let in_plane = d.h * d.w;
    let out_plane = d.hout * d.wout;
    let mut out = vec![S::zero(); d.n * d.cout * out_plane];
    for n in 0..d.n {
        let x_n = &x[n * d.cin * in_plane..][..d.cin * in_plane];
        let out_n = &mut out[n * d.cout * out_plane..][..d.cout * out_plane];
        for co in 0..d.cout {
            let out_p = &mut out_n[co * out_plane..][..out_plane];
            if let Some(b) = bias {
                out_p.fill(b[co]);
            }
            for ci in 0..d.cin {
                let x_p = &x_n[ci * in_plane..][..in_plane];
                let w_k = &wgt[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
                if d.stride == 1 {
                    conv_fwd_plane_s1(x_p, w_k, out_p, d);
                } else {
                    conv_fwd_plane_gather(x_p, w_k, out_p, d);
                }
            }
        }
    }
    out
}

/// Stride-1 fast path: per (kh,kw) tap, one vectorizable axpy per output row.
fn conv_fwd_plane_s1<S: Scalar>(x_p: &[S], w_k: &[S], out_p: &mut [S], d: &ConvDims) {
    let p = d.padding as isize;
    for kh in 0..d.kh {
        let shift_h = kh as isize - p;
        let oh_lo = (-shift_h).max(0) as usize;
        let oh_hi = (d.h as isize - shift_h).clamp(0, d.hout as isize) as usize;
        for kw in 0..d.kw {
            let wv = w_k[kh * d.kw + kw];
            let shift_w = kw as isize - p;
            let ow_lo = (-shift_w).max(0) as usize;
            let ow_hi = (d.w as isize - shift_w).clamp(0, d.wout as isize) as usize;
            if ow_lo >= ow_hi {
                continue;
            }
            let len = ow_hi - ow_lo;
            for oh in oh_lo..oh_hi {
                let ih = (oh as isize + shift_h) as usize;
                let orow = &mut out_p[oh * d.wout + ow_lo..][..len];
                let xrow = &x_p[ih * d.w + (ow_lo as isize + shift_w) as usize..][..len];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o = *o + wv * xv;
                }
            }
        }
    }
}

fn conv_fwd_plane_gather<S: Scalar>(x_p: &[S], w_k: &[S], out_p: &mut [S], d: &ConvDims) {
    let p = d.padding as isize;
    for oh in 0..d.hout {
        for ow in 0..d.wout {
            let mut acc = out_p[oh * d.wout + ow];
            for kh in 0..d.kh {
                let ih = (oh * d.stride) as isize + kh as isize - p;
                if ih < 0 || ih >= d.h as isize {
                    continue;
                }
                for kw in 0..d.kw {
                    let iw = (ow * d.stride) as isize + kw as isize - p;
                    if iw < 0 || iw >= d.w as isize {
                        continue;
                    }
                    acc = acc + w_k[kh * d.kw + kw] * x_p[ih as usize * d.w + iw as usize];
                }
            }
            out_p[oh * d.wout + ow] = acc;
        }
    }
}

pub(crate) fn conv2d_bwd_input<S: Scalar>(dout: &[S], wgt: &[S], d: &ConvDims) -> Vec<S> {
    let in_plane = d.h * d.w;
    let out_plane = d.hout * d.wout;
    let mut dx = vec![S::zero(); d.n * d.cin * in_plane];
    let p = d.padding as isize;
    for n in 0..d.n {
        let dout_n = &dout[n * d.cout * out_plane..][..d.cout * out_plane];
        let dx_n = &mut dx[n * d.cin * in_plane..][..d.cin * in_plane];
        for ci in 0..d.cin {
            let dx_p = &mut dx_n[ci * in_plane..][..in_plane];
            for co in 0..d.cout {
                let dout_p = &dout_n[co * out_plane..][..out_plane];
                let w_k = &wgt[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
                if d.stride == 1 {
                    for kh in 0..d.kh {
                        // oh = ih + p - kh
                        let shift_h = p - kh as isize;
                        let ih_lo = (-shift_h).max(0) as usize;
                        let ih_hi = (d.hout as isize - shift_h).clamp(0, d.h as isize) as usize;
                        for kw in 0..d.kw {
                            let wv = w_k[kh * d.kw + kw];
                            let shift_w = p - kw as isize;
                            let iw_lo = (-shift_w).max(0) as usize;
                            let iw_hi = (d.wout as isize - shift_w).clamp(0, d.w as isize) as usize;
                            if iw_lo >= iw_hi {
                                continue;
                            }
                            let len = iw_hi - iw_lo;
                            for ih in ih_lo..ih_hi {
                                let oh = (ih as isize + shift_h) as usize;
                                let drow = &mut dx_p[ih * d.w + iw_lo..][..len];
                                let grow =
                                    &dout_p[oh * d.wout + (iw_lo as isize + shift_w) as usize..][..len];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + wv * gv;
                                }
                            }
                        }
                    }
                } else {
                    for ih in 0..d.h {
                        for iw in 0..d.w {
                            let mut acc = dx_p[ih * d.w + iw];
                            for kh in 0..d.kh {
                                let t = ih as isize + p - kh as isize;
                                if t < 0 || t % d.stride as isize != 0 {
                                    continue;
                                }
                                let oh = (t / d.stride as isize) as usize;
                                if oh >= d.hout {
                                    continue;
                                }
                                for kw in 0..d.kw {
                                    let u = iw as isize + p - kw as isize;
                                    if u < 0 || u % d.stride as isize != 0 {
                                        continue;
                                    }
                                    let ow = (u / d.stride as isize) as usize;
                                    if ow >= d.wout {
                                        continue;
                                    }
                                    acc = acc + w_k[kh * d.kw + kw] * dout_p[oh * d.wout + ow];
                                }
                            }
                            dx_p[ih * d.w + iw] = acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_bwd_weight<S: Scalar>(dout: &[S], x: &[S], d: &ConvDims) -> Vec<S> {
    let in_plane = d.h * d.w;
    let out_plane = d.hout * d.wout;
    let mut dw = vec![S::zero(); d.cout * d.cin * d.kh * d.kw];
    let p = d.padding as isize;
    for co in 0..d.cout {
        for ci in 0..d.cin {
            let dw_k = &mut dw[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let mut acc = S::zero();
                    for n in 0..d.n {
                        let x_p = &x[(n * d.cin + ci) * in_plane..][..in_plane];
                        let dout_p = &dout[(n * d.cout + co) * out_plane..][..out_plane];
                        if d.stride == 1 {
                            let shift_h = kh as isize - p;
                            let oh_lo = (-shift_h).max(0) as usize;
                            let oh_hi = (d.h as isize - shift_h).clamp(0, d.hout as isize) as usize;
                            let shift_w = kw as isize - p;
                            let ow_lo = (-shift_w).max(0) as usize;
                            let ow_hi = (d.w as isize - shift_w).clamp(0, d.wout as isize) as usize;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + shift_h) as usize;
                                let grow = &dout_p[oh * d.wout + ow_lo..][..len];
                                let xrow =
                                    &x_p[ih * d.w + (ow_lo as isize + shift_w) as usize..][..len];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc = acc + gv * xv;
                                }
                            }
                        } else {
                            for oh in 0..d.hout {
                                let ih = (oh * d.stride) as isize + kh as isize - p;
                                if ih < 0 || ih >= d.h as isize {
                                    continue;
                                }
                                for ow in 0..d.wout {
                                    let iw = (ow * d.stride) as isize + kw as isize - p;
                                    if iw < 0 || iw >= d.w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + dout_p[oh * d.wout + ow]
                                            * x_p[ih as usize * d.w + iw as usize];
                                }
                            }
                        }
                    }
                    dw_k[kh * d.kw + kw] = acc;
                }
            }
        }
    }
    dw
}

pub(crate) fn conv2d_bwd_bias<S: Scalar>(dout: &[S], d: &ConvDims) -> Vec<S> {
    let out_plane = d.hout * d.wout;
    let mut db = vec![S::zero(); d.cout];
    for n in 0..d.n {
        for co in 0..d.cout {
            let dout_p = &dout[(n * d.cout + co) * out_plane..][..out_plane];
            let mut acc = db[co];
            for &g in dout_p {
                acc = acc + g;
            }
            db[co] = acc;
        }
    }
    db
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let d = conv_dims(input, weight, bias, stride, padding)?;
    let out = conv2d_fwd(input.data(), weight.data(), bias.map(|b| b.data()), &d);
    Tensor::new(Shape::new(d.n, d.cout, d.hout, d.wout), out)
}

pub(crate) fn pixel_shuffle_dims<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Shape> {
    let s = input.shape();
    if r == 0 {
        return Err(Error::invalid("pixel_shuffle", "factor r must be positive"));
    }
    if !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channel dimension C={} is not divisible by r^2={}", s.c, r * r),
        ));
    }
    Ok(Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r))
}

pub(crate) fn pixel_shuffle_fwd<S: Scalar>(x: &[S], s: Shape, r: usize) -> Vec<S> {
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = vec![S::zero(); out_shape.numel()];
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for a in 0..r {
                for b in 0..r {
                    let ci = c * r * r + a * r + b;
                    for h in 0..s.h {
                        for w in 0..s.w {
                            out[out_shape.idx(n, c, h * r + a, w * r + b)] = x[s.idx(n, ci, h, w)];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pixel_unshuffle_fwd<S: Scalar>(x: &[S], s: Shape, r: usize) -> Vec<S> {
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = vec![S::zero(); out_shape.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for a in 0..r {
                for b in 0..r {
                    let co = c * r * r + a * r + b;
                    for h in 0..out_shape.h {
                        for w in 0..out_shape.w {
                            out[out_shape.idx(n, co, h, w)] = x[s.idx(n, c, h * r + a, w * r + b)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rearrange r^2 channel groups into an r-times upsampled spatial grid:
/// out(n, c, h*r+a, w*r+b) = in(n, c*r^2 + a*r + b, h, w).
pub fn pixel_shuffle<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let out_shape = pixel_shuffle_dims(input, r)?;
    Tensor::new(out_shape, pixel_shuffle_fwd(input.data(), input.shape(), r))
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<S: Scalar>(input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let s = input.shape();
    if r == 0 {
        return Err(Error::invalid("pixel_unshuffle", "factor r must be positive"));
    }
    if !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial dimensions {}x{} are not divisible by r={}", s.h, s.w, r),
        ));
    }
    Tensor::new(
        Shape::new(s.n, s.c * r * r, s.h / r, s.w / r),
        pixel_unshuffle_fwd(input.data(), s, r),
    )
}

pub(crate) fn global_avg_pool_fwd<S: Scalar>(x: &[S], s: Shape) -> Vec<S> {
    let plane = s.h * s.w;
    let inv = from_f64::<S>(1.0 / plane as f64);
    let mut out = vec![S::zero(); s.n * s.c];
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let mut acc = S::zero();
        for &v in chunk {
            acc = acc + v;
        }
        out[i] = acc * inv;
    }
    out
}

/// Spatial mean per (batch, channel): output shape (N, C, 1, 1).
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("global_avg_pool", "H and W must be >= 1"));
    }
    Tensor::new(
        Shape::new(s.n, s.c, 1, 1),
        global_avg_pool_fwd(input.data(), s),
    )
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.max(S::zero()))
}

#[inline]
pub(crate) fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(sigmoid_scalar)
}

/// How the second operand of add/mul lines up with the first.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Second operand has shape (N, C, 1, 1) and is replicated over H, W.
    PerChannel,
}

pub(crate) fn broadcast_kind<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Broadcast> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        Ok(Broadcast::Same)
    } else if sb == Shape::new(sa.n, sa.c, 1, 1) {
        Ok(Broadcast::PerChannel)
    } else {
        Err(Error::shape(
            op,
            format!(
                "shapes {sa} and {sb} are neither identical nor (N,C,1,1)-broadcastable"
            ),
        ))
    }
}

pub(crate) fn binary_fwd<S: Scalar>(
    a: &[S],
    b: &[S],
    s: Shape,
    kind: Broadcast,
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    match kind {
        Broadcast::Same => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::PerChannel => {
            let plane = s.h * s.w;
            let mut out = Vec::with_capacity(s.numel());
            for (i, chunk) in a.chunks_exact(plane).enumerate() {
                let g = b[i];
                out.extend(chunk.iter().map(|&x| f(x, g)));
            }
            out
        }
    }
}

/// Elementwise sum; `other` may be (N,C,1,1) and broadcasts over H, W.
pub fn add<S: Scalar>(a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
    let kind = broadcast_kind("add", a, other)?;
    Tensor::new(
        a.shape(),
        binary_fwd(a.data(), other.data(), a.shape(), kind, |x, y| x + y),
    )
}

/// Elementwise product; `other` may be (N,C,1,1) and broadcasts over H, W
/// (the channel-attention gate shape).
pub fn mul<S: Scalar>(a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
    let kind = broadcast_kind("mul", a, other)?;
    Tensor::new(
        a.shape(),
        binary_fwd(a.data(), other.data(), a.shape(), kind, |x, y| x * y),
    )
}

pub fn scale<S: Scalar>(input: &Tensor<S>, s: S) -> Tensor<S> {
    input.map(|v| v * s)
}

pub(crate) fn l1_fwd<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + (x - y).abs();
    }
    acc * from_f64::<S>(1.0 / a.len() as f64)
}

/// Mean absolute difference over all elements, as a (1,1,1,1) tensor.
pub fn l1_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "l1_loss",
            format!(
                "pred shape {} does not match target shape {}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    Ok(Tensor::scalar(l1_fwd(pred.data(), target.data())))
}
