//! Forward kernels over NCHW tensors plus the matching gradient kernels used by
//! the tape. Loops are plain and single-threaded; accumulation order is fixed
//! so repeated runs are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a strided window: `floor((len + 2*pad - k) / stride) + 1`.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

/// Geometry shared by the conv forward and backward loops.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    fn new(
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} != weight input channels {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{cout}] (output channels)", b.shape()),
                ));
            }
        }
        let ho = window_out(h, kh, stride.0, padding.0).ok_or_else(|| {
            Error::shape("conv2d", format!("height {h} too small for kernel {kh} pad {}", padding.0))
        })?;
        let wo = window_out(w, kw, stride.1, padding.1).ok_or_else(|| {
            Error::shape("conv2d", format!("width {w} too small for kernel {kw} pad {}", padding.1))
        })?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad: padding,
        })
    }

    /// Valid output-column range for kernel column `kx`, and the input column
    /// of the first valid output.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (sw, pw) = (self.stride.1, self.pad.1);
        // iw = ow*sw + kx - pw must lie in [0, w)
        let lo = if kx >= pw { 0 } else { (pw - kx).div_ceil(sw) };
        let hi_excl = if self.w + pw > kx {
            ((self.w + pw - kx - 1) / sw + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    #[inline]
    fn in_row(&self, oh: usize, ky: usize) -> Option<usize> {
        let ih = oh * self.stride.0 + ky;
        if ih < self.pad.0 || ih - self.pad.0 >= self.h {
            None
        } else {
            Some(ih - self.pad.0)
        }
    }
}

/// Lower the input to a `[cin*kh*kw, n*ho*wo]` patch matrix (zero padded).
fn im2col(g: &ConvGeom, x: &[f32]) -> Vec<f32> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let np = g.n * plane_out;
    let mut cols = vec![0.0f32; g.cin * g.kh * g.kw * np];
    let sw = g.stride.1;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[k * np..][..np];
                let (lo, hi) = g.col_range(kx);
                for n in 0..g.n {
                    let i_plane = &x[(n * g.cin + ci) * plane_in..][..plane_in];
                    for oh in 0..g.ho {
                        let Some(ih) = g.in_row(oh, ky) else { continue };
                        let i_row = &i_plane[ih * g.w..][..g.w];
                        let o_row = &mut row[n * plane_out + oh * g.wo..][..g.wo];
                        if sw == 1 {
                            let off = lo + kx - g.pad.1;
                            o_row[lo..hi].copy_from_slice(&i_row[off..off + (hi - lo)]);
                        } else {
                            for ow in lo..hi {
                                o_row[ow] = i_row[ow * sw + kx - g.pad.1];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-matrix gradient back to input layout.
fn col2im(g: &ConvGeom, cols: &[f32]) -> Vec<f32> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let np = g.n * plane_out;
    let mut x = vec![0.0f32; g.n * g.cin * plane_in];
    let sw = g.stride.1;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[k * np..][..np];
                let (lo, hi) = g.col_range(kx);
                for n in 0..g.n {
                    let i_plane = &mut x[(n * g.cin + ci) * plane_in..][..plane_in];
                    for oh in 0..g.ho {
                        let Some(ih) = g.in_row(oh, ky) else { continue };
                        let i_row = &mut i_plane[ih * g.w..][..g.w];
                        let c_row = &row[n * plane_out + oh * g.wo..][..g.wo];
                        if sw == 1 {
                            let off = lo + kx - g.pad.1;
                            for (iv, cv) in i_row[off..off + (hi - lo)].iter_mut().zip(&c_row[lo..hi]) {
                                *iv += cv;
                            }
                        } else {
                            for ow in lo..hi {
                                i_row[ow * sw + kx - g.pad.1] += c_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight fixed accumulation lanes (deterministic, and
/// vectorizable without reassociation).
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().sum::<f32>() + tail
}

/// Cross-correlation via a patch matrix. Each output element starts from the
/// bias and accumulates patch rows in (input channel, kernel row, kernel
/// column) order.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, bias, stride, padding)?;
    let wt = weight.data();
    let plane_out = g.ho * g.wo;
    let np = g.n * plane_out;
    let kk = g.cin * g.kh * g.kw;
    let cols = im2col(&g, input.data());
    let mut tmp = vec![0.0f32; g.cout * np];
    for co in 0..g.cout {
        let t = &mut tmp[co * np..][..np];
        if let Some(b) = bias {
            t.fill(b.data()[co]);
        }
        for k in 0..kk {
            axpy(t, wt[co * kk + k], &cols[k * np..][..np]);
        }
    }
    let mut out = vec![0.0f32; np * g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            out[(n * g.cout + co) * plane_out..][..plane_out]
                .copy_from_slice(&tmp[co * np + n * plane_out..][..plane_out]);
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = ConvGeom::new(input, weight, None, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let wt = weight.data();
    let go = grad_out.data();
    let plane_out = g.ho * g.wo;
    let np = g.n * plane_out;
    let kk = g.cin * g.kh * g.kw;
    let cols = im2col(&g, input.data());
    let mut gt = vec![0.0f32; g.cout * np];
    for n in 0..g.n {
        for co in 0..g.cout {
            gt[co * np + n * plane_out..][..plane_out]
                .copy_from_slice(&go[(n * g.cout + co) * plane_out..][..plane_out]);
        }
    }
    let mut gw = vec![0.0f32; wt.len()];
    let mut gb = vec![0.0f32; g.cout];
    let mut gcols = vec![0.0f32; kk * np];
    for co in 0..g.cout {
        let grow = &gt[co * np..][..np];
        if has_bias {
            gb[co] = grow.iter().sum();
        }
        for k in 0..kk {
            let crow = &cols[k * np..][..np];
            gw[co * kk + k] = dot(grow, crow);
            axpy(&mut gcols[k * np..][..np], wt[co * kk + k], grow);
        }
    }
    let gx = col2im(&g, &gcols);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        if has_bias { Some(Tensor::new(vec![g.cout], gb)?) } else { None },
    ))
}

fn check_channel_param(op: &'static str, name: &str, t: &Tensor, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(op, format!("{name} has shape {:?}, expected [{c}]", t.shape())));
    }
    Ok(())
}

/// Batch normalization with frozen statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("batchnorm")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        check_channel_param("batchnorm", name, t, c)?;
    }
    if let Some(i) = var.data().iter().position(|&v| v < 0.0) {
        return Err(Error::shape("batchnorm", format!("negative variance at channel {i}")));
    }
    let plane = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / libm::sqrtf(var.data()[ch] + eps);
        let (g, b, m) = (gamma.data()[ch], beta.data()[ch], mean.data()[ch]);
        for s in 0..n {
            for v in &mut data[(s * c + ch) * plane..][..plane] {
                *v = g * (*v - m) * inv + b;
            }
        }
    }
    Ok(out)
}

/// Batch-statistics normalization used during training.
pub struct BatchNormTrainOut {
    pub y: Tensor,
    pub xhat: Tensor,
    pub mean: Vec<f32>,
    /// Biased batch variance.
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<BatchNormTrainOut> {
    let (n, c, h, w) = x.dims4("batchnorm")?;
    check_channel_param("batchnorm", "gamma", gamma, c)?;
    check_channel_param("batchnorm", "beta", beta, c)?;
    let plane = h * w;
    let count = (n * plane) as f32;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    let mut xhat = vec![0.0f32; xd.len()];
    let mut y = vec![0.0f32; xd.len()];
    for ch in 0..c {
        let mut s = 0.0f32;
        for b in 0..n {
            s += xd[(b * c + ch) * plane..][..plane].iter().sum::<f32>();
        }
        let m = s / count;
        let mut sq = 0.0f32;
        for b in 0..n {
            for v in &xd[(b * c + ch) * plane..][..plane] {
                sq += (v - m) * (v - m);
            }
        }
        let var_c = sq / count;
        let inv = 1.0 / libm::sqrtf(var_c + eps);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (xd[i] - m) * inv;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
        mean[ch] = m;
        var[ch] = var_c;
        inv_std[ch] = inv;
    }
    let shape = x.shape().to_vec();
    Ok(BatchNormTrainOut {
        y: Tensor::new(shape.clone(), y)?,
        xhat: Tensor::new(shape, xhat)?,
        mean,
        var,
        inv_std,
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

pub(crate) fn sigmoid_grad(x: f32) -> f32 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add_scalar(a: &Tensor, s: f32) -> Tensor {
    a.map(|v| v + s)
}

/// Multiply channel `c` of an NCHW tensor by `scale[c]`.
pub fn scale_channels(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("scale")?;
    check_channel_param("scale", "scale", scale, c)?;
    let plane = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let s = scale.data()[ch];
            for v in &mut d[(b * c + ch) * plane..][..plane] {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// SPAB-style modulation `x * (sigmoid(a) - 0.5) + x`.
pub fn modulate(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    same_shape("modulate", x, a)?;
    let data = x
        .data()
        .iter()
        .zip(a.data())
        .map(|(&xv, &av)| xv * (sigmoid_scalar(av) - 0.5) + xv)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Concatenate NCHW tensors along the channel axis in the given order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut c_total = 0;
    for (i, p) in parts.iter().enumerate() {
        let (pn, pc, ph, pw) = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("input {i} has dims {:?}, expected N={n} H={h} W={w}", p.shape()),
            ));
        }
        c_total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c_total * plane);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * plane..][..pc * plane]);
        }
    }
    Tensor::new(vec![n, c_total, h, w], out)
}

/// Channel slice `[offset, offset + len)` of an NCHW tensor.
pub fn slice_channels(x: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("split")?;
    if len == 0 || offset + len > c {
        return Err(Error::shape("split", format!("slice [{offset}, {}) outside {c} channels", offset + len)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + offset) * plane..][..len * plane]);
    }
    Tensor::new(vec![n, len, h, w], out)
}

/// Split along channels; exact inverse of [`concat_channels`] with the same sizes.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (_, c, _, _) = x.dims4("split")?;
    let total: usize = sizes.iter().sum();
    if total != c || sizes.contains(&0) {
        return Err(Error::shape("split", format!("sizes {sizes:?} do not partition {c} channels")));
    }
    let mut off = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        parts.push(slice_channels(x, off, s)?);
        off += s;
    }
    Ok(parts)
}

/// Max pooling with implicit -inf padding. Also returns the flat argmax index
/// into `x` for every output element (first maximum wins).
pub fn maxpool2d_with_argmax(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool")?;
    if k == 0 {
        return Err(Error::shape("maxpool", "kernel must be positive"));
    }
    if pad * 2 > k {
        return Err(Error::shape("maxpool", format!("padding {pad} exceeds half of kernel {k}")));
    }
    let ho = window_out(h, k, stride, pad).ok_or_else(|| Error::shape("maxpool", "input smaller than kernel"))?;
    let wo = window_out(w, k, stride, pad).ok_or_else(|| Error::shape("maxpool", "input smaller than kernel"))?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let ih = oh * stride + ky;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let iw = ow * stride + kx;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        let idx = base + (ih - pad) * w + (iw - pad);
                        if best_i == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    maxpool2d_with_argmax(x, k, stride, pad).map(|(t, _)| t)
}

/// Mean over H and W; returns `[N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = (0..n * c)
        .map(|i| x.data()[i * plane..][..plane].iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// `x[N, in] * w[out, in]^T + b[out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, fin) = dims2("linear", x)?;
    let (fout, win) = dims2("linear", weight)?;
    if win != fin {
        return Err(Error::shape("linear", format!("input features {fin} != weight input features {win}")));
    }
    if let Some(b) = bias {
        check_channel_param("linear", "bias", b, fout)?;
    }
    let mut out = vec![0.0f32; n * fout];
    for s in 0..n {
        let row = &x.data()[s * fin..][..fin];
        for o in 0..fout {
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (wv, xv) in weight.data()[o * fin..][..fin].iter().zip(row) {
                acc += wv * xv;
            }
            out[s * fout + o] = acc;
        }
    }
    Tensor::new(vec![n, fout], out)
}

pub(crate) fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(op, format!("expected rank-2, got {:?}", t.shape()))),
    }
}

/// Mean softmax cross-entropy over the batch. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, k) = dims2("softmax_cross_entropy", logits)?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", format!("{} labels for batch {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("softmax_cross_entropy", format!("label {bad} >= classes {k}")));
    }
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f32;
    for s in 0..n {
        let row = &logits.data()[s * k..][..k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0f32;
        for (p, &v) in probs[s * k..][..k].iter_mut().zip(row) {
            *p = libm::expf(v - m);
            z += *p;
        }
        for p in &mut probs[s * k..][..k] {
            *p /= z;
        }
        loss += -(libm::logf(probs[s * k + labels[s]].max(f32::MIN_POSITIVE)));
    }
    Ok((loss / n as f32, Tensor::new(vec![n, k], probs)?))
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k) = dims2("argmax", logits)?;
    Ok((0..n)
        .map(|s| {
            let row = &logits.data()[s * k..][..k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // (0,0): 1 + 5, (0,1): 2 + 6, (1,0): 4 + 8, (1,1): 5 + 9
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv_zero_weight_gives_zeros() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f32).sin());
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, None, (2, 1), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_one_hot_selects_channel() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32 * 0.25 - 3.0);
        let mut w = Tensor::zeros(&[1, 3, 1, 1]);
        w.data_mut()[2] = 1.0;
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y, slice_channels(&x, 2, 1).unwrap());
    }

    #[test]
    fn conv_padding_and_stride_match_naive() {
        let x = Tensor::from_fn(&[1, 2, 5, 6], |i| ((i * 7) % 11) as f32 - 5.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f32 - 3.0);
        let b = Tensor::from_fn(&[3], |i| i as f32);
        for &(s, p) in &[((1, 1), (1, 1)), ((2, 2), (1, 1)), ((2, 1), (0, 2)), ((3, 2), (2, 0))] {
            let y = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let (_, co, ho, wo) = y.dims4("t").unwrap();
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.data()[o];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let ih = (oh * s.0 + ky) as isize - p.0 as isize;
                                    let iw = (ow * s.1 + kx) as isize - p.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= 5 || iw >= 6 {
                                        continue;
                                    }
                                    acc += w.data()[((o * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + ih as usize) * 6 + iw as usize];
                                }
                            }
                        }
                        assert_eq!(y.data()[(o * ho + oh) * wo + ow], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 1]);
        let err = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap_err();
        assert!(alloc::format!("{err}").contains("input channels"));
    }

    #[test]
    fn batchnorm_cases() {
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32 - 4.0);
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        assert_eq!(batchnorm_infer(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap(), x);

        let x = Tensor::full(&[1, 1, 2, 2], 2.0);
        let y = batchnorm_infer(&x, &t(&[1], &[3.]), &t(&[1], &[1.]), &t(&[1], &[2.]), &t(&[1], &[1.]), 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));

        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let beta = t(&[2], &[0.5, -1.5]);
        let y = batchnorm_infer(&x, &zeros, &beta, &zeros, &ones, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);

        assert!(batchnorm_infer(&x, &ones, &zeros, &zeros, &t(&[2], &[1., -1.]), 0.0).is_err());
        assert!(batchnorm_infer(&x, &Tensor::full(&[3], 1.0), &zeros, &zeros, &ones, 0.0).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let z = Tensor::zeros(&[1]);
        assert_eq!(sigmoid(&z).data()[0], 0.5);
        assert_eq!(silu(&z).data()[0], 0.0);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f32));
        let c = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&c, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(split_channels(&c, &[2, 1]).is_err());
        assert!(concat_channels(&[&a, &Tensor::zeros(&[2, 1, 3, 2])]).is_err());
    }

    #[test]
    fn maxpool_hand_example() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(maxpool2d(&x, 2, 2, 0).unwrap().data(), &[4.]);
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 13) % 17) as f32);
        assert_eq!(maxpool2d(&x, 5, 1, 2).unwrap().shape(), x.shape());
    }

    #[test]
    fn add_rejects_mismatch() {
        assert!(add(&Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn modulate_zero_gate_is_identity() {
        // sigmoid(0) - 0.5 == 0, so only the residual term survives
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let y = modulate(&x, &Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert_eq!(y, x);
        let y = modulate(&x, &Tensor::full(&[1, 2, 2, 2], 100.0)).unwrap();
        assert_eq!(y, x.map(|v| 1.5 * v));
    }

    #[test]
    fn linear_and_ce() {
        let x = t(&[1, 2], &[1., 2.]);
        let w = t(&[2, 2], &[1., 0., 0., 1.]);
        let y = linear(&x, &w, Some(&t(&[2], &[0.5, 0.]))).unwrap();
        assert_eq!(y.data(), &[1.5, 2.]);
        let (loss, p) = softmax_cross_entropy(&t(&[1, 2], &[0., 0.]), &[1]).unwrap();
        assert!((loss - core::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(p.data(), &[0.5, 0.5]);
    }
}
