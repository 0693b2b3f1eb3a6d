//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one entry holding its output value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the entries in exact
//! reverse order of recording.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fakequant;
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identity of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Modulate {
        x: Var,
        a: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        offset: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    FakeQuant {
        x: Var,
        scale: f32,
    },
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Entry {
    op: Op,
    value: Tensor,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient for a parameter; `None` if it was not reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.entries.push(Entry { op, value });
        Var(self.entries.len() - 1)
    }

    /// Non-trainable leaf (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t)
    }

    /// Trainable leaf. Registering the same id twice accumulates both uses.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(Op::Leaf { param: Some(id) }, t)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, y))
    }

    /// Batch-statistics normalization. Returns the output and the biased batch
    /// mean/variance so the caller can update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let out = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            out.y,
        );
        Ok((v, out.mean, out.var))
    }

    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor, var: &Tensor, eps: f32) -> Result<Var> {
        let y = ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let inv_std = var.data().iter().map(|&v| 1.0 / libm::sqrtf(v + eps)).collect();
        Ok(self.push(
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
            y,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        self.push(Op::Silu(x), y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let y = ops::add_scalar(self.value(a), s);
        self.push(Op::AddScalar(a), y)
    }

    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = ops::scale_channels(self.value(x), self.value(s))?;
        Ok(self.push(Op::ScaleChannels { x, s }, y))
    }

    pub fn modulate(&mut self, x: Var, a: Var) -> Result<Var> {
        let y = ops::modulate(self.value(x), self.value(a))?;
        Ok(self.push(Op::Modulate { x, a }, y))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&parts)?;
        Ok(self.push(Op::Concat(xs.to_vec()), y))
    }

    pub fn slice_channels(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(x), offset, len)?;
        Ok(self.push(Op::Slice { x, offset }, y))
    }

    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).shape().get(1).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::shape("split", alloc::format!("sizes {sizes:?} do not partition {c} channels")));
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_channels(x, off, s)?);
            off += s;
        }
        Ok(out)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d_with_argmax(self.value(x), k, stride, pad)?;
        Ok(self.push(Op::MaxPool { x, argmax }, y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), y))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(Op::Linear { x, w, b }, y))
    }

    /// Quantize-dequantize with a clipped straight-through backward.
    pub fn fakequant(&mut self, x: Var, scale: f32) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::invalid(alloc::format!("fake-quant scale must be positive, got {scale}")));
        }
        let y = fakequant::qdq(self.value(x), scale);
        Ok(self.push(Op::FakeQuant { x, scale }, y))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Gradients of the scalar `loss` with respect to everything on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_with(loss, Tensor::full(lv.shape(), 1.0))
    }

    /// Backward pass seeded with an explicit upstream gradient for `loss`.
    pub fn backward_with(&self, loss: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(loss).shape() {
            return Err(Error::shape("backward", "seed gradient shape differs from loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            match &entry.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        let mut slot = params.remove(id);
                        accumulate(&mut slot, g.clone());
                        params.insert(*id, slot.expect("accumulated"));
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), &g, *stride, *pad)?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (gx, gg, gb) = bn_train_backward(&g, xhat, self.value(*gamma), inv_std)?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], gg);
                    accumulate(&mut grads[beta.0], gb);
                }
                Op::BatchNormInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (gx, gg, gb) = bn_infer_backward(&g, self.value(*x), self.value(*gamma), mean, inv_std)?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], gg);
                    accumulate(&mut grads[beta.0], gb);
                }
                Op::Silu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| gv * ops::silu_grad(xv));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| gv * ops::sigmoid_grad(xv));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = zip_map(&g, self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::ScaleChannels { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let (n, c, h, w) = xv.dims4("scale")?;
                    let plane = h * w;
                    let gx = ops::scale_channels(&g, sv)?;
                    let mut gs = vec![0.0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            gs[ch] += g.data()[r.clone()].iter().zip(&xv.data()[r]).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[s.0], Tensor::new(vec![c], gs)?);
                }
                Op::Modulate { x, a } => {
                    let xv = self.value(*x);
                    let av = self.value(*a);
                    let gx = zip_map(&g, av, |gv, aa| gv * (ops::sigmoid_scalar(aa) + 0.5));
                    let ga_data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(av.data())
                        .map(|((gv, xx), aa)| gv * xx * ops::sigmoid_grad(*aa))
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), ga_data)?);
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for v in xs {
                        let c = self.value(*v).shape()[1];
                        accumulate(&mut grads[v.0], ops::slice_channels(&g, off, c)?);
                        off += c;
                    }
                }
                Op::Slice { x, offset } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4("split")?;
                    let len = g.shape()[1];
                    let plane = h * w;
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        gx.data_mut()[(b * c + offset) * plane..][..len * plane]
                            .copy_from_slice(&g.data()[b * len * plane..][..len * plane]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (gv, &i) in g.data().iter().zip(argmax) {
                        gx.data_mut()[i] += gv;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let inv = 1.0 / plane as f32;
                    let mut gx = Tensor::zeros(&shape);
                    for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        chunk.fill(g.data()[i] * inv);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, fin) = ops::dims2("linear", xv)?;
                    let fout = wv.shape()[0];
                    let mut gx = vec![0.0f32; n * fin];
                    let mut gw = vec![0.0f32; fout * fin];
                    let mut gb = vec![0.0f32; fout];
                    for s in 0..n {
                        for o in 0..fout {
                            let go = g.data()[s * fout + o];
                            gb[o] += go;
                            for i in 0..fin {
                                gx[s * fin + i] += go * wv.data()[o * fin + i];
                                gw[o * fin + i] += go * xv.data()[s * fin + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, fin], gx)?);
                    accumulate(&mut grads[w.0], Tensor::new(vec![fout, fin], gw)?);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], Tensor::new(vec![fout], gb)?);
                    }
                }
                Op::FakeQuant { x, scale } => {
                    let gx = fakequant::qdq_backward(&g, self.value(*x), *scale);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let (n, k) = ops::dims2("softmax_cross_entropy", probs)?;
                    let scale = g.data()[0] / n as f32;
                    let mut gl = probs.clone();
                    for (s, &l) in labels.iter().enumerate() {
                        gl.data_mut()[s * k + l] -= 1.0;
                    }
                    for v in gl.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn bn_train_backward(g: &Tensor, xhat: &Tensor, gamma: &Tensor, inv_std: &[f32]) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = g.dims4("batchnorm")?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut gx = vec![0.0f32; g.len()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (gv, xh) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                sum_g += gv;
                sum_gx += gv * xh;
            }
        }
        gb[ch] = sum_g;
        gg[ch] = sum_gx;
        let k = gamma.data()[ch] * inv_std[ch] / m;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = k * (m * g.data()[i] - sum_g - xhat.data()[i] * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(g.shape().to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

fn bn_infer_backward(
    g: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = g.dims4("batchnorm")?;
    let plane = h * w;
    let mut gx = vec![0.0f32; g.len()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let gv = g.data()[i];
                gb[ch] += gv;
                gg[ch] += gv * (x.data()[i] - mean[ch]) * inv_std[ch];
                gx[i] = gv * gamma.data()[ch] * inv_std[ch];
            }
        }
    }
    Ok((
        Tensor::new(g.shape().to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 - 3.5));
        let w = tape.param(ParamId(0), Tensor::from_fn(&[1, 2, 2, 2], |i| 0.1 * i as f32));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap(), tape.value(x));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_absent() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(1), Tensor::scalar(2.0));
        let _b = tape.param(ParamId(2), Tensor::scalar(3.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(ParamId(1)).is_some());
        assert!(g.param(ParamId(2)).is_none());
    }

    #[test]
    fn same_param_registered_twice_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(7), Tensor::scalar(2.0));
        let b = tape.param(ParamId(7), Tensor::scalar(2.0));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(7)).unwrap().data(), &[2.0]);
    }
}
