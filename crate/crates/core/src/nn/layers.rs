//! Elementwise activations, pooling, softmax and fully connected layers.

use crate::error::{Error, Result};
use crate::nn::conv::window_out;
use crate::nn::counter::{cost, MacCounter};
use crate::tensor::{Element, Tensor};

pub fn relu_forward<T: Element>(x: &Tensor<T>, counter: &mut MacCounter) -> Tensor<T> {
    counter.aux_ops += cost::RELU * x.len() as u64;
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given its *input* `x`.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape(format!("relu_backward: {:?} vs {:?}", x.shape(), grad_out.shape())));
    }
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )?)
}

pub fn tanh_forward<T: Element>(x: &Tensor<T>, counter: &mut MacCounter) -> Tensor<T> {
    counter.aux_ops += cost::TANH * x.len() as u64;
    x.map(|v| v.tanh())
}

/// Gradient of tanh given its *output* `y`.
pub fn tanh_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::Shape(format!("tanh_backward: {:?} vs {:?}", y.shape(), grad_out.shape())));
    }
    Ok(Tensor::new(
        y.shape().to_vec(),
        y.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * (T::one() - v * v))
            .collect(),
    )?)
}

/// Max-shifted softmax of a slice.
pub fn softmax_slice<T: Element>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::EmptyAxis);
    }
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &v| a + v);
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `dx = y * (dy - <dy, y>)` for one softmax row.
pub fn softmax_slice_backward<T: Element>(y: &[T], dy: &[T]) -> Vec<T> {
    let dot = y.iter().zip(dy).fold(T::zero(), |a, (&p, &g)| a + p * g);
    y.iter().zip(dy).map(|(&p, &g)| p * (g - dot)).collect()
}

/// Softmax along the last axis.
pub fn softmax_forward<T: Element>(x: &Tensor<T>, counter: &mut MacCounter) -> Result<Tensor<T>> {
    let last = *x.shape().last().ok_or(Error::EmptyAxis)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(last) {
        out.extend(softmax_slice(row)?);
    }
    counter.aux_ops += cost::SOFTMAX * x.len() as u64;
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::Shape(format!("softmax_backward: {:?} vs {:?}", y.shape(), grad_out.shape())));
    }
    let last = *y.shape().last().ok_or(Error::EmptyAxis)?;
    let out = y
        .data()
        .chunks(last)
        .zip(grad_out.data().chunks(last))
        .flat_map(|(p, g)| softmax_slice_backward(p, g))
        .collect();
    Tensor::new(y.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    /// 3x3 window, stride 2, padding 1.
    pub const RESNET: PoolSpec = PoolSpec { kernel: 3, stride: 2, padding: 1 };

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.padding >= self.kernel {
            return Err(Error::Shape("pool padding must be smaller than the window".into()));
        }
        match (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::KernelTooLarge),
        }
    }
}

/// Max pooling; padded positions never win. Returns the flat input offset of
/// each output's winner for the backward pass.
pub fn maxpool2d_forward<T: Element>(
    x: &Tensor<T>,
    spec: PoolSpec,
    counter: &mut MacCounter,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool input")?;
    let (ho, wo) = spec.out_size(h, w)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for kh in 0..spec.kernel {
                    let ih = (oh * spec.stride + kh) as isize - spec.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..spec.kernel {
                        let iw = (ow * spec.stride + kw) as isize - spec.padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let i = base + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    counter.aux_ops += (n * c * ho * wo * spec.kernel * spec.kernel) as u64;
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("maxpool_backward: grad_out does not match forward output".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + g;
    }
    Ok(gx)
}

/// `N x C x H x W -> N x C`.
pub fn global_avg_pool_forward<T: Element>(x: &Tensor<T>, counter: &mut MacCounter) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool input")?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    counter.aux_ops += cost::AVG_POOL * x.len() as u64;
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    if grad_out.len() * hw != input_shape.iter().product::<usize>() {
        return Err(Error::Shape("global_avg_pool_backward: shape mismatch".into()));
    }
    let inv = T::one() / T::from_f64(hw as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `out x in`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

impl<T: Element> LinearParams<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            &[n, d] if d == self.in_dim() => Ok(n),
            s => Err(Error::Shape(format!(
                "linear: input {s:?} for weight {:?}",
                self.weight.shape()
            ))),
        }
    }
}

/// `y = x W^T + b` for `x` of shape `N x in`.
pub fn linear_forward<T: Element>(
    x: &Tensor<T>,
    params: &LinearParams<T>,
    counter: &mut MacCounter,
) -> Result<Tensor<T>> {
    let n = params.check(x)?;
    let (i, o) = (params.in_dim(), params.out_dim());
    let wd = params.weight.data();
    let mut out = Vec::with_capacity(n * o);
    for row in x.data().chunks(i) {
        for r in 0..o {
            let wr = &wd[r * i..(r + 1) * i];
            let mut acc = wr.iter().zip(row).fold(T::zero(), |a, (&w, &v)| a + w * v);
            if let Some(b) = &params.bias {
                acc = acc + b.data()[r];
            }
            out.push(acc);
        }
    }
    counter.linear_macs += (n * i * o) as u64;
    if params.bias.is_some() {
        counter.aux_ops += cost::BIAS * (n * o) as u64;
    }
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    params: &LinearParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let n = params.check(x)?;
    let (i, o) = (params.in_dim(), params.out_dim());
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("linear_backward: grad_out {:?}", grad_out.shape())));
    }
    let wd = params.weight.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); n * i];
    let mut gw = vec![T::zero(); o * i];
    for s in 0..n {
        for r in 0..o {
            let g = gd[s * o + r];
            for c in 0..i {
                gx[s * i + c] = gx[s * i + c] + g * wd[r * i + c];
                gw[r * i + c] = gw[r * i + c] + g * xd[s * i + c];
            }
        }
    }
    let grad_bias = params.bias.as_ref().map(|_| {
        Tensor::from_vec((0..o).map(|r| (0..n).fold(T::zero(), |a, s| a + gd[s * o + r])).collect())
    });
    Ok(LinearGrads {
        grad_x: Tensor::new(vec![n, i], gx)?,
        grad_weight: Tensor::new(vec![o, i], gw)?,
        grad_bias,
    })
}
