//! Grouped 2-D convolution.

use crate::error::{Error, Result};
use crate::nn::counter::{cost, MacCounter};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    /// `C_out x (C_in / groups) x p x p`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

/// Output extent of a sliding window; `None` when the window does not fit.
pub fn window_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, stride: usize, padding: usize, groups: usize) -> Self {
        Self { weight, bias: None, stride, padding, groups }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Validate against an input of `c_in` channels and return `(H_o, W_o)`.
    pub fn check(&self, c_in: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        let ws = self.weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] == 0 {
            return Err(Error::Shape(format!("conv weight must be O x I x p x p, got {ws:?}")));
        }
        if self.groups == 0 || self.stride == 0 {
            return Err(Error::Shape("conv groups and stride must be positive".into()));
        }
        let c_out = ws[0];
        if c_in % self.groups != 0 || c_out % self.groups != 0 {
            return Err(Error::Divisibility(format!(
                "channels in={c_in} out={c_out} not divisible by groups={}",
                self.groups
            )));
        }
        if ws[1] * self.groups != c_in {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} with {} groups expects {} input channels, got {c_in}",
                self.groups,
                ws[1] * self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [c_out] {
                return Err(Error::Shape(format!("conv bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        let p = ws[2];
        match (
            window_out(h, p, self.stride, self.padding),
            window_out(w, p, self.stride, self.padding),
        ) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
            _ => Err(Error::KernelTooLarge),
        }
    }

    /// Footnote MAC count for one sample: `C_in * C_out * p^2 * H_o * W_o / groups`.
    pub fn macs_per_sample(&self, ho: usize, wo: usize) -> u64 {
        let p = self.kernel() as u64;
        self.in_channels() as u64 * self.out_channels() as u64 * p * p * ho as u64 * wo as u64
            / self.groups as u64
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, stride: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must land in [0, input)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Geometry shared by the forward and backward passes.
struct Plan {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    p: usize,
    s: usize,
    pad: usize,
    groups: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Plan {
    fn new<T: Element>(x: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Self> {
        let (n, c_in, h, w) = x.dims4("conv2d input")?;
        let (ho, wo) = params.check(c_in, h, w)?;
        let p = params.kernel();
        let (s, pad) = (params.stride, params.padding);
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out: params.out_channels(),
            ho,
            wo,
            p,
            s,
            pad,
            groups: params.groups,
            rows: (0..p).map(|k| tap_range(k, s, pad, h, ho)).collect(),
            cols: (0..p).map(|k| tap_range(k, s, pad, w, wo)).collect(),
        })
    }

    fn icpg(&self) -> usize {
        self.c_in / self.groups
    }

    fn ocpg(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the unfolded input (`icpg * p * p`).
    fn kdim(&self) -> usize {
        self.icpg() * self.p * self.p
    }

    /// A 1x1 stride-1 unpadded convolution reads its input as is.
    fn direct(&self) -> bool {
        self.p == 1 && self.s == 1 && self.pad == 0
    }

    /// Offset of group `g` of sample `b` in the input.
    fn input_offset(&self, b: usize, g: usize) -> usize {
        (b * self.c_in + g * self.icpg()) * self.h * self.w
    }

    /// Unfold one group of one sample into a `kdim x (ho * wo)` matrix.
    fn im2col<T: Element>(&self, src: &[T], out: &mut [T]) {
        let (p, hw) = (self.p, self.ho * self.wo);
        for icl in 0..self.icpg() {
            let plane = &src[icl * self.h * self.w..(icl + 1) * self.h * self.w];
            for kh in 0..p {
                let (oh0, oh1) = self.rows[kh];
                for kw in 0..p {
                    let (ow0, ow1) = self.cols[kw];
                    let r = (icl * p + kh) * p + kw;
                    let dst = &mut out[r * hw..(r + 1) * hw];
                    dst.fill(T::zero());
                    for oh in oh0..oh1 {
                        let srow = &plane[(oh * self.s + kh - self.pad) * self.w..][..self.w];
                        let drow = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if self.s == 1 {
                            let start = ow0 + kw - self.pad;
                            drow[ow0..ow1].copy_from_slice(&srow[start..start + (ow1 - ow0)]);
                        } else {
                            for ow in ow0..ow1 {
                                drow[ow] = srow[ow * self.s + kw - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: accumulate unfolded gradients into `dst`.
    fn col2im<T: Element>(&self, cols: &[T], dst: &mut [T]) {
        let (p, hw) = (self.p, self.ho * self.wo);
        for icl in 0..self.icpg() {
            let plane = &mut dst[icl * self.h * self.w..(icl + 1) * self.h * self.w];
            for kh in 0..p {
                let (oh0, oh1) = self.rows[kh];
                for kw in 0..p {
                    let (ow0, ow1) = self.cols[kw];
                    let r = (icl * p + kh) * p + kw;
                    let src = &cols[r * hw..(r + 1) * hw];
                    for oh in oh0..oh1 {
                        let drow = &mut plane[(oh * self.s + kh - self.pad) * self.w..][..self.w];
                        let srow = &src[oh * self.wo..(oh + 1) * self.wo];
                        if self.s == 1 {
                            let start = ow0 + kw - self.pad;
                            for (d, &v) in drow[start..start + (ow1 - ow0)].iter_mut().zip(&srow[ow0..ow1]) {
                                *d = *d + v;
                            }
                        } else {
                            for ow in ow0..ow1 {
                                let iw = ow * self.s + kw - self.pad;
                                drow[iw] = drow[iw] + srow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let tail = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    params: &Conv2dParams<T>,
    counter: &mut MacCounter,
) -> Result<Tensor<T>> {
    let pl = Plan::new(x, params)?;
    let (hw, kdim, ocpg) = (pl.ho * pl.wo, pl.kdim(), pl.ocpg());
    let wd = params.weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); pl.n * pl.c_out * hw];
    let mut buf = if pl.direct() { Vec::new() } else { vec![T::zero(); kdim * hw] };

    for b in 0..pl.n {
        for g in 0..pl.groups {
            let src = &xd[pl.input_offset(b, g)..][..pl.icpg() * pl.h * pl.w];
            let cols: &[T] = if pl.direct() {
                src
            } else {
                pl.im2col(src, &mut buf);
                &buf
            };
            for oc in g * ocpg..(g + 1) * ocpg {
                let dst = &mut out[(b * pl.c_out + oc) * hw..][..hw];
                for (r, &wv) in wd[oc * kdim..(oc + 1) * kdim].iter().enumerate() {
                    axpy(dst, wv, &cols[r * hw..(r + 1) * hw]);
                }
                if let Some(bias) = &params.bias {
                    let bv = bias.data()[oc];
                    for d in dst.iter_mut() {
                        *d = *d + bv;
                    }
                }
            }
        }
    }

    counter.conv_macs += pl.n as u64 * params.macs_per_sample(pl.ho, pl.wo);
    if params.bias.is_some() {
        counter.aux_ops += cost::BIAS * (pl.n * pl.c_out * hw) as u64;
    }
    Tensor::new(vec![pl.n, pl.c_out, pl.ho, pl.wo], out)
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    params: &Conv2dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let pl = Plan::new(x, params)?;
    let expected = [pl.n, pl.c_out, pl.ho, pl.wo];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv2d_backward: grad_out {:?}, forward output is {expected:?}",
            grad_out.shape()
        )));
    }
    let (hw, kdim, ocpg) = (pl.ho * pl.wo, pl.kdim(), pl.ocpg());
    let wd = params.weight.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); params.weight.len()];
    let mut buf = if pl.direct() { Vec::new() } else { vec![T::zero(); kdim * hw] };
    let mut gcols = vec![T::zero(); kdim * hw];

    for b in 0..pl.n {
        for g in 0..pl.groups {
            let off = pl.input_offset(b, g);
            let len = pl.icpg() * pl.h * pl.w;
            let cols: &[T] = if pl.direct() {
                &xd[off..off + len]
            } else {
                pl.im2col(&xd[off..off + len], &mut buf);
                &buf
            };
            gcols.fill(T::zero());
            for oc in g * ocpg..(g + 1) * ocpg {
                let go = &gd[(b * pl.c_out + oc) * hw..][..hw];
                for r in 0..kdim {
                    let idx = oc * kdim + r;
                    gw[idx] = gw[idx] + dot(go, &cols[r * hw..(r + 1) * hw]);
                    axpy(&mut gcols[r * hw..(r + 1) * hw], wd[idx], go);
                }
            }
            let dst = &mut gx[off..off + len];
            if pl.direct() {
                for (d, &v) in dst.iter_mut().zip(&gcols) {
                    *d = *d + v;
                }
            } else {
                pl.col2im(&gcols, dst);
            }
        }
    }

    let grad_bias = params.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); pl.c_out];
        for b in 0..pl.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let go = &gd[(b * pl.c_out + oc) * hw..(b * pl.c_out + oc + 1) * hw];
                *acc = go.iter().fold(*acc, |a, &v| a + v);
            }
        }
        Tensor::from_vec(gb)
    });

    Ok(Conv2dGrads {
        grad_x: Tensor::new(x.shape().to_vec(), gx)?,
        grad_weight: Tensor::new(params.weight.shape().to_vec(), gw)?,
        grad_bias,
    })
}
