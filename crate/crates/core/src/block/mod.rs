//! Gated ResNeXt bottleneck block.
//!
//! ```text
//! x ─┬─ conv-reduce 1x1 ─ bn ─ relu ─ conv-conv 3x3 (E groups, stride s) ─ bn ─ relu
//!    │      ─ scale group e by g_norm[e] ─ conv-expand 1x1 ─ bn ─┐
//!    └─ shortcut (identity, or 1x1 stride-s conv + bn) ──────────(+)─ relu ─ y
//! ```
//!
//! Three executions share the parameters:
//!
//! * [`block_forward_dense`] runs every path and scales each by its gate.
//! * [`block_forward_sparse`] gathers, per sample, the channels of the top-k
//!   paths together with the matching conv rows/columns and runs a `k`-group
//!   convolution on them. Unselected paths cost nothing.
//! * [`block_forward_masked`] is the reference for the sparse pass: it runs
//!   every path densely, zeroes the gates outside the selected set (no
//!   renormalization) and keeps unexecuted planes out of the batch statistics.
//!
//! In training mode a path's batch-norm statistics are taken over the samples
//! that executed it, so sparse and masked executions agree sample by sample.

mod dense;
mod sparse;

use crate::error::{Error, Result};
use crate::gate::{
    balance_loss_grad, controller_backward, controller_forward, ControllerCache, GateControllerGrads,
    GateControllerParams, GateDecision,
};
use crate::nn::batchnorm::{batchnorm2d_backward, batchnorm2d_forward, BnCache, BnMode};
use crate::nn::conv::{conv2d_backward, conv2d_forward};
use crate::nn::counter::{cost, MacCounter};
use crate::nn::layers::{relu_backward, relu_forward};
use crate::nn::{BatchNorm2dParams, Conv2dParams};
use crate::tensor::{Element, Tensor};

pub use dense::{block_forward_dense, block_forward_masked};
pub use sparse::block_forward_sparse;

#[derive(Debug, Clone, PartialEq)]
pub struct Shortcut<T> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNorm2dParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedBlockParams<T> {
    /// `C -> E*d`, 1x1.
    pub conv_reduce: Conv2dParams<T>,
    pub bn_reduce: BatchNorm2dParams<T>,
    /// `E*d -> E*d`, 3x3, `groups = E`, carries the block stride.
    pub conv_conv: Conv2dParams<T>,
    pub bn_mid: BatchNorm2dParams<T>,
    /// `E*d -> C_out`, 1x1.
    pub conv_expand: Conv2dParams<T>,
    pub bn_expand: BatchNorm2dParams<T>,
    pub shortcut: Option<Shortcut<T>>,
    /// `None` for an ungated block: every path runs with weight one.
    pub controller: Option<GateControllerParams<T>>,
    pub cardinality: usize,
    pub group_width: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Dense,
    Sparse,
}

impl<T: Element> GatedBlockParams<T> {
    pub fn in_channels(&self) -> usize {
        self.conv_reduce.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv_expand.out_channels()
    }

    pub fn mid_channels(&self) -> usize {
        self.cardinality * self.group_width
    }

    pub fn stride(&self) -> usize {
        self.conv_conv.stride
    }

    pub fn is_gated(&self) -> bool {
        self.controller.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (e, d) = (self.cardinality, self.group_width);
        if e == 0 || d == 0 {
            return Err(Error::Shape("block cardinality and group width must be positive".into()));
        }
        if self.k == 0 || self.k > e {
            return Err(Error::KOutOfRange { k: self.k, cardinality: e });
        }
        let mid = e * d;
        let ok = self.conv_reduce.out_channels() == mid
            && self.conv_reduce.groups == 1
            && self.conv_reduce.kernel() == 1
            && self.conv_conv.groups == e
            && self.conv_conv.out_channels() == mid
            && self.conv_conv.in_channels() == mid
            && self.conv_expand.in_channels() == mid
            && self.conv_expand.groups == 1
            && self.conv_expand.kernel() == 1
            && self.bn_reduce.channels() == mid
            && self.bn_mid.channels() == mid
            && self.bn_expand.channels() == self.out_channels();
        if !ok {
            return Err(Error::Shape(format!("inconsistent gated block layout (E={e}, d={d})")));
        }
        if self.shortcut.is_none() && (self.in_channels() != self.out_channels() || self.stride() != 1) {
            return Err(Error::Shape("identity shortcut needs C_in == C_out and stride 1".into()));
        }
        if let Some(c) = &self.controller {
            c.validate()?;
            if c.experts() != e || c.feature_dim() != self.in_channels() {
                return Err(Error::Shape("gate controller does not match block".into()));
            }
        }
        Ok(())
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_reduce.mode = mode;
        self.bn_mid.mode = mode;
        self.bn_expand.mode = mode;
        if let Some(s) = &mut self.shortcut {
            s.bn.mode = mode;
        }
    }

    /// Channels owned by expert `e`.
    pub fn group_channels(&self, e: usize) -> std::ops::Range<usize> {
        e * self.group_width..(e + 1) * self.group_width
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// averages. In sparse mode only channels of executed paths move.
    pub fn update_running_stats(&mut self, cache: &BlockCache<T>) {
        self.bn_reduce.update_running(&cache.bn_reduce);
        self.bn_mid.update_running(&cache.bn_mid);
        self.bn_expand.update_running(&cache.tail.bn_expand);
        if let (Some(s), Some(c)) = (&mut self.shortcut, &cache.tail.shortcut_bn) {
            s.bn.update_running(c);
        }
    }

    /// Trainable tensors in a fixed order (matches [`BlockGrads::tensors`]).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.conv_reduce.weight,
            &mut self.bn_reduce.gamma,
            &mut self.bn_reduce.beta,
            &mut self.conv_conv.weight,
            &mut self.bn_mid.gamma,
            &mut self.bn_mid.beta,
            &mut self.conv_expand.weight,
            &mut self.bn_expand.gamma,
            &mut self.bn_expand.beta,
        ];
        if let Some(s) = &mut self.shortcut {
            v.push(&mut s.conv.weight);
            v.push(&mut s.bn.gamma);
            v.push(&mut s.bn.beta);
        }
        if let Some(c) = &mut self.controller {
            v.extend(c.tensors_mut());
        }
        v
    }

    /// Every tensor including running statistics, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = Vec::new();
        v.push(("conv_reduce.weight".into(), &self.conv_reduce.weight));
        push_bn(&mut v, "bn_reduce", &self.bn_reduce);
        v.push(("conv_conv.weight".into(), &self.conv_conv.weight));
        push_bn(&mut v, "bn_mid", &self.bn_mid);
        v.push(("conv_expand.weight".into(), &self.conv_expand.weight));
        push_bn(&mut v, "bn_expand", &self.bn_expand);
        if let Some(s) = &self.shortcut {
            v.push(("shortcut.weight".into(), &s.conv.weight));
            push_bn(&mut v, "shortcut.bn", &s.bn);
        }
        if let Some(c) = &self.controller {
            for (n, t) in c.tensors() {
                v.push((format!("gate.{n}"), t));
            }
        }
        v
    }
}

pub(crate) fn push_bn<'a, T: Element>(v: &mut Vec<(String, &'a Tensor<T>)>, name: &str, p: &'a BatchNorm2dParams<T>) {
    v.push((format!("{name}.gamma"), &p.gamma));
    v.push((format!("{name}.beta"), &p.beta));
    v.push((format!("{name}.running_mean"), &p.running_mean));
    v.push((format!("{name}.running_var"), &p.running_var));
}

#[derive(Debug, Clone)]
pub struct BlockGrads<T> {
    pub grad_x: Tensor<T>,
    /// Gradient on the question batch (gated blocks only).
    pub grad_q: Option<Tensor<T>>,
    pub conv_reduce: Tensor<T>,
    pub bn_reduce_gamma: Tensor<T>,
    pub bn_reduce_beta: Tensor<T>,
    pub conv_conv: Tensor<T>,
    pub bn_mid_gamma: Tensor<T>,
    pub bn_mid_beta: Tensor<T>,
    pub conv_expand: Tensor<T>,
    pub bn_expand_gamma: Tensor<T>,
    pub bn_expand_beta: Tensor<T>,
    pub shortcut: Option<[Tensor<T>; 3]>,
    pub controller: Option<GateControllerGrads<T>>,
}

impl<T: Element> BlockGrads<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![
            &self.conv_reduce,
            &self.bn_reduce_gamma,
            &self.bn_reduce_beta,
            &self.conv_conv,
            &self.bn_mid_gamma,
            &self.bn_mid_beta,
            &self.conv_expand,
            &self.bn_expand_gamma,
            &self.bn_expand_beta,
        ];
        if let Some(s) = &self.shortcut {
            v.extend(s.iter());
        }
        if let Some(c) = &self.controller {
            v.extend(c.tensors());
        }
        v
    }
}

/// Residual tail: `relu(bn_expand(z3) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct TailCache<T> {
    pub bn_expand: BnCache<T>,
    pub shortcut_bn: Option<BnCache<T>>,
    pub pre_relu: Tensor<T>,
}

#[derive(Debug, Clone)]
pub(crate) enum PathCache<T> {
    Dense(dense::DenseCache<T>),
    Sparse(sparse::SparseCache<T>),
}

/// Everything [`block_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub(crate) x: Tensor<T>,
    pub(crate) controller: Vec<ControllerCache<T>>,
    pub(crate) decisions: Vec<GateDecision<T>>,
    /// Gate multiplier applied to each path of each sample.
    pub(crate) multipliers: Vec<Vec<T>>,
    /// Whether the path's gate gradient reaches the controller.
    pub(crate) gate_live: Vec<Vec<bool>>,
    pub(crate) bn_reduce: BnCache<T>,
    pub(crate) bn_mid: BnCache<T>,
    pub(crate) tail: TailCache<T>,
    pub(crate) path: PathCache<T>,
}

impl<T: Element> BlockCache<T> {
    pub fn decisions(&self) -> &[GateDecision<T>] {
        &self.decisions
    }

    pub fn mode(&self) -> ExecMode {
        match self.path {
            PathCache::Dense(_) => ExecMode::Dense,
            PathCache::Sparse(_) => ExecMode::Sparse,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    pub y: Tensor<T>,
    pub decisions: Vec<GateDecision<T>>,
    pub cache: BlockCache<T>,
}

/// Sample `n` of an NCHW batch as `D x F` region features (`D = H*W`).
pub fn region_features<T: Element>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4("region features")?;
    let d = h * w;
    let base = n * c * d;
    let src = &x.data()[base..base + c * d];
    Ok(Tensor::from_fn(&[d, c], |i| src[(i % c) * d + i / c]))
}

pub(crate) struct GateOutput<T> {
    pub decisions: Vec<GateDecision<T>>,
    pub caches: Vec<ControllerCache<T>>,
}

pub(crate) fn run_controller<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    counter: &mut MacCounter,
) -> Result<Option<GateOutput<T>>> {
    let Some(ctrl) = &params.controller else { return Ok(None) };
    let q = q.ok_or_else(|| Error::Shape("gated block needs a question batch".into()))?;
    let n = x.shape()[0];
    let qd = ctrl.question_dim();
    if q.shape() != [n, qd] {
        return Err(Error::Shape(format!("question batch {:?}, expected [{n}, {qd}]", q.shape())));
    }
    let mut decisions = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for s in 0..n {
        let v_i = region_features(x, s)?;
        let (dec, cache) = controller_forward(&v_i, &q.data()[s * qd..(s + 1) * qd], ctrl, params.k, counter)?;
        decisions.push(dec);
        caches.push(cache);
    }
    Ok(Some(GateOutput { decisions, caches }))
}

pub(crate) fn check_input<T: Element>(x: &Tensor<T>, params: &GatedBlockParams<T>) -> Result<()> {
    params.validate()?;
    let (_, c, _, _) = x.dims4("block input")?;
    if c != params.in_channels() {
        return Err(Error::Shape(format!("block expects {} channels, got {c}", params.in_channels())));
    }
    Ok(())
}

pub(crate) fn tail_forward<T: Element>(
    z3: &Tensor<T>,
    x: &Tensor<T>,
    params: &GatedBlockParams<T>,
    counter: &mut MacCounter,
) -> Result<(Tensor<T>, TailCache<T>)> {
    let (b3, bn_expand) = batchnorm2d_forward(z3, &params.bn_expand, counter)?;
    let (sc, shortcut_bn) = match &params.shortcut {
        Some(s) => {
            let z = conv2d_forward(x, &s.conv, counter)?;
            let (b, c) = batchnorm2d_forward(&z, &s.bn, counter)?;
            (b, Some(c))
        }
        None => (x.clone(), None),
    };
    let pre_relu = b3.add(&sc)?;
    counter.aux_ops += cost::RESIDUAL_ADD * pre_relu.len() as u64;
    let y = relu_forward(&pre_relu, counter);
    Ok((y, TailCache { bn_expand, shortcut_bn, pre_relu }))
}

pub(crate) struct TailGrads<T> {
    pub grad_z3: Tensor<T>,
    pub grad_x: Tensor<T>,
    pub bn_expand: [Tensor<T>; 2],
    pub shortcut: Option<[Tensor<T>; 3]>,
}

pub(crate) fn tail_backward<T: Element>(
    cache: &TailCache<T>,
    x: &Tensor<T>,
    params: &GatedBlockParams<T>,
    grad_y: &Tensor<T>,
) -> Result<TailGrads<T>> {
    let ds = relu_backward(&cache.pre_relu, grad_y)?;
    let g3 = batchnorm2d_backward(&cache.bn_expand, &params.bn_expand, &ds)?;
    let (grad_x, shortcut) = match (&params.shortcut, &cache.shortcut_bn) {
        (Some(s), Some(c)) => {
            let gb = batchnorm2d_backward(c, &s.bn, &ds)?;
            let gc = conv2d_backward(x, &s.conv, &gb.grad_x)?;
            (gc.grad_x, Some([gc.grad_weight, gb.grad_gamma, gb.grad_beta]))
        }
        _ => (ds, None),
    };
    Ok(TailGrads { grad_z3: g3.grad_x, grad_x, bn_expand: [g3.grad_gamma, g3.grad_beta], shortcut })
}

/// Multiply channel group `g` of sample `n` by `mult[n][g]` (groups of
/// `width` consecutive channels).
pub(crate) fn scale_groups<T: Element>(
    a: &Tensor<T>,
    mult: &[Vec<T>],
    width: usize,
    counter: &mut MacCounter,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4("gate scaling")?;
    let hw = h * w;
    let mut out = a.clone();
    let od = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let m = mult[s][ch / width];
            let base = (s * c + ch) * hw;
            for v in &mut od[base..base + hw] {
                *v = *v * m;
            }
        }
    }
    counter.aux_ops += cost::GATE_SCALE * a.len() as u64;
    Ok(out)
}

/// Backward of [`scale_groups`]: returns the gradient on `a` and on each
/// multiplier.
pub(crate) fn scale_groups_backward<T: Element>(
    a: &Tensor<T>,
    grad: &Tensor<T>,
    mult: &[Vec<T>],
    width: usize,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    let (n, c, h, w) = a.dims4("gate scaling")?;
    let hw = h * w;
    let mut da = grad.clone();
    let mut dm: Vec<Vec<T>> = mult.iter().map(|r| vec![T::zero(); r.len()]).collect();
    let (ad, gd) = (a.data(), grad.data());
    let dd = da.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let g = ch / width;
            let m = mult[s][g];
            let base = (s * c + ch) * hw;
            let mut acc = T::zero();
            for i in base..base + hw {
                acc = acc + gd[i] * ad[i];
                dd[i] = gd[i] * m;
            }
            dm[s][g] = dm[s][g] + acc;
        }
    }
    Ok((da, dm))
}

/// Upstream gradient on every sample's normalized gates: the path gradients
/// that reached live gates, plus `balance_weight` times the balance-loss
/// gradient on the full (unmasked) gates.
pub(crate) fn gate_gradients<T: Element>(
    cache: &BlockCache<T>,
    path_grads: &[Vec<T>],
    balance_weight: T,
) -> Result<Vec<Vec<T>>> {
    let mut g: Vec<Vec<T>> = path_grads
        .iter()
        .zip(&cache.gate_live)
        .map(|(row, live)| row.iter().zip(live).map(|(&v, &l)| if l { v } else { T::zero() }).collect())
        .collect();
    if balance_weight != T::zero() {
        let rows: Vec<Vec<T>> = cache.decisions.iter().map(|d| d.g_norm.clone()).collect();
        let bl = balance_loss_grad(&rows)?;
        for (row, brow) in g.iter_mut().zip(bl) {
            for (a, b) in row.iter_mut().zip(brow) {
                *a = *a + balance_weight * b;
            }
        }
    }
    Ok(g)
}

/// Backpropagate controller gradients; adds region-feature gradients into
/// `grad_x`. Returns parameter gradients and the question gradient.
pub(crate) fn controller_grads<T: Element>(
    cache: &BlockCache<T>,
    params: &GatedBlockParams<T>,
    grad_gates: &[Vec<T>],
    grad_x: &mut Tensor<T>,
) -> Result<Option<(GateControllerGrads<T>, Tensor<T>)>> {
    let Some(ctrl) = &params.controller else { return Ok(None) };
    let (n, c, h, w) = grad_x.dims4("grad_x")?;
    let d = h * w;
    let qd = ctrl.question_dim();
    let mut grads = ctrl.zeros_like();
    let mut gq = vec![T::zero(); n * qd];
    for s in 0..n {
        let (dvi, dq) =
            controller_backward(&cache.controller[s], &cache.decisions[s], ctrl, &grad_gates[s], &mut grads)?;
        let dst = &mut grad_x.data_mut()[s * c * d..(s + 1) * c * d];
        let src = dvi.data();
        for region in 0..d {
            for ch in 0..c {
                dst[ch * d + region] = dst[ch * d + region] + src[region * c + ch];
            }
        }
        gq[s * qd..(s + 1) * qd].copy_from_slice(&dq);
    }
    Ok(Some((grads, Tensor::new(vec![n, qd], gq)?)))
}

/// Gradients of a block given the upstream gradient on its output.
/// `balance_weight` adds that multiple of the balance loss on this block's
/// gates to the objective.
pub fn block_backward<T: Element>(
    params: &GatedBlockParams<T>,
    cache: &BlockCache<T>,
    grad_y: &Tensor<T>,
    balance_weight: T,
) -> Result<BlockGrads<T>> {
    match &cache.path {
        PathCache::Dense(d) => dense::backward(params, cache, d, grad_y, balance_weight),
        PathCache::Sparse(s) => sparse::backward(params, cache, s, grad_y, balance_weight),
    }
}

/// Forward in the requested execution mode.
pub fn block_forward<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    mode: ExecMode,
    counter: &mut MacCounter,
) -> Result<BlockOutput<T>> {
    match mode {
        ExecMode::Dense => block_forward_dense(x, q, params, counter),
        ExecMode::Sparse => block_forward_sparse(x, q, params, counter),
    }
}

#[cfg(test)]
mod tests;
