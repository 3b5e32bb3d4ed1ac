use super::{
    check_input, controller_grads, gate_gradients, run_controller, scale_groups, scale_groups_backward,
    tail_backward, tail_forward, BlockCache, BlockGrads, BlockOutput, GatedBlockParams, PathCache,
};
use crate::error::Result;
use crate::nn::batchnorm::{batchnorm2d_backward, batchnorm2d_forward_mapped, ChannelMap};
use crate::nn::conv::{conv2d_backward, conv2d_forward};
use crate::nn::counter::MacCounter;
use crate::nn::layers::{relu_backward, relu_forward};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub(crate) struct DenseCache<T> {
    b1: Tensor<T>,
    a1: Tensor<T>,
    b2: Tensor<T>,
    a2: Tensor<T>,
    t: Tensor<T>,
    gated: bool,
}

/// Every path executed, each scaled by its normalized gate.
pub fn block_forward_dense<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    counter: &mut MacCounter,
) -> Result<BlockOutput<T>> {
    forward(x, q, params, false, counter)
}

/// Reference execution for the sparse pass: dense computation with gates
/// outside each sample's top-k set zeroed and those paths kept out of the
/// batch statistics.
pub fn block_forward_masked<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    counter: &mut MacCounter,
) -> Result<BlockOutput<T>> {
    forward(x, q, params, true, counter)
}

fn forward<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    masked: bool,
    counter: &mut MacCounter,
) -> Result<BlockOutput<T>> {
    check_input(x, params)?;
    let n = x.shape()[0];
    let (e, d) = (params.cardinality, params.group_width);
    let gates = run_controller(x, q, params, counter)?;

    let keep: Vec<Vec<bool>> = match (&gates, masked) {
        (Some(g), true) => g
            .decisions
            .iter()
            .map(|dec| {
                let mut row = vec![false; e];
                for &s in &dec.selected {
                    row[s] = true;
                }
                row
            })
            .collect(),
        _ => vec![vec![true; e]; n],
    };
    let multipliers: Vec<Vec<T>> = match &gates {
        Some(g) => g
            .decisions
            .iter()
            .zip(&keep)
            .map(|(dec, k)| dec.g_norm.iter().zip(k).map(|(&v, &on)| if on { v } else { T::zero() }).collect())
            .collect(),
        None => vec![vec![T::one(); e]; n],
    };
    let keep_ch: Vec<Vec<bool>> = keep.iter().map(|row| (0..e * d).map(|c| row[c / d]).collect()).collect();
    let map = ChannelMap::masked(&keep_ch);

    let z1 = conv2d_forward(x, &params.conv_reduce, counter)?;
    let (b1, bn_reduce) = batchnorm2d_forward_mapped(&z1, &params.bn_reduce, &map, counter)?;
    let a1 = relu_forward(&b1, counter);
    let z2 = conv2d_forward(&a1, &params.conv_conv, counter)?;
    let (b2, bn_mid) = batchnorm2d_forward_mapped(&z2, &params.bn_mid, &map, counter)?;
    let a2 = relu_forward(&b2, counter);
    let gated = gates.is_some();
    let t = if gated { scale_groups(&a2, &multipliers, d, counter)? } else { a2.clone() };
    let z3 = conv2d_forward(&t, &params.conv_expand, counter)?;
    let (y, tail) = tail_forward(&z3, x, params, counter)?;

    let (decisions, controller) = match gates {
        Some(g) => (g.decisions, g.caches),
        None => (Vec::new(), Vec::new()),
    };
    let cache = BlockCache {
        x: x.clone(),
        controller,
        decisions: decisions.clone(),
        multipliers,
        gate_live: keep,
        bn_reduce,
        bn_mid,
        tail,
        path: PathCache::Dense(DenseCache { b1, a1, b2, a2, t, gated }),
    };
    Ok(BlockOutput { y, decisions, cache })
}

pub(super) fn backward<T: Element>(
    params: &GatedBlockParams<T>,
    cache: &BlockCache<T>,
    dc: &DenseCache<T>,
    grad_y: &Tensor<T>,
    balance_weight: T,
) -> Result<BlockGrads<T>> {
    let x = &cache.x;
    let tail = tail_backward(&cache.tail, x, params, grad_y)?;
    let ge = conv2d_backward(&dc.t, &params.conv_expand, &tail.grad_z3)?;
    let (da2, dmult) = if dc.gated {
        scale_groups_backward(&dc.a2, &ge.grad_x, &cache.multipliers, params.group_width)?
    } else {
        (ge.grad_x, Vec::new())
    };
    let db2 = relu_backward(&dc.b2, &da2)?;
    let g2 = batchnorm2d_backward(&cache.bn_mid, &params.bn_mid, &db2)?;
    let gc = conv2d_backward(&dc.a1, &params.conv_conv, &g2.grad_x)?;
    let db1 = relu_backward(&dc.b1, &gc.grad_x)?;
    let g1 = batchnorm2d_backward(&cache.bn_reduce, &params.bn_reduce, &db1)?;
    let gr = conv2d_backward(x, &params.conv_reduce, &g1.grad_x)?;

    let mut grad_x = gr.grad_x;
    grad_x.add_assign(&tail.grad_x)?;
    let (controller, grad_q) = if dc.gated {
        let gg = gate_gradients(cache, &dmult, balance_weight)?;
        match controller_grads(cache, params, &gg, &mut grad_x)? {
            Some((g, q)) => (Some(g), Some(q)),
            None => (None, None),
        }
    } else {
        (None, None)
    };
    let [bn_expand_gamma, bn_expand_beta] = tail.bn_expand;
    Ok(BlockGrads {
        grad_x,
        grad_q,
        conv_reduce: gr.grad_weight,
        bn_reduce_gamma: g1.grad_gamma,
        bn_reduce_beta: g1.grad_beta,
        conv_conv: gc.grad_weight,
        bn_mid_gamma: g2.grad_gamma,
        bn_mid_beta: g2.grad_beta,
        conv_expand: ge.grad_weight,
        bn_expand_gamma,
        bn_expand_beta,
        shortcut: tail.shortcut,
        controller,
    })
}
