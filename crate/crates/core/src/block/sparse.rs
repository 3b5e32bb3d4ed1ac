use super::{
    block_forward_dense, check_input, controller_grads, gate_gradients, run_controller, scale_groups,
    scale_groups_backward, tail_backward, tail_forward, BlockCache, BlockGrads, BlockOutput, GatedBlockParams,
    PathCache,
};
use crate::error::{Error, Result};
use crate::nn::batchnorm::{batchnorm2d_backward, batchnorm2d_forward_mapped, ChannelMap};
use crate::nn::conv::{conv2d_backward, conv2d_forward, Conv2dParams};
use crate::nn::counter::MacCounter;
use crate::nn::layers::{relu_backward, relu_forward};
use crate::tensor::{Element, Tensor};

/// Per-sample gathered convolutions.
#[derive(Debug, Clone)]
struct Gathered<T> {
    reduce: Conv2dParams<T>,
    conv: Conv2dParams<T>,
    expand: Conv2dParams<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct SparseCache<T> {
    channels: Vec<Vec<usize>>,
    gathered: Vec<Gathered<T>>,
    slot_mult: Vec<Vec<T>>,
    b1: Tensor<T>,
    a1: Tensor<T>,
    b2: Tensor<T>,
    a2: Tensor<T>,
    t: Tensor<T>,
}

/// Output-channel rows `idx` of an `O x I x p x p` weight.
pub(crate) fn gather_rows<T: Element>(w: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let s = w.shape();
    let (o, i, kk) = (s[0], s[1], s[2] * s[3]);
    let g = w.reshape(&[1, o, i, kk])?.gather_channels(idx)?;
    g.reshape(&[idx.len(), i, s[2], s[3]])
}

fn scatter_add_rows<T: Element>(full: &mut Tensor<T>, idx: &[usize], part: &Tensor<T>) {
    let row = full.len() / full.shape()[0];
    let fd = full.data_mut();
    for (j, &r) in idx.iter().enumerate() {
        for (a, &b) in fd[r * row..(r + 1) * row].iter_mut().zip(&part.data()[j * row..(j + 1) * row]) {
            *a = *a + b;
        }
    }
}

fn scatter_add_cols<T: Element>(full: &mut Tensor<T>, idx: &[usize], part: &Tensor<T>) {
    let s = full.shape().to_vec();
    let (o, i, kk) = (s[0], s[1], s[2] * s[3]);
    let k = idx.len();
    let fd = full.data_mut();
    for oc in 0..o {
        for (j, &c) in idx.iter().enumerate() {
            let dst = (oc * i + c) * kk;
            let src = (oc * k + j) * kk;
            for t in 0..kk {
                fd[dst + t] = fd[dst + t] + part.data()[src + t];
            }
        }
    }
}

fn stack<T: Element>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(shape, data)
}

/// Per sample, only the `k` selected paths run: their channels and the
/// matching weight rows/columns are gathered and convolved as a `k`-group
/// convolution. Ungated blocks fall back to the dense pass.
pub fn block_forward_sparse<T: Element>(
    x: &Tensor<T>,
    q: Option<&Tensor<T>>,
    params: &GatedBlockParams<T>,
    counter: &mut MacCounter,
) -> Result<BlockOutput<T>> {
    if !params.is_gated() {
        return block_forward_dense(x, q, params, counter);
    }
    check_input(x, params)?;
    if [&params.conv_reduce, &params.conv_conv, &params.conv_expand].iter().any(|c| c.bias.is_some()) {
        return Err(Error::Shape("sparse execution expects bias-free path convolutions".into()));
    }
    let n = x.shape()[0];
    let (k, d) = (params.k, params.group_width);
    let gates = run_controller(x, q, params, counter)?.expect("gated block");

    let mut channels = Vec::with_capacity(n);
    let mut gathered = Vec::with_capacity(n);
    let mut slot_mult = Vec::with_capacity(n);
    let mut multipliers = Vec::with_capacity(n);
    let mut gate_live = Vec::with_capacity(n);
    for dec in &gates.decisions {
        let ch: Vec<usize> = dec.selected.iter().flat_map(|&e| params.group_channels(e)).collect();
        gathered.push(Gathered {
            reduce: Conv2dParams::new(gather_rows(&params.conv_reduce.weight, &ch)?, 1, 0, 1),
            conv: Conv2dParams::new(
                gather_rows(&params.conv_conv.weight, &ch)?,
                params.conv_conv.stride,
                params.conv_conv.padding,
                k,
            ),
            expand: Conv2dParams::new(params.conv_expand.weight.gather_channels(&ch)?, 1, 0, 1),
        });
        channels.push(ch);
        slot_mult.push(dec.selected.iter().map(|&e| dec.g_norm[e]).collect::<Vec<T>>());
        let mut live = vec![false; params.cardinality];
        let mut mult = vec![T::zero(); params.cardinality];
        for &e in &dec.selected {
            live[e] = true;
            mult[e] = dec.g_norm[e];
        }
        gate_live.push(live);
        multipliers.push(mult);
    }
    let map = ChannelMap::from_channels(channels.clone());

    let z1 = stack(
        (0..n).map(|s| conv2d_forward(&x.sample(s), &gathered[s].reduce, counter)).collect::<Result<_>>()?,
    )?;
    let (b1, bn_reduce) = batchnorm2d_forward_mapped(&z1, &params.bn_reduce, &map, counter)?;
    let a1 = relu_forward(&b1, counter);
    let z2 = stack(
        (0..n).map(|s| conv2d_forward(&a1.sample(s), &gathered[s].conv, counter)).collect::<Result<_>>()?,
    )?;
    let (b2, bn_mid) = batchnorm2d_forward_mapped(&z2, &params.bn_mid, &map, counter)?;
    let a2 = relu_forward(&b2, counter);
    let t = scale_groups(&a2, &slot_mult, d, counter)?;
    let z3 = stack(
        (0..n).map(|s| conv2d_forward(&t.sample(s), &gathered[s].expand, counter)).collect::<Result<_>>()?,
    )?;
    let (y, tail) = tail_forward(&z3, x, params, counter)?;

    let cache = BlockCache {
        x: x.clone(),
        controller: gates.caches,
        decisions: gates.decisions.clone(),
        multipliers,
        gate_live,
        bn_reduce,
        bn_mid,
        tail,
        path: PathCache::Sparse(SparseCache { channels, gathered, slot_mult, b1, a1, b2, a2, t }),
    };
    Ok(BlockOutput { y, decisions: gates.decisions, cache })
}

pub(super) fn backward<T: Element>(
    params: &GatedBlockParams<T>,
    cache: &BlockCache<T>,
    sc: &SparseCache<T>,
    grad_y: &Tensor<T>,
    balance_weight: T,
) -> Result<BlockGrads<T>> {
    let x = &cache.x;
    let n = x.shape()[0];
    let d = params.group_width;
    let tail = tail_backward(&cache.tail, x, params, grad_y)?;

    let mut gw_expand = Tensor::zeros(params.conv_expand.weight.shape());
    let mut dt = Vec::with_capacity(n);
    for s in 0..n {
        let g = conv2d_backward(&sc.t.sample(s), &sc.gathered[s].expand, &tail.grad_z3.sample(s))?;
        scatter_add_cols(&mut gw_expand, &sc.channels[s], &g.grad_weight);
        dt.push(g.grad_x);
    }
    let dt = stack(dt)?;
    let (da2, dslot) = scale_groups_backward(&sc.a2, &dt, &sc.slot_mult, d)?;
    let db2 = relu_backward(&sc.b2, &da2)?;
    let g2 = batchnorm2d_backward(&cache.bn_mid, &params.bn_mid, &db2)?;

    let mut gw_conv = Tensor::zeros(params.conv_conv.weight.shape());
    let mut da1 = Vec::with_capacity(n);
    for s in 0..n {
        let g = conv2d_backward(&sc.a1.sample(s), &sc.gathered[s].conv, &g2.grad_x.sample(s))?;
        scatter_add_rows(&mut gw_conv, &sc.channels[s], &g.grad_weight);
        da1.push(g.grad_x);
    }
    let db1 = relu_backward(&sc.b1, &stack(da1)?)?;
    let g1 = batchnorm2d_backward(&cache.bn_reduce, &params.bn_reduce, &db1)?;

    let mut gw_reduce = Tensor::zeros(params.conv_reduce.weight.shape());
    let mut dx = Vec::with_capacity(n);
    for s in 0..n {
        let g = conv2d_backward(&x.sample(s), &sc.gathered[s].reduce, &g1.grad_x.sample(s))?;
        scatter_add_rows(&mut gw_reduce, &sc.channels[s], &g.grad_weight);
        dx.push(g.grad_x);
    }
    let mut grad_x = stack(dx)?;
    grad_x.add_assign(&tail.grad_x)?;

    let mut path_grads = vec![vec![T::zero(); params.cardinality]; n];
    for (s, dec) in cache.decisions.iter().enumerate() {
        for (slot, &e) in dec.selected.iter().enumerate() {
            path_grads[s][e] = dslot[s][slot];
        }
    }
    let gg = gate_gradients(cache, &path_grads, balance_weight)?;
    let (controller, grad_q) = match controller_grads(cache, params, &gg, &mut grad_x)? {
        Some((g, q)) => (Some(g), Some(q)),
        None => (None, None),
    };
    let [bn_expand_gamma, bn_expand_beta] = tail.bn_expand;
    Ok(BlockGrads {
        grad_x,
        grad_q,
        conv_reduce: gw_reduce,
        bn_reduce_gamma: g1.grad_gamma,
        bn_reduce_beta: g1.grad_beta,
        conv_conv: gw_conv,
        bn_mid_gamma: g2.grad_gamma,
        bn_mid_beta: g2.grad_beta,
        conv_expand: gw_expand,
        bn_expand_gamma,
        bn_expand_beta,
        shortcut: tail.shortcut,
        controller,
    })
}
