use super::*;
use crate::gate::balance_loss;
use crate::init::{gated_block, seeded, BlockShape};
use crate::nn::gradcheck::finite_diff_check;
use rand::Rng;

fn shape(c: usize, co: usize, e: usize, d: usize, stride: usize, k: usize) -> BlockShape {
    BlockShape { in_channels: c, out_channels: co, cardinality: e, group_width: d, stride, k, gate: Some((5, 4)) }
}

fn inputs(n: usize, c: usize, hw: usize, q: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = seeded(seed);
    let x = Tensor::from_fn(&[n, c, hw, hw], |_| rng.random_range(-1.0..1.0));
    let qv = Tensor::from_fn(&[n, q], |_| rng.random_range(-1.0..1.0));
    (x, qv)
}

fn block(s: &BlockShape, seed: u64) -> GatedBlockParams<f64> {
    let mut p: GatedBlockParams<f64> = gated_block(s, &mut seeded(seed)).unwrap();
    // positive gate biases keep every logit alive so gates are differentiable
    if let Some(c) = &mut p.controller {
        c.b_g = Tensor::from_fn(&[s.cardinality], |i| 0.5 + 0.1 * i as f64);
    }
    p
}

fn weights_for(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn sparse_with_all_experts_matches_dense_bitwise() {
    let s = shape(6, 8, 4, 2, 1, 4);
    let p = block(&s, 1);
    let (x, q) = inputs(3, 6, 5, 5, 2);
    let mut c1 = MacCounter::new();
    let mut c2 = MacCounter::new();
    let dense = block_forward_dense(&x, Some(&q), &p, &mut c1).unwrap();
    let sparse = block_forward_sparse(&x, Some(&q), &p, &mut c2).unwrap();
    assert_eq!(dense.y, sparse.y);
    assert_eq!(c1.conv_macs, c2.conv_macs);

    let r = weights_for(&dense.y, 9);
    let gd = block_backward(&p, &dense.cache, &r, 0.1).unwrap();
    let gs = block_backward(&p, &sparse.cache, &r, 0.1).unwrap();
    for (a, b) in gd.tensors().iter().zip(gs.tensors()) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
    }
    assert!(gd.grad_x.max_abs_diff(&gs.grad_x).unwrap() <= 1e-12);
}

#[test]
fn sparse_matches_masked_reference() {
    for (k, stride) in [(1, 1), (2, 2), (3, 1)] {
        let s = shape(6, 10, 4, 3, stride, k);
        let p = block(&s, 10 + k as u64);
        let (x, q) = inputs(4, 6, 6, 5, 20 + k as u64);
        let mut c = MacCounter::new();
        let masked = block_forward_masked(&x, Some(&q), &p, &mut c).unwrap();
        let sparse = block_forward_sparse(&x, Some(&q), &p, &mut c).unwrap();
        assert!(masked.y.max_abs_diff(&sparse.y).unwrap() <= 1e-10);
        let r = weights_for(&masked.y, 4);
        let gm = block_backward(&p, &masked.cache, &r, 0.05).unwrap();
        let gs = block_backward(&p, &sparse.cache, &r, 0.05).unwrap();
        for (a, b) in gm.tensors().iter().zip(gs.tensors()) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
        }
        assert!(gm.grad_x.max_abs_diff(&gs.grad_x).unwrap() <= 1e-10);
        assert!(gm.grad_q.unwrap().max_abs_diff(&gs.grad_q.unwrap()).unwrap() <= 1e-10);
    }
}

#[test]
fn sparse_f32_matches_reference() {
    let s = shape(6, 8, 4, 2, 1, 2);
    let p: GatedBlockParams<f32> = gated_block(&s, &mut seeded(5)).unwrap();
    let (x, q) = inputs(3, 6, 5, 5, 6);
    let (x, q) = (x.cast::<f32>(), q.cast::<f32>());
    let mut c = MacCounter::new();
    let m = block_forward_masked(&x, Some(&q), &p, &mut c).unwrap();
    let sp = block_forward_sparse(&x, Some(&q), &p, &mut c).unwrap();
    assert!(m.y.max_abs_diff(&sp.y).unwrap() <= 1e-5);
}

#[test]
fn path_macs_follow_closed_form() {
    let (c, co, e, d, k, n, hw) = (6, 10, 4, 3, 2, 2, 6);
    let s = BlockShape { gate: None, ..shape(c, co, e, d, 2, k) };
    let mut p = block(&s, 3);
    p.controller = None;
    // the shortcut conv is outside the path formula; count it separately
    let sc_macs = (c * co * 3 * 3) as u64 * n as u64;
    let gated = block(&shape(c, co, e, d, 2, k), 3);
    let (x, q) = inputs(n, c, hw, 5, 1);
    let mut counter = MacCounter::new();
    block_forward_sparse(&x, Some(&q), &gated, &mut counter).unwrap();
    let (h1, h2) = (hw * hw, 3 * 3);
    let expect = (k * d * c * h1 + 9 * d * d * k * h2 + k * d * co * h2) as u64 * n as u64;
    assert_eq!(counter.conv_macs, expect + sc_macs);

    let mut dense = MacCounter::new();
    block_forward_dense(&x, None, &p, &mut dense).unwrap();
    let e_full = (e * d * c * h1 + 9 * d * d * e * h2 + e * d * co * h2) as u64 * n as u64;
    assert_eq!(dense.conv_macs, e_full + sc_macs);
}

#[test]
fn unselected_paths_get_no_gradient_and_keep_running_stats() {
    let s = shape(6, 6, 5, 2, 1, 1);
    let mut p = block(&s, 7);
    let (x, q) = inputs(2, 6, 4, 5, 8);
    let mut c = MacCounter::new();
    let out = block_forward_sparse(&x, Some(&q), &p, &mut c).unwrap();
    let used: Vec<usize> = out.decisions.iter().flat_map(|d| d.selected.clone()).collect();
    let idle: Vec<usize> = (0..5).filter(|e| !used.contains(e)).collect();
    assert!(idle.len() >= 3);

    let r = weights_for(&out.y, 1);
    let g = block_backward(&p, &out.cache, &r, 0.0).unwrap();
    let before = p.clone();
    p.update_running_stats(&out.cache);
    for &e in &idle {
        for ch in p.group_channels(e) {
            let row = |t: &Tensor<f64>| {
                let per = t.len() / t.shape()[0];
                t.data()[ch * per..(ch + 1) * per].to_vec()
            };
            assert!(row(&g.conv_reduce).iter().all(|&v| v == 0.0));
            assert!(row(&g.conv_conv).iter().all(|&v| v == 0.0));
            for o in 0..6 {
                assert_eq!(g.conv_expand.data()[o * 10 + ch], 0.0);
            }
            for t in [&g.bn_reduce_gamma, &g.bn_reduce_beta, &g.bn_mid_gamma, &g.bn_mid_beta] {
                assert_eq!(t.data()[ch], 0.0);
            }
            for (a, b) in [(&p.bn_reduce, &before.bn_reduce), (&p.bn_mid, &before.bn_mid)] {
                assert_eq!(a.running_mean.data()[ch], b.running_mean.data()[ch]);
                assert_eq!(a.running_var.data()[ch], b.running_var.data()[ch]);
            }
        }
    }
    for &e in &used {
        let ch = p.group_channels(e).start;
        assert_ne!(p.bn_reduce.running_mean.data()[ch], before.bn_reduce.running_mean.data()[ch]);
    }
}

#[test]
fn gate_scaling_commutes_with_relu() {
    let mut rng = seeded(2);
    let a = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
    let mult = vec![vec![0.3, 0.0], vec![1.5, 0.7]];
    let mut c = MacCounter::new();
    let pre = relu_forward(&scale_groups(&a, &mult, 2, &mut c).unwrap(), &mut c);
    let post = scale_groups(&relu_forward(&a, &mut c), &mult, 2, &mut c).unwrap();
    assert!(pre.max_abs_diff(&post).unwrap() <= 1e-15);
}

#[test]
fn ungated_block_runs_every_path() {
    let s = BlockShape { gate: None, ..shape(4, 4, 2, 2, 1, 2) };
    let p = block(&s, 4);
    assert!(p.shortcut.is_none());
    let (x, _) = inputs(2, 4, 3, 5, 0);
    let mut c = MacCounter::new();
    let d = block_forward_dense(&x, None, &p, &mut c).unwrap();
    let sp = block_forward_sparse(&x, None, &p, &mut c).unwrap();
    assert_eq!(d.y, sp.y);
    assert!(d.decisions.is_empty());
}

#[test]
fn gated_block_requires_question() {
    let p = block(&shape(4, 4, 2, 2, 1, 1), 4);
    let (x, _) = inputs(2, 4, 3, 5, 0);
    assert!(block_forward_dense(&x, None, &p, &mut MacCounter::new()).is_err());
    let bad = Tensor::zeros(&[2, 3]);
    assert!(block_forward_sparse(&x, Some(&bad), &p, &mut MacCounter::new()).is_err());
}

#[test]
fn k_beyond_cardinality_rejected() {
    let mut p = block(&shape(4, 4, 2, 2, 1, 1), 4);
    p.k = 3;
    assert!(matches!(p.validate(), Err(Error::KOutOfRange { k: 3, cardinality: 2 })));
}

/// `sum(y * r) + lambda * balance`, evaluated with the block rebuilt from
/// `probe` via `set`.
fn objective(
    p: &GatedBlockParams<f64>,
    x: &Tensor<f64>,
    q: &Tensor<f64>,
    r: &Tensor<f64>,
    lambda: f64,
    mode: ExecMode,
) -> Result<f64> {
    let out = block_forward(x, Some(q), p, mode, &mut MacCounter::new())?;
    let rows: Vec<Vec<f64>> = out.decisions.iter().map(|d| d.g_norm.clone()).collect();
    Ok(out.y.mul(r)?.sum_all() + lambda * balance_loss(&rows)?)
}

#[test]
fn finite_differences_agree() {
    let lambda = 0.3;
    for (mode, k, stride) in [(ExecMode::Dense, 2, 1), (ExecMode::Sparse, 2, 1), (ExecMode::Sparse, 3, 2)] {
        let s = shape(8, 8, 4, 2, stride, k);
        let p = block(&s, 31);
        let (x, q) = inputs(2, 8, 6, 5, 32);
        let out = block_forward(&x, Some(&q), &p, mode, &mut MacCounter::new()).unwrap();
        let r = weights_for(&out.y, 33);
        let g = block_backward(&p, &out.cache, &r, lambda).unwrap();

        let err = finite_diff_check(&mut |t| objective(&p, t, &q, &r, lambda, mode), &x, &g.grad_x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{mode:?} x: {err}");
        let gq = g.grad_q.clone().unwrap();
        let err = finite_diff_check(&mut |t| objective(&p, &x, t, &r, lambda, mode), &q, &gq, 1e-5).unwrap();
        assert!(err <= 1e-4, "{mode:?} q: {err}");

        let grads = g.tensors();
        let count = grads.len();
        for i in 0..count {
            let mut probe = p.clone();
            let point = probe.trainable_mut()[i].clone();
            let mut f = |t: &Tensor<f64>| {
                *probe.trainable_mut()[i] = t.clone();
                objective(&probe, &x, &q, &r, lambda, mode)
            };
            let err = finite_diff_check(&mut f, &point, grads[i], 1e-5).unwrap();
            assert!(err <= 1e-4, "{mode:?} param {i}: {err}");
        }
    }
}
