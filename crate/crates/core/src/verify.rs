//! Randomized sparse-versus-oracle trials and the finite-difference suite.
//!
//! The oracle for sparse execution is [`block_forward_masked`]: every path
//! runs, gates outside each sample's top-k are zeroed and those paths are kept
//! out of the batch statistics.

use rand::Rng;

use crate::block::{block_backward, block_forward, block_forward_masked, BlockGrads, ExecMode, GatedBlockParams};
use crate::error::{Error, Result};
use crate::gate::{balance_loss, controller_backward, controller_forward};
use crate::init::{gate_controller, gated_block, seeded, BlockShape, SeededRng};
use crate::netconfig::parse_config;
use crate::network::{build_network, network_backward, network_forward, Network};
use crate::nn::batchnorm::{batchnorm2d_backward, batchnorm2d_forward, BatchNorm2dParams};
use crate::nn::conv::{conv2d_backward, conv2d_forward, Conv2dParams};
use crate::nn::counter::MacCounter;
use crate::nn::gradcheck::finite_diff_check;
use crate::nn::layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, softmax_backward, softmax_forward, tanh_backward, tanh_forward,
    LinearParams, PoolSpec,
};
use crate::tensor::{Element, Tensor};
use crate::train::softmax_cross_entropy;

/// Sparse-versus-oracle tolerance for 64-bit runs.
pub const TOL_F64: f64 = 1e-10;
/// Sparse-versus-oracle forward tolerance for 32-bit runs.
pub const TOL_F32: f64 = 1e-5;
/// Central-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-5;
/// Worst relative error the gradient suite accepts.
pub const FD_TOL: f64 = 1e-4;

/// Cardinalities drawn by [`BlockCase::random`].
pub const CARDINALITIES: [usize; 4] = [2, 4, 8, 32];
/// Group widths drawn by [`BlockCase::random`].
pub const GROUP_WIDTHS: [usize; 3] = [1, 2, 4];

/// One gated block with inputs, an upstream gradient and a balance weight.
#[derive(Debug, Clone)]
pub struct BlockCase<T> {
    pub seed: u64,
    pub params: GatedBlockParams<T>,
    pub x: Tensor<T>,
    pub q: Tensor<T>,
    pub grad_y: Tensor<T>,
    pub balance_weight: f64,
}

fn uniform<T: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
}

fn randomize_bn<T: Element>(bn: &mut BatchNorm2dParams<T>, rng: &mut SeededRng) {
    let c = bn.channels();
    bn.gamma = uniform(&[c], 0.5, 1.5, rng);
    bn.beta = uniform(&[c], -0.5, 0.5, rng);
}

impl<T: Element> BlockCase<T> {
    /// Geometry drawn from seed: `E` from [`CARDINALITIES`], `d` from
    /// [`GROUP_WIDTHS`], `k` uniform in `1..=E`, stride 1 or 2, and a third
    /// of the cases with an identity shortcut.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let e = CARDINALITIES[rng.random_range(0..CARDINALITIES.len())];
        let d = GROUP_WIDTHS[rng.random_range(0..GROUP_WIDTHS.len())];
        let k = rng.random_range(1..=e);
        let c = rng.random_range(2..=12);
        let (co, stride) = if rng.random_range(0..3) == 0 {
            (c, 1)
        } else {
            let stride = rng.random_range(1..=2);
            let mut co = rng.random_range(2..=12);
            if stride == 1 && co == c {
                co += 1;
            }
            (co, stride)
        };
        let q = rng.random_range(2..=6);
        let hd = rng.random_range(2..=6);
        let n = rng.random_range(2..=4);
        let hw = rng.random_range(3..=6);
        let shape = BlockShape { in_channels: c, out_channels: co, cardinality: e, group_width: d, stride, k, gate: Some((q, hd)) };
        Self::build(&shape, n, (hw, hw), seed, &mut rng)
    }

    /// Random parameters and inputs for a fixed geometry.
    pub fn for_shape(shape: &BlockShape, n: usize, hw: (usize, usize), seed: u64) -> Result<Self> {
        Self::build(shape, n, hw, seed, &mut seeded(seed))
    }

    fn build(shape: &BlockShape, n: usize, (h, w): (usize, usize), seed: u64, rng: &mut SeededRng) -> Result<Self> {
        let (q_dim, _) = shape.gate.ok_or_else(|| Error::Shape("verification needs a gated block".into()))?;
        let mut params: GatedBlockParams<T> = gated_block(shape, rng)?;
        for bn in [&mut params.bn_reduce, &mut params.bn_mid, &mut params.bn_expand] {
            randomize_bn(bn, rng);
        }
        if let Some(s) = &mut params.shortcut {
            randomize_bn(&mut s.bn, rng);
        }
        if let Some(c) = &mut params.controller {
            // positive, spread-out gates so most draws avoid the fallback
            c.b_g = uniform(&[shape.cardinality], 0.2, 1.0, rng);
        }
        let x = uniform(&[n, shape.in_channels, h, w], -1.0, 1.0, rng);
        let q = uniform(&[n, q_dim], -1.0, 1.0, rng);
        let (ho, wo) = ((h - 1) / shape.stride + 1, (w - 1) / shape.stride + 1);
        let grad_y = uniform(&[n, shape.out_channels, ho, wo], -1.0, 1.0, rng);
        let balance_weight = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
        Ok(Self { seed, params, x, q, grad_y, balance_weight })
    }

    /// Same case in another element type.
    pub fn cast<U: Element>(&self) -> BlockCase<U> {
        let p = &self.params;
        let conv = |c: &Conv2dParams<T>| Conv2dParams {
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(Tensor::cast),
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
        };
        let bn = |b: &BatchNorm2dParams<T>| BatchNorm2dParams {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            eps: U::from_f64(b.eps.as_f64()),
            momentum: U::from_f64(b.momentum.as_f64()),
            mode: b.mode,
        };
        let params = GatedBlockParams {
            conv_reduce: conv(&p.conv_reduce),
            bn_reduce: bn(&p.bn_reduce),
            conv_conv: conv(&p.conv_conv),
            bn_mid: bn(&p.bn_mid),
            conv_expand: conv(&p.conv_expand),
            bn_expand: bn(&p.bn_expand),
            shortcut: p.shortcut.as_ref().map(|s| crate::block::Shortcut { conv: conv(&s.conv), bn: bn(&s.bn) }),
            controller: p.controller.as_ref().map(|c| crate::gate::GateControllerParams {
                w_ia: c.w_ia.cast(),
                w_qa: c.w_qa.cast(),
                b_a: c.b_a.cast(),
                w_p: c.w_p.cast(),
                b_p: c.b_p.cast(),
                w_proj: c.w_proj.as_ref().map(Tensor::cast),
                w_g: c.w_g.cast(),
                b_g: c.b_g.cast(),
            }),
            cardinality: p.cardinality,
            group_width: p.group_width,
            k: p.k,
        };
        BlockCase {
            seed: self.seed,
            params,
            x: self.x.cast(),
            q: self.q.cast(),
            grad_y: self.grad_y.cast(),
            balance_weight: self.balance_weight,
        }
    }

    pub fn describe(&self) -> String {
        let p = &self.params;
        let s = self.x.shape();
        format!(
            "E={} d={} k={} stride={} C={}->{} {} N={} {}x{}",
            p.cardinality,
            p.group_width,
            p.k,
            p.stride(),
            p.in_channels(),
            p.out_channels(),
            if p.shortcut.is_some() { "projection" } else { "identity" },
            s[0],
            s[2],
            s[3]
        )
    }
}

/// Deliberate defects for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The sparse pass gathers a perturbed `conv_reduce` row for the first
    /// expert selected by the first sample.
    CorruptGather,
}

/// Largest absolute deviations of the sparse pass from the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub forward: f64,
    /// Over the input, question and every parameter gradient.
    pub backward: f64,
}

fn grad_list<T: Element>(g: &BlockGrads<T>) -> Vec<&Tensor<T>> {
    let mut v = vec![&g.grad_x];
    v.extend(g.grad_q.iter());
    v.extend(g.tensors());
    v
}

/// Run the sparse pass and the masked dense oracle on `case` and measure
/// how far apart their outputs and gradients are.
pub fn compare_sparse_to_oracle<T: Element>(case: &BlockCase<T>, fault: Option<Fault>) -> Result<Deviation> {
    let mut counter = MacCounter::new();
    let oracle = block_forward_masked(&case.x, Some(&case.q), &case.params, &mut counter)?;
    let mut sparse_params = case.params.clone();
    if let Some(Fault::CorruptGather) = fault {
        let e = oracle.decisions[0].selected[0];
        let c = sparse_params.group_channels(e).start;
        let row = sparse_params.in_channels();
        for v in &mut sparse_params.conv_reduce.weight.data_mut()[c * row..(c + 1) * row] {
            *v = *v + T::from_f64(0.5);
        }
    }
    let sparse = block_forward(&case.x, Some(&case.q), &sparse_params, ExecMode::Sparse, &mut counter)?;
    if sparse.decisions != oracle.decisions {
        return Err(Error::Shape("sparse and oracle passes disagree on gate decisions".into()));
    }
    let forward = sparse.y.max_abs_diff(&oracle.y)?;
    let lambda = T::from_f64(case.balance_weight);
    let gs = block_backward(&sparse_params, &sparse.cache, &case.grad_y, lambda)?;
    let go = block_backward(&case.params, &oracle.cache, &case.grad_y, lambda)?;
    let (ls, lo) = (grad_list(&gs), grad_list(&go));
    if ls.len() != lo.len() {
        return Err(Error::Shape("sparse and oracle gradients differ in structure".into()));
    }
    let mut backward = 0.0f64;
    for (a, b) in ls.into_iter().zip(lo) {
        backward = backward.max(a.max_abs_diff(b)?);
    }
    Ok(Deviation { forward, backward })
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    /// Worst relative error over every checked coordinate.
    pub worst: f64,
}

type Objective<'a> = Box<dyn FnMut(&Tensor<f64>) -> Result<f64> + 'a>;

fn worst_of(checks: Vec<(Tensor<f64>, Tensor<f64>, Objective<'_>)>) -> Result<f64> {
    let mut worst = 0.0f64;
    for (point, analytic, mut f) in checks {
        worst = worst.max(finite_diff_check(&mut *f, &point, &analytic, FD_STEP)?);
    }
    Ok(worst)
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    Ok(y.mul(r)?.sum_all())
}

fn check_conv(rng: &mut SeededRng, groups: usize, stride: usize, padding: usize) -> Result<f64> {
    let (n, cin, cout, p, hw) = (2, 4, 4, 3, 5);
    let mut params = Conv2dParams::new(uniform(&[cout, cin / groups, p, p], -1.0, 1.0, rng), stride, padding, groups);
    params.bias = Some(uniform(&[cout], -1.0, 1.0, rng));
    let x = uniform(&[n, cin, hw, hw], -1.0, 1.0, rng);
    let y = conv2d_forward(&x, &params, &mut MacCounter::new())?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = conv2d_backward(&x, &params, &r)?;
    let (pw, pb) = (params.clone(), params.clone());
    let r2 = r.clone();
    let r3 = r.clone();
    let x2 = x.clone();
    let x3 = x.clone();
    worst_of(vec![
        (x.clone(), g.grad_x, Box::new(|t| weighted_sum(&conv2d_forward(t, &params, &mut MacCounter::new())?, &r))),
        (
            pw.weight.clone(),
            g.grad_weight,
            Box::new(move |t| {
                let mut p = pw.clone();
                p.weight = t.clone();
                weighted_sum(&conv2d_forward(&x2, &p, &mut MacCounter::new())?, &r2)
            }),
        ),
        (
            pb.bias.clone().expect("bias"),
            g.grad_bias.expect("bias"),
            Box::new(move |t| {
                let mut p = pb.clone();
                p.bias = Some(t.clone());
                weighted_sum(&conv2d_forward(&x3, &p, &mut MacCounter::new())?, &r3)
            }),
        ),
    ])
}

fn check_batchnorm(rng: &mut SeededRng) -> Result<f64> {
    let mut bn = BatchNorm2dParams::new(4);
    randomize_bn(&mut bn, rng);
    let x = uniform(&[3, 4, 3, 3], -2.0, 2.0, rng);
    let (y, cache) = batchnorm2d_forward(&x, &bn, &mut MacCounter::new())?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = batchnorm2d_backward(&cache, &bn, &r)?;
    let f = |bn: &BatchNorm2dParams<f64>, x: &Tensor<f64>| -> Result<f64> {
        weighted_sum(&batchnorm2d_forward(x, bn, &mut MacCounter::new())?.0, &r)
    };
    worst_of(vec![
        (x.clone(), g.grad_x, Box::new(|t| f(&bn, t))),
        (
            bn.gamma.clone(),
            g.grad_gamma,
            Box::new(|t| {
                let mut b = bn.clone();
                b.gamma = t.clone();
                f(&b, &x)
            }),
        ),
        (
            bn.beta.clone(),
            g.grad_beta,
            Box::new(|t| {
                let mut b = bn.clone();
                b.beta = t.clone();
                f(&b, &x)
            }),
        ),
    ])
}

fn random_linear(out: usize, inp: usize, rng: &mut SeededRng) -> LinearParams<f64> {
    LinearParams { weight: uniform(&[out, inp], -1.0, 1.0, rng), bias: Some(uniform(&[out], -1.0, 1.0, rng)) }
}

fn check_linear(rng: &mut SeededRng) -> Result<f64> {
    let lin = random_linear(3, 5, rng);
    let x = uniform(&[4, 5], -1.0, 1.0, rng);
    let r = uniform(&[4, 3], -1.0, 1.0, rng);
    let g = linear_backward(&x, &lin, &r)?;
    let f = |l: &LinearParams<f64>, x: &Tensor<f64>| weighted_sum(&linear_forward(x, l, &mut MacCounter::new())?, &r);
    worst_of(vec![
        (x.clone(), g.grad_x, Box::new(|t| f(&lin, t))),
        (
            lin.weight.clone(),
            g.grad_weight,
            Box::new(|t| {
                let mut l = lin.clone();
                l.weight = t.clone();
                f(&l, &x)
            }),
        ),
        (
            lin.bias.clone().expect("bias"),
            g.grad_bias.expect("bias"),
            Box::new(|t| {
                let mut l = lin.clone();
                l.bias = Some(t.clone());
                f(&l, &x)
            }),
        ),
    ])
}

fn check_softmax(rng: &mut SeededRng) -> Result<f64> {
    let x = uniform(&[3, 5], -2.0, 2.0, rng);
    let y = softmax_forward(&x, &mut MacCounter::new())?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = softmax_backward(&y, &r)?;
    worst_of(vec![(x, g, Box::new(|t| weighted_sum(&softmax_forward(t, &mut MacCounter::new())?, &r)))])
}

fn check_tanh(rng: &mut SeededRng) -> Result<f64> {
    let x = uniform(&[3, 5], -2.0, 2.0, rng);
    let y = tanh_forward(&x, &mut MacCounter::new());
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = tanh_backward(&y, &r)?;
    worst_of(vec![(x, g, Box::new(|t| weighted_sum(&tanh_forward(t, &mut MacCounter::new()), &r)))])
}

/// conv -> relu -> maxpool -> global average pool -> linear.
fn check_relu_composite(rng: &mut SeededRng) -> Result<f64> {
    let conv = Conv2dParams::new(uniform(&[4, 3, 3, 3], -1.0, 1.0, rng), 1, 1, 1);
    let lin = random_linear(2, 4, rng);
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, rng);
    let r = uniform(&[2, 2], -1.0, 1.0, rng);
    let forward = |conv: &Conv2dParams<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut c = MacCounter::new();
        let a = relu_forward(&conv2d_forward(x, conv, &mut c)?, &mut c);
        let (p, _) = maxpool2d_forward(&a, PoolSpec::RESNET, &mut c)?;
        weighted_sum(&linear_forward(&global_avg_pool_forward(&p, &mut c)?, &lin, &mut c)?, &r)
    };
    let mut c = MacCounter::new();
    let z = conv2d_forward(&x, &conv, &mut c)?;
    let a = relu_forward(&z, &mut c);
    let (p, arg) = maxpool2d_forward(&a, PoolSpec::RESNET, &mut c)?;
    let gap = global_avg_pool_forward(&p, &mut c)?;
    let gl = linear_backward(&gap, &lin, &r)?;
    let gp = global_avg_pool_backward(p.shape(), &gl.grad_x)?;
    let ga = maxpool2d_backward(a.shape(), &arg, &gp)?;
    let gz = relu_backward(&z, &ga)?;
    let gc = conv2d_backward(&x, &conv, &gz)?;
    worst_of(vec![
        (x.clone(), gc.grad_x, Box::new(|t| forward(&conv, t))),
        (
            conv.weight.clone(),
            gc.grad_weight,
            Box::new(|t| {
                let mut cv = conv.clone();
                cv.weight = t.clone();
                forward(&cv, &x)
            }),
        ),
    ])
}

fn check_controller(rng: &mut SeededRng) -> Result<f64> {
    let (regions, f, q, hd, e, k) = (7, 5, 3, 4, 6, 3);
    let mut params = gate_controller::<f64>(f, q, hd, e, rng);
    params.b_a = uniform(&[hd], -0.5, 0.5, rng);
    params.b_g = uniform(&[e], 0.2, 1.0, rng);
    let v_i = uniform(&[regions, f], -1.0, 1.0, rng);
    let v_q = uniform(&[q], -1.0, 1.0, rng);
    let r: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &crate::gate::GateControllerParams<f64>, vi: &Tensor<f64>, vq: &[f64]| -> Result<f64> {
        let (dec, _) = controller_forward(vi, vq, p, k, &mut MacCounter::new())?;
        Ok(dec.g_norm.iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let (dec, cache) = controller_forward(&v_i, v_q.data(), &params, k, &mut MacCounter::new())?;
    let mut grads = params.zeros_like();
    let (dv_i, dv_q) = controller_backward(&cache, &dec, &params, &r, &mut grads)?;
    let mut checks: Vec<(Tensor<f64>, Tensor<f64>, Objective<'_>)> = vec![
        (v_i.clone(), dv_i, Box::new(|t| loss(&params, t, v_q.data()))),
        (v_q.clone(), Tensor::from_vec(dv_q), Box::new(|t| loss(&params, &v_i, t.data()))),
    ];
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    for (i, g) in analytic.into_iter().enumerate() {
        let point = params.clone().tensors_mut()[i].clone();
        let (params, v_i, v_q) = (&params, &v_i, &v_q);
        checks.push((
            point,
            g,
            Box::new(move |t| {
                let mut p = params.clone();
                *p.tensors_mut()[i] = t.clone();
                loss(&p, v_i, v_q.data())
            }),
        ));
    }
    worst_of(checks)
}

fn check_block(seed: u64, mode: ExecMode) -> Result<f64> {
    let shape = BlockShape {
        in_channels: 8,
        out_channels: 8,
        cardinality: 4,
        group_width: 2,
        stride: if mode == ExecMode::Sparse { 2 } else { 1 },
        k: 2,
        gate: Some((4, 5)),
    };
    let mut case = BlockCase::<f64>::for_shape(&shape, 2, (6, 6), seed)?;
    case.balance_weight = 0.3;
    let BlockCase { params, x, q, grad_y: r, balance_weight: lambda, .. } = case;
    let loss = |p: &GatedBlockParams<f64>, x: &Tensor<f64>, q: &Tensor<f64>| -> Result<f64> {
        let out = block_forward(x, Some(q), p, mode, &mut MacCounter::new())?;
        let gates: Vec<Vec<f64>> = out.decisions.iter().map(|d| d.g_norm.clone()).collect();
        Ok(weighted_sum(&out.y, &r)? + lambda * balance_loss(&gates)?)
    };
    let out = block_forward(&x, Some(&q), &params, mode, &mut MacCounter::new())?;
    let g = block_backward(&params, &out.cache, &r, lambda)?;
    let mut checks: Vec<(Tensor<f64>, Tensor<f64>, Objective<'_>)> = vec![
        (x.clone(), g.grad_x.clone(), Box::new(|t| loss(&params, t, &q))),
        (q.clone(), g.grad_q.clone().expect("gated"), Box::new(|t| loss(&params, &x, t))),
    ];
    let analytic: Vec<Tensor<f64>> = g.tensors().into_iter().cloned().collect();
    for (i, a) in analytic.into_iter().enumerate() {
        let point = params.clone().trainable_mut()[i].clone();
        let (params, x, q) = (&params, &x, &q);
        checks.push((
            point,
            a,
            Box::new(move |t| {
                let mut p = params.clone();
                *p.trainable_mut()[i] = t.clone();
                loss(&p, x, q)
            }),
        ));
    }
    worst_of(checks)
}

const LOSS_NET: &str = r#"{
    "name": "gradcheck", "input": {"channels": 3, "height": 8, "width": 8},
    "stem": {"kernel": 3, "out": 6, "stride": 1, "maxpool": true},
    "stages": [{"blocks": 1, "out": 8, "cardinality": 4, "width": 2, "stride": 1, "gated": true}],
    "head": {"classes": 3}, "question_dim": 4, "k": 2, "seed": 0, "gate_hidden": 5
}"#;

/// Cross-entropy plus `lambda` times the balance loss of a small network.
fn check_training_loss(seed: u64) -> Result<f64> {
    let cfg = parse_config(LOSS_NET)?;
    let mut net: Network<f64> = build_network(&cfg, seed)?;
    let mut rng = seeded(seed ^ 0x5eed);
    for b in &mut net.blocks {
        if let Some(c) = &mut b.controller {
            c.b_g = uniform(&[b.cardinality], 0.2, 1.0, &mut rng);
        }
    }
    let x = uniform(&[3, 3, 8, 8], -1.0, 1.0, &mut rng);
    let q = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let labels = [0usize, 2, 1];
    let lambda = 0.25;
    let loss = |n: &Network<f64>, x: &Tensor<f64>, q: &Tensor<f64>| -> Result<f64> {
        let o = network_forward(n, x, Some(q), &mut MacCounter::new(), ExecMode::Sparse)?;
        let (ce, _, _) = softmax_cross_entropy(&o.logits, &labels)?;
        let mut bl = 0.0;
        for d in &o.decisions {
            bl += balance_loss(&d.iter().map(|g| g.g_norm.clone()).collect::<Vec<_>>())?;
        }
        Ok(ce + lambda * bl)
    };
    let out = network_forward(&net, &x, Some(&q), &mut MacCounter::new(), ExecMode::Sparse)?;
    let (_, grad_logits, _) = softmax_cross_entropy(&out.logits, &labels)?;
    let g = network_backward(&net, &out.cache, &grad_logits, lambda)?;
    let mut checks: Vec<(Tensor<f64>, Tensor<f64>, Objective<'_>)> = vec![
        (x.clone(), g.grad_images.clone(), Box::new(|t| loss(&net, t, &q))),
        (q.clone(), g.grad_questions.clone().expect("gated"), Box::new(|t| loss(&net, &x, t))),
    ];
    for (i, a) in g.params.iter().cloned().enumerate() {
        let point = net.clone().trainable_mut()[i].clone();
        let (net, x, q) = (&net, &x, &q);
        checks.push((
            point,
            a,
            Box::new(move |t| {
                let mut n = net.clone();
                *n.trainable_mut()[i] = t.clone();
                loss(&n, x, q)
            }),
        ));
    }
    worst_of(checks)
}

/// Every backward pass in the crate against central differences in 64-bit.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    let mut push = |name, worst: Result<f64>| -> Result<()> {
        out.push(GradCheck { name, worst: worst? });
        Ok(())
    };
    push("conv2d", check_conv(&mut rng, 1, 1, 1))?;
    push("conv2d strided", check_conv(&mut rng, 1, 2, 1))?;
    push("conv2d grouped", check_conv(&mut rng, 2, 1, 0))?;
    push("conv2d depthwise strided", check_conv(&mut rng, 4, 2, 1))?;
    push("batchnorm (training)", check_batchnorm(&mut rng))?;
    push("linear", check_linear(&mut rng))?;
    push("softmax", check_softmax(&mut rng))?;
    push("tanh", check_tanh(&mut rng))?;
    push("relu composite", check_relu_composite(&mut rng))?;
    push("gate controller", check_controller(&mut rng))?;
    let (s1, s2, s3) = (rng.random(), rng.random(), rng.random());
    push("gated block (dense)", check_block(s1, ExecMode::Dense))?;
    push("gated block (sparse)", check_block(s2, ExecMode::Sparse))?;
    push("training loss", check_training_loss(s3))?;
    Ok(out)
}
