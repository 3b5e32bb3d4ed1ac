//! Deterministic parameter initialization.
//!
//! Convolutions draw from `N(0, 2 / fan_in)`, linear maps from
//! `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`. Batch norm starts at
//! `gamma = 1, beta = 0`, biases at zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::block::{GatedBlockParams, Shortcut};
use crate::error::{Error, Result};
use crate::gate::GateControllerParams;
use crate::nn::{BatchNorm2dParams, Conv2dParams, LinearParams};
use crate::tensor::{Element, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn he_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

pub fn xavier_uniform<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Bias-free convolution `out x (in/groups) x p x p`.
pub fn conv<T: Element>(
    out: usize,
    inp: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    rng: &mut impl Rng,
) -> Conv2dParams<T> {
    let per = inp / groups;
    let w = he_normal(&[out, per, kernel, kernel], per * kernel * kernel, rng);
    Conv2dParams::new(w, stride, padding, groups)
}

pub fn linear<T: Element>(out: usize, inp: usize, rng: &mut impl Rng) -> LinearParams<T> {
    LinearParams { weight: xavier_uniform(&[out, inp], inp, out, rng), bias: Some(Tensor::zeros(&[out])) }
}

pub fn gate_controller<T: Element>(
    feature_dim: usize,
    question_dim: usize,
    hidden_dim: usize,
    experts: usize,
    rng: &mut impl Rng,
) -> GateControllerParams<T> {
    let (f, q, hd, e) = (feature_dim, question_dim, hidden_dim, experts);
    GateControllerParams {
        w_ia: xavier_uniform(&[hd, f], f, hd, rng),
        w_qa: xavier_uniform(&[hd, q], q, hd, rng),
        b_a: Tensor::zeros(&[hd]),
        w_p: xavier_uniform(&[1, hd], hd, 1, rng),
        b_p: Tensor::zeros(&[1]),
        w_proj: (f != q).then(|| xavier_uniform(&[q, f], f, q, rng)),
        w_g: xavier_uniform(&[e, q], q, e, rng),
        b_g: Tensor::zeros(&[e]),
    }
}

/// Shape of one bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cardinality: usize,
    pub group_width: usize,
    pub stride: usize,
    pub k: usize,
    /// `(question_dim, hidden_dim)` for a gated block.
    pub gate: Option<(usize, usize)>,
}

pub fn gated_block<T: Element>(shape: &BlockShape, rng: &mut impl Rng) -> Result<GatedBlockParams<T>> {
    let BlockShape { in_channels: c, out_channels: co, cardinality: e, group_width: d, stride, k, gate } = *shape;
    if stride == 0 {
        return Err(Error::Shape("block stride must be positive".into()));
    }
    let mid = e * d;
    let shortcut = (c != co || stride != 1)
        .then(|| Shortcut { conv: conv(co, c, 1, stride, 0, 1, rng), bn: BatchNorm2dParams::new(co) });
    let params = GatedBlockParams {
        conv_reduce: conv(mid, c, 1, 1, 0, 1, rng),
        bn_reduce: BatchNorm2dParams::new(mid),
        conv_conv: conv(mid, mid, 3, stride, 1, e, rng),
        bn_mid: BatchNorm2dParams::new(mid),
        conv_expand: conv(co, mid, 1, 1, 0, 1, rng),
        bn_expand: BatchNorm2dParams::new(co),
        shortcut,
        controller: gate.map(|(q, hd)| gate_controller(c, q, hd, e, rng)),
        cardinality: e,
        group_width: d,
        k,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let shape = BlockShape {
            in_channels: 8,
            out_channels: 16,
            cardinality: 4,
            group_width: 2,
            stride: 2,
            k: 2,
            gate: Some((6, 5)),
        };
        let a: GatedBlockParams<f64> = gated_block(&shape, &mut seeded(3)).unwrap();
        let b: GatedBlockParams<f64> = gated_block(&shape, &mut seeded(3)).unwrap();
        let c: GatedBlockParams<f64> = gated_block(&shape, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.shortcut.is_some());
        assert!(a.controller.as_ref().unwrap().w_proj.is_some());
    }

    #[test]
    fn he_normal_scale() {
        let t: Tensor<f64> = he_normal(&[20000], 50, &mut seeded(0));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }
}
