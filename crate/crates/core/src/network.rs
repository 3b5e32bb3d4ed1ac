//! Stem, gated stages and classification head assembled from a
//! [`NetworkConfig`].

use std::io::{Read, Write};
use std::path::Path;

use crate::block::{block_backward, block_forward, push_bn, BlockCache, ExecMode, GatedBlockParams};
use crate::error::{Error, Result};
use crate::gate::GateDecision;
use crate::init::{self, seeded};
use crate::netconfig::{parse_config, NetworkConfig};
use crate::nn::batchnorm::{batchnorm2d_backward, batchnorm2d_forward, BnCache, BnMode};
use crate::nn::conv::{conv2d_backward, conv2d_forward};
use crate::nn::counter::MacCounter;
use crate::nn::layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward,
};
use crate::nn::{BatchNorm2dParams, Conv2dParams, LinearParams, PoolSpec};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv2dParams<T>,
    /// `None` for a bare convolution.
    pub bn: Option<BatchNorm2dParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub stem: ConvBn<T>,
    pub pool: Option<PoolSpec>,
    pub blocks: Vec<GatedBlockParams<T>>,
    pub block_names: Vec<String>,
    pub post: Option<ConvBn<T>>,
    pub head: LinearParams<T>,
}

/// Build a network with parameters drawn deterministically from `seed`.
pub fn build_network<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let st = &cfg.stem;
    let stem = ConvBn {
        conv: init::conv(st.out, cfg.input.channels, st.kernel, st.stride, st.padding(), 1, &mut rng),
        bn: Some(BatchNorm2dParams::new(st.out)),
    };
    let plan = cfg.block_plan();
    let mut blocks = Vec::with_capacity(plan.len());
    for b in &plan {
        blocks.push(init::gated_block(&b.shape, &mut rng)?);
    }
    let last = plan.last().map_or(st.out, |b| b.shape.out_channels);
    let post = cfg.post_conv.as_ref().map(|p| ConvBn {
        conv: init::conv(p.out, last, 1, 1, 0, 1, &mut rng),
        bn: p.bn_relu.then(|| BatchNorm2dParams::new(p.out)),
    });
    let head = init::linear(cfg.head.classes, cfg.final_channels(), &mut rng);
    Ok(Network {
        config: cfg.clone(),
        stem,
        pool: cfg.stem_pool(),
        block_names: plan.iter().map(|b| b.name()).collect(),
        blocks,
        post,
        head,
    })
}

#[derive(Debug, Clone)]
struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: Option<(BnCache<T>, Tensor<T>)>,
}

fn conv_bn_forward<T: Element>(
    x: &Tensor<T>,
    p: &ConvBn<T>,
    counter: &mut MacCounter,
) -> Result<(Tensor<T>, ConvBnCache<T>)> {
    let z = conv2d_forward(x, &p.conv, counter)?;
    match &p.bn {
        Some(bn) => {
            let (b, c) = batchnorm2d_forward(&z, bn, counter)?;
            let y = relu_forward(&b, counter);
            Ok((y, ConvBnCache { input: x.clone(), bn: Some((c, b)) }))
        }
        None => Ok((z, ConvBnCache { input: x.clone(), bn: None })),
    }
}

fn conv_bn_backward<T: Element>(
    p: &ConvBn<T>,
    cache: &ConvBnCache<T>,
    grad: &Tensor<T>,
    out: &mut Vec<Tensor<T>>,
) -> Result<Tensor<T>> {
    let (dz, bn_grads) = match (&p.bn, &cache.bn) {
        (Some(bn), Some((c, pre))) => {
            let g = batchnorm2d_backward(c, bn, &relu_backward(pre, grad)?)?;
            (g.grad_x, Some([g.grad_gamma, g.grad_beta]))
        }
        _ => (grad.clone(), None),
    };
    let g = conv2d_backward(&cache.input, &p.conv, &dz)?;
    out.push(g.grad_weight);
    if let Some(b) = bn_grads {
        out.extend(b);
    }
    Ok(g.grad_x)
}

/// Forward state needed by [`network_backward`].
#[derive(Debug, Clone)]
pub struct NetworkCache<T> {
    stem: ConvBnCache<T>,
    pool: Option<(Vec<usize>, Vec<usize>)>,
    blocks: Vec<BlockCache<T>>,
    post: Option<ConvBnCache<T>>,
    pooled_shape: Vec<usize>,
    features: Tensor<T>,
}

impl<T: Element> NetworkCache<T> {
    pub fn block_caches(&self) -> &[BlockCache<T>] {
        &self.blocks
    }
}

#[derive(Debug, Clone)]
pub struct NetworkOutput<T> {
    pub logits: Tensor<T>,
    /// Per gated block (in block order), one decision per sample.
    pub decisions: Vec<Vec<GateDecision<T>>>,
    pub cache: NetworkCache<T>,
}

#[derive(Debug, Clone)]
pub struct NetworkGrads<T> {
    /// In [`Network::trainable_mut`] order.
    pub params: Vec<Tensor<T>>,
    pub grad_images: Tensor<T>,
    pub grad_questions: Option<Tensor<T>>,
}

impl<T: Element> Network<T> {
    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for bn in [self.stem.bn.as_mut(), self.post.as_mut().and_then(|p| p.bn.as_mut())].into_iter().flatten() {
            bn.mode = mode;
        }
        for b in &mut self.blocks {
            b.set_bn_mode(mode);
        }
    }

    /// Set the active expert count of every gated block.
    pub fn set_k(&mut self, k: usize) -> Result<()> {
        for b in self.blocks.iter_mut().filter(|b| b.is_gated()) {
            if k == 0 || k > b.cardinality {
                return Err(Error::KOutOfRange { k, cardinality: b.cardinality });
            }
            b.k = k;
        }
        self.config.k = k;
        for s in &mut self.config.stages {
            s.k = None;
        }
        Ok(())
    }

    pub fn gated_block_names(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .zip(&self.block_names)
            .filter(|(b, _)| b.is_gated())
            .map(|(_, n)| n.as_str())
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        push_conv_bn_mut(&mut v, &mut self.stem);
        for b in &mut self.blocks {
            v.extend(b.trainable_mut());
        }
        if let Some(p) = &mut self.post {
            push_conv_bn_mut(&mut v, p);
        }
        v.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            v.push(b);
        }
        v
    }

    pub fn parameter_count(&mut self) -> usize {
        self.trainable_mut().iter().map(|t| t.len()).sum()
    }

    /// Every tensor, running statistics included, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        push_conv_bn(&mut v, "stem", &self.stem);
        for (b, name) in self.blocks.iter().zip(&self.block_names) {
            for (n, t) in b.named_tensors() {
                v.push((format!("{name}.{n}"), t));
            }
        }
        if let Some(p) = &self.post {
            push_conv_bn(&mut v, "post", p);
        }
        v.push(("head.weight".into(), &self.head.weight));
        if let Some(b) = &self.head.bias {
            v.push(("head.bias".into(), b));
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        fn bn_mut<'a, T>(v: &mut Vec<&'a mut Tensor<T>>, p: &'a mut BatchNorm2dParams<T>) {
            v.push(&mut p.gamma);
            v.push(&mut p.beta);
            v.push(&mut p.running_mean);
            v.push(&mut p.running_var);
        }
        v.push(&mut self.stem.conv.weight);
        if let Some(bn) = &mut self.stem.bn {
            bn_mut(&mut v, bn);
        }
        for b in &mut self.blocks {
            v.push(&mut b.conv_reduce.weight);
            bn_mut(&mut v, &mut b.bn_reduce);
            v.push(&mut b.conv_conv.weight);
            bn_mut(&mut v, &mut b.bn_mid);
            v.push(&mut b.conv_expand.weight);
            bn_mut(&mut v, &mut b.bn_expand);
            if let Some(s) = &mut b.shortcut {
                v.push(&mut s.conv.weight);
                bn_mut(&mut v, &mut s.bn);
            }
            if let Some(c) = &mut b.controller {
                v.extend(c.tensors_mut());
            }
        }
        if let Some(p) = &mut self.post {
            v.push(&mut p.conv.weight);
            if let Some(bn) = &mut p.bn {
                bn_mut(&mut v, bn);
            }
        }
        v.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            v.push(b);
        }
        v
    }

    /// Concatenated tensor dumps in [`Network::named_tensors`] order.
    pub fn write_parameters(&self, out: &mut impl Write) -> Result<()> {
        for (_, t) in self.named_tensors() {
            t.write_dump(out)?;
        }
        Ok(())
    }

    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_parameters(&mut v).expect("writing to memory");
        v
    }

    pub fn read_parameters(&mut self, input: &mut impl Read) -> Result<()> {
        for t in self.named_tensors_mut() {
            let loaded = Tensor::read_dump(input)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match network {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    /// Write `config.json`, `params.bin` and a `params.txt` manifest.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.config.to_json())?;
        std::fs::write(dir.join("params.bin"), self.parameter_bytes())?;
        let mut manifest = String::new();
        for (name, t) in self.named_tensors() {
            manifest.push_str(&format!("{name} {:?}\n", t.shape()));
        }
        std::fs::write(dir.join("params.txt"), manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let cfg = parse_config(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let mut net = build_network(&cfg, cfg.seed)?;
        let bytes = std::fs::read(dir.join("params.bin"))?;
        net.read_parameters(&mut bytes.as_slice())?;
        Ok(net)
    }
}

fn push_conv_bn_mut<'a, T>(v: &mut Vec<&'a mut Tensor<T>>, p: &'a mut ConvBn<T>) {
    v.push(&mut p.conv.weight);
    if let Some(bn) = &mut p.bn {
        v.push(&mut bn.gamma);
        v.push(&mut bn.beta);
    }
}

fn push_conv_bn<'a, T: Element>(v: &mut Vec<(String, &'a Tensor<T>)>, name: &str, p: &'a ConvBn<T>) {
    v.push((format!("{name}.weight"), &p.conv.weight));
    if let Some(bn) = &p.bn {
        push_bn(v, &format!("{name}.bn"), bn);
    }
}

/// Logits for a batch of images and questions. Every gated block's
/// controller sees that block's input feature map.
pub fn network_forward<T: Element>(
    net: &Network<T>,
    images: &Tensor<T>,
    questions: Option<&Tensor<T>>,
    counter: &mut MacCounter,
    mode: ExecMode,
) -> Result<NetworkOutput<T>> {
    let (n, c, h, w) = images.dims4("images")?;
    let inp = &net.config.input;
    if c != inp.channels {
        return Err(Error::Shape(format!("network expects {} input channels, got {c}", inp.channels)));
    }
    if let Some(q) = questions {
        if q.shape()[0] != n {
            return Err(Error::Shape(format!("{n} images but {} questions", q.shape()[0])));
        }
    }
    let _ = (h, w);
    let (mut x, stem) = conv_bn_forward(images, &net.stem, counter)?;
    let pool = match net.pool {
        Some(spec) => {
            let shape = x.shape().to_vec();
            let (y, arg) = maxpool2d_forward(&x, spec, counter)?;
            x = y;
            Some((shape, arg))
        }
        None => None,
    };
    let mut blocks = Vec::with_capacity(net.blocks.len());
    let mut decisions = Vec::new();
    for b in &net.blocks {
        let out = block_forward(&x, questions, b, mode, counter)?;
        if b.is_gated() {
            decisions.push(out.decisions);
        }
        blocks.push(out.cache);
        x = out.y;
    }
    let post = match &net.post {
        Some(p) => {
            let (y, c) = conv_bn_forward(&x, p, counter)?;
            x = y;
            Some(c)
        }
        None => None,
    };
    let pooled_shape = x.shape().to_vec();
    let features = global_avg_pool_forward(&x, counter)?;
    let logits = linear_forward(&features, &net.head, counter)?;
    Ok(NetworkOutput {
        logits,
        decisions,
        cache: NetworkCache { stem, pool, blocks, post, pooled_shape, features },
    })
}

/// Gradients given the upstream gradient on the logits; `balance_weight`
/// adds that multiple of every gated block's balance loss.
pub fn network_backward<T: Element>(
    net: &Network<T>,
    cache: &NetworkCache<T>,
    grad_logits: &Tensor<T>,
    balance_weight: T,
) -> Result<NetworkGrads<T>> {
    if cache.blocks.len() != net.blocks.len() {
        return Err(Error::MissingCache("network blocks"));
    }
    let gl = linear_backward(&cache.features, &net.head, grad_logits)?;
    let mut g = global_avg_pool_backward(&cache.pooled_shape, &gl.grad_x)?;
    let mut post_grads = Vec::new();
    if let (Some(p), Some(c)) = (&net.post, &cache.post) {
        g = conv_bn_backward(p, c, &g, &mut post_grads)?;
    }
    let mut block_grads = Vec::with_capacity(net.blocks.len());
    let mut grad_q: Option<Tensor<T>> = None;
    for (b, c) in net.blocks.iter().zip(&cache.blocks).rev() {
        let bg = block_backward(b, c, &g, balance_weight)?;
        if let Some(q) = &bg.grad_q {
            match &mut grad_q {
                Some(acc) => acc.add_assign(q)?,
                None => grad_q = Some(q.clone()),
            }
        }
        g = bg.grad_x.clone();
        block_grads.push(bg);
    }
    if let Some((shape, arg)) = &cache.pool {
        g = maxpool2d_backward(shape, arg, &g)?;
    }
    let mut params = Vec::new();
    let grad_images = conv_bn_backward(&net.stem, &cache.stem, &g, &mut params)?;
    for bg in block_grads.iter().rev() {
        params.extend(bg.tensors().into_iter().cloned());
    }
    params.extend(post_grads);
    params.push(gl.grad_weight);
    if let Some(b) = gl.grad_bias {
        params.push(b);
    }
    Ok(NetworkGrads { params, grad_images, grad_questions: grad_q })
}

/// Fold the batch statistics of a training-mode pass into running averages.
pub fn update_running_stats<T: Element>(net: &mut Network<T>, cache: &NetworkCache<T>) {
    if let (Some(bn), Some((c, _))) = (&mut net.stem.bn, &cache.stem.bn) {
        bn.update_running(c);
    }
    for (b, c) in net.blocks.iter_mut().zip(&cache.blocks) {
        b.update_running_stats(c);
    }
    if let (Some(p), Some(c)) = (&mut net.post, &cache.post) {
        if let (Some(bn), Some((bc, _))) = (&mut p.bn, &c.bn) {
            bn.update_running(bc);
        }
    }
}
