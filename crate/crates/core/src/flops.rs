//! Analytical cost model.
//!
//! Headline FLOPS are convolution multiply-accumulates,
//! `C_in * C_out * p^2 * H_o * W_o / groups` per layer. Linear-layer MACs and
//! element-wise work (batch norm, activations, pooling, gating) are reported
//! separately. Every count here is per sample and mirrors exactly what
//! [`MacCounter`](crate::nn::MacCounter) records during a forward pass.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gate::controller_ops;
use crate::netconfig::NetworkConfig;
use crate::nn::conv::window_out;
use crate::nn::counter::{cost, MacCounter};

/// Footnote formula for one (grouped) convolution.
pub fn conv_flops(c_in: usize, c_out: usize, p: usize, h_o: usize, w_o: usize, groups: usize) -> Result<u64> {
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Divisibility(format!("channels {c_in}->{c_out} not divisible by {groups} groups")));
    }
    let full = c_in as u64 * c_out as u64 * (p * p) as u64 * h_o as u64 * w_o as u64;
    Ok(full / groups as u64)
}

/// Convolution MACs of a gated bottleneck running `k` of `e` paths of width
/// `d`: `k*d*C*H1*W1 + 9*d^2*k*H2*W2 + k*d*C_out*H3*W3`.
#[allow(clippy::too_many_arguments)]
pub fn gated_block_flops(
    c: usize,
    c_out: usize,
    e: usize,
    d: usize,
    k: usize,
    (h1, w1): (usize, usize),
    (h2, w2): (usize, usize),
    (h3, w3): (usize, usize),
) -> Result<u64> {
    if k == 0 || k > e {
        return Err(Error::KOutOfRange { k, cardinality: e });
    }
    let (k, d) = (k as u64, d as u64);
    Ok(k * d * (c * h1 * w1) as u64 + 9 * d * d * k * (h2 * w2) as u64 + k * d * (c_out * h3 * w3) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
    Gate,
    Pool,
    Eltwise,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::Gate => "gate",
            LayerKind::Pool => "pool",
            LayerKind::Eltwise => "eltwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    pub conv_macs: u64,
    pub linear_macs: u64,
    pub aux_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerCost>,
    pub total_conv_macs: u64,
    pub total_linear_macs: u64,
    pub total_aux: u64,
    /// `(block name, k)` for every gated block.
    pub k_used: Vec<(String, usize)>,
    pub input: (usize, usize),
}

impl FlopsReport {
    /// Counter totals for a batch of `n` samples.
    pub fn for_batch(&self, n: usize) -> MacCounter {
        let n = n as u64;
        MacCounter {
            conv_macs: self.total_conv_macs * n,
            linear_macs: self.total_linear_macs * n,
            aux_ops: self.total_aux * n,
        }
    }

    /// Conv MACs of the gated blocks only.
    pub fn gated_conv_macs(&self) -> u64 {
        let gated: Vec<&str> = self.k_used.iter().map(|(n, _)| n.as_str()).collect();
        self.per_layer
            .iter()
            .filter(|l| {
                l.layer.rsplit_once('.').is_some_and(|(b, part)| {
                    gated.contains(&b) && matches!(part, "conv_reduce" | "conv_conv" | "conv_expand")
                })
            })
            .map(|l| l.conv_macs)
            .sum()
    }

    /// `layer,kind,conv_macs,aux_ops`; linear rows carry their MACs in the
    /// `conv_macs` column.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "kind", "conv_macs", "aux_ops"])?;
        for l in &self.per_layer {
            let macs = l.conv_macs + l.linear_macs;
            w.write_record([l.layer.clone(), l.kind.as_str().into(), macs.to_string(), l.aux_ops.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Builder {
    rows: Vec<LayerCost>,
}

impl Builder {
    fn push(&mut self, layer: String, kind: LayerKind, conv_macs: u64, aux_ops: u64) {
        self.rows.push(LayerCost { layer, kind, conv_macs, linear_macs: 0, aux_ops });
    }
}

/// Per-sample cost of `cfg` at its configured input size and `k` settings.
pub fn network_flops(cfg: &NetworkConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let oops = || Error::KernelTooLarge;
    let (h, w) = (cfg.input.height, cfg.input.width);
    let mut b = Builder { rows: Vec::new() };

    let st = &cfg.stem;
    let (mut ch, mut cw) = (
        window_out(h, st.kernel, st.stride, st.padding()).ok_or_else(oops)?,
        window_out(w, st.kernel, st.stride, st.padding()).ok_or_else(oops)?,
    );
    let mut c = st.out;
    let plane = (ch * cw) as u64;
    b.push(
        "stem".into(),
        LayerKind::Conv,
        conv_flops(cfg.input.channels, c, st.kernel, ch, cw, 1)?,
        (cost::BATCHNORM + cost::RELU) * c as u64 * plane,
    );
    if let Some(pool) = cfg.stem_pool() {
        (ch, cw) = pool.out_size(ch, cw)?;
        b.push("stem.maxpool".into(), LayerKind::Pool, 0, (pool.kernel * pool.kernel * c * ch * cw) as u64);
    }

    let mut k_used = Vec::new();
    for plan in cfg.block_plan() {
        let s = &plan.shape;
        let name = plan.name();
        let (e, d, k) = (s.cardinality, s.group_width, s.k);
        let kd = k * d;
        let (h2, w2) = (window_out(ch, 3, s.stride, 1).ok_or_else(oops)?, window_out(cw, 3, s.stride, 1).ok_or_else(oops)?);
        let (p1, p2) = ((ch * cw) as u64, (h2 * w2) as u64);
        if let Some((q, hd)) = s.gate {
            b.push(
                format!("{name}.gate"),
                LayerKind::Gate,
                0,
                controller_ops(ch * cw, c, q, hd, e, c != q),
            );
            k_used.push((name.clone(), k));
        }
        b.push(
            format!("{name}.conv_reduce"),
            LayerKind::Conv,
            conv_flops(c, kd, 1, ch, cw, 1)?,
            (cost::BATCHNORM + cost::RELU) * kd as u64 * p1,
        );
        let scale = if s.gate.is_some() { cost::GATE_SCALE } else { 0 };
        b.push(
            format!("{name}.conv_conv"),
            LayerKind::Conv,
            conv_flops(kd, kd, 3, h2, w2, k)?,
            (cost::BATCHNORM + cost::RELU + scale) * kd as u64 * p2,
        );
        let co = s.out_channels as u64;
        b.push(
            format!("{name}.conv_expand"),
            LayerKind::Conv,
            conv_flops(kd, s.out_channels, 1, h2, w2, 1)?,
            cost::BATCHNORM * co * p2,
        );
        if s.in_channels != s.out_channels || s.stride != 1 {
            b.push(
                format!("{name}.shortcut"),
                LayerKind::Conv,
                conv_flops(c, s.out_channels, 1, h2, w2, 1)?,
                cost::BATCHNORM * co * p2,
            );
        }
        b.push(format!("{name}.residual"), LayerKind::Eltwise, 0, (cost::RESIDUAL_ADD + cost::RELU) * co * p2);
        (ch, cw, c) = (h2, w2, s.out_channels);
    }

    if let Some(pc) = &cfg.post_conv {
        let aux = if pc.bn_relu { (cost::BATCHNORM + cost::RELU) * (pc.out * ch * cw) as u64 } else { 0 };
        b.push("post".into(), LayerKind::Conv, conv_flops(c, pc.out, 1, ch, cw, 1)?, aux);
        c = pc.out;
    }
    b.push("head.pool".into(), LayerKind::Pool, 0, cost::AVG_POOL * (c * ch * cw) as u64);
    let classes = cfg.head.classes;
    b.rows.push(LayerCost {
        layer: "head.linear".into(),
        kind: LayerKind::Linear,
        conv_macs: 0,
        linear_macs: (c * classes) as u64,
        aux_ops: cost::BIAS * classes as u64,
    });

    let rows = b.rows;
    Ok(FlopsReport {
        total_conv_macs: rows.iter().map(|r| r.conv_macs).sum(),
        total_linear_macs: rows.iter().map(|r| r.linear_macs).sum(),
        total_aux: rows.iter().map(|r| r.aux_ops).sum(),
        per_layer: rows,
        k_used,
        input: (h, w),
    })
}

/// [`network_flops`] with every gated block at `k`.
pub fn network_flops_at(cfg: &NetworkConfig, k: usize) -> Result<FlopsReport> {
    network_flops(&cfg.with_k(k)?)
}
