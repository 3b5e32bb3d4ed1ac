//! Question-conditioned gate controller.
//!
//! For one sample the controller attends over the `D` spatial regions of the
//! incoming feature map (each an `F`-dim feature vector), pools the regions with
//! the attention, adds the question vector, and maps the multimodal query to
//! `E` expert logits. Rectified logits are L1-normalized into gate weights and
//! the top-k experts are selected for execution.
//!
//! Shapes: `w_ia: Hd x F`, `w_qa: Hd x Q`, `b_a: Hd`, `w_p: 1 x Hd`,
//! `b_p: 1` (shared across regions), `w_proj: Q x F` (absent when `F == Q`,
//! meaning identity), `w_g: E x Q`, `b_g: E`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::counter::{cost, MacCounter};
use crate::nn::layers::{softmax_slice, softmax_slice_backward};
use crate::tensor::{Element, Tensor};

/// `||relu(g)||_1` at or below this triggers the uniform fallback.
pub const FALLBACK_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GateControllerParams<T> {
    pub w_ia: Tensor<T>,
    pub w_qa: Tensor<T>,
    pub b_a: Tensor<T>,
    pub w_p: Tensor<T>,
    pub b_p: Tensor<T>,
    pub w_proj: Option<Tensor<T>>,
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct GateControllerGrads<T> {
    pub w_ia: Tensor<T>,
    pub w_qa: Tensor<T>,
    pub b_a: Tensor<T>,
    pub w_p: Tensor<T>,
    pub b_p: Tensor<T>,
    pub w_proj: Option<Tensor<T>>,
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
}

/// Output of the controller for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision<T> {
    pub g_raw: Vec<T>,
    pub g_norm: Vec<T>,
    /// Ascending expert indices chosen for execution.
    pub selected: Vec<usize>,
    /// Attention over regions.
    pub attention: Vec<T>,
    pub fallback_used: bool,
}

impl<T: Element> GateControllerParams<T> {
    pub fn feature_dim(&self) -> usize {
        self.w_ia.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ia.shape()[0]
    }

    pub fn question_dim(&self) -> usize {
        self.w_qa.shape()[1]
    }

    pub fn experts(&self) -> usize {
        self.w_g.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (hd, f, q, e) = (self.hidden_dim(), self.feature_dim(), self.question_dim(), self.experts());
        let expect = |t: &Tensor<T>, s: &[usize], name: &str| -> Result<()> {
            if t.shape() != s {
                return Err(Error::Shape(format!("gate {name}: expected {s:?}, got {:?}", t.shape())));
            }
            Ok(())
        };
        expect(&self.w_qa, &[hd, q], "w_qa")?;
        expect(&self.b_a, &[hd], "b_a")?;
        expect(&self.w_p, &[1, hd], "w_p")?;
        expect(&self.b_p, &[1], "b_p")?;
        expect(&self.w_g, &[e, q], "w_g")?;
        expect(&self.b_g, &[e], "b_g")?;
        match &self.w_proj {
            Some(w) => expect(w, &[q, f], "w_proj"),
            None if f == q => Ok(()),
            None => Err(Error::Shape(format!("gate: w_proj required when F={f} != Q={q}"))),
        }
    }

    pub fn zeros_like(&self) -> GateControllerGrads<T> {
        GateControllerGrads {
            w_ia: Tensor::zeros(self.w_ia.shape()),
            w_qa: Tensor::zeros(self.w_qa.shape()),
            b_a: Tensor::zeros(self.b_a.shape()),
            w_p: Tensor::zeros(self.w_p.shape()),
            b_p: Tensor::zeros(self.b_p.shape()),
            w_proj: self.w_proj.as_ref().map(|w| Tensor::zeros(w.shape())),
            w_g: Tensor::zeros(self.w_g.shape()),
            b_g: Tensor::zeros(self.b_g.shape()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("w_ia", &self.w_ia),
            ("w_qa", &self.w_qa),
            ("b_a", &self.b_a),
            ("w_p", &self.w_p),
            ("b_p", &self.b_p),
        ];
        if let Some(w) = &self.w_proj {
            v.push(("w_proj", w));
        }
        v.push(("w_g", &self.w_g));
        v.push(("b_g", &self.b_g));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_ia, &mut self.w_qa, &mut self.b_a, &mut self.w_p, &mut self.b_p];
        if let Some(w) = &mut self.w_proj {
            v.push(w);
        }
        v.push(&mut self.w_g);
        v.push(&mut self.b_g);
        v
    }
}

impl<T: Element> GateControllerGrads<T> {
    /// Same order as [`GateControllerParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.w_ia, &self.w_qa, &self.b_a, &self.w_p, &self.b_p];
        if let Some(w) = &self.w_proj {
            v.push(w);
        }
        v.push(&self.w_g);
        v.push(&self.b_g);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_ia, &mut self.w_qa, &mut self.b_a, &mut self.w_p, &mut self.b_p];
        if let Some(w) = &mut self.w_proj {
            v.push(w);
        }
        v.push(&mut self.w_g);
        v.push(&mut self.b_g);
        v
    }

    pub fn accumulate(&mut self, other: &GateControllerGrads<T>) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// Operation count charged to `aux_ops` by one controller forward pass.
pub fn controller_ops(regions: usize, f: usize, q: usize, hd: usize, e: usize, projected: bool) -> u64 {
    let (d, f, q, hd, e) = (regions as u64, f as u64, q as u64, hd as u64, e as u64);
    let mut ops = d * hd * f // image features to hidden
        + hd * q // question to hidden
        + cost::TANH * d * hd
        + d * hd // attention scores
        + cost::SOFTMAX * d
        + d * f; // attention pooling
    if projected {
        ops += q * f;
    }
    ops + e * q // gate logits
        + e // L1 normalization
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `m` (rows x cols, row-major) times `v`.
fn matvec<T: Element>(m: &[T], cols: usize, v: &[T]) -> Vec<T> {
    m.chunks(cols).map(|row| dot(row, v)).collect()
}

/// `m^T` times `v`.
fn matvec_t<T: Element>(m: &[T], cols: usize, v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (row, &s) in m.chunks(cols).zip(v) {
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + w * s;
        }
    }
    out
}

fn add_outer<T: Element>(acc: &mut [T], cols: usize, left: &[T], right: &[T]) {
    for (row, &l) in acc.chunks_mut(cols).zip(left) {
        for (a, &r) in row.iter_mut().zip(right) {
            *a = *a + l * r;
        }
    }
}

/// Intermediates of [`attention_pool`] needed for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    /// `D x Hd`.
    pub h_a: Vec<T>,
    pub pooled: Vec<T>,
}

/// Soft attention over regions. `v_i` is `D x F`, `v_q` has length `Q`.
/// Returns `(v_tilde, p, cache)`.
pub fn attention_pool<T: Element>(
    v_i: &Tensor<T>,
    v_q: &[T],
    params: &GateControllerParams<T>,
    counter: &mut MacCounter,
) -> Result<(Vec<T>, Vec<T>, AttentionCache<T>)> {
    let (regions, f) = match v_i.shape() {
        &[d, f] => (d, f),
        s => return Err(Error::Shape(format!("attention_pool: v_I must be D x F, got {s:?}"))),
    };
    let (hd, q) = (params.hidden_dim(), params.question_dim());
    if f != params.feature_dim() || v_q.len() != q {
        return Err(Error::Shape(format!(
            "attention_pool: v_I {:?} / v_Q {} for controller F={} Q={q}",
            v_i.shape(),
            v_q.len(),
            params.feature_dim()
        )));
    }
    let vi = v_i.data();
    let wia = params.w_ia.data();
    let q_term: Vec<T> = matvec(params.w_qa.data(), q, v_q)
        .into_iter()
        .zip(params.b_a.data())
        .map(|(a, &b)| a + b)
        .collect();
    let wp = params.w_p.data();
    let bp = params.b_p.data()[0];
    let mut h_a = Vec::with_capacity(regions * hd);
    let mut scores = Vec::with_capacity(regions);
    for row in vi.chunks(f) {
        let start = h_a.len();
        for (j, w) in wia.chunks(f).enumerate() {
            h_a.push((dot(w, row) + q_term[j]).tanh());
        }
        scores.push(dot(wp, &h_a[start..]) + bp);
    }
    let p = softmax_slice(&scores)?;
    let mut pooled = vec![T::zero(); f];
    for (row, &pd) in vi.chunks(f).zip(&p) {
        for (acc, &v) in pooled.iter_mut().zip(row) {
            *acc = *acc + pd * v;
        }
    }
    let v_tilde = match &params.w_proj {
        Some(w) => matvec(w.data(), f, &pooled),
        None => pooled.clone(),
    };
    counter.aux_ops += controller_ops(regions, f, q, hd, 0, params.w_proj.is_some());
    Ok((v_tilde, p, AttentionCache { h_a, pooled }))
}

/// Rectify and L1-normalize gate logits. Returns `(g_norm, fallback_used)`;
/// when the rectified mass is at most [`FALLBACK_THRESHOLD`] the gates are
/// uniform.
pub fn normalize_gates<T: Element>(g_raw: &[T]) -> Result<(Vec<T>, bool)> {
    if g_raw.is_empty() {
        return Err(Error::Shape("normalize_gates: no experts".into()));
    }
    if g_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate logits".into()));
    }
    let r: Vec<T> = g_raw.iter().map(|&v| v.max(T::zero())).collect();
    let l1 = r.iter().fold(T::zero(), |a, &v| a + v);
    if l1 > T::from_f64(FALLBACK_THRESHOLD) {
        Ok((r.into_iter().map(|v| v / l1).collect(), false))
    } else {
        let u = T::one() / T::from_f64(g_raw.len() as f64);
        Ok((vec![u; g_raw.len()], true))
    }
}

/// Gate logits `W_g (v_tilde + v_q) + b_g` and their normalization.
/// Returns `(g_raw, g_norm, fallback_used)`.
pub fn gate_weights<T: Element>(
    v_tilde: &[T],
    v_q: &[T],
    params: &GateControllerParams<T>,
    counter: &mut MacCounter,
) -> Result<(Vec<T>, Vec<T>, bool)> {
    let q = params.question_dim();
    if v_tilde.len() != q || v_q.len() != q {
        return Err(Error::Shape(format!(
            "gate_weights: v_tilde {} / v_Q {} for Q={q}",
            v_tilde.len(),
            v_q.len()
        )));
    }
    if v_tilde.iter().chain(v_q).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate controller input".into()));
    }
    let u: Vec<T> = v_tilde.iter().zip(v_q).map(|(&a, &b)| a + b).collect();
    let g_raw: Vec<T> = matvec(params.w_g.data(), q, &u)
        .into_iter()
        .zip(params.b_g.data())
        .map(|(a, &b)| a + b)
        .collect();
    let (g_norm, fallback) = normalize_gates(&g_raw)?;
    counter.aux_ops += controller_ops(0, 0, q, 0, params.experts(), false);
    Ok((g_raw, g_norm, fallback))
}

/// Indices of the `k` largest gates, smaller index first among ties,
/// returned in ascending order.
pub fn topk_select<T: Element>(g_norm: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > g_norm.len() {
        return Err(Error::KOutOfRange { k, cardinality: g_norm.len() });
    }
    let mut order: Vec<usize> = (0..g_norm.len()).collect();
    order.sort_by(|&a, &b| {
        g_norm[b]
            .partial_cmp(&g_norm[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// Squared coefficient of variation `(sigma / mu)^2` with population sigma.
pub fn cv_squared<T: Element>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::DegenerateImportance);
    }
    let n = T::from_f64(values.len() as f64);
    let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
    if !(mean > T::zero()) {
        return Err(Error::DegenerateImportance);
    }
    let var = values.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    Ok(var / (mean * mean))
}

/// Gradient of [`cv_squared`]: `2E / S^2 * (x_e - sum(x^2) / S)`.
pub fn cv_squared_grad<T: Element>(values: &[T]) -> Result<Vec<T>> {
    let s = values.iter().fold(T::zero(), |a, &v| a + v);
    if values.is_empty() || !(s > T::zero()) {
        return Err(Error::DegenerateImportance);
    }
    let sq = values.iter().fold(T::zero(), |a, &v| a + v * v);
    let e = T::from_f64(values.len() as f64);
    let two = T::one() + T::one();
    let coef = two * e / (s * s);
    Ok(values.iter().map(|&v| coef * (v - sq / s)).collect())
}

/// Per-expert sum of normalized gates over the batch (`B x E` rows).
pub fn importance<T: Element>(batch_gates: &[Vec<T>]) -> Result<Vec<T>> {
    let first = batch_gates.first().ok_or(Error::EmptyBatch)?;
    let mut imp = vec![T::zero(); first.len()];
    for row in batch_gates {
        if row.len() != imp.len() {
            return Err(Error::Shape("importance: ragged gate rows".into()));
        }
        for (a, &g) in imp.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok(imp)
}

/// CV^2 of the batch importance of every expert.
pub fn balance_loss<T: Element>(batch_gates: &[Vec<T>]) -> Result<T> {
    cv_squared(&importance(batch_gates)?)
}

/// Gradient of [`balance_loss`] with respect to every `g_norm[b][e]`.
pub fn balance_loss_grad<T: Element>(batch_gates: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let g = cv_squared_grad(&importance(batch_gates)?)?;
    Ok(vec![g; batch_gates.len()])
}

/// Cached intermediates of one full controller pass.
#[derive(Debug, Clone)]
pub struct ControllerCache<T> {
    pub v_i: Tensor<T>,
    pub v_q: Vec<T>,
    pub attention: AttentionCache<T>,
    pub v_tilde: Vec<T>,
}

/// Attention, gating and top-k selection for one sample.
pub fn controller_forward<T: Element>(
    v_i: &Tensor<T>,
    v_q: &[T],
    params: &GateControllerParams<T>,
    k: usize,
    counter: &mut MacCounter,
) -> Result<(GateDecision<T>, ControllerCache<T>)> {
    let (v_tilde, p, att) = attention_pool(v_i, v_q, params, counter)?;
    let (g_raw, g_norm, fallback_used) = gate_weights(&v_tilde, v_q, params, counter)?;
    let selected = topk_select(&g_norm, k)?;
    Ok((
        GateDecision { g_raw, g_norm, selected, attention: p, fallback_used },
        ControllerCache { v_i: v_i.clone(), v_q: v_q.to_vec(), attention: att, v_tilde },
    ))
}

/// Gradients of the controller for one sample, given the upstream gradient
/// on the normalized gates. Selection is treated as a constant; the fallback
/// branch passes no gradient to the logits. Parameter gradients are added
/// into `grads`; returns `(grad_v_i, grad_v_q)`.
pub fn controller_backward<T: Element>(
    cache: &ControllerCache<T>,
    decision: &GateDecision<T>,
    params: &GateControllerParams<T>,
    grad_g_norm: &[T],
    grads: &mut GateControllerGrads<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let e = params.experts();
    if grad_g_norm.len() != e {
        return Err(Error::Shape(format!("controller_backward: {} gate grads for {e} experts", grad_g_norm.len())));
    }
    let (regions, f) = (cache.v_i.shape()[0], cache.v_i.shape()[1]);
    let (hd, q) = (params.hidden_dim(), params.question_dim());

    // L1 normalization of rectified logits
    let mut d_graw = vec![T::zero(); e];
    if !decision.fallback_used {
        let l1 = decision.g_raw.iter().fold(T::zero(), |a, &v| a + v.max(T::zero()));
        let proj = dot(grad_g_norm, &decision.g_norm);
        for i in 0..e {
            if decision.g_raw[i] > T::zero() {
                d_graw[i] = (grad_g_norm[i] - proj) / l1;
            }
        }
    }

    let u: Vec<T> = cache.v_tilde.iter().zip(&cache.v_q).map(|(&a, &b)| a + b).collect();
    add_outer(grads.w_g.data_mut(), q, &d_graw, &u);
    for (b, &g) in grads.b_g.data_mut().iter_mut().zip(&d_graw) {
        *b = *b + g;
    }
    let d_u = matvec_t(params.w_g.data(), q, &d_graw);
    let mut d_vq = d_u.clone();

    let pooled = &cache.attention.pooled;
    let d_pooled = match (&params.w_proj, &mut grads.w_proj) {
        (Some(w), Some(gw)) => {
            add_outer(gw.data_mut(), f, &d_u, pooled);
            matvec_t(w.data(), f, &d_u)
        }
        _ => d_u,
    };

    let vi = cache.v_i.data();
    let p = &decision.attention;
    let mut d_vi = vec![T::zero(); regions * f];
    let mut d_p = Vec::with_capacity(regions);
    for (d, row) in vi.chunks(f).enumerate() {
        d_p.push(dot(&d_pooled, row));
        for (g, &dp) in d_vi[d * f..(d + 1) * f].iter_mut().zip(&d_pooled) {
            *g = *g + p[d] * dp;
        }
    }
    let d_scores = softmax_slice_backward(p, &d_p);

    let wp = params.w_p.data();
    let h_a = &cache.attention.h_a;
    let mut d_a_sum = vec![T::zero(); hd];
    let gw_ia = grads.w_ia.data_mut();
    for d in 0..regions {
        let ds = d_scores[d];
        let h = &h_a[d * hd..(d + 1) * hd];
        let row = &vi[d * f..(d + 1) * f];
        for j in 0..hd {
            grads.w_p.data_mut()[j] = grads.w_p.data_mut()[j] + ds * h[j];
            let da = ds * wp[j] * (T::one() - h[j] * h[j]);
            d_a_sum[j] = d_a_sum[j] + da;
            let wrow = &params.w_ia.data()[j * f..(j + 1) * f];
            let grow = &mut gw_ia[j * f..(j + 1) * f];
            let dv = &mut d_vi[d * f..(d + 1) * f];
            for c in 0..f {
                grow[c] = grow[c] + da * row[c];
                dv[c] = dv[c] + da * wrow[c];
            }
        }
        grads.b_p.data_mut()[0] = grads.b_p.data_mut()[0] + ds;
    }
    add_outer(grads.w_qa.data_mut(), q, &d_a_sum, &cache.v_q);
    for (b, &g) in grads.b_a.data_mut().iter_mut().zip(&d_a_sum) {
        *b = *b + g;
    }
    for (acc, g) in d_vq.iter_mut().zip(matvec_t(params.w_qa.data(), q, &d_a_sum)) {
        *acc = *acc + g;
    }

    Ok((Tensor::new(vec![regions, f], d_vi)?, d_vq))
}

/// One row of the gate-decision export.
pub struct DecisionRow<'a, T> {
    pub block_id: usize,
    pub sample_id: usize,
    pub k: usize,
    pub decision: &'a GateDecision<T>,
}

/// CSV export: `block_id,sample_id,k,fallback_used,g0..g{E-1},selected`, the
/// selected experts joined with `;`.
pub fn write_decisions_csv<T: Element, W: Write>(out: W, rows: &[DecisionRow<'_, T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let experts = rows.iter().map(|r| r.decision.g_norm.len()).max().unwrap_or(0);
    let mut header = vec!["block_id".to_string(), "sample_id".into(), "k".into(), "fallback_used".into()];
    header.extend((0..experts).map(|e| format!("g{e}")));
    header.push("selected".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.block_id.to_string(),
            r.sample_id.to_string(),
            r.k.to_string(),
            r.decision.fallback_used.to_string(),
        ];
        rec.extend(r.decision.g_norm.iter().map(|g| format!("{:e}", g.as_f64())));
        rec.resize(4 + experts, String::new());
        rec.push(r.decision.selected.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
