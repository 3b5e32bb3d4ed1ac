//! Batch normalization over NCHW feature maps.
//!
//! Besides the ordinary per-channel form this module normalizes *mapped*
//! layouts: every `(sample, slot)` plane of the input is assigned a parameter
//! channel (or none). Sparse block execution stores only the gathered channels
//! of each sample, and the masked dense oracle excludes unexecuted paths; in
//! both, statistics of a parameter channel are taken over exactly the planes
//! mapped to it, visited in ascending sample order.

use crate::error::{Error, Result};
use crate::nn::counter::{cost, MacCounter};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2dParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Element> BatchNorm2dParams<T> {
    /// gamma = 1, beta = 0, running stats (0, 1).
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::from_f64(DEFAULT_EPS),
            momentum: T::from_f64(DEFAULT_MOMENTUM),
            mode: BnMode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Fold the batch statistics recorded in `cache` into the running
    /// averages. Channels that saw no data keep their previous values.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != BnMode::Training {
            return;
        }
        let m = self.momentum;
        let keep = T::one() - m;
        for (c, stats) in cache.stats.iter().enumerate() {
            if let Some(st) = stats {
                let rm = &mut self.running_mean.data_mut()[c];
                *rm = keep * *rm + m * st.mean;
                let rv = &mut self.running_var.data_mut()[c];
                *rv = keep * *rv + m * st.var;
            }
        }
    }
}

/// Parameter channel of every `(sample, slot)` plane; `None` planes are
/// excluded from statistics, produce zeros and receive zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub slots: Vec<Vec<Option<usize>>>,
}

impl ChannelMap {
    pub fn identity(n: usize, c: usize) -> Self {
        Self { slots: vec![(0..c).map(Some).collect(); n] }
    }

    /// Slots of `sample` mapped to the listed parameter channels.
    pub fn from_channels(per_sample: Vec<Vec<usize>>) -> Self {
        Self {
            slots: per_sample
                .into_iter()
                .map(|v| v.into_iter().map(Some).collect())
                .collect(),
        }
    }

    /// Identity layout with `keep[n][c] == false` planes excluded.
    pub fn masked(keep: &[Vec<bool>]) -> Self {
        Self {
            slots: keep
                .iter()
                .map(|row| row.iter().enumerate().map(|(c, &k)| k.then_some(c)).collect())
                .collect(),
        }
    }

    /// For each parameter channel, the `(sample, slot)` planes mapped to it in
    /// ascending sample order.
    fn planes_by_channel(&self, channels: usize) -> Result<Vec<Vec<(usize, usize)>>> {
        let mut by = vec![Vec::new(); channels];
        for (n, row) in self.slots.iter().enumerate() {
            for (j, slot) in row.iter().enumerate() {
                if let Some(c) = *slot {
                    if c >= channels {
                        return Err(Error::ChannelIndexOutOfBounds { index: c, channels });
                    }
                    by[c].push((n, j));
                }
            }
        }
        Ok(by)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: T,
    pub var: T,
    pub inv_std: T,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub mode: BnMode,
    /// Batch statistics per parameter channel (training mode, channels with data).
    pub stats: Vec<Option<ChannelStats<T>>>,
    pub map: ChannelMap,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

/// Two-pass population mean and variance over `planes` of `data`.
fn plane_stats<T: Element>(data: &[T], planes: &[(usize, usize)], k: usize, hw: usize) -> (T, T) {
    let count = T::from_f64((planes.len() * hw) as f64);
    let mut sum = T::zero();
    for &(n, j) in planes {
        let base = (n * k + j) * hw;
        for &v in &data[base..base + hw] {
            sum = sum + v;
        }
    }
    let mean = sum / count;
    let mut sq = T::zero();
    for &(n, j) in planes {
        let base = (n * k + j) * hw;
        for &v in &data[base..base + hw] {
            let d = v - mean;
            sq = sq + d * d;
        }
    }
    (mean, sq / count)
}

pub fn batchnorm2d_forward<T: Element>(
    x: &Tensor<T>,
    params: &BatchNorm2dParams<T>,
    counter: &mut MacCounter,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, _, _) = x.dims4("batchnorm input")?;
    batchnorm2d_forward_mapped(x, params, &ChannelMap::identity(n, c), counter)
}

pub fn batchnorm2d_forward_mapped<T: Element>(
    x: &Tensor<T>,
    params: &BatchNorm2dParams<T>,
    map: &ChannelMap,
    counter: &mut MacCounter,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, k, h, w) = x.dims4("batchnorm input")?;
    let channels = params.channels();
    if map.slots.len() != n || map.slots.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!("batchnorm: channel map does not cover input {:?}", x.shape())));
    }
    for t in [&params.beta, &params.running_mean, &params.running_var] {
        if t.len() != channels {
            return Err(Error::Shape("batchnorm parameter lengths disagree".into()));
        }
    }
    let hw = h * w;
    let by = map.planes_by_channel(channels)?;
    let xd = x.data();
    let mut stats = vec![None; channels];
    match params.mode {
        BnMode::Training => {
            for (ch, planes) in by.iter().enumerate() {
                if planes.is_empty() {
                    continue;
                }
                if planes.len() * hw < 2 {
                    return Err(Error::BatchTooSmall);
                }
                let (mean, var) = plane_stats(xd, planes, k, hw);
                let inv_std = T::one() / (var + params.eps).sqrt();
                stats[ch] = Some(ChannelStats { mean, var, inv_std });
            }
        }
        BnMode::Inference => {
            for (ch, planes) in by.iter().enumerate() {
                if planes.is_empty() {
                    continue;
                }
                let mean = params.running_mean.data()[ch];
                let var = params.running_var.data()[ch];
                stats[ch] = Some(ChannelStats { mean, var, inv_std: T::one() / (var + params.eps).sqrt() });
            }
        }
    }

    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut executed = 0usize;
    for (ch, planes) in by.iter().enumerate() {
        let Some(st) = stats[ch] else { continue };
        let (g, b) = (params.gamma.data()[ch], params.beta.data()[ch]);
        for &(s, j) in planes {
            let base = (s * k + j) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - st.mean) * st.inv_std;
                x_hat[i] = xh;
                y[i] = g * xh + b;
            }
            executed += hw;
        }
    }
    counter.aux_ops += cost::BATCHNORM * executed as u64;

    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnCache { x_hat: Tensor::new(shape, x_hat)?, mode: params.mode, stats, map: map.clone() },
    ))
}

pub fn batchnorm2d_backward<T: Element>(
    cache: &BnCache<T>,
    params: &BatchNorm2dParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::Shape(format!(
            "batchnorm_backward: grad_out {:?}, forward output {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (_, k, h, w) = grad_out.dims4("batchnorm grad")?;
    let hw = h * w;
    let channels = params.channels();
    let by = cache.map.planes_by_channel(channels)?;
    let gd = grad_out.data();
    let xh = cache.x_hat.data();
    let mut gx = vec![T::zero(); grad_out.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];

    for (ch, planes) in by.iter().enumerate() {
        let Some(st) = cache.stats[ch] else { continue };
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for &(s, j) in planes {
            let base = (s * k + j) * hw;
            for i in base..base + hw {
                sum_dy = sum_dy + gd[i];
                sum_dy_xh = sum_dy_xh + gd[i] * xh[i];
            }
        }
        ggamma[ch] = sum_dy_xh;
        gbeta[ch] = sum_dy;
        let coef = params.gamma.data()[ch] * st.inv_std;
        match cache.mode {
            BnMode::Training => {
                let count = T::from_f64((planes.len() * hw) as f64);
                let mean_dy = sum_dy / count;
                let mean_dy_xh = sum_dy_xh / count;
                for &(s, j) in planes {
                    let base = (s * k + j) * hw;
                    for i in base..base + hw {
                        gx[i] = coef * (gd[i] - mean_dy - xh[i] * mean_dy_xh);
                    }
                }
            }
            BnMode::Inference => {
                for &(s, j) in planes {
                    let base = (s * k + j) * hw;
                    for i in base..base + hw {
                        gx[i] = coef * gd[i];
                    }
                }
            }
        }
    }

    Ok(BnGrads {
        grad_x: Tensor::new(grad_out.shape().to_vec(), gx)?,
        grad_gamma: Tensor::from_vec(ggamma),
        grad_beta: Tensor::from_vec(gbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Tensor<f64> {
        Tensor::from_fn(&[3, 2, 2, 3], |i| ((i * 37) % 11) as f64 * 0.7 - 2.0)
    }

    #[test]
    fn training_output_is_standardized() {
        let x = input();
        let p = BatchNorm2dParams::<f64>::new(2);
        let (y, _) = batchnorm2d_forward(&x, &p, &mut MacCounter::new()).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..2).flat_map(move |h| (0..3).map(move |w| (n, h, w))))
                .map(|(n, h, w)| y.at4(n, c, h, w))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 3.25);
        let mut p = BatchNorm2dParams::<f64>::new(1);
        p.beta = Tensor::from_vec(vec![0.75]);
        let (y, _) = batchnorm2d_forward(&x, &p, &mut MacCounter::new()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn batch_too_small() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 1]);
        let p = BatchNorm2dParams::<f64>::new(2);
        let err = batchnorm2d_forward(&x, &p, &mut MacCounter::new()).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall));
        assert_eq!(err.to_string(), "batch too small for batch statistics");
        let mut inf = p.clone();
        inf.mode = BnMode::Inference;
        assert!(batchnorm2d_forward(&x, &inf, &mut MacCounter::new()).is_ok());
    }

    #[test]
    fn running_stats_update() {
        let x = input();
        let mut p = BatchNorm2dParams::<f64>::new(2);
        let (_, cache) = batchnorm2d_forward(&x, &p, &mut MacCounter::new()).unwrap();
        p.update_running(&cache);
        let st = cache.stats[0].unwrap();
        assert!((p.running_mean.data()[0] - 0.1 * st.mean).abs() < 1e-15);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * st.var)).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_identities() {
        let x = input();
        let p = BatchNorm2dParams::<f64>::new(2);
        let (_, cache) = batchnorm2d_forward(&x, &p, &mut MacCounter::new()).unwrap();
        let g = batchnorm2d_backward(&cache, &p, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.grad_x.data().iter().chain(g.grad_gamma.data()).all(|&v| v == 0.0));

        let dy = Tensor::<f64>::from_fn(x.shape(), |i| (i as f64).sin());
        let g = batchnorm2d_backward(&cache, &p, &dy).unwrap();
        let per_channel = dy.reduce_sum(&[0, 2, 3]).unwrap();
        for c in 0..2 {
            assert!((g.grad_beta.data()[c] - per_channel.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_planes_are_excluded() {
        let x = input();
        let p = BatchNorm2dParams::<f64>::new(2);
        // sample 1 channel 0 excluded: stats of channel 0 come from samples 0 and 2
        let keep = vec![vec![true, true], vec![false, true], vec![true, true]];
        let (y, cache) =
            batchnorm2d_forward_mapped(&x, &p, &ChannelMap::masked(&keep), &mut MacCounter::new()).unwrap();
        let vals: Vec<f64> = [0, 2]
            .iter()
            .flat_map(|&n| (0..2).flat_map(move |h| (0..3).map(move |w| (n, h, w))))
            .map(|(n, h, w)| x.at4(n, 0, h, w))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((cache.stats[0].unwrap().mean - m).abs() < 1e-14);
        assert!((0..2).all(|h| (0..3).all(|w| y.at4(1, 0, h, w) == 0.0)));
    }
}
