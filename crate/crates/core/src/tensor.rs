//! Dense row-major tensors.
//!
//! Feature maps are stored NCHW and convolution weights `O x (C_in/groups) x p x p`.
//! Every operation returns a fresh tensor; inputs are never mutated. Reductions
//! always accumulate in ascending index order so results are bitwise stable.

use std::fmt::{Debug, Display, LowerExp};
use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element types a [`Tensor`] can hold.
pub trait Element:
    Float + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Code written into tensor dumps (byte width of the element).
    const DTYPE_CODE: u8;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE_CODE: u8 = 4;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE_CODE: u8 = 8;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Magic prefix of the flat binary tensor dump.
pub const DUMP_MAGIC: &[u8; 8] = b"GMCTNSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero extent; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Extents of a rank-4 tensor, or a shape error naming `what`.
    pub fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("{what}: expected rank-4 NCHW, got {:?}", self.shape))),
        }
    }

    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        ((n * cc + c) * hh + h) * ww + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }

    /// Sample `n` of an NCHW batch as a `1 x C x H x W` tensor.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[n * per..(n + 1) * per].to_vec() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place accumulate, used by gradient buffers.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// `M x K` times `K x N`. Each output sums over K left to right.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(Error::Shape(format!("matmul: left operand {:?} is not a matrix", self.shape))),
        };
        let (k2, n) = match other.shape[..] {
            [k2, n] => (k2, n),
            _ => return Err(Error::Shape(format!("matmul: right operand {:?} is not a matrix", other.shape))),
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents disagree for {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in row.iter().enumerate() {
                let src = &other.data[kk * n..(kk + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::Shape(format!("transpose: {:?} is not a matrix", self.shape))),
        };
        Ok(Self::from_fn(&[n, m], |i| self.data[(i % m) * n + i / m]))
    }

    /// Sum over the given axes. Reducing every axis yields a one-element tensor
    /// of shape `[1]`; reduced axes are otherwise removed from the shape.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if let Some(&a) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::Shape(format!("reduce: axis {a} out of range for {:?}", self.shape)));
        }
        let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&a| self.shape[a]).collect()
        };
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for &a in &keep {
                o = o * self.shape[a] + idx[a];
            }
            out[o] = out[o] + v;
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self { shape: out_shape, data: out })
    }

    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let sum = self.reduce_sum(axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        let inv = T::one() / T::from_f64(count as f64);
        Ok(sum.map(|v| v * inv))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "compare: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy channels `idx` out of an NCHW tensor.
    pub fn gather_channels(&self, idx: &[usize]) -> Result<Self> {
        let (n, c, h, w) = self.dims4("gather_channels")?;
        check_indices(idx, c)?;
        if idx.is_empty() {
            return Err(Error::Shape("gather_channels: empty index list".into()));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * idx.len() * plane);
        for s in 0..n {
            for &ch in idx {
                let base = (s * c + ch) * plane;
                out.extend_from_slice(&self.data[base..base + plane]);
            }
        }
        Ok(Self { shape: vec![n, idx.len(), h, w], data: out })
    }

    /// Write `self` (N x K x H x W) into channels `idx` of a copy of `base`.
    pub fn scatter_channels(&self, idx: &[usize], base: &Self) -> Result<Self> {
        let (n, k, h, w) = self.dims4("scatter_channels src")?;
        let (bn, bc, bh, bw) = base.dims4("scatter_channels base")?;
        if (n, h, w) != (bn, bh, bw) {
            return Err(Error::Shape(format!(
                "scatter_channels: src {:?} and base {:?} disagree on N,H,W",
                self.shape, base.shape
            )));
        }
        if idx.len() != k {
            return Err(Error::Shape(format!(
                "scatter_channels: {} indices for {k} source channels",
                idx.len()
            )));
        }
        check_indices(idx, bc)?;
        let plane = h * w;
        let mut out = base.data.clone();
        for s in 0..n {
            for (j, &ch) in idx.iter().enumerate() {
                let src = (s * k + j) * plane;
                let dst = (s * bc + ch) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(Self { shape: base.shape.clone(), data: out })
    }

    /// Serialize into the flat binary dump format.
    pub fn write_dump(&self, out: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(17 + 4 * self.rank() + self.len() * T::DTYPE_CODE as usize);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.push(T::DTYPE_CODE);
        buf.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_dump(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_dump(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 13];
        input.read_exact(&mut head)?;
        if &head[..8] != DUMP_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if head[8] != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "dtype code {} does not match {}",
                head[8],
                T::NAME
            )));
        }
        let rank = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
        let mut ext = vec![0u8; 4 * rank];
        input.read_exact(&mut ext)?;
        let shape: Vec<usize> = ext
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let len = check_shape(&shape)?;
        let width = T::DTYPE_CODE as usize;
        let mut raw = vec![0u8; len * width];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Self::new(shape, data)
    }
}

fn check_indices(idx: &[usize], channels: usize) -> Result<()> {
    for (i, &ch) in idx.iter().enumerate() {
        if ch >= channels {
            return Err(Error::ChannelIndexOutOfBounds { index: ch, channels });
        }
        if i > 0 && idx[i - 1] >= ch {
            return Err(Error::IndicesNotIncreasing);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn offset_is_row_major_nchw() {
        let t = ramp(&[2, 3, 4, 5]);
        assert_eq!(t.at4(1, 2, 3, 4), (((3 + 2) * 4 + 3) * 5 + 4) as f64);
        assert_eq!(t.at4(0, 1, 0, 2), 22.0);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn gather_picks_channels() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 1, 1], |i| [10.0, 11.0, 12.0, 13.0][i]);
        let g = x.gather_channels(&[0, 2]).unwrap();
        assert_eq!(g.shape(), &[1, 2, 1, 1]);
        assert_eq!(g.data(), &[10.0, 12.0]);
        assert_eq!(x.gather_channels(&[0, 1, 2, 3]).unwrap(), x);
    }

    #[test]
    fn gather_errors() {
        let x = ramp(&[1, 4, 2, 2]);
        assert!(matches!(
            x.gather_channels(&[0, 4]),
            Err(Error::ChannelIndexOutOfBounds { index: 4, channels: 4 })
        ));
        assert!(matches!(x.gather_channels(&[2, 1]), Err(Error::IndicesNotIncreasing)));
        assert!(matches!(x.gather_channels(&[1, 1]), Err(Error::IndicesNotIncreasing)));
        assert_eq!(Error::IndicesNotIncreasing.to_string(), "indices must be strictly increasing");
        assert!(Error::ChannelIndexOutOfBounds { index: 4, channels: 4 }
            .to_string()
            .starts_with("channel index out of bounds"));
    }

    #[test]
    fn scatter_places_channels() {
        let base = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
        let src = Tensor::from_f64(&[1, 2, 1, 1], &[7.0, 9.0]).unwrap();
        let out = src.scatter_channels(&[1, 3], &base).unwrap();
        assert_eq!(out.data(), &[0.0, 7.0, 0.0, 9.0]);
        let full = ramp(&[2, 4, 2, 2]);
        assert_eq!(full.scatter_channels(&[0, 1, 2, 3], &base_like(&full)).unwrap(), full);
    }

    fn base_like(t: &Tensor<f64>) -> Tensor<f64> {
        Tensor::zeros(t.shape())
    }

    #[test]
    fn scatter_errors() {
        let base = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        let src = Tensor::<f64>::zeros(&[2, 2, 3, 2]);
        assert!(matches!(src.scatter_channels(&[0, 1], &base), Err(Error::Shape(_))));
        let src = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(matches!(src.scatter_channels(&[1, 1], &base), Err(Error::IndicesNotIncreasing)));
        assert!(src.scatter_channels(&[1], &base).is_err());
    }

    #[test]
    fn gather_scatter_reconstructs_with_complement() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 3], |i| ((i * 7919) % 113) as f64 - 50.0);
        let idx = [1, 4, 6];
        let back = x.gather_channels(&idx).unwrap().scatter_channels(&idx, &base_like(&x)).unwrap();
        // hand-built mask oracle
        let (n, c, h, w) = x.dims4("x").unwrap();
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let want = if idx.contains(&ch) { x.at4(s, ch, i, j) } else { 0.0 };
                        assert_eq!(back.at4(s, ch, i, j).to_bits(), want.to_bits());
                    }
                }
            }
        }
        let complement = [0, 2, 3, 5, 7];
        let rest = x
            .gather_channels(&complement)
            .unwrap()
            .scatter_channels(&complement, &base_like(&x))
            .unwrap();
        let recon = back.add(&rest).unwrap();
        assert!(recon.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn matmul_examples() {
        let v = Tensor::<f64>::from_f64(&[3, 1], &[1.5, -2.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&v).unwrap(), v);
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        let err = a.matmul(&v).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn matmul_identity_is_bitwise() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).sin() * 1e3);
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::identity(4)).unwrap(), a);
    }

    #[test]
    fn reductions() {
        let o = Tensor::<f64>::ones(&[2, 3]);
        assert_eq!(o.reduce_sum(&[0, 1]).unwrap().data(), &[6.0]);
        let r = ramp(&[2, 3]);
        assert_eq!(r.reduce_sum(&[0]).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(r.reduce_sum(&[1]).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(r.reduce_mean(&[1]).unwrap().data(), &[1.0, 4.0]);
        assert!(r.reduce_sum(&[2]).is_err());
    }

    #[test]
    fn elementwise_and_purity() {
        let a = ramp(&[2, 2]);
        let b = Tensor::<f64>::ones(&[2, 2]);
        let before = a.clone();
        assert_eq!(a.add(&b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-1.0, 0.0, 1.0, 2.0]);
        assert_eq!(a.mul(&a).unwrap().data(), &[0.0, 1.0, 4.0, 9.0]);
        assert_eq!(a, before);
        assert!(a.add(&Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn dump_layout() {
        let t = Tensor::<f32>::from_f64(&[1, 2], &[1.0, -2.0]).unwrap();
        let bytes = t.to_dump_bytes();
        assert_eq!(&bytes[..8], b"GMCTNSR1");
        assert_eq!(bytes[8], 4);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
        let back = Tensor::<f32>::read_dump(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(Tensor::<f64>::read_dump(&mut bytes.as_slice()).is_err());
    }
}
