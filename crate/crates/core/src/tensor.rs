use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(())
    }

    /// Unpacks a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(&[0, 0, 0, 0], &self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(&[0, 0, 0], &self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(&other.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&0);
        if start > end || end > outer {
            return Err(Error::OutOfRange(format!(
                "outer slice {start}..{end} of extent {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::OutOfRange("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.expect_shape(&first.shape)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (ba, ca, h, w) = a.dims4()?;
        let (bb, cb, hb, wb) = b.dims4()?;
        if ba != bb || h != hb || w != wb {
            return Err(Error::shape(&[ba, cb, h, w], b.shape()));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..ba {
            data.extend_from_slice(&a.data[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&b.data[n * cb * hw..(n + 1) * cb * hw]);
        }
        Ok(Tensor {
            shape: vec![ba, ca + cb, h, w],
            data,
        })
    }

    /// Channels `[start, end)` of a `[B, C, H, W]` tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start > end || end > c {
            return Err(Error::OutOfRange(format!("channels {start}..{end} of {c}")));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * hw);
        for n in 0..b {
            data.extend_from_slice(&self.data[(n * c + start) * hw..(n * c + end) * hw]);
        }
        Ok(Tensor {
            shape: vec![b, end - start, h, w],
            data,
        })
    }

    /// Spatial crop of the trailing two axes, keeping all leading axes.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let rank = self.shape.len();
        if rank < 2 {
            return Err(Error::shape(&[0, 0], &self.shape));
        }
        let (h, w) = (self.shape[rank - 2], self.shape[rank - 1]);
        if top + height > h || left + width > w {
            return Err(Error::OutOfRange(format!(
                "crop {height}x{width} at ({top}, {left}) of {h}x{w}"
            )));
        }
        let planes: usize = self.shape[..rank - 2].iter().product();
        let mut data = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            let base = p * h * w;
            for r in top..top + height {
                let row = base + r * w;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        let mut shape = self.shape.clone();
        shape[rank - 2] = height;
        shape[rank - 1] = width;
        Ok(Tensor { shape, data })
    }

    /// Writes `src` into the trailing two axes at `(top, left)`.
    pub fn paste(&mut self, src: &Self, top: usize, left: usize) -> Result<()> {
        let rank = self.shape.len();
        if rank < 2 || src.shape.len() != rank || src.shape[..rank - 2] != self.shape[..rank - 2] {
            return Err(Error::shape(&self.shape, &src.shape));
        }
        let (h, w) = (self.shape[rank - 2], self.shape[rank - 1]);
        let (sh, sw) = (src.shape[rank - 2], src.shape[rank - 1]);
        if top + sh > h || left + sw > w {
            return Err(Error::OutOfRange(format!(
                "paste {sh}x{sw} at ({top}, {left}) into {h}x{w}"
            )));
        }
        let planes: usize = self.shape[..rank - 2].iter().product();
        for p in 0..planes {
            for r in 0..sh {
                let dst = p * h * w + (top + r) * w + left;
                let s = p * sh * sw + r * sw;
                self.data[dst..dst + sw].copy_from_slice(&src.data[s..s + sw]);
            }
        }
        Ok(())
    }
}
