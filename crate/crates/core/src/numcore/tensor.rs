use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array. The buffer is shared and immutable once built.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[], v)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    /// Standard-normal samples drawn in row-major order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        // x * 0 is 0 for finite x and NaN otherwise; the sum vectorizes.
        let z = T::zero();
        self.data
            .chunks(256)
            .all(|c| c.iter().fold(z, |acc, &v| acc + v * z) == z)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Select `count` entries starting at `start` along axis 0.
    pub fn narrow0(&self, start: usize, count: usize) -> Result<Self> {
        let rows = *self.shape.first().unwrap_or(&0);
        if start + count > rows {
            return Err(Error::shape(
                "narrow0",
                format!("{start}+{count} > {rows}"),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: Arc::new(self.data[start * inner..(start + count) * inner].to_vec()),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Concatenate along axis 0.
    pub fn cat0(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cat0", "no tensors"))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "cat0",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            rows += t.shape[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Little-endian IEEE-754 bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * T::DTYPE.size_of());
        for &v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let width = T::DTYPE.size_of();
        if bytes.len() % width != 0 {
            return Err(Error::shape("from_le_bytes", "ragged payload"));
        }
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Self::new(shape, data)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOW).collect();
        if self.data.len() > SHOW {
            write!(f, " {head:?}..")
        } else {
            write!(f, " {head:?}")
        }
    }
}
