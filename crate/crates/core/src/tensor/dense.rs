use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, R::one())
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), data.iter().map(|&v| R::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign size mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: R, other: &Self) {
        assert_eq!(self.data.len(), other.data.len(), "axpy size mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale_copy(&self, s: R) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: R) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> R {
        self.data.iter().fold(R::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> R {
        self.sum() / R::lit(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> R {
        assert_eq!(self.data.len(), other.data.len(), "dot size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> R {
        self.dot(self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        assert_eq!(self.data.len(), other.data.len(), "max_abs_diff size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Bit-level equality (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits() || (a.is_nan() && b.is_nan()))
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
        }
    }

    /// FNV-1a over the shape and the little-endian element bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                feed(b);
            }
        }
        let mut bytes = Vec::with_capacity(8);
        for &v in &self.data {
            bytes.clear();
            v.write_le(&mut bytes);
            for &b in &bytes {
                feed(b);
            }
        }
        h
    }
}
