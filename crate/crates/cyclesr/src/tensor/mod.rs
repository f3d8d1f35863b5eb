//! Dense row-major tensors and the reverse-mode autodiff graph built on them.
//!
//! Image tensors use BCHW layout. Values are immutable once a tensor is
//! produced; cloning is cheap (shared storage).

pub mod graph;
pub mod kernels;
pub mod resize;

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for training, `f64` for numeric tests.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn cast_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense N-dimensional array, row-major, shared storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dim in {dims:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} != product of dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    /// A one-element tensor with dims `[1]`.
    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// First element; panics on empty (tensors are never empty).
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Interpret as BCHW; errors if the rank is not 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::shape(format!("expected 4-d BCHW tensor, got {other:?}"))),
        }
    }

    /// Mutable access to the storage, copying if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.dims,
                self.numel(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|v| v.cast_f64()).collect()),
        }
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Self {
        Tensor {
            dims: src.dims.clone(),
            data: Arc::new(src.data.iter().map(|&v| T::cast_from(v)).collect()),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{what}: non-finite value {} at flat index {i} (dims {:?})",
                self.data[i], self.dims
            )));
        }
        Ok(())
    }

    /// Crop `[y0, y0+h) x [x0, x0+w)` from every plane of a BCHW tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (b, c, ih, iw) = self.dims4()?;
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::shape(format!(
                "crop [{y0}+{h}, {x0}+{w}] exceeds {ih}x{iw}"
            )));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            let plane = &src[p * ih * iw..][..ih * iw];
            for y in 0..h {
                let row = &plane[(y0 + y) * iw + x0..][..w];
                out.extend_from_slice(row);
            }
        }
        Tensor::from_vec(&[b, c, h, w], out)
    }

    /// Sum of all elements accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.cast_f64()).sum()
    }
}

/// FNV-1a over the little-endian bit pattern of every element; used to assert
/// that parameter sets did not change.
pub fn tensor_fingerprint<T: Scalar>(tensors: impl IntoIterator<Item = Tensor<T>>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for t in tensors {
        for v in t.data() {
            for b in v.cast_f64().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn crop_extracts_block() {
        let t = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(t.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn validate_finite_reports_position() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.data_mut()[1] = f64::NAN;
        let err = t.validate_finite("x").unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }
}
