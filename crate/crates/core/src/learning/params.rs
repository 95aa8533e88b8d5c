use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use sha2::{Digest, Sha256};

/// Floating-point element type usable by the learning core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

/// Flat, indexable collection of parameter (or gradient) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(tensors: Vec<ArrayD<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(IxDyn(t.shape())))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Element at flat index `i` (tensors laid end to end in standard order).
    pub fn get_flat(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return *t.iter().nth(i).expect("index within tensor");
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, value: T) {
        for t in &mut self.tensors {
            if i < t.len() {
                *t.iter_mut().nth(i).expect("index within tensor") = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn to_flat_vec(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.zip_mut_with(b, |x, &y| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * alpha);
        }
    }

    /// SHA-256 over shapes and little-endian element bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in t.iter() {
                hasher.update(x.to_le_bytes_vec());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))))
                .collect(),
        }
    }
}
