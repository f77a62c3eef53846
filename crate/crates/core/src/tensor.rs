//! Dense rank-4 tensor over `f64`.
//!
//! All stateful model math runs in double precision; single precision only
//! appears at serialization boundaries and in the precision-generic kernel
//! paths used by the re-parameterization checks.

use crate::error::{Error, Result};
use crate::shape::Shape4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub shape: Shape4,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape4, v: f64) -> Self {
        Tensor4 { shape, data: vec![v; shape.numel()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Scalar wrapped as a `(1, 1, 1, 1)` tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor4 { shape: Shape4::new(1, 1, 1, 1), data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.at(n, c, h, w)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        &mut self.data[self.shape.at(n, c, h, w)]
    }

    /// `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Tensor4, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Largest absolute entry (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Largest entry-wise difference between two equally shaped tensors,
/// normalized by the larger of the two magnitudes. This is the error
/// measure used by every equivalence check in the crate: cancellation can
/// make individual entries arbitrarily small, so the scale is the tensor's,
/// not the entry's.
pub fn rel_error(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.shape, b.shape, "rel_error on mismatched shapes");
    let denom = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        worst = worst.max((x - y).abs());
    }
    worst / denom
}
