//! Dense row-major f64 tensors.
//!
//! Values are validated at construction: the element count must match the
//! shape product and every entry must be finite. All math in the simulator is
//! 64-bit; there are no other element types.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, rejecting shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {expect} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite tensor entry {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Construction for op outputs whose finiteness follows from finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite op output");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn as_scalar(&self) -> f64 {
        assert!(self.is_scalar(), "tensor of shape {:?} is not scalar", self.shape);
        self.data[0]
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "tensor of shape {:?} is not 2-D", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "shape mismatch in accumulate");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Fold the exact f64 bit patterns into a 64-bit fingerprint. Used by the
    /// frozen-stage contracts: a parameter set is unchanged iff its hash is.
    pub fn bits_hash(&self, state: &mut u64) {
        for &d in &self.shape {
            *state = state
                .rotate_left(23)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(d as u64);
        }
        for &v in &self.data {
            *state = state
                .rotate_left(23)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(v.to_bits());
        }
    }
}

/// Temperature softmax over a slice: `out_i = exp(x_i/tau) / sum_j exp(x_j/tau)`,
/// computed with max-subtraction. Panics on `tau <= 0`.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "softmax temperature must be positive, got {tau}");
    assert!(!logits.is_empty());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, stable via log-sum-exp. Panics if the label
/// is out of range.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest entry; first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::Value(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::INFINITY]),
            Err(Error::Value(_))
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_closed_forms() {
        // equal logits -> uniform, any temperature
        for tau in [0.1, 1.0, 10.0] {
            let p = softmax_temperature(&[3.5, 3.5], tau);
            assert!((p[0] - 0.5).abs() < 1e-15);
            assert!((p[1] - 0.5).abs() < 1e-15);
        }
        // [ln 2, 0] at tau=1 -> [2/3, 1/3]
        let p = softmax_temperature(&[2.0f64.ln(), 0.0], 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        // [ln 2, 0] at tau=0.5 -> [4/5, 1/5]: sharper at lower temperature
        let p = softmax_temperature(&[2.0f64.ln(), 0.0], 0.5);
        assert!((p[0] - 0.8).abs() < 1e-12);
        assert!((p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "temperature must be positive")]
    fn softmax_rejects_nonpositive_temperature() {
        softmax_temperature(&[0.0, 1.0], 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // uniform binary logits -> ln 2
        assert!((cross_entropy_value(&[0.0, 0.0], 0) - 2.0f64.ln()).abs() < 1e-15);
        // strongly separated logits
        let easy = cross_entropy_value(&[10.0, -10.0], 0);
        assert!((easy - 2.0611536181902037e-9).abs() < 1e-14);
        let hard = cross_entropy_value(&[10.0, -10.0], 1);
        assert!((hard - 20.0).abs() < 1e-8);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn cross_entropy_rejects_bad_label() {
        cross_entropy_value(&[0.0, 0.0], 2);
    }

    #[test]
    fn bits_hash_sensitive_to_any_change() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let mut h1 = 0u64;
        t.bits_hash(&mut h1);
        let one_ulp_up = f64::from_bits(3.0f64.to_bits() + 1);
        let u = Tensor::vector(vec![1.0, 2.0, one_ulp_up]).unwrap();
        let mut h2 = 0u64;
        u.bits_hash(&mut h2);
        assert_ne!(h1, h2);
    }
}
