//! Sets of tensors linked through a common first mode.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ObservationMask};

/// `K ≥ 1` tensors sharing their first-mode size, each paired with a mask.
///
/// Unobserved entries are stored as `0.0`; the mask is authoritative.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedTensorSet {
    tensors: Vec<DenseTensor>,
    masks: Vec<ObservationMask>,
}

impl LinkedTensorSet {
    pub fn new(tensors: Vec<DenseTensor>, masks: Vec<ObservationMask>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidShape("a linked set needs at least one tensor".into()));
        }
        if tensors.len() != masks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors but {} masks",
                tensors.len(),
                masks.len()
            )));
        }
        let shared = tensors[0].dims()[0];
        for (k, (t, m)) in tensors.iter().zip(&masks).enumerate() {
            if t.dims()[0] != shared {
                return Err(Error::SharedDimMismatch {
                    tensor: k + 1,
                    expected: shared,
                    found: t.dims()[0],
                });
            }
            if t.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} has shape {} but its mask has shape {}",
                    k + 1,
                    t.shape(),
                    m.shape()
                )));
            }
        }
        let mut tensors = tensors;
        for (t, m) in tensors.iter_mut().zip(&masks) {
            for (v, &o) in t.values_mut().iter_mut().zip(m.observed()) {
                if !o {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { tensors, masks })
    }

    /// Fully observed set.
    pub fn complete(tensors: Vec<DenseTensor>) -> Result<Self> {
        let masks = tensors
            .iter()
            .map(|t| ObservationMask::full(t.shape().clone()))
            .collect();
        Self::new(tensors, masks)
    }

    /// Derives masks from NaN markers.
    pub fn from_nan(tensors: Vec<DenseTensor>) -> Result<Self> {
        let masks = tensors
            .iter()
            .map(|t| ObservationMask::from_nan(t.values(), t.shape().clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tensors, masks)
    }

    pub fn single(tensor: DenseTensor) -> Result<Self> {
        Self::complete(vec![tensor])
    }

    #[inline]
    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    #[inline]
    pub fn shared_dim(&self) -> usize {
        self.tensors[0].dims()[0]
    }

    #[inline]
    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    #[inline]
    pub fn masks(&self) -> &[ObservationMask] {
        &self.masks
    }

    pub fn tensor(&self, k: usize) -> Result<&DenseTensor> {
        self.tensors.get(k).ok_or(Error::InvalidTensorIndex {
            index: k + 1,
            count: self.tensors.len(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.masks.iter().all(ObservationMask::is_complete)
    }

    /// Same values with replacement masks.
    pub fn with_masks(&self, masks: Vec<ObservationMask>) -> Result<Self> {
        Self::new(self.tensors.clone(), masks)
    }

    /// Copy with unobserved entries replaced by NaN.
    pub fn to_nan_tensors(&self) -> Vec<DenseTensor> {
        self.tensors
            .iter()
            .zip(&self.masks)
            .map(|(t, m)| {
                let values = t
                    .values()
                    .iter()
                    .zip(m.observed())
                    .map(|(&v, &o)| if o { v } else { f64::NAN })
                    .collect();
                DenseTensor::new(t.shape().clone(), values).expect("same shape")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn rejects_mismatched_first_modes() {
        let a = DenseTensor::zeros(Shape::new(vec![3, 2]).unwrap());
        let b = DenseTensor::zeros(Shape::new(vec![4, 2, 2]).unwrap());
        let err = LinkedTensorSet::complete(vec![a, b]).unwrap_err();
        assert!(matches!(
            err,
            Error::SharedDimMismatch { tensor: 2, expected: 3, found: 4 }
        ));
    }

    #[test]
    fn nan_markers_become_masked_zeros() {
        let t = DenseTensor::new(Shape::new(vec![2, 2]).unwrap(), vec![1.0, f64::NAN, 3.0, 4.0])
            .unwrap();
        let set = LinkedTensorSet::from_nan(vec![t]).unwrap();
        assert_eq!(set.tensors()[0].values(), &[1.0, 0.0, 3.0, 4.0]);
        assert_eq!(set.masks()[0].observed(), &[true, false, true, true]);
        assert!(!set.is_complete());
        assert!(set.to_nan_tensors()[0].values()[1].is_nan());
    }
}
