//! Dense row-major f32 tensors: the carrier for images, feature maps, weights
//! and noise throughout the pipeline.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max-absolute difference against another tensor of the same shape.
    pub fn linf_distance(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Flattens a tensor into a row-major vector of length `product(shape)`.
pub fn flatten(x: &Tensor) -> Vec<f32> {
    x.data().to_vec()
}

/// Exact inverse of [`flatten`]; errors when the length does not match the shape.
pub fn unflatten(z: &[f32], shape: &[usize]) -> Result<Tensor> {
    Tensor::from_vec(shape, z.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn flatten_is_row_major() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten(&x), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unflatten_restores_shape() {
        let t = unflatten(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_length_3x32x32() {
        let x = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(flatten(&x).len(), 3072);
    }

    #[test]
    fn unflatten_rejects_bad_length() {
        let err = unflatten(&[0.0; 5], &[1, 2, 2]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn round_trip_random() {
        let mut rng = RngStream::new(7, 0);
        let data: Vec<f32> = (0..24).map(|_| rng.next_f32()).collect();
        let x = Tensor::from_vec(&[2, 3, 4], data).unwrap();
        assert_eq!(unflatten(&flatten(&x), &[2, 3, 4]).unwrap(), x);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_inverse(dims in proptest::collection::vec(1usize..6, 1..=4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let mut rng = RngStream::new(seed, 1);
            let data: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
            let x = Tensor::from_vec(&dims, data).unwrap();
            let back = unflatten(&flatten(&x), &dims).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
