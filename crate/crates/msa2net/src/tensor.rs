//! Dense f64 tensors.
//!
//! Feature maps are stored channel-major as `[C, H, W]` so that convolution
//! inner loops run over contiguous rows. Weights use whatever shape the op
//! expects (documented per op). Data is behind an `Arc` so cloning a tensor
//! is cheap and autodiff nodes can share values.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    #[serde(with = "arc_vec")]
    data: Arc<Vec<f64>>,
}

// Serialize the Arc payload by value; deserialization allocates a fresh Arc.
mod arc_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::sync::Arc;

    pub fn serialize<S: Serializer>(v: &Arc<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<Vec<f64>>, D::Error> {
        Ok(Arc::new(Vec::<f64>::deserialize(d)?))
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Channels of a [C, H, W] tensor.
    pub fn c(&self) -> usize {
        assert_eq!(self.shape.len(), 3);
        self.shape[0]
    }

    pub fn h(&self) -> usize {
        assert_eq!(self.shape.len(), 3);
        self.shape[1]
    }

    pub fn w(&self) -> usize {
        assert_eq!(self.shape.len(), 3);
        self.shape[2]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A learnable parameter: a tensor plus a process-unique id used to match
/// gradients back to their owner after a backward pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    #[serde(skip, default = "next_param_id")]
    pub id: u64,
    pub value: Tensor,
}

fn next_param_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            id: next_param_id(),
            value,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(Tensor::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn chw_indexing() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|v| v as f64).collect());
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 1, 2), 5.0);
        assert_eq!(t.at3(1, 0, 0), 6.0);
    }

    #[test]
    fn params_get_distinct_ids() {
        let a = Param::zeros(&[3]);
        let b = Param::zeros(&[3]);
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let t = Tensor::from_vec(&[3], vec![0.1 + 0.2, f64::MIN_POSITIVE, -1.5e300]);
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }
}
