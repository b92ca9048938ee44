use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Dense 5-D tensor `[batch, channel, z, y, x]`, x-fastest, 64-bit values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl TensorGrid {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NeuralError::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Elements per (batch, channel) plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let off = (b * self.shape[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let off = (b * self.shape[1] + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<(), NeuralError> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(NeuralError::NonFinite(what.to_string()))
        }
    }

    pub fn add_assign(&mut self, other: &TensorGrid) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Batch element `b` as a standalone tensor.
    pub fn select(&self, b: usize) -> TensorGrid {
        let n = self.shape[1] * self.plane();
        let mut shape = self.shape;
        shape[0] = 1;
        TensorGrid {
            shape,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Stack single-batch tensors along the batch axis.
    pub fn stack(items: &[TensorGrid]) -> Result<TensorGrid, NeuralError> {
        let first = items
            .first()
            .ok_or_else(|| NeuralError::Shape("cannot stack zero tensors".into()))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        shape[0] = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(NeuralError::Shape(format!(
                    "stack mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(TensorGrid { shape, data })
    }
}
