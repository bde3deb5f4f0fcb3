use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named, row-major weight tensor. Vectors are stored with `cols == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat collection of the trainable tensors of one network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.push(Tensor {
            name: name.to_owned(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
            frozen: false,
        })
    }

    /// Scaled-normal init with std `gain / sqrt(cols)`.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = gain / (cols.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.push(Tensor {
            name: name.to_owned(),
            rows,
            cols,
            data,
            frozen: false,
        })
    }

    pub fn push(&mut self, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.tensors[id.0].frozen = frozen;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `other` has the same tensor names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: {} {}x{} vs {} {}x{}",
                    a.name, a.rows, a.cols, b.name, b.rows, b.cols
                )));
            }
            if b.data.len() != b.rows * b.cols {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", b.name)));
            }
        }
        Ok(())
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }
}
