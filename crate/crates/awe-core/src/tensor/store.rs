//! Named parameter storage shared by encoders, objective heads and the
//! optimizer. Immutable borrows of the store are `Sync`, so eval-mode
//! embedding can fan out across threads.

use std::collections::HashMap;

use super::tensor::{Real, Tensor, TensorError, TensorResult};
use crate::rng::SeededRng;

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a tensor. `trainable` marks it as requiring gradients;
    /// non-trainable entries hold state such as batch-norm running statistics.
    pub fn add(&mut self, name: &str, mut tensor: Tensor<F>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        tensor.requires_grad = trainable;
        if trainable {
            tensor.alloc_grad();
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.to_owned(), id.0);
        self.names.push(name.to_owned());
        self.tensors.push(tensor);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.get(id).requires_grad)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Accumulate gradients exported from a graph into the parameters'
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<F>)>) -> TensorResult<()> {
        for (id, g) in grads {
            let t = &mut self.tensors[id.0];
            if g.len() != t.numel() {
                return Err(TensorError::Shape {
                    op: "accumulate_grads",
                    detail: format!(
                        "param '{}' has {} elements, gradient has {}",
                        self.names[id.0],
                        t.numel(),
                        g.len()
                    ),
                });
            }
            t.alloc_grad();
            let buf = t.grad.as_mut().unwrap();
            for (b, x) in buf.iter_mut().zip(&g) {
                *b = *b + *x;
            }
        }
        Ok(())
    }

    /// Overwrite a tensor's value in place (used for running statistics).
    pub fn set_value(&mut self, id: ParamId, value: Vec<F>) -> TensorResult<()> {
        let t = &mut self.tensors[id.0];
        if value.len() != t.numel() {
            return Err(TensorError::Shape {
                op: "set_value",
                detail: format!("expected {} elements, got {}", t.numel(), value.len()),
            });
        }
        t.data_mut().copy_from_slice(&value);
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Uniform init in `±sqrt(1/fan_in)`, the scheme used for convolution and
/// linear weights.
pub fn fan_in_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| F::of(rng.uniform_in(-bound, bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
