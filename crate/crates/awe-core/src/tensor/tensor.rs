//! Dense row-major tensors over 32- or 64-bit floats.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor: shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor: {0}")]
    Contract(String),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Element type of the engine. Training runs in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense multi-dimensional array with an optional gradient buffer.
///
/// The graph operates on two-dimensional tensors (rows x cols); vectors are
/// `1 x n` and scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1, 1], vec![value]).unwrap()
    }

    pub fn row(values: Vec<F>) -> Self {
        let n = values.len();
        Self::from_vec(&[1, n], values).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns for the 2-D case the graph works with.
    pub fn dims2(&self) -> TensorResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Shape {
                op: "dims2",
                detail: format!("expected 2-D tensor, got shape {other:?}"),
            }),
        }
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        let (_, cols) = (self.shape[0], self.shape[1]);
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Allocate (or keep) a zeroed gradient buffer of matching shape.
    pub fn alloc_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.dims2().unwrap(), (2, 3));
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[3, 2]);
        t.alloc_grad();
        assert_eq!(t.grad.as_ref().unwrap().len(), t.numel());
        t.grad.as_mut().unwrap()[0] = 5.0;
        t.zero_grad();
        assert_eq!(t.grad.as_ref().unwrap()[0], 0.0);
    }
}
