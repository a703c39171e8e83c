use std::sync::atomic::{AtomicU64, Ordering};

use super::AutodiffError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter tensor. A tape binds each id at most once, so a
/// weight used at several GRU steps collects one summed gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    constant: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data,
            grad: None,
            constant: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: consistent shape")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("filled: consistent shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value]).expect("scalar: consistent shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector: consistent shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a constant: tapes record it without a gradient slot.
    pub fn into_constant(mut self) -> Self {
        self.constant = true;
        self.grad = None;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
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

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if self.constant {
            return;
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), AutodiffError> {
        if self.constant {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(AutodiffError::DataLength {
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Replaces the data buffer, keeping the id. Used when restoring checkpoints.
    pub fn assign(&mut self, shape: &[usize], data: &[f64]) -> Result<(), AutodiffError> {
        if shape != self.shape.as_slice() || data.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "assign",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Zero-fills the gradient buffer of every listed tensor.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Tensor>) {
    for p in params {
        p.zero_grad();
    }
}
