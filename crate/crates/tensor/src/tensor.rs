use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{NodeRef, Tape};

/// Dense row-major N-dimensional array.
///
/// Cloning is cheap: the buffer is shared and copied on write. A tensor
/// produced by an operation on a watched input carries a node on that input's
/// tape; anything built outside a tape has none.
#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) requires_grad: bool,
    grad: Option<Arc<Vec<T>>>,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self::from_arc(shape, Arc::new(data)))
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_arc(shape, Arc::new(vec![value; n]))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_arc(vec![1], Arc::new(vec![value]))
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self::from_arc(shape, Arc::new(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the values. Only valid for tensors that are not part
    /// of a recorded graph; the buffer is unshared first if needed.
    pub fn data_mut(&mut self) -> &mut [T] {
        assert!(self.node.is_none(), "cannot mutate a tensor recorded on a tape");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// The tape this tensor was recorded on, if any.
    pub fn tape(&self) -> Option<Tape<T>> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref().map(Vec::as_slice)
    }

    pub fn set_grad(&mut self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.numel(), "gradient length must match tensor");
        self.grad = Some(Arc::new(grad));
    }

    pub fn accumulate_grad(&mut self, grad: &[T]) {
        assert_eq!(grad.len(), self.numel(), "gradient length must match tensor");
        match &mut self.grad {
            Some(g) => Arc::make_mut(g)
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a = *a + *b),
            None => self.grad = Some(Arc::new(grad.to_vec())),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same values, no tape node and no gradient.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
            node: None,
        }
    }

    /// Element-type conversion. The result is detached.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        let mut out = Tensor::from_arc(self.shape.clone(), Arc::new(data));
        out.requires_grad = self.requires_grad;
        out
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
