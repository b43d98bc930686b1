use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the upstream gradient and a mask of which inputs need a
/// gradient; returns one optional gradient per input slot, each shaped like
/// the corresponding input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in construction order, so every node's inputs precede
/// it and a reverse sweep is a valid topological traversal. A fresh tape is
/// built for every forward pass.
pub struct Tape<T: Element = f32> {
    inner: Arc<Mutex<TapeInner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<T: Element> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Mutex::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("tape poisoned").nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const () as usize
    }

    /// Registers `t` as a differentiable leaf and returns the attached copy.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Vec::new(), None);
        let mut out = t.detach();
        out.requires_grad = true;
        out.node = Some(NodeRef {
            tape: self.clone(),
            id,
        });
        out
    }

    pub(crate) fn push(&self, inputs: Vec<Option<usize>>, backward: Option<BackwardFn<T>>) -> usize {
        let mut inner = self.inner.lock().expect("tape poisoned");
        let id = inner.nodes.len();
        debug_assert!(inputs.iter().flatten().all(|&i| i < id));
        inner.nodes.push(Node { inputs, backward });
        id
    }

    fn backward_from(&self, root: usize) -> HashMap<usize, Vec<T>> {
        let inner = self.inner.lock().expect("tape poisoned");
        let mut pending: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                let (Some(src), Some(g)) = (slot, g) else {
                    continue;
                };
                match &mut pending[*src] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), g.len());
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
                    }
                    empty => *empty = Some(g),
                }
            }
        }
        leaves
    }
}

/// Gradients of a scalar loss with respect to every watched leaf.
pub struct Gradients<T: Element = f32> {
    tape_key: usize,
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a watched leaf, if the loss depends on it.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        let node = leaf.node.as_ref()?;
        if node.tape.key() != self.tape_key {
            return None;
        }
        self.grads.get(&node.id).map(Vec::as_slice)
    }

    /// Gradient for `leaf`, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Vec<T> {
        self.get(leaf)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); leaf.numel()])
    }

    /// Copies the gradient into `leaf.grad`, accumulating onto an existing one.
    pub fn populate(&self, leaf: &mut Tensor<T>) {
        let g = self.get_or_zeros(leaf);
        leaf.accumulate_grad(&g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Element> Tensor<T> {
    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        let node = self.node.as_ref().ok_or(TensorError::NoTape)?;
        Ok(Gradients {
            tape_key: node.tape.key(),
            grads: node.tape.backward_from(node.id),
        })
    }
}

/// Creates the output tensor of an operation, recording it on the tape shared
/// by any attached input. Inputs without a node are treated as constants.
pub(crate) fn record<T, F>(inputs: &[&Tensor<T>], shape: Vec<usize>, data: Arc<Vec<T>>, backward: F) -> Tensor<T>
where
    T: Element,
    F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
{
    let mut out = Tensor::from_arc(shape, data);
    let tape = inputs.iter().find_map(|t| t.node.as_ref().map(|n| n.tape.clone()));
    if let Some(tape) = tape {
        let slots = inputs
            .iter()
            .map(|t| {
                t.node.as_ref().map(|n| {
                    assert!(n.tape.same(&tape), "operands recorded on different tapes");
                    n.id
                })
            })
            .collect();
        let id = tape.push(slots, Some(Box::new(backward)));
        out.requires_grad = true;
        out.node = Some(NodeRef { tape, id });
    }
    out
}
