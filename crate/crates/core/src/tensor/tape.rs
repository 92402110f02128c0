use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Result, Scalar, Tensor, TensorError};

/// Maps the gradient of a node's output onto its parents.
///
/// The second argument flags which parents need a gradient; entries for the
/// others may be `None`. The returned vector is aligned with the parents.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle linking a value to its node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GradId(pub(crate) usize);

impl GradId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Linear record of operations. Parents always precede their children, so
/// insertion order is a topological order.
///
/// A tape is single-threaded; give each worker its own.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    /// A tape whose operations fail with [`TensorError::NonFinite`] as soon
    /// as they produce NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: GradId(nodes.len() - 1),
        }
    }

    /// Records the result of an operation. The backward closure is dropped
    /// when no parent needs a gradient.
    pub fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut requires_grad = false;
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(TensorError::Contract(format!(
                    "{op}: operand belongs to a different tape"
                )));
            }
            requires_grad |= nodes[p.id.0].requires_grad;
        }
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Ok(Var {
            tape: self,
            id: GradId(nodes.len() - 1),
        })
    }

    fn value_of(&self, id: GradId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// Reverse pass from a scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.run_backward(loss, false)
    }

    /// Reverse pass that keeps the gradient of every intermediate node too.
    pub fn backward_retain(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var<'_, T>, retain: bool) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut pending: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        pending[loss.id.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for idx in (0..=loss.id.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = backward(&grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(g), true) = (g, *need) else {
                        continue;
                    };
                    if g.shape() != nodes[p].value.shape() {
                        return Err(TensorError::Contract(format!(
                            "{}: gradient shape {:?} does not match operand shape {:?}",
                            node.op,
                            g.shape(),
                            nodes[p].value.shape()
                        )));
                    }
                    match &mut pending[p] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
                if retain {
                    kept[idx] = Some(grad);
                }
            } else if node.requires_grad {
                kept[idx] = Some(grad);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: kept, shapes })
    }
}

/// Gradients produced by a reverse pass, keyed by [`GradId`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T> fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reached = self.grads.iter().filter(|g| g.is_some()).count();
        write!(f, "Gradients({reached} of {} nodes)", self.grads.len())
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; zeros when `id` is not
    /// reachable from the loss.
    pub fn get(&self, id: GradId) -> Tensor<T> {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::zeros(self.shapes[id.0].clone()),
            None => panic!("gradient id {} is not on this tape", id.0),
        }
    }

    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var.id)
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, id: GradId) -> Tensor<T> {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn is_reached(&self, id: GradId) -> bool {
        matches!(self.grads.get(id.0), Some(Some(_)))
    }
}

/// A value recorded on a tape.
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: GradId,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id.0, self.value().shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> GradId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }
}
