//! Dense tensors that record the operations producing them, and the
//! reverse sweep that turns a scalar root into gradients.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps the upstream gradient and the node's own forward output to one
/// optional gradient per parent (in parent order).
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[S]) -> Vec<Option<Vec<S>>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations executed on this thread currently record graph edges.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` without recording graph edges; results are plain constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Handle to a node in a computation graph. Cloning is cheap and shares
/// the node.
pub struct Tensor<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<S> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn build(
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Trainable leaf tensor.
    pub fn leaf(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, Vec::new(), None))
    }

    fn check_shape(data: &[S], shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(())
    }

    pub fn scalar(v: S) -> Self {
        Self::build(vec![v], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![S::zero(); numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    /// Result of an operation. Records graph edges only if recording is
    /// enabled and some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if track {
            Self::build(data, shape, true, parents, Some(backward))
        } else {
            Self::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites leaf values in place (optimizer updates, checkpoint loads).
    pub fn assign(&self, values: &[S]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::domain("assign", "only leaf tensors can be overwritten"));
        }
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::shape(
                "assign",
                format!("expected {} values, got {}", d.len(), values.len()),
            ));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_in_place(&self, f: impl FnOnce(&mut [S], Option<&[S]>)) {
        let grad = self.0.grad.borrow();
        let mut d = self.0.data.borrow_mut();
        f(&mut d, grad.as_deref());
    }

    /// Constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.0.shape.clone(), false, Vec::new(), None)
    }

    /// Accumulates gradients of this scalar into every reachable tensor
    /// that requires one. Gradients add up across calls until cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
        pending.insert(self.id(), vec![S::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            if let Some(bw) = &node.0.backward {
                let parent_grads = {
                    let out = node.0.data.borrow();
                    bw(&g, &out)
                };
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            let mut stored = node.0.grad.borrow_mut();
            match stored.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *stored = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the tracked subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::new(vec![], &[0]).is_err());
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let t = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(t.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn no_grad_produces_constants() {
        let w = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }
}
