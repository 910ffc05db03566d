use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use super::{Real, Result, Tensor, TensorError};

/// Computes the gradient contribution for each parent from the output
/// gradient. Entries for parents that do not require a gradient may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Var<T>]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor participating in an autodiff graph.
///
/// Cloning a `Var` is cheap and refers to the same graph node. Gradients of
/// a node used several times accumulate by summation.
pub struct Var<T: Real = f32>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    /// A graph input that does not receive a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A graph input whose gradient is tracked.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: true,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self(Rc::new(Node {
                value,
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::new(self.shape(), g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate(&self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.0.value.len());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates the gradient of every
    /// node reachable from `self` that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.0.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accumulate(vec![T::ONE]);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad_out = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let grads = backward(&grad_out, &node.0.parents);
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(grads) {
                if let Some(g) = g {
                    if parent.requires_grad() {
                        parent.accumulate(g);
                    }
                }
            }
        }
        Ok(())
    }
}
