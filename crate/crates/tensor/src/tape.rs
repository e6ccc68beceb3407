//! Define-by-run gradient tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and a
//! closure mapping the output gradient to one gradient per input. The tape
//! is rebuilt for every forward pass and is confined to one thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the gradient of an op's output to the gradients of its inputs,
/// in input order.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor registered on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records a custom differentiable op. `backward` receives the output
    /// gradient and must return one gradient buffer per input, each the
    /// size of that input.
    pub fn record(&self, inputs: &[Var<'_>], output: Tensor, backward: BackwardFn) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let requires_grad = inputs.iter().any(|v| {
            debug_assert!(std::ptr::eq(v.tape, self), "mixing vars from two tapes");
            nodes[v.id].requires_grad
        });
        drop(nodes);
        let ids = inputs.iter().map(|v| v.id).collect();
        if requires_grad {
            self.push(Rc::new(output), ids, Some(backward), true)
        } else {
            self.push(Rc::new(output), ids, None, false)
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            nodes[output.id].value.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let input_grads = backward(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), nodes[input].value.len());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}

/// Gradients of one backward sweep, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(self.shapes[var.id].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads[var.id].take() {
            Some(g) => Tensor::from_parts(self.shapes[var.id].clone(), g),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.push(value, Vec::new(), None, false)
    }
}
