use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the forward input values, the forward output and the
/// gradient of the loss w.r.t. that output, and returns one entry per input.
/// Entries for inputs with `needs_grad[i] == false` may be `None`.
pub trait Op<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
}

/// Computation tape.
///
/// Nodes are appended in execution order; backward replays them in exact
/// reverse order. Gradients are written into each node's tensor and stay
/// there until [`Graph::reset_grads`]; a second backward without a reset is
/// an error.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node; `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Appends an operation result. The output must be finite.
    pub fn record(&mut self, op: impl Op<T> + 'static, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        let name = op.name();
        if !output.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.any_requires_grad(inputs);
        self.nodes.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Op<T>>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let input_grads = op.backward(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                for ((v, gin), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let Some(gin) = gin else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(gin.len(), self.nodes[v.0].value.numel(), "{}", op.name());
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a = *a + *b),
                        slot @ None => *slot = Some(gin),
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears every gradient buffer and re-arms [`Graph::backward`].
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            let _ = node.value.set_grad(None);
        }
        self.backward_done = false;
    }
}
