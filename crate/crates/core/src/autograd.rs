//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! Every differentiable op returns a [`Var`] that remembers its inputs and a
//! backward rule, but only if at least one input requires a gradient. Graphs
//! built purely from constants therefore keep nothing alive, and inference
//! releases intermediates as soon as they go out of scope.
//!
//! [`GradTape::record`] linearizes the graph reachable from a scalar loss into
//! topological order; [`GradTape::backward`] replays it in reverse, summing
//! gradient contributions into every tracked leaf.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule of a recorded op.
pub(crate) trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<&Var<T>>;

    /// Gradients for each input, aligned with [`Backward::inputs`]. Entries
    /// whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Backward<T>>>,
}

/// A value in the computation graph.
pub struct Var<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|op| op.name()))
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, op: Option<Box<dyn Backward<T>>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    /// A trainable leaf.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    pub(crate) fn from_op(value: Tensor<T>, op: Box<dyn Backward<T>>) -> Result<Self> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let tracked = op.inputs().iter().any(|v| v.requires_grad());
        Ok(if tracked {
            Self::make(value, true, Some(op))
        } else {
            Self::make(value, false, None)
        })
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Name of the op that produced this value, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name())
    }

    pub fn into_value(self) -> Tensor<T> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(shared) => shared.value.clone(),
        }
    }
}

/// Operations reachable from a loss, in topological order (inputs first).
pub struct GradTape<T: Scalar = f32> {
    order: Vec<Var<T>>,
}

impl<T: Scalar> GradTape<T> {
    pub fn record(loss: &Var<T>) -> Result<Self> {
        if !loss.value().is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // Iterative post-order DFS; graphs of deep ResNets overflow recursion.
        let mut stack: Vec<(Var<T>, bool)> = vec![(loss.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !var.requires_grad() || !visited.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(op) = &var.0.op {
                for input in op.inputs().into_iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in recorded order; leaves appear as `"leaf"`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|v| v.op_name().unwrap_or("leaf"))
            .collect()
    }

    /// Replays the tape in reverse. Gradients reaching the same node along
    /// several paths are summed.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        let Some(loss) = self.order.last() else {
            return Ok(Gradients { grads: leaves });
        };
        pending.insert(loss.id(), Tensor::ones(loss.shape().to_vec()));

        for var in self.order.iter().rev() {
            let Some(grad) = pending.remove(&var.id()) else {
                continue;
            };
            let Some(op) = &var.0.op else {
                leaves.insert(var.id(), grad);
                continue;
            };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| v.requires_grad()).collect();
            let input_grads = op.backward(var.value(), &grad, &needs)?;
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.shape(), "gradient shape of {}", op.name());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        pending.insert(input.id(), g);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Records the tape for `loss` and runs it backwards.
pub fn backward<T: Scalar>(loss: &Var<T>) -> Result<Gradients<T>> {
    GradTape::record(loss)?.backward()
}

/// Gradients of a loss with respect to tracked leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
