//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass together
//! with an append-only list of nodes. Each node wraps a [`Function`]: the
//! built-in primitives in [`ops`] and user-supplied custom nodes go through
//! the same interface, which is how the quantizers attach their
//! straight-through and shared-scale gradient rules.

mod conv;
pub mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use conv::{col2im, im2col, ConvGeometry};
pub use ops::{BatchStats, BN_EPS, BN_MOMENTUM};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation.
///
/// `forward` runs eagerly when the node is applied and may stash whatever
/// context `backward` needs in `self`. `backward` receives one upstream
/// gradient per forward output, in order (zeros for outputs that no
/// gradient reached), and must return exactly one gradient per input.
pub trait Function<F: Float> {
    fn name(&self) -> &str;

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>>;

    fn backward(&self, inputs: &[&Tensor<F>], grad_outputs: &[Tensor<F>])
        -> Result<Vec<Tensor<F>>>;
}

type ForwardFn<F, C> = Box<dyn Fn(&[&Tensor<F>]) -> Result<(Vec<Tensor<F>>, C)>>;
type BackwardFn<F, C> = Box<dyn Fn(&C, &[&Tensor<F>], &[Tensor<F>]) -> Result<Vec<Tensor<F>>>>;

/// Closure-built [`Function`] with a typed saved context.
pub struct CustomNode<F, C> {
    name: String,
    forward: ForwardFn<F, C>,
    backward: BackwardFn<F, C>,
    saved: Option<C>,
}

impl<F: Float, C: 'static> CustomNode<F, C> {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&[&Tensor<F>]) -> Result<(Vec<Tensor<F>>, C)> + 'static,
        backward: impl Fn(&C, &[&Tensor<F>], &[Tensor<F>]) -> Result<Vec<Tensor<F>>> + 'static,
    ) -> Self {
        CustomNode {
            name: name.into(),
            forward: Box::new(forward),
            backward: Box::new(backward),
            saved: None,
        }
    }
}

impl<F: Float, C: 'static> Function<F> for CustomNode<F, C> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (outputs, ctx) = (self.forward)(inputs)?;
        self.saved = Some(ctx);
        Ok(outputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        grad_outputs: &[Tensor<F>],
    ) -> Result<Vec<Tensor<F>>> {
        let ctx = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::invalid("custom node", format!("{} was never run", self.name)))?;
        (self.backward)(ctx, inputs, grad_outputs)
    }
}

struct Slot<F> {
    value: Tensor<F>,
    requires_grad: bool,
    /// True when some `requires_grad` leaf is upstream of this value.
    tracked: bool,
}

struct Node<F> {
    func: Box<dyn Function<F>>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
}

/// The tape: values in creation order plus the nodes that produced them.
pub struct Graph<F> {
    slots: Vec<Slot<F>>,
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            slots: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_slot(value, requires_grad, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push_slot(&mut self, value: Tensor<F>, requires_grad: bool, tracked: bool) -> Var {
        self.slots.push(Slot {
            value,
            requires_grad,
            tracked,
        });
        Var(self.slots.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.slots[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.slots[var.0].value.shape()
    }

    /// Whether `var` depends on a gradient-requiring leaf.
    pub fn is_tracked(&self, var: Var) -> bool {
        self.slots[var.0].tracked
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Names of recorded nodes, in tape order.
    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.func.name().to_string()).collect()
    }

    /// Names of the nodes on some path from `from` to `to`.
    pub fn path_node_names(&self, from: Var, to: Var) -> Vec<String> {
        let mut reach = vec![false; self.slots.len()];
        reach[from.0] = true;
        let mut on_forward_path = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|v| reach[v.0]) {
                on_forward_path[i] = true;
                for o in &node.outputs {
                    reach[o.0] = true;
                }
            }
        }
        let mut back = vec![false; self.slots.len()];
        back[to.0] = true;
        let mut names = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            if on_forward_path[i] && node.outputs.iter().any(|v| back[v.0]) {
                for v in &node.inputs {
                    back[v.0] = true;
                }
                names.push(node.func.name().to_string());
            }
        }
        names.reverse();
        names
    }

    /// Run `func` eagerly on `inputs` and record it (the custom-node entry
    /// point; built-in ops use it too).
    pub fn apply(&mut self, mut func: Box<dyn Function<F>>, inputs: &[Var]) -> Result<Vec<Var>> {
        let outputs = {
            let values: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.slots[v.0].value).collect();
            func.forward(&values)?
        };
        for (i, out) in outputs.iter().enumerate() {
            if !out.all_finite() {
                return Err(Error::NonFinite(format!("output {i} of {}", func.name())));
            }
        }
        let tracked = inputs.iter().any(|v| self.slots[v.0].tracked);
        let outputs: Vec<Var> = outputs
            .into_iter()
            .map(|t| self.push_slot(t, false, tracked))
            .collect();
        if tracked {
            self.nodes.push(Node {
                func,
                inputs: inputs.to_vec(),
                outputs: outputs.clone(),
            });
        }
        Ok(outputs)
    }

    /// Single-output convenience wrapper around [`Graph::apply`].
    pub fn apply1(&mut self, func: Box<dyn Function<F>>, inputs: &[Var]) -> Result<Var> {
        let name = func.name().to_string();
        let out = self.apply(func, inputs)?;
        match out.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid("apply1", format!("{name} produced {} outputs", out.len()))),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf gets an entry shaped like its value; leaves
    /// the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = &self.slots[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.check_order()?;

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_value.shape().to_vec(), vec![F::one()])?);

        for node in self.nodes.iter().rev() {
            if node.outputs.iter().all(|o| grads[o.0].is_none()) {
                continue;
            }
            // Every consumer of these outputs sits later on the tape, so their
            // gradients are complete and no longer needed.
            let upstream: Vec<Tensor<F>> = node
                .outputs
                .iter()
                .map(|o| {
                    grads[o.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros_like(&self.slots[o.0].value))
                })
                .collect();
            let inputs: Vec<&Tensor<F>> =
                node.inputs.iter().map(|v| &self.slots[v.0].value).collect();
            let input_grads = node.func.backward(&inputs, &upstream)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::BackwardArity {
                    name: node.func.name().to_string(),
                    expected: node.inputs.len(),
                    got: input_grads.len(),
                });
            }
            for (var, g) in node.inputs.iter().zip(input_grads) {
                if !self.slots[var.0].tracked {
                    continue;
                }
                g.expect_same_shape(&self.slots[var.0].value, "backward")?;
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut map = HashMap::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros_like(&slot.value));
                map.insert(Var(i), g);
            }
        }
        Ok(Gradients { map })
    }

    fn check_order(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            let first_out = node.outputs.iter().map(|v| v.0).min().unwrap_or(usize::MAX);
            if let Some(bad) = node.inputs.iter().find(|v| v.0 >= first_out) {
                return Err(Error::Cycle {
                    node: idx,
                    name: node.func.name().to_string(),
                    input: bad.0,
                });
            }
        }
        Ok(())
    }
}

/// Gradients keyed by the leaf they belong to.
#[derive(Debug)]
pub struct Gradients<F> {
    map: HashMap<Var, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.map.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
