use std::sync::Arc;

use crate::ops::{eval, vjp, GridDims, Op};
use crate::{GradError, Result, Tensor};

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Straight-line record of tensor operations.
///
/// Every op method evaluates eagerly and appends a node; inputs always precede
/// their consumers. Parameters enter through [`Tape::leaf`], everything that
/// should not receive gradient through [`Tape::constant`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`], one per requested leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<NodeId>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.leaves
            .iter()
            .position(|&l| l == leaf)
            .map(|i| &self.grads[i])
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.leaves.iter().copied().zip(&self.grads)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, Vec::new(), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Constant, Vec::new(), value)
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluate `op` on existing nodes and record the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(GradError::InvalidArgument {
                op: op.name(),
                reason: "use Tape::leaf or Tape::constant".into(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(GradError::UnknownNode(id.0));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = eval(&op, &values)?;
        Ok(self.push_raw(op, inputs.iter().map(|id| id.0).collect(), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax { mask: None }, &[a])
    }

    pub fn softmax_masked(&mut self, a: NodeId, mask: Arc<[bool]>) -> Result<NodeId> {
        self.apply(Op::Softmax { mask: Some(mask) }, &[a])
    }

    pub fn clip(&mut self, a: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        self.apply(Op::Clip { lo, hi }, &[a])
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId, eps: f32) -> Result<NodeId> {
        self.apply(Op::Cosine { eps }, &[a, b])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> Result<NodeId> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn offset(&mut self, a: NodeId, o: f32) -> Result<NodeId> {
        self.apply(Op::Offset(o), &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, len }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatCols, parts)
    }

    pub fn scatter_rows(&mut self, a: NodeId, rows: Arc<[u32]>, total: usize) -> Result<NodeId> {
        self.apply(Op::ScatterRows { rows, total }, &[a])
    }

    pub fn neighbor_linear(
        &mut self,
        grid: GridDims,
        cells: Arc<[u32]>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        self.apply(Op::NeighborLinear { grid, cells }, &[x, w, b])
    }

    /// Reverse sweep from a one-element `loss` node to every leaf on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let leaves: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect();
        self.backward_wrt(loss, &leaves)
    }

    /// Reverse sweep restricted to `wrt`. Nodes that do not depend on any of
    /// the requested leaves are skipped entirely, so differentiating one
    /// agent's loss with respect to its own parameters costs nothing for
    /// sub-graphs that only involve other parameters.
    pub fn backward_wrt(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(GradError::UnknownNode(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(GradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut depends = vec![false; n];
        for id in wrt {
            let node = self.nodes.get(id.0).ok_or(GradError::UnknownNode(id.0))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(GradError::NotALeaf(id.0));
            }
            depends[id.0] = true;
        }
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            if node.inputs.iter().any(|&j| j >= i) {
                return Err(GradError::Cycle(i));
            }
            if node.inputs.iter().any(|&j| depends[j]) {
                depends[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if depends[loss.0] {
            grads[loss.0] = Some(loss_value.with_shape_of(vec![1.0]));
        }
        for i in (0..=loss.0).rev() {
            if !depends[i] || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs: Vec<bool> = node.inputs.iter().map(|&j| depends[j]).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let local = vjp(&node.op, &inputs, &node.value, &g, &needs)?;
            for (&j, d) in node.inputs.iter().zip(local) {
                let Some(d) = d else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            }
        }
        let out = wrt
            .iter()
            .map(|id| {
                grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()))
            })
            .collect();
        Ok(Gradients {
            leaves: wrt.to_vec(),
            grads: out,
        })
    }

    /// Re-evaluate every recorded op with some leaves or constants replaced,
    /// returning the new value of `target`. Unreplaced inputs keep their
    /// recorded values, so replaying with no overrides reproduces the tape.
    pub fn replay(&self, overrides: &[(NodeId, Tensor)], target: NodeId) -> Result<Tensor> {
        if target.0 >= self.nodes.len() {
            return Err(GradError::UnknownNode(target.0));
        }
        let mut values: Vec<Option<Tensor>> = vec![None; target.0 + 1];
        for (id, v) in overrides {
            let node = self.nodes.get(id.0).ok_or(GradError::UnknownNode(id.0))?;
            if !node.inputs.is_empty() {
                return Err(GradError::NotALeaf(id.0));
            }
            if v.shape() != node.value.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "replay",
                    lhs: node.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            if id.0 <= target.0 {
                values[id.0] = Some(v.clone());
            }
        }
        for i in 0..=target.0 {
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                if values[i].is_none() {
                    values[i] = Some(node.value.clone());
                }
                continue;
            }
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&j| values[j].as_ref().expect("inputs precede consumers"))
                .collect();
            values[i] = Some(eval(&node.op, &inputs)?);
        }
        Ok(values[target.0].take().expect("target evaluated"))
    }
}
