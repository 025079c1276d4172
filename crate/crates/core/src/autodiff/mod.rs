//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are stored in
//! creation order, which is a topological order, and [`Tape::backward`] walks
//! them once in reverse. Gradients survive only on leaves that require them
//! and on nodes explicitly marked with [`Tape::retain`]; attention matrices
//! are retained this way so saliency can read `A` and `dL/dA` together.
//!
//! Broadcasting is limited to a bias row added to every row of a matrix.

mod backward;
mod ops;

use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims2, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Buf<S> {
    Owned(Vec<S>),
    Shared(Arc<Vec<S>>),
}

impl<S> Deref for Buf<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(v) => v,
        }
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRowBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: S,
        /// Row bias fused into the product (`linear`).
        bias: Option<Var>,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    /// Keeps `gelu'(x)` from the forward pass.
    Gelu {
        x: Var,
        deriv: Vec<S>,
    },
    Sigmoid(Var),
    Exp(Var),
    MaskedSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        na: S,
        nb: S,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Contrastive {
        logits: Var,
        partner: Vec<usize>,
        probs: Vec<S>,
    },
}

impl<S> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Cosine { .. } => "cosine_similarity",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::ScaleBy { .. } => "scale_by",
            Op::Contrastive { .. } => "contrastive",
        }
    }
}

pub(crate) struct Node<S> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Buf<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
    pub(crate) retained: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    pub(crate) grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor as a leaf without copying its buffer.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push_node(
            t.shape().to_vec(),
            Buf::Shared(t.shared()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf from an owned buffer.
    pub fn input(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("input", shape, &[data.len()]));
        }
        Ok(self.push_node(shape.to_vec(), Buf::Owned(data), Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if kept.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Keeps both the value and the output gradient of `v` through backward.
    pub fn retain(&mut self, v: Var) {
        self.nodes[v.0].retained = true;
    }

    pub fn is_retained(&self, v: Var) -> bool {
        self.nodes[v.0].retained
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node, in recording order, holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|x| !x.is_finite()))
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    /// Errors with the first offending node when `v` is not finite.
    pub fn ensure_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            return Ok(());
        }
        let (node, op) = self.first_non_finite().expect("a non-finite node exists");
        Err(Error::NonFinite { node: node.0, op })
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_seeded(&[(loss, vec![S::one()])])
    }

    /// Backpropagates externally supplied output gradients.
    ///
    /// Used when the loss lives on another tape: each seed is the gradient of
    /// that loss with respect to one node of this tape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<S>)]) -> Result<()> {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.len() != node.value.len() {
                return Err(Error::shape("backward seed", &node.shape, &[g.len()]));
            }
            if !node.requires_grad {
                continue;
            }
            let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); g.len()]);
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += x;
            }
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            let node = &self.nodes[idx];
            let keep = node.retained || (node.requires_grad && matches!(node.op, Op::Leaf));
            if keep {
                self.grads[idx] = Some(g);
            }
        }
        Ok(())
    }

    pub(crate) fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Buf<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            retained: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}
