//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass as a [`Node`]
//! in topological order. [`Tape::backward`] walks the recorded operations in
//! reverse and accumulates gradients into every node that requires them.
//! A tape is single-threaded; independent tapes may run concurrently.
//!
//! All data is 64-bit. Negative infinity is used as the masking sentinel so
//! that masked softmax entries come out exactly zero.

mod ops;
mod params;

pub use params::{Param, ParamBindings, ParameterStore};

use crate::error::{Error, Result};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One recorded operation together with everything backward needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Abs { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Sqrt { x: NodeId },
    Recip { x: NodeId },
    SoftmaxRows { x: NodeId },
    L2NormRows { x: NodeId },
    NormalizeRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    CrossEntropyNll { logits: NodeId, targets: Vec<usize> },
    MaskedFill { x: NodeId, mask: Vec<bool> },
    GatherRows { src: NodeId, rows: Vec<usize> },
    ScatterAddRows { src: NodeId, rows: Vec<usize> },
    Column { x: NodeId, col: usize },
    ScaleRows { x: NodeId, s: NodeId },
    MulCols { x: NodeId, s: NodeId },
    DivCols { x: NodeId, s: NodeId },
    DivScalar { x: NodeId, s: NodeId },
    RowSum { x: NodeId },
    MeanRows { x: NodeId },
    ConcatCols { xs: Vec<NodeId> },
    ConcatRows { xs: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, end: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Mse { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

/// Reverse-mode tape. Create leaves, build the graph with the op methods,
/// then call [`Tape::backward`] on a scalar loss.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf tensor. `requires_grad` leaves receive gradients from
    /// [`Tape::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: vec![data.len()],
                rhs: shape,
            });
        }
        Ok(self.push_node(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push_node(vec![v], vec![1], false, Op::Leaf)
    }

    /// Copy the current value of `x` into a fresh constant leaf, cutting the
    /// gradient path. Used for distillation targets.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push_node(data, shape, false, Op::Leaf)
    }

    pub fn data(&self, x: NodeId) -> &[f64] {
        &self.nodes[x.0].data
    }

    pub fn shape(&self, x: NodeId) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn grad(&self, x: NodeId) -> Option<&[f64]> {
        self.nodes[x.0].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn value(&self, x: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[x.0].data.len(), 1);
        self.nodes[x.0].data[0]
    }

    pub fn requires_grad(&self, x: NodeId) -> bool {
        self.nodes[x.0].requires_grad
    }

    // Non-finite values are allowed to flow: a diverging training run must
    // reach the trainer's loss check and abort with a structured error,
    // not die in an assertion mid-forward.
    pub(crate) fn push_node(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    /// Output requires grad iff any input does.
    pub(crate) fn any_requires(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` for every
    /// `requires_grad` node reachable from `loss`. Deterministic: a fixed
    /// traversal order and fixed-order reductions give bitwise-identical
    /// gradients across runs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::RankMismatch {
                op: "backward",
                expected: 0,
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream wants a gradient.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.backprop_op(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, target: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }
}

// ── raw matmul kernels ──────────────────────────────────────────────

const PAR_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] · B[k,n]. Row-parallel above a size threshold; each output
/// row is reduced serially, so results are bitwise identical either way.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cij, bpj) in ci.iter_mut().zip(brow) {
                *cij += aip * bpj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cij = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cij, bpj) in ci.iter_mut().zip(brow) {
                *cij += api * bpj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}
