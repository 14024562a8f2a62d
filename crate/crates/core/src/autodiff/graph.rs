//! Define-by-run reverse-mode computation graph.
//!
//! A `Graph` records every operation of one forward pass in an append-only
//! tape; `backward` walks the tape in exact reverse order and accumulates
//! adjoints. Graphs are rebuilt per forward pass and never shared across
//! threads. Values are immutable once recorded: handles (`Var`) only grant
//! read access.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels as k;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph_id: u64,
    index: usize,
}

/// Identifies the operation family a node was produced by.
///
/// `ALL_DIFFERENTIABLE` drives the finite-difference suite: every entry must
/// be covered there, which a unit test enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    BatchMatmul,
    Add,
    Mul,
    ScalarMul,
    Reshape,
    Permute,
    Softmax,
    LayerNorm,
    Gelu,
    GatherRows,
    MaskedFill,
    Concat,
    Slice,
    SumAxis,
    MeanAxis,
    MinAxis,
    SumAll,
    MeanAll,
    Dropout,
    Cosine,
    KlDiv,
    CrossEntropy,
    Frobenius,
}

impl OpKind {
    pub const ALL_DIFFERENTIABLE: &'static [OpKind] = &[
        OpKind::Matmul,
        OpKind::BatchMatmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::GatherRows,
        OpKind::MaskedFill,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::MinAxis,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::Dropout,
        OpKind::Cosine,
        OpKind::KlDiv,
        OpKind::CrossEntropy,
        OpKind::Frobenius,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::BatchMatmul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::GatherRows => "gather_rows",
            OpKind::MaskedFill => "masked_fill",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::MinAxis => "min_axis",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::Dropout => "dropout",
            OpKind::Cosine => "cosine",
            OpKind::KlDiv => "kl_divergence",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Frobenius => "frobenius_norm",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    /// Leading dims equal; multiplies the trailing two axes per batch.
    BatchMatmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { x: usize, c: f64 },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    MaskedFill { x: usize, keep: Vec<f64>, keep_shape: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    MinAxis { x: usize, axis: usize, argmin: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
    Dropout { x: usize, keep: Vec<f64>, scale: f64 },
    Cosine { a: usize, b: usize, eps: f64 },
    KlDiv { q: usize, p: usize, floor: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Frobenius { x: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::BatchMatmul { .. } => OpKind::BatchMatmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScalarMul { .. } => OpKind::ScalarMul,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::MinAxis { .. } => OpKind::MinAxis,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::MeanAll { .. } => OpKind::MeanAll,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::KlDiv { .. } => OpKind::KlDiv,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Frobenius { .. } => OpKind::Frobenius,
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Per-feature variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to each norm in the cosine denominator; exact-zero vectors yield ~0.
pub const COSINE_EPS: f64 = 1e-12;
/// Probability floor applied to `p` before the log in KL divergence.
pub const KL_FLOOR: f64 = 1e-12;
/// Value written into masked-out logits before softmax.
pub const MASK_FILL_VALUE: f64 = -1e9;

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let index = self.nodes.len();
        self.nodes.push(Node { op, shape, values, requires_grad });
        Var { graph_id: self.id, index }
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.graph_id != self.id {
            return Err(Error::ForeignGraph { expected: self.id, got: v.graph_id });
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.nodes[self.resolve(v)?].values)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.nodes[self.resolve(v)?].shape)
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let i = self.resolve(v)?;
        let n = &self.nodes[i];
        if n.values.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.values[0])
    }

    pub fn op_kind(&self, v: Var) -> Result<OpKind> {
        Ok(self.nodes[self.resolve(v)?].op.kind())
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    /// Differentiable leaf: `grad` retrievable after backward.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(data, shape, true)
    }

    fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                details: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.constant(t.data.clone(), t.shape.clone())
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.input(t.data.clone(), t.shape.clone())
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let values = k::matmul_2d(&self.nodes[ai].values, &self.nodes[bi].values, m, kk, n);
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::Matmul { a: ai, b: bi }, vec![m, n], values, rg))
    }

    /// Batched matrix product over the trailing two axes; leading dims must
    /// be identical, e.g. `[B,H,m,k] @ [B,H,k,n] -> [B,H,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        let ok = sa.len() >= 3
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Error::Shape {
                op: "batch_matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let nd = sa.len();
        let (m, kk, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        let batches: usize = sa[..nd - 2].iter().product();
        let mut out_shape = sa[..nd - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut values = vec![0.0; batches * m * n];
        for t in 0..batches {
            k::matmul_2d_into(
                &self.nodes[ai].values[t * m * kk..(t + 1) * m * kk],
                &self.nodes[bi].values[t * kk * n..(t + 1) * kk * n],
                m,
                kk,
                n,
                &mut values[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::BatchMatmul { a: ai, b: bi }, out_shape, values, rg))
    }

    // ── Elementwise / broadcast ─────────────────────────────────────────

    fn binary_broadcast(&mut self, op_name: &'static str, a: Var, b: Var, is_add: bool) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (self.nodes[ai].shape.clone(), self.nodes[bi].shape.clone());
        let out_shape = k::broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: op_name,
            details: format!("{:?} vs {:?}", sa, sb),
        })?;
        let numel: usize = out_shape.iter().product();
        let va = &self.nodes[ai].values;
        let vb = &self.nodes[bi].values;
        let values = if sa == sb {
            va.iter()
                .zip(vb)
                .map(|(x, y)| if is_add { x + y } else { x * y })
                .collect()
        } else {
            let map_a = k::broadcast_index_map(&out_shape, &sa);
            let map_b = k::broadcast_index_map(&out_shape, &sb);
            (0..numel)
                .map(|i| {
                    let (x, y) = (va[map_a[i]], vb[map_b[i]]);
                    if is_add {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect()
        };
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let op = if is_add { Op::Add { a: ai, b: bi } } else { Op::Mul { a: ai, b: bi } };
        Ok(self.push(op, out_shape, values, rg))
    }

    /// Elementwise sum with numpy-style broadcasting (covers bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, true)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, false)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.resolve(x)?;
        let values = self.nodes[xi].values.iter().map(|v| c * v).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::ScalarMul { x: xi, c }, shape, values, rg))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.resolve(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[xi].values.len() {
            return Err(Error::Shape {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.nodes[xi].shape, shape),
            });
        }
        let values = self.nodes[xi].values.clone();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Reshape { x: xi }, shape, values, rg))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xi = self.resolve(x)?;
        let in_shape = self.nodes[xi].shape.clone();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                details: format!("axes {:?} for shape {:?}", axes, in_shape),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let values = permute_values(&self.nodes[xi].values, &in_shape, axes);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Permute { x: xi, axes: axes.to_vec() }, out_shape, values, rg))
    }

    /// Swap the trailing two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x)?.len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                details: format!("rank {} < 2", nd),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let shape = self.nodes[xi].shape.clone();
        let w = *shape.last().ok_or_else(|| Error::Shape {
            op: "softmax",
            details: "rank-0 input".into(),
        })?;
        let mut values = self.nodes[xi].values.clone();
        k::softmax_rows(&mut values, w);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Softmax { x: xi }, shape, values, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Constant rows normalize to exactly zero (variance floor 1e-12).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.resolve(x)?, self.resolve(gain)?, self.resolve(bias)?);
        let shape = self.nodes[xi].shape.clone();
        let w = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            details: "rank-0 input".into(),
        })?;
        if self.nodes[gi].shape != [w] || self.nodes[bi].shape != [w] {
            return Err(Error::Shape {
                op: "layer_norm",
                details: format!(
                    "gain {:?} / bias {:?} for feature width {}",
                    self.nodes[gi].shape, self.nodes[bi].shape, w
                ),
            });
        }
        let rows = self.nodes[xi].values.len() / w;
        let mut values = vec![0.0; rows * w];
        let mut xhat = vec![0.0; rows * w];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.nodes[xi].values[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..w {
                let xh = (row[j] - mean) * inv;
                xhat[r * w + j] = xh;
                values[r * w + j] = xh * self.nodes[gi].values[j] + self.nodes[bi].values[j];
            }
        }
        let rg = self.nodes[xi].requires_grad
            || self.nodes[gi].requires_grad
            || self.nodes[bi].requires_grad;
        Ok(self.push(Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, inv_std }, shape, values, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let values = self.nodes[xi].values.iter().map(|&v| k::gelu(v)).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Gelu { x: xi }, shape, values, rg))
    }

    // ── Indexing / masking ──────────────────────────────────────────────

    /// Gather rows of a `[rows, width]` table; output shape is
    /// `index_shape ++ [width]`. Backward scatters into the table rows, so a
    /// perturbation added after the lookup and the table itself both receive
    /// gradient.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ti = self.resolve(table)?;
        let ts = &self.nodes[ti].shape;
        if ts.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                details: format!("table must be 2-D, got {:?}", ts),
            });
        }
        let (rows, w) = (ts[0], ts[1]);
        if indices.len() != index_shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "gather_rows",
                details: format!("{} indices vs index shape {:?}", indices.len(), index_shape),
            });
        }
        if let Some(pos) = indices.iter().position(|&id| id >= rows) {
            return Err(Error::Input(format!(
                "gather_rows: index {} at position {} out of range (table has {} rows)",
                indices[pos], pos, rows
            )));
        }
        let mut values = Vec::with_capacity(indices.len() * w);
        for &id in indices {
            values.extend_from_slice(&self.nodes[ti].values[id * w..(id + 1) * w]);
        }
        let mut out_shape = index_shape.to_vec();
        out_shape.push(w);
        let rg = self.nodes[ti].requires_grad;
        Ok(self.push(Op::GatherRows { table: ti, indices: indices.to_vec() }, out_shape, values, rg))
    }

    /// Where `keep` (broadcast to `x`) is 0, replace the entry with `fill`;
    /// gradient flows only through kept entries.
    pub fn masked_fill(&mut self, x: Var, keep: &[f64], keep_shape: &[usize], fill: f64) -> Result<Var> {
        let xi = self.resolve(x)?;
        let shape = self.nodes[xi].shape.clone();
        if keep.len() != keep_shape.iter().product::<usize>()
            || k::broadcast_shape(&shape, keep_shape) != Some(shape.clone())
        {
            return Err(Error::Shape {
                op: "masked_fill",
                details: format!("mask {:?} not broadcastable to {:?}", keep_shape, shape),
            });
        }
        let map = k::broadcast_index_map(&shape, keep_shape);
        let values = self.nodes[xi]
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[map[i]] != 0.0 { v } else { fill })
            .collect();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(
            Op::MaskedFill { x: xi, keep: keep.to_vec(), keep_shape: keep_shape.to_vec() },
            shape,
            values,
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Shape { op: "concat", details: "no inputs".into() });
        }
        let idxs: Vec<usize> = inputs.iter().map(|v| self.resolve(*v)).collect::<Result<_>>()?;
        let first = self.nodes[idxs[0]].shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                details: format!("axis {} for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(d, &v)| d == axis || v == first[d]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    details: format!("{:?} vs {:?} along axis {}", s, first, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut values = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &i in &idxs {
            let len_i = self.nodes[i].shape[axis];
            for o in 0..outer {
                let src = &self.nodes[i].values[o * len_i * inner..(o + 1) * len_i * inner];
                let dst_start = (o * axis_total + offset) * inner;
                values[dst_start..dst_start + len_i * inner].copy_from_slice(src);
            }
            offset += len_i;
        }
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Op::Concat { inputs: idxs, axis }, out_shape, values, rg))
    }

    /// Half-open range `[start, end)` along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xi = self.resolve(x)?;
        let shape = self.nodes[xi].shape.clone();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                details: format!("[{start}, {end}) along axis {axis} of {:?}", shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut values = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            values[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.nodes[xi].values[src_start..src_start + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Slice { x: xi, axis, start }, out_shape, values, rg))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn reduce_axis_prep(&self, op: &'static str, xi: usize, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = &self.nodes[xi].shape;
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                details: format!("axis {} for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok((outer, n, inner, out_shape))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.resolve(x)?;
        let (outer, n, inner, out_shape) = self.reduce_axis_prep("sum_axis", xi, axis)?;
        let mut values = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    values[o * inner + i] += self.nodes[xi].values[(o * n + j) * inner + i];
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::SumAxis { x: xi, axis }, out_shape, values, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.resolve(x)?;
        let (outer, n, inner, out_shape) = self.reduce_axis_prep("mean_axis", xi, axis)?;
        let mut values = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    values[o * inner + i] += self.nodes[xi].values[(o * n + j) * inner + i];
                }
            }
        }
        values.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::MeanAxis { x: xi, axis }, out_shape, values, rg))
    }

    /// Minimum over an axis; gradient routes to the first minimum on ties.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.resolve(x)?;
        let (outer, n, inner, out_shape) = self.reduce_axis_prep("min_axis", xi, axis)?;
        let mut values = vec![f64::INFINITY; outer * inner];
        let mut argmin = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = self.nodes[xi].values[(o * n + j) * inner + i];
                    if v < values[o * inner + i] {
                        values[o * inner + i] = v;
                        argmin[o * inner + i] = j;
                    }
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::MinAxis { x: xi, axis, argmin }, out_shape, values, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let total = self.nodes[xi].values.iter().sum();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::SumAll { x: xi }, vec![], vec![total], rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let n = self.nodes[xi].values.len() as f64;
        let total = self.nodes[xi].values.iter().sum::<f64>() / n;
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::MeanAll { x: xi }, vec![], vec![total], rg))
    }

    // ── Stochastic ──────────────────────────────────────────────────────

    /// Inverted dropout with a mask drawn from the given seed. `rate == 0`
    /// returns `x` unchanged (no node recorded).
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let xi = self.resolve(x)?;
        let mut rng = stream_rng(seed, "dropout-mask", 0);
        let keep: Vec<f64> = (0..self.nodes[xi].values.len())
            .map(|_| if rng.random::<f64>() >= rate { 1.0 } else { 0.0 })
            .collect();
        let scale = 1.0 / (1.0 - rate);
        let values = self.nodes[xi]
            .values
            .iter()
            .zip(&keep)
            .map(|(&v, &m)| v * m * scale)
            .collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Dropout { x: xi, keep, scale }, shape, values, rg))
    }

    // ── Task / objective primitives ─────────────────────────────────────

    /// Cosine similarity over the last axis: for matching shapes
    /// `[..., d]` the result has shape `[...]`. Each norm gets `+1e-12` in
    /// the denominator, so exact-zero vectors yield ~0 instead of NaN.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa != sb || sa.is_empty() {
            return Err(Error::Shape {
                op: "cosine",
                details: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let w = *sa.last().unwrap();
        let rows = self.nodes[ai].values.len() / w;
        let out_shape = sa[..sa.len() - 1].to_vec();
        let mut values = vec![0.0; rows];
        for r in 0..rows {
            let ra = &self.nodes[ai].values[r * w..(r + 1) * w];
            let rb = &self.nodes[bi].values[r * w..(r + 1) * w];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            values[r] = dot / ((na + COSINE_EPS) * (nb + COSINE_EPS));
        }
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(Op::Cosine { a: ai, b: bi, eps: COSINE_EPS }, out_shape, values, rg))
    }

    /// KL divergence `sum q ln(q/p)` over the last axis, with `0 ln 0 = 0`
    /// and `p` floored at 1e-12 before the log. Inputs must be distributions
    /// (entries in [0,1], rows summing to 1 within 1e-9).
    pub fn kl_divergence(&mut self, q: Var, p: Var) -> Result<Var> {
        let (qi, pi) = (self.resolve(q)?, self.resolve(p)?);
        for (name, i) in [("q", qi), ("p", pi)] {
            let w = *self.nodes[i].shape.last().ok_or_else(|| Error::Shape {
                op: "kl_divergence",
                details: "rank-0 input".into(),
            })?;
            for row in self.nodes[i].values.chunks(w) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
                    return Err(Error::Input(format!(
                        "kl_divergence: {} is not a probability distribution (row sum {})",
                        name, s
                    )));
                }
            }
        }
        self.kl_divergence_unchecked(q, p)
    }

    /// Same computation without the distribution check; used by the
    /// finite-difference suite, whose probes fall outside the simplex.
    pub fn kl_divergence_unchecked(&mut self, q: Var, p: Var) -> Result<Var> {
        let (qi, pi) = (self.resolve(q)?, self.resolve(p)?);
        let (sq, sp) = (&self.nodes[qi].shape, &self.nodes[pi].shape);
        if sq != sp || sq.is_empty() {
            return Err(Error::Shape {
                op: "kl_divergence",
                details: format!("{:?} vs {:?}", sq, sp),
            });
        }
        let w = *sq.last().unwrap();
        let rows = self.nodes[qi].values.len() / w;
        let out_shape = sq[..sq.len() - 1].to_vec();
        let mut values = vec![0.0; rows];
        for r in 0..rows {
            let rq = &self.nodes[qi].values[r * w..(r + 1) * w];
            let rp = &self.nodes[pi].values[r * w..(r + 1) * w];
            values[r] = rq
                .iter()
                .zip(rp)
                .map(|(&qv, &pv)| if qv > 0.0 { qv * (qv.ln() - pv.max(KL_FLOOR).ln()) } else { 0.0 })
                .sum();
        }
        let rg = self.nodes[qi].requires_grad || self.nodes[pi].requires_grad;
        Ok(self.push(Op::KlDiv { q: qi, p: pi, floor: KL_FLOOR }, out_shape, values, rg))
    }

    /// Per-row `-log softmax(logits)[label]`, stabilized by max subtraction.
    /// `logits` is `[n, classes]` (or `[classes]` for a single row).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.resolve(logits)?;
        let shape = self.nodes[li].shape.clone();
        let (n, c, out_shape) = match shape.len() {
            1 => (1, shape[0], vec![]),
            2 => (shape[0], shape[1], vec![shape[0]]),
            _ => {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    details: format!("logits must be 1-D or 2-D, got {:?}", shape),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                details: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!(
                "cross_entropy: label {} out of range for {} classes",
                bad, c
            )));
        }
        let mut probs = self.nodes[li].values.clone();
        k::softmax_rows(&mut probs, c);
        let mut values = vec![0.0; n];
        for r in 0..n {
            let row = &self.nodes[li].values[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            values[r] = lse - row[labels[r]];
        }
        let rg = self.nodes[li].requires_grad;
        Ok(self.push(
            Op::CrossEntropy { logits: li, labels: labels.to_vec(), probs },
            out_shape,
            values,
            rg,
        ))
    }

    /// Frobenius norm of the whole tensor (scalar output). The gradient at
    /// the exact zero tensor is defined as zero.
    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let norm = self.nodes[xi].values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(Op::Frobenius { x: xi }, vec![], vec![norm], rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints of earlier backward calls
    /// on the same graph are discarded; gradient accumulation across calls
    /// happens in the caller's `Tensor::accumulate_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.resolve(loss)?;
        if self.nodes[li].values.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        self.adjoints.clear();
        self.adjoints.resize(self.nodes.len(), None);
        if !self.nodes[li].requires_grad {
            return Ok(()); // loss is constant w.r.t. every input
        }
        self.adjoints[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.adjoints[i].take() else { continue };
            backprop_node(&self.nodes, i, &g, &mut self.adjoints);
            self.adjoints[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward loss w.r.t. `v`. Zero for nodes the
    /// loss does not reach; error for constants.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let i = self.resolve(v)?;
        if !self.nodes[i].requires_grad {
            return Err(Error::MissingGrad {
                index: i,
                reason: "node does not require grad".into(),
            });
        }
        if self.adjoints.len() != self.nodes.len() {
            return Err(Error::MissingGrad {
                index: i,
                reason: "backward has not run on this graph".into(),
            });
        }
        Ok(match &self.adjoints[i] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[i].values.len()],
        })
    }
}

fn permute_values(values: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = in_shape.len();
    let in_strides = k::strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut out = vec![0.0; values.len()];
    let mut coords = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..nd {
            src += coords[d] * in_strides[axes[d]];
        }
        *slot = values[src];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Accumulate `delta`-producing closure output into the adjoint of `idx`.
fn with_adjoint(
    nodes: &[Node],
    adjoints: &mut [Option<Vec<f64>>],
    idx: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[idx].requires_grad {
        return;
    }
    let slot = adjoints[idx].get_or_insert_with(|| vec![0.0; nodes[idx].values.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, kk) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            with_adjoint(nodes, adj, *a, |da| {
                k::matmul_2d_bt_into(g, &nodes[*b].values, m, n, kk, da)
            });
            with_adjoint(nodes, adj, *b, |db| {
                k::matmul_2d_at_into(&nodes[*a].values, g, m, kk, n, db)
            });
        }
        Op::BatchMatmul { a, b } => {
            let nd = nodes[*a].shape.len();
            let (m, kk) = (nodes[*a].shape[nd - 2], nodes[*a].shape[nd - 1]);
            let n = nodes[*b].shape[nd - 1];
            let batches: usize = nodes[*a].shape[..nd - 2].iter().product();
            with_adjoint(nodes, adj, *a, |da| {
                for t in 0..batches {
                    k::matmul_2d_bt_into(
                        &g[t * m * n..(t + 1) * m * n],
                        &nodes[*b].values[t * kk * n..(t + 1) * kk * n],
                        m,
                        n,
                        kk,
                        &mut da[t * m * kk..(t + 1) * m * kk],
                    );
                }
            });
            with_adjoint(nodes, adj, *b, |db| {
                for t in 0..batches {
                    k::matmul_2d_at_into(
                        &nodes[*a].values[t * m * kk..(t + 1) * m * kk],
                        &g[t * m * n..(t + 1) * m * n],
                        m,
                        kk,
                        n,
                        &mut db[t * kk * n..(t + 1) * kk * n],
                    );
                }
            });
        }
        Op::Add { a, b } => {
            let out_shape = &nodes[i].shape;
            for &operand in &[*a, *b] {
                let reduced = k::reduce_grad_to_shape(g, out_shape, &nodes[operand].shape);
                with_adjoint(nodes, adj, operand, |d| {
                    d.iter_mut().zip(&reduced).for_each(|(x, y)| *x += y)
                });
            }
        }
        Op::Mul { a, b } => {
            let out_shape = &nodes[i].shape;
            for (operand, other) in [(*a, *b), (*b, *a)] {
                if !nodes[operand].requires_grad {
                    continue;
                }
                let other_map = k::broadcast_index_map(out_shape, &nodes[other].shape);
                let weighted: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, gv)| gv * nodes[other].values[other_map[j]])
                    .collect();
                let reduced = k::reduce_grad_to_shape(&weighted, out_shape, &nodes[operand].shape);
                with_adjoint(nodes, adj, operand, |d| {
                    d.iter_mut().zip(&reduced).for_each(|(x, y)| *x += y)
                });
            }
        }
        Op::ScalarMul { x, c } => {
            with_adjoint(nodes, adj, *x, |d| {
                d.iter_mut().zip(g).for_each(|(v, gv)| *v += c * gv)
            });
        }
        Op::Reshape { x } => {
            with_adjoint(nodes, adj, *x, |d| {
                d.iter_mut().zip(g).for_each(|(v, gv)| *v += gv)
            });
        }
        Op::Permute { x, axes } => {
            // inverse permutation maps output adjoints back onto the input
            let mut inverse = vec![0usize; axes.len()];
            for (out_axis, &in_axis) in axes.iter().enumerate() {
                inverse[in_axis] = out_axis;
            }
            let back = permute_values(g, &nodes[i].shape, &inverse);
            with_adjoint(nodes, adj, *x, |d| {
                d.iter_mut().zip(&back).for_each(|(v, gv)| *v += gv)
            });
        }
        Op::Softmax { x } => {
            let w = *nodes[i].shape.last().unwrap();
            let y = &nodes[i].values;
            with_adjoint(nodes, adj, *x, |d| {
                for r in 0..y.len() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        d[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let w = *nodes[i].shape.last().unwrap();
            let rows = xhat.len() / w;
            let gamma = &nodes[*gain].values;
            with_adjoint(nodes, adj, *gain, |d| {
                for r in 0..rows {
                    for j in 0..w {
                        d[j] += g[r * w + j] * xhat[r * w + j];
                    }
                }
            });
            with_adjoint(nodes, adj, *bias, |d| {
                for r in 0..rows {
                    for j in 0..w {
                        d[j] += g[r * w + j];
                    }
                }
            });
            with_adjoint(nodes, adj, *x, |d| {
                for r in 0..rows {
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..w {
                        let gg = g[r * w + j] * gamma[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[r * w + j];
                    }
                    mean_gg /= w as f64;
                    mean_ggx /= w as f64;
                    for j in 0..w {
                        let gg = g[r * w + j] * gamma[j];
                        d[r * w + j] += inv_std[r] * (gg - mean_gg - xhat[r * w + j] * mean_ggx);
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let xv = &nodes[*x].values;
            with_adjoint(nodes, adj, *x, |d| {
                for (j, gv) in g.iter().enumerate() {
                    d[j] += gv * k::gelu_grad(xv[j]);
                }
            });
        }
        Op::GatherRows { table, indices } => {
            let w = nodes[*table].shape[1];
            with_adjoint(nodes, adj, *table, |d| {
                for (r, &id) in indices.iter().enumerate() {
                    for j in 0..w {
                        d[id * w + j] += g[r * w + j];
                    }
                }
            });
        }
        Op::MaskedFill { x, keep, keep_shape } => {
            let map = k::broadcast_index_map(&nodes[i].shape, keep_shape);
            with_adjoint(nodes, adj, *x, |d| {
                for (j, gv) in g.iter().enumerate() {
                    if keep[map[j]] != 0.0 {
                        d[j] += gv;
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let out_shape = &nodes[i].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len_i = nodes[inp].shape[*axis];
                with_adjoint(nodes, adj, inp, |d| {
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        let dst = &mut d[o * len_i * inner..(o + 1) * len_i * inner];
                        dst.iter_mut()
                            .zip(&g[src_start..src_start + len_i * inner])
                            .for_each(|(v, gv)| *v += gv);
                    }
                });
                offset += len_i;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = &nodes[*x].shape;
            let out_shape = &nodes[i].shape;
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let len = out_shape[*axis];
            with_adjoint(nodes, adj, *x, |d| {
                for o in 0..outer {
                    let dst_start = (o * in_shape[*axis] + start) * inner;
                    d[dst_start..dst_start + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(v, gv)| *v += gv);
                }
            });
        }
        Op::SumAxis { x, axis } => {
            let in_shape = &nodes[*x].shape;
            let outer: usize = in_shape[..*axis].iter().product();
            let n = in_shape[*axis];
            let inner: usize = in_shape[*axis + 1..].iter().product();
            with_adjoint(nodes, adj, *x, |d| {
                for o in 0..outer {
                    for j in 0..n {
                        for ii in 0..inner {
                            d[(o * n + j) * inner + ii] += g[o * inner + ii];
                        }
                    }
                }
            });
        }
        Op::MeanAxis { x, axis } => {
            let in_shape = &nodes[*x].shape;
            let outer: usize = in_shape[..*axis].iter().product();
            let n = in_shape[*axis];
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let inv = 1.0 / n as f64;
            with_adjoint(nodes, adj, *x, |d| {
                for o in 0..outer {
                    for j in 0..n {
                        for ii in 0..inner {
                            d[(o * n + j) * inner + ii] += g[o * inner + ii] * inv;
                        }
                    }
                }
            });
        }
        Op::MinAxis { x, axis, argmin } => {
            let in_shape = &nodes[*x].shape;
            let n = in_shape[*axis];
            let inner: usize = in_shape[*axis + 1..].iter().product();
            with_adjoint(nodes, adj, *x, |d| {
                for (o_i, &j) in argmin.iter().enumerate() {
                    let (o, ii) = (o_i / inner, o_i % inner);
                    d[(o * n + j) * inner + ii] += g[o_i];
                }
            });
        }
        Op::SumAll { x } => {
            with_adjoint(nodes, adj, *x, |d| {
                d.iter_mut().for_each(|v| *v += g[0])
            });
        }
        Op::MeanAll { x } => {
            let inv = 1.0 / nodes[*x].values.len() as f64;
            with_adjoint(nodes, adj, *x, |d| {
                d.iter_mut().for_each(|v| *v += g[0] * inv)
            });
        }
        Op::Dropout { x, keep, scale } => {
            with_adjoint(nodes, adj, *x, |d| {
                for (j, gv) in g.iter().enumerate() {
                    d[j] += gv * keep[j] * scale;
                }
            });
        }
        Op::Cosine { a, b, eps } => {
            let w = *nodes[*a].shape.last().unwrap();
            let rows = nodes[*a].values.len() / w;
            for (operand, other) in [(*a, *b), (*b, *a)] {
                if !nodes[operand].requires_grad {
                    continue;
                }
                with_adjoint(nodes, adj, operand, |d| {
                    for r in 0..rows {
                        let ro = &nodes[operand].values[r * w..(r + 1) * w];
                        let rt = &nodes[other].values[r * w..(r + 1) * w];
                        let no = ro.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nt = rt.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if no == 0.0 {
                            continue; // zero vector: flat by convention
                        }
                        let denom = (no + eps) * (nt + eps);
                        let dot: f64 = ro.iter().zip(rt).map(|(x, y)| x * y).sum();
                        let value = dot / denom;
                        let gr = g[r];
                        for j in 0..w {
                            d[r * w + j] += gr * (rt[j] / denom - value * ro[j] / (no * (no + eps)));
                        }
                    }
                });
            }
        }
        Op::KlDiv { q, p, floor } => {
            let w = *nodes[*q].shape.last().unwrap();
            let rows = nodes[*q].values.len() / w;
            let qv = &nodes[*q].values;
            let pv = &nodes[*p].values;
            with_adjoint(nodes, adj, *p, |d| {
                for r in 0..rows {
                    for j in 0..w {
                        let (qx, px) = (qv[r * w + j], pv[r * w + j]);
                        if qx > 0.0 && px > *floor {
                            d[r * w + j] -= g[r] * qx / px;
                        }
                    }
                }
            });
            with_adjoint(nodes, adj, *q, |d| {
                for r in 0..rows {
                    for j in 0..w {
                        let (qx, px) = (qv[r * w + j], pv[r * w + j]);
                        if qx > 0.0 {
                            d[r * w + j] += g[r] * ((qx.ln() - px.max(*floor).ln()) + 1.0);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = *nodes[*logits].shape.last().unwrap();
            with_adjoint(nodes, adj, *logits, |d| {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == label { 1.0 } else { 0.0 };
                        d[r * c + j] += g[r] * (probs[r * c + j] - indicator);
                    }
                }
            });
        }
        Op::Frobenius { x } => {
            let norm = nodes[i].values[0];
            if norm == 0.0 {
                return; // zero tensor: subgradient 0
            }
            let xv = &nodes[*x].values;
            with_adjoint(nodes, adj, *x, |d| {
                for (j, v) in xv.iter().enumerate() {
                    d[j] += g[0] * v / norm;
                }
            });
        }
    }
}
