use super::{Result, Tensor, TensorError, LAYER_NORM_EPS, LOG_EPS};
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Identifies a primitive in errors and gradient-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Exp,
    Log,
    Tan,
    Sigmoid,
    Gelu,
    Abs,
    Clamp,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
    SumAxis,
    Reshape,
    Permute,
    IndexSelect,
    Scatter,
    SoftmaxCrossEntropy,
    L1Loss,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    BatchMatMul { batch: usize, m: usize, k: usize, n: usize },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Tan,
    Sigmoid,
    Gelu,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Softmax { cols: usize },
    LayerNorm { cols: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Sum,
    Mean,
    SumAxis { outer: usize, len: usize, inner: usize, mean: bool },
    Reshape,
    Permute { perm: Vec<usize> },
    IndexSelect { rows: Vec<usize>, row_len: usize },
    Scatter { index: Vec<usize>, row_len: usize },
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64>, classes: usize },
    L1Loss { sign: Vec<f64> },
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::BatchMatMul { .. } => Primitive::BatchMatMul,
            Op::Add => Primitive::Add,
            Op::Sub => Primitive::Sub,
            Op::Mul => Primitive::Mul,
            Op::Div => Primitive::Div,
            Op::Scale(_) => Primitive::Scale,
            Op::AddScalar => Primitive::AddScalar,
            Op::Exp => Primitive::Exp,
            Op::Log => Primitive::Log,
            Op::Tan => Primitive::Tan,
            Op::Sigmoid => Primitive::Sigmoid,
            Op::Gelu => Primitive::Gelu,
            Op::Abs => Primitive::Abs,
            Op::Clamp { .. } => Primitive::Clamp,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Sum => Primitive::Sum,
            Op::Mean => Primitive::Mean,
            Op::SumAxis { .. } => Primitive::SumAxis,
            Op::Reshape => Primitive::Reshape,
            Op::Permute { .. } => Primitive::Permute,
            Op::IndexSelect { .. } => Primitive::IndexSelect,
            Op::Scatter { .. } => Primitive::Scatter,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
            Op::L1Loss { .. } => Primitive::L1Loss,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<Var>,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications in topological (creation) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    macs: u64,
    corrupt: Option<Primitive>,
}

fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output offset of a permutation to its input offset.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: scales the backward rule of `prim` by 1.5 so that
    /// gradient checks must catch it.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, prim: Primitive) {
        self.corrupt = Some(prim);
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let id = self.nodes.len();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.primitive(),
                node: id,
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            parents,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Inserts a leaf whose gradient flag follows the tensor's.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.insert_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Inserts a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.insert_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.insert_leaf(shape, t.into_data(), false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.insert_leaf(vec![1], vec![v], false)
    }

    fn insert_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            parents: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node shape invariant")
    }

    /// Gradient of the last backward's loss with respect to `v`, if `v` was
    /// reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Copies the gradient of `v` into the tensor's gradient slot (zeros when
    /// unreachable).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        t.set_grad(g)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: Primitive::MatMul,
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        self.push(Op::MatMul { m, k, n }, vec![a, b], vec![m, n], out)
    }

    /// Batched product of `[batch, m, k]` and `[batch, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: Primitive::BatchMatMul,
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for t in 0..batch {
                matmul_into(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        self.push(
            Op::BatchMatMul { batch, m, k, n },
            vec![a, b],
            vec![batch, m, n],
            out,
        )
    }

    // ----- elementwise binary with trailing broadcast ---------------------

    fn check_broadcast(&self, op: Primitive, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        // A single-element operand broadcasts over anything.
        if ok || self.value(b).len() == 1 {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_broadcast(op.primitive(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a, b], shape, out)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (or `b` has one element).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    // ----- elementwise unary ----------------------------------------------

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a], shape, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    /// `ln(x + LOG_EPS)`; negative inputs beyond the floor are an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.value(a).iter().find(|&&x| x + LOG_EPS <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: Primitive::Log,
                reason: format!("argument {x} outside the domain"),
            });
        }
        self.unary(Op::Log, a, |x| (x + LOG_EPS).ln())
    }

    pub fn tan(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tan, a, f64::tan)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu, a, gelu_value)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs, a, f64::abs)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: Primitive::Clamp,
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    // ----- normalizations ---------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(Op::Softmax { cols }, vec![a], shape, out)
    }

    /// Layer normalization over the last axis, without affine parameters.
    ///
    /// With `weights = Some(w)` (shape `[cols]`, non-negative) the mean and
    /// variance are `w`-weighted. For `w` in `{0, 1}` this equals plain
    /// normalization over the channels with `w = 1` only.
    pub fn layer_norm(&mut self, x: Var, weights: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let w: Vec<f64> = match weights {
            Some(w) => {
                if self.shape(w) != [cols] {
                    return Err(TensorError::ShapeMismatch {
                        op: Primitive::LayerNorm,
                        lhs: shape,
                        rhs: self.shape(w).to_vec(),
                    });
                }
                self.value(w).to_vec()
            }
            None => vec![1.0; cols],
        };
        let wsum: f64 = w.iter().sum();
        if wsum <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: Primitive::LayerNorm,
                reason: "channel weights sum to zero".into(),
            });
        }
        let xv = self.value(x);
        let rows = xv.len() / cols;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / wsum;
            let var = row
                .iter()
                .zip(&w)
                .map(|(a, b)| b * (a - mean) * (a - mean))
                .sum::<f64>()
                / wsum;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let mut parents = vec![x];
        parents.extend(weights);
        self.push(
            Op::LayerNorm {
                cols,
                mean: means,
                rstd: rstds,
            },
            parents,
            shape,
            out,
        )
    }

    // ----- reductions and layout -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum, vec![a], vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean, vec![a], vec![1], vec![s])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: Primitive::SumAxis,
                reason: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            Op::SumAxis {
                outer,
                len,
                inner,
                mean,
            },
            vec![a],
            out_shape,
            out,
        )
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: Primitive::Reshape,
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        self.push(Op::Reshape, vec![a], shape.to_vec(), data)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: Primitive::Permute,
                reason: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let map = permute_index(&shape, perm);
        let v = self.value(a);
        let out: Vec<f64> = map.iter().map(|&i| v[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(Op::Permute { perm: perm.to_vec() }, vec![a], out_shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: Primitive::Permute,
                reason: "transpose needs at least two axes".into(),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Selects rows (first-axis slices) in the given order.
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::InvalidArgument {
                op: Primitive::IndexSelect,
                reason: format!("row indices out of range for {shape:?}"),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&v[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.push(
            Op::IndexSelect {
                rows: rows.to_vec(),
                row_len,
            },
            vec![a],
            out_shape,
            out,
        )
    }

    /// Places row `i` of `a` at row `index[i]` of a zero tensor with
    /// `out_rows` rows. Indices must be distinct.
    pub fn scatter(&mut self, a: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; out_rows];
        if index.len() != shape[0]
            || index
                .iter()
                .any(|&i| i >= out_rows || std::mem::replace(&mut seen[i], true))
        {
            return Err(TensorError::InvalidArgument {
                op: Primitive::Scatter,
                reason: format!("index {index:?} invalid for {shape:?} into {out_rows} rows"),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let v = self.value(a);
        let mut out = vec![0.0; out_rows * row_len];
        for (i, &dst) in index.iter().enumerate() {
            out[dst * row_len..(dst + 1) * row_len].copy_from_slice(&v[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = out_rows;
        self.push(
            Op::Scatter {
                index: index.to_vec(),
                row_len,
            },
            vec![a],
            out_shape,
            out,
        )
    }

    // ----- losses -----------------------------------------------------------

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(TensorError::InvalidArgument {
                op: Primitive::SoftmaxCrossEntropy,
                reason: format!("logits {shape:?} vs {} labels", labels.len()),
            });
        }
        let classes = shape[1];
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            loss -= (row[y] + LOG_EPS).ln();
        }
        loss /= labels.len() as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
                classes,
            },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    /// Mean absolute error against a constant target of the same size.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: Primitive::L1Loss,
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = p.len() as f64;
        let sign: Vec<f64> = p.iter().zip(target).map(|(a, b)| (a - b).signum() * ((a - b) != 0.0) as u8 as f64).collect();
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        self.push(Op::L1Loss { sign }, vec![pred], vec![1], vec![loss])
    }

    // ----- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad && !node.parents.is_empty() {
                let mut contribs = self.node_backward(id, &g);
                if self.corrupt == Some(node.op.primitive()) {
                    for c in contribs.iter_mut().flatten() {
                        c.iter_mut().for_each(|x| *x *= 1.5);
                    }
                }
                for (p, c) in node.parents.iter().zip(contribs) {
                    let Some(c) = c else { continue };
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[id];
        let ps = &node.parents;
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        let want = |i: usize| self.nodes[ps[i].0].requires_grad;
        let y = node.data.as_slice();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (a, b) = (val(ps[0]), val(ps[1]));
                let da = want(0).then(|| {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, b, &mut da, m, n, k);
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(a, g, &mut db, m, k, n);
                    db
                });
                vec![da, db]
            }
            Op::BatchMatMul { batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (a, b) = (val(ps[0]), val(ps[1]));
                let da = want(0).then(|| {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        matmul_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &b[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        matmul_tn(
                            &a[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    db
                });
                vec![da, db]
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (val(ps[0]), val(ps[1]));
                let nb = b.len();
                let op = &node.op;
                let da = want(0).then(|| match op {
                    Op::Add | Op::Sub => g.to_vec(),
                    Op::Mul => g.iter().enumerate().map(|(i, gi)| gi * b[i % nb]).collect(),
                    _ => g.iter().enumerate().map(|(i, gi)| gi / b[i % nb]).collect(),
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0; nb];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % nb] += match op {
                            Op::Add => *gi,
                            Op::Sub => -gi,
                            Op::Mul => gi * a[i],
                            _ => -gi * a[i] / (b[i % nb] * b[i % nb]),
                        };
                    }
                    db
                });
                vec![da, db]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|gi| gi * c).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::Exp => vec![Some(g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())],
            Op::Log => {
                let x = val(ps[0]);
                vec![Some(g.iter().zip(x).map(|(gi, xi)| gi / (xi + LOG_EPS)).collect())]
            }
            Op::Tan => vec![Some(g.iter().zip(y).map(|(gi, yi)| gi * (1.0 + yi * yi)).collect())],
            Op::Sigmoid => vec![Some(g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect())],
            Op::Gelu => {
                let x = val(ps[0]);
                vec![Some(g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect())]
            }
            Op::Abs => {
                let x = val(ps[0]);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else if xi < 0.0 { -gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Clamp { lo, hi } => {
                let x = val(ps[0]);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > *lo && xi < *hi { *gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Softmax { cols } => {
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..*cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { cols, mean, rstd } => {
                let cols = *cols;
                let x = val(ps[0]);
                let w: Vec<f64> = match ps.get(1) {
                    Some(&wv) => val(wv).to_vec(),
                    None => vec![1.0; cols],
                };
                let wsum: f64 = w.iter().sum();
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; cols];
                for r in 0..mean.len() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let var = 1.0 / (rs * rs) - LAYER_NORM_EPS;
                    let gsum: f64 = gr.iter().sum();
                    let gd: f64 = gr.iter().zip(xr).map(|(gi, xi)| gi * (xi - mu)).sum();
                    let dmu = -rs * gsum;
                    let dvar = -0.5 * rs * rs * rs * gd;
                    for c in 0..cols {
                        let d = xr[c] - mu;
                        dx[r * cols + c] = gr[c] * rs + dmu * w[c] / wsum + dvar * 2.0 * w[c] * d / wsum;
                        dw[c] += dmu * d / wsum + dvar * (d * d - var) / wsum;
                    }
                }
                let mut out = vec![want(0).then_some(dx)];
                if ps.len() > 1 {
                    out.push(want(1).then_some(dw));
                }
                out
            }
            Op::Sum => {
                let n = val(ps[0]).len();
                vec![Some(vec![g[0]; n])]
            }
            Op::Mean => {
                let n = val(ps[0]).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::SumAxis {
                outer,
                len,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for i in 0..*inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Permute { perm } => {
                let in_shape = &self.nodes[ps[0].0].shape;
                let map = permute_index(in_shape, perm);
                let mut dx = vec![0.0; g.len()];
                for (o, &i) in map.iter().enumerate() {
                    dx[i] = g[o];
                }
                vec![Some(dx)]
            }
            Op::IndexSelect { rows, row_len } => {
                let mut dx = vec![0.0; val(ps[0]).len()];
                for (o, &r) in rows.iter().enumerate() {
                    for c in 0..*row_len {
                        dx[r * row_len + c] += g[o * row_len + c];
                    }
                }
                vec![Some(dx)]
            }
            Op::Scatter { index, row_len } => {
                let mut dx = vec![0.0; index.len() * row_len];
                for (i, &dst) in index.iter().enumerate() {
                    dx[i * row_len..(i + 1) * row_len].copy_from_slice(&g[dst * row_len..(dst + 1) * row_len]);
                }
                vec![Some(dx)]
            }
            Op::SoftmaxCrossEntropy {
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / labels.len() as f64;
                let mut dx = probs.clone();
                for (b, &lbl) in labels.iter().enumerate() {
                    dx[b * classes + lbl] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                vec![Some(dx)]
            }
            Op::L1Loss { sign } => {
                let scale = g[0] / sign.len() as f64;
                vec![Some(sign.iter().map(|s| s * scale).collect())]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, a, (n, 1), b, (1, n), out);
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), out);
}

/// Row-major `c[m,n] += a[m,k] * b[k,n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y) {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn sigmoid_and_tan_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, PI / 4.0]));
        let s = g.sigmoid(x).unwrap();
        let t = g.tan(x).unwrap();
        assert_eq!(g.value(s)[0], 0.5);
        assert!((g.value(t)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0]));
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, Primitive::MatMul);
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_output_reports_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0]));
        match g.exp(x) {
            Err(TensorError::NonFinite { op, node }) => {
                assert_eq!(op, Primitive::Exp);
                assert_eq!(node, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_floor_makes_plogp_zero_at_zero() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let lp = g.log(p).unwrap();
        let plp = g.mul(p, lp).unwrap();
        let v = g.value(plp);
        assert_eq!(v[0], 0.0);
        assert!(v[1].abs() < 1e-11);
    }

    #[test]
    fn unreachable_param_has_no_grad() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0]));
        let y = g.param(&Tensor::vector(vec![2.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[c, a, b] = in[a, b, c]
        assert_eq!(g.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), data.as_slice());
    }

    #[test]
    fn weighted_layer_norm_equals_dropping_zero_weight_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], vec![1.0, 0.0, 3.0, -2.0, 0.5, 0.0, 2.0, 4.0]).unwrap());
        let w = g.constant(Tensor::vector(vec![1.0, 0.0, 1.0, 1.0]));
        let y = g.layer_norm(x, Some(w)).unwrap();
        let kept = g.constant(Tensor::new(vec![2, 3], vec![1.0, 3.0, -2.0, 0.5, 2.0, 4.0]).unwrap());
        let yk = g.layer_norm(kept, None).unwrap();
        let yv = g.value(y).to_vec();
        let ykv = g.value(yk);
        for (r, cols) in [(0, [0, 2, 3]), (1, [0, 2, 3])] {
            for (j, &c) in cols.iter().enumerate() {
                assert!((yv[r * 4 + c] - ykv[r * 3 + j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_counts_macs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 30);
    }
}
