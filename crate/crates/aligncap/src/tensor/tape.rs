//! Tape-based reverse-mode autodiff.
//!
//! Every forward op appends a node holding its inputs, output value, and
//! enough auxiliary data (dropout masks, gather indices) to replay the
//! backward pass. Gradients accumulate additively across multiple uses of the
//! same node; inputs always have smaller ids than their outputs, so one
//! reverse sweep suffices.

use std::collections::BTreeMap;

use super::param::Parameter;
use super::scalar;
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    ScaleBy(TensorId, TensorId),
    ShiftBy(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Exp(TensorId),
    Silu(TensorId),
    Softplus(TensorId),
    SoftmaxRows(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Dropout { x: TensorId, mask: Vec<f64> },
    Sum(TensorId),
    Mean(TensorId),
    MeanRows(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    Dot(TensorId, TensorId),
    StackScalars(Vec<TensorId>),
    GatherRows { x: TensorId, indices: Vec<usize> },
    CrossEntropyRows { logits: TensorId, targets: Vec<usize> },
    AddRow { x: TensorId, row: TensorId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::ShiftBy(..) => "shift_by",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Dot(..) => "dot",
            Op::StackScalars(..) => "stack_scalars",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::AddRow { .. } => "add_row",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Recorded computation graph plus, after [`Tape::backward`], its gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, TensorId>,
    grads: Vec<Option<Vec<f64>>>,
}

/// (rows, cols) view of a rank-1 or rank-2 shape.
fn rc(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [d] => Ok((1, *d)),
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: format!("{shape:?}"),
            rhs: "rank 1 or 2".into(),
        }),
    }
}

/// out += a · b with a: m×k, b: k×n.
fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a · bᵀ with a: m×k, b: n×k.
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            out[i * n + j] += s;
        }
    }
}

/// out += aᵀ · b with a: k×m, b: k×n.
fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> TensorId {
        #[cfg(debug_assertions)]
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            panic!("non-finite value {bad} produced by op `{}` at node {}", op.name(), self.nodes.len());
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { op, shape, value, requires_grad });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = self.node(id);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::NotScalar { op: "scalar_value", shape: format!("{:?}", n.shape) })
        }
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if it received one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_id(&self, name: &str) -> Option<TensorId> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.param_id(name).and_then(|id| self.grad(id))
    }

    /// Parameter gradients in name order (deterministic for the optimizer).
    pub fn param_grads(&self) -> BTreeMap<&str, &[f64]> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grad(*id).map(|g| (name.as_str(), g)))
            .collect()
    }

    /// All parameters recorded on this tape, in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.params.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    // ── leaves ──

    /// Leaf with no gradient tracking (inputs, masks, label matrices).
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), requires_grad)
    }

    /// Leaf for a named parameter, memoized: a second call with the same name
    /// returns the first id so gradients accumulate on one node.
    pub fn param(&mut self, p: &Parameter) -> TensorId {
        if let Some(&id) = self.params.get(&p.name) {
            debug_assert_eq!(self.node(id).shape, p.tensor.shape, "param `{}` reused with a different shape", p.name);
            return id;
        }
        let id = self.push(Op::Leaf, p.tensor.shape.clone(), p.tensor.data.clone(), p.trainable);
        self.params.insert(p.name.clone(), id);
        id
    }

    // ── elementwise ──

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: format!("{:?}", self.node(a).shape),
                rhs: format!("{:?}", self.node(b).shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> =
            self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x + y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Add(a, b), shape, value, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f64> =
            self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x - y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Sub(a, b), shape, value, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> =
            self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x * y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Mul(a, b), shape, value, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let value: Vec<f64> = self.node(a).value.iter().map(|x| c * x).collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Scale(a, c), shape, value, rg)
    }

    /// a * s where s is a scalar node (learnable temperature and friends).
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.scalar_value(s)?;
        let value: Vec<f64> = self.node(a).value.iter().map(|x| sv * x).collect();
        let rg = self.node(a).requires_grad || self.node(s).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::ScaleBy(a, s), shape, value, rg))
    }

    /// a + s where s is a scalar node (learnable bias and friends).
    pub fn shift_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.scalar_value(s)?;
        let value: Vec<f64> = self.node(a).value.iter().map(|x| sv + x).collect();
        let rg = self.node(a).requires_grad || self.node(s).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::ShiftBy(a, s), shape, value, rg))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.node(a).value.iter().map(|x| x.exp()).collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Exp(a), shape, value, rg)
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.node(a).value.iter().map(|&x| scalar::silu(x)).collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Silu(a), shape, value, rg)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let value: Vec<f64> = self.node(a).value.iter().map(|&x| scalar::softplus(x)).collect();
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        self.push(Op::Softplus(a), shape, value, rg)
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = rc("matmul", &self.node(a).shape)?;
        let (k2, n) = rc("matmul", &self.node(b).shape)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: format!("{:?}", self.node(a).shape),
                rhs: format!("{:?}", self.node(b).shape),
            });
        }
        let mut value = vec![0.0; m * n];
        mm_nn(&mut value, &self.node(a).value, &self.node(b).value, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Matmul(a, b), vec![m, n], value, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = rc("transpose", &self.node(a).shape)?;
        let src = &self.node(a).value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Transpose(a), vec![n, m], value, rg))
    }

    /// Inner product of two same-size tensors, as a [1] scalar node.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("dot", a, b)?;
        let s: f64 = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x * y).sum();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Dot(a, b), vec![1], vec![s], rg))
    }

    // ── normalization and activations over rows ──

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = rc("softmax", &self.node(a).shape)?;
        if cols == 0 {
            return Err(Error::EmptyDimension("softmax row"));
        }
        let src = &self.node(a).value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.node(a).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::SoftmaxRows(a), shape, value, rg))
    }

    /// Per-row standardization with affine gain/bias over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (rows, cols) = rc("layer_norm", &self.node(x).shape)?;
        if cols == 0 {
            return Err(Error::EmptyDimension("layer_norm row"));
        }
        if eps <= 0.0 {
            return Err(Error::Precondition(format!("layer_norm eps must be > 0, got {eps}")));
        }
        for (role, id) in [("gain", gain), ("bias", bias)] {
            if self.node(id).value.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: format!("{:?}", self.node(x).shape),
                    rhs: format!("{role} {:?}", self.node(id).shape),
                });
            }
        }
        let src = &self.node(x).value;
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let out = &mut value[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out[j] = g[j] * ((row[j] - mean) * inv) + b[j];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gain).requires_grad
            || self.node(bias).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, value, rg))
    }

    /// Inverted dropout: keep with probability 1-p and scale kept entries by
    /// 1/(1-p). Identity (same id, no node) when p == 0 or not training.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut Rng, training: bool) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if p == 0.0 || !training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.node(x).value.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let value: Vec<f64> = self.node(x).value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::Dropout { x, mask }, shape, value, rg))
    }

    // ── reductions ──

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.node(a).value.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::Sum(a), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.node(a).value.len() as f64;
        let s: f64 = self.node(a).value.iter().sum::<f64>() / n;
        let rg = self.node(a).requires_grad;
        self.push(Op::Mean(a), vec![1], vec![s], rg)
    }

    /// Column means: [n, d] -> [1, d].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = rc("mean_rows", &self.node(a).shape)?;
        let src = &self.node(a).value;
        let mut value = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                value[j] += src[r * cols + j];
            }
        }
        for v in value.iter_mut() {
            *v /= rows as f64;
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::MeanRows(a), vec![1, cols], value, rg))
    }

    // ── structure ──

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyDimension("concat_rows parts"));
        }
        let (_, cols) = rc("concat_rows", &self.node(parts[0]).shape)?;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = rc("concat_rows", &self.node(p).shape)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: format!("[.., {cols}]"),
                    rhs: format!("{:?}", self.node(p).shape),
                });
            }
            rows += r;
            value.extend_from_slice(&self.node(p).value);
            rg |= self.node(p).requires_grad;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, cols], value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyDimension("concat_cols parts"));
        }
        let (rows, _) = rc("concat_cols", &self.node(parts[0]).shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = rc("concat_cols", &self.node(p).shape)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: format!("[{rows}, ..]"),
                    rhs: format!("{:?}", self.node(p).shape),
                });
            }
            widths.push(c);
            cols += c;
            rg |= self.node(p).requires_grad;
        }
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.node(p).value[r * w..(r + 1) * w];
                value[r * cols + off..r * cols + off + w].copy_from_slice(src);
                off += w;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, cols], value, rg))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = rc("slice_rows", &self.node(x).shape)?;
        if start + len > rows || len == 0 {
            return Err(Error::Precondition(format!(
                "slice_rows [{start}, {}) out of {rows} rows",
                start + len
            )));
        }
        let value = self.node(x).value[start * cols..(start + len) * cols].to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceRows { x, start }, vec![len, cols], value, rg))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = rc("slice_cols", &self.node(x).shape)?;
        if start + len > cols || len == 0 {
            return Err(Error::Precondition(format!(
                "slice_cols [{start}, {}) out of {cols} cols",
                start + len
            )));
        }
        let src = &self.node(x).value;
        let mut value = vec![0.0; rows * len];
        for r in 0..rows {
            value[r * len..(r + 1) * len].copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceCols { x, start }, vec![rows, len], value, rg))
    }

    /// Packs rows*cols scalar nodes (row-major) into one [rows, cols] node.
    pub fn stack_scalars(&mut self, ids: &[TensorId], rows: usize, cols: usize) -> Result<TensorId> {
        if ids.len() != rows * cols {
            return Err(Error::Precondition(format!(
                "stack_scalars got {} entries for a {rows}x{cols} target",
                ids.len()
            )));
        }
        let mut value = Vec::with_capacity(ids.len());
        let mut rg = false;
        for &id in ids {
            value.push(self.scalar_value(id)?);
            rg |= self.node(id).requires_grad;
        }
        Ok(self.push(Op::StackScalars(ids.to_vec()), vec![rows, cols], value, rg))
    }

    /// Selects rows by index, repeats allowed; backward scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = rc("gather_rows", &self.node(x).shape)?;
        if indices.is_empty() {
            return Err(Error::EmptyDimension("gather_rows indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::RowIndexOutOfRange { index: bad, rows });
        }
        let src = &self.node(x).value;
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Op::GatherRows { x, indices: indices.to_vec() },
            vec![indices.len(), cols],
            value,
            rg,
        ))
    }

    /// [n, d] + [1, d] row broadcast.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (rows, cols) = rc("add_row", &self.node(x).shape)?;
        if self.node(row).value.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: format!("{:?}", self.node(x).shape),
                rhs: format!("{:?}", self.node(row).shape),
            });
        }
        let rv = &self.node(row).value;
        let src = &self.node(x).value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                value[r * cols + j] = src[r * cols + j] + rv[j];
            }
        }
        let rg = self.node(x).requires_grad || self.node(row).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::AddRow { x, row }, shape, value, rg))
    }

    /// Mean cross-entropy of [T, V] logits against T class indices.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (rows, cols) = rc("cross_entropy_rows", &self.node(logits).shape)?;
        if targets.len() != rows {
            return Err(Error::Precondition(format!(
                "cross_entropy_rows: {} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::RowIndexOutOfRange { index: bad, rows: cols });
        }
        let src = &self.node(logits).value;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = vec![total / rows as f64];
        let rg = self.node(logits).requires_grad;
        Ok(self.push(Op::CrossEntropyRows { logits, targets: targets.to_vec() }, vec![1], value, rg))
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss; fills per-node gradient buffers.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: format!("{:?}", self.node(loss).shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g: &[f64] = upper[0].as_deref().unwrap();
            self.backprop_node(i, g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    /// Applies node i's backward rule, accumulating into `lower` (ids < i).
    fn backprop_node(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for an input node, or None when it does not need one.
        fn acc<'a>(lower: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId) -> Option<&'a mut [f64]> {
            if !nodes[id.0].requires_grad {
                return None;
            }
            let slot = &mut lower[id.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; nodes[id.0].value.len()]);
            }
            slot.as_deref_mut()
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = acc(lower, nodes, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = acc(lower, nodes, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = acc(lower, nodes, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = nodes[s.0].value[0];
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += sv * gv;
                    }
                }
                if let Some(ds) = acc(lower, nodes, *s) {
                    ds[0] += g.iter().zip(&nodes[a.0].value).map(|(gv, av)| gv * av).sum::<f64>();
                }
            }
            Op::ShiftBy(a, s) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(ds) = acc(lower, nodes, *s) {
                    ds[0] += g.iter().sum::<f64>();
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = rc("matmul", &nodes[a.0].shape).unwrap();
                let (_, n) = rc("matmul", &nodes[b.0].shape).unwrap();
                if let Some(da) = acc(lower, nodes, *a) {
                    mm_nt(da, g, &nodes[b.0].value, m, n, k);
                }
                if let Some(db) = acc(lower, nodes, *b) {
                    mm_tn(db, &nodes[a.0].value, g, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = rc("transpose", &nodes[a.0].shape).unwrap();
                if let Some(da) = acc(lower, nodes, *a) {
                    // output is n×m; g[j, i] flows to da[i, j]
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(&nodes[i].value) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Silu(a) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gv * scalar::silu_grad(xv);
                    }
                }
            }
            Op::Softplus(a) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gv * scalar::sigmoid(xv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = rc("softmax", &nodes[a.0].shape).unwrap();
                let y = &nodes[i].value;
                if let Some(da) = acc(lower, nodes, *a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gy: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - gy);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = rc("layer_norm", &nodes[x.0].shape).unwrap();
                let src = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                    if let Some(dgain) = acc(lower, nodes, *gain) {
                        for j in 0..cols {
                            dgain[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(dbias) = acc(lower, nodes, *bias) {
                        for j in 0..cols {
                            dbias[j] += gr[j];
                        }
                    }
                    if let Some(dx) = acc(lower, nodes, *x) {
                        let dxhat: Vec<f64> = (0..cols).map(|j| gr[j] * gv[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc(lower, nodes, *x) {
                    for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * mv;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                if let Some(da) = acc(lower, nodes, *a) {
                    for d in da.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = rc("mean_rows", &nodes[a.0].shape).unwrap();
                if let Some(da) = acc(lower, nodes, *a) {
                    for r in 0..rows {
                        for j in 0..cols {
                            da[r * cols + j] += g[j] / rows as f64;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = acc(lower, nodes, p) {
                        for (d, &gv) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = rc("concat_cols", &nodes[i].shape).unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = rc("concat_cols", &nodes[p.0].shape).unwrap();
                    if let Some(dp) = acc(lower, nodes, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, cols) = rc("slice_rows", &nodes[x.0].shape).unwrap();
                if let Some(dx) = acc(lower, nodes, *x) {
                    for (d, &gv) in dx[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = rc("slice_cols", &nodes[x.0].shape).unwrap();
                let (_, w) = rc("slice_cols", &nodes[i].shape).unwrap();
                if let Some(dx) = acc(lower, nodes, *x) {
                    for r in 0..rows {
                        for j in 0..w {
                            dx[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                if let Some(da) = acc(lower, nodes, *a) {
                    for (d, &bv) in da.iter_mut().zip(&nodes[b.0].value) {
                        *d += g[0] * bv;
                    }
                }
                if let Some(db) = acc(lower, nodes, *b) {
                    for (d, &av) in db.iter_mut().zip(&nodes[a.0].value) {
                        *d += g[0] * av;
                    }
                }
            }
            Op::StackScalars(ids) => {
                for (k, &id) in ids.iter().enumerate() {
                    if let Some(d) = acc(lower, nodes, id) {
                        d[0] += g[k];
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let (_, cols) = rc("gather_rows", &nodes[x.0].shape).unwrap();
                if let Some(dx) = acc(lower, nodes, *x) {
                    for (r, &src_row) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dx[src_row * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (rows, cols) = rc("cross_entropy_rows", &nodes[logits.0].shape).unwrap();
                let src = &nodes[logits.0].value;
                if let Some(dl) = acc(lower, nodes, *logits) {
                    let scale = g[0] / rows as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &src[r * cols..(r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        let dr = &mut dl[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let p = (row[j] - m).exp() / sum;
                            dr[j] += scale * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                let (rows, cols) = rc("add_row", &nodes[x.0].shape).unwrap();
                if let Some(dx) = acc(lower, nodes, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(drow) = acc(lower, nodes, *row) {
                    for r in 0..rows {
                        for j in 0..cols {
                            drow[j] += g[r * cols + j];
                        }
                    }
                }
            }
        }
    }
}
