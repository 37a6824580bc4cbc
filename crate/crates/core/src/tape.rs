//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs to form a vector-Jacobian product. Node ids are assigned in
//! execution order, so walking the tape backwards is a reverse topological
//! traversal.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::kernels::{self, gemm};
use crate::tensor::{check_finite, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Gelu { x: Var, tanh: Vec<f64> },
    Relu(Var),
    Softplus(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, idx: Vec<usize> },
    Softmax(Var),
    CausalSoftmax { x: Var, scale: f64 },
    TopKMask { x: Var, k: usize, selected: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SplitHeads { x: Var, part: usize, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, w: Var },
    GatherCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu { .. } => "gelu",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::TopKMask { .. } => "top_k_mask",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// A tape is single-use: build the forward graph, call [`Tape::backward`]
/// once per loss, then drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    selection_hash: DefaultHasher,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated on push")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(dim_err!("item() on node of shape {:?}", n.shape));
        }
        Ok(n.value[0])
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Indices retained by a [`Tape::top_k_mask`] node, `rows × k`, row-major.
    pub fn selected(&self, v: Var) -> Option<(&[u32], usize)> {
        match &self.nodes[v.0].op {
            Op::TopKMask { selected, k, .. } => Some((selected, *k)),
            _ => None,
        }
    }

    /// Digest of every discrete selection made on this tape. Two forward
    /// passes with equal fingerprints took the same branch of every
    /// piecewise-defined op.
    pub fn selection_fingerprint(&self) -> u64 {
        self.selection_hash.finish()
    }

    /// Folds an externally computed discrete choice into the fingerprint.
    pub fn record_selection(&mut self, indices: &[usize]) {
        indices.hash(&mut self.selection_hash);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        check_finite(op.name(), &value)?;
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(dim_err!("expected a rank-3 tensor, got shape {:?}", s)),
        }
    }

    fn last_dim(&self, v: Var) -> Result<(usize, usize)> {
        let shape = &self.nodes[v.0].shape;
        let width = *shape.last().ok_or_else(|| dim_err!("expected at least rank 1"))?;
        Ok((self.nodes[v.0].value.len() / width, width))
    }

    // ---- leaves -------------------------------------------------------------

    /// Records a trainable parameter; its gradient is accumulated into
    /// `params[index]` by [`Tape::backward`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(index) }, true)
    }

    /// Records an input. With `requires_grad` its gradient is available via
    /// [`Tape::grad`] after backward.
    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err!("constant shape {:?} vs {} values", shape, data.len()));
        }
        self.push(shape, data, Op::Leaf { param: None }, false)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(A) · op(B)` where `op` optionally transposes the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(trans_a, trans_b, m, n, k, self.value(a), self.value(b), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_a, trans_b }, rg)
    }

    /// `x · Wᵀ + b` for a weight stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batched `A[i] · op(B[i])` over rank-3 operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = self.dims3(a)?;
        let (bb, br, bc) = self.dims3(b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ba != bb || k != k2 {
            return Err(dim_err!(
                "batch_matmul shapes {:?} and {:?} incompatible",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ba {
                gemm(
                    false,
                    trans_b,
                    m,
                    n,
                    k,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![ba, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    // ---- elementwise --------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    /// Adds a vector to every row (the only broadcast the model needs).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, width) = self.last_dim(x)?;
        if self.shape(bias) != [width] {
            return Err(dim_err!("bias shape {:?} vs row width {width}", self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(width) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let out = xv.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x, tanh }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kernels::softplus(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softplus(x), rg)
    }

    // ---- normalisation and probabilities ------------------------------------

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, width) = self.last_dim(x)?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(dim_err!("layer_norm parameters must have shape [{width}]"));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Rows of `table` selected by `idx`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("embedding index {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        self.push(vec![idx.len(), width], out, Op::Embedding { table, idx: idx.to_vec() }, rg)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, width) = self.last_dim(x)?;
        let out = kernels::softmax_rows(self.value(x), width);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// Softmax of `scale · x` over the last axis of `[batch, T, T]` scores,
    /// restricted to columns `j ≤ i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        let (b, t, t2) = self.dims3(x)?;
        if t != t2 {
            return Err(dim_err!("causal_softmax needs square score blocks, got {t}×{t2}"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for blk in 0..b {
            for i in 0..t {
                let off = (blk * t + i) * t;
                let src = &xv[off..off + i + 1];
                let dst = &mut out[off..off + i + 1];
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = ((s - max) * scale).exp();
                    sum += *d;
                }
                let inv = 1.0 / sum;
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![b, t, t], out, Op::CausalSoftmax { x, scale }, rg)
    }

    /// Keeps the `k` largest entries of every row (lowest index wins ties) at
    /// their original values and zeroes the rest. The selection is constant
    /// under differentiation: gradient reaches retained entries only.
    pub fn top_k_mask(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, width) = self.last_dim(x)?;
        if k == 0 || k > width {
            return Err(contract_err!("top_k_mask needs 1 ≤ k ≤ {width}, got {k}"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut selected = Vec::with_capacity(rows * k);
        let mut scratch = Vec::with_capacity(width);
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            kernels::top_k_into(row, k, &mut scratch);
            for &j in &scratch {
                out[r * width + j] = row[j];
                selected.push(j as u32);
            }
        }
        selected.hash(&mut self.selection_hash);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::TopKMask { x, k, selected }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits)?;
        if rows != targets.len() {
            return Err(dim_err!("{} targets for {rows} logit rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {bad} out of range for vocab {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let (amax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // Σ over everything but the arg-max term (which is exactly 1), so
            // that ln_1p keeps precision for confident predictions.
            let mut rest = 0.0;
            for (j, (p, &l)) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row).enumerate() {
                *p = (l - max).exp();
                if j != amax {
                    rest += *p;
                }
            }
            let sum = 1.0 + rest;
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= sum;
            }
            total += rest.ln_1p() - (row[targets[r]] - max);
        }
        let rg = self.rg(logits);
        self.push(
            Vec::new(),
            vec![total / rows as f64],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    // ---- layout -------------------------------------------------------------

    /// Extracts one of the three `C`-wide column groups of a `[batch·seq, 3C]`
    /// projection and lays it out as `[batch·heads, seq, C/heads]`.
    pub fn split_heads(&mut self, x: Var, part: usize, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2(x)?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 || part > 2 {
            return Err(dim_err!("split_heads: shape {:?} incompatible", self.shape(x)));
        }
        let c = width / 3;
        let hd = c / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * seq * c];
        for b in 0..batch {
            for t in 0..seq {
                let src = &xv[(b * seq + t) * width + part * c..][..c];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![batch * heads, seq, hd], out, Op::SplitHeads { x, part, batch, seq, heads }, rg)
    }

    /// Inverse layout of [`Tape::split_heads`]: `[batch·heads, seq, hd]` to
    /// `[batch·seq, heads·hd]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (bh, t, hd) = self.dims3(x)?;
        if bh != batch * heads || t != seq {
            return Err(dim_err!("merge_heads: shape {:?} incompatible", self.shape(x)));
        }
        let c = heads * hd;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * seq * c];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * hd;
                    let dst = (b * seq + t) * c + h * hd;
                    out[dst..dst + hd].copy_from_slice(&xv[src..src + hd]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![batch * seq, c], out, Op::MergeHeads { x, batch, seq, heads }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_rows index {bad} out of range for {rows} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let rg = self.rg(x);
        self.push(vec![idx.len(), width], out, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// `out[idx[i]] += x[i]` into a zeroed `[rows, width]` result.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, width) = self.dims2(x)?;
        if n != idx.len() {
            return Err(dim_err!("scatter_add_rows: {} indices for {n} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("scatter index {bad} out of range for {rows} rows")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * width];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * width..(i + 1) * width].iter_mut().zip(&xv[r * width..(r + 1) * width]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(vec![rows, width], out, Op::ScatterAddRows { x, idx: idx.to_vec() }, rg)
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, width) = self.dims2(x)?;
        if self.value(w).len() != rows {
            return Err(dim_err!("scale_rows: {} weights for {rows} rows", self.value(w).len()));
        }
        let wv = self.value(w);
        let mut out = self.value(x).to_vec();
        for (row, &s) in out.chunks_exact_mut(width).zip(wv) {
            for o in row {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(vec![rows, width], out, Op::ScaleRows { x, w }, rg)
    }

    /// Picks `k = idx.len() / rows` columns per row: `out[r, j] = x[r, idx[r·k + j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(x)?;
        if rows == 0 || idx.len() % rows != 0 {
            return Err(dim_err!("gather_cols: {} indices for {rows} rows", idx.len()));
        }
        let k = idx.len() / rows;
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(Error::Index(format!("gather_cols index {bad} out of range for width {width}")));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(p, &j)| xv[(p / k) * width + j]).collect();
        let rg = self.rg(x);
        self.push(vec![rows, k], out, Op::GatherCols { x, idx: idx.to_vec() }, rg)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Reshape(x), rg)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `params` and keeping gradients of non-parameter leaves for
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, params: &mut [Tensor]) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        self.leaf_grads.clear();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param } = node.op {
                match param {
                    Some(p) => {
                        let t = params.get_mut(p).ok_or_else(|| {
                            Error::Index(format!("parameter index {p} out of range"))
                        })?;
                        t.accumulate_grad(&g)?;
                    }
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.node_vjp(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn node_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let (m, n) = (node.shape[0], node.shape[1]);
                let (ar, ac) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let k = if ta { ar } else { ac };
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    if ta {
                        gemm(tb, true, k, m, n, bv, g, 1.0, ga);
                    } else {
                        gemm(false, !tb, m, k, n, g, bv, 1.0, ga);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if tb {
                        gemm(true, ta, n, k, m, g, av, 1.0, gb);
                    } else {
                        gemm(!ta, false, k, n, m, av, g, 1.0, gb);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let tb = *trans_b;
                let (bs, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
                let k = nodes[a.0].shape[2];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for s in 0..bs {
                        gemm(
                            false,
                            !tb,
                            m,
                            k,
                            n,
                            &g[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            1.0,
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let gbs = &mut gb[s * k * n..(s + 1) * k * n];
                        if tb {
                            gemm(true, false, n, k, m, gs, as_, 1.0, gbs);
                        } else {
                            gemm(true, false, k, n, m, as_, gs, 1.0, gbs);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let width = gb.len();
                    for row in g.chunks_exact(width) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * s;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gelu { x, tanh } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (((o, gi), xi), t) in gx.iter_mut().zip(g).zip(&nodes[x.0].value).zip(tanh) {
                        *o += gi * kernels::gelu_grad_from(*xi, *t);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(&nodes[x.0].value) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(&nodes[x.0].value) {
                        *o += gi * kernels::sigmoid(*xi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let width = *node.shape.last().unwrap();
                let gv = &nodes[gain.0].value;
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                        for j in 0..width {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for grow in g.chunks_exact(width) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; width];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * width..(r + 1) * width];
                        let hrow = &xhat[r * width..(r + 1) * width];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..width {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= width as f64;
                        mean_dh /= width as f64;
                        for j in 0..width {
                            gx[r * width + j] += rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, idx } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    let width = node.shape[1];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = *node.shape.last().unwrap();
                    softmax_vjp(&node.value, g, width, 1.0, gx);
                }
            }
            Op::CausalSoftmax { x, scale } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = *node.shape.last().unwrap();
                    softmax_vjp(&node.value, g, width, *scale, gx);
                }
            }
            Op::TopKMask { x, k, selected } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = *node.shape.last().unwrap();
                    for (r, sel) in selected.chunks_exact(*k).enumerate() {
                        for &j in sel {
                            let p = r * width + j as usize;
                            gx[p] += g[p];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let vocab = nodes[logits.0].shape[1];
                    let s = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        let out = &mut gl[r * vocab..(r + 1) * vocab];
                        for (o, p) in out.iter_mut().zip(row) {
                            *o += s * p;
                        }
                        out[t] -= s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::SplitHeads { x, part, batch, seq, heads } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = nodes[x.0].shape[1];
                    let c = width / 3;
                    let hd = c / heads;
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let dst = (b * seq + t) * width + part * c;
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * hd;
                                add_into(&mut gx[dst + h * hd..dst + (h + 1) * hd], &g[src..src + hd]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let hd = nodes[x.0].shape[2];
                    let c = heads * hd;
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let dst = ((b * heads + h) * seq + t) * hd;
                                let src = (b * seq + t) * c + h * hd;
                                add_into(&mut gx[dst..dst + hd], &g[src..src + hd]);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = node.shape[1];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = node.shape[1];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[r * width..(r + 1) * width], &g[i * width..(i + 1) * width]);
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let width = node.shape[1];
                let (x, w) = (*x, *w);
                if let Some(gx) = slot(nodes, grads, x) {
                    for ((o, grow), &s) in gx.chunks_exact_mut(width).zip(g.chunks_exact(width)).zip(&nodes[w.0].value) {
                        for (oi, gi) in o.iter_mut().zip(grow) {
                            *oi += gi * s;
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, w) {
                    for ((o, grow), xrow) in gw.iter_mut().zip(g.chunks_exact(width)).zip(nodes[x.0].value.chunks_exact(width)) {
                        *o += kernels::dot(grow, xrow);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::GatherCols { x, idx } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let width = nodes[x.0].shape[1];
                    let k = node.shape[1];
                    for (p, &j) in idx.iter().enumerate() {
                        gx[(p / k) * width + j] += g[p];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer of an input, allocated lazily; None when the input does
/// not need one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `dx = scale · y ⊙ (dy − Σ y·dy)` per row.
fn softmax_vjp(y: &[f64], g: &[f64], width: usize, scale: f64, gx: &mut [f64]) {
    for ((yrow, grow), out) in y.chunks_exact(width).zip(g.chunks_exact(width)).zip(gx.chunks_exact_mut(width)) {
        let dotp = kernels::dot(yrow, grow);
        for ((o, &yi), &gi) in out.iter_mut().zip(yrow).zip(grow) {
            *o += scale * yi * (gi - dotp);
        }
    }
}

/// Gradients smaller than this are compared on an absolute scale. Central
/// differences carry roundoff of about `ε_mach·|f| / eps`, so a component
/// that is exactly zero (a key bias under softmax shift invariance, say)
/// would otherwise report a relative error of order one.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_err: f64,
    /// `(parameter, flat index)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Probes whose perturbation changed a discrete selection. Central
    /// differences are meaningless there, so a tie-free check expects zero.
    pub selection_changes: usize,
}

impl GradCheckReport {
    fn record(&mut self, param: usize, index: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = rel;
            self.worst = Some((param, index));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }
}

fn eval_scalar<F>(f: &mut F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(contract_err!("grad_check: function returned shape {:?}, not a scalar", tape.shape(out)));
    }
    Ok((tape.value(out)[0], tape.selection_fingerprint()))
}

fn analytic_grads<F>(f: &mut F, params: &mut [Tensor]) -> Result<(Vec<Vec<f64>>, u64)>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    for p in params.iter_mut() {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(contract_err!("grad_check: function returned shape {:?}, not a scalar", tape.shape(out)));
    }
    let fp = tape.selection_fingerprint();
    tape.backward(out, params)?;
    Ok((params.iter().map(|p| p.grad().unwrap().to_vec()).collect(), fp))
}

/// Checks every scalar of every parameter against central differences with
/// step `eps`. `f` must register parameter `i` via `tape.param(i, ..)` and
/// return a scalar. Gradient buffers of `params` are overwritten.
pub fn grad_check<F>(f: F, params: &mut [Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

/// [`grad_check`] restricted to the listed `(parameter, flat index)` pairs.
pub fn grad_check_coords<F>(mut f: F, params: &mut [Tensor], eps: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(contract_err!("grad_check needs eps > 0"));
    }
    let (analytic, base_fp) = analytic_grads(&mut f, params)?;
    let mut report = GradCheckReport::default();
    for &(p, i) in coords {
        let orig = params[p].data()[i];
        params[p].data_mut()[i] = orig + eps;
        let (plus, fp_plus) = eval_scalar(&mut f, params)?;
        params[p].data_mut()[i] = orig - eps;
        let (minus, fp_minus) = eval_scalar(&mut f, params)?;
        params[p].data_mut()[i] = orig;
        if fp_plus != base_fp || fp_minus != base_fp {
            report.selection_changes += 1;
            continue;
        }
        report.record(p, i, analytic[p][i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Directional check: for each supplied direction `d` (one buffer per
/// parameter) compares `∇f · d` with `(f(θ + εd) − f(θ − εd)) / 2ε`.
/// Exercises every coordinate at once; the report's `worst` holds the
/// direction index.
pub fn grad_check_directional<F>(mut f: F, params: &mut [Tensor], eps: f64, directions: &[Vec<Vec<f64>>]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(contract_err!("grad_check needs eps > 0"));
    }
    let (analytic, base_fp) = analytic_grads(&mut f, params)?;
    let originals: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    let mut report = GradCheckReport::default();
    for (di, dir) in directions.iter().enumerate() {
        if dir.len() != params.len() || dir.iter().zip(params.iter()).any(|(d, p)| d.len() != p.numel()) {
            return Err(dim_err!("direction {di} does not match parameter shapes"));
        }
        let shifted = |sign: f64, params: &mut [Tensor]| {
            for ((p, o), d) in params.iter_mut().zip(&originals).zip(dir) {
                for ((v, &ov), &dv) in p.data_mut().iter_mut().zip(o).zip(d) {
                    *v = ov + sign * eps * dv;
                }
            }
        };
        shifted(1.0, params);
        let (plus, fp_plus) = eval_scalar(&mut f, params)?;
        shifted(-1.0, params);
        let (minus, fp_minus) = eval_scalar(&mut f, params)?;
        for (p, o) in params.iter_mut().zip(&originals) {
            p.data_mut().copy_from_slice(o);
        }
        if fp_plus != base_fp || fp_minus != base_fp {
            report.selection_changes += 1;
            continue;
        }
        let a: f64 = analytic.iter().zip(dir).map(|(g, d)| kernels::dot(g, d)).sum();
        report.record(di, 0, a, (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}
