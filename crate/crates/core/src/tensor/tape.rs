use std::collections::HashMap;

use super::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Bmm(Var, Var),
    BmmNt(Var, Var),
    CausalSoftmax(Var),
    Softmax(Var),
    Select(Var, usize),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    leaf: Option<TensorId>,
}

/// Define-by-run computation record. Nodes are appended in evaluation
/// order, so every node's parents precede it and the backward pass is a
/// single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<TensorId, Var>,
}

/// Gradients of the bound leaf tensors produced by one backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_tensor: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.by_tensor.get(&id).map(Vec::as_slice)
    }

    pub fn of(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.get(tensor.id())
    }

    /// Adds the gradient for `tensor` (if any) into its gradient slot.
    pub fn accumulate_into(&self, tensor: &mut Tensor) -> bool {
        match self.by_tensor.get(&tensor.id()) {
            Some(g) => {
                tensor.accumulate_grad(g);
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.by_tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tensor.is_empty()
    }
}

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            leaf: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn bind_with(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.bound.get(&tensor.id()) {
            return v;
        }
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
            leaf: Some(tensor.id()),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(tensor.id(), v);
        v
    }

    /// Records `tensor` as a leaf; it receives gradients if its
    /// `requires_grad` flag is set.
    pub fn bind(&mut self, tensor: &Tensor) -> Var {
        self.bind_with(tensor, tensor.requires_grad())
    }

    /// Records `tensor` as a leaf that never receives gradients.
    pub fn bind_frozen(&mut self, tensor: &Tensor) -> Var {
        self.bind_with(tensor, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, Op::Leaf, &[]))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("node shapes are validated when recorded")
            .with_requires_grad(false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.scalar(s);
        let value = self.value(a).iter().map(|x| x * c).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::ScaleBy(a, s), &[a, s]))
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Matrix product of `a` (any leading dims, last dim k) with a 2-D `b` of
    /// shape k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for p in 0..k {
                let x = av[r * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().expect("non-empty") = n;
        Ok(self.push(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x * x).collect();
        self.push(self.shape(a).to_vec(), value, Op::Square(a), &[a])
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of a 2-D `table`; the result has shape `out_shape`,
    /// whose last dimension must equal the table width.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: Vec<usize>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2
            || last_dim(&out_shape) != st[1]
            || numel(&out_shape) != ids.len() * st[1]
        {
            return Err(Error::Shape {
                op: "embedding",
                lhs: st,
                rhs: out_shape,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of range for table of {} rows",
                st[0]
            )));
        }
        let d = st[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            out_shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Takes `len` consecutive entries of the last dimension starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = last_dim(&sx);
        if sx.is_empty() || start + len > n {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: sx,
                rhs: vec![start, len],
            });
        }
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = len;
        Ok(self.push(shape, value, Op::SliceLast { x, start }, &[x]))
    }

    /// [B, T, H·E] → [B·H, T, E].
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[2].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: sx,
                rhs: vec![heads],
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let e = d / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * e;
                    let dst = ((bi * heads + h) * t + ti) * e;
                    out[dst..dst + e].copy_from_slice(&xv[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![b * heads, t, e], out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// [B·H, T, E] → [B, T, H·E].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[0].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: sx,
                rhs: vec![heads],
            });
        }
        let (bh, t, e) = (sx[0], sx[1], sx[2]);
        let b = bh / heads;
        let d = heads * e;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = ((bi * heads + h) * t + ti) * e;
                    let dst = (bi * t + ti) * d + h * e;
                    out[dst..dst + e].copy_from_slice(&xv[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![b, t, d], out, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Batched product [N, M, K] × [N, K, P] → [N, M, P].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (nb, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; nb * m * p];
        for n in 0..nb {
            for i in 0..m {
                let orow = &mut out[(n * m + i) * p..(n * m + i + 1) * p];
                for kk in 0..k {
                    let x = av[(n * m + i) * k + kk];
                    let brow = &bv[(n * k + kk) * p..(n * k + kk + 1) * p];
                    for (o, w) in orow.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
        }
        Ok(self.push(vec![nb, m, p], out, Op::Bmm(a, b), &[a, b]))
    }

    /// Batched product with the second operand transposed:
    /// [N, M, K] × [N, P, K]ᵀ → [N, M, P].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (nb, m, k, p) = (sa[0], sa[1], sa[2], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; nb * m * p];
        for n in 0..nb {
            for i in 0..m {
                let arow = &av[(n * m + i) * k..(n * m + i + 1) * k];
                for j in 0..p {
                    let brow = &bv[(n * p + j) * k..(n * p + j + 1) * k];
                    out[(n * m + i) * p + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        Ok(self.push(vec![nb, m, p], out, Op::BmmNt(a, b), &[a, b]))
    }

    /// Row-wise softmax over square trailing blocks where entry (i, j) is
    /// masked out for j > i.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || sa[sa.len() - 1] != sa[sa.len() - 2] {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: sa.clone(),
                rhs: sa,
            });
        }
        let t = sa[sa.len() - 1];
        let mut out = self.value(a).to_vec();
        for (r, row) in out.chunks_mut(t).enumerate() {
            let i = r % t;
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        Ok(self.push(sa, out, Op::CausalSoftmax(a), &[a]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a])
    }

    /// Extracts a single element (flat index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.value(a).len();
        if index >= len {
            return Err(Error::Shape {
                op: "select",
                lhs: self.shape(a).to_vec(),
                rhs: vec![index],
            });
        }
        let v = self.value(a)[index];
        Ok(self.push(vec![], vec![v], Op::Select(a, index), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Σ wᵢ·aᵢ with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self.value(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(vec![], vec![s], Op::WeightedSum(a, weights), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape, value, Op::Reshape(a), &[a]))
    }

    /// Mean token-level negative log-likelihood over the rows of `logits`
    /// (last dim = vocabulary) selected by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = last_dim(self.shape(logits));
        let rows = self.value(logits).len() / v.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::contract(format!(
                    "target id {t} outside vocabulary of size {v}"
                )));
            }
            let row = &lv[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    /// Cosine similarity between matching rows of `a` and `b`, computed as
    /// u·v / (‖u‖‖v‖ + eps). Output has one entry per row.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let d = last_dim(self.shape(a));
        if d == 0 {
            return Err(Error::contract("cosine similarity needs d >= 1"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.len() / d;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (u, w) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let dot: f64 = u.iter().zip(w).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(dot / (nu * nw + eps));
        }
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        Ok(self.push(shape, out, Op::CosineRows { a, b, eps }, &[a, b]))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns the
    /// gradients of every bound leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.leaf {
                        out.by_tensor.insert(id, g);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, nodes, *a, |s| axpy(s, &g, 1.0));
                    add_into(&mut grads, nodes, *b, |s| axpy(s, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, nodes, *a, |s| axpy(s, &g, 1.0));
                    add_into(&mut grads, nodes, *b, |s| axpy(s, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(&mut grads, nodes, *a, |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * bv[i];
                        }
                    });
                    add_into(&mut grads, nodes, *b, |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, c) => add_into(&mut grads, nodes, *a, |s| axpy(s, &g, *c)),
                Op::ScaleBy(a, sv) => {
                    let c = nodes[sv.0].value[0];
                    let av = &nodes[a.0].value;
                    add_into(&mut grads, nodes, *a, |s| axpy(s, &g, c));
                    add_into(&mut grads, nodes, *sv, |s| {
                        s[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                    });
                }
                Op::AddBias(a, bias) => {
                    add_into(&mut grads, nodes, *a, |s| axpy(s, &g, 1.0));
                    add_into(&mut grads, nodes, *bias, |s| {
                        let n = s.len();
                        for row in g.chunks(n) {
                            axpy(s, row, 1.0);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (k, n) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
                    let rows = av.len() / k.max(1);
                    add_into(&mut grads, nodes, *a, |s| {
                        for r in 0..rows {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                s[r * k + p] += dot(grow, brow);
                            }
                        }
                    });
                    add_into(&mut grads, nodes, *b, |s| {
                        for r in 0..rows {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x != 0.0 {
                                    axpy(&mut s[p * n..(p + 1) * n], grow, x);
                                }
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let av = &nodes[a.0].value;
                    add_into(&mut grads, nodes, *a, |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * gelu_grad(av[i]);
                        }
                    });
                }
                Op::Square(a) => {
                    let av = &nodes[a.0].value;
                    add_into(&mut grads, nodes, *a, |s| {
                        for i in 0..s.len() {
                            s[i] += 2.0 * g[i] * av[i];
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = &nodes[gamma.0].value;
                    let n = gv.len();
                    add_into(&mut grads, nodes, *x, |s| {
                        let nf = n as f64;
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * n;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..n {
                                let dh = g[base + j] * gv[j];
                                sum_d += dh;
                                sum_dx += dh * xhat[base + j];
                            }
                            for j in 0..n {
                                let dh = g[base + j] * gv[j];
                                s[base + j] +=
                                    rs / nf * (nf * dh - sum_d - xhat[base + j] * sum_dx);
                            }
                        }
                    });
                    add_into(&mut grads, nodes, *gamma, |s| {
                        for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                s[j] += row[j] * hrow[j];
                            }
                        }
                    });
                    add_into(&mut grads, nodes, *beta, |s| {
                        for row in g.chunks(n) {
                            axpy(s, row, 1.0);
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    add_into(&mut grads, nodes, *table, |s| {
                        for (r, &i) in ids.iter().enumerate() {
                            axpy(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    });
                }
                Op::SliceLast { x, start } => {
                    let n = last_dim(&nodes[x.0].shape);
                    let len = last_dim(&node.shape);
                    add_into(&mut grads, nodes, *x, |s| {
                        for (srow, grow) in s.chunks_mut(n).zip(g.chunks(len)) {
                            axpy(&mut srow[*start..*start + len], grow, 1.0);
                        }
                    });
                }
                Op::SplitHeads { x, heads } => {
                    let sx = &nodes[x.0].shape;
                    let (b, t, d) = (sx[0], sx[1], sx[2]);
                    let e = d / heads;
                    add_into(&mut grads, nodes, *x, |s| {
                        for bi in 0..b {
                            for ti in 0..t {
                                for h in 0..*heads {
                                    let src = (bi * t + ti) * d + h * e;
                                    let dst = ((bi * heads + h) * t + ti) * e;
                                    axpy(&mut s[src..src + e], &g[dst..dst + e], 1.0);
                                }
                            }
                        }
                    });
                }
                Op::MergeHeads { x, heads } => {
                    let sx = &nodes[x.0].shape;
                    let (bh, t, e) = (sx[0], sx[1], sx[2]);
                    let b = bh / heads;
                    let d = heads * e;
                    add_into(&mut grads, nodes, *x, |s| {
                        for bi in 0..b {
                            for ti in 0..t {
                                for h in 0..*heads {
                                    let src = ((bi * heads + h) * t + ti) * e;
                                    let dst = (bi * t + ti) * d + h * e;
                                    axpy(&mut s[src..src + e], &g[dst..dst + e], 1.0);
                                }
                            }
                        }
                    });
                }
                Op::Bmm(a, b) => {
                    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                    let (nb, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(&mut grads, nodes, *a, |s| {
                        for n in 0..nb {
                            for i in 0..m {
                                let grow = &g[(n * m + i) * p..(n * m + i + 1) * p];
                                for kk in 0..k {
                                    let brow = &bv[(n * k + kk) * p..(n * k + kk + 1) * p];
                                    s[(n * m + i) * k + kk] += dot(grow, brow);
                                }
                            }
                        }
                    });
                    add_into(&mut grads, nodes, *b, |s| {
                        for n in 0..nb {
                            for i in 0..m {
                                let grow = &g[(n * m + i) * p..(n * m + i + 1) * p];
                                for kk in 0..k {
                                    let x = av[(n * m + i) * k + kk];
                                    axpy(&mut s[(n * k + kk) * p..(n * k + kk + 1) * p], grow, x);
                                }
                            }
                        }
                    });
                }
                Op::BmmNt(a, b) => {
                    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                    let (nb, m, k, p) = (sa[0], sa[1], sa[2], sb[1]);
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(&mut grads, nodes, *a, |s| {
                        for n in 0..nb {
                            for i in 0..m {
                                let srow = &mut s[(n * m + i) * k..(n * m + i + 1) * k];
                                for j in 0..p {
                                    let gij = g[(n * m + i) * p + j];
                                    if gij != 0.0 {
                                        axpy(srow, &bv[(n * p + j) * k..(n * p + j + 1) * k], gij);
                                    }
                                }
                            }
                        }
                    });
                    add_into(&mut grads, nodes, *b, |s| {
                        for n in 0..nb {
                            for i in 0..m {
                                let arow = &av[(n * m + i) * k..(n * m + i + 1) * k];
                                for j in 0..p {
                                    let gij = g[(n * m + i) * p + j];
                                    if gij != 0.0 {
                                        axpy(&mut s[(n * p + j) * k..(n * p + j + 1) * k], arow, gij);
                                    }
                                }
                            }
                        }
                    });
                }
                Op::CausalSoftmax(a) | Op::Softmax(a) => {
                    let n = last_dim(&node.shape);
                    let y = &node.value;
                    add_into(&mut grads, nodes, *a, |s| {
                        for ((srow, yrow), grow) in
                            s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n))
                        {
                            let inner = dot(yrow, grow);
                            for j in 0..n {
                                srow[j] += yrow[j] * (grow[j] - inner);
                            }
                        }
                    });
                }
                Op::Select(a, i) => add_into(&mut grads, nodes, *a, |s| s[*i] += g[0]),
                Op::Sum(a) => add_into(&mut grads, nodes, *a, |s| {
                    for v in s.iter_mut() {
                        *v += g[0];
                    }
                }),
                Op::WeightedSum(a, w) => add_into(&mut grads, nodes, *a, |s| axpy(s, w, g[0])),
                Op::Reshape(a) => add_into(&mut grads, nodes, *a, |s| axpy(s, &g, 1.0)),
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    count,
                } => {
                    let lv = &nodes[logits.0].value;
                    let v = last_dim(&nodes[logits.0].shape);
                    let scale = g[0] / *count as f64;
                    add_into(&mut grads, nodes, *logits, |s| {
                        let mut probs = vec![0.0; v];
                        for (r, &t) in targets.iter().enumerate() {
                            if !mask[r] {
                                continue;
                            }
                            probs.copy_from_slice(&lv[r * v..(r + 1) * v]);
                            softmax_in_place(&mut probs);
                            probs[t] -= 1.0;
                            axpy(&mut s[r * v..(r + 1) * v], &probs, scale);
                        }
                    });
                }
                Op::CosineRows { a, b, eps } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let d = last_dim(&nodes[a.0].shape);
                    let rows = av.len() / d;
                    // d/du [u·w / (|u||w| + eps)] = w/D - (u·w)|w| u / (|u| D²)
                    let mut du = vec![0.0; av.len()];
                    let mut dw = vec![0.0; bv.len()];
                    for r in 0..rows {
                        let (u, w) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let uw = dot(u, w);
                        let nu = dot(u, u).sqrt();
                        let nw = dot(w, w).sqrt();
                        let den = nu * nw + eps;
                        let gr = g[r];
                        let cu = if nu > 0.0 { uw * nw / (nu * den * den) } else { 0.0 };
                        let cw = if nw > 0.0 { uw * nu / (nw * den * den) } else { 0.0 };
                        for j in 0..d {
                            du[r * d + j] = gr * (w[j] / den - cu * u[j]);
                            dw[r * d + j] = gr * (u[j] / den - cw * w[j]);
                        }
                    }
                    add_into(&mut grads, nodes, *a, |s| axpy(s, &du, 1.0));
                    add_into(&mut grads, nodes, *b, |s| axpy(s, &dw, 1.0));
                }
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Convenience wrapper: cosine similarity of two equal-length vectors as a
/// scalar node.
impl Tape {
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let c = self.cosine_rows(u, v, crate::COSINE_EPS)?;
        self.reshape(c, vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.bind(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let col = tape.bind(&mat(2, 1, &[5.0, 6.0]));
        let y = tape.matmul(i2, col).unwrap();
        assert_eq!(tape.value(y), &[5.0, 6.0]);

        let a = tape.bind(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.bind(&mat(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);
        assert_eq!(tape.shape(y), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.bind(&Tensor::zeros(&[2, 3]));
        let b = tape.bind(&Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng).with_requires_grad(false);
        let mut tape = Tape::new();
        let (va, vb) = (tape.bind(&a), tape.bind(&b));
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let ga = grads.of(&a).unwrap();
        // (ones · Bᵀ)[r][p] = Σ_j B[p][j]
        for r in 0..3 {
            for p in 0..4 {
                let expect = b.data()[p * 2] + b.data()[p * 2 + 1];
                assert!((ga[r * 4 + p] - expect).abs() < 1e-12);
            }
        }
        assert!(grads.of(&b).is_none());

        let err = finite_difference_check(
            |tape, x| {
                let vb = tape.bind(&b);
                let y = tape.matmul(x, vb)?;
                Ok(tape.sum(y))
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 2, 4], vec![0.0; 8]).unwrap();
        let loss = tape.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        assert!((tape.scalar(loss) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct_tends_to_zero() {
        let mut prev = f64::INFINITY;
        for mag in [1.0, 10.0, 100.0] {
            let mut tape = Tape::new();
            let logits = tape.constant(vec![1, 3], vec![0.0, mag, 0.0]).unwrap();
            let l = tape.cross_entropy(logits, &[1], &[true]).unwrap();
            let loss = tape.scalar(l);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn cross_entropy_matches_scalar_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[2, 3, 5], 2.0, &mut rng);
        let targets = [0usize, 4, 2, 1, 3, 3];
        let mask = [true, false, true, true, true, false];
        let mut tape = Tape::new();
        let l = tape.bind(&logits);
        let ce = tape.cross_entropy(l, &targets, &mask).unwrap();
        let loss = tape.scalar(ce);

        // independent: ln Σ exp(z) − z_t, averaged in plain scalar code
        let mut sum = 0.0;
        let mut n = 0.0;
        for r in 0..6 {
            if !mask[r] {
                continue;
            }
            let row = &logits.data()[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            sum += z.ln() - row[targets[r]];
            n += 1.0;
        }
        assert!((loss - sum / n).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_degenerate() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![3], vec![3.0, -1.0, 2.0]).unwrap();
        let c = tape.cosine_similarity(v, v).unwrap();
        assert!((tape.scalar(c) - 1.0).abs() < 1e-9);

        let e1 = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = tape.constant(vec![2], vec![0.0, 1.0]).unwrap();
        let c = tape.cosine_similarity(e1, e2).unwrap();
        assert_eq!(tape.scalar(c), 0.0);

        let a = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let b = tape.constant(vec![2], vec![1.0, -1.0]).unwrap();
        let c = tape.cosine_similarity(a, b).unwrap();
        assert_eq!(tape.scalar(c), 0.0);

        let z = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let c = tape.cosine_similarity(z, a).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn zero_vector_cosine_has_finite_gradient() {
        let x = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let vx = tape.bind(&x);
        let c = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.cosine_similarity(vx, c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.of(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let vx = tape.bind(&x);
        let y = tape.square(vx);
        let g1 = tape.backward(y).unwrap();
        assert_eq!(g1.of(&x).unwrap(), &[6.0]);
        g1.accumulate_into(&mut x);
        let g2 = tape.backward(y).unwrap();
        g2.accumulate_into(&mut x);
        assert_eq!(x.grad().unwrap(), &[12.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let v = tape.bind(&x);
        let y = tape.square(v);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let p = tape.causal_softmax(a).unwrap();
        let v = tape.value(p);
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // batch 0, head 1, time 0 = x[0, 0, 2..4]
        assert_eq!(&tape.value(s)[6..8], &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }
}
