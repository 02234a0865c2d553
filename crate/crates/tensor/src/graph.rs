//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node ids are a
//! topological order by construction and [`Graph::backward`] is a single
//! reverse sweep.

use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::kernels::{self, AttnMask, AttnShape, MatMut, MatRef};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        idx: Rc<[usize]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ends: Rc<[usize]>,
        probs: Vec<T>,
    },
    Resize {
        x: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Gather {
        x: Var,
        idx: Rc<[usize]>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and runs its backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NumericFailure(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Resize { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StraightThrough(x) => self.rg(*x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.rg(*x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b))
            }
            Op::Embedding { table, .. } => self.rg(*table),
            Op::CrossEntropy { logits, .. } => self.rg(*logits),
            Op::Attention { q, k, v, .. } | Op::BlockAttention { q, k, v, .. } => {
                self.rg(*q) || self.rg(*k) || self.rg(*v)
            }
            Op::Concat(xs) => xs.iter().any(|&x| self.rg(x)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor as a leaf. Leaves with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient after [`Graph::backward`]; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`, zero if nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| invalid(format!("{op}: expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Scale(x, c), "scale")
    }

    /// `x[..., n] + b[n]`, broadcasting over every leading dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(invalid(format!(
                "add_bias: bias {:?} does not match trailing extent {n}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::AddBias(x, b), "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(invalid(format!("matmul: inner extents {k} vs {k2}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `x w + b` for `x: [r, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Normalizes over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 {
            return Err(invalid("layer_norm: empty trailing dimension"));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [n] {
                return Err(invalid(format!(
                    "layer_norm: affine parameter {:?} does not match {n}",
                    self.shape(p)
                )));
            }
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        let (means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            n,
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            "layer_norm",
        )
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 {
            return Err(invalid("softmax: empty trailing dimension"));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_row(row, None);
        }
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Rows of `table: [V, n]` selected by `idx`; differentiable in `table` only.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, n) = self.matrix(table, "embedding")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= v {
                return Err(invalid(format!("embedding: index {i} out of range {v}")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(&[idx.len(), n], out)?;
        self.push(
            t,
            Op::Embedding {
                table,
                idx: idx.into(),
            },
            "embedding",
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != r || r == 0 {
            return Err(invalid(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            if t >= v {
                return Err(invalid(format!("cross_entropy: target {t} out of range {v}")));
            }
            kernels::softmax_row(row, None);
            total -= row[t].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        let loss = Tensor::scalar(T::lit(total / r as f64));
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Multi-head scaled dot-product attention. `q: [lq, d]`, `k, v: [lk, d]`;
    /// heads split the trailing dimension into contiguous blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let (lq, dim) = self.matrix(q, "attention")?;
        let (lk, dk) = self.matrix(k, "attention")?;
        if self.shape(v) != [lk, dk] || dk != dim {
            return Err(invalid(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("attention: {dim} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.rows != lq || m.cols != lk {
                return Err(invalid(format!(
                    "attention: mask {}x{} for {lq}x{lk} scores",
                    m.rows, m.cols
                )));
            }
        }
        let shape = AttnShape {
            lq,
            lk,
            dim,
            heads,
        };
        let mut out = vec![T::zero(); lq * dim];
        let mut probs = vec![T::zero(); heads * lq * lk];
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            mask,
            &mut out,
            &mut probs,
        );
        let t = Tensor::new(&[lq, dim], out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            "attention",
        )
    }

    /// Multi-head attention where query block `b` (rows `ends[b-1]..ends[b]`)
    /// attends to the key prefix `0..ends[b]`. Equivalent to [`Graph::attention`]
    /// with a block-causal mask, but every block is evaluated on its own
    /// prefix so results do not depend on trailing rows.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, ends: &[usize]) -> Result<Var> {
        let (l, dim) = self.matrix(q, "block_attention")?;
        if self.shape(k) != [l, dim] || self.shape(v) != [l, dim] {
            return Err(invalid(format!(
                "block_attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!("block_attention: {dim} not divisible by {heads} heads")));
        }
        if ends.last() != Some(&l) || ends.windows(2).any(|w| w[0] >= w[1]) || ends[0] == 0 {
            return Err(invalid(format!("block_attention: block ends {ends:?} for {l} rows")));
        }
        let mut out = vec![T::zero(); l * dim];
        let probs = kernels::block_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dim,
            heads,
            ends,
            &mut out,
        );
        let t = Tensor::new(&[l, dim], out)?;
        self.push(
            t,
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                ends: ends.into(),
                probs,
            },
            "block_attention",
        )
    }

    /// Bilinear resize of a `C x h x w` map (half-pixel centers).
    pub fn resize(&mut self, x: Var, to: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::resize_forward(self.value(x).data(), c, (h, w), to)?;
        let t = Tensor::new(&[c, to.0, to.1], out)?;
        self.push(
            t,
            Op::Resize {
                x,
                from: (h, w),
                to,
            },
            "resize",
        )
    }

    /// `out[i] = x.flat[idx[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(invalid(format!("gather: index {bad} out of range {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Gather { x, idx }, "gather")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start + len > c {
            return Err(invalid(format!("slice_cols: {start}+{len} exceeds {c}")));
        }
        let idx: Rc<[usize]> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, idx, &[r, len])
    }

    /// `C x h x w` map to `(h*w) x C` token rows.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let idx: Rc<[usize]> = (0..hw)
            .flat_map(|p| (0..c).map(move |ch| ch * hw + p))
            .collect();
        self.gather(x, idx, &[hw, c])
    }

    /// `(h*w) x C` token rows to a `C x h x w` map.
    pub fn rows_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (hw, c) = self.matrix(x, "rows_to_chw")?;
        if hw != h * w {
            return Err(invalid(format!("rows_to_chw: {hw} rows for a {h}x{w} grid")));
        }
        let idx: Rc<[usize]> = (0..c)
            .flat_map(|ch| (0..hw).map(move |p| p * c + ch))
            .collect();
        self.gather(x, idx, &[c, h, w])
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(invalid(format!("concat: {:?} vs trailing {tail:?}", s)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat(xs.to_vec()), "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s / T::lit(n as f64)), Op::Mean(x), "mean")
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Value `replacement`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(invalid(format!(
                "straight_through: {:?} vs {:?}",
                replacement.shape(),
                self.shape(x)
            )));
        }
        self.push(replacement, Op::StraightThrough(x), "straight_through")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_with(&mut self, v: Var, g: &[T], f: impl Fn(T, usize) -> T) {
        if let Some(buf) = self.acc_buf(v) {
            for (j, (b, &gj)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(gj, j);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so its saved buffers can be read while
        // gradients of earlier nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(*a, g, |x, _| x);
                self.acc_with(*b, g, |x, _| x);
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, g, |x, _| x);
                self.acc_with(*b, g, |x, _| -x);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.acc_with(*a, g, |x, j| x * bv[j]);
                self.acc_with(*b, g, |x, j| x * av[j]);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_with(*x, g, |v, _| v * c);
            }
            Op::AddBias(x, b) => {
                self.acc_with(*x, g, |v, _| v);
                let n = self.value(*b).numel();
                if let Some(buf) = self.acc_buf(*b) {
                    for row in g.chunks_exact(n) {
                        for (d, &v) in buf.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul lhs");
                let n = self.value(*b).dims2().expect("matmul rhs").1;
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let buf = self.acc_buf(*a).expect("requires grad");
                    kernels::gemm(
                        MatRef::row_major(g, m, n),
                        MatRef::row_major(&bv, k, n).t(),
                        MatMut::row_major(buf, m, k),
                        T::one(),
                        T::one(),
                    );
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let buf = self.acc_buf(*b).expect("requires grad");
                    kernels::gemm(
                        MatRef::row_major(&av, m, k).t(),
                        MatRef::row_major(g, m, n),
                        MatMut::row_major(buf, k, n),
                        T::one(),
                        T::one(),
                    );
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, g, |v, j| v * kernels::gelu_grad(xv[j]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let n = *self.shape(*x).last().expect("layer_norm rank");
                let xv = self.value(*x).data().to_vec();
                let gv = gamma.map(|p| self.value(p).data().to_vec());
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = gamma.filter(|&p| self.rg(p)).map(|_| vec![T::zero(); n]);
                let mut db = beta.filter(|&p| self.rg(p)).map(|_| vec![T::zero(); n]);
                kernels::layer_norm_backward(
                    &xv,
                    n,
                    gv.as_deref(),
                    means,
                    rstds,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.acc_with(*x, &d, |v, _| v);
                }
                if let (Some(p), Some(d)) = (gamma, dg) {
                    self.acc_with(*p, &d, |v, _| v);
                }
                if let (Some(p), Some(d)) = (beta, db) {
                    self.acc_with(*p, &d, |v, _| v);
                }
            }
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().expect("softmax rank");
                let p = self.nodes[i].value.data().to_vec();
                if let Some(buf) = self.acc_buf(*x) {
                    for ((pr, gr), dr) in p
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(buf.chunks_exact_mut(n))
                    {
                        kernels::softmax_row_backward(pr, gr, dr);
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let n = self.shape(*table)[1];
                if let Some(buf) = self.acc_buf(*table) {
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..n {
                            buf[row * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::lit(targets.len() as f64);
                if let Some(buf) = self.acc_buf(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            buf[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let qv = self.value(*q).data().to_vec();
                let kv = self.value(*k).data().to_vec();
                let vv = self.value(*v).data().to_vec();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                kernels::attention_backward(
                    &qv, &kv, &vv, *shape, probs, g, &mut dq, &mut dk, &mut dv,
                );
                self.acc_with(*q, &dq, |x, _| x);
                self.acc_with(*k, &dk, |x, _| x);
                self.acc_with(*v, &dv, |x, _| x);
            }
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                ends,
                probs,
            } => {
                let qv = self.value(*q).data().to_vec();
                let kv = self.value(*k).data().to_vec();
                let vv = self.value(*v).data().to_vec();
                let dim = self.shape(*q)[1];
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                kernels::block_attention_backward(
                    &qv, &kv, &vv, dim, *heads, ends, probs, g, &mut dq, &mut dk, &mut dv,
                );
                self.acc_with(*q, &dq, |x, _| x);
                self.acc_with(*k, &dk, |x, _| x);
                self.acc_with(*v, &dv, |x, _| x);
            }
            Op::Resize { x, from, to } => {
                let c = self.shape(*x)[0];
                if let Some(buf) = self.acc_buf(*x) {
                    kernels::resize_backward(g, c, *from, *to, buf);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(buf) = self.acc_buf(*x) {
                    for (o, &src) in idx.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.acc_with(x, &g[offset..offset + n], |v, _| v);
                    offset += n;
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                self.acc_with(*x, g, |v, _| v);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_with_const(*x, g0);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g0 = g[0] / T::lit(n as f64);
                self.acc_with_const(*x, g0);
            }
        }
        self.nodes[i].op = op;
    }

    fn acc_with_const(&mut self, x: Var, c: T) {
        if let Some(buf) = self.acc_buf(x) {
            for b in buf.iter_mut() {
                *b += c;
            }
        }
    }
}

fn zip_map<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
