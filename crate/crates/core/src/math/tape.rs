use super::kernels::{self, AttnShape, View, ViewMut};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherCols { x: Var, idx: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Rope { x: Var, positions: Vec<usize>, heads: usize, head_dim: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    FillColumns { x: Var, cols: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so reverse index order is a valid reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf", requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), "matmul", g)
    }

    /// `a * b^T`; with `b` shaped `(out, in)` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), "matmul_nt", g)
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), "add", g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), "sub", g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), "mul", g)
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "minimum", |p, q| if p <= q { p } else { q })?;
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Minimum(a, b), "minimum", g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), "scale", g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        let g = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), "add_scalar", g)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), "exp", g)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Silu(a), "silu", g)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero strictly outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), "clamp", g)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), "sum", g)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Argument("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, T::c(1.0 / n as f64))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let cols = xv.cols();
        if gv.len() != cols {
            return Err(Error::Dimension(format!(
                "rms_norm gain has {} entries, last axis is {cols}",
                gv.len()
            )));
        }
        let (y, inv_rms) = kernels::rms_norm_forward(xv.data(), gv.data(), cols);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let g = self.any_grad(&[x, gain]);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, "rms_norm", g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        self.push(out, Op::SoftmaxRows(x), "softmax_rows", g)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::log_softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), "log_softmax_rows", g)
    }

    /// Picks column `idx[i]` from row `i`, producing a vector.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::Dimension(format!(
                "gather_cols: {} indices for {} rows",
                idx.len(),
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Index(format!("column {c} out of {cols}")));
            }
            out.push(xv.row(r)[c]);
        }
        let out = Tensor::new(vec![idx.len()], out)?;
        let g = self.any_grad(&[x]);
        self.push(out, Op::GatherCols { x, idx: idx.to_vec() }, "gather_cols", g)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], out)?;
        let g = self.any_grad(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, "embedding", g)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::Index(format!("row {r} out of {}", xv.rows())));
            }
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], out)?;
        let g = self.any_grad(&[x]);
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, "select_rows", g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths {cols} and {} differ",
                    pv.cols()
                )));
            }
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let g = self.any_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows", g)
    }

    /// Rotary position embedding on `(rows, heads * head_dim)` activations.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, head_dim: usize, base: f64) -> Result<Var> {
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head dim, got {head_dim}")));
        }
        let xv = self.value(x);
        if xv.cols() != heads * head_dim || xv.rows() != positions.len() {
            return Err(Error::Dimension(format!(
                "rope: activations {:?} vs {heads} heads x {head_dim} dims, {} positions",
                xv.shape(),
                positions.len()
            )));
        }
        let mut out = xv.clone();
        kernels::rope_rotate(out.data_mut(), positions, heads, head_dim, base, 1.0);
        let g = self.any_grad(&[x]);
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            heads,
            head_dim,
            base,
        };
        self.push(out, op, "rope", g)
    }

    /// Causal grouped-query attention. `q` is `(q_rows, heads_q * head_dim)`,
    /// `k` and `v` are `(k_rows, heads_kv * head_dim)`; query row `i` sits at
    /// absolute position `offset + i` and sees keys `0..=offset + i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads_q: usize,
        heads_kv: usize,
        head_dim: usize,
        offset: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if heads_kv == 0 || heads_q % heads_kv != 0 {
            return Err(Error::Config(format!("{heads_q} query heads cannot share {heads_kv} kv heads")));
        }
        if qv.cols() != heads_q * head_dim || kv.cols() != heads_kv * head_dim || kv.shape() != vv.shape() {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if kv.rows() == 0 {
            return Err(Error::Dimension("attention over zero keys".into()));
        }
        let shape = AttnShape {
            heads_q,
            heads_kv,
            head_dim,
            q_rows: qv.rows(),
            k_rows: kv.rows(),
            offset,
        };
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), shape);
        let out = Tensor::new(vec![shape.q_rows, heads_q * head_dim], out)?;
        let g = self.any_grad(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, shape, probs }, "attention", g)
    }

    /// Replaces the listed columns by `value`. The gradient through those
    /// columns is zero.
    pub fn fill_columns(&mut self, x: Var, cols: &[usize], value: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        let width = out.cols();
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Index(format!("column {c} out of {width}")));
        }
        for row in out.data_mut().chunks_mut(width) {
            for &c in cols {
                row[c] = value;
            }
        }
        let g = self.any_grad(&[x]);
        self.push(out, Op::FillColumns { x, cols: cols.to_vec() }, "fill_columns", g)
    }

    /// Accumulated gradient of a leaf; zeros when the leaf never received one.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.leaf_grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Tensor<T> {
        match self.leaf_grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(existing) => existing.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[a.0].needs_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm(m, n, k, T::one(), View::dense(g.data(), n), View::dense_t(bv.data(), n), T::zero(), ViewMut::dense(&mut da, k));
                        acc(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); k * n];
                        kernels::gemm(k, m, n, T::one(), View::dense_t(av.data(), k), View::dense(g.data(), n), T::zero(), ViewMut::dense(&mut db, n));
                        acc(*b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    if nodes[a.0].needs_grad {
                        // dA = G B
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm(m, n, k, T::one(), View::dense(g.data(), n), View::dense(bv.data(), k), T::zero(), ViewMut::dense(&mut da, k));
                        acc(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[b.0].needs_grad {
                        // dB = G^T A
                        let mut db = vec![T::zero(); n * k];
                        kernels::gemm(n, m, k, T::one(), View::dense_t(g.data(), n), View::dense(av.data(), k), T::zero(), ViewMut::dense(&mut db, k));
                        acc(*b, Tensor::new(vec![n, k], db)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[a.0].needs_grad {
                        let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                        acc(*a, Tensor::new(av.shape().to_vec(), d)?);
                    }
                    if nodes[b.0].needs_grad {
                        let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                        acc(*b, Tensor::new(bv.shape().to_vec(), d)?);
                    }
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = g.clone();
                    let mut db = g;
                    for ((x, y), (p, q)) in da.data_mut().iter_mut().zip(db.data_mut()).zip(av.data().iter().zip(bv.data())) {
                        if p <= q {
                            *y = T::zero();
                        } else {
                            *x = T::zero();
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => {
                    let y = &node.value;
                    let d = g.data().iter().zip(y.data()).map(|(&x, &e)| x * e).collect();
                    acc(*a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Silu(a) => {
                    let xv = val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gr, &x)| {
                            let s = T::one() / (T::one() + (-x).exp());
                            gr * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    acc(*a, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gr, &x)| if x < *lo || x > *hi { T::zero() } else { gr })
                        .collect();
                    acc(*a, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(*a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (val(*x), val(*gain));
                    let cols = xv.cols();
                    let n = T::c(cols as f64);
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dgain = vec![T::zero(); cols];
                    for (((xr, gr), dxr), &r) in xv
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .zip(dx.chunks_mut(cols))
                        .zip(inv_rms)
                    {
                        let mut dot = T::zero();
                        for j in 0..cols {
                            let u = gr[j] * gv.data()[j];
                            dot = dot + u * xr[j];
                            dgain[j] = dgain[j] + gr[j] * xr[j] * r;
                        }
                        let coef = r * r * r * dot / n;
                        for j in 0..cols {
                            dxr[j] = r * gr[j] * gv.data()[j] - coef * xr[j];
                        }
                    }
                    let (xs, gs) = (xv.shape().to_vec(), gv.shape().to_vec());
                    acc(*x, Tensor::new(xs, dx)?);
                    acc(*gain, Tensor::new(gs, dgain)?);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            dr[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::GatherCols { x, idx } => {
                    let xv = val(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, (&c, &gr)) in idx.iter().zip(g.data()).enumerate() {
                        dx.row_mut(r)[c] = gr;
                    }
                    acc(*x, dx);
                }
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &s) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d = *d + s;
                        }
                    }
                    acc(*table, dt);
                }
                Op::SelectRows { x, rows } => {
                    let xv = val(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &s) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d = *d + s;
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let pv = val(p);
                        let n = pv.len();
                        let slice = g.data()[start..start + n].to_vec();
                        start += n;
                        acc(p, Tensor::new(vec![n / cols.max(1), cols], slice)?);
                    }
                }
                Op::Rope {
                    x,
                    positions,
                    heads,
                    head_dim,
                    base,
                } => {
                    let mut dx = g;
                    kernels::rope_rotate(dx.data_mut(), positions, *heads, *head_dim, *base, -1.0);
                    acc(*x, dx);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        val(*q).data(),
                        val(*k).data(),
                        val(*v).data(),
                        probs,
                        g.data(),
                        *shape,
                    );
                    let (qs, ks, vs) = (val(*q).shape().to_vec(), val(*k).shape().to_vec(), val(*v).shape().to_vec());
                    acc(*q, Tensor::new(qs, dq)?);
                    acc(*k, Tensor::new(ks, dk)?);
                    acc(*v, Tensor::new(vs, dv)?);
                }
                Op::FillColumns { x, cols } => {
                    let mut dx = g;
                    let width = dx.cols();
                    for row in dx.data_mut().chunks_mut(width) {
                        for &c in cols {
                            row[c] = T::zero();
                        }
                    }
                    acc(*x, dx);
                }
            }
        }
        for g in self.leaf_grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }
}
