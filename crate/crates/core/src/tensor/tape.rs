use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::{DexError, Real, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Recip(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumLast {
        x: Var,
        cols: usize,
    },
    Mse(Var, Var),
    Cosine {
        a: Var,
        b: Var,
        cols: usize,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a reverse sweep is a valid topological backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
    cos_eps: T,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Denominator clamp for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: false,
            cos_eps: T::of(COSINE_EPS),
        }
    }

    /// In strict mode a zero-norm vector in [`Tape::cosine_similarity`] is an
    /// error instead of being clamped.
    pub fn strict() -> Self {
        Tape {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
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
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DexError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::from_vec(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("shape")
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    fn check_suffix(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs || bs.is_empty() {
            return Err(DexError::shape(
                op,
                format!("{:?} is not a trailing suffix of {:?}", bs, xs),
            ));
        }
        Ok(self.value(b).numel())
    }

    /// `x[.., S] + b[S]`
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let bn = self.check_suffix("add_suffix", x, b)?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + bv[i % bn])
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, &[x, b], Op::AddSuffix(x, b)))
    }

    /// `x[.., S] * b[S]`
    pub fn mul_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let bn = self.check_suffix("mul_suffix", x, b)?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * bv[i % bn])
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, &[x, b], Op::MulSuffix(x, b)))
    }

    /// Scales each leading-prefix slice of `x` by the matching entry of `w`
    /// (`w.shape` must be a leading prefix of `x.shape`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() > xs.len() || xs[..ws.len()] != *ws {
            return Err(DexError::shape(
                "scale_rows",
                format!("{:?} is not a leading prefix of {:?}", ws, xs),
            ));
        }
        let wv = self.value(w).data();
        let xv = self.value(x);
        let cols = xv.numel() / wv.len().max(1);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * wv[i / cols])
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, &[x, w], Op::ScaleRows(x, w)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map(x, |e| e * c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.map(x, |e| e + c);
        self.push(out, &[x], Op::AddScalar(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|e| e.is_zero()) {
            return Err(DexError::Numeric { op: "recip" });
        }
        let out = self.map(x, |e| e.recip());
        Ok(self.push(out, &[x], Op::Recip(x)))
    }

    /// `a[M,K] · b[K,N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DexError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `a[G,M,K] · b[G,K,N]`, or `a · bᵀ` with `b[G,N,K]`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(DexError::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let cb = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                matmul_nt(ab, bb, cb, m, k, n);
            } else {
                matmul_nn(ab, bb, cb, m, k, n);
            }
        }
        let out = Tensor::from_vec(&[g, m, n], out)?;
        Ok(self.push(
            out,
            &[a, b],
            Op::BatchMatMul {
                a,
                b,
                g,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Flat gather: `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    /// Covers slicing, permutation and row broadcasting.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(DexError::shape(
                "gather",
                format!("index {} out of range {}", bad, src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, &[x], Op::Gather { src: x, index }))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DexError::shape("concat", "no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(DexError::shape(
                    "concat",
                    format!("{:?} vs trailing {:?}", s, tail),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, parts, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(DexError::shape(
                op,
                format!("axis {} of rank-{} tensor", axis, s.len()),
            ));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split("softmax", x, axis)?;
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(DexError::Numeric { op: "softmax" });
        }
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(
            out,
            &[x],
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let out = self.map(x, |e| half * e * (T::one() + (k * (e + c * e * e * e)).tanh()));
        self.push(out, &[x], Op::Gelu(x))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().ok_or_else(|| DexError::shape("layer_norm", "scalar input"))?;
        let rows = xv.numel() / cols.max(1);
        let src = xv.data();
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            for (o, &e) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (e - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(out, &[x], Op::LayerNorm { x, inv_std, cols }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split("mean_axis", x, axis)?;
        if len == 0 {
            return Err(DexError::shape("mean_axis", "empty axis"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let n = T::of(len as f64);
        out.iter_mut().for_each(|e| *e = *e / n);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            &[x],
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| DexError::shape("sum_last", "scalar input"))?;
        let data = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .map(|row| row.iter().copied().sum::<T>())
            .collect();
        let out = Tensor::from_vec(&s[..s.len() - 1], data)?;
        Ok(self.push(out, &[x], Op::SumLast { x, cols }))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::of(va.len() as f64);
        let s = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), &[a, b], Op::Mse(a, b)))
    }

    /// Cosine similarity along the last axis; the last axis is removed.
    ///
    /// Norms are clamped at [`COSINE_EPS`]; a strict tape errors instead.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let s = self.shape(a).to_vec();
        let cols = *s
            .last()
            .ok_or_else(|| DexError::shape("cosine_similarity", "scalar input"))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let eps = self.cos_eps;
        let rows = va.len() / cols.max(1);
        let mut out = Vec::with_capacity(rows);
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        for r in 0..rows {
            let ra = &va[r * cols..(r + 1) * cols];
            let rb = &vb[r * cols..(r + 1) * cols];
            let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            if self.strict && (na <= eps || nb <= eps) {
                return Err(DexError::Degenerate {
                    op: "cosine_similarity",
                    detail: format!("row {} has zero norm", r),
                });
            }
            let c = dot / (na.max(eps) * nb.max(eps));
            out.push(c.max(-T::one()).min(T::one()));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let out = Tensor::from_vec(&s[..s.len() - 1], out)?;
        Ok(self.push(
            out,
            &[a, b],
            Op::Cosine {
                a,
                b,
                cols,
                norm_a,
                norm_b,
                eps,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(g, &c)| *g = *g + c),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(DexError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, &[T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(Var(i), &op, &dy);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op<T>, dy: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy);
                let neg: Vec<T> = dy.iter().map(|&g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = dy.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = dy.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddSuffix(x, b) => {
                self.accumulate(x, dy);
                let bn = self.value(b).numel();
                let mut db = vec![T::zero(); bn];
                for (i, &g) in dy.iter().enumerate() {
                    db[i % bn] = db[i % bn] + g;
                }
                self.accumulate(b, &db);
            }
            Op::MulSuffix(x, b) => {
                let bv = self.value(b).data();
                let bn = bv.len();
                let dx: Vec<T> = dy.iter().enumerate().map(|(i, &g)| g * bv[i % bn]).collect();
                let mut db = vec![T::zero(); bn];
                for ((i, &g), &xv) in dy.iter().enumerate().zip(self.value(x).data()) {
                    db[i % bn] = db[i % bn] + g * xv;
                }
                self.accumulate(x, &dx);
                self.accumulate(b, &db);
            }
            Op::ScaleRows(x, w) => {
                let wv = self.value(w).data();
                let cols = dy.len() / wv.len().max(1);
                let dx: Vec<T> = dy.iter().enumerate().map(|(i, &g)| g * wv[i / cols]).collect();
                let mut dw = vec![T::zero(); wv.len()];
                for ((i, &g), &xv) in dy.iter().enumerate().zip(self.value(x).data()) {
                    dw[i / cols] = dw[i / cols] + g * xv;
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
            }
            Op::Scale(x, c) => {
                let dx: Vec<T> = dy.iter().map(|&g| g * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(x, dy),
            Op::Recip(x) => {
                let dx: Vec<T> = dy
                    .iter()
                    .zip(self.value(out).data())
                    .map(|(&g, &y)| -g * y * y)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(dy, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(self.value(a).data(), dy, &mut db, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                g,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![T::zero(); g * m * k];
                let mut db = vec![T::zero(); g * k * n];
                for gi in 0..g {
                    let ab = &av[gi * m * k..(gi + 1) * m * k];
                    let bb = &bv[gi * k * n..(gi + 1) * k * n];
                    let dc = &dy[gi * m * n..(gi + 1) * m * n];
                    let dab = &mut da[gi * m * k..(gi + 1) * m * k];
                    let dbb = &mut db[gi * k * n..(gi + 1) * k * n];
                    if trans_b {
                        // C = A Bᵀ, B is [n,k]
                        matmul_nn(dc, bb, dab, m, n, k);
                        matmul_tn(dc, ab, dbb, n, m, k);
                    } else {
                        matmul_nt(dc, bb, dab, m, n, k);
                        matmul_tn(ab, dc, dbb, k, m, n);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Gather { src, ref index } => {
                let mut dx = vec![T::zero(); self.value(src).numel()];
                for (&i, &g) in index.iter().zip(dy) {
                    dx[i] = dx[i] + g;
                }
                self.accumulate(src, &dx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.value(out).data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Gelu(x) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_K));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let dx: Vec<T> = dy
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &e)| {
                        let t = (k * (e + c * e * e * e)).tanh();
                        let du = k * (T::one() + three * c * e * e);
                        g * (half * (T::one() + t) + half * e * (T::one() - t * t) * du)
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::LayerNorm {
                x,
                ref inv_std,
                cols,
            } => {
                let y = self.value(out).data();
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &dy[span.clone()]);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / n;
                    for ((d, &g), &v) in dx[span].iter_mut().zip(gr).zip(yr) {
                        *d = is * (g - mean_g - v * mean_gy);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(x).numel()];
                self.accumulate(x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                let dx = vec![dy[0] / T::of(n as f64); n];
                self.accumulate(x, &dx);
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let scale = T::of(len as f64).recip();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[o * len * inner + j * inner + i] = dy[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SumLast { x, cols } => {
                let dx: Vec<T> = (0..dy.len() * cols).map(|i| dy[i / cols]).collect();
                self.accumulate(x, &dx);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let k = T::of(2.0) * dy[0] / T::of(va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                let db: Vec<T> = da.iter().map(|&d| -d).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Cosine {
                a,
                b,
                cols,
                ref norm_a,
                ref norm_b,
                eps,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for (r, &g) in dy.iter().enumerate() {
                    let (na, nb) = (norm_a[r], norm_b[r]);
                    let (ca, cb) = (na.max(eps), nb.max(eps));
                    let span = r * cols..(r + 1) * cols;
                    let (ra, rb) = (&va[span.clone()], &vb[span.clone()]);
                    let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>();
                    let cos = dot / (ca * cb);
                    // clamped norms are constants
                    let ka = if na > eps { cos / (na * na) } else { T::zero() };
                    let kb = if nb > eps { cos / (nb * nb) } else { T::zero() };
                    let inv = (ca * cb).recip();
                    for j in 0..cols {
                        da[r * cols + j] = g * (rb[j] * inv - ka * ra[j]);
                        db[r * cols + j] = g * (ra[j] * inv - kb * rb[j]);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
        }
    }
}
