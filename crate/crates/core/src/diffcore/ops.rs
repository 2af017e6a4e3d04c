//! Forward operations and their gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{numel, Tensor};

/// How an operand's elements line up with a broadcast result.
#[derive(Clone)]
enum Bcast {
    Same,
    Scalar,
    /// Operand equals the trailing dims of the output.
    Cycle(usize),
    General(Rc<Vec<usize>>),
}

impl Bcast {
    fn plan(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Bcast::Same;
        }
        let n = numel(input);
        if n == 1 {
            return Bcast::Scalar;
        }
        let trimmed: Vec<usize> = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            input[lead..].to_vec()
        };
        if out.ends_with(&trimmed) {
            return Bcast::Cycle(n);
        }
        // general: walk the output multi-index
        let offset = out.len() - input.len();
        let mut in_strides = vec![0usize; out.len()];
        let mut s = 1;
        for d in (0..input.len()).rev() {
            in_strides[d + offset] = if input[d] == 1 { 0 } else { s };
            s *= input[d];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                flat += in_strides[d];
                if idx[d] < out[d] {
                    break;
                }
                flat -= in_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Bcast::General(Rc::new(map))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Cycle(n) => i % n,
            Bcast::General(map) => map[i],
        }
    }

    fn reduce<S: Scalar>(&self, g: &[S], n_in: usize) -> Vec<S> {
        match self {
            Bcast::Same => return g.to_vec(),
            Bcast::Cycle(m) => {
                let mut out = vec![S::zero(); n_in];
                for chunk in g.chunks_exact(*m) {
                    out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                }
                return out;
            }
            _ => {}
        }
        let mut out = vec![S::zero(); n_in];
        for (i, &v) in g.iter().enumerate() {
            out[self.at(i)] += v;
        }
        out
    }
}

/// Elementwise `f` over broadcast operands, with loops specialised for the
/// same-shape and trailing-dims cases.
fn combine<S: Scalar>(a: &[S], b: &[S], ma: &Bcast, mb: &Bcast, n: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Cycle(m)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks_exact(*m) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Bcast::Cycle(m), Bcast::Same) => {
            let mut out = Vec::with_capacity(n);
            for chunk in b.chunks_exact(*m) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Bcast::Same, Bcast::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Bcast::Scalar, Bcast::Same) => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => (0..n).map(|i| f(a[ma.at(i)], b[mb.at(i)])).collect(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// `(outer, n, inner)` view of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<S: Scalar> Tensor<S> {
    fn binary(&self, other: &Tensor<S>, kind: Binary) -> Result<Tensor<S>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let ma = Bcast::plan(&shape, self.shape());
        let mb = Bcast::plan(&shape, other.shape());
        let n = numel(&shape);
        let data = {
            let a = self.data();
            let b = other.data();
            match kind {
                Binary::Add => combine(&a, &b, &ma, &mb, n, |x, y| x + y),
                Binary::Sub => combine(&a, &b, &ma, &mb, n, |x, y| x - y),
                Binary::Mul => combine(&a, &b, &ma, &mb, n, |x, y| x * y),
                Binary::Div => combine(&a, &b, &ma, &mb, n, |x, y| x / y),
            }
        };
        let (lhs, rhs) = (self.clone(), other.clone());
        let (na, nb) = (self.numel(), other.numel());
        let needs = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = needs.0.then(|| match kind {
                    Binary::Add | Binary::Sub => ma.reduce(g, na),
                    Binary::Mul => {
                        let b = rhs.data();
                        let prod = combine(g, &b, &Bcast::Same, &mb, g.len(), |v, y| v * y);
                        ma.reduce(&prod, na)
                    }
                    Binary::Div => {
                        let b = rhs.data();
                        let q = combine(g, &b, &Bcast::Same, &mb, g.len(), |v, y| v / y);
                        ma.reduce(&q, na)
                    }
                });
                let gb = needs.1.then(|| match kind {
                    Binary::Add => mb.reduce(g, nb),
                    Binary::Sub => {
                        let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                        mb.reduce(&neg, nb)
                    }
                    Binary::Mul => {
                        let a = lhs.data();
                        let prod = combine(g, &a, &Bcast::Same, &ma, g.len(), |v, x| v * x);
                        mb.reduce(&prod, nb)
                    }
                    Binary::Div => {
                        let a = lhs.data();
                        let b = rhs.data();
                        let q: Vec<S> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| {
                                let y = b[mb.at(i)];
                                -v * a[ma.at(i)] / (y * y)
                            })
                            .collect();
                        mb.reduce(&q, nb)
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, Binary::Div)
    }

    fn unary(
        &self,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out| {
                let x = input.data();
                vec![Some(g.iter().zip(x.iter()).zip(out).map(|((&g, &x), &y)| g * df(x, y)).collect())]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary(S::exp, |_, y| y)
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn log(&self) -> Result<Tensor<S>> {
        if let Some(bad) = self.data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::domain("log", format!("non-positive argument {bad}")));
        }
        Ok(self.unary(S::ln, |x, _| S::one() / x))
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Tensor<S> {
        self.unary(S::abs, |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    pub fn relu(&self) -> Tensor<S> {
        self.unary(|x| if x < S::zero() { S::zero() } else { x }, |x, _| if x > S::zero() { S::one() } else { S::zero() })
    }

    pub fn square(&self) -> Tensor<S> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Tensor<S>> {
        if let Some(bad) = self.data().iter().find(|&&x| x < S::zero()) {
            return Err(Error::domain("sqrt", format!("negative argument {bad}")));
        }
        Ok(self.unary(S::sqrt, |_, y| S::lit(0.5) / y))
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-S::one())
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.unary(move |x| x + c, |_, _| S::one())
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: ({m},{k})·({},{n})", sb[0]),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &self.data(), (k, 1), &other.data(), (n, 1), S::zero(), &mut out, (n, 1));
        let (lhs, rhs) = (self.clone(), other.clone());
        let needs = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = needs.0.then(|| {
                    // dA = G·Bᵀ
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g, (n, 1), &rhs.data(), (1, n), S::zero(), &mut ga, (k, 1));
                    ga
                });
                let gb = needs.1.then(|| {
                    // dB = Aᵀ·G
                    let mut gb = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), &lhs.data(), (1, k), g, (n, 1), S::zero(), &mut gb, (n, 1));
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("shape {:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(&needs) {
                    grads.push(need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            gp.extend_from_slice(&g[start..start + w]);
                        }
                        gp
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        check_axis("narrow", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside extent {}", start + len, self.shape()[axis]),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![S::zero(); n_in];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers slices along axis 0 (indices may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<S>> {
        let n0 = self.shape()[0];
        if rows.is_empty() {
            return Err(Error::shape("select_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n0) {
            return Err(Error::shape("select_rows", format!("row {bad} out of range for extent {n0}")));
        }
        let row = self.numel() / n0;
        let mut data = Vec::with_capacity(rows.len() * row);
        {
            let x = self.data();
            for &r in rows {
                data.extend_from_slice(&x[r * row..(r + 1) * row]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows = rows.to_vec();
        let n_in = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![S::zero(); n_in];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..row {
                        gx[r * row + j] += g[i * row + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        check_axis("sum", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for j in 0..n {
                    let row = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![S::zero(); n_in];
                for o in 0..outer {
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean along `axis`.
    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        check_axis("mean", self.shape(), axis)?;
        let n = S::from_usize_lossy(self.shape()[axis]);
        Ok(self.sum(axis, keepdim)?.scale(S::one() / n))
    }

    /// Population (1/N) variance along `axis`.
    pub fn variance(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        let mu = self.mean(axis, true)?;
        let centered = self.sub(&mu)?;
        centered.square().mean(axis, keepdim)
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let n_in = self.numel();
        Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n_in])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_usize_lossy(self.numel());
        self.sum_all().scale(S::one() / n)
    }

    /// Normalized exponentials along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[at(j)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..n {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: S = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Logarithm of [`Tensor::softmax`], computed stably.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[at(j)]).fold(S::neg_infinity(), S::max);
                let lse = max + (0..n).map(|j| (out[at(j)] - max).exp()).sum::<S>().ln();
                for j in 0..n {
                    out[at(j)] = out[at(j)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let gsum: S = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Standardizes each row over the last axis: `(x - μ) / sqrt(σ² + eps)`.
    pub fn layer_norm(&self, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let rows = self.numel() / d;
        let dn = S::from_usize_lossy(d);
        let mut out = self.to_vec();
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![S::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<S>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / dn;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Multi-head scaled dot-product attention over a batch of sequences.
///
/// `q` is `(batch·tq, d)`, `k` and `v` are `(batch·tk, d)`; `d` is split
/// into `heads` contiguous slices. Returns the `(batch·tq, d)` output and
/// the attention probabilities laid out as `[batch][head][tq][tk]`.
pub fn scaled_dot_product_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    batch: usize,
) -> Result<(Tensor<S>, Vec<S>)> {
    let op = "scaled_dot_product_attention";
    for t in [q, k, v] {
        if t.ndim() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 operands, got {:?}", t.shape())));
        }
    }
    let d = q.shape()[1];
    if k.shape()[1] != d || v.shape() != k.shape() {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?} do not conform", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(op, format!("width {d} not divisible into {heads} heads")));
    }
    if batch == 0 || q.shape()[0] % batch != 0 || k.shape()[0] % batch != 0 {
        return Err(Error::shape(op, format!("row counts not divisible by batch {batch}")));
    }
    let (tq, tk, dh) = (q.shape()[0] / batch, k.shape()[0] / batch, d / heads);
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut probs = vec![S::zero(); batch * heads * tq * tk];
    let mut out = vec![S::zero(); batch * tq * d];
    {
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let qo = b * tq * d + h * dh;
                let ko = b * tk * d + h * dh;
                S::gemm(tq, dh, tk, scale, &qd[qo..], (d, 1), &kd[ko..], (1, d), S::zero(), p, (tk, 1));
                for row in p.chunks_mut(tk) {
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                S::gemm(tq, tk, dh, S::one(), p, (tk, 1), &vd[ko..], (d, 1), S::zero(), &mut out[qo..], (d, 1));
            }
        }
    }
    let saved = Rc::new(probs.clone());
    let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
    let out = Tensor::from_op(
        out,
        vec![batch * tq, d],
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, _| {
            let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
            let mut gq = vec![S::zero(); qd.len()];
            let mut gk = vec![S::zero(); kd.len()];
            let mut gv = vec![S::zero(); vd.len()];
            let mut dp = vec![S::zero(); tq * tk];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &saved[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                    let qo = b * tq * d + h * dh;
                    let ko = b * tk * d + h * dh;
                    // dV = Pᵀ·dO
                    S::gemm(tk, tq, dh, S::one(), p, (1, tk), &g[qo..], (d, 1), S::zero(), &mut gv[ko..], (d, 1));
                    // dP = dO·Vᵀ
                    S::gemm(tq, dh, tk, S::one(), &g[qo..], (d, 1), &vd[ko..], (1, d), S::zero(), &mut dp, (tk, 1));
                    for (dr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                        let dot: S = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    // dQ = dS·K, dK = dSᵀ·Q
                    S::gemm(tq, tk, dh, S::one(), &dp, (tk, 1), &kd[ko..], (d, 1), S::zero(), &mut gq[qo..], (d, 1));
                    S::gemm(tk, tq, dh, S::one(), &dp, (1, tk), &qd[qo..], (d, 1), S::zero(), &mut gk[ko..], (d, 1));
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    );
    Ok((out, probs))
}

/// 1-D convolution over channels-last input.
///
/// `x` is `(batch, len, c_in)`, `w` is `(kernel·c_in, c_out)` with row index
/// `tap·c_in + channel`. Each side is zero-padded by `pad`; the output is
/// `(batch, (len + 2·pad − kernel)/stride + 1, c_out)`.
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let op = "conv1d";
    if x.ndim() != 3 || w.ndim() != 2 {
        return Err(Error::shape(op, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    let (batch, len, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[1];
    if w.shape()[0] != kernel * c_in {
        return Err(Error::shape(
            op,
            format!("weight rows {} != kernel {kernel} × channels {c_in}", w.shape()[0]),
        ));
    }
    if stride == 0 || len + 2 * pad < kernel {
        return Err(Error::shape(op, format!("length {len} too short for kernel {kernel}")));
    }
    let l_out = (len + 2 * pad - kernel) / stride + 1;
    let width = kernel * c_in;
    let mut cols = vec![S::zero(); batch * l_out * width];
    {
        let xd = x.data();
        for b in 0..batch {
            for t in 0..l_out {
                let row = &mut cols[(b * l_out + t) * width..(b * l_out + t + 1) * width];
                for tap in 0..kernel {
                    let pos = (t * stride + tap) as isize - pad as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let src = (b * len + pos as usize) * c_in;
                    row[tap * c_in..(tap + 1) * c_in].copy_from_slice(&xd[src..src + c_in]);
                }
            }
        }
    }
    let rows = batch * l_out;
    let mut out = vec![S::zero(); rows * c_out];
    S::gemm(rows, width, c_out, S::one(), &cols, (width, 1), &w.data(), (c_out, 1), S::zero(), &mut out, (c_out, 1));
    let wc = w.clone();
    let needs = (x.requires_grad(), w.requires_grad());
    Ok(Tensor::from_op(
        out,
        vec![batch, l_out, c_out],
        vec![x.clone(), w.clone()],
        Box::new(move |g, _| {
            let gw = needs.1.then(|| {
                let mut gw = vec![S::zero(); width * c_out];
                S::gemm(width, rows, c_out, S::one(), &cols, (1, width), g, (c_out, 1), S::zero(), &mut gw, (c_out, 1));
                gw
            });
            let gx = needs.0.then(|| {
                let mut gcols = vec![S::zero(); rows * width];
                S::gemm(rows, c_out, width, S::one(), g, (c_out, 1), &wc.data(), (1, c_out), S::zero(), &mut gcols, (width, 1));
                let mut gx = vec![S::zero(); batch * len * c_in];
                for b in 0..batch {
                    for t in 0..l_out {
                        let row = &gcols[(b * l_out + t) * width..(b * l_out + t + 1) * width];
                        for tap in 0..kernel {
                            let pos = (t * stride + tap) as isize - pad as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let dst = (b * len + pos as usize) * c_in;
                            for c in 0..c_in {
                                gx[dst + c] += row[tap * c_in + c];
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, gw]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn leaf(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::leaf(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn concat_shape_arithmetic() {
        let a = Tensor::<f64>::zeros(&[3, 64]);
        let b = Tensor::<f64>::zeros(&[3, 8]);
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap().shape(), &[3, 72]);
        assert!(Tensor::concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let s = Tensor::<f64>::zeros(&[8]).softmax(0).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn matmul_rejects_nonconforming() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"), "{err}");
    }

    #[test]
    fn quadratic_gradient() {
        let w = leaf(&[1.0, 2.0, 3.0], &[3]);
        w.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = leaf(&[1.0, -2.0, 0.5], &[3]);
        let root = w.mul(&w).unwrap().exp().sum_all();
        root.backward().unwrap();
        let once = w.grad().unwrap();
        root.backward().unwrap();
        let twice = w.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_general_and_reduce() {
        let a = leaf(&[1.0, 2.0, 3.0], &[3, 1]);
        let b = leaf(&[10.0, 20.0], &[1, 2]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.to_vec(), vec![11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 3]);
        assert_eq!(b.grad().unwrap(), vec![3.0; 2]);
    }

    #[test]
    fn log_rejects_non_positive() {
        assert!(t(&[1.0, 0.0], &[2]).log().is_err());
    }

    #[test]
    fn reductions_keep_or_drop_axis() {
        let x = t(&[1.0, 3.0, 3.0, 1.0], &[2, 2]);
        let m = x.mean(0, false).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.to_vec(), vec![2.0, 2.0]);
        let v = x.variance(1, true).unwrap();
        assert_eq!(v.shape(), &[2, 1]);
        assert_eq!(v.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn conv1d_output_length() {
        let x = Tensor::<f64>::zeros(&[2, 4000, 1]);
        let w = Tensor::<f64>::zeros(&[10, 3]);
        assert_eq!(conv1d(&x, &w, 10, 8, 1).unwrap().shape(), &[2, 500, 3]);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1, 5, 1]);
        let w = t(&[1.0, -1.0, 2.0], &[3, 1]);
        let y = conv1d(&x, &w, 3, 2, 1).unwrap();
        // taps at positions -1..1, 1..3, 3..5
        assert_eq!(y.to_vec(), vec![0.0 * 1.0 - 1.0 + 2.0 * 2.0, 2.0 - 3.0 + 8.0, 4.0 - 5.0]);
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        let q = t(&(0..24).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>(), &[6, 4]);
        let (out, probs) = scaled_dot_product_attention(&q, &q, &q, 2, 2).unwrap();
        assert_eq!(out.shape(), &[6, 4]);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
