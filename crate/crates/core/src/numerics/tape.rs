//! Reverse-mode automatic differentiation over a closed set of tensor
//! primitives.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Gradients are
//! accumulated in that fixed order, which keeps results bit-reproducible.

use super::tensor::{matmul_into, softmax_in_place, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[.., m, k] · [k, n]`
    MatMul(Var, Var),
    /// `[B, m, k] · [B, k, n]`
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Right operand matches the trailing axes of the left one.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Swap of the last two axes.
    Transpose(Var),
    Reshape(Var),
    /// `[B, N, D] -> [B, D]`, mean over the middle axis.
    MeanTokens(Var),
    SumAll(Var),
    /// Mean softmax cross-entropy over rows of `[B, C]` logits.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Single-writer recording of a computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(op, value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, &[a, b], "matmul")
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        self.push(Op::BatchMatMul(a, b), out, &[a, b], "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let inner = bv.len();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o = *o + x;
            }
        }
        self.push(Op::AddBroadcast(a, b), out, &[a, b], "add_broadcast")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let f = T::from_f64(s);
        let out = self.value(a).map(|x| x * f);
        self.push(Op::Scale(a, s), out, &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), out, &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out, &[a], "sigmoid")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        self.push(Op::Softmax(a), out, &[a], "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let (mean, inv_std) = moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            out,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), out, &[a], "reshape")
    }

    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 {
            return Err(Error::shape("mean_tokens", s, &[]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = Tensor::zeros(&[b, d]);
        for i in 0..b {
            for t in 0..n {
                let src = &av.data()[(i * n + t) * d..(i * n + t + 1) * d];
                for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
            for o in out.row_mut(i) {
                *o = *o * inv;
            }
        }
        self.push(Op::MeanTokens(a), out, &[a], "mean_tokens")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside {c} classes")));
        }
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            total -= log_softmax_at(lv.row(i), y);
        }
        let out = Tensor::scalar(T::from_f64(total / labels.len() as f64));
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            out,
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(ls));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let bt = bv.transpose();
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    let da = Tensor::new(av.shape(), da).expect("shape");
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = Tensor::new(&[m, k], av.data().to_vec()).expect("shape").transpose();
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    let db = Tensor::new(bv.shape(), db).expect("shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.nodes[a.0].requires_grad {
                    let bt = bv.transpose();
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        matmul_into(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bt.data()[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let at = av.transpose();
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        matmul_into(
                            &at.data()[i * k * m..(i + 1) * k * m],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y).expect("shape"));
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let bshape = self.shape(*b).to_vec();
                    let inner: usize = bshape.iter().product();
                    let mut db = Tensor::zeros(&bshape);
                    for chunk in g.data().chunks(inner) {
                        for (d, &x) in db.data_mut().iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                let f = T::from_f64(*s);
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .zip_map(av, |x, v| if v > T::zero() { x } else { T::zero() })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |x, y| x * y * (T::one() - y)).expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot = drow.iter().zip(yrow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                    for (dx, &y) in drow.iter_mut().zip(yrow) {
                        *dx = y * (*dx - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = xv.cols();
                let dn = T::from_f64(d as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = Tensor::zeros(&[d]);
                let mut db = Tensor::zeros(&[d]);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = g.row(r);
                    let (mean, inv_std) = moments(row, *eps);
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().fold(T::zero(), |s, &v| s + v) / dn;
                    let m2 = dxhat.iter().zip(&xhat).fold(T::zero(), |s, (&a, &b)| s + a * b) / dn;
                    for j in 0..d {
                        dx.row_mut(r)[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                        dg.data_mut()[j] = dg.data()[j] + grow[j] * xhat[j];
                        db.data_mut()[j] = db.data()[j] + grow[j];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let d = g.reshape(self.shape(*a)).expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::MeanTokens(a) => {
                let s = self.shape(*a).to_vec();
                let (b, n, d) = (s[0], s[1], s[2]);
                let inv = T::from_f64(1.0 / n as f64);
                let mut da = Tensor::zeros(&s);
                for i in 0..b {
                    for t in 0..n {
                        let dst = &mut da.data_mut()[(i * n + t) * d..(i * n + t + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(g.row(i)) {
                            *o = x * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, g.data()[0]));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = lv.softmax_rows();
                for (i, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(i);
                    row[y] = row[y] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

/// `log softmax(row)[y]`, evaluated in f64 with max subtraction.
fn log_softmax_at<T: Scalar>(row: &[T], y: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[y].as_f64() - lse
}

/// Row-wise softmax helper for plain slices.
pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T]) {
    softmax_in_place(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Central differences of `f` around every entry of `inputs[which]`.
    fn finite_diff(inputs: &[Tensor<f64>], which: usize, h: f64, f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Tensor<f64> {
        let mut out = Tensor::zeros(inputs[which].shape());
        for k in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            out.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, rel: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            assert!(
                err <= 1e-8 || err / scale <= rel,
                "analytic {a} vs numeric {n} (err {err})"
            );
        }
    }

    /// Builds the loss on a fresh tape, then compares every input gradient
    /// to finite differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let numeric = finite_diff(&inputs, i, 1e-4, &eval);
            assert_close(grads.get(*v).unwrap(), &numeric, 1e-5);
        }
    }

    /// Weighted sum so every output entry contributes a distinct gradient.
    fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let shape = tape.shape(v).to_vec();
        let w = Rng::new(seed).normal_tensor(&shape, 1.0);
        let w = tape.constant(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn half_square_gives_identity() {
        let xv = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn grad_matmul() {
        let mut rng = Rng::new(10);
        check(
            vec![rng.normal_tensor(&[2, 3, 4], 1.0), rng.normal_tensor(&[4, 2], 1.0)],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                probe(t, y, 1)
            },
        );
    }

    #[test]
    fn grad_bmm_transpose() {
        let mut rng = Rng::new(11);
        check(
            vec![rng.normal_tensor(&[2, 3, 4], 1.0), rng.normal_tensor(&[2, 3, 2], 1.0)],
            |t, v| {
                let at = t.transpose(v[0]).unwrap();
                let y = t.bmm(at, v[1]).unwrap();
                probe(t, y, 2)
            },
        );
    }

    #[test]
    fn grad_elementwise() {
        let mut rng = Rng::new(12);
        check(
            vec![
                rng.normal_tensor(&[3, 4], 1.0),
                rng.normal_tensor(&[3, 4], 1.0),
                rng.normal_tensor(&[4], 1.0),
            ],
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let m = t.mul(a, v[0]).unwrap();
                let s = t.sub(m, v[1]).unwrap();
                let b = t.add_broadcast(s, v[2]).unwrap();
                let sc = t.scale(b, 0.7).unwrap();
                let sg = t.sigmoid(sc).unwrap();
                probe(t, sg, 3)
            },
        );
    }

    #[test]
    fn grad_relu_away_from_kink() {
        // Inputs kept at |x| >= 0.1 so finite differences never cross zero.
        let mut rng = Rng::new(13);
        let x = rng
            .normal_tensor::<f64>(&[4, 4], 1.0)
            .map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        check(vec![x], |t, v| {
            let r = t.relu(v[0]).unwrap();
            probe(t, r, 4)
        });
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut rng = Rng::new(14);
        check(
            vec![
                rng.normal_tensor(&[3, 5], 1.0),
                rng.normal_tensor(&[5], 1.0),
                rng.normal_tensor(&[5], 1.0),
            ],
            |t, v| {
                let ln = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let s = t.softmax(ln).unwrap();
                probe(t, s, 5)
            },
        );
    }

    #[test]
    fn grad_reductions_and_reshape() {
        let mut rng = Rng::new(15);
        check(vec![rng.normal_tensor(&[2, 3, 4], 1.0)], |t, v| {
            let m = t.mean_tokens(v[0]).unwrap();
            let r = t.reshape(m, &[8]).unwrap();
            let p = probe(t, r, 6);
            let mm = t.mean(v[0]).unwrap();
            t.add(p, mm).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = Rng::new(16);
        check(vec![rng.normal_tensor(&[4, 3], 2.0)], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn grad_composite_network() {
        // matmul -> layernorm -> relu -> matmul -> softmax -> cross-entropy.
        let mut rng = Rng::new(17);
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let w1 = rng.normal_tensor(&[3, 5], 0.7);
        let w2 = rng.normal_tensor(&[5, 3], 0.7);
        let g = rng.normal_tensor(&[5], 1.0).map(|v: f64| 1.0 + 0.1 * v);
        let b = rng.normal_tensor(&[5], 0.1);
        check(vec![x, w1, w2, g, b], |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.layer_norm(h, v[3], v[4], 1e-5).unwrap();
            let h = t.relu(h).unwrap();
            let o = t.matmul(h, v[2]).unwrap();
            let s = t.softmax(o).unwrap();
            let s = t.scale(s, 3.0).unwrap();
            t.cross_entropy(s, &[1, 0, 2, 1]).unwrap()
        });
    }

    #[test]
    fn cross_entropy_finite_for_extreme_logits() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(Tensor::new(&[1, 2], vec![1e4, -1e4]).unwrap());
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce).is_finite());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(18);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(rng.normal_tensor(&[8, 6], 1.0));
            let w = tape.leaf(rng.normal_tensor(&[6, 6], 1.0));
            let h = tape.matmul(x, w).unwrap();
            let h2 = tape.matmul(h, w).unwrap();
            let s = tape.softmax(h2).unwrap();
            let l = tape.cross_entropy(s, &[0, 1, 2, 3, 4, 5, 0, 1]).unwrap();
            tape.backward(l).unwrap().get(w).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
