//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order; `backward` sweeps it once in reverse. Nodes whose
//! inputs carry no gradient (constants, frozen parameters) are skipped.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::nnet::params::{ParamId, ParamStore};
use crate::nnet::Tensor;
use crate::scalar::{gemm, Strides};
use crate::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x + y` with `y` broadcast over the leading axes of `x`.
    AddBroadcast(usize, usize),
    Scale(usize, T),
    Square(usize),
    Abs(usize),
    Reshape(usize),
    /// `x[.., K] · w[K, N]`.
    MatMul(usize, usize),
    /// Per-batch `a[M, K] · b[K, N]`, or `a · bᵀ` with `b[N, K]`.
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    SplitHeads {
        x: usize,
        part: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    MeanTokens(usize),
    Concat(usize, usize),
    Mean(usize),
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records operations for one forward pass.
#[derive(Clone)]
pub struct Tape<T> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone)]
pub struct Value<T> {
    tape: Tape<T>,
    id: usize,
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Vec<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Value<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Value {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Value<T> {
        self.push(t, Op::Leaf, false, None)
    }

    /// Leaf whose gradient is reported by [`Value::backward`].
    pub fn var(&self, t: Tensor<T>) -> Value<T> {
        self.push(t, Op::Leaf, true, None)
    }

    /// Leaf bound to a registry parameter; tracked only when trainable.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Value<T> {
        let p = store.get(id);
        self.push(p.tensor().clone(), Op::Leaf, p.trainable, Some(id))
    }

    /// Argmax selections of every max-pool on the tape, in recording order.
    pub fn pool_choices(&self) -> Vec<usize> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::MaxPool2 { argmax, .. } = &n.op {
                out.extend_from_slice(argmax);
            }
        }
        out
    }

    fn same_tape(&self, other: &Value<T>) -> Result<()> {
        contract!(
            Rc::ptr_eq(&self.nodes, &other.tape.nodes),
            "values belong to different tapes"
        );
        Ok(())
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(s) => {
            for (a, b) in s.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let x3 = x * x * x;
    let t = (c * (x + k * x3)).tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Value<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tensor(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        contract!(v.numel() == 1, "item() on tensor of shape {:?}", v.shape());
        Ok(v.data()[0])
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    fn unary(&self, f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>) -> Result<Value<T>> {
        let (out, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (out, op) = f(&n.value)?;
            (out, op, n.requires_grad)
        };
        Ok(self.tape.push(out, op, rg, None))
    }

    fn binary(
        &self,
        other: &Value<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Value<T>> {
        self.tape.same_tape(other)?;
        let (out, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (out, op) = f(&a.value, &b.value)?;
            (out, op, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out, op, rg, None))
    }

    fn zip(&self, other: &Value<T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Value<T>> {
        self.binary(other, |a, b| {
            contract!(a.shape() == b.shape(), "shape mismatch {:?} vs {:?}", a.shape(), b.shape());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, op))
        })
    }

    fn map(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Value<T>> {
        self.unary(|a| {
            let data = a.data().iter().map(|&x| f(x)).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, op))
        })
    }

    pub fn add(&self, o: &Value<T>) -> Result<Value<T>> {
        self.zip(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(&self, o: &Value<T>) -> Result<Value<T>> {
        self.zip(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(&self, o: &Value<T>) -> Result<Value<T>> {
        self.zip(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    /// `self + y` where `y`'s shape equals the trailing axes of `self`.
    pub fn add_broadcast(&self, y: &Value<T>) -> Result<Value<T>> {
        let (xi, yi) = (self.id, y.id);
        self.binary(y, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            contract!(
                sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
                "cannot broadcast {sb:?} onto {sa:?}"
            );
            let m = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data()[i % m])
                .collect();
            Ok((Tensor::new(sa.to_vec(), data)?, Op::AddBroadcast(xi, yi)))
        })
    }

    pub fn scale(&self, c: T) -> Result<Value<T>> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn square(&self) -> Result<Value<T>> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn abs(&self) -> Result<Value<T>> {
        self.map(Op::Abs(self.id), |x| x.abs())
    }

    pub fn gelu(&self) -> Result<Value<T>> {
        self.map(Op::Gelu(self.id), |x| gelu(x).0)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|a| Ok((a.clone().reshape(shape.to_vec())?, Op::Reshape(id))))
    }

    /// `self[.., K] · w[K, N]`, leading axes kept.
    pub fn matmul(&self, w: &Value<T>) -> Result<Value<T>> {
        let (xi, wi) = (self.id, w.id);
        self.binary(w, |x, w| {
            let (sx, sw) = (x.shape(), w.shape());
            contract!(
                sw.len() == 2 && !sx.is_empty() && sx[sx.len() - 1] == sw[0],
                "matmul shape mismatch {sx:?} · {sw:?}"
            );
            let (k, n) = (sw[0], sw[1]);
            let r = x.numel() / k;
            let mut out = vec![T::zero(); r * n];
            gemm(r, k, n, x.data(), Strides::row_major(k), w.data(), Strides::row_major(n), T::zero(), &mut out);
            let mut shape = sx.to_vec();
            *shape.last_mut().unwrap() = n;
            Ok((Tensor::new(shape, out)?, Op::MatMul(xi, wi)))
        })
    }

    /// Batched `self[B, M, K] · b[B, K, N]`; with `trans_b`, `b` is `[B, N, K]`
    /// and the product is `self · bᵀ`.
    pub fn bmm(&self, b: &Value<T>, trans_b: bool) -> Result<Value<T>> {
        let (ai, bi) = (self.id, b.id);
        self.binary(b, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            contract!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shape mismatch {sa:?} · {sb:?}");
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            contract!(k == kb, "bmm inner dims differ: {sa:?} · {sb:?} (trans_b={trans_b})");
            let mut out = vec![T::zero(); bs * m * n];
            let sb_strides = if trans_b { Strides::transposed(k) } else { Strides::row_major(n) };
            out.par_chunks_mut((m * n).max(1)).enumerate().for_each(|(i, o)| {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    Strides::row_major(k),
                    &b.data()[i * k * n..(i + 1) * k * n],
                    sb_strides,
                    T::zero(),
                    o,
                );
            });
            Ok((Tensor::new(vec![bs, m, n], out)?, Op::Bmm { a: ai, b: bi, trans_b }))
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|a| {
            let d = *a.shape().last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(d) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Ok((Tensor::new(a.shape().to_vec(), out)?, Op::Softmax(id)))
        })
    }

    /// Normalizes the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Value<T>, beta: &Value<T>) -> Result<Value<T>> {
        self.tape.same_tape(gamma)?;
        self.tape.same_tape(beta)?;
        let (out, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let d = *x.value.shape().last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
            contract!(
                g.value.shape() == [d] && b.value.shape() == [d],
                "layer_norm params must be [{d}]"
            );
            let eps = T::of(LAYER_NORM_EPS);
            let dn = T::of(d as f64);
            let rows = x.value.numel() / d;
            let mut xhat = Vec::with_capacity(x.value.numel());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.value.numel());
            for row in x.value.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.value.data()[j] + b.value.data()[j]);
                }
            }
            let op = Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            };
            (
                Tensor::new(x.value.shape().to_vec(), out)?,
                op,
                x.requires_grad || g.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(out, op, rg, None))
    }

    /// `[B, N, 3D]` → one of q/k/v (`part` 0/1/2) as `[B·H, N, D/H]`.
    pub fn split_heads(&self, part: usize, heads: usize) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            contract!(s.len() == 3 && part < 3, "split_heads expects [B, N, 3D], got {s:?}");
            let (b, n, d3) = (s[0], s[1], s[2]);
            contract!(d3 % (3 * heads) == 0, "width {d3} not divisible by 3·{heads}");
            let d = d3 / 3;
            let dh = d / heads;
            let mut out = Vec::with_capacity(b * n * d);
            for bi in 0..b {
                for h in 0..heads {
                    for t in 0..n {
                        let base = (bi * n + t) * d3 + part * d + h * dh;
                        out.extend_from_slice(&x.data()[base..base + dh]);
                    }
                }
            }
            Ok((Tensor::new(vec![b * heads, n, dh], out)?, Op::SplitHeads { x: id, part, heads }))
        })
    }

    /// `[B·H, N, Dh]` → `[B, N, H·Dh]`.
    pub fn merge_heads(&self, heads: usize) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            contract!(s.len() == 3 && s[0] % heads == 0, "merge_heads expects [B·H, N, Dh], got {s:?}");
            let (b, n, dh) = (s[0] / heads, s[1], s[2]);
            let d = heads * dh;
            let mut out = vec![T::zero(); b * n * d];
            for bi in 0..b {
                for h in 0..heads {
                    for t in 0..n {
                        let src = ((bi * heads + h) * n + t) * dh;
                        let dst = (bi * n + t) * d + h * dh;
                        out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
                    }
                }
            }
            Ok((Tensor::new(vec![b, n, d], out)?, Op::MergeHeads { x: id, heads }))
        })
    }

    /// 2×2 max-pool over a `[B, gh·gw, D]` token grid stored row-major.
    pub fn max_pool2(&self, gh: usize, gw: usize) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            contract!(
                s.len() == 3 && s[1] == gh * gw && gh.is_multiple_of(2) && gw.is_multiple_of(2),
                "max_pool2 expects [B, {gh}·{gw}, D] with even grid, got {s:?}"
            );
            let (b, d) = (s[0], s[2]);
            let (oh, ow) = (gh / 2, gw / 2);
            let mut out = Vec::with_capacity(b * oh * ow * d);
            let mut argmax = Vec::with_capacity(b * oh * ow * d);
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for c in 0..d {
                            let mut best = usize::MAX;
                            let mut bv = T::neg_infinity();
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let idx = (bi * gh * gw + (2 * oy + dy) * gw + 2 * ox + dx) * d + c;
                                let v = x.data()[idx];
                                if best == usize::MAX || v > bv {
                                    best = idx;
                                    bv = v;
                                }
                            }
                            out.push(bv);
                            argmax.push(best);
                        }
                    }
                }
            }
            Ok((Tensor::new(vec![b, oh * ow, d], out)?, Op::MaxPool2 { x: id, argmax }))
        })
    }

    /// Mean over the token axis: `[B, N, D]` → `[B, D]`.
    pub fn mean_tokens(&self) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            contract!(s.len() == 3 && s[1] > 0, "mean_tokens expects [B, N, D], got {s:?}");
            let (b, n, d) = (s[0], s[1], s[2]);
            let inv = T::one() / T::of(n as f64);
            let mut out = vec![T::zero(); b * d];
            for bi in 0..b {
                for t in 0..n {
                    let row = &x.data()[(bi * n + t) * d..(bi * n + t + 1) * d];
                    for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
            Ok((Tensor::new(vec![b, d], out)?, Op::MeanTokens(id)))
        })
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&self, o: &Value<T>) -> Result<Value<T>> {
        let (ai, bi) = (self.id, o.id);
        self.binary(o, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            contract!(
                !sa.is_empty() && sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1],
                "concat shape mismatch {sa:?} vs {sb:?}"
            );
            let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
            let rows = a.numel() / da.max(1);
            let mut out = Vec::with_capacity(a.numel() + b.numel());
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
                out.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = da + db;
            Ok((Tensor::new(shape, out)?, Op::Concat(ai, bi)))
        })
    }

    pub fn mean(&self) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|a| {
            contract!(a.numel() > 0, "mean of empty tensor");
            let s = a.data().iter().copied().sum::<T>() / T::of(a.numel() as f64);
            Ok((Tensor::scalar(s), Op::Mean(id)))
        })
    }

    pub fn sum(&self) -> Result<Value<T>> {
        let id = self.id;
        self.unary(|a| Ok((Tensor::scalar(a.data().iter().copied().sum()), Op::Sum(id))))
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        contract!(
            nodes[self.id].value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[self.id].value.shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();
        let mut params = Vec::new();

        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        params.push((p, i));
                    }
                    leaves.insert(i, g);
                }
                Op::Add(a, b) => {
                    if rg(*b) {
                        acc(&mut grads[*b], g.clone());
                    }
                    if rg(*a) {
                        acc(&mut grads[*a], g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        acc(&mut grads[*b], g.iter().map(|&v| -v).collect());
                    }
                    if rg(*a) {
                        acc(&mut grads[*a], g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let gb = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads[*a], gb);
                    }
                    if rg(*b) {
                        let ga = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads[*b], ga);
                    }
                }
                Op::AddBroadcast(x, y) => {
                    if rg(*y) {
                        let m = val(*y).numel();
                        let mut gy = vec![T::zero(); m];
                        for (k, &v) in g.iter().enumerate() {
                            gy[k % m] = gy[k % m] + v;
                        }
                        acc(&mut grads[*y], gy);
                    }
                    if rg(*x) {
                        acc(&mut grads[*x], g);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads[*a], g.iter().map(|&v| v * *c).collect()),
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let ga = g.iter().zip(val(*a).data()).map(|(&v, &x)| v * two * x).collect();
                    acc(&mut grads[*a], ga);
                }
                Op::Abs(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&v, &x)| {
                            if x > T::zero() {
                                v
                            } else if x < T::zero() {
                                -v
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc(&mut grads[*a], ga);
                }
                Op::Gelu(a) => {
                    let ga = g.iter().zip(val(*a).data()).map(|(&v, &x)| v * gelu(x).1).collect();
                    acc(&mut grads[*a], ga);
                }
                Op::Reshape(a) => acc(&mut grads[*a], g),
                Op::MatMul(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let r = xv.numel() / k;
                    if rg(*w) {
                        let mut gw = vec![T::zero(); k * n];
                        gemm(k, r, n, xv.data(), Strides::transposed(k), &g, Strides::row_major(n), T::zero(), &mut gw);
                        acc(&mut grads[*w], gw);
                    }
                    if rg(*x) {
                        let mut gx = vec![T::zero(); r * k];
                        gemm(r, n, k, &g, Strides::row_major(n), wv.data(), Strides::transposed(n), T::zero(), &mut gx);
                        acc(&mut grads[*x], gx);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                    if rg(*a) {
                        // dA = G · Bᵀ (or G · B when B is stored transposed)
                        let mut ga = vec![T::zero(); bs * m * k];
                        let sb = if *trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                        ga.par_chunks_mut((m * k).max(1)).enumerate().for_each(|(i, o)| {
                            gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], Strides::row_major(n),
                                &bv.data()[i * k * n..(i + 1) * k * n], sb, T::zero(), o);
                        });
                        acc(&mut grads[*a], ga);
                    }
                    if rg(*b) {
                        let mut gb = vec![T::zero(); bs * k * n];
                        gb.par_chunks_mut((k * n).max(1)).enumerate().for_each(|(i, o)| {
                            let (ad, gd) = (&av.data()[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n]);
                            if *trans_b {
                                // dB[N, K] = Gᵀ · A
                                gemm(n, m, k, gd, Strides::transposed(n), ad, Strides::row_major(k), T::zero(), o);
                            } else {
                                // dB[K, N] = Aᵀ · G
                                gemm(k, m, n, ad, Strides::transposed(k), gd, Strides::row_major(n), T::zero(), o);
                            }
                        });
                        acc(&mut grads[*b], gb);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut ga = vec![T::zero(); y.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dotp: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dotp);
                        }
                    }
                    acc(&mut grads[*a], ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = val(*gamma).data();
                    let d = gv.len();
                    let dn = T::of(d as f64);
                    if rg(*gamma) {
                        let mut gg = vec![T::zero(); d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] = gg[j] + gr[j] * hr[j];
                            }
                        }
                        acc(&mut grads[*gamma], gg);
                    }
                    if rg(*beta) {
                        let mut gb = vec![T::zero(); d];
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                gb[j] = gb[j] + gr[j];
                            }
                        }
                        acc(&mut grads[*beta], gb);
                    }
                    if rg(*x) {
                        let mut gx = vec![T::zero(); g.len()];
                        for (r, ((gr, hr), out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * hr[j];
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for j in 0..d {
                                out[j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                            }
                        }
                        acc(&mut grads[*x], gx);
                    }
                }
                Op::SplitHeads { x, part, heads } => {
                    let s = val(*x).shape();
                    let (b, n, d3) = (s[0], s[1], s[2]);
                    let d = d3 / 3;
                    let dh = d / heads;
                    let mut gx = vec![T::zero(); b * n * d3];
                    let mut src = 0;
                    for bi in 0..b {
                        for h in 0..*heads {
                            for t in 0..n {
                                let base = (bi * n + t) * d3 + part * d + h * dh;
                                gx[base..base + dh].copy_from_slice(&g[src..src + dh]);
                                src += dh;
                            }
                        }
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::MergeHeads { x, heads } => {
                    let s = val(*x).shape();
                    let (b, n, dh) = (s[0] / heads, s[1], s[2]);
                    let d = heads * dh;
                    let mut gx = vec![T::zero(); s[0] * n * dh];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for t in 0..n {
                                let dst = ((bi * heads + h) * n + t) * dh;
                                let src = (bi * n + t) * d + h * dh;
                                gx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = vec![T::zero(); val(*x).numel()];
                    for (&idx, &v) in argmax.iter().zip(&g) {
                        gx[idx] = gx[idx] + v;
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::MeanTokens(x) => {
                    let s = val(*x).shape();
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let inv = T::one() / T::of(n as f64);
                    let mut gx = Vec::with_capacity(b * n * d);
                    for bi in 0..b {
                        for _ in 0..n {
                            gx.extend(g[bi * d..(bi + 1) * d].iter().map(|&v| v * inv));
                        }
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::Concat(a, b) => {
                    let da = *val(*a).shape().last().unwrap();
                    let db = *val(*b).shape().last().unwrap();
                    let rows = g.len() / (da + db).max(1);
                    if rg(*a) {
                        let mut ga = Vec::with_capacity(rows * da);
                        for r in 0..rows {
                            ga.extend_from_slice(&g[r * (da + db)..r * (da + db) + da]);
                        }
                        acc(&mut grads[*a], ga);
                    }
                    if rg(*b) {
                        let mut gb = Vec::with_capacity(rows * db);
                        for r in 0..rows {
                            gb.extend_from_slice(&g[r * (da + db) + da..(r + 1) * (da + db)]);
                        }
                        acc(&mut grads[*b], gb);
                    }
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    let v = g[0] / T::of(n as f64);
                    acc(&mut grads[*a], vec![v; n]);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads[*a], vec![g[0]; n]);
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, `None` if it did not influence the loss.
    pub fn get(&self, v: &Value<T>) -> Option<&[T]> {
        self.leaves.get(&v.id).map(|g| g.as_slice())
    }

    /// `(parameter, gradient)` pairs for every tracked parameter leaf.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .map(move |&(p, node)| (p, self.leaves[&node].as_slice()))
    }
}

/// Back-propagates `loss` and adds the parameter gradients into `store`.
/// Calling it twice without [`ParamStore::zero_grad`] accumulates.
pub fn backward<T: Scalar>(loss: &Value<T>, store: &mut ParamStore<T>) -> Result<()> {
    let grads = loss.backward()?;
    store.accumulate(&grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::gradcheck::check_op;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_w() {
        let w = [0.3, -1.25, 2.0, 0.0];
        let tape = Tape::new();
        let v = tape.var(t(&[4], &w));
        let g = v.mul(&v).unwrap().sum().unwrap().backward().unwrap();
        let expect: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.get(&v).unwrap(), expect.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", "g", t(&[3], &[1.0, -2.0, 0.5]));
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = w.square().unwrap().sum().unwrap();
        backward(&loss, &mut store).unwrap();
        let once = store.get(id).grad().to_vec();
        backward(&loss, &mut store).unwrap();
        let twice: Vec<f64> = once.iter().map(|g| 2.0 * g).collect();
        assert_eq!(store.get(id).grad(), twice.as_slice());
        store.zero_grad();
        assert!(store.get(id).grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", "g", t(&[2], &[1.0, 2.0]));
        store.set_group_trainable("g", false).unwrap();
        let tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(!w.requires_grad());
        backward(&w.sum().unwrap(), &mut store).unwrap();
        assert_eq!(store.get(id).grad(), &[0.0, 0.0]);
        assert!(matches!(store.set_group_trainable("nope", true), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn contract_violations_are_rejected() {
        let tape = Tape::new();
        let a = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(a.backward(), Err(Error::Contract(_))));
        let b = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(a.add(&b).is_err());
        assert!(a.matmul(&b).is_err());
        let other = Tape::new().var(t(&[2], &[0.0, 0.0]));
        assert!(a.add(&other).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1000.0, 999.0, -5.0, 0.1, 0.2, 0.3]));
        let y = x.softmax().unwrap().data();
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let tape = Tape::new();
        // 4x4 grid, one channel
        let x = tape.constant(t(&[1, 16, 1], &(0..16).map(|i| i as f64).collect::<Vec<_>>()));
        assert_eq!(x.max_pool2(4, 4).unwrap().data(), vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[-2.0, 0.0, 3.0]));
        let g = x.abs().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn three_layer_mlp_gradcheck() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut r = |s: &[usize]| {
            let n: usize = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = vec![r(&[4, 5]), r(&[5, 8]), r(&[8]), r(&[8, 6]), r(&[6]), r(&[6, 3]), r(&[3])];
        let rep = check_op("mlp", inputs, 9, 1e-4, |v| {
            let h1 = v[0].matmul(&v[1])?.add_broadcast(&v[2])?.gelu()?;
            let h2 = h1.matmul(&v[3])?.add_broadcast(&v[4])?.gelu()?;
            h2.matmul(&v[5])?.add_broadcast(&v[6])
        })
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }
}
