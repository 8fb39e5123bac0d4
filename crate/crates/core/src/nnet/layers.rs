//! Transformer building blocks over a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nnet::{ParamId, ParamStore, Tape, Tensor, Value};
use crate::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2 std, drawn in `f64`.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), group, trunc_normal(rng, &[inp, out], INIT_STD)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[out])),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let tape = x.tape();
        x.matmul(&tape.param(store, self.weight))?
            .add_broadcast(&tape.param(store, self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, dim: usize) -> Self {
        let ones = Tensor::new(vec![dim], vec![T::one(); dim]).expect("shape matches");
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), group, ones),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let tape = x.tape();
        x.layer_norm(&tape.param(store, self.gamma), &tape.param(store, self.beta))
    }
}

/// Global multi-head self-attention over `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Attention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), group, dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), group, dim, dim),
            heads,
            dim,
        }
    }

    fn qkv<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<[Value<T>; 3]> {
        let qkv = self.qkv.forward(store, x)?;
        Ok([
            qkv.split_heads(0, self.heads)?,
            qkv.split_heads(1, self.heads)?,
            qkv.split_heads(2, self.heads)?,
        ])
    }

    fn probs<T: Scalar>(&self, q: &Value<T>, k: &Value<T>) -> Result<Value<T>> {
        let scale = T::of(1.0 / ((self.dim / self.heads) as f64).sqrt());
        q.bmm(k, true)?.scale(scale)?.softmax()
    }

    /// Attention weights `[B·H, N, N]`.
    pub fn attention_probs<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let [q, k, _] = self.qkv(store, x)?;
        self.probs(&q, &k)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let [q, k, v] = self.qkv(store, x)?;
        let out = self.probs(&q, &k)?.bmm(&v, false)?.merge_heads(self.heads)?;
        self.proj.forward(store, &out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let h = self.fc1.forward(store, x)?.gelu()?;
        self.fc2.forward(store, &h)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), group, dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), group, dim, dim * mlp_ratio),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Value<T>) -> Result<Value<T>> {
        let x = x.add(&self.attn.forward(store, &self.norm1.forward(store, x)?)?)?;
        x.add(&self.mlp.forward(store, &self.norm2.forward(store, &x)?)?)
    }
}

/// Tape-free convenience: runs `f` on a fresh tape and returns the result.
pub fn eval<T: Scalar>(f: impl FnOnce(&Tape<T>) -> Result<Value<T>>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(f(&tape)?.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = trunc_normal(&mut rng, &[4000], INIT_STD);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 4000.0;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn linear_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "l", "g", 3, 2);
        store.set_data(lin.bias, &[0.5, -0.25]).unwrap();
        let x = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let y = eval(|tape| lin.forward(&store, &tape.constant(Tensor::new(vec![2, 3], x.to_vec())?))).unwrap();
        let w = store.get(lin.weight).data();
        let b = store.get(lin.bias).data();
        for r in 0..2 {
            for c in 0..2 {
                let mut s = b[c];
                for k in 0..3 {
                    s += x[r * 3 + k] * w[k * 2 + c];
                }
                assert!((y.data()[r * 2 + c] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, &mut rng, "a", "g", 8, 2);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[2, 5, 8], 1.0);
        let p = eval(|tape| attn.attention_probs(&store, &tape.constant(x.clone()))).unwrap();
        assert_eq!(p.shape(), &[4, 5, 5]);
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
