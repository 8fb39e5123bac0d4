use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nnet::ParamStore;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |n| vec![T::zero(); n];
        AdamState {
            t: 0,
            m: store.iter().map(|(_, p)| zeros(p.numel())).collect(),
            v: store.iter().map(|(_, p)| zeros(p.numel())).collect(),
        }
    }
}

/// One AdamW update from the gradients held in `store`: decoupled decay
/// `w ← w − lr·wd·w`, then the bias-corrected Adam step. Frozen parameters
/// and their moments are left untouched.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamWConfig) -> Result<()> {
    contract!(
        state.m.len() == store.len() && state.v.len() == store.len(),
        "optimizer state holds {} tensors, registry has {}",
        state.m.len(),
        store.len()
    );
    state.t += 1;
    let t = state.t as i32;
    let lr = T::of(cfg.lr);
    let decay = T::of(cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let eps = T::of(cfg.eps);
    for (id, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let (w, g) = p.split_mut();
        contract!(
            m.len() == w.len() && g.len() == w.len(),
            "{}: state/gradient size mismatch",
            p.name
        );
        for i in 0..w.len() {
            w[i] = w[i] - decay * w[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
