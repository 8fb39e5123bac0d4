use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nnet::{Tape, Tensor, Value};
use crate::rig::BlendRig;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the mesh L1 term.
    pub lambda_mesh: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_mesh: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mesh.is_finite() && self.lambda_mesh >= 0.0) {
            return Err(Error::Invalid(format!(
                "lambda_mesh must be finite and >= 0, got {}",
                self.lambda_mesh
            )));
        }
        Ok(())
    }
}

/// The rig as tape constants: `mesh = p · Δ + neutral`, flattened to `3V`.
#[derive(Clone, Debug)]
pub struct RigOperator<T> {
    delta: Tensor<T>,
    neutral: Tensor<T>,
}

impl<T: Scalar> RigOperator<T> {
    pub fn new(rig: &BlendRig<f64>) -> Self {
        let k = rig.control_count();
        let n = 3 * rig.vertex_count();
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
        RigOperator {
            delta: Tensor::new(vec![k, n], cast(rig.delta_matrix())).expect("K×3V"),
            neutral: Tensor::new(vec![n], cast(rig.neutral_flat())).expect("3V"),
        }
    }

    pub fn controls(&self) -> usize {
        self.delta.shape()[0]
    }

    /// `[B, K]` → flattened meshes `[B, 3V]`.
    pub fn forward(&self, p: &Value<T>) -> Result<Value<T>> {
        let tape = p.tape();
        p.matmul(&tape.constant(self.delta.clone()))?
            .add_broadcast(&tape.constant(self.neutral.clone()))
    }
}

/// Recorded loss with both terms; the terms are unweighted.
pub struct LossTerms<T> {
    pub total: Value<T>,
    pub mse: f64,
    pub mesh: f64,
}

/// `mean((p̂ − p)²) + λ · mean|rig(p̂) − rig(p)|`, both means taken over the
/// batch and over every coordinate.
pub fn loss<T: Scalar>(
    pred: &Value<T>,
    target: &Tensor<T>,
    rig: &RigOperator<T>,
    cfg: &LossConfig,
) -> Result<LossTerms<T>> {
    cfg.validate()?;
    let shape = pred.shape();
    contract!(
        shape.len() == 2 && shape[1] == rig.controls() && target.shape() == shape.as_slice(),
        "prediction {shape:?} and target {:?} must both be [B, {}]",
        target.shape(),
        rig.controls()
    );
    if pred.data().iter().chain(target.data()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite rig parameters in loss".into()));
    }
    let tape = pred.tape();
    let p = tape.constant(target.clone());
    let mse = pred.sub(&p)?.square()?.mean()?;
    let mesh = rig.forward(pred)?.sub(&rig.forward(&p)?)?.abs()?.mean()?;
    let total = mse.add(&mesh.scale(T::of(cfg.lambda_mesh))?)?;
    Ok(LossTerms {
        mse: mse.item()?.f64(),
        mesh: mesh.item()?.f64(),
        total,
    })
}

/// Loss value and its gradient with respect to a single prediction.
pub fn loss_and_grad(
    p_hat: &[f64],
    p: &[f64],
    rig: &BlendRig<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let k = rig.control_count();
    contract!(
        p_hat.len() == k && p.len() == k,
        "expected {k} parameters, got {} and {}",
        p_hat.len(),
        p.len()
    );
    let tape = Tape::new();
    let x = tape.var(Tensor::new(vec![1, k], p_hat.to_vec())?);
    let terms = loss(&x, &Tensor::new(vec![1, k], p.to_vec())?, &RigOperator::new(rig), cfg)?;
    let g = terms.total.backward()?;
    Ok((terms.total.item()?, g.get(&x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; k])))
}
