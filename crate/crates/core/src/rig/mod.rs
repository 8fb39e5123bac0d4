//! The programmatic blendshape rig.
//!
//! Mesh positions are an affine function of the control vector:
//! `positions = neutral + Σᵢ p[i]·deltas[i]`. There are no corrective shapes
//! and no clamping, so the Jacobian is the delta basis itself.

mod manifest;
mod mesh;
pub mod obj;
pub mod procedural;
mod rigid;

use std::collections::HashSet;

pub use manifest::{load_rig, save_rig, RigManifest, TargetEntry};
pub use mesh::TriMesh;
pub use rigid::{sample_rigid, sample_rigid_parts, RigidConfig, RigidSample, RigidTransform};

use crate::error::{contract, Error, Result};
use crate::geom::{self, Vec3};
use crate::{Scalar, NUM_CONTROLS};

/// The control vector predicted by the regressor and decoded by the rig.
#[derive(Clone, Debug, PartialEq)]
pub struct RigParams<T> {
    values: Vec<T>,
}

impl<T: Scalar> RigParams<T> {
    /// Wraps exactly [`NUM_CONTROLS`] finite values.
    pub fn new(values: Vec<T>) -> Result<Self> {
        contract!(
            values.len() == NUM_CONTROLS,
            "rig params must have {NUM_CONTROLS} entries, got {}",
            values.len()
        );
        contract!(
            values.iter().all(|v| v.is_finite()),
            "rig params must be finite"
        );
        Ok(RigParams { values })
    }

    pub fn zeros() -> Self {
        RigParams {
            values: vec![T::zero(); NUM_CONTROLS],
        }
    }

    /// `e_i`: control `i` at full activation, everything else zero.
    pub fn one_hot(i: usize) -> Self {
        let mut p = Self::zeros();
        p.values[i] = T::one();
        p
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cast<U: Scalar>(&self) -> RigParams<U> {
        RigParams {
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Indices with a strictly positive activation.
    pub fn active(&self) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&i| self.values[i] > T::zero())
            .collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.f64()).collect()
    }
}

/// Neutral mesh plus one displacement field per control.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRig<T> {
    neutral: TriMesh<T>,
    deltas: Vec<Vec<Vec3<T>>>,
    names: Vec<String>,
}

impl<T: Scalar> BlendRig<T> {
    pub fn new(neutral: TriMesh<T>, deltas: Vec<Vec<Vec3<T>>>, names: Vec<String>) -> Result<Self> {
        let v = neutral.vertex_count();
        contract!(
            names.len() == deltas.len(),
            "{} names for {} delta fields",
            names.len(),
            deltas.len()
        );
        for (i, d) in deltas.iter().enumerate() {
            contract!(
                d.len() == v,
                "delta field {i} (`{}`) has {} vertices, neutral has {v}",
                names[i],
                d.len()
            );
            contract!(
                d.iter().flatten().all(|x| x.is_finite()),
                "delta field {i} (`{}`) is not finite",
                names[i]
            );
        }
        let mut seen = HashSet::new();
        for n in &names {
            contract!(seen.insert(n.as_str()), "duplicate control name `{n}`");
        }
        Ok(BlendRig {
            neutral,
            deltas,
            names,
        })
    }

    /// Builds a rig from full target shapes; each delta is `target − neutral`.
    pub fn from_targets(neutral: TriMesh<T>, targets: Vec<(String, Vec<Vec3<T>>)>) -> Result<Self> {
        let v = neutral.vertex_count();
        let mut names = Vec::with_capacity(targets.len());
        let mut deltas = Vec::with_capacity(targets.len());
        for (name, positions) in targets {
            contract!(
                positions.len() == v,
                "target `{name}` has {} vertices, neutral has {v}",
                positions.len()
            );
            deltas.push(
                positions
                    .iter()
                    .zip(neutral.positions())
                    .map(|(&t, &n)| geom::sub(t, n))
                    .collect(),
            );
            names.push(name);
        }
        Self::new(neutral, deltas, names)
    }

    pub fn neutral(&self) -> &TriMesh<T> {
        &self.neutral
    }

    pub fn deltas(&self) -> &[Vec<Vec3<T>>] {
        &self.deltas
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn control_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.neutral.vertex_count()
    }

    pub fn control_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Decodes a weight vector into a mesh.
    ///
    /// Accepts any weight count equal to [`Self::control_count`]; the
    /// pipeline's rigs have [`NUM_CONTROLS`] targets.
    pub fn forward(&self, weights: &[T]) -> Result<TriMesh<T>> {
        contract!(
            weights.len() == self.deltas.len(),
            "weight vector has {} entries, rig has {} controls",
            weights.len(),
            self.deltas.len()
        );
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Invalid(format!("weight {i} is not finite")));
        }
        let mut positions = self.neutral.positions().to_vec();
        for (&w, delta) in weights.iter().zip(&self.deltas) {
            if w == T::zero() {
                continue;
            }
            for (p, d) in positions.iter_mut().zip(delta) {
                p[0] = p[0] + w * d[0];
                p[1] = p[1] + w * d[1];
                p[2] = p[2] + w * d[2];
            }
        }
        Ok(self.neutral.with_positions(positions))
    }

    pub fn forward_params(&self, p: &RigParams<T>) -> Result<TriMesh<T>> {
        self.forward(p.values())
    }

    /// `∂positions/∂p[i]` for every control, which for a linear rig is the
    /// delta basis, independent of `p`.
    pub fn jacobian(&self) -> &[Vec<Vec3<T>>] {
        &self.deltas
    }

    /// The delta basis as a row-major `controls × 3V` matrix.
    pub fn delta_matrix(&self) -> Vec<T> {
        self.deltas
            .iter()
            .flat_map(|d| d.iter().flatten().copied())
            .collect()
    }

    /// Neutral positions flattened to `3V` values.
    pub fn neutral_flat(&self) -> Vec<T> {
        self.neutral.positions().iter().flatten().copied().collect()
    }

    pub fn cast<U: Scalar>(&self) -> BlendRig<U> {
        BlendRig {
            neutral: self.neutral.cast(),
            deltas: self
                .deltas
                .iter()
                .map(|d| d.iter().map(|&v| geom::cast3(v)).collect())
                .collect(),
            names: self.names.clone(),
        }
    }
}
