use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::rig::TriMesh;
use crate::Scalar;

const ORTHO_TOL: f64 = 1e-6;

/// Proper rigid motion `x ↦ R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    /// Rejects rotations that are not orthonormal with determinant +1.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let rtr = geom::mat_mul(&geom::transpose(&rotation), &rotation);
        let eye = geom::identity::<T>();
        for i in 0..3 {
            for j in 0..3 {
                if (rtr[i][j] - eye[i][j]).abs().f64() > ORTHO_TOL || !rtr[i][j].is_finite() {
                    return Err(Error::Invalid(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {})",
                        rtr[i][j]
                    )));
                }
            }
        }
        let d = geom::det(&rotation).f64();
        if (d - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Invalid(format!("rotation determinant is {d}, expected +1")));
        }
        contract!(
            translation.iter().all(|t| t.is_finite()),
            "translation must be finite"
        );
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: geom::identity(),
            translation: [T::zero(); 3],
        }
    }

    /// `R = Rz·Ry·Rx` from angles in degrees.
    pub fn from_euler_deg(angles: [f64; 3], translation: Vec3<T>) -> Result<Self> {
        let [rx, ry, rz] = angles.map(|a| a.to_radians());
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let x = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let y = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let z = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let r = geom::mat_mul(&z, &geom::mat_mul(&y, &x));
        Self::new(r.map(|row| row.map(T::of)), translation)
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == geom::identity() && self.translation.iter().all(|&t| t == T::zero())
    }

    pub fn apply_point(&self, p: Vec3<T>) -> Vec3<T> {
        geom::add(geom::mat_vec(&self.rotation, p), self.translation)
    }

    /// Transforms positions; faces and UVs are carried over untouched.
    pub fn apply(&self, mesh: &TriMesh<T>) -> TriMesh<T> {
        if self.is_identity() {
            return mesh.clone();
        }
        mesh.with_positions(mesh.positions().iter().map(|&p| self.apply_point(p)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|r| r.map(|v| U::of(v.f64()))),
            translation: geom::cast3(self.translation),
        }
    }
}

/// Bounds for random rigid augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigidConfig {
    /// Per-axis Euler angle bound in degrees.
    pub rotation_deg: f64,
    /// Per-axis translation bound as a fraction of the bbox diagonal.
    pub translation_frac: f64,
}

impl Default for RigidConfig {
    fn default() -> Self {
        RigidConfig {
            rotation_deg: 5.0,
            translation_frac: 0.02,
        }
    }
}

impl RigidConfig {
    pub fn none() -> Self {
        RigidConfig {
            rotation_deg: 0.0,
            translation_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.translation_frac >= 0.0)
            || !self.rotation_deg.is_finite()
            || !self.translation_frac.is_finite()
        {
            return Err(Error::Invalid(format!(
                "rigid bounds must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// The raw draws behind a sampled rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidSample {
    pub angles_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidSample {
    pub fn transform<T: Scalar>(&self) -> RigidTransform<T> {
        RigidTransform::from_euler_deg(self.angles_deg, self.translation.map(T::of))
            .expect("Euler rotations are orthonormal")
    }
}

/// Draws per-axis angles uniform in `±rotation_deg` and translations uniform
/// in `±translation_frac·diagonal`. Always consumes six uniforms.
pub fn sample_rigid_parts<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RigidConfig,
    diagonal: f64,
) -> Result<RigidSample> {
    cfg.validate()?;
    let mut draw = |bound: f64| {
        let u: f64 = rng.random();
        if bound == 0.0 {
            0.0
        } else {
            (2.0 * u - 1.0) * bound
        }
    };
    let angles_deg = [draw(cfg.rotation_deg), draw(cfg.rotation_deg), draw(cfg.rotation_deg)];
    let t = cfg.translation_frac * diagonal;
    let translation = [draw(t), draw(t), draw(t)];
    Ok(RigidSample {
        angles_deg,
        translation,
    })
}

pub fn sample_rigid<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RigidConfig,
    diagonal: f64,
) -> Result<RigidTransform<T>> {
    Ok(sample_rigid_parts(rng, cfg, diagonal)?.transform())
}
