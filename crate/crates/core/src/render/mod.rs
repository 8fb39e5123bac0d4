//! Deterministic CPU rasterizer for the two input modalities.
//!
//! The camera is orthographic, looks down −Z and is fitted once to the
//! neutral mesh. Appearance renders use Lambertian shading under a fixed
//! key/fill/rim light rig; normal-map renders encode per-pixel shading
//! normals expressed in a tangent frame.

mod codec;
mod image;
mod normals;
mod raster;

pub use codec::{decode_normal, encode_normal, UNIT_TOLERANCE};
pub use image::ImageRGB8;
pub use normals::{compute_tangent_frames, compute_vertex_normals, TangentFrame};
pub use raster::{rasterize, SceneRenderer};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geom::{self, Vec3};
use crate::rig::TriMesh;
use crate::Scalar;

/// Background of normal-map renders: the encoded flat normal `(0, 0, 1)`.
pub const NORMAL_BACKGROUND: [u8; 3] = [128, 128, 255];
/// Background of appearance renders.
pub const APPEARANCE_BACKGROUND: [u8; 3] = [0, 0, 0];
pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_ALBEDO: f64 = 0.75;
pub const GAMMA: f64 = 2.2;

/// Orthographic camera looking down −Z over a square viewport.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// World-space XY point mapped to the image centre.
    pub center: [f64; 2],
    /// World-space width (and height) covered by the viewport.
    pub extent: f64,
    pub resolution: usize,
    pub margin: f64,
}

impl CameraConfig {
    /// Frames the mesh's XY bounds, padded by `margin·size` on every side.
    pub fn fit<T: Scalar>(mesh: &TriMesh<T>, resolution: usize, margin: f64) -> Result<Self> {
        contract!(
            resolution >= 16 && resolution.is_multiple_of(2),
            "resolution must be even and at least 16, got {resolution}"
        );
        contract!(margin >= 0.0 && margin.is_finite(), "margin must be ≥ 0, got {margin}");
        let (lo, hi) = mesh
            .bounds()
            .map(|(lo, hi)| (geom::cast3::<T, f64>(lo), geom::cast3::<T, f64>(hi)))
            .unwrap_or(([-1.0; 3], [1.0; 3]));
        let size = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let size = if size > 0.0 { size } else { 1.0 };
        Ok(CameraConfig {
            center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0],
            extent: size * (1.0 + 2.0 * margin),
            resolution,
            margin,
        })
    }

    /// World point to `(x_pixel, y_pixel, depth)`; image rows grow
    /// downwards and larger depth is nearer the camera.
    pub fn project(&self, p: Vec3<f64>) -> Vec3<f64> {
        let s = self.resolution as f64 / self.extent;
        let half = self.resolution as f64 / 2.0;
        [
            (p[0] - self.center[0]) * s + half,
            (self.center[1] - p[1]) * s + half,
            p[2],
        ]
    }

    /// Inverse of [`Self::project`] for the XY components.
    pub fn unproject(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.extent / self.resolution as f64;
        let half = self.resolution as f64 / 2.0;
        [(x - half) * s + self.center[0], self.center[1] - (y - half) * s]
    }
}

/// Directional light; `direction` is the direction the light travels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    pub direction: [f64; 3],
    pub intensity: f64,
    pub color: [f64; 3],
}

impl DirectionalLight {
    pub fn white(direction: [f64; 3], intensity: f64) -> Self {
        DirectionalLight {
            direction: geom::normalize(direction).unwrap_or([0.0, 0.0, -1.0]),
            intensity,
            color: [1.0; 3],
        }
    }
}

/// Key, fill and rim lights plus the uniform surface albedo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRig {
    pub key: DirectionalLight,
    pub fill: DirectionalLight,
    pub rim: DirectionalLight,
    pub albedo: f64,
}

impl LightRig {
    pub fn new(
        key: DirectionalLight,
        fill: DirectionalLight,
        rim: DirectionalLight,
        albedo: f64,
    ) -> Result<Self> {
        let rig = LightRig {
            key,
            fill,
            rim,
            albedo,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn three_point() -> Self {
        LightRig {
            key: DirectionalLight::white([-0.5, -0.5, -1.0], 1.0),
            fill: DirectionalLight::white([0.7, -0.2, -1.0], 0.4),
            rim: DirectionalLight::white([0.0, 0.8, 0.5], 0.3),
            albedo: DEFAULT_ALBEDO,
        }
    }

    pub fn lights(&self) -> [&DirectionalLight; 3] {
        [&self.key, &self.fill, &self.rim]
    }

    pub fn validate(&self) -> Result<()> {
        for l in self.lights() {
            let len = geom::norm(l.direction);
            if !((len - 1.0).abs() <= 1e-6) {
                return Err(Error::Invalid(format!("light direction {:?} is not unit length", l.direction)));
            }
            if !(l.intensity >= 0.0) || !l.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("invalid light {l:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.albedo) {
            return Err(Error::Invalid(format!("albedo {} outside [0,1]", self.albedo)));
        }
        Ok(())
    }
}

impl Default for LightRig {
    fn default() -> Self {
        Self::three_point()
    }
}

/// Frame in which normal-map pixels are expressed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalSpace {
    #[default]
    Tangent,
    /// Fallback for meshes without UVs; must be requested explicitly.
    Camera,
}

impl std::str::FromStr for NormalSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tangent" => Ok(NormalSpace::Tangent),
            "camera" => Ok(NormalSpace::Camera),
            other => Err(Error::Invalid(format!("unknown normal space `{other}`"))),
        }
    }
}

/// What [`rasterize`] produces.
#[derive(Clone, Copy, Debug)]
pub enum RenderMode<'a, T> {
    Appearance,
    /// Tangent-space normal map. Shading normals are expressed in
    /// `reference` frames when given (one per vertex, typically the rig's
    /// neutral), otherwise in the rendered mesh's own frames.
    TangentNormals { reference: Option<&'a [TangentFrame<T>]> },
    CameraNormals,
}

impl std::str::FromStr for RenderMode<'static, f64> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(RenderMode::Appearance),
            "normal" | "normal_map" => Ok(RenderMode::TangentNormals { reference: None }),
            "camera_normal" => Ok(RenderMode::CameraNormals),
            other => Err(Error::Invalid(format!("unknown render mode `{other}`"))),
        }
    }
}
