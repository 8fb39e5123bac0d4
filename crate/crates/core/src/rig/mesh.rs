use crate::error::{contract, Result};
use crate::geom::{self, Vec3};
use crate::Scalar;

/// Triangle mesh: positions, faces and optional per-vertex UVs.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh<T> {
    positions: Vec<Vec3<T>>,
    faces: Vec<[usize; 3]>,
    uvs: Option<Vec<[T; 2]>>,
}

impl<T: Scalar> TriMesh<T> {
    pub fn new(
        positions: Vec<Vec3<T>>,
        faces: Vec<[usize; 3]>,
        uvs: Option<Vec<[T; 2]>>,
    ) -> Result<Self> {
        validate_faces(&faces, positions.len())?;
        contract!(
            positions.iter().flatten().all(|v| v.is_finite()),
            "mesh positions must be finite"
        );
        if let Some(uv) = &uvs {
            contract!(
                uv.len() == positions.len(),
                "uv count {} does not match vertex count {}",
                uv.len(),
                positions.len()
            );
        }
        Ok(TriMesh {
            positions,
            faces,
            uvs,
        })
    }

    pub fn positions(&self) -> &[Vec3<T>] {
        &self.positions
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uvs(&self) -> Option<&[[T; 2]]> {
        self.uvs.as_deref()
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`; `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Vec3<T>, Vec3<T>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])],
                [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])],
            )
        }))
    }

    pub fn bbox_diagonal(&self) -> T {
        self.bounds()
            .map(|(lo, hi)| geom::norm(geom::sub(hi, lo)))
            .unwrap_or_else(T::zero)
    }

    /// Area of face `f`.
    pub fn face_area(&self, f: usize) -> T {
        let [a, b, c] = self.faces[f];
        let p = &self.positions;
        geom::norm(geom::cross(geom::sub(p[b], p[a]), geom::sub(p[c], p[a]))) * T::of(0.5)
    }

    pub fn cast<U: Scalar>(&self) -> TriMesh<U> {
        TriMesh {
            positions: self.positions.iter().map(|&p| geom::cast3(p)).collect(),
            faces: self.faces.clone(),
            uvs: self.uvs.as_ref().map(|uv| {
                uv.iter()
                    .map(|t| [U::of(t[0].f64()), U::of(t[1].f64())])
                    .collect()
            }),
        }
    }

    pub(crate) fn with_positions(&self, positions: Vec<Vec3<T>>) -> Self {
        debug_assert_eq!(positions.len(), self.positions.len());
        TriMesh {
            positions,
            faces: self.faces.clone(),
            uvs: self.uvs.clone(),
        }
    }
}

pub(crate) fn validate_faces(faces: &[[usize; 3]], vertex_count: usize) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        contract!(
            f.iter().all(|&v| v < vertex_count),
            "face {i} references a vertex outside [0, {vertex_count})"
        );
        contract!(
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2],
            "face {i} is degenerate: {f:?}"
        );
    }
    Ok(())
}
