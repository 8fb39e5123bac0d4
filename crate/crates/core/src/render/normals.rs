use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::rig::TriMesh;
use crate::Scalar;

/// Orthonormal per-vertex frame: tangent, bitangent (`N×T`) and normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentFrame<T> {
    pub tangent: Vec3<T>,
    pub bitangent: Vec3<T>,
    pub normal: Vec3<T>,
}

/// Area-weighted vertex normals. Vertices with no usable incident area get
/// `(0, 0, 1)`.
pub fn compute_vertex_normals<T: Scalar>(mesh: &TriMesh<T>) -> Vec<Vec3<T>> {
    let p = mesh.positions();
    let mut acc = vec![[T::zero(); 3]; p.len()];
    for f in mesh.faces() {
        // |e1×e2| is twice the area, so the raw cross product is already
        // area-weighted.
        let n = geom::cross(geom::sub(p[f[1]], p[f[0]]), geom::sub(p[f[2]], p[f[0]]));
        for &v in f {
            acc[v] = geom::add(acc[v], n);
        }
    }
    acc.into_iter()
        .map(|n| geom::normalize(n).unwrap_or([T::zero(), T::zero(), T::one()]))
        .collect()
}

/// Per-vertex tangent frames from UV derivatives.
///
/// Triangle tangents are area-weighted and accumulated per vertex, then
/// Gram-Schmidt orthonormalized against the vertex normal. Triangles with
/// zero UV area are skipped.
pub fn compute_tangent_frames<T: Scalar>(mesh: &TriMesh<T>) -> Result<Vec<TangentFrame<T>>> {
    let uv = mesh.uvs().ok_or(Error::NoTangentSpace)?;
    let p = mesh.positions();
    let normals = compute_vertex_normals(mesh);
    let mut acc = vec![[T::zero(); 3]; p.len()];
    let eps = T::of(1e-12);
    for f in mesh.faces() {
        let e1 = geom::sub(p[f[1]], p[f[0]]);
        let e2 = geom::sub(p[f[2]], p[f[0]]);
        let (du1, dv1) = (uv[f[1]][0] - uv[f[0]][0], uv[f[1]][1] - uv[f[0]][1]);
        let (du2, dv2) = (uv[f[2]][0] - uv[f[0]][0], uv[f[2]][1] - uv[f[0]][1]);
        let det = du1 * dv2 - du2 * dv1;
        if det.abs() < eps {
            continue;
        }
        let Some(t) = geom::normalize(geom::scale(
            geom::sub(geom::scale(e1, dv2), geom::scale(e2, dv1)),
            T::one() / det,
        )) else {
            continue;
        };
        let area = geom::norm(geom::cross(e1, e2));
        for &v in f {
            acc[v] = geom::add(acc[v], geom::scale(t, area));
        }
    }
    Ok(acc
        .into_iter()
        .zip(normals)
        .map(|(t, n)| orthonormal_frame(t, n))
        .collect())
}

/// Builds `(T, N×T, N)` with `T` made orthogonal to the unit normal `n`.
pub(crate) fn orthonormal_frame<T: Scalar>(t: Vec3<T>, n: Vec3<T>) -> TangentFrame<T> {
    let t = geom::sub(t, geom::scale(n, geom::dot(t, n)));
    let tangent = geom::normalize(t)
        .filter(|_| geom::norm(t) > T::of(1e-9))
        .unwrap_or_else(|| geom::any_perpendicular(n));
    TangentFrame {
        tangent,
        bitangent: geom::cross(n, tangent),
        normal: n,
    }
}
