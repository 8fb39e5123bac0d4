use crate::error::{contract, Result};
use crate::geom::{self, Vec3};
use crate::render::codec::encode_channel;
use crate::render::{
    compute_tangent_frames, compute_vertex_normals, CameraConfig, ImageRGB8, LightRig, NormalSpace,
    RenderMode, TangentFrame, APPEARANCE_BACKGROUND, GAMMA, NORMAL_BACKGROUND,
};
use crate::rig::TriMesh;
use crate::Scalar;

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top-left rule: an edge owns its boundary pixels when the interior lies
/// to its right (left edge) or straight below a horizontal edge (top edge).
#[inline]
fn owns_boundary(a: [f64; 2], b: [f64; 2], sign: f64) -> bool {
    let nx = -(b[1] - a[1]) * sign;
    let ny = (b[0] - a[0]) * sign;
    nx > 0.0 || (nx == 0.0 && ny > 0.0)
}

#[inline]
fn inside(w: f64, owns: bool) -> bool {
    w > 0.0 || (w == 0.0 && owns)
}

/// Z-buffered rasterization with pixel centres at `(i+½, j+½)`.
///
/// Fully deterministic: triangles are drawn in face order, depth ties keep
/// the earlier triangle, and there is no anti-aliasing. An empty mesh
/// yields a background-only image.
pub fn rasterize<T: Scalar>(
    mesh: &TriMesh<T>,
    cam: &CameraConfig,
    lights: &LightRig,
    mode: RenderMode<'_, T>,
) -> Result<ImageRGB8> {
    let res = cam.resolution;
    let background = match mode {
        RenderMode::Appearance => APPEARANCE_BACKGROUND,
        _ => NORMAL_BACKGROUND,
    };
    let mut img = ImageRGB8::filled(res, res, background);
    if mesh.is_empty() {
        return Ok(img);
    }
    lights.validate()?;

    let normals: Vec<Vec3<f64>> = compute_vertex_normals(mesh).into_iter().map(geom::cast3).collect();
    let frames: Option<Vec<TangentFrame<f64>>> = match mode {
        RenderMode::TangentNormals { reference: Some(r) } => {
            contract!(
                r.len() == mesh.vertex_count(),
                "{} reference frames for {} vertices",
                r.len(),
                mesh.vertex_count()
            );
            Some(r.iter().map(cast_frame).collect())
        }
        RenderMode::TangentNormals { reference: None } => {
            Some(compute_tangent_frames(mesh)?.iter().map(cast_frame).collect())
        }
        _ => None,
    };

    let screen: Vec<Vec3<f64>> = mesh
        .positions()
        .iter()
        .map(|&p| cam.project(geom::cast3(p)))
        .collect();
    let mut depth = vec![f64::NEG_INFINITY; res * res];

    for f in mesh.faces() {
        let v = f.map(|i| screen[i]);
        let (a, b, c) = ([v[0][0], v[0][1]], [v[1][0], v[1][1]], [v[2][0], v[2][1]]);
        let area = edge(a, b, c);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let sign = area.signum();
        let area = area.abs();
        let own = [
            owns_boundary(b, c, sign),
            owns_boundary(c, a, sign),
            owns_boundary(a, b, sign),
        ];
        let lo_x = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi_x = v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let lo_y = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let hi_y = v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((lo_x - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((lo_y - 0.5).ceil().max(0.0)) as usize;
        let x1 = (hi_x - 0.5).floor().min(res as f64 - 1.0);
        let y1 = (hi_y - 0.5).floor().min(res as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let w = [edge(b, c, p) * sign, edge(c, a, p) * sign, edge(a, b, p) * sign];
                if !(0..3).all(|k| inside(w[k], own[k])) {
                    continue;
                }
                let bary = w.map(|x| x / area);
                let z = bary[0] * v[0][2] + bary[1] * v[1][2] + bary[2] * v[2][2];
                let slot = &mut depth[py * res + px];
                if z <= *slot {
                    continue;
                }
                *slot = z;
                let n = geom::normalize(geom::lerp3(f.map(|i| normals[i]), bary))
                    .unwrap_or([0.0, 0.0, 1.0]);
                let rgb = match (&mode, &frames) {
                    (RenderMode::Appearance, _) => shade(n, lights),
                    (RenderMode::CameraNormals, _) => n.map(encode_channel),
                    (_, Some(frames)) => {
                        let fr = f.map(|i| frames[i]);
                        let t = geom::lerp3(fr.map(|x| x.tangent), bary);
                        let nn = geom::normalize(geom::lerp3(fr.map(|x| x.normal), bary))
                            .unwrap_or([0.0, 0.0, 1.0]);
                        let frame = super::normals::orthonormal_frame(t, nn);
                        [
                            geom::dot(n, frame.tangent),
                            geom::dot(n, frame.bitangent),
                            geom::dot(n, frame.normal),
                        ]
                        .map(encode_channel)
                    }
                    (_, None) => unreachable!("tangent modes always carry frames"),
                };
                img.set_pixel(px, py, rgb);
            }
        }
    }
    Ok(img)
}

/// Lambertian sum over the three lights, clamped, then gamma-encoded.
fn shade(n: Vec3<f64>, lights: &LightRig) -> [u8; 3] {
    let mut c = [0.0f64; 3];
    for l in lights.lights() {
        let cos = geom::dot(n, geom::scale(l.direction, -1.0)).max(0.0);
        for k in 0..3 {
            c[k] += lights.albedo * l.intensity * l.color[k] * cos;
        }
    }
    c.map(|v| (255.0 * v.clamp(0.0, 1.0).powf(1.0 / GAMMA) + 0.5).floor() as u8)
}

fn cast_frame<T: Scalar>(f: &TangentFrame<T>) -> TangentFrame<f64> {
    TangentFrame {
        tangent: geom::cast3(f.tangent),
        bitangent: geom::cast3(f.bitangent),
        normal: geom::cast3(f.normal),
    }
}

/// Fixed camera, lights and normal-map reference shared by every render of
/// a dataset.
#[derive(Clone, Debug)]
pub struct SceneRenderer {
    pub camera: CameraConfig,
    pub lights: LightRig,
    pub normal_space: NormalSpace,
    reference: Option<Vec<TangentFrame<f64>>>,
}

impl SceneRenderer {
    /// Fits the camera to `neutral` and, for tangent-space normal maps,
    /// takes the neutral's tangent frames as the reference frames.
    pub fn new(
        neutral: &TriMesh<f64>,
        resolution: usize,
        lights: LightRig,
        normal_space: NormalSpace,
    ) -> Result<Self> {
        lights.validate()?;
        let camera = CameraConfig::fit(neutral, resolution, super::DEFAULT_MARGIN)?;
        let reference = match normal_space {
            NormalSpace::Tangent => Some(compute_tangent_frames(neutral)?),
            NormalSpace::Camera => None,
        };
        Ok(SceneRenderer {
            camera,
            lights,
            normal_space,
            reference,
        })
    }

    pub fn appearance(&self, mesh: &TriMesh<f64>) -> Result<ImageRGB8> {
        rasterize(mesh, &self.camera, &self.lights, RenderMode::Appearance)
    }

    pub fn normal_map(&self, mesh: &TriMesh<f64>) -> Result<ImageRGB8> {
        let mode = match &self.reference {
            Some(r) => RenderMode::TangentNormals { reference: Some(r) },
            None => RenderMode::CameraNormals,
        };
        rasterize(mesh, &self.camera, &self.lights, mode)
    }

    /// `(appearance, normal map)` for one mesh.
    pub fn render_pair(&self, mesh: &TriMesh<f64>) -> Result<(ImageRGB8, ImageRGB8)> {
        Ok((self.appearance(mesh)?, self.normal_map(mesh)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::DirectionalLight;
    use crate::rig::procedural;

    fn cam(res: usize) -> CameraConfig {
        CameraConfig {
            center: [0.0, 0.0],
            extent: 2.0,
            resolution: res,
            margin: 0.0,
        }
    }

    fn key_only(dir: [f64; 3]) -> LightRig {
        LightRig::new(
            DirectionalLight::white(dir, 1.0),
            DirectionalLight::white([0.0, 0.0, -1.0], 0.0),
            DirectionalLight::white([0.0, 0.0, -1.0], 0.0),
            0.75,
        )
        .unwrap()
    }

    fn big_triangle(z: f64, uv: bool) -> TriMesh<f64> {
        TriMesh::new(
            vec![[-4.0, -4.0, z], [4.0, -4.0, z], [0.0, 6.0, z]],
            vec![[0, 1, 2]],
            uv.then(|| vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn flat_surface_encodes_flat_normal_everywhere() {
        let img = rasterize(
            &big_triangle(0.0, true),
            &cam(32),
            &LightRig::three_point(),
            RenderMode::TangentNormals { reference: None },
        )
        .unwrap();
        assert!(img.data().chunks(3).all(|p| p == [128, 128, 255]));
    }

    #[test]
    fn empty_mesh_is_background() {
        let m = TriMesh::<f64>::new(vec![], vec![], None).unwrap();
        let img = rasterize(&m, &cam(16), &LightRig::three_point(), RenderMode::Appearance).unwrap();
        assert!(img.data().iter().all(|&b| b == 0));
        let img = rasterize(&m, &cam(16), &LightRig::three_point(), RenderMode::CameraNormals).unwrap();
        assert!(img.data().chunks(3).all(|p| p == NORMAL_BACKGROUND));
    }

    #[test]
    fn single_light_pixel_matches_hand_shading() {
        // Surface normal +Z; light travels along -(sinθ, 0, cosθ).
        let theta = 0.6f64;
        let lights = key_only([-theta.sin(), 0.0, -theta.cos()]);
        let img = rasterize(&big_triangle(0.0, false), &cam(16), &lights, RenderMode::Appearance).unwrap();
        let expect = (255.0 * (0.75 * theta.cos() * 1.0).powf(1.0 / 2.2) + 0.5).floor() as u8;
        assert_eq!(img.pixel(8, 8), [expect; 3]);
        assert_eq!(expect, 205);
    }

    #[test]
    fn nearer_triangle_wins() {
        let far = big_triangle(0.0, false);
        let mut positions = far.positions().to_vec();
        positions.extend(big_triangle(0.5, false).positions());
        let faces = vec![[0, 1, 2], [3, 4, 5]];
        // tilt the near one slightly so its shading differs
        positions[5][2] = 1.5;
        let both = TriMesh::new(positions.clone(), faces.clone(), None).unwrap();
        let near_only = TriMesh::new(positions[3..].to_vec(), vec![[0, 1, 2]], None).unwrap();
        let lights = LightRig::three_point();
        let a = rasterize(&both, &cam(32), &lights, RenderMode::Appearance).unwrap();
        let b = rasterize(&near_only, &cam(32), &lights, RenderMode::Appearance).unwrap();
        assert_eq!(a, b);
        // reversed draw order gives the same image
        let swapped = TriMesh::new(positions, vec![[3, 4, 5], [0, 1, 2]], None).unwrap();
        assert_eq!(rasterize(&swapped, &cam(32), &lights, RenderMode::Appearance).unwrap(), a);
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // Fan of triangles over a square with edges through pixel centres.
        let c = cam(16);
        let pts = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [0.0625, 0.0625]];
        let mut covered = vec![0u32; 16 * 16];
        for k in 0..4 {
            let tri = [pts[k], pts[(k + 1) % 4], pts[4]];
            let m = TriMesh::new(
                tri.iter().map(|p| [p[0], p[1], 0.0]).collect(),
                vec![[0, 1, 2]],
                None,
            )
            .unwrap();
            let img = rasterize(&m, &c, &key_only([0.0, 0.0, -1.0]), RenderMode::Appearance).unwrap();
            for (i, px) in img.data().chunks(3).enumerate() {
                if px[0] > 0 {
                    covered[i] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&n| n == 1), "{covered:?}");
    }

    #[test]
    fn rendering_is_deterministic_and_camera_is_shared() {
        let rig = procedural::face_rig(16, 4);
        let r = SceneRenderer::new(rig.neutral(), 32, LightRig::three_point(), NormalSpace::Tangent).unwrap();
        let mut w = vec![0.0; rig.control_count()];
        w[3] = 1.0;
        w[40] = 0.7;
        let m = rig.forward(&w).unwrap();
        let (a1, n1) = r.render_pair(&m).unwrap();
        let (a2, n2) = r.render_pair(&m).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(n1, n2);
        // the neutral renders flat in its own tangent frames
        let (_, n0) = r.render_pair(rig.neutral()).unwrap();
        assert!(n0.data().chunks(3).all(|p| (p[0] as i32 - 128).abs() <= 1
            && (p[1] as i32 - 128).abs() <= 1 && p[2] >= 254));
        assert_ne!(n0, n1);
    }

    #[test]
    fn camera_projection_roundtrip() {
        let c = CameraConfig::fit(procedural::face_rig(8, 1).neutral(), 64, 0.05).unwrap();
        let p = c.project([0.3, -0.2, 0.1]);
        let back = c.unproject(p[0], p[1]);
        assert!((back[0] - 0.3).abs() < 1e-12 && (back[1] + 0.2).abs() < 1e-12);
        assert!(CameraConfig::fit(procedural::face_rig(8, 1).neutral(), 15, 0.05).is_err());
        assert!(CameraConfig::fit(procedural::face_rig(8, 1).neutral(), 64, -0.1).is_err());
    }
}
