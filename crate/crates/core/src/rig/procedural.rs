//! Synthetic rigs: a random rig for numeric tests and a procedural face rig
//! used when no production rig is available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geom;
use crate::rig::{BlendRig, TriMesh};
use crate::NUM_CONTROLS;

/// Random rig with `vertices` vertices and `targets` Gaussian delta fields.
///
/// Faces form a strip `(i, i+1, i+2)`; UVs are uniform in `[0,1]²`.
pub fn random_rig<R: Rng + ?Sized>(rng: &mut R, vertices: usize, targets: usize) -> BlendRig<f64> {
    assert!(vertices >= 3, "random rig needs at least 3 vertices");
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let positions: Vec<[f64; 3]> = (0..vertices).map(|_| [normal(), normal(), normal()]).collect();
    let deltas: Vec<Vec<[f64; 3]>> = (0..targets)
        .map(|_| (0..vertices).map(|_| [normal() * 0.1, normal() * 0.1, normal() * 0.1]).collect())
        .collect();
    let faces = (0..vertices - 2).map(|i| [i, i + 1, i + 2]).collect();
    let uvs = (0..vertices)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let neutral = TriMesh::new(positions, faces, Some(uvs)).expect("strip faces are valid");
    let names = (0..targets).map(|i| format!("t{i:03}")).collect();
    BlendRig::new(neutral, deltas, names).expect("random rig is consistent")
}

/// Bilateral control families of the procedural face rig. Each expands to
/// a `_L` and `_R` control, giving [`NUM_CONTROLS`] controls in total.
pub const FACE_CONTROL_FAMILIES: [&str; 51] = [
    "browInnerUp", "browOuterUp", "browLower", "browSqueeze", "lidRaise",
    "lidTighten", "lidDroop", "eyeBlink", "eyeSquint", "eyeWide",
    "eyeLookUp", "eyeLookDown", "eyeLookIn", "eyeLookOut", "cheekRaise",
    "cheekPuff", "cheekSuck", "noseWrinkle", "nostrilDilate", "nostrilCompress",
    "upperLipRaise", "lipCornerPull", "sharpLipPull", "dimple", "lipCornerDepress",
    "lowerLipDepress", "chinRaise", "lipPucker", "lipStretch", "lipFunnel",
    "lipTighten", "lipPress", "lipsPart", "jawDrop", "mouthStretch",
    "lipSuck", "jawThrust", "jawSideways", "jawClench", "lipBite",
    "cheekBlow", "tongueShow", "mouthSide", "upperLipFunnel", "lowerLipFunnel",
    "upperLipRoll", "lowerLipRoll", "mouthRollOut", "neckTighten", "lipCornerUp",
    "earPull",
];

/// Names of the procedural face rig's controls, in control order.
pub fn face_control_names() -> Vec<String> {
    FACE_CONTROL_FAMILIES
        .iter()
        .flat_map(|f| [format!("{f}_L"), format!("{f}_R")])
        .collect()
}

/// A face-like height field over a `grid×grid` lattice with UVs and
/// [`NUM_CONTROLS`] localized, left/right mirrored blendshapes.
///
/// The surface faces +Z. Each control is a Gaussian bump with its own
/// centre, radius and displacement direction drawn from `seed`.
pub fn face_rig(grid: usize, seed: u64) -> BlendRig<f64> {
    assert!(grid >= 4, "face rig grid must be at least 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid;
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut positions = Vec::with_capacity(n * n);
    let mut uvs = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (coord(i), coord(j));
            positions.push([x, y, face_height(x, y)]);
            uvs.push([(x + 1.0) / 2.0, (y + 1.0) / 2.0]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = j * n + i;
            let (b, c, d) = (a + 1, a + n + 1, a + n);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }

    let mut deltas = Vec::with_capacity(NUM_CONTROLS);
    for _ in 0..FACE_CONTROL_FAMILIES.len() {
        let cx: f64 = rng.random_range(0.12..0.75);
        let cy: f64 = rng.random_range(-0.8..0.7);
        let radius: f64 = rng.random_range(0.12..0.3);
        let amp: f64 = rng.random_range(0.06..0.14);
        let dir = loop {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if let Some(u) = geom::normalize(v) {
                break u;
            }
        };
        for side in [1.0, -1.0] {
            let field = positions
                .iter()
                .map(|p: &[f64; 3]| {
                    let (dx, dy) = (p[0] - side * cx, p[1] - cy);
                    let w = amp * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
                    [side * dir[0] * w, dir[1] * w, dir[2] * w]
                })
                .collect();
            deltas.push(field);
        }
    }
    let neutral = TriMesh::new(positions, faces, Some(uvs)).expect("grid faces are valid");
    BlendRig::new(neutral, deltas, face_control_names()).expect("face rig is consistent")
}

fn face_height(x: f64, y: f64) -> f64 {
    let dome = 0.55 * (1.0 - 0.45 * x * x - 0.3 * y * y).max(0.0).sqrt();
    let nose = 0.22 * (-(x * x + (y - 0.05).powi(2)) / 0.02).exp();
    let sockets = -0.07
        * ((-((x - 0.38).powi(2) + (y - 0.3).powi(2)) / 0.015).exp()
            + (-((x + 0.38).powi(2) + (y - 0.3).powi(2)) / 0.015).exp());
    let mouth = -0.03 * (-(x * x / 0.08 + (y + 0.45).powi(2) / 0.004)).exp();
    dome + nose + sockets + mouth
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_rig_shape() {
        let rig = face_rig(12, 1);
        assert_eq!(rig.control_count(), NUM_CONTROLS);
        assert_eq!(rig.vertex_count(), 144);
        assert_eq!(rig.neutral().faces().len(), 2 * 11 * 11);
        assert!(rig.neutral().uvs().is_some());
        assert_eq!(face_rig(12, 1), rig);
    }

    #[test]
    fn face_rig_faces_point_towards_camera() {
        let rig = face_rig(10, 0);
        let m = rig.neutral();
        for f in m.faces() {
            let p = m.positions();
            let n = geom::cross(geom::sub(p[f[1]], p[f[0]]), geom::sub(p[f[2]], p[f[0]]));
            assert!(n[2] > 0.0);
        }
    }
}
