use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::rig::{obj, BlendRig};

/// On-disk rig description: a neutral OBJ and one full-shape OBJ per control.
///
/// Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigManifest {
    pub neutral: PathBuf,
    pub targets: Vec<TargetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub name: String,
    pub path: PathBuf,
}

pub fn load_rig(manifest_path: &Path) -> Result<BlendRig<f64>> {
    let manifest: RigManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let neutral = obj::read_obj(&base.join(&manifest.neutral))?;
    let mut targets = Vec::with_capacity(manifest.targets.len());
    for t in &manifest.targets {
        let mesh = obj::read_obj(&base.join(&t.path))?;
        if mesh.faces() != neutral.faces() {
            return Err(Error::Invalid(format!(
                "target `{}` does not share the neutral's face list",
                t.name
            )));
        }
        targets.push((t.name.clone(), mesh.positions().to_vec()));
    }
    BlendRig::from_targets(neutral, targets)
}

/// Writes `rig.json`, `neutral.obj` and `targets/<name>.obj` under `dir`.
pub fn save_rig(rig: &BlendRig<f64>, dir: &Path) -> Result<PathBuf> {
    let tdir = dir.join("targets");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    obj::write_obj(rig.neutral(), &dir.join("neutral.obj"))?;
    let mut targets = Vec::with_capacity(rig.control_count());
    for (i, name) in rig.names().iter().enumerate() {
        let mut w = vec![0.0; rig.control_count()];
        w[i] = 1.0;
        let rel = PathBuf::from("targets").join(format!("{name}.obj"));
        obj::write_obj(&rig.forward(&w)?, &dir.join(&rel))?;
        targets.push(TargetEntry {
            name: name.clone(),
            path: rel,
        });
    }
    let path = dir.join("rig.json");
    write_json(
        &path,
        &RigManifest {
            neutral: "neutral.obj".into(),
            targets,
        },
    )?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::procedural;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_then_load_recovers_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::random_rig(&mut ChaCha8Rng::seed_from_u64(8), 12, 5);
        let path = save_rig(&rig, dir.path()).unwrap();
        let back = load_rig(&path).unwrap();
        assert_eq!(back.names(), rig.names());
        assert_eq!(back.neutral(), rig.neutral());
        for (a, b) in back.deltas().iter().zip(rig.deltas()) {
            for (x, y) in a.iter().zip(b) {
                for k in 0..3 {
                    // delta is recomputed as (neutral + delta) − neutral
                    assert!((x[k] - y[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("n.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        std::fs::write(dir.path().join("t.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 1\nf 1 2 3\n").unwrap();
        std::fs::write(
            dir.path().join("rig.json"),
            r#"{"neutral":"n.obj","targets":[{"name":"a","path":"t.obj"}]}"#,
        )
        .unwrap();
        assert!(load_rig(&dir.path().join("rig.json")).is_err());
    }
}
