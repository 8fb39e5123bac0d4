use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{base_param_sets, perturb_params, CanonicalSource, PerturbConfig};
use crate::error::{contract, read_json, write_json, Error, Result};
use crate::render::{CameraConfig, ImageRGB8, LightRig, NormalSpace, SceneRenderer};
use crate::rig::{sample_rigid_parts, BlendRig, RigParams, RigidConfig, RigidSample, RigidTransform};
use crate::NUM_CONTROLS;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub total_samples: usize,
    pub resolution: usize,
    pub rigid: RigidConfig,
    pub seed: u64,
    pub canonical: CanonicalSource,
    /// `false` copies the base sets unchanged into every later pass (rigid
    /// jitter still applies).
    pub perturb: bool,
    /// Not serialized: a manifest must not depend on where it was written.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub normal_space: NormalSpace,
    pub lights: LightRig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            total_samples: 22_575,
            resolution: 512,
            rigid: RigidConfig::default(),
            seed: 0,
            canonical: CanonicalSource::None,
            perturb: true,
            output_dir: PathBuf::from("data"),
            normal_space: NormalSpace::Tangent,
            lights: LightRig::three_point(),
        }
    }
}

/// `params.json`: `{"values": [102 reals]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub values: Vec<f64>,
}

pub fn write_params(path: &Path, p: &RigParams<f64>) -> Result<()> {
    write_json(
        path,
        &ParamsFile {
            values: p.values().to_vec(),
        },
    )
}

pub fn read_params(path: &Path) -> Result<RigParams<f64>> {
    let f: ParamsFile = read_json(path)?;
    RigParams::new(f.values).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub angles_deg: [f64; 3],
    pub translation: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl TransformRecord {
    fn new(sample: &RigidSample) -> Self {
        let xf: RigidTransform<f64> = sample.transform();
        TransformRecord {
            angles_deg: sample.angles_deg,
            translation: sample.translation,
            rotation: *xf.rotation(),
        }
    }

    pub fn transform(&self) -> RigidTransform<f64> {
        RigidSample {
            angles_deg: self.angles_deg,
            translation: self.translation,
        }
        .transform()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub dir: String,
    pub base_index: usize,
    pub base_name: String,
    /// How many times the base list had been cycled before this sample.
    pub pass: usize,
    pub perturbed: bool,
    /// Stream of the master-seeded generator this sample drew from.
    pub rng_stream: u64,
    pub transform: TransformRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub num_controls: usize,
    pub config: DatasetConfig,
    pub perturb: PerturbConfig,
    pub camera: CameraConfig,
    pub base_sets: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generator for sample `index`: the master seed with one ChaCha stream per
/// sample, so samples can be produced in any order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Decodes `params`, applies `xf` and renders both modalities.
pub fn render_sample(
    rig: &BlendRig<f64>,
    renderer: &SceneRenderer,
    params: &RigParams<f64>,
    xf: &RigidTransform<f64>,
) -> Result<(ImageRGB8, ImageRGB8)> {
    let mesh = xf.apply(&rig.forward_params(params)?);
    renderer.render_pair(&mesh)
}

/// Writes `<out>/<id:06>/{appearance.png, normal.png, params.json}` for every
/// sample and a top-level `manifest.json`.
///
/// Base sets are cycled in order; the first pass over them is emitted
/// unperturbed and without rigid jitter. Samples are rendered in parallel,
/// each from its own RNG stream, so output bytes do not depend on the
/// thread count. On failure the sample directories written so far are
/// removed and no manifest is produced.
pub fn synthesize_dataset(
    rig: &BlendRig<f64>,
    cfg: &DatasetConfig,
    perturb: &PerturbConfig,
) -> Result<DatasetManifest> {
    perturb.validate()?;
    cfg.rigid.validate()?;
    let canonical = cfg.canonical.load()?.resolve(rig)?;
    let bases = base_param_sets(rig, &canonical)?;
    contract!(
        cfg.total_samples >= bases.len(),
        "total_samples ({}) must cover all {} base sets",
        cfg.total_samples,
        bases.len()
    );
    let renderer = SceneRenderer::new(rig.neutral(), cfg.resolution, cfg.lights, cfg.normal_space)?;
    let diagonal = rig.neutral().bbox_diagonal();
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _ = std::fs::remove_file(out.join(MANIFEST_FILE));

    let produce = |id: usize| -> Result<SampleRecord> {
        let base_index = id % bases.len();
        let pass = id / bases.len();
        let mut rng = sample_rng(cfg.seed, id);
        let (params, rigid) = if pass == 0 {
            (bases[base_index].params.clone(), RigidSample {
                angles_deg: [0.0; 3],
                translation: [0.0; 3],
            })
        } else {
            let p = if cfg.perturb {
                perturb_params(&bases[base_index].params, perturb, &mut rng)?
            } else {
                bases[base_index].params.clone()
            };
            (p, sample_rigid_parts(&mut rng, &cfg.rigid, diagonal)?)
        };
        let (appearance, normal) = render_sample(rig, &renderer, &params, &rigid.transform())?;
        let dir_name = format!("{id:06}");
        let dir = out.join(&dir_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        appearance.write_png(&dir.join("appearance.png"))?;
        normal.write_png(&dir.join("normal.png"))?;
        write_params(&dir.join("params.json"), &params)?;
        Ok(SampleRecord {
            id,
            dir: dir_name,
            base_index,
            base_name: bases[base_index].name.clone(),
            pass,
            perturbed: pass > 0 && cfg.perturb,
            rng_stream: id as u64,
            transform: TransformRecord::new(&rigid),
        })
    };

    let results: Vec<Result<SampleRecord>> = (0..cfg.total_samples).into_par_iter().map(produce).collect();
    if let Some(pos) = results.iter().position(|r| r.is_err()) {
        for id in 0..cfg.total_samples {
            let _ = std::fs::remove_dir_all(out.join(format!("{id:06}")));
        }
        return Err(results.into_iter().nth(pos).unwrap().unwrap_err());
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        num_controls: NUM_CONTROLS,
        config: cfg.clone(),
        perturb: *perturb,
        camera: renderer.camera,
        base_sets: bases.iter().map(|b| b.name.clone()).collect(),
        samples: results.into_iter().map(|r| r.unwrap()).collect(),
    };
    let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
    write_json(&tmp, &manifest)?;
    let path = out.join(MANIFEST_FILE);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::CanonicalSet;
    use crate::rig::procedural;

    fn cfg(dir: &Path, n: usize) -> DatasetConfig {
        DatasetConfig {
            total_samples: n,
            resolution: 16,
            seed: 7,
            output_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn first_pass_is_pristine() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::face_rig(6, 0);
        let c = DatasetConfig {
            rigid: RigidConfig::none(),
            ..cfg(dir.path(), NUM_CONTROLS)
        };
        let none = PerturbConfig {
            p_drop: 0.0,
            p_add: 0.0,
            p_replace: 0.0,
            ..Default::default()
        };
        let m = synthesize_dataset(&rig, &c, &none).unwrap();
        assert_eq!(m.len(), NUM_CONTROLS);
        for (i, s) in m.samples.iter().enumerate() {
            let p = read_params(&dir.path().join(&s.dir).join("params.json")).unwrap();
            assert_eq!(p, RigParams::one_hot(i));
            assert!(s.transform.transform().is_identity());
        }
    }

    #[test]
    fn too_few_samples_rejected_and_nothing_written() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::face_rig(6, 0);
        assert!(synthesize_dataset(&rig, &cfg(dir.path(), 50), &PerturbConfig::default()).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn labels_reproduce_images() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::face_rig(8, 1);
        let m = synthesize_dataset(&rig, &cfg(dir.path(), 110), &PerturbConfig::default()).unwrap();
        let renderer =
            SceneRenderer::new(rig.neutral(), 16, LightRig::three_point(), NormalSpace::Tangent).unwrap();
        for s in m.samples.iter().skip(100) {
            let d = dir.path().join(&s.dir);
            let p = read_params(&d.join("params.json")).unwrap();
            let (a, n) = render_sample(&rig, &renderer, &p, &s.transform.transform()).unwrap();
            assert_eq!(a, ImageRGB8::read_png(&d.join("appearance.png")).unwrap());
            assert_eq!(n, ImageRGB8::read_png(&d.join("normal.png")).unwrap());
        }
        assert!(m.samples[105].perturbed);
    }

    #[test]
    fn builtin_combinations_follow_one_hots() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::face_rig(6, 0);
        let c = DatasetConfig {
            canonical: CanonicalSource::Builtin,
            ..cfg(dir.path(), 122)
        };
        let m = synthesize_dataset(&rig, &c, &PerturbConfig::default()).unwrap();
        assert_eq!(m.base_sets.len(), 122);
        assert!(m.samples.iter().all(|s| s.pass == 0 && !s.perturbed));
        let combo = CanonicalSet::builtin().resolve(&rig).unwrap();
        let p = read_params(&dir.path().join(&m.samples[102].dir).join("params.json")).unwrap();
        assert_eq!(p.values(), combo[0].1.as_slice());
    }

    #[test]
    fn unperturbed_passes_copy_base_sets() {
        let dir = tempfile::tempdir().unwrap();
        let rig = procedural::face_rig(6, 0);
        let c = DatasetConfig {
            perturb: false,
            rigid: RigidConfig::none(),
            ..cfg(dir.path(), 2 * NUM_CONTROLS + 3)
        };
        let m = synthesize_dataset(&rig, &c, &PerturbConfig::default()).unwrap();
        for s in &m.samples {
            let d = dir.path().join(&s.dir);
            assert_eq!(read_params(&d.join("params.json")).unwrap(), RigParams::one_hot(s.base_index));
            assert!(!s.perturbed);
            let twin = dir.path().join(&m.samples[s.base_index].dir);
            assert_eq!(std::fs::read(d.join("normal.png")).unwrap(), std::fs::read(twin.join("normal.png")).unwrap());
        }
    }

    #[test]
    fn canonical_source_round_trips_as_string() {
        for (text, src) in [
            ("none", CanonicalSource::None),
            ("builtin", CanonicalSource::Builtin),
            ("exprs.json", CanonicalSource::File(PathBuf::from("exprs.json"))),
        ] {
            let json = serde_json::to_string(&src).unwrap();
            assert_eq!(json, format!("\"{text}\""));
            assert_eq!(serde_json::from_str::<CanonicalSource>(&json).unwrap(), src);
        }
    }
}
