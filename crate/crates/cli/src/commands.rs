use std::path::{Path, PathBuf};

use anyhow::Context;
use facerig::datagen::{
    preprocess_image, read_params, synthesize_dataset, write_params, DatasetManifest, MANIFEST_FILE,
};
use facerig::nnet::checkpoint::load_model;
use facerig::nnet::gradcheck::{check_model, primitive_checks, CheckReport};
use facerig::nnet::{DualBranchRegressor, DEFAULT_FREEZE};
use facerig::render::{ImageRGB8, NormalSpace, SceneRenderer};
use facerig::rig::obj::read_obj;
use facerig::rig::procedural::face_rig;
use facerig::rig::{load_rig, save_rig};
use facerig::train::{
    direct_fit as fit, evaluate, DiskDataset, MemoryDataset, SampleSource, Trainer,
};
use facerig::{Params, Regressor, Rig};
use serde::Serialize;

use crate::config::{flag, RunConfig};
use crate::{
    DirectFitArgs, EvalArgs, Failure, GenDataArgs, GradcheckArgs, InferArgs, MakeRigArgs, RenderArgs, TrainArgs,
};

/// Preprocessed datasets up to this size are kept in memory during training.
const CACHE_BYTES: usize = 1 << 30;
const PRIMITIVE_TOL: f64 = 1e-7;
const MODEL_TOL_F64: f64 = 1e-5;
const MODEL_TOL_F32: f64 = 1e-3;

type Outcome = Result<(), Failure>;

fn require<T>(v: Option<T>, what: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("{what} is required (flag or config file)")))
}

fn set_paths(cfg: &mut RunConfig, rig: Option<PathBuf>, data: Option<PathBuf>) {
    flag!(cfg, rig.map(Some) => rig);
    flag!(cfg, data.map(Some) => data);
}

fn open_rig(cfg: &RunConfig) -> Result<Rig, Failure> {
    let path = require(cfg.rig.clone(), "--rig")?;
    Ok(load_rig(&path).with_context(|| format!("loading rig {}", path.display()))?)
}

fn parse_normal_space(s: &str) -> Result<NormalSpace, Failure> {
    s.parse().map_err(|e: facerig::Error| Failure::Usage(e.to_string()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn make_rig(a: MakeRigArgs) -> Outcome {
    if a.grid < 4 {
        return Err(Failure::Usage("--grid must be at least 4".into()));
    }
    let path = save_rig(&face_rig(a.grid, a.seed), &a.out)?;
    println!("wrote rig {}", path.display());
    Ok(())
}

pub fn gen_data(a: GenDataArgs, config: Option<&Path>) -> Outcome {
    let mut cfg = RunConfig::from_optional(config)?;
    set_paths(&mut cfg, a.rig, None);
    flag!(cfg, a.seed.map(Some) => seed);
    let seed = require(cfg.seed, "--seed")?;
    cfg.dataset.seed = seed;
    flag!(cfg, a.samples => dataset.total_samples);
    flag!(cfg, a.resolution => dataset.resolution);
    flag!(cfg, a.no_perturb.then_some(false) => dataset.perturb);
    flag!(cfg, a.rigid => dataset.rigid.rotation_deg);
    if a.rigid == Some(0.0) && a.rigid_translation.is_none() {
        flag!(cfg, Some(0.0) => dataset.rigid.translation_frac);
    }
    flag!(cfg, a.rigid_translation => dataset.rigid.translation_frac);
    flag!(cfg, a.canonical.map(|s| s.parse().expect("infallible")) => dataset.canonical);
    if let Some(s) = &a.normal_space {
        let ns = parse_normal_space(s)?;
        flag!(cfg, Some(ns) => dataset.normal_space);
    }
    let rig = open_rig(&cfg)?;
    cfg.dataset.output_dir = a.out.clone();
    let manifest = synthesize_dataset(&rig, &cfg.dataset, &cfg.perturb)?;
    cfg.echo(&a.out, "gen-data")?;
    println!("wrote {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}

fn freeze_list(spec: &str) -> Vec<String> {
    match spec {
        "default" => DEFAULT_FREEZE.iter().map(|s| s.to_string()).collect(),
        "none" | "" => Vec::new(),
        list => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    }
}

/// The first `limit` samples of `disk`, preprocessed, or `None` when the
/// dataset should be streamed from disk.
fn cached(disk: &DiskDataset, limit: Option<usize>, resolution: usize) -> Result<Option<MemoryDataset<f32>>, Failure> {
    let total = disk.manifest.samples.len();
    let n = limit.map_or(total, |l| l.min(total));
    let bytes = n * 2 * 3 * resolution * resolution * std::mem::size_of::<f32>();
    if limit.is_none() && bytes > CACHE_BYTES {
        return Ok(None);
    }
    let samples = (0..n)
        .map(|i| SampleSource::<f32>::get(disk, i))
        .collect::<facerig::Result<Vec<_>>>()?;
    Ok(Some(MemoryDataset { samples }))
}

pub fn train(a: TrainArgs, config: Option<&Path>) -> Outcome {
    let mut cfg = RunConfig::from_optional(config)?;
    set_paths(&mut cfg, a.rig, a.data);
    flag!(cfg, a.seed.map(Some) => seed);
    let seed = require(cfg.seed, "--seed")?;
    cfg.train.seed = seed;
    flag!(cfg, a.epochs => train.epochs);
    flag!(cfg, a.batch => train.batch_size);
    flag!(cfg, a.lr => train.lr);
    flag!(cfg, a.lambda => loss.lambda_mesh);
    flag!(cfg, a.max_steps.map(Some) => train.max_steps);
    flag!(cfg, a.checkpoint_every => train.checkpoint_every);
    flag!(cfg, a.limit.map(Some) => limit);
    flag!(cfg, a.freeze.as_deref().map(freeze_list) => model.frozen);
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.loss.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let rig = open_rig(&cfg)?;
    let data_path = require(cfg.data.clone(), "--data")?;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let tr = Trainer::<f32>::resume(dir, &rig, cfg.train.clone(), cfg.loss)
                .with_context(|| format!("resuming from {}", dir.display()))?;
            cfg.model = tr.model.config().clone();
            cfg.model.frozen = tr.model.frozen_groups();
            tr
        }
        None => {
            let model = DualBranchRegressor::<f32>::new(cfg.model.clone(), seed)?;
            Trainer::new(model, &rig, cfg.train.clone(), cfg.loss)?
        }
    };
    let frozen = trainer.model.frozen_groups();
    println!(
        "frozen groups: {}",
        if frozen.is_empty() { "(none)".to_string() } else { frozen.join(", ") }
    );
    println!(
        "trainable parameters: {} of {}",
        trainer.model.params().trainable_count(),
        trainer.model.params().param_count()
    );

    let resolution = trainer.model.config().resolution;
    let disk = DiskDataset::open(&data_path, resolution)?;
    cfg.echo(&a.out, "train")?;
    let summary = match cached(&disk, cfg.limit, resolution)? {
        Some(mem) => trainer.run(&mem, Some(&a.out))?,
        None => trainer.run(&disk, Some(&a.out))?,
    };
    if let Some(last) = summary.rows.last() {
        println!(
            "step {} epoch {} mse {:.6} mesh {:.6} total {:.6}",
            last.step, last.epoch, last.mse_term, last.mesh_term, last.total
        );
    }
    if let Some(c) = summary.checkpoints.last() {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn read_input(path: &Path, resolution: usize) -> Result<facerig::nnet::Tensor<f32>, Failure> {
    let img = ImageRGB8::read_png(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(preprocess_image(&img, resolution))
}

fn predict(model: &Regressor, a: &ImageRGB8, n: &ImageRGB8) -> facerig::Result<Vec<f64>> {
    let r = model.config().resolution;
    let out = model.predict(&preprocess_image(a, r), &preprocess_image(n, r))?;
    Ok(out.data().iter().map(|&v| v as f64).collect())
}

#[derive(Serialize)]
struct ValuesFile {
    values: Vec<f64>,
}

pub fn infer(a: InferArgs) -> Outcome {
    let model: Regressor = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let r = model.config().resolution;
    let ia = read_input(&a.appearance, r)?;
    let inn = read_input(&a.normal, r)?;
    let values: Vec<f64> = model.predict(&ia, &inn)?.data().iter().map(|&v| v as f64).collect();
    let out = ValuesFile { values };
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string(&out).map_err(anyhow::Error::from)?),
    }
    Ok(())
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> Outcome {
    let mut cfg = RunConfig::from_optional(config)?;
    set_paths(&mut cfg, a.rig, a.data);
    let rig = open_rig(&cfg)?;
    let data = require(cfg.data.clone(), "--data")?;
    let (root, file) = if data.is_dir() {
        (data.clone(), data.join(MANIFEST_FILE))
    } else {
        (data.parent().unwrap_or(Path::new(".")).to_path_buf(), data.clone())
    };
    let manifest = DatasetManifest::load(&file)?;
    let model: Regressor = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let report = evaluate(&root, &manifest, &rig, Some(&a.out), |_, ia, inn| predict(&model, ia, inn))?;
    cfg.echo(&a.out, "eval")?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    println!(
        "samples {} scored {} param_mse {} vertex_l1 {} vertex_l2 {}",
        report.count,
        report.scored,
        show(report.mean_param_mse),
        show(report.mean_vertex_l1),
        show(report.mean_vertex_l2)
    );
    Ok(())
}

pub fn render(a: RenderArgs, config: Option<&Path>) -> Outcome {
    let mut cfg = RunConfig::from_optional(config)?;
    set_paths(&mut cfg, a.rig, None);
    flag!(cfg, a.resolution => dataset.resolution);
    if let Some(s) = &a.normal_space {
        let ns = parse_normal_space(s)?;
        flag!(cfg, Some(ns) => dataset.normal_space);
    }
    let rig = open_rig(&cfg)?;
    let p: Params = read_params(&a.params)?;
    let mesh = rig.forward_params(&p)?;
    let renderer = SceneRenderer::new(rig.neutral(), cfg.dataset.resolution, cfg.dataset.lights, cfg.dataset.normal_space)?;
    let (app, nrm) = renderer.render_pair(&mesh)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    app.write_png(&a.out.join("appearance.png"))?;
    nrm.write_png(&a.out.join("normal.png"))?;
    cfg.echo(&a.out, "render")?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    precision: &'static str,
    primitive_tolerance: f64,
    model_tolerance: f64,
    primitives: &'a [CheckReport],
    model: &'a CheckReport,
    passed: bool,
}

pub fn gradcheck(a: GradcheckArgs, config: Option<&Path>) -> Outcome {
    let cfg = RunConfig::from_optional(config)?;
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be positive".into()));
    }
    let prims = primitive_checks(a.seed)?;
    let mut ok = true;
    for r in &prims {
        let pass = r.passes(PRIMITIVE_TOL);
        ok &= pass;
        println!("{:<16} max_rel {:.3e}  {}", r.name, r.max_rel, if pass { "ok" } else { "FAIL" });
    }
    let tol = if a.double { MODEL_TOL_F64 } else { MODEL_TOL_F32 };
    let model = check_model(&cfg.model, a.seed, a.samples, a.double)?;
    let pass = model.passes(tol);
    ok &= pass;
    println!(
        "model ({}) {} weights, {} kinks skipped, max_rel {:.3e}  {}",
        if a.double { "f64" } else { "f32" },
        model.checked,
        model.kinks_skipped,
        model.max_rel,
        if pass { "ok" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        write_json(
            out,
            &GradcheckReport {
                precision: if a.double { "f64" } else { "f32" },
                primitive_tolerance: PRIMITIVE_TOL,
                model_tolerance: tol,
                primitives: &prims,
                model: &model,
                passed: ok,
            },
        )?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient mismatch above tolerance (primitives {PRIMITIVE_TOL:e}, model {tol:e})"
        )))
    }
}

#[derive(Serialize)]
struct DirectFitOutput {
    values: Vec<f64>,
    objective: f64,
    best_step: usize,
    linf_error: Option<f64>,
}

pub fn direct_fit(a: DirectFitArgs, config: Option<&Path>) -> Outcome {
    let mut cfg = RunConfig::from_optional(config)?;
    set_paths(&mut cfg, a.rig, None);
    flag!(cfg, a.steps => direct_fit.steps);
    flag!(cfg, a.lr => direct_fit.lr);
    let rig = open_rig(&cfg)?;
    let (target, truth) = match (&a.target, &a.params) {
        (Some(t), _) => (read_obj(t)?, None),
        (None, Some(p)) => {
            let p: Params = read_params(p)?;
            (rig.forward_params(&p)?, Some(p))
        }
        (None, None) => return Err(Failure::Usage("one of --target or --params is required".into())),
    };
    let res = fit(&rig, &target, &cfg.direct_fit)?;
    let linf = truth.as_ref().map(|t| {
        res.params
            .values()
            .iter()
            .zip(t.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
    let out = DirectFitOutput {
        values: res.params.values().to_vec(),
        objective: res.objective,
        best_step: res.best_step,
        linf_error: linf,
    };
    match &a.out {
        Some(p) => {
            write_json(p, &out)?;
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                cfg.echo(dir, "direct-fit")?;
            }
            let params = p.with_extension("params.json");
            write_params(&params, &res.params)?;
        }
        None => println!("{}", serde_json::to_string(&out).map_err(anyhow::Error::from)?),
    }
    match linf {
        Some(e) => {
            println!("objective {:.3e} linf_error {e:.3e}", res.objective);
            if e > a.tol {
                return Err(Failure::Numeric(format!("recovery error {e:.3e} exceeds {:.1e}", a.tol)));
            }
        }
        None => println!("objective {:.3e}", res.objective),
    }
    Ok(())
}
