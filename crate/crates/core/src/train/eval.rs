use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{read_params, DatasetManifest, SampleRecord};
use crate::error::{contract, write_json, Error, Result};
use crate::render::{ImageRGB8, SceneRenderer};
use crate::rig::{BlendRig, TriMesh};

pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: usize,
    pub dir: String,
    pub prediction: Vec<f64>,
    /// `None` when the sample has no ground-truth parameters.
    pub param_mse: Option<f64>,
    pub vertex_l1: Option<f64>,
    pub vertex_l2: Option<f64>,
    pub render: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    /// Samples that had ground truth.
    pub scored: usize,
    pub mean_param_mse: Option<f64>,
    pub mean_vertex_l1: Option<f64>,
    pub mean_vertex_l2: Option<f64>,
    pub samples: Vec<SampleEval>,
}

/// `(mean_v ‖a_v − b_v‖₁, mean_v ‖a_v − b_v‖₂)` in model units.
pub fn vertex_errors(a: &TriMesh<f64>, b: &TriMesh<f64>) -> Result<(f64, f64)> {
    contract!(
        a.vertex_count() == b.vertex_count() && a.vertex_count() > 0,
        "meshes have {} and {} vertices",
        a.vertex_count(),
        b.vertex_count()
    );
    let (mut l1, mut l2) = (0.0, 0.0);
    for (p, q) in a.positions().iter().zip(b.positions()) {
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        l1 += d[0].abs() + d[1].abs() + d[2].abs();
        l2 += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    let n = a.vertex_count() as f64;
    Ok((l1 / n, l2 / n))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores `predict` on every sample of a generated dataset.
///
/// `predict` receives the sample record and its appearance and normal images.
/// Metrics compare the rig decodes of prediction and ground truth, without
/// the sample's rigid transform. With `out`, writes
/// `out/renders/<id>.png` (input appearance | render of the prediction) and
/// `out/eval_report.json`.
pub fn evaluate(
    root: &Path,
    manifest: &DatasetManifest,
    rig: &BlendRig<f64>,
    out: Option<&Path>,
    mut predict: impl FnMut(&SampleRecord, &ImageRGB8, &ImageRGB8) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let renderer = out
        .map(|_| {
            SceneRenderer::new(
                rig.neutral(),
                manifest.config.resolution,
                manifest.config.lights,
                manifest.config.normal_space,
            )
        })
        .transpose()?;
    if let Some(dir) = out {
        let r = dir.join("renders");
        std::fs::create_dir_all(&r).map_err(|e| Error::io(&r, e))?;
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let dir = root.join(&rec.dir);
        let a = ImageRGB8::read_png(&dir.join("appearance.png"))?;
        let n = ImageRGB8::read_png(&dir.join("normal.png"))?;
        let pred = predict(rec, &a, &n)?;
        let mesh = rig.forward(&pred)?;
        let gt_path = dir.join("params.json");
        let (param_mse, vertex_l1, vertex_l2) = if gt_path.exists() {
            let gt = read_params(&gt_path)?;
            let k = gt.values().len();
            let mse = pred.iter().zip(gt.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / k as f64;
            let (l1, l2) = vertex_errors(&mesh, &rig.forward_params(&gt)?)?;
            (Some(mse), Some(l1), Some(l2))
        } else {
            (None, None, None)
        };
        let render = match (out, &renderer) {
            (Some(o), Some(r)) => {
                let path = o.join("renders").join(format!("{}.png", rec.dir));
                a.hconcat(&r.appearance(&mesh)?)?.write_png(&path)?;
                Some(path)
            }
            _ => None,
        };
        samples.push(SampleEval {
            id: rec.id,
            dir: rec.dir.clone(),
            prediction: pred,
            param_mse,
            vertex_l1,
            vertex_l2,
            render,
        });
    }
    let report = EvalReport {
        count: samples.len(),
        scored: samples.iter().filter(|s| s.param_mse.is_some()).count(),
        mean_param_mse: mean(samples.iter().filter_map(|s| s.param_mse)),
        mean_vertex_l1: mean(samples.iter().filter_map(|s| s.vertex_l1)),
        mean_vertex_l2: mean(samples.iter().filter_map(|s| s.vertex_l2)),
        samples,
    };
    if let Some(dir) = out {
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok(report)
}
