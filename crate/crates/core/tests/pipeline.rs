use std::path::Path;

use facerig::datagen::{preprocess_image, read_params, synthesize_dataset, DatasetConfig, DatasetManifest, PerturbConfig};
use facerig::nnet::checkpoint::{load_model, save_model};
use facerig::nnet::{DualBranchRegressor, ModelConfig};
use facerig::rig::procedural::face_rig;
use facerig::rig::RigidConfig;
use facerig::train::{evaluate, DiskDataset, LossConfig, MemoryDataset, SampleSource, TrainConfig, Trainer};
use facerig::Rig;

const RES: usize = 32;

/// Generates a full 104-sample dataset and keeps the first `keep` records.
fn dataset(dir: &Path, keep: usize) -> (Rig, DatasetManifest) {
    let rig = face_rig(12, 0);
    let cfg = DatasetConfig {
        total_samples: 104,
        resolution: RES,
        seed: 11,
        output_dir: dir.to_path_buf(),
        rigid: RigidConfig::default(),
        ..Default::default()
    };
    let mut manifest = synthesize_dataset(&rig, &cfg, &PerturbConfig::default()).unwrap();
    manifest.samples.truncate(keep);
    (rig, manifest)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        resolution: RES,
        patch_size: 4,
        dims: [8, 16, 16, 32],
        depths: [1, 0, 1, 1],
        heads: [1, 2, 2, 4],
        head_hidden: 16,
        ..Default::default()
    }
}

#[test]
fn ground_truth_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (rig, manifest) = dataset(dir.path(), 6);
    let out = dir.path().join("eval");
    let report = evaluate(dir.path(), &manifest, &rig, Some(&out), |rec, _, _| {
        Ok(read_params(&dir.path().join(&rec.dir).join("params.json"))?.into_values())
    })
    .unwrap();
    assert_eq!(report.count, manifest.samples.len());
    assert_eq!(report.scored, report.count);
    assert_eq!(report.mean_param_mse, Some(0.0));
    assert_eq!(report.mean_vertex_l1, Some(0.0));
    assert_eq!(report.mean_vertex_l2, Some(0.0));
    for s in &report.samples {
        let png = s.render.as_ref().unwrap();
        assert!(png.exists());
    }
    assert!(out.join("eval_report.json").exists());
}

#[test]
fn shifted_prediction_matches_hand_computed_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (rig, manifest) = dataset(dir.path(), 4);
    let (k, step) = (17, 0.25);
    let report = evaluate(dir.path(), &manifest, &rig, None, |rec, _, _| {
        let mut p = read_params(&dir.path().join(&rec.dir).join("params.json"))?.into_values();
        p[k] += step;
        Ok(p)
    })
    .unwrap();
    // only one control moved: every vertex is displaced by step·delta_k
    let d = &rig.deltas()[k];
    let l1 = d.iter().map(|v| step * (v[0].abs() + v[1].abs() + v[2].abs())).sum::<f64>() / d.len() as f64;
    let l2 = d.iter().map(|v| step * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum::<f64>() / d.len() as f64;
    let mse = step * step / 102.0;
    for s in &report.samples {
        assert!((s.vertex_l1.unwrap() - l1).abs() < 1e-12);
        assert!((s.vertex_l2.unwrap() - l2).abs() < 1e-12);
        assert!((s.param_mse.unwrap() - mse).abs() < 1e-15);
        assert!(s.render.is_none());
    }
}

#[test]
fn missing_ground_truth_is_unscored_but_rendered() {
    let dir = tempfile::tempdir().unwrap();
    let (rig, manifest) = dataset(dir.path(), 3);
    let gone = &manifest.samples[1].dir;
    std::fs::remove_file(dir.path().join(gone).join("params.json")).unwrap();
    let out = dir.path().join("eval");
    let report = evaluate(dir.path(), &manifest, &rig, Some(&out), |_, _, _| Ok(vec![0.0; 102])).unwrap();
    assert_eq!(report.count, 3);
    assert_eq!(report.scored, 2);
    let s = &report.samples[1];
    assert_eq!((s.param_mse, s.vertex_l1, s.vertex_l2), (None, None, None));
    assert!(s.render.as_ref().unwrap().exists());
}

#[test]
fn train_checkpoint_and_predict_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (rig, manifest) = dataset(dir.path(), 8);
    let disk = DiskDataset::open(dir.path(), RES).unwrap();
    assert_eq!(disk.manifest.samples.len(), 104);
    let all: MemoryDataset<f32> = disk.load_all().unwrap();
    let data = MemoryDataset { samples: all.samples[100..].to_vec() };
    assert_eq!(data.samples[0], SampleSource::<f32>::get(&disk, 100).unwrap());
    let model = DualBranchRegressor::<f32>::new(tiny_model(), 3).unwrap();
    let cfg = TrainConfig { lr: 1e-3, batch_size: 3, epochs: 3, ..Default::default() };
    let mut trainer = Trainer::new(model, &rig, cfg, LossConfig::default()).unwrap();
    let out = dir.path().join("run");
    let summary = trainer.run(&data, Some(&out)).unwrap();
    assert_eq!(summary.final_step, 6);
    assert_eq!(summary.rows.len(), 6);
    assert!(summary.rows.iter().all(|r| r.total.is_finite()));

    let ckpt = summary.checkpoints.last().unwrap();
    let loaded = load_model::<f32>(ckpt).unwrap();
    let rec = &manifest.samples[0];
    let sample_dir = dir.path().join(&rec.dir);
    let a = preprocess_image::<f32>(&facerig::render::ImageRGB8::read_png(&sample_dir.join("appearance.png")).unwrap(), RES);
    let n = preprocess_image::<f32>(&facerig::render::ImageRGB8::read_png(&sample_dir.join("normal.png")).unwrap(), RES);
    let p1 = trainer.model.predict(&a, &n).unwrap();
    let p2 = loaded.predict(&a, &n).unwrap();
    assert_eq!(p1.data(), p2.data());
    assert_eq!(p1.shape(), &[1, 102]);

    let again = dir.path().join("again");
    save_model(&loaded, &again).unwrap();
    assert_eq!(load_model::<f32>(&again).unwrap().predict(&a, &n).unwrap().data(), p1.data());
}
