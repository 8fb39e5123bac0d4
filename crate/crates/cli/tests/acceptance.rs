//! Acceptance suite: each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{hash_tree, ok, s, write_config, TINY_CONFIG};
use facerig::datagen::{synthesize_dataset, DatasetConfig, PerturbConfig};
use facerig::nnet::gradcheck::{check_model, primitive_checks};
use facerig::nnet::{backward, DualBranchRegressor, ModelConfig, ParamId, ParamStore, Tape, Tensor, DEFAULT_FREEZE};
use facerig::render::{decode_normal, encode_normal};
use facerig::rig::procedural::{face_rig, random_rig};
use facerig::train::{
    adamw_step, direct_fit, epoch_order, iterations_per_epoch, total_steps, AdamState, AdamWConfig, DirectFitConfig,
    DiskDataset, LossConfig, MemoryDataset, TrainConfig, Trainer,
};
use facerig::{Rig, NUM_CONTROLS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}, {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn rig_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rig = random_rig(&mut rng, 200, NUM_CONTROLS);
    let p: Vec<f64> = (0..NUM_CONTROLS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = 1e-4;
    let mut jac_err = 0.0f64;
    for i in 0..NUM_CONTROLS {
        let (mut hi, mut lo) = (p.clone(), p.clone());
        hi[i] += h;
        lo[i] -= h;
        let (mh, ml) = (rig.forward(&hi).unwrap(), rig.forward(&lo).unwrap());
        for (v, (a, b)) in mh.positions().iter().zip(ml.positions()).enumerate() {
            for k in 0..3 {
                let fd = (a[k] - b[k]) / (2.0 * h);
                jac_err = jac_err.max((fd - rig.jacobian()[i][v][k]).abs());
            }
        }
    }

    let q: Vec<f64> = (0..NUM_CONTROLS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + b * y).collect();
    let (mc, mp, mq) = (rig.forward(&combo).unwrap(), rig.forward(&p).unwrap(), rig.forward(&q).unwrap());
    let n = rig.neutral().positions();
    let mut lin_err = 0.0f64;
    for v in 0..rig.vertex_count() {
        for k in 0..3 {
            let want = n[v][k] + a * (mp.positions()[v][k] - n[v][k]) + b * (mq.positions()[v][k] - n[v][k]);
            lin_err = lin_err.max((mc.positions()[v][k] - want).abs());
        }
    }
    let detail = format!("jacobian max abs {jac_err:.2e} (<= 1e-8), linearity {lin_err:.2e} (<= 1e-10)");
    check(jac_err <= 1e-8 && lin_err <= 1e-10, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(10), detail)
}

fn normal_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bound = 1.0 / 255.0 + 1e-9;
    let mut worst = 0.0f64;
    let mut drawn = 0;
    while drawn < 10_000 {
        let v: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(1e-3..=1.0).contains(&len) {
            continue;
        }
        let n = v.map(|c| c / len);
        let back: [f64; 3] = decode_normal(encode_normal(n).unwrap());
        for k in 0..3 {
            worst = worst.max((back[k] - n[k]).abs());
        }
        drawn += 1;
    }
    let up = encode_normal([0.0, 0.0, 1.0]).unwrap();
    check(
        worst <= bound && up == [128, 128, 255],
        format!("max channel error {worst:.3e} (<= {bound:.6e}), encode(0,0,1) = {up:?}"),
    )
}

fn schedule() -> Outcome {
    let ipe = iterations_per_epoch(22_575, 32);
    let batches = epoch_order(22_575, 0, 0).chunks(32).count();
    let total = total_steps(22_575, 32, 200);
    check(
        ipe == 706 && batches == 706 && total == 141_200,
        format!("{ipe} iterations/epoch, {batches} loader batches, {total} total steps"),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let prims = primitive_checks(0).map_err(|e| e.to_string())?;
    let worst = prims.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    let prim_ok = prims.iter().all(|r| r.passes(1e-7));
    let model = check_model(&ModelConfig::default(), 0, 100, true).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} primitives worst {} {:.2e} (<= 1e-7), model f64 {} weights max rel {:.2e} (<= 1e-5), {} kinks redrawn",
        prims.len(),
        worst.name,
        worst.max_rel,
        model.checked,
        model.max_rel,
        model.kinks_skipped
    );
    check(prim_ok && model.checked >= 100 && model.passes(1e-5), detail.clone())?;
    within(t.elapsed(), Duration::from_secs(120), detail)
}

/// 64 px samples from the procedural face rig; indices 102.. are the first
/// perturbed, rigidly jittered pass.
fn face_samples() -> (Rig, MemoryDataset<f32>) {
    let dir = tempfile::tempdir().unwrap();
    let rig = face_rig(32, 0);
    let cfg = DatasetConfig {
        total_samples: 122,
        resolution: 64,
        seed: 3,
        output_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    synthesize_dataset(&rig, &cfg, &PerturbConfig::default()).unwrap();
    let all: MemoryDataset<f32> = DiskDataset::open(dir.path(), 64).unwrap().load_all().unwrap();
    let samples = all.samples[102..118].to_vec();
    (rig, MemoryDataset { samples })
}

fn freeze_contract(rig: &Rig, data: &MemoryDataset<f32>) -> Outcome {
    let model = DualBranchRegressor::<f32>::new(ModelConfig::default(), 0).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_steps: Some(10),
        ..Default::default()
    };
    let mut tr = Trainer::new(model, rig, cfg, LossConfig::default()).unwrap();
    tr.run(data, None).map_err(|e| e.to_string())?;

    let frozen: Vec<String> = tr.model.resolve_groups(&DEFAULT_FREEZE).unwrap();
    let (mut held, mut moved, mut bad) = (0, 0, Vec::new());
    for ((_, a), (_, b)) in before.params().iter().zip(tr.model.params().iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if frozen.contains(&a.group) {
            if same {
                held += 1;
            } else {
                bad.push(format!("{} moved", a.name));
            }
        } else if a.group == "head" || a.group.ends_with(".stage4") {
            if same {
                bad.push(format!("{} did not move", a.name));
            } else {
                moved += 1;
            }
        }
    }
    check(
        tr.step == 10 && bad.is_empty() && held > 0 && moved > 0,
        format!("{} steps, {held} frozen tensors bitwise equal, {moved} stage-4/head tensors changed {bad:?}", tr.step),
    )
}

fn overfit(rig: &Rig, data: &MemoryDataset<f32>) -> Outcome {
    let t = Instant::now();
    let model = DualBranchRegressor::<f32>::new(ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_steps: Some(300),
        epochs: 300,
        ..Default::default()
    };
    let mut tr = Trainer::new(model, rig, cfg, LossConfig::default()).unwrap();
    let run = tr.run(data, None).map_err(|e| e.to_string())?;
    let first = run.rows[0].total;
    let best = run.best_total().unwrap();
    let last = run.rows.last().unwrap().total;
    let detail = format!(
        "{} steps, step-1 loss {first:.4e}, best {best:.4e} (ratio {:.3}, need <= 0.1), last {last:.4e}",
        run.rows.len(),
        best / first
    );
    check(run.rows.len() == 300 && best <= 0.1 * first, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(300), detail)
}

fn direct_fit_recovery() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rig = random_rig(&mut rng, 200, NUM_CONTROLS);
    let cfg = DirectFitConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let truth: Vec<f64> = (0..NUM_CONTROLS).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = rig.forward(&truth).unwrap();
        let fit = direct_fit(&rig, &target, &cfg).map_err(|e| e.to_string())?;
        let err = fit.params.values().iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let detail = format!("10 targets, {} steps, worst L∞ {worst:.2e} (<= 1e-3)", cfg.steps);
    check(cfg.steps <= 500 && worst <= 1e-3, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(60), detail)
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let rig_dir = root.join("rig");
    ok(&["make-rig", "--out", s(&rig_dir), "--grid", "12"]);
    let rig = rig_dir.join("rig.json");
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        ok(&["gen-data", "--rig", s(&rig), "--out", s(&out), "--seed", "5", "--samples", "130", "--resolution", "32"]);
        hashes.push(hash_tree(&out));
    }

    let config = write_config(root, TINY_CONFIG);
    let mut logs = Vec::new();
    for name in ["r1", "r2"] {
        let out = root.join(name);
        ok(&[
            "train",
            "--deterministic",
            "--config",
            s(&config),
            "--data",
            s(&root.join("a")),
            "--rig",
            s(&rig),
            "--out",
            s(&out),
            "--seed",
            "1",
            "--batch",
            "8",
            "--max-steps",
            "50",
        ]);
        logs.push(std::fs::read(out.join("loss.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&logs[0]).lines().count() - 1;
    check(
        hashes[0] == hashes[1] && logs[0] == logs[1] && rows == 50,
        format!(
            "dataset hashes {} / {}, {rows}-row loss CSV identical: {}",
            &hashes[0][..12],
            &hashes[1][..12],
            logs[0] == logs[1]
        ),
    )
}

fn adamw_single_step() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    store.add("w", "g", Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut state = AdamState::new(&store);
    let tape = Tape::new();
    let w = tape.param(&store, ParamId(0));
    backward(&w.sum().unwrap(), &mut store).unwrap();
    let grad = store.get(ParamId(0)).grad()[0];
    let cfg = AdamWConfig::default();
    adamw_step(&mut store, &mut state, &cfg).unwrap();
    let got = store.get(ParamId(0)).data()[0];
    // t = 1, g = 1: both bias-corrected moments are 1
    let want = 1.0 - cfg.lr * cfg.weight_decay - cfg.lr / (1.0 + cfg.eps);
    check(
        grad == 1.0 && (got - want).abs() <= 1e-9,
        format!("w' = {got:.12} vs {want:.12} (lr {}, wd {}, eps {})", cfg.lr, cfg.weight_decay, cfg.eps),
    )
}

fn run(out: &mut impl Write, id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail, pass) = match result {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    writeln!(out, "[{tag}] {id}. {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64()).unwrap();
    out.flush().unwrap();
    pass
}

fn main() {
    // failures are reported through the per-criterion lines
    std::panic::set_hook(Box::new(|_| {}));
    let mut out = std::io::stdout();
    let mut passed = Vec::new();
    passed.push(run(&mut out, 1, "rig exactness", rig_exactness));
    passed.push(run(&mut out, 2, "normal codec", normal_codec));
    passed.push(run(&mut out, 3, "schedule arithmetic", schedule));
    passed.push(run(&mut out, 4, "gradient correctness", gradients));
    let (rig, data) = face_samples();
    passed.push(run(&mut out, 5, "freeze contract", || freeze_contract(&rig, &data)));
    passed.push(run(&mut out, 6, "overfit smoke", || overfit(&rig, &data)));
    passed.push(run(&mut out, 7, "direct-fit recovery", direct_fit_recovery));
    passed.push(run(&mut out, 8, "determinism", determinism));
    passed.push(run(&mut out, 9, "AdamW single step", adamw_single_step));

    let n = passed.iter().filter(|&&p| p).count();
    writeln!(out, "acceptance: {n}/{} criteria passed", passed.len()).unwrap();
    if n != passed.len() {
        std::process::exit(1);
    }
}
