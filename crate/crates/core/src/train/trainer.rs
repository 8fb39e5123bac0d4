use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, read_json, write_json, Error, Result};
use crate::nnet::checkpoint::{load_model, read_blob, save_model, write_blob};
use crate::nnet::{backward, DualBranchRegressor, Tape};
use crate::rig::BlendRig;
use crate::train::adamw::{adamw_step, AdamState, AdamWConfig};
use crate::train::data::{collate, load_batch, Sample, SampleSource};
use crate::train::loss::{loss, LossConfig, RigOperator};
use crate::Scalar;

pub const LOG_FILE: &str = "loss.csv";
pub const LOG_HEADER: &str = "step,epoch,mse_term,mesh_term,total";
pub const STATE_FILE: &str = "train_state.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Stop after this many total steps, if set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        TrainConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("invalid AdamW hyperparameters".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Batches per epoch with the final partial batch kept.
pub fn iterations_per_epoch(samples: usize, batch: usize) -> usize {
    assert!(batch > 0, "batch size must be positive");
    samples.div_ceil(batch)
}

pub fn total_steps(samples: usize, batch: usize, epochs: usize) -> u64 {
    (epochs * iterations_per_epoch(samples, batch)) as u64
}

/// Sample order for `epoch`, a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub mse_term: f64,
    pub mesh_term: f64,
    pub total: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.epoch, self.mse_term, self.mesh_term, self.total
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Invalid(format!("malformed loss log row: {line}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            mse_term: f[2].parse().map_err(|_| bad())?,
            mesh_term: f[3].parse().map_err(|_| bad())?,
            total: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m: String,
    v: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    adam_t: u64,
    dtype: String,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn best_total(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.total).reduce(f64::min)
    }
}

/// Model, optimizer state and step counter of one training run.
pub struct Trainer<T> {
    pub model: DualBranchRegressor<T>,
    pub state: AdamState<T>,
    pub step: u64,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    rig: RigOperator<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DualBranchRegressor<T>, rig: &BlendRig<f64>, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        contract!(
            rig.control_count() == model.config().out_dim,
            "rig has {} controls, model predicts {}",
            rig.control_count(),
            model.config().out_dim
        );
        let state = AdamState::new(model.params());
        Ok(Trainer {
            model,
            state,
            step: 0,
            cfg,
            loss,
            rig: RigOperator::new(rig),
        })
    }

    /// Restores model, moments and step from a checkpoint directory.
    pub fn resume(dir: &Path, rig: &BlendRig<f64>, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        let model = load_model::<T>(dir)?;
        let mut tr = Trainer::new(model, rig, cfg, loss)?;
        let sf: StateFile = read_json(&dir.join(STATE_FILE))?;
        for (id, p) in tr.model.params().iter() {
            let Some(e) = sf.moments.iter().find(|e| e.name == p.name) else {
                continue;
            };
            tr.state.m[id.0] = read_blob(&dir.join(&e.m), &sf.dtype, p.numel())?;
            tr.state.v[id.0] = read_blob(&dir.join(&e.v), &sf.dtype, p.numel())?;
        }
        tr.state.t = sf.adam_t;
        tr.step = sf.step;
        Ok(tr)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        save_model(&self.model, dir)?;
        let mut moments = Vec::new();
        for (id, p) in self.model.params().iter() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (format!("optim/{}.m.bin", p.name), format!("optim/{}.v.bin", p.name));
            write_blob(&dir.join(&m), &self.state.m[id.0])?;
            write_blob(&dir.join(&v), &self.state.v[id.0])?;
            moments.push(MomentEntry {
                name: p.name.clone(),
                m,
                v,
            });
        }
        write_json(
            &dir.join(STATE_FILE),
            &StateFile {
                step: self.step,
                adam_t: self.state.t,
                dtype: T::DTYPE.into(),
                moments,
            },
        )?;
        Ok(dir.to_path_buf())
    }

    /// Loss terms `(mse, mesh, total)` of a batch without updating anything.
    pub fn evaluate_batch(&self, batch: &[Sample<T>]) -> Result<(f64, f64, f64)> {
        let (a, n, p) = collate(batch)?;
        let tape = Tape::new();
        let pred = self.model.forward(&tape, &a, &n)?;
        let terms = loss(&pred, &p, &self.rig, &self.loss)?;
        Ok((terms.mse, terms.mesh, terms.total.item()?.f64()))
    }

    /// Forward, loss, backward and one AdamW update; returns the loss terms
    /// measured before the update.
    pub fn train_step(&mut self, batch: &[Sample<T>]) -> Result<(f64, f64, f64)> {
        let (a, n, p) = collate(batch)?;
        let tape = Tape::new();
        let pred = self.model.forward(&tape, &a, &n)?;
        let terms = loss(&pred, &p, &self.rig, &self.loss)?;
        let total = terms.total.item()?.f64();
        if !total.is_finite() {
            return Err(Error::Invalid(format!("loss became non-finite at step {}", self.step + 1)));
        }
        let store = self.model.params_mut();
        store.zero_grad();
        backward(&terms.total, store)?;
        adamw_step(store, &mut self.state, &self.cfg.adamw())?;
        self.step += 1;
        Ok((terms.mse, terms.mesh, total))
    }

    /// Runs up to `epochs × ceil(N / batch)` total steps (or `max_steps`),
    /// continuing from the current step. With `out`, appends to
    /// `out/loss.csv` and writes checkpoints under `out/checkpoints/`.
    pub fn run(&mut self, data: &dyn SampleSource<T>, out: Option<&Path>) -> Result<TrainSummary> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        let first = data.get(0)?;
        let r = self.model.config().resolution;
        let want = [self.model.config().channels, r, r];
        if first.appearance.shape() != want || first.normal.shape() != want {
            return Err(Error::Invalid(format!(
                "samples are {:?}, model expects {want:?}",
                first.appearance.shape()
            )));
        }
        let ipe = iterations_per_epoch(n, self.cfg.batch_size) as u64;
        let mut target = total_steps(n, self.cfg.batch_size, self.cfg.epochs);
        if let Some(m) = self.cfg.max_steps {
            target = target.min(m);
        }
        let mut log = match out {
            Some(dir) => Some(self.open_log(dir)?),
            None => None,
        };
        let mut summary = TrainSummary {
            steps_run: 0,
            final_step: self.step,
            rows: Vec::new(),
            checkpoints: Vec::new(),
        };
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.step < target {
            let epoch = self.step / ipe;
            if order.as_ref().map(|o| o.0) != Some(epoch) {
                order = Some((epoch, epoch_order(n, self.cfg.seed, epoch)));
            }
            let ord = &order.as_ref().unwrap().1;
            let b = (self.step % ipe) as usize * self.cfg.batch_size;
            let idx = &ord[b..(b + self.cfg.batch_size).min(n)];
            let batch = load_batch(data, idx)?;
            let (mse, mesh, total) = self.train_step(&batch)?;
            let row = LogRow {
                step: self.step,
                epoch,
                mse_term: mse,
                mesh_term: mesh,
                total,
            };
            log::debug!("step {} epoch {epoch} loss {total:.6}", self.step);
            if let Some(l) = log.as_mut() {
                writeln!(l, "{}", row.csv()).expect("string write");
            }
            summary.rows.push(row);
            summary.steps_run += 1;
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == target {
                    summary.checkpoints.push(self.save_checkpoint(&checkpoint_dir(dir, self.step))?);
                    fs::write(dir.join(LOG_FILE), log.as_deref().unwrap_or(""))
                        .map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
                }
            }
        }
        if let (Some(dir), Some(l)) = (out, log) {
            fs::write(dir.join(LOG_FILE), l).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
        }
        summary.final_step = self.step;
        Ok(summary)
    }

    /// Existing log rows up to the current step, so a resumed run continues
    /// the same file.
    fn open_log(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = format!("{LOG_HEADER}\n");
        let path = dir.join(LOG_FILE);
        if self.step > 0 && path.exists() {
            for row in read_log(&path)? {
                if row.step <= self.step {
                    writeln!(text, "{}", row.csv()).expect("string write");
                }
            }
        }
        Ok(text)
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::layers::trunc_normal;
    use crate::nnet::{ModelConfig, Tensor};
    use crate::rig::procedural::random_rig;
    use crate::train::MemoryDataset;
    use rand::Rng;

    #[test]
    fn paper_schedule_arithmetic() {
        assert_eq!(iterations_per_epoch(22_575, 32), 706);
        assert_eq!(total_steps(22_575, 32, 200), 141_200);
        assert_eq!(iterations_per_epoch(64, 32), 2);
    }

    #[test]
    fn loader_arithmetic_is_ceil_division() {
        for n in 0..=100 {
            for b in 1..=8 {
                // count batches by walking the index range
                let mut count = 0;
                let mut start = 0;
                while start < n {
                    start += b;
                    count += 1;
                }
                assert_eq!(iterations_per_epoch(n, b), count, "n={n} b={b}");
            }
        }
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(50, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 4, 0));
    }

    #[test]
    fn log_rows_round_trip() {
        let r = LogRow {
            step: 7,
            epoch: 1,
            mse_term: 0.1 + 0.2,
            mesh_term: 1e-300,
            total: 3.0,
        };
        assert_eq!(LogRow::parse(&r.csv()).unwrap(), r);
    }

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            resolution: 16,
            patch_size: 2,
            dims: [8, 16, 16, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            head_hidden: 32,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_data(n: usize, seed: u64) -> MemoryDataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| Sample {
                appearance: trunc_normal(&mut rng, &[3, 16, 16], 1.0),
                normal: trunc_normal(&mut rng, &[3, 16, 16], 1.0),
                params: (0..crate::NUM_CONTROLS).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        MemoryDataset { samples }
    }

    fn trainer(seed: u64, cfg: TrainConfig) -> Trainer<f32> {
        let rig = random_rig(&mut ChaCha8Rng::seed_from_u64(1), 20, crate::NUM_CONTROLS);
        let model = DualBranchRegressor::new(tiny_config(), seed).unwrap();
        Trainer::new(model, &rig, cfg, LossConfig::default()).unwrap()
    }

    fn snapshot(t: &Trainer<f32>) -> Vec<(String, bool, Vec<u32>)> {
        t.model
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.trainable, p.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn default_freeze_holds_for_ten_steps() {
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            max_steps: Some(10),
            ..Default::default()
        };
        let mut t = trainer(0, cfg);
        let before = snapshot(&t);
        t.run(&tiny_data(8, 2), None).unwrap();
        assert_eq!(t.step, 10);
        let after = snapshot(&t);
        for (b, a) in before.iter().zip(&after) {
            if b.1 {
                assert_ne!(b.2, a.2, "{} did not move", b.0);
            } else {
                assert_eq!(b.2, a.2, "{} moved while frozen", b.0);
            }
        }
    }

    #[test]
    fn fully_frozen_model_has_constant_loss() {
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 1e-2,
            max_steps: Some(4),
            ..Default::default()
        };
        let mut t = trainer(0, cfg);
        t.model
            .set_frozen(&["patch_embed", "stage1", "stage2", "stage3", "stage4", "head"])
            .unwrap();
        let data = tiny_data(4, 3);
        let before = snapshot(&t);
        let s = t.run(&data, None).unwrap();
        assert_eq!(before, snapshot(&t));
        // each step is a new epoch, so only the summation order changes
        let l0 = s.rows[0].total;
        assert!(s.rows.iter().all(|r| ((r.total - l0) / l0).abs() < 1e-6));
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = TrainConfig {
            batch_size: 3,
            lr: 1e-3,
            epochs: 2,
            ..Default::default()
        };
        let data = tiny_data(7, 4);
        let mut a = trainer(5, cfg.clone());
        let mut b = trainer(5, cfg);
        let ra = a.run(&data, None).unwrap();
        let rb = b.run(&data, None).unwrap();
        assert_eq!(ra.rows.len(), 6);
        assert_eq!(ra.rows, rb.rows);
        assert_eq!(snapshot(&a), snapshot(&b));
    }

    #[test]
    fn resume_continues_the_same_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(6, 6);
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            epochs: 3,
            checkpoint_every: 3,
            ..Default::default()
        };
        let mut full = trainer(7, cfg.clone());
        let whole = full.run(&data, Some(&dir.path().join("full"))).unwrap();
        assert_eq!(whole.rows.len(), 6);

        let part_dir = dir.path().join("part");
        let mut part = trainer(7, TrainConfig { max_steps: Some(3), ..cfg.clone() });
        part.run(&data, Some(&part_dir)).unwrap();
        let rig = random_rig(&mut ChaCha8Rng::seed_from_u64(1), 20, crate::NUM_CONTROLS);
        let mut resumed = Trainer::<f32>::resume(&checkpoint_dir(&part_dir, 3), &rig, cfg, LossConfig::default()).unwrap();
        assert_eq!(resumed.step, 3);
        let rest = resumed.run(&data, Some(&part_dir)).unwrap();
        assert_eq!(rest.rows, whole.rows[3..].to_vec());
        assert_eq!(
            fs::read(dir.path().join("full").join(LOG_FILE)).unwrap(),
            fs::read(part_dir.join(LOG_FILE)).unwrap()
        );
    }

    #[test]
    fn empty_and_mismatched_data_are_rejected() {
        let mut t = trainer(0, TrainConfig::default());
        assert!(t.run(&MemoryDataset::<f32> { samples: vec![] }, None).is_err());
        let mut bad = tiny_data(2, 1);
        bad.samples[0].appearance = Tensor::zeros(&[3, 32, 32]);
        assert!(t.run(&bad, None).is_err());
    }
}
