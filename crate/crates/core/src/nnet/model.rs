//! Dual-branch hierarchical transformer regressor.
//!
//! Each branch embeds non-overlapping patches, runs four stages of pre-norm
//! global-attention blocks (stages 2-4 start with a 2×2 max-pool over the
//! token grid and a linear projection to the stage width), then averages the
//! remaining tokens. The two branch features are concatenated and regressed
//! to the rig controls by a two-layer MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nnet::layers::{trunc_normal, Block, LayerNorm, Linear, INIT_STD};
use crate::nnet::{ParamId, ParamStore, Tape, Tensor, Value};
use crate::{Scalar, NUM_CONTROLS};

pub const STAGES: usize = 4;
pub const BRANCHES: [&str; 2] = ["branch_a", "branch_n"];
pub const DEFAULT_FREEZE: [&str; 4] = ["patch_embed", "stage1", "stage2", "stage3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dims: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    /// Token-grid pooling factor between stages.
    pub pool: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub out_dim: usize,
    /// Groups excluded from training; see [`DualBranchRegressor::set_frozen`].
    pub frozen: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            channels: 3,
            patch_size: 4,
            dims: [32, 64, 128, 256],
            depths: [1, 1, 2, 1],
            heads: [1, 2, 4, 8],
            pool: 2,
            mlp_ratio: 4,
            head_hidden: 256,
            out_dim: NUM_CONTROLS,
            frozen: DEFAULT_FREEZE.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    /// Full-size input geometry with the toy widths; for shape checks only.
    pub fn full_resolution() -> Self {
        ModelConfig {
            resolution: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.resolution,
            self.channels,
            self.patch_size,
            self.mlp_ratio,
            self.head_hidden,
        ];
        if positive.contains(&0) || self.dims.contains(&0) || self.heads.contains(&0) {
            return Err(Error::Invalid("model sizes must be positive".into()));
        }
        if self.pool != 2 {
            return Err(Error::Invalid(format!("pooling factor must be 2, got {}", self.pool)));
        }
        let unit = self.patch_size * self.pool.pow(STAGES as u32 - 1);
        if !self.resolution.is_multiple_of(unit) {
            return Err(Error::Invalid(format!(
                "resolution {} not divisible by patch size × pool³ = {unit}",
                self.resolution
            )));
        }
        for s in 0..STAGES {
            if !self.dims[s].is_multiple_of(self.heads[s]) {
                return Err(Error::Invalid(format!(
                    "stage {} width {} not divisible by {} heads",
                    s + 1,
                    self.dims[s],
                    self.heads[s]
                )));
            }
        }
        if self.out_dim != NUM_CONTROLS {
            return Err(Error::Invalid(format!(
                "output dim must be {NUM_CONTROLS}, got {}",
                self.out_dim
            )));
        }
        Ok(())
    }

    /// Token grid side at the start of stage `s` (0-based).
    pub fn grid(&self, s: usize) -> usize {
        self.resolution / self.patch_size / self.pool.pow(s as u32)
    }

    pub fn feature_dim(&self) -> usize {
        self.dims[STAGES - 1]
    }
}

/// `[B, C, H, W]` → `[B, (H/P)·(W/P), C·P·P]`, patches row-major, each patch
/// flattened in `(c, y, x)` order.
pub fn im2col<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    contract!(s.len() == 4, "expected [B, C, H, W], got {s:?}");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!("{h}×{w} image not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(img.numel());
    let d = img.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&d[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, c * p * p], out)
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub proj: Option<Linear>,
    pub blocks: Vec<Block>,
}

/// One image branch.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch: Linear,
    pub pos: ParamId,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig, prefix: &str) -> Self {
        let pe = format!("{prefix}.patch_embed");
        let patch = Linear::new(
            store,
            rng,
            &format!("{pe}.proj"),
            &pe,
            cfg.channels * cfg.patch_size * cfg.patch_size,
            cfg.dims[0],
        );
        let tokens = cfg.grid(0) * cfg.grid(0);
        let pos = store.add(format!("{pe}.pos"), &pe, trunc_normal(rng, &[tokens, cfg.dims[0]], INIT_STD));
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let group = format!("{prefix}.stage{}", s + 1);
            let proj = (s > 0)
                .then(|| Linear::new(store, rng, &format!("{group}.proj"), &group, cfg.dims[s - 1], cfg.dims[s]));
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    Block::new(
                        store,
                        rng,
                        &format!("{group}.block{i}"),
                        &group,
                        cfg.dims[s],
                        cfg.heads[s],
                        cfg.mlp_ratio,
                    )
                })
                .collect();
            stages.push(Stage { proj, blocks });
        }
        let last = format!("{prefix}.stage{STAGES}");
        let norm = LayerNorm::new(store, &format!("{last}.norm"), &last, cfg.feature_dim());
        Encoder {
            patch,
            pos,
            stages,
            norm,
        }
    }

    /// `[B, C, H, W]` → tokens `[B, N, dims[0]]`.
    pub fn patch_embed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        img: &Tensor<T>,
        patch: usize,
    ) -> Result<Value<T>> {
        let cols = tape.constant(im2col(img, patch)?);
        self.patch
            .forward(store, &cols)?
            .add_broadcast(&tape.param(store, self.pos))
    }

    /// Runs stage `s` on a `grid×grid` token map; returns the new grid side.
    pub fn stage<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        s: usize,
        tokens: &Value<T>,
        grid: usize,
    ) -> Result<(Value<T>, usize)> {
        let stage = &self.stages[s];
        let (mut x, grid) = match &stage.proj {
            Some(proj) => (proj.forward(store, &tokens.max_pool2(grid, grid)?)?, grid / 2),
            None => (tokens.clone(), grid),
        };
        for b in &stage.blocks {
            x = b.forward(store, &x)?;
        }
        Ok((x, grid))
    }

    /// Final-stage tokens before pooling.
    pub fn tokens<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        img: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<Value<T>> {
        let mut x = self.patch_embed(store, tape, img, cfg.patch_size)?;
        let mut grid = cfg.grid(0);
        for s in 0..STAGES {
            (x, grid) = self.stage(store, s, &x, grid)?;
        }
        Ok(x)
    }

    /// Pooled, normalized feature `[B, dims[3]]`.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        img: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<Value<T>> {
        let x = self.tokens(store, tape, img, cfg)?;
        self.norm.forward(store, &x.mean_tokens()?)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Appearance,
    Normal,
}

/// `f(I_a, I_n) → p`: appearance first, normal map second. The two inputs
/// have identical shapes, so swapping them is not detected.
#[derive(Clone, Debug)]
pub struct DualBranchRegressor<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    branch_a: Encoder,
    branch_n: Encoder,
    head: Head,
    frozen: Vec<String>,
}

impl<T: Scalar> DualBranchRegressor<T> {
    /// Builds and initializes the model; applies `config.frozen`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let branch_a = Encoder::new(&mut store, &mut rng, &config, BRANCHES[0]);
        let branch_n = Encoder::new(&mut store, &mut rng, &config, BRANCHES[1]);
        let fc1 = Linear::new(
            &mut store,
            &mut rng,
            "head.fc1",
            "head",
            2 * config.feature_dim(),
            config.head_hidden,
        );
        let fc2 = Linear {
            weight: store.add("head.fc2.weight", "head", Tensor::zeros(&[config.head_hidden, config.out_dim])),
            bias: store.add("head.fc2.bias", "head", Tensor::zeros(&[config.out_dim])),
        };
        let mut model = DualBranchRegressor {
            config,
            store,
            branch_a,
            branch_n,
            head: Head { fc1, fc2 },
            frozen: Vec::new(),
        };
        let frozen = model.config.frozen.clone();
        model.set_frozen(&frozen)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self, b: Branch) -> &Encoder {
        match b {
            Branch::Appearance => &self.branch_a,
            Branch::Normal => &self.branch_n,
        }
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Every freeze group, including stages that own no parameters.
    pub fn groups() -> Vec<String> {
        let mut out = Vec::new();
        for b in BRANCHES {
            out.push(format!("{b}.patch_embed"));
            out.extend((1..=STAGES).map(|s| format!("{b}.stage{s}")));
        }
        out.push("head".into());
        out
    }

    /// Expands short names (`patch_embed`, `stage2`) to both branches.
    pub fn resolve_groups<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<String>> {
        let known = Self::groups();
        let mut out = Vec::new();
        for n in names {
            let n = n.as_ref();
            let hits: Vec<String> = if known.iter().any(|g| g == n) {
                vec![n.to_string()]
            } else {
                BRANCHES
                    .iter()
                    .map(|b| format!("{b}.{n}"))
                    .filter(|g| known.contains(g))
                    .collect()
            };
            if hits.is_empty() {
                return Err(Error::UnknownGroup(n.to_string()));
            }
            for h in hits {
                if !out.contains(&h) {
                    out.push(h);
                }
            }
        }
        Ok(out)
    }

    /// Freezes exactly the named groups; every other group becomes trainable.
    pub fn set_frozen<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let groups = self.resolve_groups(names)?;
        for (_, p) in self.store.iter_mut() {
            p.trainable = !groups.contains(&p.group);
        }
        self.frozen = groups;
        self.config.frozen = names.iter().map(|s| s.as_ref().to_string()).collect();
        Ok(())
    }

    /// Fully qualified groups frozen by the last [`Self::set_frozen`].
    pub fn frozen_groups(&self) -> Vec<String> {
        self.frozen.clone()
    }

    fn batched(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = img.shape();
        let img = match s.len() {
            3 => img.clone().reshape([&[1], s].concat())?,
            4 => img.clone(),
            _ => return Err(Error::Invalid(format!("expected [C, H, W] or [B, C, H, W], got {s:?}"))),
        };
        let s = img.shape();
        if s[1] != c.channels || s[2] != c.resolution || s[3] != c.resolution {
            return Err(Error::Invalid(format!(
                "input {:?} does not match configured {}×{}×{}",
                &s[1..],
                c.channels,
                c.resolution,
                c.resolution
            )));
        }
        Ok(img)
    }

    pub fn branch_features(&self, b: Branch, tape: &Tape<T>, img: &Tensor<T>) -> Result<Value<T>> {
        let img = self.batched(img)?;
        self.encoder(b).forward(&self.store, tape, &img, &self.config)
    }

    /// Records the forward pass; returns `[B, out_dim]`.
    pub fn forward(&self, tape: &Tape<T>, appearance: &Tensor<T>, normal: &Tensor<T>) -> Result<Value<T>> {
        let ia = self.batched(appearance)?;
        let inn = self.batched(normal)?;
        contract!(ia.shape()[0] == inn.shape()[0], "batch sizes differ");
        let fa = self.branch_a.forward(&self.store, tape, &ia, &self.config)?;
        let fn_ = self.branch_n.forward(&self.store, tape, &inn, &self.config)?;
        let h = self.head.fc1.forward(&self.store, &fa.concat(&fn_)?)?.gelu()?;
        self.head.fc2.forward(&self.store, &h)
    }

    /// Tape-free inference; returns `[B, out_dim]`.
    pub fn predict(&self, appearance: &Tensor<T>, normal: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, appearance, normal)?.tensor())
    }

    pub fn cast<U: Scalar>(&self) -> DualBranchRegressor<U> {
        DualBranchRegressor {
            config: self.config.clone(),
            store: self.store.cast(),
            branch_a: self.branch_a.clone(),
            branch_n: self.branch_n.clone(),
            head: self.head.clone(),
            frozen: self.frozen.clone(),
        }
    }
}
