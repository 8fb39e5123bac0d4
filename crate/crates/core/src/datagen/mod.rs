//! Training-corpus synthesis.
//!
//! Base parameter sets (one activation per control plus canonical
//! combinations) are perturbed, decoded by the rig, rigidly jittered and
//! rendered in both modalities. Everything is a pure function of the rig,
//! the configs and the master seed.

mod canonical;
mod preprocess;
mod synth;

pub use canonical::{CanonicalExpression, CanonicalSet, CanonicalSource};
pub use preprocess::{preprocess_image, IMAGENET_MEAN, IMAGENET_STD};
pub use synth::{
    read_params, render_sample, sample_rng, synthesize_dataset, write_params, DatasetConfig,
    DatasetManifest, ParamsFile, SampleRecord, TransformRecord, MANIFEST_FILE,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rig::{BlendRig, RigParams};
use crate::{Scalar, NUM_CONTROLS};

/// Stochastic edits applied to a base parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Per active control.
    pub p_drop: f64,
    /// Per inactive control.
    pub p_add: f64,
    pub add_cap: usize,
    /// Per surviving active control.
    pub p_replace: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
    pub intensity_clamp: [f64; 2],
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            p_drop: 0.2,
            p_add: 0.1,
            add_cap: 3,
            p_replace: 0.1,
            intensity_mean: 0.6,
            intensity_std: 0.25,
            intensity_clamp: [0.05, 1.0],
        }
    }
}

impl PerturbConfig {
    /// No structural edits; intensities still resampled.
    pub fn structure_free(self) -> Self {
        PerturbConfig {
            p_drop: 0.0,
            p_add: 0.0,
            p_replace: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop", self.p_drop), ("p_add", self.p_add), ("p_replace", self.p_replace)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.intensity_clamp;
        if !(self.intensity_std >= 0.0 && self.intensity_std.is_finite() && self.intensity_mean.is_finite()) {
            return Err(Error::Invalid(format!(
                "intensity distribution N({}, {}) is invalid",
                self.intensity_mean, self.intensity_std
            )));
        }
        if !(lo < hi && (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi)) {
            return Err(Error::Invalid(format!("intensity clamp [{lo}, {hi}] is invalid")));
        }
        Ok(())
    }
}

/// A named base parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSet {
    pub name: String,
    pub params: RigParams<f64>,
}

/// One single-control activation per rig control (in control order),
/// followed by the canonical combinations in the given order.
pub fn base_param_sets(rig: &BlendRig<f64>, canonical: &[(String, Vec<f64>)]) -> Result<Vec<BaseSet>> {
    contract!(
        rig.control_count() == NUM_CONTROLS,
        "rig has {} controls, expected {NUM_CONTROLS}",
        rig.control_count()
    );
    let mut sets: Vec<BaseSet> = rig
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| BaseSet {
            name: name.clone(),
            params: RigParams::one_hot(i),
        })
        .collect();
    for (name, values) in canonical {
        let params = RigParams::new(values.clone())
            .map_err(|e| Error::Invalid(format!("canonical expression `{name}`: {e}")))?;
        sets.push(BaseSet {
            name: name.clone(),
            params,
        });
    }
    Ok(sets)
}

/// Drops, relocates and adds activations, then resamples every active
/// intensity from the clamped normal distribution.
///
/// Edits run in index order so the number of random draws depends only on
/// the active set: one coin per active control (drop), one coin per
/// survivor (replace, plus one uniform pick when it fires), one coin per
/// inactive control (add) and one normal draw per final active control.
pub fn perturb_params<T: Scalar, R: Rng + ?Sized>(
    p: &RigParams<T>,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<RigParams<T>> {
    cfg.validate()?;
    let n = p.values().len();
    let mut active: Vec<bool> = p.values().iter().map(|&v| v > T::zero()).collect();

    for a in active.iter_mut().filter(|a| **a) {
        if rng.random::<f64>() < cfg.p_drop {
            *a = false;
        }
    }

    let survivors: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    for i in survivors {
        if rng.random::<f64>() < cfg.p_replace {
            let free: Vec<usize> = (0..n).filter(|&j| !active[j]).collect();
            if free.is_empty() {
                continue;
            }
            let j = free[rng.random_range(0..free.len())];
            active[i] = false;
            active[j] = true;
        }
    }

    let inactive: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
    let mut added = 0;
    for i in inactive {
        if rng.random::<f64>() < cfg.p_add {
            if added < cfg.add_cap {
                active[i] = true;
            }
            added += 1;
        }
    }

    let dist = Normal::new(cfg.intensity_mean, cfg.intensity_std)
        .map_err(|e| Error::Invalid(format!("intensity distribution: {e}")))?;
    let [lo, hi] = cfg.intensity_clamp;
    let values = active
        .iter()
        .map(|&a| {
            if a {
                T::of(dist.sample(rng).clamp(lo, hi))
            } else {
                T::zero()
            }
        })
        .collect();
    RigParams::new(values)
}
