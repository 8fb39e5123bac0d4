use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rig::{BlendRig, RigParams, TriMesh};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectFitConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for DirectFitConfig {
    fn default() -> Self {
        DirectFitConfig {
            steps: 500,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectFit {
    pub params: RigParams<f64>,
    /// Objective at `params`.
    pub objective: f64,
    /// Step at which `params` was reached; 0 is the initialization.
    pub best_step: usize,
}

/// Mean squared per-coordinate error between `rig(p)` and `target`, and its
/// gradient `(2 / 3V) Σ_v J_vᵀ r_v`.
pub fn fit_objective(rig: &BlendRig<f64>, target: &TriMesh<f64>, p: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mesh = rig.forward(p)?;
    let n = 3.0 * rig.vertex_count() as f64;
    let r: Vec<[f64; 3]> = mesh
        .positions()
        .iter()
        .zip(target.positions())
        .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        .collect();
    let f = r.iter().map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sum::<f64>() / n;
    let g = rig
        .jacobian()
        .iter()
        .map(|delta| {
            2.0 / n
                * delta
                    .iter()
                    .zip(&r)
                    .map(|(j, d)| j[0] * d[0] + j[1] * d[1] + j[2] * d[2])
                    .sum::<f64>()
        })
        .collect();
    Ok((f, g))
}

/// Fits rig parameters to `target` by Adam from `p = 0`; returns the best
/// iterate seen.
pub fn direct_fit(rig: &BlendRig<f64>, target: &TriMesh<f64>, cfg: &DirectFitConfig) -> Result<DirectFit> {
    if target.vertex_count() != rig.vertex_count() {
        return Err(Error::Invalid(format!(
            "target has {} vertices, rig has {}",
            target.vertex_count(),
            rig.vertex_count()
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let k = rig.control_count();
    let mut p = vec![0.0; k];
    let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);
    let (f0, mut g) = fit_objective(rig, target, &p)?;
    let mut best = DirectFit {
        params: RigParams::new(p.clone())?,
        objective: f0,
        best_step: 0,
    };
    for t in 1..=cfg.steps {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..k {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
        let (f, gn) = fit_objective(rig, target, &p)?;
        g = gn;
        if f < best.objective {
            best = DirectFit {
                params: RigParams::new(p.clone())?,
                objective: f,
                best_step: t,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::procedural::random_rig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_generating_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rig = random_rig(&mut rng, 200, crate::NUM_CONTROLS);
        let truth: Vec<f64> = (0..crate::NUM_CONTROLS).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = rig.forward(&truth).unwrap();
        let fit = direct_fit(&rig, &target, &DirectFitConfig::default()).unwrap();
        let err = fit.params.values().iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3, "L∞ {err}");
    }

    #[test]
    fn neutral_target_gives_zero() {
        let rig = random_rig(&mut ChaCha8Rng::seed_from_u64(2), 200, crate::NUM_CONTROLS);
        let fit = direct_fit(&rig, rig.neutral(), &DirectFitConfig::default()).unwrap();
        assert!(fit.params.values().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn zero_steps_return_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rig = random_rig(&mut rng, 50, crate::NUM_CONTROLS);
        let target = rig.forward(&vec![0.5; crate::NUM_CONTROLS]).unwrap();
        let cfg = DirectFitConfig { steps: 0, ..Default::default() };
        let fit = direct_fit(&rig, &target, &cfg).unwrap();
        assert!(fit.params.values().iter().all(|&v| v == 0.0));
        assert_eq!(fit.best_step, 0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rig = random_rig(&mut rng, 30, crate::NUM_CONTROLS);
        let target = rig.forward(&vec![0.3; crate::NUM_CONTROLS]).unwrap();
        let p: Vec<f64> = (0..crate::NUM_CONTROLS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = fit_objective(&rig, &target, &p).unwrap();
        for i in [0, 50, 101] {
            let numeric = crate::nnet::gradcheck::central_diff(
                |x| {
                    let mut q = p.clone();
                    q[i] = x;
                    Ok(fit_objective(&rig, &target, &q)?.0)
                },
                p[i],
                1e-3,
            )
            .unwrap();
            assert!((g[i] - numeric).abs() < 1e-10);
        }
    }

    #[test]
    fn vertex_count_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rig = random_rig(&mut rng, 30, crate::NUM_CONTROLS);
        let other = random_rig(&mut rng, 31, crate::NUM_CONTROLS);
        assert!(direct_fit(&rig, other.neutral(), &DirectFitConfig::default()).is_err());
    }
}
