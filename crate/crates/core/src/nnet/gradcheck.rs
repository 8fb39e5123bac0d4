//! Finite-difference gradient checks.
//!
//! Reference derivatives use the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, evaluated in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nnet::layers::{trunc_normal, INIT_STD};
use crate::nnet::{DualBranchRegressor, ModelConfig, Tape, Tensor, Value};

/// Denominator floor of [`rel_error`]; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Label of the entry with the largest relative error.
    pub worst: Option<String>,
    /// Draws discarded because a max-pool selection changed inside the stencil.
    pub kinks_skipped: usize,
}

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        CheckReport {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
        if rel > self.max_rel || self.worst.is_none() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = Some(format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label()));
        }
        self.checked += 1;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel <= tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let p2 = f(x + 2.0 * h)?;
    let p1 = f(x + h)?;
    let m1 = f(x - h)?;
    let m2 = f(x - 2.0 * h)?;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every input element of `build` against finite differences of
/// `sum(build(inputs) ∘ R)` for a fixed random `R`.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    h: f64,
    build: impl Fn(&[Value<f64>]) -> Result<Value<f64>>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&vars)?.shape()
    };
    let r = random_tensor(&mut rng, &probe);

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&vars)?;
        out.mul(&tape.constant(r.clone()))?.sum()?.item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&vars)?.mul(&tape.constant(r.clone()))?.sum()?;
    let grads = loss.backward()?;

    let mut report = CheckReport::new(name);
    for (i, v) in vars.iter().enumerate() {
        let zero = vec![0.0; inputs[i].numel()];
        let g = grads.get(v).unwrap_or(&zero);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut work = inputs.clone();
            let numeric = central_diff(
                |x| {
                    work[i].data_mut()[j] = x;
                    eval(&work)
                },
                x0,
                h,
            )?;
            report.record(|| format!("input {i}[{j}]"), g[j], numeric);
        }
    }
    Ok(report)
}

/// Gradient checks of every differentiable primitive on small random shapes.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut t = |s: &[usize]| random_tensor(&mut rng, s);
    let mut out = Vec::new();

    out.push(check_op("add", vec![t(&[3, 4]), t(&[3, 4])], seed, h, |v| v[0].add(&v[1]))?);
    out.push(check_op("sub", vec![t(&[3, 4]), t(&[3, 4])], seed, h, |v| v[0].sub(&v[1]))?);
    out.push(check_op("mul", vec![t(&[3, 4]), t(&[3, 4])], seed, h, |v| v[0].mul(&v[1]))?);
    out.push(check_op("add_broadcast", vec![t(&[2, 3, 4]), t(&[4])], seed, h, |v| {
        v[0].add_broadcast(&v[1])
    })?);
    out.push(check_op("scale", vec![t(&[5])], seed, h, |v| v[0].scale(-1.7))?);
    out.push(check_op("square", vec![t(&[5])], seed, h, |v| v[0].square())?);
    // keep inputs away from the kink at zero
    let mut a = t(&[6]);
    a.data_mut().iter_mut().for_each(|x| *x += 0.2 * x.signum());
    out.push(check_op("abs", vec![a], seed, h, |v| v[0].abs())?);
    out.push(check_op("gelu", vec![t(&[7])], seed, h, |v| v[0].scale(3.0)?.gelu())?);
    out.push(check_op("reshape", vec![t(&[2, 6])], seed, h, |v| v[0].reshape(&[3, 4]))?);
    out.push(check_op("matmul", vec![t(&[2, 3, 4]), t(&[4, 5])], seed, h, |v| v[0].matmul(&v[1]))?);
    out.push(check_op("bmm", vec![t(&[2, 3, 4]), t(&[2, 4, 5])], seed, h, |v| v[0].bmm(&v[1], false))?);
    out.push(check_op("bmm_transposed", vec![t(&[2, 3, 4]), t(&[2, 5, 4])], seed, h, |v| {
        v[0].bmm(&v[1], true)
    })?);
    out.push(check_op("softmax", vec![t(&[3, 5])], seed, h, |v| v[0].scale(2.0)?.softmax())?);
    out.push(check_op("layer_norm", vec![t(&[3, 6]), t(&[6]), t(&[6])], seed, h, |v| {
        v[0].layer_norm(&v[1], &v[2])
    })?);
    out.push(check_op("split_merge_heads", vec![t(&[2, 3, 12])], seed, h, |v| {
        let q = v[0].split_heads(0, 2)?;
        let k = v[0].split_heads(1, 2)?;
        let w = v[0].split_heads(2, 2)?;
        q.mul(&k)?.add(&w)?.merge_heads(2)
    })?);
    // distinct values so the pooled maxima are separated by more than the step
    let mut pool = Tensor::new(
        vec![1, 16, 2],
        (0..32).map(|i| ((i * 37 % 32) as f64) * 0.1).collect(),
    )?;
    pool.data_mut().iter_mut().for_each(|x| *x -= 1.5);
    out.push(check_op("max_pool2", vec![pool], seed, h, |v| v[0].max_pool2(4, 4))?);
    out.push(check_op("mean_tokens", vec![t(&[2, 3, 4])], seed, h, |v| v[0].mean_tokens())?);
    out.push(check_op("concat", vec![t(&[2, 3]), t(&[2, 4])], seed, h, |v| v[0].concat(&v[1]))?);
    out.push(check_op("mean", vec![t(&[3, 3])], seed, h, |v| v[0].mean())?);
    out.push(check_op("sum", vec![t(&[3, 3])], seed, h, |v| v[0].sum())?);
    Ok(out)
}

/// Ridders' extrapolation of central differences, starting from step `h` and
/// shrinking it by 1.4 per round. Returns the estimate and its error bound.
pub fn ridders_diff(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<(f64, f64)> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut hh = h;
    a[0][0] = (f(x + hh)? - f(x - hh)?) / (2.0 * hh);
    let mut err = f64::MAX;
    let mut ans = a[0][0];
    for i in 1..NTAB {
        hh /= CON;
        a[0][i] = (f(x + hh)? - f(x - hh)?) / (2.0 * hh);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if errt <= err {
                err = errt;
                ans = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((ans, err))
}

/// Initial step for a weight of magnitude `w` in the whole-model check.
pub fn model_step(w: f64) -> f64 {
    1e-3 * w.abs().max(1.0)
}

/// Whole-network check of `mean(forward(I_a, I_n))` over `samples` weights
/// drawn uniformly from every parameter element, against [`ridders_diff`].
///
/// Every group is unfrozen and the zero-initialized output layer is redrawn,
/// otherwise all upstream gradients vanish. Single precision compares the
/// `f32` backward pass against differences of the `f64` copy.
pub fn check_model(config: &ModelConfig, seed: u64, samples: usize, double: bool) -> Result<CheckReport> {
    check_model_batch(config, seed, samples, double, 1)
}

/// [`check_model`] on a batch of `batch` random input pairs.
pub fn check_model_batch(
    config: &ModelConfig,
    seed: u64,
    samples: usize,
    double: bool,
    batch: usize,
) -> Result<CheckReport> {
    let mut model = DualBranchRegressor::<f64>::new(config.clone(), seed)?;
    model.set_frozen::<&str>(&[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let fc2 = model.head().fc2.clone();
    for id in [fc2.weight, fc2.bias] {
        let shape = model.params().get(id).shape().to_vec();
        let w: Tensor<f64> = trunc_normal(&mut rng, &shape, INIT_STD);
        model.params_mut().set_data(id, w.data())?;
    }
    let r = config.resolution;
    let ia = random_tensor(&mut rng, &[batch, config.channels, r, r]);
    let inn = random_tensor(&mut rng, &[batch, config.channels, r, r]);

    let analytic: Vec<Vec<f64>> = if double {
        analytic_grads(&model, &ia, &inn)?
    } else {
        analytic_grads(&model.cast::<f32>(), &ia.cast(), &inn.cast())?
    };

    let total = model.params().param_count();
    let base = pool_choices(&model, &ia, &inn)?;
    let mut report = CheckReport::new(if double { "model_f64" } else { "model_f32" });
    let mut draws = 0;
    while report.checked < samples {
        draws += 1;
        if draws > 50 * samples.max(1) {
            return Err(crate::Error::Invalid(format!(
                "gradcheck: {} of {draws} draws hit pooling kinks",
                report.kinks_skipped
            )));
        }
        let mut flat = rng.random_range(0..total);
        let mut id = None;
        for (pid, p) in model.params().iter() {
            if flat < p.numel() {
                id = Some(pid);
                break;
            }
            flat -= p.numel();
        }
        let id = id.expect("index within parameter count");
        let w0 = model.params().get(id).data()[flat];
        let mut work = model.clone();
        let mut kink = false;
        let (numeric, _) = ridders_diff(
            |w| {
                work.params_mut().get_mut(id).data_mut()[flat] = w;
                let tape = Tape::new();
                let out = work.forward(&tape, &ia, &inn)?.tensor();
                kink |= tape.pool_choices() != base;
                Ok(out.data().iter().sum::<f64>() / out.numel() as f64)
            },
            w0,
            model_step(w0),
        )?;
        if kink {
            report.kinks_skipped += 1;
            continue;
        }
        let name = model.params().get(id).name.clone();
        report.record(|| format!("{name}[{flat}]"), analytic[id.0][flat], numeric);
    }
    Ok(report)
}

fn pool_choices(model: &DualBranchRegressor<f64>, ia: &Tensor<f64>, inn: &Tensor<f64>) -> Result<Vec<usize>> {
    let tape = Tape::new();
    model.forward(&tape, ia, inn)?;
    Ok(tape.pool_choices())
}

fn analytic_grads<T: crate::Scalar>(
    model: &DualBranchRegressor<T>,
    ia: &Tensor<T>,
    inn: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let loss = model.forward(&tape, ia, inn)?.mean()?;
    let mut store = model.params().clone();
    store.zero_grad();
    crate::nnet::backward(&loss, &mut store)?;
    Ok(store.iter().map(|(_, p)| p.grad().iter().map(|g| g.f64()).collect()).collect())
}
