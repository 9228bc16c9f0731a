//! Numerical oracles: central-difference gradient checks and a Monte-Carlo
//! estimator of the Gaussian KL divergence.
//!
//! Neither oracle shares code with the path it checks. Gradient checks only
//! evaluate forward values; the Monte-Carlo estimator works from sampled
//! log-densities rather than the closed form.

use rayon::prelude::*;

use crate::autograd::{reduce_stats, Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::model::{build_model, Model, ModelSpec};
use crate::norm::{
    kl_diag_gauss, kl_diag_gauss_taped, kl_to_standard_normal, BatchNorm, GroupNorm, KlNorm,
    LayerNorm, NormKind,
};
use crate::rng::{SeedRng, Stream};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Bound on `|autodiff − fd| / max(1, |fd|)`.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the gradient of the scalar `f` with respect to every element of every input.
pub fn check_function<F>(name: &str, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], fd));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    })
}

fn random(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn positive(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| 0.5 + v.abs())
}

/// Values kept at least 0.1 away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

/// Gradient checks for every differentiable primitive and every normalization layer.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SeedRng::new(seed, Stream::Check);
    let h = FD_STEP;
    let mut out = Vec::new();

    let w43 = random(&mut rng, &[4, 3]);
    let (a, b, bv) = (random(&mut rng, &[4, 3]), random(&mut rng, &[4, 3]), positive(&mut rng, &[3]));
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        let w = w43.clone();
        let rhs = if kind == 3 { bv.clone() } else { b.clone() };
        out.push(check_function(name, &[a.clone(), rhs], h, move |t, v| {
            let y = match kind {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                2 => t.mul(v[0], v[1])?,
                _ => t.div(v[0], v[1])?,
            };
            weighted_sum(t, y, &w)
        })?);
    }
    let broadcast_rhs = random(&mut rng, &[3]);
    let w = w43.clone();
    out.push(check_function("mul (broadcast)", &[a.clone(), broadcast_rhs], h, move |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })?);

    let pos = positive(&mut rng, &[4, 3]);
    let kinked = away_from_zero(&mut rng, &[4, 3]);
    let unary: [(&str, Tensor, fn(&mut Tape, Var) -> Result<Var>); 5] = [
        ("sqrt", pos.clone(), |t, x| t.sqrt(x)),
        ("exp", a.clone(), |t, x| t.exp(x)),
        ("log", pos.clone(), |t, x| t.log(x)),
        ("relu", kinked.clone(), |t, x| t.relu(x)),
        ("neg", a.clone(), |t, x| t.neg(x)),
    ];
    for (name, input, op) in unary {
        let w = w43.clone();
        out.push(check_function(name, &[input], h, move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, &w)
        })?);
    }
    let w = w43.clone();
    out.push(check_function("scale/add_scalar", std::slice::from_ref(&a), h, move |t, v| {
        let y = t.scale(v[0], -1.7)?;
        let y = t.add_scalar(y, 0.3)?;
        weighted_sum(t, y, &w)
    })?);
    let w = w43.clone();
    // kinked values are ≥ 0.1 from zero, so a ±0.05 clamp is never straddled
    out.push(check_function("clamp", &[kinked.map(|v| v * 0.2)], h, move |t, v| {
        let y = t.clamp(v[0], -0.05, 0.3)?;
        weighted_sum(t, y, &w)
    })?);

    let (ma, mb) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    let w32 = random(&mut rng, &[3, 2]);
    out.push(check_function("matmul", &[ma, mb], h, move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &w32)
    })?);

    out.push(check_function("sum/mean", std::slice::from_ref(&a), h, |t, v| {
        let s = t.sum(v[0])?;
        let m = t.mean(v[0])?;
        let p = t.mul(s, m)?;
        Ok(p)
    })?);
    let (w3, w4) = (random(&mut rng, &[3]), random(&mut rng, &[4, 1]));
    out.push(check_function("mean_axis", std::slice::from_ref(&a), h, move |t, v| {
        let c = t.mean_axis(v[0], 0, false)?;
        let r = t.mean_axis(v[0], 1, true)?;
        let c2 = t.square(c)?;
        let x = weighted_sum(t, c2, &w3)?;
        let y = weighted_sum(t, r, &w4)?;
        t.add(x, y)
    })?);
    let w26 = random(&mut rng, &[2, 6]);
    out.push(check_function("reshape", std::slice::from_ref(&a), h, move |t, v| {
        let r = t.reshape(v[0], &[2, 6])?;
        let r = t.square(r)?;
        weighted_sum(t, r, &w26)
    })?);
    let labels = [0usize, 2, 1, 2];
    out.push(check_function("cross_entropy", std::slice::from_ref(&a), h, move |t, v| {
        t.cross_entropy(v[0], &labels)
    })?);
    let (wm, wv) = (random(&mut rng, &[3]), random(&mut rng, &[3]));
    out.push(check_function("reduce_stats", std::slice::from_ref(&a), h, move |t, v| {
        let (m, var) = reduce_stats(t, v[0])?;
        let x = weighted_sum(t, m, &wm)?;
        let y = weighted_sum(t, var, &wv)?;
        t.add(x, y)
    })?);

    let x = random(&mut rng, &[5, 4]);
    let w54 = random(&mut rng, &[5, 4]);
    let bn = BatchNorm::new(4, 0.1, 1e-5)?;
    let (gamma, beta) = (random(&mut rng, &[4]), random(&mut rng, &[4]));
    {
        let w = w54.clone();
        out.push(check_function("batchnorm (train)", &[x.clone(), gamma.clone(), beta.clone()], h, move |t, v| {
            let (z, _) = bn.train_taped(t, v[0], &v[1..])?;
            weighted_sum(t, z, &w)
        })?);
    }
    let ln = LayerNorm::new(4, 1e-5)?;
    {
        let w = w54.clone();
        out.push(check_function("layernorm", &[x.clone(), gamma.clone(), beta.clone()], h, move |t, v| {
            let z = ln.forward_taped(t, v[0], &v[1..])?;
            weighted_sum(t, z, &w)
        })?);
    }
    let gn = GroupNorm::new(4, 2, 1e-5)?;
    {
        let w = w54.clone();
        out.push(check_function("groupnorm", &[x.clone(), gamma, beta], h, move |t, v| {
            let z = gn.forward_taped(t, v[0], &v[1..])?;
            weighted_sum(t, z, &w)
        })?);
    }
    let kn = KlNorm::new(4, 0.1, 1e-5, &mut rng)?;
    let mut inputs = vec![x.clone()];
    inputs.extend(kn.params().into_iter().cloned());
    {
        let w = w54.clone();
        out.push(check_function("klnorm (train, z + kl)", &inputs, h, move |t, v| {
            let mut layer = kn.clone();
            let (z, kl) = layer.train_taped(t, v[0], &v[1..])?;
            let zs = weighted_sum(t, z, &w)?;
            let k = t.scale(kl.value, 0.7)?;
            t.add(zs, k)
        })?);
    }
    let (mu, logvar) = (random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4]));
    out.push(check_function("kl_to_standard_normal", &[mu, logvar], h, |t, v| {
        let kl = kl_to_standard_normal(t, v[0], v[1])?;
        Ok(kl.value)
    })?);
    let (mu1, var1) = (random(&mut rng, &[3]), positive(&mut rng, &[3]));
    out.push(check_function(
        "kl_diag_gauss",
        &[random(&mut rng, &[3]), positive(&mut rng, &[3])],
        h,
        move |t, v| kl_diag_gauss_taped(t, v[0], v[1], &mu1, &var1),
    )?);
    let lin = Linear::init(4, 3, &mut rng);
    let w53 = random(&mut rng, &[5, 3]);
    out.push(check_function("linear", &[x, lin.weight, lin.bias], h, move |t, v| {
        let y = Linear::apply(t, v[0], &v[1..])?;
        weighted_sum(t, y, &w53)
    })?);
    Ok(out)
}

/// Settings of the end-to-end model gradient check.
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub spec: ModelSpec,
    pub batch: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelCheck {
    fn default() -> Self {
        Self {
            spec: ModelSpec::new(6, 4, NormKind::KlNorm, 3),
            batch: 5,
            beta: 0.3,
            seed: 0,
        }
    }
}

fn model_loss(model: &mut Model, x: &Tensor, y: &[usize], beta: f64, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
    let fwd = model.forward_train(tape, x, None)?;
    let ce = tape.cross_entropy(fwd.logits, y)?;
    let loss = match fwd.kl {
        Some(kl) => {
            let w = tape.scale(kl.value, beta)?;
            tape.add(ce, w)?
        }
        None => ce,
    };
    Ok((loss, fwd.params))
}

/// Checks `∂(CE + β·KL)/∂θ` for every parameter of a small train-mode model.
pub fn check_model(cfg: &ModelCheck) -> Result<Vec<GradCheck>> {
    let mut model = build_model(&cfg.spec, cfg.seed)?;
    let mut rng = SeedRng::new(cfg.seed, Stream::Check);
    let x = random(&mut rng, &[cfg.batch, cfg.spec.d_in]);
    let y: Vec<usize> = (0..cfg.batch).map(|i| i % cfg.spec.n_classes).collect();

    let mut tape = Tape::new();
    let (loss, params) = model_loss(&mut model.clone(), &x, &y, cfg.beta, &mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())))
        .collect();

    let eval = |m: &Model| -> Result<f64> {
        let mut m = m.clone();
        let mut t = Tape::new();
        let (loss, _) = model_loss(&mut m, &x, &y, cfg.beta, &mut t)?;
        Ok(t.value(loss).data()[0])
    };

    let names = model.param_names();
    let mut report = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        let n = model.params()[pi].numel();
        for j in 0..n {
            let x0 = model.params()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&model)?;
            model.params_mut()[pi].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&model)?;
            model.params_mut()[pi].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi].data()[j], fd));
        }
        report.push(GradCheck {
            name: name.clone(),
            max_rel_err: worst,
            checked: n,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Estimates `E_q[log q(x) − log p(x)]` for diagonal Gaussians `q = N(mu0, var0)`,
/// `p = N(mu1, var1)` from `samples` draws of `q`.
pub fn kl_monte_carlo(
    mu0: &[f64],
    var0: &[f64],
    mu1: &[f64],
    var1: &[f64],
    samples: usize,
    rng: &mut SeedRng,
) -> Result<McEstimate> {
    let k = mu0.len();
    if var0.len() != k || mu1.len() != k || var1.len() != k || samples < 2 {
        return Err(Error::invalid("kl_monte_carlo: mismatched dimensions or too few samples"));
    }
    let sd0: Vec<f64> = var0.iter().map(|v| v.sqrt()).collect();
    // log-density constants; the shared −½ln(2π) cancels
    let c: f64 = (0..k).map(|i| 0.5 * (var1[i].ln() - var0[i].ln())).sum();
    let mut draws = Vec::with_capacity(k + 1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        draws.clear();
        while draws.len() < k {
            let (a, b) = rng.normal_pair();
            draws.push(a);
            draws.push(b);
        }
        let mut log_ratio = c;
        for i in 0..k {
            let x = mu0[i] + sd0[i] * draws[i];
            let dq = x - mu0[i];
            let dp = x - mu1[i];
            log_ratio += -0.5 * dq * dq / var0[i] + 0.5 * dp * dp / var1[i];
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq / n) - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlCheckRow {
    pub k: usize,
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub var1: Vec<f64>,
    pub closed_form: f64,
    pub monte_carlo: McEstimate,
}

impl KlCheckRow {
    /// Standard errors separating the two estimates.
    pub fn z_score(&self) -> f64 {
        let diff = (self.closed_form - self.monte_carlo.mean).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.monte_carlo.std_err
        }
    }

    pub fn passed(&self, max_z: f64) -> bool {
        self.z_score() <= max_z
    }
}

fn kl_row(
    mu0: Vec<f64>,
    var0: Vec<f64>,
    mu1: Vec<f64>,
    var1: Vec<f64>,
    samples: usize,
    rng: &mut SeedRng,
) -> Result<KlCheckRow> {
    let closed_form = kl_diag_gauss(&mu0, &var0, &mu1, &var1)?;
    let monte_carlo = kl_monte_carlo(&mu0, &var0, &mu1, &var1, samples, rng)?;
    Ok(KlCheckRow {
        k: mu0.len(),
        mu0,
        var0,
        mu1,
        var1,
        closed_form,
        monte_carlo,
    })
}

/// Closed form versus Monte Carlo on the two fixed anchors followed by `pairs`
/// random Gaussians with `K` cycling through `dims`. Even-indexed pairs use the
/// standard-normal prior; odd ones a random diagonal Gaussian.
pub fn kl_oracle_suite(pairs: usize, dims: &[usize], samples: usize, seed: u64) -> Result<Vec<KlCheckRow>> {
    let mut jobs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
        (vec![0.5, -1.0], vec![2.0, 0.5], vec![0.5, -1.0], vec![2.0, 0.5]),
        (vec![1.0, 0.0], vec![2.0, 0.5], vec![0.0, 0.0], vec![1.0, 1.0]),
    ];
    let mut rng = SeedRng::new(seed, Stream::Check);
    let log_var = |rng: &mut SeedRng| rng.uniform_in(0.25f64.ln(), 4f64.ln()).exp();
    for i in 0..pairs {
        let k = dims[i % dims.len()];
        let mu0 = (0..k).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let var0 = (0..k).map(|_| log_var(&mut rng)).collect();
        let (mu1, var1) = if i % 2 == 0 {
            (vec![0.0; k], vec![1.0; k])
        } else {
            (
                (0..k).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
                (0..k).map(|_| log_var(&mut rng)).collect(),
            )
        };
        jobs.push((mu0, var0, mu1, var1));
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, (m0, v0, m1, v1))| {
            let mut r = SeedRng::with_stream_id(seed, 1000 + i as u64);
            kl_row(m0, v0, m1, v1, samples, &mut r)
        })
        .collect()
}
