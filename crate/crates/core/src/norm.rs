//! Normalization layers: batch, layer and group norm baselines plus the
//! KL-regularized normalization layer.
//!
//! Every layer has two entry points. The taped ones (`*_taped`, and
//! [`NormLayer::forward_train`] / [`NormLayer::forward_infer`]) take bound
//! parameter variables and are what the model uses during training. The
//! plain ones take and return [`Tensor`]s and build a throwaway tape.
//!
//! KL-Norm replaces batch norm's learned `γ`/`β` with per-example values
//! predicted from the un-normalized input by two linear heads:
//!
//! ```text
//! x̂   = (x − μ_batch) / sqrt(σ²_batch + ε)
//! μ_v = x·W_μ + b_μ
//! s   = clamp(x·W_s + b_s, −10, 10)      (log-variance)
//! z   = exp(s/2) ⊙ x̂ + μ_v
//! KL  = mean_i Σ_k ½ (exp(s_ik) + μ_v,ik² − 1 − s_ik)
//! ```
//!
//! The KL term is the divergence of `N(μ_v, diag exp(s))` from the
//! standard-normal prior.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{reduce_stats, Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Bound applied to predicted log-variances before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Exponential moving averages of batch mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub alpha: f64,
    pub eps: f64,
}

impl MovingStats {
    /// Starts at mean 0, variance 1.
    pub fn new(d: usize, alpha: f64, eps: f64) -> Result<Self> {
        validate_alpha_eps(alpha, eps)?;
        Ok(Self {
            mean: Tensor::zeros(&[d]),
            var: Tensor::ones(&[d]),
            alpha,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    /// `μ̂ ← α·μ + (1−α)·μ̂`, same for the variance.
    pub fn update(&mut self, mu: &Tensor, var: &Tensor) -> Result<()> {
        let d = self.dim();
        if mu.numel() != d || var.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "update_moving_stats",
                lhs: vec![d],
                rhs: mu.shape().to_vec(),
            });
        }
        let a = self.alpha;
        for (h, &m) in self.mean.data_mut().iter_mut().zip(mu.data()) {
            *h = a * m + (1.0 - a) * *h;
        }
        for (h, &v) in self.var.data_mut().iter_mut().zip(var.data()) {
            *h = a * v + (1.0 - a) * *h;
        }
        Ok(())
    }
}

fn validate_alpha_eps(alpha: f64, eps: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("moving-average alpha {alpha} not in (0, 1]")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps {eps} must be finite and non-negative")));
    }
    Ok(())
}

fn check_width(op: &'static str, x: &Tensor, d: usize) -> Result<()> {
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

/// `(x − mean) / sqrt(var + eps)` with broadcasting.
pub fn standardize(tape: &mut Tape, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
    let centered = tape.sub(x, mean)?;
    let shifted = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(shifted)?;
    tape.div(centered, std)
}

/// Result of a train-mode batch standardization.
#[derive(Debug, Clone, Copy)]
pub struct BatchStandardized {
    pub x_hat: Var,
    pub mean: Var,
    pub var: Var,
}

pub fn standardize_batch(tape: &mut Tape, x: Var, eps: f64) -> Result<BatchStandardized> {
    let (mean, var) = reduce_stats(tape, x)?;
    let x_hat = standardize(tape, x, mean, var, eps)?;
    Ok(BatchStandardized { x_hat, mean, var })
}

fn bind_all(tape: &mut Tape, params: &[&Tensor]) -> Vec<Var> {
    params.iter().map(|p| tape.constant((*p).clone())).collect()
}

// ---------------------------------------------------------------------------
// Batch norm

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: MovingStats,
}

impl BatchNorm {
    pub fn new(d: usize, alpha: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            stats: MovingStats::new(d, alpha, eps)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// Returns `(z, batch standardization)`; moving statistics are left alone.
    pub fn train_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<(Var, BatchStandardized)> {
        check_width("batchnorm", tape.value(x), self.dim())?;
        let s = standardize_batch(tape, x, self.stats.eps)?;
        let scaled = tape.mul(s.x_hat, p[0])?;
        let z = tape.add(scaled, p[1])?;
        Ok((z, s))
    }

    pub fn infer_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        check_width("batchnorm", tape.value(x), self.dim())?;
        let mean = tape.constant(self.stats.mean.clone());
        let var = tape.constant(self.stats.var.clone());
        let x_hat = standardize(tape, x, mean, var, self.stats.eps)?;
        let scaled = tape.mul(x_hat, p[0])?;
        tape.add(scaled, p[1])
    }

    /// Train-mode output and `x̂` using batch statistics. Does not touch the moving stats.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let (z, s) = self.train_taped(&mut tape, xv, &p)?;
        Ok((tape.value(z).clone(), tape.value(s.x_hat).clone()))
    }

    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let z = self.infer_taped(&mut tape, xv, &p)?;
        Ok(tape.value(z).clone())
    }
}

// ---------------------------------------------------------------------------
// Layer norm and group norm

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize, eps: f64) -> Result<Self> {
        validate_alpha_eps(1.0, eps)?;
        Ok(Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        check_width("layernorm", tape.value(x), self.dim())?;
        let x_hat = standardize_rows(tape, x, self.eps)?;
        let scaled = tape.mul(x_hat, p[0])?;
        tape.add(scaled, p[1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let z = self.forward_taped(&mut tape, xv, &p)?;
        Ok(tape.value(z).clone())
    }
}

/// Standardizes each row of an `m×d` tensor by its own mean and variance.
fn standardize_rows(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let mean = tape.mean_axis(x, 1, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axis(sq, 1, true)?;
    let shifted = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(shifted)?;
    tape.div(centered, std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(d: usize, groups: usize, eps: f64) -> Result<Self> {
        if groups == 0 || !d.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "group count {groups} does not divide width {d}"
            )));
        }
        validate_alpha_eps(1.0, eps)?;
        Ok(Self {
            groups,
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        let d = self.dim();
        check_width("groupnorm", tape.value(x), d)?;
        let m = tape.value(x).rows();
        let g = self.groups;
        let grouped = tape.reshape(x, &[m, g, d / g])?;
        let mean = tape.mean_axis(grouped, 2, true)?;
        let centered = tape.sub(grouped, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_axis(sq, 2, true)?;
        let shifted = tape.add_scalar(var, self.eps)?;
        let std = tape.sqrt(shifted)?;
        let x_hat = tape.div(centered, std)?;
        let x_hat = tape.reshape(x_hat, &[m, d])?;
        let scaled = tape.mul(x_hat, p[0])?;
        tape.add(scaled, p[1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let z = self.forward_taped(&mut tape, xv, &p)?;
        Ok(tape.value(z).clone())
    }
}

// ---------------------------------------------------------------------------
// KL divergence

/// Batch-mean KL divergence together with its per-example values.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub value: f64,
    pub per_example: Tensor,
}

impl KlTerm {
    pub fn zero(m: usize) -> Self {
        Self {
            value: 0.0,
            per_example: Tensor::zeros(&[m]),
        }
    }
}

/// Taped counterpart of [`KlTerm`].
#[derive(Debug, Clone, Copy)]
pub struct KlVars {
    pub value: Var,
    pub per_example: Var,
}

impl KlVars {
    pub fn to_term(self, tape: &Tape) -> KlTerm {
        KlTerm {
            value: tape.value(self.value).data()[0],
            per_example: tape.value(self.per_example).clone(),
        }
    }
}

/// Closed-form `KL(N(mu0, diag var0) ‖ N(mu1, diag var1))`.
pub fn kl_diag_gauss(mu0: &[f64], var0: &[f64], mu1: &[f64], var1: &[f64]) -> Result<f64> {
    let k = mu0.len();
    if var0.len() != k || mu1.len() != k || var1.len() != k {
        return Err(Error::ShapeMismatch {
            op: "kl_diag_gauss",
            lhs: vec![mu0.len(), var0.len()],
            rhs: vec![mu1.len(), var1.len()],
        });
    }
    if let Some(bad) = var0.iter().chain(var1).find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(Error::Domain {
            op: "kl_diag_gauss",
            detail: format!("variance must be positive, got {bad}"),
        });
    }
    let mut trace = 0.0;
    let mut maha = 0.0;
    let mut log_det = 0.0;
    for i in 0..k {
        trace += var0[i] / var1[i];
        maha += (mu1[i] - mu0[i]).powi(2) / var1[i];
        log_det += var1[i].ln() - var0[i].ln();
    }
    let kl = 0.5 * (trace + maha - k as f64 + log_det);
    if !kl.is_finite() {
        return Err(Error::NonFinite { op: "kl_diag_gauss" });
    }
    // rounding can leave a tiny negative at identical arguments
    Ok(kl.max(0.0))
}

/// Differentiable form of [`kl_diag_gauss`] in `mu0` and `var0` (rank-1 variables).
pub fn kl_diag_gauss_taped(
    tape: &mut Tape,
    mu0: Var,
    var0: Var,
    mu1: &Tensor,
    var1: &Tensor,
) -> Result<Var> {
    let k = tape.value(mu0).numel();
    let mu1 = tape.constant(mu1.clone());
    let var1_v = tape.constant(var1.clone());
    let ratio = tape.div(var0, var1_v)?;
    let diff = tape.sub(mu1, mu0)?;
    let diff_sq = tape.square(diff)?;
    let maha = tape.div(diff_sq, var1_v)?;
    let log_var1 = tape.log(var1_v)?;
    let log_var0 = tape.log(var0)?;
    let log_ratio = tape.sub(log_var1, log_var0)?;
    let a = tape.add(ratio, maha)?;
    let b = tape.add(a, log_ratio)?;
    let s = tape.sum(b)?;
    let s = tape.add_scalar(s, -(k as f64))?;
    tape.scale(s, 0.5)
}

/// KL of `N(mu, diag exp(logvar))` from `N(0, I)` for each row, plus the batch mean.
pub fn kl_to_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<KlVars> {
    let shape = tape.value(mu).shape().to_vec();
    let [m, k] = shape[..] else {
        return Err(Error::invalid("kl_to_standard_normal expects m×K inputs"));
    };
    let var = tape.exp(logvar)?;
    let mu_sq = tape.square(mu)?;
    let a = tape.add(var, mu_sq)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0)?;
    let elem = tape.scale(c, 0.5)?;
    // row sums via a ones vector keep the summation order fixed
    let ones = tape.constant(Tensor::ones(&[k, 1]));
    let rows = tape.matmul(elem, ones)?;
    let per_example = tape.reshape(rows, &[m])?;
    let value = tape.mean(per_example)?;
    Ok(KlVars { value, per_example })
}

// ---------------------------------------------------------------------------
// KL-Norm

#[derive(Debug, Clone, PartialEq)]
pub struct KlNorm {
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub stats: MovingStats,
}

/// Taped rescaling values predicted by the heads.
#[derive(Debug, Clone, Copy)]
pub struct Rescaling {
    pub mu: Var,
    pub logvar: Var,
    pub sigma: Var,
}

impl KlNorm {
    pub fn new(k: usize, alpha: f64, eps: f64, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            mean_head: Linear::init(k, k, rng),
            logvar_head: Linear::init(k, k, rng),
            stats: MovingStats::new(k, alpha, eps)?,
        })
    }

    /// Heads that output `μ_v = 0`, `log σ_v² = 0` for every input.
    pub fn pinned(k: usize, alpha: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            mean_head: Linear::zeros(k, k),
            logvar_head: Linear::zeros(k, k),
            stats: MovingStats::new(k, alpha, eps)?,
        })
    }

    pub fn pin_identity(&mut self) {
        let k = self.dim();
        self.mean_head = Linear::zeros(k, k);
        self.logvar_head = Linear::zeros(k, k);
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.mean_head.params().to_vec();
        v.extend(self.logvar_head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.mean_head.params_mut().into_iter().collect();
        v.extend(self.logvar_head.params_mut());
        v
    }

    /// Both heads read the un-normalized input `x`.
    pub fn rescaling_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Rescaling> {
        let heads = |tape: &mut Tape| -> Result<Rescaling> {
            let mu = Linear::apply(tape, x, &p[0..2])?;
            let raw = Linear::apply(tape, x, &p[2..4])?;
            let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
            let half = tape.scale(logvar, 0.5)?;
            let sigma = tape.exp(half)?;
            Ok(Rescaling { mu, logvar, sigma })
        };
        heads(tape).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { op: "klnorm heads" },
            other => other,
        })
    }

    /// Train mode: batch statistics, heads, KL term. Moving statistics are updated.
    pub fn train_taped(&mut self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<(Var, KlVars)> {
        check_width("klnorm", tape.value(x), self.dim())?;
        let s = standardize_batch(tape, x, self.stats.eps)?;
        let r = self.rescaling_taped(tape, x, p)?;
        let scaled = tape.mul(s.x_hat, r.sigma)?;
        let z = tape.add(scaled, r.mu)?;
        let kl = kl_to_standard_normal(tape, r.mu, r.logvar)?;
        let (mean, var) = (tape.value(s.mean).clone(), tape.value(s.var).clone());
        self.stats.update(&mean, &var)?;
        Ok((z, kl))
    }

    pub fn infer_taped(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        check_width("klnorm", tape.value(x), self.dim())?;
        let mean = tape.constant(self.stats.mean.clone());
        let var = tape.constant(self.stats.var.clone());
        let x_hat = standardize(tape, x, mean, var, self.stats.eps)?;
        let r = self.rescaling_taped(tape, x, p)?;
        let scaled = tape.mul(x_hat, r.sigma)?;
        tape.add(scaled, r.mu)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, KlTerm)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let (z, kl) = self.train_taped(&mut tape, xv, &p)?;
        Ok((tape.value(z).clone(), kl.to_term(&tape)))
    }

    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let z = self.infer_taped(&mut tape, xv, &p)?;
        Ok(tape.value(z).clone())
    }

    /// Head outputs `(μ_v, σ_v)` for `x`.
    pub fn rescaling(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_all(&mut tape, &self.params());
        let r = self.rescaling_taped(&mut tape, xv, &p)?;
        Ok((tape.value(r.mu).clone(), tape.value(r.sigma).clone()))
    }
}

// ---------------------------------------------------------------------------
// Tagged union

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    Layer,
    Group(usize),
    KlNorm,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::None => f.write_str("none"),
            NormKind::Batch => f.write_str("batch"),
            NormKind::Layer => f.write_str("layer"),
            NormKind::Group(g) => write!(f, "group:{g}"),
            NormKind::KlNorm => f.write_str("klnorm"),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let group = s
            .strip_prefix("group:")
            .or_else(|| s.strip_prefix("group(").and_then(|r| r.strip_suffix(')')));
        if let Some(g) = group {
            let g = g
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad group count in norm kind '{s}'")))?;
            return Ok(NormKind::Group(g));
        }
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "klnorm" | "kl" => Ok(NormKind::KlNorm),
            other => Err(Error::Config(format!(
                "unknown norm kind '{other}' (none, batch, layer, group:<g>, klnorm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormLayer {
    None,
    Batch(BatchNorm),
    Layer(LayerNorm),
    Group(GroupNorm),
    KlNorm(KlNorm),
}

/// Output of a taped normalization pass.
#[derive(Debug, Clone, Copy)]
pub struct NormOutput {
    pub z: Var,
    pub kl: Option<KlVars>,
}

impl NormLayer {
    pub fn build(kind: NormKind, d: usize, alpha: f64, eps: f64, rng: &mut SeedRng) -> Result<Self> {
        Ok(match kind {
            NormKind::None => NormLayer::None,
            NormKind::Batch => NormLayer::Batch(BatchNorm::new(d, alpha, eps)?),
            NormKind::Layer => NormLayer::Layer(LayerNorm::new(d, eps)?),
            NormKind::Group(g) => NormLayer::Group(GroupNorm::new(d, g, eps)?),
            NormKind::KlNorm => NormLayer::KlNorm(KlNorm::new(d, alpha, eps, rng)?),
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::None => NormKind::None,
            NormLayer::Batch(_) => NormKind::Batch,
            NormLayer::Layer(_) => NormKind::Layer,
            NormLayer::Group(g) => NormKind::Group(g.groups),
            NormLayer::KlNorm(_) => NormKind::KlNorm,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            NormLayer::None => Vec::new(),
            NormLayer::Batch(l) => l.params(),
            NormLayer::Layer(l) => l.params(),
            NormLayer::Group(l) => l.params(),
            NormLayer::KlNorm(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            NormLayer::None => Vec::new(),
            NormLayer::Batch(l) => l.params_mut(),
            NormLayer::Layer(l) => l.params_mut(),
            NormLayer::Group(l) => l.params_mut(),
            NormLayer::KlNorm(l) => l.params_mut(),
        }
    }

    pub fn moving_stats(&self) -> Option<&MovingStats> {
        match self {
            NormLayer::Batch(l) => Some(&l.stats),
            NormLayer::KlNorm(l) => Some(&l.stats),
            _ => None,
        }
    }

    pub fn moving_stats_mut(&mut self) -> Option<&mut MovingStats> {
        match self {
            NormLayer::Batch(l) => Some(&mut l.stats),
            NormLayer::KlNorm(l) => Some(&mut l.stats),
            _ => None,
        }
    }

    /// Train-mode pass. Batch norm and KL-Norm update their moving statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<NormOutput> {
        let (z, kl) = match self {
            NormLayer::None => (x, None),
            NormLayer::Batch(l) => {
                let (z, s) = l.train_taped(tape, x, p)?;
                let (mean, var) = (tape.value(s.mean).clone(), tape.value(s.var).clone());
                l.stats.update(&mean, &var)?;
                (z, None)
            }
            NormLayer::Layer(l) => (l.forward_taped(tape, x, p)?, None),
            NormLayer::Group(l) => (l.forward_taped(tape, x, p)?, None),
            NormLayer::KlNorm(l) => {
                let (z, kl) = l.train_taped(tape, x, p)?;
                (z, Some(kl))
            }
        };
        Ok(NormOutput { z, kl })
    }

    /// Inference pass. KL-Norm still reports its KL term, computed from the heads.
    pub fn forward_infer(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<NormOutput> {
        let z = match self {
            NormLayer::None => x,
            NormLayer::Batch(l) => l.infer_taped(tape, x, p)?,
            NormLayer::Layer(l) => l.forward_taped(tape, x, p)?,
            NormLayer::Group(l) => l.forward_taped(tape, x, p)?,
            NormLayer::KlNorm(l) => {
                let z = l.infer_taped(tape, x, p)?;
                let r = l.rescaling_taped(tape, x, p)?;
                let kl = kl_to_standard_normal(tape, r.mu, r.logvar)?;
                return Ok(NormOutput { z, kl: Some(kl) });
            }
        };
        Ok(NormOutput { z, kl: None })
    }

    /// Train-mode output written as `α ⊙ x + ζ` with per-element `α`, `ζ` (both `m×d`).
    ///
    /// Every layer here is affine in `x` once its statistics are fixed; this
    /// returns that affine map for the batch `x`.
    pub fn effective_affine(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (m, d) = (x.rows(), x.cols());
        let mut alpha = Tensor::zeros(&[m, d]);
        let mut zeta = Tensor::zeros(&[m, d]);
        let set = |alpha: &mut Tensor, zeta: &mut Tensor, i: usize, j: usize, scale: f64, bias: f64, mu: f64, var: f64, eps: f64| {
            let inv = 1.0 / (var + eps).sqrt();
            alpha.data_mut()[i * d + j] = scale * inv;
            zeta.data_mut()[i * d + j] = bias - scale * mu * inv;
        };
        match self {
            NormLayer::None => {
                alpha = Tensor::ones(&[m, d]);
            }
            NormLayer::Batch(l) => {
                let (mu, var) = column_stats(x);
                for i in 0..m {
                    for j in 0..d {
                        let (g, b) = (l.gamma.data()[j], l.beta.data()[j]);
                        set(&mut alpha, &mut zeta, i, j, g, b, mu[j], var[j], l.stats.eps);
                    }
                }
            }
            NormLayer::Layer(l) => {
                for i in 0..m {
                    let (mu, var) = slice_stats(x.row(i));
                    for j in 0..d {
                        let (g, b) = (l.gamma.data()[j], l.beta.data()[j]);
                        set(&mut alpha, &mut zeta, i, j, g, b, mu, var, l.eps);
                    }
                }
            }
            NormLayer::Group(l) => {
                let width = d / l.groups;
                for i in 0..m {
                    for grp in 0..l.groups {
                        let cols = grp * width..(grp + 1) * width;
                        let (mu, var) = slice_stats(&x.row(i)[cols.clone()]);
                        for j in cols {
                            let (g, b) = (l.gamma.data()[j], l.beta.data()[j]);
                            set(&mut alpha, &mut zeta, i, j, g, b, mu, var, l.eps);
                        }
                    }
                }
            }
            NormLayer::KlNorm(l) => {
                let (mu, var) = column_stats(x);
                let (mu_v, sigma) = l.rescaling(x)?;
                for i in 0..m {
                    for j in 0..d {
                        let (s, b) = (sigma.get2(i, j), mu_v.get2(i, j));
                        set(&mut alpha, &mut zeta, i, j, s, b, mu[j], var[j], l.stats.eps);
                    }
                }
            }
        }
        Ok((alpha, zeta))
    }
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    for i in 0..m {
        for (a, v) in mu.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    mu.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            var[j] += (x.get2(i, j) - mu[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mu, var)
}

fn slice_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn batchnorm_train_examples() {
        let bn = BatchNorm::new(1, 0.1, 0.0).unwrap();
        let (z, x_hat) = bn.forward_train(&col(&[1.0, 2.0, 3.0])).unwrap();
        // μ = 2, σ² = 2/3, so ±1/sqrt(2/3) = ±1.224744871391589
        let r = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(close(x_hat.data(), &[-r, 0.0, r], 1e-15));
        assert!((r - 1.2247).abs() < 1e-4);
        assert!(z.bit_eq(&x_hat));

        let mut bn = BatchNorm::new(1, 0.1, 1e-5).unwrap();
        bn.beta = Tensor::vector(vec![0.75]);
        let (z, x_hat) = bn.forward_train(&col(&[4.0, 4.0, 4.0])).unwrap();
        assert_eq!(x_hat.data(), &[0.0; 3]);
        assert_eq!(z.data(), &[0.75; 3]);

        // the plain forward never touches the moving statistics
        assert_eq!(bn.stats.mean.data(), &[0.0]);
        assert_eq!(bn.stats.var.data(), &[1.0]);

        let err = bn.forward_train(&Tensor::zeros(&[3, 2])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "batchnorm", .. }));
    }

    #[test]
    fn batchnorm_affine_substitution() {
        // γ=2, β=1 on x̂ = 1 gives 3; use the infer path with identity stats
        let mut bn = BatchNorm::new(1, 0.1, 0.0).unwrap();
        bn.gamma = Tensor::vector(vec![2.0]);
        bn.beta = Tensor::vector(vec![1.0]);
        let z = bn.forward_infer(&col(&[1.0])).unwrap();
        assert_eq!(z.data(), &[3.0]);
    }

    #[test]
    fn moving_stats_examples() {
        let mut s = MovingStats::new(1, 0.1, 1e-5).unwrap();
        s.update(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((s.mean.data()[0] - 0.1).abs() < 1e-15);

        let mut s = MovingStats::new(2, 1.0, 1e-5).unwrap();
        let mu = Tensor::vector(vec![3.5, -2.0]);
        let var = Tensor::vector(vec![0.25, 4.0]);
        s.update(&mu, &var).unwrap();
        assert_eq!(s.mean, mu);
        assert_eq!(s.var, var);

        assert!(s.update(&Tensor::vector(vec![1.0]), &var).is_err());
        assert!(MovingStats::new(1, 0.0, 1e-5).is_err());
        assert!(MovingStats::new(1, 0.5, -1.0).is_err());
    }

    #[test]
    fn moving_stats_geometric_convergence() {
        let (c, alpha, steps) = (3.0, 0.1, 500);
        let mut s = MovingStats::new(1, alpha, 1e-5).unwrap();
        let start = s.mean.data()[0];
        for _ in 0..steps {
            s.update(&Tensor::vector(vec![c]), &Tensor::vector(vec![1.0])).unwrap();
        }
        let bound = (1.0f64 - alpha).powi(steps) * (start - c).abs() + 1e-12;
        assert!((s.mean.data()[0] - c).abs() < bound);
    }

    #[test]
    fn batchnorm_infer_examples() {
        let bn = BatchNorm::new(3, 0.1, 0.0).unwrap();
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0], [3.0, 0.0, -4.0]]).unwrap();
        assert_eq!(bn.forward_infer(&x).unwrap(), x);

        let mut bn = BatchNorm::new(1, 0.1, 1e-5).unwrap();
        bn.stats.mean = Tensor::vector(vec![2.0]);
        bn.stats.var = Tensor::vector(vec![2.0 / 3.0]);
        assert_eq!(bn.forward_infer(&col(&[2.0])).unwrap().data(), &[0.0]);

        let big = col(&[2.0, -1.0, 7.5, 0.25]);
        let all = bn.forward_infer(&big).unwrap();
        for i in 0..4 {
            let one = bn.forward_infer(&col(&[big.data()[i]])).unwrap();
            assert_eq!(one.data()[0].to_bits(), all.data()[i].to_bits());
        }
    }

    #[test]
    fn layernorm_examples() {
        let ln = LayerNorm::new(3, 0.0).unwrap();
        let z = ln.forward(&Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let r = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(close(z.data(), &[-r, 0.0, r], 1e-15));

        let ln = LayerNorm::new(3, 1e-5).unwrap();
        let z = ln.forward(&Tensor::from_rows(&[[5.0, 5.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0; 3]);

        let ln = LayerNorm::new(4, 0.0).unwrap();
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.5, 0.9]]).unwrap();
        let y = x.map(|v| 2.5 * v - 7.0);
        let (zx, zy) = (ln.forward(&x).unwrap(), ln.forward(&y).unwrap());
        assert!(zx.max_abs_diff(&zy) < 1e-12);

        assert!(ln.forward(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn groupnorm_examples() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.5, 0.9], [4.0, 1.0, -2.0, 0.5]]).unwrap();
        let g1 = GroupNorm::new(4, 1, 1e-5).unwrap().forward(&x).unwrap();
        let ln = LayerNorm::new(4, 1e-5).unwrap().forward(&x).unwrap();
        assert!(g1.max_abs_diff(&ln) < 1e-14);

        let gd = GroupNorm::new(4, 4, 1e-5).unwrap().forward(&x).unwrap();
        assert_eq!(gd.data(), &[0.0; 8]);

        let gn = GroupNorm::new(4, 2, 0.0).unwrap();
        let z = gn.forward(&Tensor::from_rows(&[[1.0, 3.0, 10.0, 30.0]]).unwrap()).unwrap();
        assert!(close(z.data(), &[-1.0, 1.0, -1.0, 1.0], 1e-15));

        assert!(GroupNorm::new(6, 4, 1e-5).is_err());
        assert!(GroupNorm::new(6, 0, 1e-5).is_err());
    }

    #[test]
    fn kl_closed_form_anchors() {
        assert_eq!(kl_diag_gauss(&[0.3, -1.0], &[2.0, 0.5], &[0.3, -1.0], &[2.0, 0.5]).unwrap(), 0.0);
        let kl = kl_diag_gauss(&[1.0, 0.0], &[2.0, 0.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((kl - 0.75).abs() < 1e-15);
        let kl = kl_diag_gauss(&[3.0], &[1.0], &[0.0], &[1.0]).unwrap();
        assert!((kl - 4.5).abs() < 1e-15);
        // ½(4 − 1 − ln 4) and ½(1/4 − 1 + ln 4)
        let fwd = kl_diag_gauss(&[0.0], &[4.0], &[0.0], &[1.0]).unwrap();
        let rev = kl_diag_gauss(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap();
        assert!((fwd - 0.806_852_819_440_054_7).abs() < 1e-14);
        assert!((rev - 0.318_147_180_559_945_3).abs() < 1e-14);
        assert!(kl_diag_gauss(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        assert!(kl_diag_gauss(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_taped_matches_closed_form() {
        let mu0 = [0.4, -1.3, 2.0];
        let var0 = [0.7, 1.9, 0.2];
        let mu1 = Tensor::vector(vec![0.1, 0.0, -0.5]);
        let var1 = Tensor::vector(vec![1.5, 0.8, 2.2]);
        let mut t = Tape::new();
        let m = t.leaf(Tensor::vector(mu0.to_vec()));
        let v = t.leaf(Tensor::vector(var0.to_vec()));
        let kl = kl_diag_gauss_taped(&mut t, m, v, &mu1, &var1).unwrap();
        let want = kl_diag_gauss(&mu0, &var0, mu1.data(), var1.data()).unwrap();
        assert!((t.value(kl).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn klnorm_pinned_heads_reduce_to_batchnorm() {
        let mut rng = SeedRng::new(5, Stream::Check);
        let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.normal() * 2.0 + 1.0).collect()).unwrap();
        let mut kn = KlNorm::pinned(3, 0.1, 1e-5).unwrap();
        let (z, kl) = kn.forward_train(&x).unwrap();
        let (_, x_hat) = BatchNorm::new(3, 0.1, 1e-5).unwrap().forward_train(&x).unwrap();
        assert!(z.bit_eq(&x_hat));
        assert_eq!(kl.value, 0.0);
        assert_eq!(kl.per_example.data(), &[0.0; 6]);
    }

    #[test]
    fn klnorm_kl_matches_closed_form_per_example() {
        // mean head outputs (1, 0), log-variance head outputs (ln 2, ln 0.5)
        let mut kn = KlNorm::pinned(2, 0.1, 1e-5).unwrap();
        kn.mean_head.bias = Tensor::vector(vec![1.0, 0.0]);
        kn.logvar_head.bias = Tensor::vector(vec![2f64.ln(), 0.5f64.ln()]);
        let x = Tensor::from_rows(&[[0.2, 0.4], [1.0, -3.0]]).unwrap();
        let (_, kl) = kn.forward_train(&x).unwrap();
        for v in kl.per_example.data() {
            assert!((v - 0.75).abs() < 1e-14, "{v}");
        }
        assert!((kl.value - 0.75).abs() < 1e-14);

        let mut kn = KlNorm::pinned(1, 0.1, 1e-5).unwrap();
        kn.mean_head.bias = Tensor::vector(vec![3.0]);
        let (_, kl) = kn.forward_train(&col(&[0.0, 1.0])).unwrap();
        assert!((kl.value - 4.5).abs() < 1e-14);
    }

    #[test]
    fn klnorm_updates_stats_in_train_only() {
        let mut rng = SeedRng::new(9, Stream::Init);
        let mut kn = KlNorm::new(2, 0.1, 1e-5, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap();
        let before = kn.stats.clone();
        kn.forward_infer(&x).unwrap();
        assert_eq!(kn.stats, before);
        kn.forward_train(&x).unwrap();
        // μ = (2, 4): 0.1·2, 0.1·4
        assert!(close(kn.stats.mean.data(), &[0.2, 0.4], 1e-15));
    }

    #[test]
    fn klnorm_infer_examples() {
        let kn = KlNorm::pinned(2, 0.1, 0.0).unwrap();
        let x = Tensor::from_rows(&[[0.5, -2.0], [1.5, 3.0]]).unwrap();
        assert_eq!(kn.forward_infer(&x).unwrap(), x);

        let mut kn = KlNorm::pinned(1, 0.1, 0.0).unwrap();
        kn.stats.mean = Tensor::vector(vec![2.0]);
        kn.stats.var = Tensor::vector(vec![2.0 / 3.0]);
        kn.mean_head.bias = Tensor::vector(vec![0.5]);
        assert_eq!(kn.forward_infer(&col(&[2.0])).unwrap().data(), &[0.5]);
    }

    #[test]
    fn logvar_is_clamped() {
        let mut kn = KlNorm::pinned(1, 0.1, 1e-5).unwrap();
        kn.logvar_head.bias = Tensor::vector(vec![50.0]);
        let (_, sigma) = kn.rescaling(&col(&[0.0])).unwrap();
        assert!((sigma.data()[0] - 5f64.exp()).abs() < 1e-9);
        kn.logvar_head.bias = Tensor::vector(vec![-50.0]);
        let (_, sigma) = kn.rescaling(&col(&[0.0])).unwrap();
        assert!((sigma.data()[0] - (-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn norm_kind_parse_roundtrip() {
        for k in [NormKind::None, NormKind::Batch, NormKind::Layer, NormKind::Group(4), NormKind::KlNorm] {
            assert_eq!(k.to_string().parse::<NormKind>().unwrap(), k);
        }
        assert_eq!("group(2)".parse::<NormKind>().unwrap(), NormKind::Group(2));
        assert!("instance".parse::<NormKind>().is_err());
    }
}
