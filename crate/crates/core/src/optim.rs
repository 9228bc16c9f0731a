//! Objective pieces and the parameter update rule.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-mean softmax cross-entropy.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.value(ce).data()[0])
}

/// Linear KL-weight annealing `β_t = min(cap, epoch · β₀)` with 1-indexed epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub cap: f64,
}

impl BetaSchedule {
    pub fn new(beta0: f64) -> Result<Self> {
        Self::with_cap(beta0, 1.0)
    }

    /// `beta0 = 0` is allowed and disables the KL term for every epoch.
    pub fn with_cap(beta0: f64, cap: f64) -> Result<Self> {
        if !(beta0 >= 0.0 && beta0.is_finite()) {
            return Err(Error::invalid(format!("beta0 {beta0} must be finite and >= 0")));
        }
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::invalid(format!("beta cap {cap} must be finite and > 0")));
        }
        Ok(Self { beta0, cap })
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        (epoch as f64 * self.beta0).min(self.cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub beta_t: f64,
    pub total: f64,
}

/// `total = ce + beta_t · kl`.
pub fn total_loss(ce: f64, kl: f64, beta_t: f64) -> Result<LossBreakdown> {
    let total = ce + beta_t * kl;
    if !(ce.is_finite() && kl.is_finite() && beta_t.is_finite() && total.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(LossBreakdown {
        ce,
        kl,
        beta_t,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.numel()).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam_step: {} params, {} grads, optimizer built for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.numel() || p.numel() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Domain {
                    op: "adam_step",
                    detail: format!("non-finite gradient in parameter {i}"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + c.weight_decay * *theta;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::from_rows(&[[0.0, 0.0], [1.5, 1.5]]).unwrap();
        let ce = cross_entropy(&uniform, &[0, 1]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);

        // ln(1 + e^-20)
        let ce = cross_entropy(&Tensor::from_rows(&[[10.0, -10.0]]).unwrap(), &[0]).unwrap();
        assert!((ce - 2.061_153_620_314_381e-9).abs() < 1e-22);

        assert!(cross_entropy(&uniform, &[0, 2]).is_err());
    }

    #[test]
    fn cross_entropy_permutation_equivariant() {
        let logits = Tensor::from_rows(&[[0.2, -1.0, 3.0], [1.1, 0.4, -0.7]]).unwrap();
        let labels = [2, 0];
        let perm = [2, 0, 1]; // new column j holds old column perm[j]
        let mut shuffled = Vec::new();
        for i in 0..2 {
            shuffled.push(perm.iter().map(|&p| logits.get2(i, p)).collect::<Vec<_>>());
        }
        let inv = |old: usize| perm.iter().position(|&p| p == old).unwrap();
        let new_labels: Vec<usize> = labels.iter().map(|&y| inv(y)).collect();
        let a = cross_entropy(&logits, &labels).unwrap();
        let b = cross_entropy(&Tensor::from_rows(&shuffled).unwrap(), &new_labels).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn beta_schedule_examples() {
        let s = BetaSchedule::new(0.25).unwrap();
        assert_eq!(s.beta_at(1), 0.25);
        assert_eq!(s.beta_at(5), 1.0);
        assert_eq!(BetaSchedule::new(2.0).unwrap().beta_at(1), 1.0);
        assert_eq!(BetaSchedule::new(0.0).unwrap().beta_at(7), 0.0);
        assert!(BetaSchedule::new(-0.1).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(0.5, 2.0, 0.1).unwrap();
        assert!((b.total - 0.7).abs() < 1e-15);
        assert_eq!(total_loss(0.5, 2.0, 0.0).unwrap().total, 0.5);
        assert_eq!(total_loss(0.5, 0.0, 0.3).unwrap().total, 0.5);
        assert!(total_loss(f64::NAN, 0.0, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut theta = Tensor::vector(vec![1.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, [&theta]);
        let g = 3.0;
        adam.step(vec![&mut theta], &[Tensor::vector(vec![g])]).unwrap();
        // Δθ = −lr·g/(|g| + eps)
        let want = 1.0 - 0.01 * g / (g + 1e-8);
        assert!((theta.data()[0] - want).abs() < 1e-15);
        assert!((theta.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut theta = Tensor::vector(vec![0.3, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), [&theta]);
        for _ in 0..5 {
            adam.step(vec![&mut theta], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(theta.data(), &[0.3, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut theta = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), [&theta]);
        let err = adam
            .step(vec![&mut theta], &[Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("adam_step"));
        assert_eq!(theta.data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // reference recurrence written out independently of `Adam::step`
        let (lr, b1, b2, eps) = (1e-2f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut theta = Tensor::vector(vec![1.0]);
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, [&theta]);
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * theta.data()[0]]);
            adam.step(vec![&mut theta], &[g]).unwrap();
        }
        assert!(theta.data()[0].abs() < 1e-3);
        assert_eq!(theta.data()[0], th);
    }

    #[test]
    fn kl_weight_gradient_is_beta() {
        let mut tape = Tape::new();
        let ce = tape.leaf(Tensor::scalar(0.4));
        let kl = tape.leaf(Tensor::scalar(1.7));
        let beta_t = 0.35;
        let weighted = tape.scale(kl, beta_t).unwrap();
        let total = tape.add(ce, weighted).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(kl).unwrap().data(), &[beta_t]);
        assert_eq!(tape.grad(ce).unwrap().data(), &[1.0]);
        let b = total_loss(0.4, 1.7, beta_t).unwrap();
        assert_eq!(tape.value(total).data()[0], b.total);
    }
}
