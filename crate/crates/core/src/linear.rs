use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// Fully connected layer `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("linear shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Records `x·W + b` given the layer's bound `[weight, bias]` variables.
    pub fn apply(tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        let [w, b] = p else {
            return Err(Error::invalid("linear layer expects [weight, bias]"));
        };
        let xw = tape.matmul(x, *w)?;
        tape.add(xw, *b)
    }

    /// Plain (untaped) evaluation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let y = Self::apply(&mut tape, xv, &[w, b])?;
        Ok(tape.value(y).clone())
    }
}
