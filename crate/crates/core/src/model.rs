//! Bottleneck classifier: input features → MLP encoder → normalization → linear classifier.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::norm::{KlTerm, KlVars, NormKind, NormLayer, DEFAULT_ALPHA, DEFAULT_EPS};
use crate::rng::{SeedRng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d_in: usize,
    /// Width `K` of the bottleneck that the normalization layer acts on.
    pub bottleneck: usize,
    pub hidden: Vec<usize>,
    pub norm: NormKind,
    pub n_classes: usize,
    pub alpha: f64,
    pub eps: f64,
}

impl ModelSpec {
    pub fn new(d_in: usize, bottleneck: usize, norm: NormKind, n_classes: usize) -> Self {
        Self {
            d_in,
            bottleneck,
            hidden: Self::default_hidden(d_in, bottleneck),
            norm,
            n_classes,
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
        }
    }

    /// `[d, ⌊(3d + K)/4⌋, ⌊(d + K)/2⌋]`.
    pub fn default_hidden(d_in: usize, k: usize) -> Vec<usize> {
        vec![d_in, (3 * d_in + k) / 4, (d_in + k) / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.bottleneck == 0 {
            return Err(Error::invalid("d_in and bottleneck width must be at least 1"));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("hidden layer {i} has width 0")));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if let NormKind::Group(g) = self.norm {
            if g == 0 || !self.bottleneck.is_multiple_of(g) {
                return Err(Error::invalid(format!(
                    "group count {g} does not divide bottleneck {}",
                    self.bottleneck
                )));
            }
        }
        Ok(())
    }

    /// Encoder layer widths from input to bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.d_in);
        w.extend(&self.hidden);
        w.push(self.bottleneck);
        w
    }

    /// Closed-form parameter count of the normalization layer.
    pub fn norm_param_count(&self) -> usize {
        let k = self.bottleneck;
        match self.norm {
            NormKind::None => 0,
            NormKind::Batch | NormKind::Layer | NormKind::Group(_) => 2 * k,
            NormKind::KlNorm => 2 * (k * k + k),
        }
    }

    /// Closed-form parameter count of the whole model.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let encoder: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let classifier = self.bottleneck * self.n_classes + self.n_classes;
        encoder + self.norm_param_count() + classifier
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout on hidden activations.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut SeedRng,
}

/// Variables recorded by one model pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Output of the normalization layer (the classifier input).
    pub z: Var,
    pub kl: Option<KlVars>,
    /// Parameter variables in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Vec<Linear>,
    pub norm: NormLayer,
    pub classifier: Linear,
}

/// Builds a model with weights uniform in `±sqrt(1/fan_in)` and zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::build(spec, seed)
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeedRng::new(seed, Stream::Init);
        let widths = spec.widths();
        let encoder = widths
            .windows(2)
            .map(|p| Linear::init(p[0], p[1], &mut rng))
            .collect();
        let norm = NormLayer::build(spec.norm, spec.bottleneck, spec.alpha, spec.eps, &mut rng)?;
        let classifier = Linear::init(spec.bottleneck, spec.n_classes, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            encoder,
            norm,
            classifier,
        })
    }

    /// All trainable tensors: encoder layers, normalization, classifier.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.iter().flat_map(|l| l.params()).collect();
        v.extend(self.norm.params());
        v.extend(self.classifier.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .encoder
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect();
        v.extend(self.norm.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.encoder.len() {
            v.push(format!("encoder.{i}.weight"));
            v.push(format!("encoder.{i}.bias"));
        }
        let norm: &[&str] = match self.norm {
            NormLayer::None => &[],
            NormLayer::KlNorm(_) => &[
                "norm.mean_head.weight",
                "norm.mean_head.bias",
                "norm.logvar_head.weight",
                "norm.logvar_head.bias",
            ],
            _ => &["norm.gamma", "norm.beta"],
        };
        v.extend(norm.iter().map(|s| s.to_string()));
        v.push("classifier.weight".into());
        v.push("classifier.bias".into());
        v
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.spec.d_in {
            return Err(Error::ShapeMismatch {
                op: "classify_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.d_in],
            });
        }
        Ok(())
    }

    fn encode_taped(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &[Var],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.encoder.len() - 1;
        for i in 0..self.encoder.len() {
            h = Linear::apply(tape, h, &p[2 * i..2 * i + 2])?;
            if i < last {
                h = tape.relu(h)?;
                if let Some(d) = dropout.as_mut().filter(|d| d.rate > 0.0) {
                    let keep = 1.0 - d.rate;
                    let mask = (0..tape.value(h).numel())
                        .map(|_| if d.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = tape.mask(h, mask)?;
                }
            }
        }
        Ok(h)
    }

    fn split_params<'p>(&self, p: &'p [Var]) -> (&'p [Var], &'p [Var], &'p [Var]) {
        let enc = 2 * self.encoder.len();
        let norm = self.norm.params().len();
        (&p[..enc], &p[enc..enc + norm], &p[enc + norm..])
    }

    /// Train-mode pass with parameters bound as differentiable leaves.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Forward> {
        self.check_input(x)?;
        let params: Vec<Var> = self.params().into_iter().map(|t| tape.leaf(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let (enc_p, norm_p, cls_p) = self.split_params(&params);
        let h = self.encode_taped(tape, xv, enc_p, dropout)?;
        let out = self.norm.forward_train(tape, h, norm_p)?;
        let logits = Linear::apply(tape, out.z, cls_p)?;
        Ok(Forward {
            logits,
            z: out.z,
            kl: out.kl,
            params,
        })
    }

    /// Inference pass; parameters are recorded as constants and no state changes.
    pub fn forward_infer(&self, tape: &mut Tape, x: &Tensor) -> Result<Forward> {
        self.check_input(x)?;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let (enc_p, norm_p, cls_p) = self.split_params(&params);
        let h = self.encode_taped(tape, xv, enc_p, None)?;
        let out = self.norm.forward_infer(tape, h, norm_p)?;
        let logits = Linear::apply(tape, out.z, cls_p)?;
        Ok(Forward {
            logits,
            z: out.z,
            kl: out.kl,
            params,
        })
    }

    /// Logits and KL term. The KL is zero unless the norm is KL-Norm.
    pub fn classify(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, KlTerm)> {
        let mut tape = Tape::new();
        let fwd = match mode {
            Mode::Train => self.forward_train(&mut tape, x, None)?,
            Mode::Infer => self.forward_infer(&mut tape, x)?,
        };
        let kl = match fwd.kl {
            Some(k) => k.to_term(&tape),
            None => KlTerm::zero(x.rows()),
        };
        Ok((tape.value(fwd.logits).clone(), kl))
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_infer(&mut tape, x)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Inference-mode representation fed to the classifier.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_infer(&mut tape, x)?;
        Ok(tape.value(fwd.z).clone())
    }
}

/// Exact parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub norm_overhead: usize,
    /// Normalization parameters as a percentage of everything else in the model.
    pub overhead_pct: f64,
}

impl ParamCount {
    /// Overhead percentage when a frozen upstream encoder of `backbone` parameters
    /// also counts toward the model size.
    pub fn overhead_pct_with_backbone(&self, backbone: usize) -> f64 {
        let base = self.total - self.norm_overhead + backbone;
        100.0 * self.norm_overhead as f64 / base as f64
    }
}

pub fn count_parameters(model: &Model) -> ParamCount {
    let total: usize = model.params().iter().map(|t| t.numel()).sum();
    let norm_overhead: usize = model.norm.params().iter().map(|t| t.numel()).sum();
    let base = total - norm_overhead;
    ParamCount {
        total,
        norm_overhead,
        overhead_pct: 100.0 * norm_overhead as f64 / base as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64, m: usize, d: usize) -> Tensor {
        let mut r = SeedRng::new(seed, Stream::Check);
        Tensor::new(vec![m, d], (0..m * d).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn default_hidden_widths() {
        assert_eq!(ModelSpec::default_hidden(32, 8), vec![32, 26, 20]);
        assert_eq!(ModelSpec::default_hidden(768, 512), vec![768, 704, 640]);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::new(10, 6, NormKind::KlNorm, 3);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_ranges_and_zero_biases() {
        let spec = ModelSpec::new(16, 8, NormKind::None, 2);
        let m = build_model(&spec, 1).unwrap();
        for l in &m.encoder {
            let bound = (1.0 / l.fan_in() as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_model(&ModelSpec::new(4, 0, NormKind::None, 2), 0).is_err());
        assert!(build_model(&ModelSpec::new(4, 4, NormKind::None, 1), 0).is_err());
        assert!(build_model(&ModelSpec::new(4, 6, NormKind::Group(4), 2), 0).is_err());
        let mut s = ModelSpec::new(4, 4, NormKind::None, 2);
        s.hidden = vec![3, 0];
        assert!(build_model(&s, 0).is_err());
    }

    #[test]
    fn no_norm_means_no_norm_params() {
        let m = build_model(&ModelSpec::new(5, 4, NormKind::None, 2), 0).unwrap();
        assert!(m.norm.params().is_empty());
        assert_eq!(count_parameters(&m).norm_overhead, 0);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = build_model(&ModelSpec::new(5, 4, NormKind::None, 3), 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (logits, kl) = m.classify(&batch(1, 4, 5), Mode::Infer).unwrap();
        assert_eq!(logits.data(), &[0.0; 12]);
        assert_eq!(kl.value, 0.0);
    }

    #[test]
    fn pinned_klnorm_matches_batchnorm_logits() {
        let x = batch(2, 6, 7);
        let mut kl = build_model(&ModelSpec::new(7, 4, NormKind::KlNorm, 3), 11).unwrap();
        if let NormLayer::KlNorm(k) = &mut kl.norm {
            k.pin_identity();
        }
        let mut bn = build_model(&ModelSpec::new(7, 4, NormKind::Batch, 3), 11).unwrap();
        bn.encoder = kl.encoder.clone();
        bn.classifier = kl.classifier.clone();
        let (a, kt) = kl.classify(&x, Mode::Train).unwrap();
        let (b, _) = bn.classify(&x, Mode::Train).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(kt.value, 0.0);
    }

    #[test]
    fn infer_is_pure_and_repeatable() {
        let mut m = build_model(&ModelSpec::new(6, 4, NormKind::KlNorm, 2), 3).unwrap();
        let x = batch(4, 5, 6);
        m.classify(&x, Mode::Train).unwrap();
        let frozen = m.clone();
        let (a, ka) = m.classify(&x, Mode::Infer).unwrap();
        let (b, _) = m.classify(&x, Mode::Infer).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ka.value > 0.0);
        assert_eq!(m, frozen);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut m = build_model(&ModelSpec::new(6, 4, NormKind::Batch, 2), 3).unwrap();
        assert!(m.classify(&batch(0, 3, 5), Mode::Infer).is_err());
    }

    #[test]
    fn parameter_overheads() {
        let m = build_model(&ModelSpec::new(8, 8, NormKind::KlNorm, 2), 0).unwrap();
        assert_eq!(count_parameters(&m).norm_overhead, 144);
        let m = build_model(&ModelSpec::new(8, 8, NormKind::Batch, 2), 0).unwrap();
        assert_eq!(count_parameters(&m).norm_overhead, 16);
        for norm in [NormKind::None, NormKind::Layer, NormKind::Group(2), NormKind::KlNorm] {
            let spec = ModelSpec::new(9, 6, norm, 4);
            let m = build_model(&spec, 0).unwrap();
            assert_eq!(count_parameters(&m).total, spec.param_count());
            assert_eq!(m.param_names().len(), m.params().len());
        }
    }
}
