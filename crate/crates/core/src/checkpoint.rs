//! Binary model container.
//!
//! Layout, all integers `u64` and all floats `f64`, little-endian:
//!
//! ```text
//! "KLN1"
//! d_in, bottleneck, n_classes, n_hidden, hidden[0..n_hidden]
//! norm tag (0 none, 1 batch, 2 layer, 3 group, 4 klnorm), groups
//! alpha, eps
//! parameters in `Model::params` order
//! moving mean, moving variance (batch norm and KL-Norm only)
//! ```
//!
//! Decoding is strict: the byte count must match the declared spec exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::norm::NormKind;

pub const MAGIC: &[u8; 4] = b"KLN1";

fn norm_tag(kind: NormKind) -> (u64, u64) {
    match kind {
        NormKind::None => (0, 0),
        NormKind::Batch => (1, 0),
        NormKind::Layer => (2, 0),
        NormKind::Group(g) => (3, g as u64),
        NormKind::KlNorm => (4, 0),
    }
}

fn norm_from_tag(tag: u64, groups: u64) -> Result<NormKind> {
    Ok(match tag {
        0 => NormKind::None,
        1 => NormKind::Batch,
        2 => NormKind::Layer,
        3 => NormKind::Group(groups as usize),
        4 => NormKind::KlNorm,
        t => return Err(Error::Checkpoint(format!("unknown norm tag {t}"))),
    })
}

pub fn encode(model: &Model) -> Vec<u8> {
    let spec = &model.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
    put(spec.d_in as u64);
    put(spec.bottleneck as u64);
    put(spec.n_classes as u64);
    put(spec.hidden.len() as u64);
    spec.hidden.iter().for_each(|&h| put(h as u64));
    let (tag, groups) = norm_tag(spec.norm);
    put(tag);
    put(groups);
    let mut floats: Vec<f64> = vec![spec.alpha, spec.eps];
    for p in model.params() {
        floats.extend_from_slice(p.data());
    }
    if let Some(s) = model.norm.moving_stats() {
        floats.extend_from_slice(s.mean.data());
        floats.extend_from_slice(s.var.data());
    }
    for f in floats {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take8(&mut self, what: &str) -> Result<[u8; 8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos += 8;
        Ok(chunk.try_into().expect("8 bytes"))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take8(what).map(u64::from_le_bytes)
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= 1 << 32)
            .ok_or_else(|| Error::Checkpoint(format!("{what} = {v} is implausibly large")))
    }

    fn f64s(&mut self, out: &mut [f64], what: &str) -> Result<()> {
        for v in out {
            *v = f64::from_le_bytes(self.take8(what)?);
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::Checkpoint("missing KLN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let d_in = r.usize("d_in")?;
    let bottleneck = r.usize("bottleneck")?;
    let n_classes = r.usize("n_classes")?;
    let n_hidden = r.usize("n_hidden")?;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!("{n_hidden} hidden layers is implausible")));
    }
    let hidden = (0..n_hidden).map(|_| r.usize("hidden width")).collect::<Result<Vec<_>>>()?;
    let tag = r.u64("norm tag")?;
    let groups = r.u64("groups")?;
    let norm = norm_from_tag(tag, groups)?;
    let mut ae = [0.0; 2];
    r.f64s(&mut ae, "alpha/eps")?;
    let spec = ModelSpec {
        d_in,
        bottleneck,
        hidden,
        norm,
        n_classes,
        alpha: ae[0],
        eps: ae[1],
    };
    spec.validate().map_err(|e| Error::Checkpoint(format!("invalid spec: {e}")))?;

    let expected = r.pos + 8 * (spec.param_count() + if matches!(norm, NormKind::Batch | NormKind::KlNorm) { 2 * bottleneck } else { 0 });
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for this spec, found {}",
            bytes.len()
        )));
    }
    let mut model = Model::build(&spec, 0).map_err(|e| Error::Checkpoint(format!("invalid spec: {e}")))?;
    for p in model.params_mut() {
        r.f64s(p.data_mut(), "parameters")?;
    }
    if let Some(s) = model.norm.moving_stats_mut() {
        r.f64s(s.mean.data_mut(), "moving mean")?;
        r.f64s(s.var.data_mut(), "moving variance")?;
        if s.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Checkpoint("negative moving variance".into()));
        }
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_every_norm() {
        for norm in [NormKind::None, NormKind::Batch, NormKind::Layer, NormKind::Group(2), NormKind::KlNorm] {
            let mut model = Model::build(&ModelSpec::new(5, 4, norm, 3), 11).unwrap();
            let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            model.classify(&x, Mode::Train).unwrap();
            let bytes = encode(&model);
            assert_eq!(&bytes[..4], MAGIC);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, model, "{norm}");
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::build(&ModelSpec::new(3, 2, NormKind::KlNorm, 2), 1).unwrap();
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
    }
}
