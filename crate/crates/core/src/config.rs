//! `key = value` configuration files with command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! dataset = data/train.txt
//! norm_kind = klnorm
//! train.beta0 = 0.05
//! ```
//!
//! Overrides (`--set train.epochs=10`) are applied after the file. Unknown keys
//! and repeated keys within the file are errors.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::TrainConfig;

/// Every recognised key.
pub const KEYS: [&str; 19] = [
    "dataset",
    "norm_kind",
    "model.bottleneck",
    "model.hidden",
    "model.alpha",
    "model.eps",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.dropout",
    "train.beta0",
    "train.beta_cap",
    "train.detach_kl",
    "train.subsample",
    "seeds",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Sets one key. Relative dataset paths are resolved against `base`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "dataset" => {
            let p = PathBuf::from(v);
            cfg.dataset = Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            });
        }
        "norm_kind" => cfg.norm = v.parse()?,
        "model.bottleneck" => cfg.bottleneck = parse_num(key, v)?,
        "model.hidden" => {
            cfg.hidden = match v {
                "auto" => None,
                "" | "none" => Some(Vec::new()),
                _ => Some(parse_list(key, v)?),
            }
        }
        "model.alpha" => cfg.alpha = parse_num(key, v)?,
        "model.eps" => cfg.eps = parse_num(key, v)?,
        "train.epochs" => cfg.epochs = parse_num(key, v)?,
        "train.batch_size" => cfg.batch_size = parse_num(key, v)?,
        "train.lr" => cfg.adam.lr = parse_num(key, v)?,
        "train.adam_beta1" => cfg.adam.beta1 = parse_num(key, v)?,
        "train.adam_beta2" => cfg.adam.beta2 = parse_num(key, v)?,
        "train.adam_eps" => cfg.adam.eps = parse_num(key, v)?,
        "train.weight_decay" => cfg.adam.weight_decay = parse_num(key, v)?,
        "train.dropout" => cfg.dropout = parse_num(key, v)?,
        "train.beta0" => cfg.beta0 = parse_num(key, v)?,
        "train.beta_cap" => cfg.beta_cap = parse_num(key, v)?,
        "train.detach_kl" => cfg.detach_kl = parse_bool(key, v)?,
        "train.subsample" => {
            cfg.subsample = match v {
                "off" | "none" | "" => None,
                _ => Some(parse_num(key, v)?),
            }
        }
        "seeds" => cfg.seeds = parse_list(key, v)?,
        other => {
            return Err(Error::Config(format!(
                "unknown key {other:?}; known keys: {}",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Parses config text. `path` is used for error messages and relative dataset paths.
pub fn parse_config_str(text: &str, path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let base = path.parent();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let k = k.trim();
        if seen.contains(&k) {
            return Err(err(format!("key {k:?} given twice")));
        }
        seen.push(k);
        apply(&mut cfg, k, v, base).map_err(|e| err(e.to_string()))?;
    }
    Ok(cfg)
}

/// Splits an override of the form `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}

/// Reads `path` (or starts from defaults), applies `overrides` in order and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_config_str(&text, p)?
        }
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = split_override(o)?;
        apply(&mut cfg, k, v, None)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config text that parses back to `cfg`.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, v) in cfg.entries() {
        if k == "dataset" && v.is_empty() {
            continue;
        }
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormKind;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse_config_str("dataset = d.txt\nnorm_kind = batch\n", Path::new("c.conf")).unwrap();
        assert_eq!(cfg.norm, NormKind::Batch);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.eps, 1e-5);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.dataset, Some(PathBuf::from("d.txt")));
        assert_eq!(cfg.seeds, vec![13, 42, 71, 100, 2024]);
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "norm_kind = klnorm\ntrain.beta0 = 0.1 # file value\n").unwrap();
        let cfg = parse_config(Some(&p), &["train.beta0=0.5".into()]).unwrap();
        assert_eq!(cfg.beta0, 0.5);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let err = parse_config_str("train.betta0 = 1\n", Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("c:1"), "{err}");
        assert!(err.to_string().contains("unknown key"));
        assert!(parse_config_str("seeds = 1\nseeds = 2\n", Path::new("c")).is_err());
        assert!(parse_config(None, &["bogus=1".into()]).is_err());
        assert!(parse_config(None, &["train.epochs".into()]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.dataset = Some("x/y.txt".into());
        cfg.norm = NormKind::Group(4);
        cfg.hidden = Some(vec![8, 6]);
        cfg.subsample = Some(200);
        cfg.detach_kl = true;
        let back = parse_config_str(&render_config(&cfg), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }
}
