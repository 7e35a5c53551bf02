//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! [`TrainConfig`] field names listed in [`TRAIN_KEYS`]; unknown keys and
//! repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Accepted training keys with a one-line description each.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("batch_size", "items per batch (default 12)"),
    ("epochs", "passes over the training corpus (default 20)"),
    ("lr", "peak learning rate, cosine-decayed to zero (default 1e-4)"),
    ("seed", "initialization and shuffling seed (default 0)"),
    ("fusion", "addition | late | concat_fc | xattn | stacking"),
    ("modalities", "both | video | audio"),
    ("dim", "embedding width D, must match the corpus (default 32)"),
    ("proj_dim", "projection width D_p, must equal dim (default 32)"),
    ("out_affine", "learnable output LayerNorm affine: true | false"),
    ("temperature_init", "initial temperature (default 1/0.07)"),
    ("grad_clip", "global gradient-norm bound (default 1.0)"),
    ("weight_decay", "decoupled weight decay on weight matrices (default 0.01)"),
    ("beta1", "first-moment decay (default 0.9)"),
    ("beta2", "second-moment decay (default 0.98)"),
    ("eps", "optimizer epsilon (default 1e-8)"),
];

/// Parsed key/value pairs, in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{k}` set twice", n + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses a `key=value` override as given on the command line.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Sets one training key.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "fusion" => cfg.fusion = value.parse()?,
        "modalities" => cfg.modalities = value.parse()?,
        "dim" => cfg.dim = parse(key, value)?,
        "proj_dim" => cfg.proj_dim = parse(key, value)?,
        "out_affine" => cfg.out_affine = parse(key, value)?,
        "temperature_init" => cfg.temperature_init = parse(key, value)?,
        "grad_clip" => cfg.grad_clip = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "eps" => cfg.eps = parse(key, value)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Applies every pair to `cfg`, in key order.
pub fn apply_train(cfg: &mut TrainConfig, kv: &KeyValues) -> Result<()> {
    kv.0.iter().try_for_each(|(k, v)| set_train_key(cfg, k, v))
}

/// Renders `cfg` in the file format, one key per line in schema order.
pub fn render_train(cfg: &TrainConfig) -> String {
    let values = [
        cfg.batch_size.to_string(),
        cfg.epochs.to_string(),
        cfg.lr.to_string(),
        cfg.seed.to_string(),
        cfg.fusion.to_string(),
        cfg.modalities.as_str().to_string(),
        cfg.dim.to_string(),
        cfg.proj_dim.to_string(),
        cfg.out_affine.to_string(),
        cfg.temperature_init.to_string(),
        cfg.grad_clip.to_string(),
        cfg.weight_decay.to_string(),
        cfg.beta1.to_string(),
        cfg.beta2.to_string(),
        cfg.eps.to_string(),
    ];
    TRAIN_KEYS.iter().zip(values).map(|((k, _), v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionKind;
    use crate::model::Modalities;

    #[test]
    fn parses_comments_and_values() {
        let kv = KeyValues::parse("# training\n\nepochs = 3\nfusion=late\n  lr = 0.002  \n").unwrap();
        let mut cfg = TrainConfig::default();
        apply_train(&mut cfg, &kv).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.fusion, FusionKind::LateFusion);
        assert_eq!(cfg.lr, 0.002);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(KeyValues::parse("epochs 3").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let mut cfg = TrainConfig::default();
        assert!(set_train_key(&mut cfg, "nope", "1").is_err());
        assert!(set_train_key(&mut cfg, "epochs", "many").is_err());
        assert!(set_train_key(&mut cfg, "fusion", "sum").is_err());
    }

    #[test]
    fn render_round_trips() {
        let cfg =
            TrainConfig { modalities: Modalities::AudioOnly, seed: 9, out_affine: false, ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        apply_train(&mut back, &KeyValues::parse(&render_train(&cfg)).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
