//! Flat `key = value` config files for the command line.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the command reading the file; repeated keys are errors.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::event::LabelSpace;
use crate::model::HyperParams;
use crate::synth::GenConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config key {key:?} given twice")]
    Duplicate { key: String },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

pub const GEN_KEYS: &[&str] = &[
    "seed",
    "n_prongs_min",
    "n_prongs_max",
    "hits_per_prong_mean",
    "noise_hit_rate",
    "class_mixture",
    "cross_view_ambiguity",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "lambda",
    "batch_size",
    "seed",
    "patience",
    "n",
    "m",
    "base_dim",
    "k_nn",
    "base_voxel_size",
    "instance_slots",
    "inter_view",
];

pub fn parse_pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if !allowed.contains(&k) {
            return Err(ConfigError::UnknownKey { key: k.into() });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate { key: k.into() });
        }
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    slot: &mut T,
) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = v.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: v.clone(),
        })?;
    }
    Ok(())
}

pub fn gen_config(text: &str) -> Result<GenConfig> {
    let map = parse_pairs(text, GEN_KEYS)?;
    let mut c = GenConfig::default();
    value(&map, "seed", &mut c.seed)?;
    value(&map, "n_prongs_min", &mut c.n_prongs_range[0])?;
    value(&map, "n_prongs_max", &mut c.n_prongs_range[1])?;
    value(&map, "hits_per_prong_mean", &mut c.hits_per_prong_mean)?;
    value(&map, "noise_hit_rate", &mut c.noise_hit_rate)?;
    value(&map, "cross_view_ambiguity", &mut c.cross_view_ambiguity)?;
    if let Some(v) = map.get("class_mixture") {
        c.class_mixture = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: "class_mixture".into(),
                value: v.clone(),
            })?;
    }
    Ok(c)
}

/// Training config; class count and slot default come from the dataset.
pub fn train_config(text: &str, labels: LabelSpace) -> Result<TrainConfig> {
    let map = parse_pairs(text, TRAIN_KEYS)?;
    let mut c = TrainConfig {
        hyper: HyperParams {
            n_classes: labels.n_classes as usize,
            instance_slots: labels.p_max as usize,
            ..HyperParams::default()
        },
        ..TrainConfig::default()
    };
    value(&map, "epochs", &mut c.epochs)?;
    value(&map, "lr", &mut c.lr)?;
    value(&map, "lambda", &mut c.lambda)?;
    value(&map, "batch_size", &mut c.batch_size)?;
    value(&map, "seed", &mut c.seed)?;
    value(&map, "patience", &mut c.patience)?;
    let h = &mut c.hyper;
    value(&map, "n", &mut h.n)?;
    value(&map, "m", &mut h.m)?;
    value(&map, "base_dim", &mut h.base_dim)?;
    value(&map, "k_nn", &mut h.k_nn)?;
    value(&map, "base_voxel_size", &mut h.base_voxel_size)?;
    value(&map, "instance_slots", &mut h.instance_slots)?;
    value(&map, "inter_view", &mut h.inter_view)?;
    Ok(c)
}
