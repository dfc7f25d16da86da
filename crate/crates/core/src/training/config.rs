use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MiningStrategy};
use crate::model::DEFAULT_LATENT_DIM;

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Deterministic autoencoder: `z = mu`, reconstruction only.
    Ae,
    /// Reconstruction plus KL.
    Vae,
    /// VAE plus a Euclidean, same-class-positive triplet loss on the raw sample `z`.
    VaeTl,
    /// VAE plus the angular triplet-neighbor loss on the normalized sample.
    VaeAtnl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ae, Variant::Vae, Variant::VaeTl, Variant::VaeAtnl];

    pub fn samples(self) -> bool {
        self != Variant::Ae
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Self::Ae),
            "vae" => Ok(Self::Vae),
            "vae_tl" => Ok(Self::VaeTl),
            "vae_atnl" => Ok(Self::VaeAtnl),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected ae, vae, vae_tl or vae_atnl)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ae => "ae",
            Self::Vae => "vae",
            Self::VaeTl => "vae_tl",
            Self::VaeAtnl => "vae_atnl",
        })
    }
}

/// Hyperparameters and data location of one training run.
///
/// Text form is one `key=value` per line with keys named exactly as the fields; `#` starts
/// a comment. Keys left out take the defaults of the chosen `dataset` (see
/// [`TrainingConfig::for_dataset`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_atn: f64,
    /// Triplet margin; radians for the angular loss.
    pub margin: f64,
    /// Online triplet selection used by the triplet variants.
    pub mining: MiningStrategy,
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub d_z: usize,
    pub variant: Variant,
    pub decode_normalized: bool,
    pub dataset: DatasetKind,
    /// Dataset root; empty means the default root.
    pub data_dir: PathBuf,
    /// Train on the first `n` images only; 0 uses all.
    pub train_subset: usize,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetKind::Mnist)
    }
}

const KEYS: [&str; 18] = [
    "lambda_rec",
    "lambda_kl",
    "lambda_atn",
    "margin",
    "mining",
    "epochs",
    "classes_per_batch",
    "samples_per_class",
    "learning_rate",
    "seed",
    "d_z",
    "variant",
    "decode_normalized",
    "dataset",
    "data_dir",
    "train_subset",
    "grad_clip",
    "log_every",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainingConfig {
    /// Digits: margin 1.2 rad over 10 classes. Poses: margin 0.9 rad over 7 classes.
    pub fn for_dataset(kind: DatasetKind) -> Self {
        let (margin, classes_per_batch, samples_per_class) = match kind {
            DatasetKind::Mnist => (1.2, 10, 25),
            DatasetKind::Poses => (0.9, 7, 36),
        };
        let w = LossWeights::default();
        Self {
            lambda_rec: w.rec,
            lambda_kl: w.kl,
            lambda_atn: w.atn,
            margin,
            mining: MiningStrategy::SemiHard,
            epochs: 30,
            classes_per_batch,
            samples_per_class,
            learning_rate: 1e-3,
            seed: 0,
            d_z: DEFAULT_LATENT_DIM,
            variant: Variant::VaeAtnl,
            decode_normalized: true,
            dataset: kind,
            data_dir: PathBuf::new(),
            train_subset: 0,
            grad_clip: 5.0,
            log_every: 50,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rec: self.lambda_rec,
            kl: self.lambda_kl,
            atn: self.lambda_atn,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [("lambda_rec", self.lambda_rec), ("lambda_kl", self.lambda_kl), ("lambda_atn", self.lambda_atn)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a nonnegative number, got {v}"));
            }
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.margin) {
            return bad(format!("margin must lie in [0, pi], got {}", self.margin));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.classes_per_batch < 1 || self.samples_per_class < 1 {
            return bad("classes_per_batch and samples_per_class must be at least 1".into());
        }
        if self.d_z < 2 {
            return bad(format!("d_z must be at least 2, got {}", self.d_z));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.log_every < 1 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_rec" => self.lambda_rec = parse_value(key, value)?,
            "lambda_kl" => self.lambda_kl = parse_value(key, value)?,
            "lambda_atn" => self.lambda_atn = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "mining" => self.mining = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "classes_per_batch" => self.classes_per_batch = parse_value(key, value)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "d_z" => self.d_z = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "decode_normalized" => self.decode_normalized = parse_value(key, value)?,
            "dataset" => self.dataset = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_subset" => self.train_subset = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; keys not given take the defaults of the chosen dataset.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", lineno + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
        }
        Self::from_pairs(&pairs)
    }

    /// Like [`TrainingConfig::from_text`] over already-split pairs.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let kind = match pairs.get("dataset") {
            Some(v) => v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            None => DatasetKind::Mnist,
        };
        let mut cfg = Self::for_dataset(kind);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every field as `key=value` lines, in a fixed order. Floats print in shortest
    /// round-trip form, so `from_text(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let values = [
            self.lambda_rec.to_string(),
            self.lambda_kl.to_string(),
            self.lambda_atn.to_string(),
            self.margin.to_string(),
            self.mining.to_string(),
            self.epochs.to_string(),
            self.classes_per_batch.to_string(),
            self.samples_per_class.to_string(),
            self.learning_rate.to_string(),
            self.seed.to_string(),
            self.d_z.to_string(),
            self.variant.to_string(),
            self.decode_normalized.to_string(),
            self.dataset.to_string(),
            self.data_dir.display().to_string(),
            self.train_subset.to_string(),
            self.grad_clip.to_string(),
            self.log_every.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies a flag-style override.
    pub fn override_value(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)?;
        self.validate()
    }

    /// The configured dataset root, or the default root when unset.
    pub fn resolved_data_dir(&self) -> PathBuf {
        if self.data_dir.as_os_str().is_empty() {
            crate::dataset::default_data_dir()
        } else {
            self.data_dir.clone()
        }
    }
}
