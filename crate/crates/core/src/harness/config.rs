use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{ModeFlags, Variant};
use crate::model::ModelConfig;
use crate::{Error, Result};

fn default_lr() -> f64 {
    4e-4
}
fn default_dropout() -> f64 {
    0.3
}
fn default_k() -> usize {
    8
}
fn default_t() -> usize {
    3
}
fn default_one() -> usize {
    1
}

/// Everything a training run depends on besides the corpus contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub d_w: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub no_infer: bool,
    #[serde(default)]
    pub no_u: bool,
    #[serde(default)]
    pub no_q_att: bool,
    #[serde(default)]
    pub no_g_att: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub seed: u64,
    /// Rounds per optimizer step.
    #[serde(default = "default_one")]
    pub accumulate: usize,
    /// Minimum train-split frequency for a vocabulary entry.
    #[serde(default = "default_one")]
    pub min_count: usize,
    /// Expected object-feature size; checked against the corpus when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(d: usize, d_w: usize, seed: u64) -> Self {
        RunConfig {
            d,
            d_w,
            k: default_k(),
            t: default_t(),
            variant: Variant::Cag,
            no_infer: false,
            no_u: false,
            no_q_att: false,
            no_g_att: false,
            lr: default_lr(),
            epochs: 0,
            dropout: default_dropout(),
            seed,
            accumulate: 1,
            min_count: 1,
            d_v: None,
            corpus: None,
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.d_w == 0 {
            return fail("d and d_w must be positive");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.min_count == 0 {
            return fail("min_count must be at least 1");
        }
        Ok(())
    }

    pub fn flags(&self) -> ModeFlags {
        ModeFlags {
            variant: self.variant,
            no_infer: self.no_infer,
            no_u: self.no_u,
            no_q_att: self.no_q_att,
            no_g_att: self.no_g_att,
            k: self.k,
            t: self.t,
        }
    }

    pub fn model(&self, d_v: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_w: self.d_w,
            d_v,
            vocab,
            flags: self.flags(),
            dropout: self.dropout,
        }
    }

    /// Compact JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelConfig {
    /// Rejects `other` unless every shape-determining field agrees, naming
    /// the first field that differs.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("d", self.d, other.d),
            ("d_w", self.d_w, other.d_w),
            ("d_v", self.d_v, other.d_v),
            ("vocab", self.vocab, other.vocab),
            ("t", self.flags.t, other.flags.t),
        ];
        for (name, expected, found) in pairs {
            if expected != found {
                return Err(Error::DimMismatch {
                    name: name.into(),
                    expected,
                    found,
                });
            }
        }
        if self.flags.variant != other.flags.variant {
            return Err(Error::Config(format!(
                "variant {:?} does not match {:?}",
                other.flags.variant, self.flags.variant
            )));
        }
        Ok(())
    }
}
