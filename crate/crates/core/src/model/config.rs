use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AttentionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl AttentionMode {
    pub(crate) fn mask(self) -> AttentionMask {
        match self {
            AttentionMode::Causal => AttentionMask::Causal,
            AttentionMode::Bidirectional => AttentionMask::Bidirectional,
        }
    }
}

/// Architecture hyperparameters. The top vocabulary id is reserved for MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 32,
            attention_mode: AttentionMode::Causal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::Config(format!("num_blocks must be >= 2, got {}", self.num_blocks)));
        }
        self.validate_shapes()
    }

    /// Shape checks without the minimum-depth rule; reduced models assembled
    /// by removing blocks may be shallower than a trainable model.
    pub(crate) fn validate_shapes(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_ff and max_seq_len must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must leave room for the MASK id".into()));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self { attention_mode: mode, ..self.clone() }
    }
}

/// Training regime a checkpoint came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NativeAr,
    NativeDiffusion,
    ArInitDiffusion,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::NativeAr, Regime::NativeDiffusion, Regime::ArInitDiffusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::NativeAr => "native-ar",
            Regime::NativeDiffusion => "native-diffusion",
            Regime::ArInitDiffusion => "ar-init-diffusion",
        }
    }

    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Regime::NativeAr => AttentionMode::Causal,
            _ => AttentionMode::Bidirectional,
        }
    }

    pub fn is_diffusion(self) -> bool {
        self != Regime::NativeAr
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

/// Block indices (1-based) bypassed at inference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkipSet(BTreeSet<usize>);

impl SkipSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(blocks: impl IntoIterator<Item = usize>) -> Self {
        Self(blocks.into_iter().collect())
    }

    /// Every block `1..=num_blocks`.
    pub fn all(num_blocks: usize) -> Self {
        Self::new(1..=num_blocks)
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0.contains(&block)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ascending block indices.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        match self.0.iter().find(|&&b| b == 0 || b > num_blocks) {
            Some(b) => Err(Error::Config(format!("skip index {b} outside 1..={num_blocks}"))),
            None => Ok(()),
        }
    }

    /// True when two members differ by exactly one.
    pub fn has_adjacent(&self) -> bool {
        self.to_vec().windows(2).any(|w| w[1] - w[0] == 1)
    }

    pub fn is_subset(&self, other: &SkipSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl fmt::Display for SkipSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|b| b.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

impl FromStr for SkipSet {
    type Err = Error;

    /// Parses a comma- or space-separated list such as `1,4` or `[1 4]`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        inner
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|e| Error::Input(format!("bad skip index {p:?}: {e}"))))
            .collect::<Result<BTreeSet<_>>>()
            .map(SkipSet)
    }
}

impl FromIterator<usize> for SkipSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter)
    }
}
