use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{DecodeConfig, DecodeMode, Sampler};
use crate::model::{AttentionMode, ModelConfig, Regime};
use crate::probe::DEFAULT_SINK_RATIO;
use crate::training::{TaskKind, TaskSpec, TrainConfig};

/// How skip sets are chosen during evaluation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// One calibration forward per prompt.
    PerPrompt,
    /// One set for the whole eval split, from the mean similarity list.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Fixed skip counts; the threshold is disabled for these.
    pub k_values: Vec<usize>,
    /// Threshold policies, each capped at `tau_n_max` blocks.
    pub tau_values: Vec<f64>,
    pub tau_n_max: usize,
    pub allow_consecutive: bool,
    /// Counts for the consecutive-allowed ablation.
    pub ablation_k: Vec<usize>,
    pub calibration: CalibrationMode,
    /// Retention below this percentage is flagged in reports.
    pub retention_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: vec![0, 1, 2, 3, 4],
            tau_values: vec![],
            tau_n_max: 4,
            allow_consecutive: false,
            ablation_k: vec![2, 4],
            calibration: CalibrationMode::PerPrompt,
            retention_threshold: 50.0,
        }
    }
}

/// Token positions the token-wise profile is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileWindow {
    Response,
    Prompt,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Eval prompts traced for the probe outputs.
    pub prompts: usize,
    pub sink_ratio: f64,
    pub window: ProfileWindow,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { prompts: 16, sink_ratio: DEFAULT_SINK_RATIO, window: ProfileWindow::Response }
    }
}

/// Decoder settings shared by every regime; the mode follows the checkpoint
/// and the length follows each reference response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub sampler: Sampler,
    pub steps: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { sampler: Sampler::Greedy, steps: None, seed: 0 }
    }
}

impl DecodeSettings {
    pub fn for_mode(&self, mode: AttentionMode, gen_length: usize) -> DecodeConfig {
        DecodeConfig {
            mode: DecodeMode::for_attention(mode),
            gen_length,
            sampler: self.sampler,
            steps: self.steps,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// Diffusion continuation steps for the AR-initialized regime.
    pub adapt_steps: usize,
    /// Eval examples scored per sweep point; 0 means the whole split.
    pub eval_examples: usize,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub skip: SweepConfig,
    pub decode: DecodeSettings,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec {
            kind: TaskKind::SpanInfill,
            min_len: 3,
            max_len: 5,
            alphabet: 8,
            span_min: 2,
            span_max: 3,
            vocab_size: 16,
            train_examples: 4000,
            eval_examples: 100,
            ..Default::default()
        };
        let model = ModelConfig {
            num_blocks: 8,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 16,
            max_seq_len: task.max_sequence_len(),
            attention_mode: AttentionMode::Causal,
        };
        Self {
            name: "skiplab".into(),
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2],
            regimes: Regime::ALL.to_vec(),
            adapt_steps: 500,
            eval_examples: 0,
            task,
            model,
            train: TrainConfig::default(),
            skip: SweepConfig::default(),
            decode: DecodeSettings::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        let l = self.model.num_blocks;
        if let Some(&k) = self.skip.k_values.iter().chain(&self.skip.ablation_k).find(|&&k| k > l) {
            return Err(Error::Config(format!("k = {k} exceeds {l} blocks")));
        }
        if self.skip.tau_n_max > l {
            return Err(Error::Config(format!("tau_n_max {} exceeds {l} blocks", self.skip.tau_n_max)));
        }
        if let Some(t) = self.skip.tau_values.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::Config(format!("tau {t} must be finite and ≥ 0")));
        }
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from model vocabulary {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.max_sequence_len() > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task sequences reach {} tokens, model max_seq_len is {}",
                self.task.max_sequence_len(),
                self.model.max_seq_len
            )));
        }
        if !(self.probe.sink_ratio > 1.0) {
            return Err(Error::Config("sink_ratio must exceed 1".into()));
        }
        if self.probe.prompts == 0 {
            return Err(Error::Config("probe.prompts must be ≥ 1".into()));
        }
        self.decode_settings_check()
    }

    fn decode_settings_check(&self) -> Result<()> {
        self.decode.for_mode(AttentionMode::Bidirectional, 1).validate()
    }

    pub fn model_for(&self, regime: Regime) -> ModelConfig {
        self.model.with_mode(regime.attention_mode())
    }

    /// The regimes whose checkpoints must exist, AR included when the
    /// AR-initialized regime needs it.
    pub fn regimes_to_train(&self) -> Vec<Regime> {
        Regime::ALL
            .into_iter()
            .filter(|r| {
                self.regimes.contains(r) || (*r == Regime::NativeAr && self.regimes.contains(&Regime::ArInitDiffusion))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(9);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(&|c| c.seeds.clear());
        bad(&|c| c.skip.k_values.push(9));
        bad(&|c| c.model.max_seq_len = 4);
        bad(&|c| c.task.alphabet = 1);
        bad(&|c| c.probe.sink_ratio = 1.0);
        assert!(matches!(ExperimentConfig::from_toml("seeds = \"x\""), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [4]\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.model.num_blocks, 8);
    }

    #[test]
    fn ar_is_trained_for_adoption() {
        let cfg = ExperimentConfig { regimes: vec![Regime::ArInitDiffusion], ..Default::default() };
        assert_eq!(cfg.regimes_to_train(), vec![Regime::NativeAr, Regime::ArInitDiffusion]);
    }
}
