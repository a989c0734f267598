use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{evaluate, DecodeConfig};
use crate::model::{Checkpoint, ModelConfig, Regime, SkipSet};
use crate::nn::{Adam, AdamConfig, SeededRng};
use crate::training::loss::{loss_and_grads, NoiseLevel, Objective};
use crate::training::task::{Dataset, Example};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to `final_fraction` of the peak.
    WarmupCosine {
        warmup_steps: usize,
        final_fraction: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_steps, final_fraction } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (final_fraction + (1.0 - final_fraction) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Held-out exact match is measured every this many steps and after the
    /// last one; 0 disables it.
    pub eval_every: usize,
    /// Eval examples scored per measurement; 0 means all of them.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::ArNtp,
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            schedule: LrSchedule::WarmupCosine { warmup_steps: 50, final_fraction: 0.1 },
            seed: 0,
            adam: AdamConfig::default(),
            eval_every: 0,
            eval_examples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let LrSchedule::WarmupCosine { final_fraction, .. } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::Config(format!("final_fraction {final_fraction} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub eval_score: Option<f64>,
}

/// Per-step training curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 3] = ["step", "loss", "eval_score"];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(Self::HEADER)?;
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean loss over a window of rows starting at `from`.
    pub fn mean_loss(&self, from: usize, len: usize) -> f64 {
        let rows = &self.rows[from.min(self.rows.len())..(from + len).min(self.rows.len())];
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_score)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

fn regime_for(objective: Objective, init: Option<&Checkpoint>) -> Result<Regime> {
    match (objective, init.map(Checkpoint::regime)) {
        (Objective::ArNtp, None | Some(Regime::NativeAr)) => Ok(Regime::NativeAr),
        (Objective::ArNtp, Some(r)) => {
            Err(Error::Config(format!("next-token training cannot continue from a {r} checkpoint")))
        }
        (Objective::MaskedDiffusion, None | Some(Regime::NativeDiffusion)) => Ok(Regime::NativeDiffusion),
        (Objective::MaskedDiffusion, Some(_)) => Ok(Regime::ArInitDiffusion),
    }
}

/// Trains a model under `cfg.objective`.
///
/// With `init_from`, training continues from its weights; its config must
/// equal `model` except for the attention mode, which follows the objective.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &Dataset,
    init_from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.objective.attention_mode();
    if model.attention_mode != mode {
        return Err(Error::Config(format!(
            "{:?} objective needs {mode:?} attention, model config has {:?}",
            cfg.objective, model.attention_mode
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let regime = regime_for(cfg.objective, init_from)?;
    let (params, prior_steps) = match init_from {
        Some(init) => {
            if init.config().with_mode(mode) != *model {
                return Err(Error::Config("init_from config differs from the model config".into()));
            }
            (init.params().clone(), init.steps_trained())
        }
        None => (Checkpoint::init(model.clone(), regime, cfg.seed)?.params().clone(), 0),
    };
    let mut ckpt = Checkpoint::from_parts(model.clone(), params, regime, cfg.seed, prior_steps)?;
    ckpt.config().validate()?;

    let mut batch_rng = SeededRng::derived(cfg.seed, "batches");
    let mut noise_rng = SeededRng::derived(cfg.seed, "noise");
    let sizes: Vec<usize> = ckpt.params().tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(cfg.adam, &sizes);
    let eval_set = eval_subset(data, cfg.eval_examples);
    let mut log = TrainingLog::default();

    for step in 0..cfg.steps {
        let batch: Vec<Example> =
            (0..cfg.batch_size).map(|_| data.train[batch_rng.index(data.train.len())].clone()).collect();
        let out = loss_and_grads(&ckpt, cfg.objective, &batch, &mut noise_rng, NoiseLevel::Sampled)?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        let lr = cfg.schedule.lr_at(cfg.lr, step, cfg.steps);
        let grads: Vec<_> = out.grads.iter().map(Some).collect();
        adam.step(&mut ckpt.params_mut().tensors_mut(), &grads, lr);
        let done = step + 1;
        let eval_score =
            if cfg.eval_every > 0 && !eval_set.is_empty() && (done % cfg.eval_every == 0 || done == cfg.steps) {
                Some(score(&ckpt, eval_set)?)
            } else {
                None
            };
        log.rows.push(LogRow { step, loss: out.loss, eval_score });
    }
    if ckpt.params().tensors().iter().any(|t| !t.all_finite()) {
        return Err(Error::Divergence { step: cfg.steps.saturating_sub(1), loss: f64::NAN });
    }
    let steps = prior_steps + cfg.steps;
    let (config, params) = ckpt.into_parts();
    let checkpoint = Checkpoint::from_parts(config, params, regime, cfg.seed, steps)?;
    Ok(TrainOutcome { checkpoint, log })
}

fn eval_subset(data: &Dataset, n: usize) -> &[Example] {
    if n == 0 {
        &data.eval
    } else {
        &data.eval[..n.min(data.eval.len())]
    }
}

fn score(ckpt: &Checkpoint, examples: &[Example]) -> Result<f64> {
    evaluate(ckpt, &SkipSet::empty(), examples, &DecodeConfig::greedy_for(ckpt.config().attention_mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionMode;
    use crate::training::task::{generate_dataset, TaskKind, TaskSpec};

    fn tiny_model(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            d_model: 16,
            num_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            max_seq_len: 12,
            attention_mode: mode,
        }
    }

    fn tiny_data() -> Dataset {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 16,
            alphabet: 6,
            min_len: 2,
            max_len: 4,
            train_examples: 200,
            eval_examples: 20,
            ..Default::default()
        };
        generate_dataset(&spec, 3).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::WarmupCosine { warmup_steps: 10, final_fraction: 0.1 };
        assert!((s.lr_at(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 9, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 100, 100) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 7, 10), 0.3);
    }

    #[test]
    fn zero_steps_keeps_initializer_bitwise() {
        let data = tiny_data();
        let cfg = TrainConfig { steps: 20, ..Default::default() };
        let ar = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap().checkpoint;
        let cfg = TrainConfig { steps: 0, objective: Objective::MaskedDiffusion, ..Default::default() };
        let out = train(&cfg, &tiny_model(AttentionMode::Bidirectional), &data, Some(&ar)).unwrap();
        assert_eq!(out.checkpoint.params(), ar.params());
        assert_eq!(out.checkpoint.regime(), Regime::ArInitDiffusion);
        assert_eq!(out.checkpoint.config().attention_mode, AttentionMode::Bidirectional);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn regime_tags() {
        let data = tiny_data();
        let cfg = TrainConfig { steps: 2, ..Default::default() };
        let ar = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap().checkpoint;
        assert_eq!(ar.regime(), Regime::NativeAr);
        let dcfg = TrainConfig { steps: 2, objective: Objective::MaskedDiffusion, ..Default::default() };
        let diff = train(&dcfg, &tiny_model(AttentionMode::Bidirectional), &data, None).unwrap().checkpoint;
        assert_eq!(diff.regime(), Regime::NativeDiffusion);
        let adopted = train(&dcfg, &tiny_model(AttentionMode::Bidirectional), &data, Some(&ar)).unwrap().checkpoint;
        assert_eq!(adopted.regime(), Regime::ArInitDiffusion);
        assert_eq!(adopted.steps_trained(), 4);
        assert!(matches!(train(&cfg, &tiny_model(AttentionMode::Causal), &data, Some(&diff)), Err(Error::Config(_))));
    }

    #[test]
    fn mismatches_are_config_errors() {
        let data = tiny_data();
        let cfg = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(train(&cfg, &tiny_model(AttentionMode::Bidirectional), &data, None), Err(Error::Config(_))));
        let ar = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap().checkpoint;
        let wider = ModelConfig { d_ff: 48, ..tiny_model(AttentionMode::Causal) };
        assert!(matches!(train(&cfg, &wider, &data, Some(&ar)), Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_diverges_with_step() {
        let data = tiny_data();
        let cfg = TrainConfig {
            steps: 50,
            lr: 1e300,
            schedule: LrSchedule::Constant,
            adam: AdamConfig { clip_norm: 0.0, ..Default::default() },
            ..Default::default()
        };
        match train(&cfg, &tiny_model(AttentionMode::Causal), &data, None) {
            Err(Error::Divergence { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_decreases() {
        let data = tiny_data();
        let cfg = TrainConfig { steps: 120, seed: 1, ..Default::default() };
        let log = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap().log;
        assert!(log.mean_loss(110, 10) < log.mean_loss(0, 10));
    }

    #[test]
    fn training_is_deterministic_and_logs_csv() {
        let data = tiny_data();
        let cfg = TrainConfig { steps: 6, eval_every: 3, eval_examples: 5, ..Default::default() };
        let a = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap();
        let b = train(&cfg, &tiny_model(AttentionMode::Causal), &data, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let mut buf = Vec::new();
        a.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,eval_score");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(','));
        assert!(!lines[3].ends_with(','));
    }
}
