//! Next-token and masked-denoising objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_on_tape, AttentionMode, Checkpoint, ModelConfig, PackedBatch, ParamVars, SkipSet};
use crate::nn::{SeededRng, Tape, Tensor, Var};
use crate::training::task::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    ArNtp,
    MaskedDiffusion,
}

impl Objective {
    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Objective::ArNtp => AttentionMode::Causal,
            Objective::MaskedDiffusion => AttentionMode::Bidirectional,
        }
    }
}

/// How the diffusion mask ratio is chosen per example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    /// `t ~ Uniform(0, 1]` per example, stratified across the batch.
    Sampled,
    /// Every example uses this ratio.
    Fixed(f64),
}

/// Masked, noised inputs for one diffusion batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    pub inputs: Vec<Vec<usize>>,
    /// Per example, the mask ratio used.
    pub ratios: Vec<f64>,
    /// Per example, whether each response position was masked.
    pub masked: Vec<Vec<bool>>,
}

fn require_mode(cfg: &ModelConfig, want: AttentionMode, what: &str) -> Result<()> {
    if cfg.attention_mode != want {
        return Err(Error::Config(format!("{what} needs {want:?} attention, checkpoint is {:?}", cfg.attention_mode)));
    }
    Ok(())
}

fn check_batch(batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    if batch.iter().any(|e| e.prompt.is_empty() || e.response.is_empty()) {
        return Err(Error::DegenerateBatch("examples need a prompt and a response".into()));
    }
    Ok(())
}

fn ar_on_tape(tape: &mut Tape<'_>, vars: &ParamVars, cfg: &ModelConfig, batch: &[Example]) -> Result<Var> {
    require_mode(cfg, AttentionMode::Causal, "next-token loss")?;
    check_batch(batch)?;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut selected = Vec::new();
    for ex in batch {
        let seq = ex.sequence();
        let p = ex.prompt.len();
        inputs.push(seq[..seq.len() - 1].to_vec());
        for j in 0..seq.len() - 1 {
            targets.push(seq[j + 1]);
            selected.push(j + 1 >= p);
        }
    }
    let packed = PackedBatch::new(&inputs);
    let (logits, _) = forward_on_tape(tape, vars, cfg, &packed, &SkipSet::empty(), false)?;
    tape.cross_entropy(logits, &targets, &selected)
}

/// Draws mask ratios and masks; resamples the whole batch once if nothing got masked.
pub fn noise_batch(
    batch: &[Example],
    mask_id: usize,
    rng: &mut SeededRng,
    noise: NoiseLevel,
) -> Result<DiffusionBatch> {
    check_batch(batch)?;
    for _ in 0..2 {
        let mut out = DiffusionBatch { inputs: Vec::new(), ratios: Vec::new(), masked: Vec::new() };
        let mut any = false;
        // Stratified ratios: one uniform offset, spaced 1/B apart and wrapped
        // into (0, 1], so each ratio is still marginally uniform.
        let offset = rng.uniform_open_closed();
        for (k, ex) in batch.iter().enumerate() {
            let t = match noise {
                NoiseLevel::Sampled => {
                    let t = offset + k as f64 / batch.len() as f64;
                    if t > 1.0 {
                        t - 1.0
                    } else {
                        t
                    }
                }
                NoiseLevel::Fixed(t) => t,
            };
            let mask: Vec<bool> = ex.response.iter().map(|_| rng.bernoulli(t)).collect();
            any |= mask.iter().any(|&m| m);
            let mut input = ex.prompt.clone();
            input.extend(ex.response.iter().zip(&mask).map(|(&tok, &m)| if m { mask_id } else { tok }));
            out.inputs.push(input);
            out.ratios.push(t);
            out.masked.push(mask);
        }
        if any {
            return Ok(out);
        }
    }
    Err(Error::DegenerateBatch("no response token was masked after resampling".into()))
}

fn diffusion_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    batch: &[Example],
    rng: &mut SeededRng,
    noise: NoiseLevel,
) -> Result<Var> {
    require_mode(cfg, AttentionMode::Bidirectional, "masked-denoising loss")?;
    if let NoiseLevel::Fixed(t) = noise {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("mask ratio {t} outside (0, 1]")));
        }
    }
    let noised = noise_batch(batch, cfg.mask_id(), rng, noise)?;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let b = batch.len() as f64;
    for (k, ex) in batch.iter().enumerate() {
        let n = ex.response.len() as f64;
        let w = 1.0 / (noised.ratios[k] * n * b);
        targets.extend_from_slice(&ex.prompt);
        weights.extend(std::iter::repeat_n(0.0, ex.prompt.len()));
        targets.extend_from_slice(&ex.response);
        weights.extend(noised.masked[k].iter().map(|&m| if m { w } else { 0.0 }));
    }
    let packed = PackedBatch::new(&noised.inputs);
    let (logits, _) = forward_on_tape(tape, vars, cfg, &packed, &SkipSet::empty(), false)?;
    tape.weighted_cross_entropy(logits, &targets, &weights)
}

/// Mean next-token cross-entropy over response positions.
pub fn ar_loss(ckpt: &Checkpoint, batch: &[Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, ckpt.params(), false);
    let loss = ar_on_tape(&mut tape, &vars, ckpt.config(), batch)?;
    tape.value(loss).item()
}

/// Masked-denoising loss with `t ~ Uniform(0, 1]` per example (stratified, see [`NoiseLevel`]).
///
/// Each response token is replaced by MASK with probability `t`; the loss is
/// the cross-entropy on masked positions weighted by `1 / (t · |response|)`,
/// averaged over the batch. Prompt tokens are never masked.
pub fn diffusion_loss(ckpt: &Checkpoint, batch: &[Example], rng: &mut SeededRng) -> Result<f64> {
    diffusion_loss_with(ckpt, batch, rng, NoiseLevel::Sampled)
}

pub fn diffusion_loss_with(
    ckpt: &Checkpoint,
    batch: &[Example],
    rng: &mut SeededRng,
    noise: NoiseLevel,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, ckpt.params(), false);
    let loss = diffusion_on_tape(&mut tape, &vars, ckpt.config(), batch, rng, noise)?;
    tape.value(loss).item()
}

/// Loss value and per-parameter gradients in `ModelParams::named` order.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

pub fn loss_and_grads(
    ckpt: &Checkpoint,
    objective: Objective,
    batch: &[Example],
    rng: &mut SeededRng,
    noise: NoiseLevel,
) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, ckpt.params(), true);
    let loss = match objective {
        Objective::ArNtp => ar_on_tape(&mut tape, &vars, ckpt.config(), batch)?,
        Objective::MaskedDiffusion => diffusion_on_tape(&mut tape, &vars, ckpt.config(), batch, rng, noise)?,
    };
    let value = tape.value(loss).item()?;
    let g = tape.backward(loss)?;
    let grads = g
        .params()
        .into_iter()
        .zip(ckpt.params().tensors())
        .map(|(g, p)| g.cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(LossAndGrads { loss: value, grads })
}
