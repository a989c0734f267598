//! Autoregressive and iterative-unmasking decoders with a fixed skip set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, AttentionMode, Checkpoint, HiddenStateTrace, SkipSet};
use crate::nn::ops::softmax_in_place;
use crate::nn::{log_softmax_row, SeededRng};
use crate::probe::{layerwise_similarity, SimilarityList, TokenWindow};
use crate::skip::{select_skip_layers, SkipPolicyConfig};
use crate::training::task::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Ar,
    Diffusion,
}

impl DecodeMode {
    pub fn for_attention(mode: AttentionMode) -> Self {
        match mode {
            AttentionMode::Causal => DecodeMode::Ar,
            AttentionMode::Bidirectional => DecodeMode::Diffusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampler {
    Greedy,
    Nucleus { top_p: f64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Tokens to generate (AR upper bound; diffusion response length).
    pub gen_length: usize,
    pub sampler: Sampler,
    /// Denoising steps; `None` means one per generated token.
    pub steps: Option<usize>,
    pub seed: u64,
    pub stop_token: Option<usize>,
    /// Keep one hidden-state trace per forward.
    pub capture_traces: bool,
    /// Ablation only: re-select the skip set from the current sequence at
    /// every denoising step.
    pub recalibrate_each_step: Option<SkipPolicyConfig>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Diffusion,
            gen_length: 8,
            sampler: Sampler::Greedy,
            steps: None,
            seed: 0,
            stop_token: None,
            capture_traces: false,
            recalibrate_each_step: None,
        }
    }
}

impl DecodeConfig {
    pub fn greedy_for(mode: AttentionMode) -> Self {
        Self { mode: DecodeMode::for_attention(mode), ..Default::default() }
    }

    pub fn with_length(&self, gen_length: usize) -> Self {
        Self { gen_length, ..self.clone() }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.unwrap_or(self.gen_length)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_length == 0 {
            return Err(Error::Input("gen_length must be ≥ 1".into()));
        }
        if self.mode == DecodeMode::Diffusion && self.num_steps() == 0 {
            return Err(Error::Config("diffusion decoding needs at least one step".into()));
        }
        if let Sampler::Nucleus { top_p, temperature } = self.sampler {
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::Config(format!("top_p {top_p} outside (0, 1]")));
            }
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Full-vocabulary log-probabilities of each generated position when it
    /// was finalized. The MASK entry is −∞.
    #[serde(skip)]
    pub logprobs: Vec<Vec<f64>>,
    /// Denoising (or decode) step at which each position was finalized, 1-based.
    pub finalized_at: Vec<usize>,
    #[serde(skip)]
    pub traces: Vec<HiddenStateTrace>,
    pub skip: SkipSet,
    /// Skip set used at each step.
    pub step_skips: Vec<SkipSet>,
    pub steps: usize,
    pub step_seconds: Vec<f64>,
}

impl GenerationResult {
    /// Equality ignoring wall-clock timing.
    pub fn same_output(&self, other: &GenerationResult) -> bool {
        self.tokens == other.tokens
            && self.finalized_at == other.finalized_at
            && self.skip == other.skip
            && self.step_skips == other.step_skips
            && self.steps == other.steps
            && self.logprobs.len() == other.logprobs.len()
            && self
                .logprobs
                .iter()
                .zip(&other.logprobs)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            && self.traces == other.traces
    }
}

fn masked_row(row: &[f64], mask_id: usize) -> Vec<f64> {
    let mut r = row.to_vec();
    r[mask_id] = f64::NEG_INFINITY;
    r
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks a token from logits with MASK already excluded.
fn sample(logits: &[f64], sampler: Sampler, rng: &mut SeededRng) -> usize {
    match sampler {
        Sampler::Greedy => argmax(logits),
        Sampler::Nucleus { top_p, temperature } => {
            let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
            softmax_in_place(&mut p);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut keep = 0;
            let mut mass = 0.0;
            for &i in &order {
                keep += 1;
                mass += p[i];
                if mass >= top_p {
                    break;
                }
            }
            let u = rng.uniform() * mass;
            let mut acc = 0.0;
            for &i in &order[..keep] {
                acc += p[i];
                if u < acc {
                    return i;
                }
            }
            order[keep - 1]
        }
    }
}

fn check_prompt(ckpt: &Checkpoint, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompt.contains(&ckpt.config().mask_id()) {
        return Err(Error::Input("prompt contains the MASK token".into()));
    }
    Ok(())
}

/// Chooses the skip set for one prompt from a single full-depth forward.
///
/// Diffusion checkpoints see the prompt followed by `gen_length` MASK
/// tokens; similarities are averaged over the prompt positions only.
pub fn calibrate_skip_set(
    ckpt: &Checkpoint,
    prompt: &[usize],
    gen_length: usize,
    policy: &SkipPolicyConfig,
) -> Result<SkipSet> {
    select_skip_layers(&calibration_similarities(ckpt, prompt, gen_length)?, policy)
}

/// The similarity list [`calibrate_skip_set`] selects from.
pub fn calibration_similarities(ckpt: &Checkpoint, prompt: &[usize], gen_length: usize) -> Result<SimilarityList> {
    check_prompt(ckpt, prompt)?;
    let mut seq = prompt.to_vec();
    if ckpt.config().attention_mode == AttentionMode::Bidirectional {
        seq.extend(std::iter::repeat_n(ckpt.config().mask_id(), gen_length));
    }
    prompt_similarities(ckpt, &seq, prompt.len())
}

fn prompt_similarities(ckpt: &Checkpoint, seq: &[usize], prompt_len: usize) -> Result<SimilarityList> {
    let trace = forward(ckpt, seq, &SkipSet::empty(), true)?.trace.expect("captured");
    layerwise_similarity(&trace, TokenWindow::Prompt(prompt_len))
}

/// Token-by-token generation, recomputing the full forward at every step.
pub fn ar_decode(ckpt: &Checkpoint, prompt: &[usize], skip: &SkipSet, cfg: &DecodeConfig) -> Result<GenerationResult> {
    if ckpt.config().attention_mode != AttentionMode::Causal {
        return Err(Error::Config("autoregressive decoding needs a causal checkpoint".into()));
    }
    if cfg.mode != DecodeMode::Ar {
        return Err(Error::Config("decode config is not in ar mode".into()));
    }
    cfg.validate()?;
    check_prompt(ckpt, prompt)?;
    skip.validate(ckpt.num_blocks())?;
    let mask_id = ckpt.config().mask_id();
    let mut rng = SeededRng::derived(cfg.seed, "ar-decode");
    let mut seq = prompt.to_vec();
    let mut out = GenerationResult {
        prompt: prompt.to_vec(),
        tokens: vec![],
        logprobs: vec![],
        finalized_at: vec![],
        traces: vec![],
        skip: skip.clone(),
        step_skips: vec![],
        steps: 0,
        step_seconds: vec![],
    };
    for step in 1..=cfg.gen_length {
        let started = Instant::now();
        let fwd = forward(ckpt, &seq, skip, cfg.capture_traces)?;
        let row = masked_row(fwd.logits.row(seq.len() - 1), mask_id);
        let tok = sample(&row, cfg.sampler, &mut rng);
        out.logprobs.push(log_softmax_row(&row));
        out.tokens.push(tok);
        out.finalized_at.push(step);
        if let Some(mut t) = fwd.trace {
            t.step = step;
            out.traces.push(t);
        }
        out.step_skips.push(skip.clone());
        out.steps = step;
        out.step_seconds.push(started.elapsed().as_secs_f64());
        seq.push(tok);
        if cfg.stop_token == Some(tok) {
            break;
        }
    }
    Ok(out)
}

/// Iterative unmasking from an all-MASK response.
///
/// At step `t` of `T`, the `⌈remaining / (T − t + 1)⌉` masked positions
/// with the highest maximum probability (lower position on ties) receive
/// their token and are never revisited.
pub fn diffusion_decode(
    ckpt: &Checkpoint,
    prompt: &[usize],
    skip: &SkipSet,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    if ckpt.config().attention_mode != AttentionMode::Bidirectional {
        return Err(Error::Config("diffusion decoding needs a bidirectional checkpoint".into()));
    }
    if cfg.mode != DecodeMode::Diffusion {
        return Err(Error::Config("decode config is not in diffusion mode".into()));
    }
    cfg.validate()?;
    check_prompt(ckpt, prompt)?;
    skip.validate(ckpt.num_blocks())?;
    let mask_id = ckpt.config().mask_id();
    let (p, g, total) = (prompt.len(), cfg.gen_length, cfg.num_steps());
    let mut rng = SeededRng::derived(cfg.seed, "diffusion-decode");
    let mut seq = prompt.to_vec();
    seq.extend(std::iter::repeat_n(mask_id, g));
    let mut out = GenerationResult {
        prompt: prompt.to_vec(),
        tokens: vec![],
        logprobs: vec![vec![]; g],
        finalized_at: vec![0; g],
        traces: vec![],
        skip: skip.clone(),
        step_skips: vec![],
        steps: 0,
        step_seconds: vec![],
    };
    let mut remaining = g;
    for t in 1..=total {
        if remaining == 0 {
            break;
        }
        let started = Instant::now();
        let step_skip = match &cfg.recalibrate_each_step {
            Some(policy) => select_skip_layers(&prompt_similarities(ckpt, &seq, p)?, policy)?,
            None => skip.clone(),
        };
        let fwd = forward(ckpt, &seq, &step_skip, cfg.capture_traces)?;
        let mut candidates = Vec::with_capacity(remaining);
        for j in 0..g {
            if out.finalized_at[j] != 0 {
                continue;
            }
            let row = masked_row(fwd.logits.row(p + j), mask_id);
            let logp = log_softmax_row(&row);
            let confidence = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
            let tok = sample(&row, cfg.sampler, &mut rng);
            candidates.push((j, confidence, tok, logp));
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let k = remaining.div_ceil(total - t + 1);
        for (j, _, tok, logp) in candidates.into_iter().take(k) {
            seq[p + j] = tok;
            out.logprobs[j] = logp;
            out.finalized_at[j] = t;
        }
        remaining -= k;
        if let Some(mut tr) = fwd.trace {
            tr.step = t;
            out.traces.push(tr);
        }
        out.step_skips.push(step_skip);
        out.steps = t;
        out.step_seconds.push(started.elapsed().as_secs_f64());
    }
    debug_assert_eq!(remaining, 0);
    out.tokens = seq[p..].to_vec();
    Ok(out)
}

/// Dispatches on `cfg.mode`.
pub fn generate(ckpt: &Checkpoint, prompt: &[usize], skip: &SkipSet, cfg: &DecodeConfig) -> Result<GenerationResult> {
    match cfg.mode {
        DecodeMode::Ar => ar_decode(ckpt, prompt, skip, cfg),
        DecodeMode::Diffusion => diffusion_decode(ckpt, prompt, skip, cfg),
    }
}

/// Mean over positions of KL(full ‖ skipped) from finalization-time rows.
pub fn token_kl(skipped: &GenerationResult, full: &GenerationResult) -> Result<f64> {
    if skipped.prompt != full.prompt || skipped.logprobs.len() != full.logprobs.len() || full.logprobs.is_empty() {
        return Err(Error::Input("generation results cover different prompts or positions".into()));
    }
    let mut total = 0.0;
    for (q, p) in skipped.logprobs.iter().zip(&full.logprobs) {
        if q.len() != p.len() {
            return Err(Error::Input("log-probability rows differ in width".into()));
        }
        total += kl_row(p, q);
    }
    Ok(total / full.logprobs.len() as f64)
}

/// KL(p ‖ q) for log-probability rows.
pub fn kl_row(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .filter(|(lp, _)| **lp > f64::NEG_INFINITY)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Exact-match accuracy with a fixed skip set; each example generates
/// exactly as many tokens as its reference response.
pub fn evaluate(ckpt: &Checkpoint, skip: &SkipSet, examples: &[Example], cfg: &DecodeConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut correct = 0;
    for ex in examples {
        let r = generate(ckpt, &ex.prompt, skip, &cfg.with_length(ex.response.len()))?;
        correct += usize::from(r.tokens == ex.response);
    }
    Ok(exact_match_rate(correct, examples.len()))
}

pub fn exact_match_rate(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64
}
