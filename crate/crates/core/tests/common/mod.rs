#![allow(dead_code)]

use skiplab::harness::equivalence_rate;
use skiplab::inference::{diffusion_decode, token_kl, DecodeConfig, DecodeMode, GenerationResult};
use skiplab::model::{forward, AttentionMode, Checkpoint, ModelConfig, Regime, SkipSet};
use skiplab::nn::SeededRng;
use skiplab::training::{
    generate_dataset, loss_and_grads, train, Example, NoiseLevel, Objective, TaskKind, TaskSpec, TrainConfig,
};

pub fn small_config(mode: AttentionMode, num_blocks: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        num_blocks,
        d_model,
        num_heads: 2,
        d_ff: 2 * d_model,
        vocab_size: 10,
        max_seq_len: 24,
        attention_mode: mode,
    }
}

fn regime_for(mode: AttentionMode) -> Regime {
    match mode {
        AttentionMode::Causal => Regime::NativeAr,
        AttentionMode::Bidirectional => Regime::NativeDiffusion,
    }
}

/// An initialized model with every parameter pushed off its init value, so
/// no gradient is structurally tiny.
pub fn jittered(cfg: &ModelConfig, seed: u64, scale: f64) -> Checkpoint {
    let mut ck = Checkpoint::init(cfg.clone(), regime_for(cfg.attention_mode), seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for t in ck.params_mut().tensors_mut() {
        for i in 0..t.numel() {
            let v = t.data()[i] + scale * rng.normal();
            t.set_flat(i, v).unwrap();
        }
    }
    ck
}

pub fn grad_batch() -> Vec<Example> {
    vec![
        Example { prompt: vec![1, 2, 3, 8], response: vec![3, 2, 1] },
        Example { prompt: vec![4, 0, 8], response: vec![0, 4] },
    ]
}

fn loss_of(ck: &Checkpoint, objective: Objective, batch: &[Example]) -> f64 {
    let mut rng = SeededRng::new(77);
    loss_and_grads(ck, objective, batch, &mut rng, NoiseLevel::Fixed(0.6)).unwrap().loss
}

/// Largest relative error between autodiff and central differences over
/// every scalar parameter, with the parameter name where it occurs.
pub fn max_gradient_error(objective: Objective) -> (f64, String) {
    let mode = match objective {
        Objective::ArNtp => AttentionMode::Causal,
        Objective::MaskedDiffusion => AttentionMode::Bidirectional,
    };
    let cfg = small_config(mode, 2, 16);
    let ck = jittered(&cfg, 3, 0.2);
    let batch = grad_batch();
    let mut rng = SeededRng::new(77);
    let analytic = loss_and_grads(&ck, objective, &batch, &mut rng, NoiseLevel::Fixed(0.6)).unwrap();
    let names: Vec<String> = ck.params().named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (p, name) in names.iter().enumerate() {
        let n = ck.params().tensors()[p].numel();
        for i in 0..n {
            let bump = |delta: f64| {
                let mut c = ck.clone();
                let t = &mut c.params_mut().tensors_mut()[p];
                let v = t.data()[i] + delta;
                t.set_flat(i, v).unwrap();
                loss_of(&c, objective, &batch)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic.grads[p].data()[i];
            // Absolute floor at the finite-difference noise level.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: autodiff {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// A briefly trained model for the given mode on a small reverse task.
pub fn trained(mode: AttentionMode, seed: u64, steps: usize) -> Checkpoint {
    let spec = TaskSpec {
        kind: TaskKind::Reverse,
        min_len: 2,
        max_len: 4,
        alphabet: 5,
        vocab_size: 10,
        train_examples: 300,
        eval_examples: 10,
        ..Default::default()
    };
    let data = generate_dataset(&spec, seed).unwrap();
    let objective = match mode {
        AttentionMode::Causal => Objective::ArNtp,
        AttentionMode::Bidirectional => Objective::MaskedDiffusion,
    };
    let cfg = TrainConfig { objective, steps, batch_size: 8, seed, ..Default::default() };
    train(&cfg, &small_config(mode, 4, 16), &data, None).unwrap().checkpoint
}

/// Checks, for `trials` random single-block skips, that the bypassed state
/// equals its input bitwise and that logits match the physically reduced model.
pub fn check_bypass(ck: &Checkpoint, seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let l = ck.num_blocks();
    for _ in 0..trials {
        let block = 1 + rng.index(l);
        let len = 2 + rng.index(10);
        let tokens: Vec<usize> = (0..len).map(|_| rng.index(ck.config().vocab_size)).collect();
        let skip = SkipSet::new([block]);
        let out = forward(ck, &tokens, &skip, true).map_err(|e| e.to_string())?;
        let trace = out.trace.expect("trace requested");
        let (before, after) = (&trace.states[block - 1], &trace.states[block]);
        if before.data().iter().zip(after.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("block {block} changed its input on {tokens:?}"));
        }
        let reduced = ck.without_blocks(&skip).map_err(|e| e.to_string())?;
        let r = forward(&reduced, &tokens, &SkipSet::empty(), false).map_err(|e| e.to_string())?;
        let diff = out.logits.data().iter().zip(r.logits.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff > 1e-12 {
            return Err(format!("skip {block}: logits differ from the reduced model by {diff:e}"));
        }
    }
    Ok(())
}

fn same_generation(a: &GenerationResult, b: &GenerationResult) -> bool {
    let bits = |r: &GenerationResult| -> Vec<u64> { r.logprobs.iter().flatten().map(|v| v.to_bits()).collect() };
    a.tokens == b.tokens && a.finalized_at == b.finalized_at && bits(a) == bits(b)
}

/// No MASK left for every step budget and length, bitwise reruns, and
/// unit equivalence with zero KL for the empty skip set.
pub fn check_decode_invariants(ck: &Checkpoint) -> Result<(), String> {
    let mask = ck.config().mask_id();
    let prompt = [1, 2, 3, 8];
    let mut runs = Vec::new();
    let mut fulls = Vec::new();
    for t in [1, 2, 4, 8] {
        for g in 1..=16 {
            let cfg = DecodeConfig {
                mode: DecodeMode::Diffusion,
                gen_length: g,
                steps: Some(t),
                seed: (t * 100 + g) as u64,
                ..Default::default()
            };
            let a = diffusion_decode(ck, &prompt, &SkipSet::empty(), &cfg).map_err(|e| e.to_string())?;
            if a.tokens.len() != g || a.tokens.contains(&mask) {
                return Err(format!("T={t}, length {g}: output {:?}", a.tokens));
            }
            let b = diffusion_decode(ck, &prompt, &SkipSet::empty(), &cfg).map_err(|e| e.to_string())?;
            if !same_generation(&a, &b) {
                return Err(format!("T={t}, length {g}: rerun differs"));
            }
            let kl = token_kl(&a, &b).map_err(|e| e.to_string())?;
            if kl != 0.0 {
                return Err(format!("T={t}, length {g}: KL {kl}"));
            }
            runs.push(a);
            fulls.push(b);
        }
    }
    let rate = equivalence_rate(&runs, &fulls).map_err(|e| e.to_string())?;
    if rate != 1.0 {
        return Err(format!("equivalence rate {rate}"));
    }
    Ok(())
}
