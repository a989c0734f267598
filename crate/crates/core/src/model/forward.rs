use crate::error::{Error, Result};
use crate::model::config::{AttentionMode, ModelConfig, SkipSet};
use crate::model::params::{BlockParams, Checkpoint, ModelParams};
use crate::nn::{Segment, Tape, Tensor, Var};

/// Post-embedding state followed by each block's output, for one forward.
///
/// `states[0]` is H₀ and `states[l]` is the output of block `l` (1-based);
/// a bypassed block repeats its input exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    pub states: Vec<Tensor>,
    /// Denoising step this trace belongs to; 0 for autoregressive forwards.
    pub step: usize,
}

impl HiddenStateTrace {
    pub fn num_blocks(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn seq_len(&self) -> usize {
        self.states.first().map_or(0, Tensor::rows)
    }

    pub fn d_model(&self) -> usize {
        self.states.first().map_or(0, Tensor::cols)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(seq_len × vocab)` logits.
    pub logits: Tensor,
    pub trace: Option<HiddenStateTrace>,
}

pub(crate) struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Tape handles for every parameter, in `ModelParams::named` order.
pub(crate) struct ParamVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf_gain: Var,
    lnf_bias: Var,
    head_w: Var,
    head_b: Var,
}

impl ParamVars {
    /// Records the weights on `tape`, as trainable leaves when `trainable`.
    pub(crate) fn register<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, trainable: bool) -> Self {
        let mut reg = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant_ref(t) };
        let tok_emb = reg(&params.tok_emb);
        let pos_emb = reg(&params.pos_emb);
        let blocks = params.blocks.iter().map(|b| register_block(&mut reg, b)).collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: reg(&params.lnf_gain),
            lnf_bias: reg(&params.lnf_bias),
            head_w: reg(&params.head_w),
            head_b: reg(&params.head_b),
        }
    }
}

fn register_block<'a>(reg: &mut impl FnMut(&'a Tensor) -> Var, b: &'a BlockParams) -> BlockVars {
    BlockVars {
        ln1_gain: reg(&b.ln1_gain),
        ln1_bias: reg(&b.ln1_bias),
        wq: reg(&b.wq),
        wk: reg(&b.wk),
        wv: reg(&b.wv),
        wo: reg(&b.wo),
        bo: reg(&b.bo),
        ln2_gain: reg(&b.ln2_gain),
        ln2_bias: reg(&b.ln2_bias),
        w1: reg(&b.w1),
        b1: reg(&b.b1),
        w2: reg(&b.w2),
        b2: reg(&b.b2),
    }
}

/// Several sequences packed row-wise for one forward.
#[derive(Debug, Clone, Default)]
pub(crate) struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedBatch {
    pub(crate) fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut batch = Self::default();
        for s in seqs {
            let s = s.as_ref();
            batch.segments.push(Segment { start: batch.tokens.len(), len: s.len() });
            batch.tokens.extend_from_slice(s);
            batch.positions.extend(0..s.len());
        }
        batch
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.segments.iter().any(|s| s.len == 0) {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(s) = self.segments.iter().find(|s| s.len > cfg.max_seq_len) {
            return Err(Error::Input(format!("sequence of {} tokens exceeds max_seq_len {}", s.len, cfg.max_seq_len)));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {t} >= vocab size {}", cfg.vocab_size)));
        }
        Ok(())
    }
}

fn block_on_tape(
    tape: &mut Tape<'_>,
    b: &BlockVars,
    h: Var,
    segments: &[Segment],
    heads: usize,
    mode: AttentionMode,
) -> Result<Var> {
    let x = tape.layer_norm(h, b.ln1_gain, b.ln1_bias)?;
    let q = tape.matmul(x, b.wq)?;
    let k = tape.matmul(x, b.wk)?;
    let v = tape.matmul(x, b.wv)?;
    let a = tape.attention(q, k, v, segments, heads, mode.mask())?;
    let a = tape.matmul(a, b.wo)?;
    let a = tape.add_row(a, b.bo)?;
    let h = tape.add(h, a)?;
    let x = tape.layer_norm(h, b.ln2_gain, b.ln2_bias)?;
    let m = tape.matmul(x, b.w1)?;
    let m = tape.add_row(m, b.b1)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, b.w2)?;
    let m = tape.add_row(m, b.b2)?;
    tape.add(h, m)
}

/// Records the forward of a packed batch; returns logits and, when
/// `capture`, the state handles H₀..H_L.
pub(crate) fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    batch: &PackedBatch,
    skip: &SkipSet,
    capture: bool,
) -> Result<(Var, Vec<Var>)> {
    skip.validate(vars.blocks.len())?;
    batch.validate(cfg)?;
    let tok = tape.gather(vars.tok_emb, &batch.tokens)?;
    let pos = tape.gather(vars.pos_emb, &batch.positions)?;
    let mut h = tape.add(tok, pos)?;
    let mut states = Vec::new();
    if capture {
        states.push(h);
    }
    for (i, b) in vars.blocks.iter().enumerate() {
        if !skip.contains(i + 1) {
            h = block_on_tape(tape, b, h, &batch.segments, cfg.num_heads, cfg.attention_mode)?;
        }
        if capture {
            states.push(h);
        }
    }
    let x = tape.layer_norm(h, vars.lnf_gain, vars.lnf_bias)?;
    let logits = tape.matmul(x, vars.head_w)?;
    let logits = tape.add_row(logits, vars.head_b)?;
    Ok((logits, states))
}

/// Full forward over one token sequence with the blocks in `skip` bypassed.
pub fn forward(ckpt: &Checkpoint, tokens: &[usize], skip: &SkipSet, capture: bool) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, ckpt.params(), false);
    let batch = PackedBatch::new(&[tokens]);
    let (logits, states) = forward_on_tape(&mut tape, &vars, ckpt.config(), &batch, skip, capture)?;
    let trace =
        capture.then(|| HiddenStateTrace { states: states.iter().map(|&s| tape.value(s).clone()).collect(), step: 0 });
    Ok(ForwardOutput { logits: tape.value(logits).clone(), trace })
}

/// Logits for several sequences in one packed forward.
pub fn forward_batch<S: AsRef<[usize]>>(ckpt: &Checkpoint, seqs: &[S], skip: &SkipSet) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, ckpt.params(), false);
    let batch = PackedBatch::new(seqs);
    let (logits, _) = forward_on_tape(&mut tape, &vars, ckpt.config(), &batch, skip, false)?;
    let all = tape.value(logits);
    Ok(batch.segments.iter().map(|s| all.select_rows(&(s.start..s.start + s.len).collect::<Vec<_>>())).collect())
}

/// One block applied to a `(seq_len × d_model)` hidden state.
pub fn block_forward(params: &BlockParams, h: &Tensor, mode: AttentionMode, num_heads: usize) -> Result<Tensor> {
    if h.shape().len() != 2 || h.cols() != params.ln1_gain.numel() {
        return Err(Error::Shape(format!("block input {:?} does not match d_model", h.shape())));
    }
    let mut tape = Tape::new();
    let mut reg = |t: &Tensor| tape.constant(t.clone());
    let vars = register_block(&mut reg, params);
    let x = tape.constant(h.clone());
    let segments = [Segment { start: 0, len: h.rows() }];
    let out = block_on_tape(&mut tape, &vars, x, &segments, num_heads, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Regime;

    fn tiny(mode: AttentionMode) -> Checkpoint {
        let cfg = ModelConfig {
            num_blocks: 3,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 10,
            attention_mode: mode,
        };
        Checkpoint::init(cfg, Regime::NativeAr, 5).unwrap()
    }

    #[test]
    fn trace_has_one_state_per_block_plus_embedding() {
        let ck = tiny(AttentionMode::Causal);
        let out = forward(&ck, &[1, 2, 3, 4], &SkipSet::empty(), true).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.states.len(), 4);
        assert_eq!(trace.seq_len(), 4);
        for w in trace.states.windows(2) {
            assert!(!w[0].bitwise_eq(&w[1]));
        }
        assert_eq!(out.logits.shape(), &[4, 11]);
        assert!(forward(&ck, &[1, 2], &SkipSet::empty(), false).unwrap().trace.is_none());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let ck = tiny(AttentionMode::Causal);
        let e = SkipSet::empty();
        assert!(matches!(forward(&ck, &[1, 11], &e, false), Err(Error::Input(_))));
        assert!(matches!(forward(&ck, &[], &e, false), Err(Error::Input(_))));
        assert!(matches!(forward(&ck, &[1; 11], &e, false), Err(Error::Input(_))));
        assert!(matches!(forward(&ck, &[1], &SkipSet::new([4]), false), Err(Error::Config(_))));
        assert!(matches!(forward(&ck, &[1], &SkipSet::new([0]), false), Err(Error::Config(_))));
    }

    #[test]
    fn total_bypass_feeds_embedding_to_head() {
        let ck = tiny(AttentionMode::Bidirectional);
        let tokens = [3, 1, 4, 1];
        let out = forward(&ck, &tokens, &SkipSet::all(3), true).unwrap();
        let trace = out.trace.unwrap();
        assert!(trace.states.iter().all(|s| s.bitwise_eq(&trace.states[0])));
        let p = ck.params();
        let mut tape = Tape::new();
        let h0 = tape.constant(trace.states[0].clone());
        let (g, b, w, hb) = (
            tape.constant(p.lnf_gain.clone()),
            tape.constant(p.lnf_bias.clone()),
            tape.constant(p.head_w.clone()),
            tape.constant(p.head_b.clone()),
        );
        let x = tape.layer_norm(h0, g, b).unwrap();
        let l = tape.matmul(x, w).unwrap();
        let l = tape.add_row(l, hb).unwrap();
        assert!(tape.value(l).bitwise_eq(&out.logits));
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let ck = tiny(AttentionMode::Causal);
        let mut b = ck.params().blocks[0].clone();
        for t in [&mut b.wo, &mut b.bo, &mut b.w2, &mut b.b2] {
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = crate::nn::SeededRng::new(2);
        let h = Tensor::matrix(3, 8, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let out = block_forward(&b, &h, AttentionMode::Causal, 2).unwrap();
        assert!(out.bitwise_eq(&h));
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let ck = tiny(AttentionMode::Causal);
        let a = forward(&ck, &[1, 2, 3, 4, 5], &SkipSet::empty(), false).unwrap().logits;
        let b = forward(&ck, &[1, 2, 3, 9, 0], &SkipSet::empty(), false).unwrap().logits;
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn batched_forward_matches_single_forwards() {
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let ck = tiny(mode);
            let seqs = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
            let skip = SkipSet::new([2]);
            let batched = forward_batch(&ck, &seqs, &skip).unwrap();
            for (s, l) in seqs.iter().zip(&batched) {
                let single = forward(&ck, s, &skip, false).unwrap().logits;
                assert!(single.max_abs_diff(l) < 1e-12);
            }
        }
    }
}
