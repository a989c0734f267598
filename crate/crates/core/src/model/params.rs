use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Regime, SkipSet};
use crate::nn::{SeededRng, Tensor};

const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm attention + MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub(crate) const BLOCK_FIELDS: [&str; 13] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1",
    "mlp.b1", "mlp.w2", "mlp.b2",
];

impl BlockParams {
    fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let resid_std = INIT_STD / (2.0 * cfg.num_blocks as f64).sqrt();
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: normal(rng, &[d, d], INIT_STD),
            wk: normal(rng, &[d, d], INIT_STD),
            wv: normal(rng, &[d, d], INIT_STD),
            wo: normal(rng, &[d, d], resid_std),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: normal(rng, &[d, f], INIT_STD),
            b1: Tensor::zeros(&[f]),
            w2: normal(rng, &[f, d], resid_std),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub(crate) fn fields(&self) -> [&Tensor; 13] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 13] {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }
}

/// Full parameter set. Iteration order of [`ModelParams::named`] is stable
/// and is the order used by the optimizer and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let tok_emb = normal(rng, &[v, d], INIT_STD);
        let pos_emb = normal(rng, &[cfg.max_seq_len, d], INIT_STD);
        let blocks = (0..cfg.num_blocks).map(|_| BlockParams::init(cfg, rng)).collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head_w: normal(rng, &[d, v], INIT_STD),
            head_b: Tensor::zeros(&[v]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{}.{name}", i + 1), t));
            }
        }
        out.push(("ln_f.gain".into(), &self.lnf_gain));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds a parameter set from `named()`-ordered tensors.
    pub fn from_named(cfg: &ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = Self::expected_names(cfg);
        if named.len() != expected.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), named.len())));
        }
        for ((name, _), want) in named.iter().zip(&expected) {
            if name != want {
                return Err(Error::Format(format!("expected tensor {want}, found {name}")));
            }
        }
        let mut it = named.drain(..).map(|(_, t)| t);
        let mut next = || it.next().expect("length checked above");
        let tok_emb = next();
        let pos_emb = next();
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            blocks.push(BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        let params =
            Self { tok_emb, pos_emb, blocks, lnf_gain: next(), lnf_bias: next(), head_w: next(), head_b: next() };
        params.check_shapes(cfg)?;
        Ok(params)
    }

    fn expected_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 1..=cfg.num_blocks {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        names.extend(["ln_f.gain", "ln_f.bias", "head.w", "head.b"].map(String::from));
        names
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mismatch = |name: &str, got: &[usize], want: &[usize]| {
            Error::Config(format!("parameter {name} has shape {got:?}, config implies {want:?}"))
        };
        let top: [(&str, &Tensor, Vec<usize>); 6] = [
            ("tok_emb", &self.tok_emb, vec![v, d]),
            ("pos_emb", &self.pos_emb, vec![cfg.max_seq_len, d]),
            ("ln_f.gain", &self.lnf_gain, vec![d]),
            ("ln_f.bias", &self.lnf_bias, vec![d]),
            ("head.w", &self.head_w, vec![d, v]),
            ("head.b", &self.head_b, vec![v]),
        ];
        for (name, t, want) in top {
            if t.shape() != want.as_slice() {
                return Err(mismatch(name, t.shape(), &want));
            }
        }
        if self.blocks.len() != cfg.num_blocks {
            return Err(Error::Config(format!("{} blocks present, config has {}", self.blocks.len(), cfg.num_blocks)));
        }
        let shapes = BlockParams::expected_shapes(cfg);
        for (i, b) in self.blocks.iter().enumerate() {
            for ((name, t), want) in BLOCK_FIELDS.iter().zip(b.fields()).zip(&shapes) {
                if t.shape() != want.as_slice() {
                    return Err(mismatch(&format!("blocks.{}.{name}", i + 1), t.shape(), want));
                }
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
}

/// Architecture, weights and provenance of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    params: ModelParams,
    regime: Regime,
    seed: u64,
    steps_trained: usize,
}

impl Checkpoint {
    /// Freshly initialized weights for `config`.
    pub fn init(config: ModelConfig, regime: Regime, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derived(seed, "init");
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params, regime, seed, steps_trained: 0 })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ModelParams,
        regime: Regime,
        seed: u64,
        steps_trained: usize,
    ) -> Result<Self> {
        config.validate_shapes()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params, regime, seed, steps_trained })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps_trained(&self) -> usize {
        self.steps_trained
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    /// Mutable weights, for training and finite-difference probes.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub(crate) fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    /// A physically smaller model with the blocks in `skip` removed.
    pub fn without_blocks(&self, skip: &SkipSet) -> Result<Checkpoint> {
        skip.validate(self.config.num_blocks)?;
        let mut params = self.params.clone();
        params.blocks = self
            .params
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i + 1))
            .map(|(_, b)| b.clone())
            .collect();
        let config = ModelConfig { num_blocks: params.blocks.len(), ..self.config.clone() };
        Self::from_parts(config, params, self.regime, self.seed, self.steps_trained)
    }
}
