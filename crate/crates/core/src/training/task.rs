//! Synthetic exact-match tasks.
//!
//! Symbols occupy ids `0..alphabet`; the special tokens sit at the top of the
//! vocabulary just below MASK. A prompt is the task input followed by `SEP`,
//! the response is the answer.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortDigits,
    ModularSum,
    SpanInfill,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SortDigits => "sort-digits",
            TaskKind::ModularSum => "modular-sum",
            TaskKind::SpanInfill => "span-infill",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Copy, TaskKind::Reverse, TaskKind::SortDigits, TaskKind::ModularSum, TaskKind::SpanInfill]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Spec(format!("unknown task {s:?}")))
    }
}

/// Special-token ids for a vocabulary of `size` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub const NUM_SPECIAL: usize = 5;

    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn mask(&self) -> usize {
        self.size - 1
    }

    pub fn sep(&self) -> usize {
        self.size - 2
    }

    pub fn plus(&self) -> usize {
        self.size - 3
    }

    pub fn hole(&self) -> usize {
        self.size - 4
    }

    /// Optional stop marker for decoders.
    pub fn eos(&self) -> usize {
        self.size - 5
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                t if t == self.mask() => "<mask>".to_string(),
                t if t == self.sep() => "|".to_string(),
                t if t == self.plus() => "+".to_string(),
                t if t == self.hole() => "_".to_string(),
                t if t == self.eos() => "<eos>".to_string(),
                t => t.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Description of a synthetic task and its dataset sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input length bounds (operand count for modular-sum, motif length for span-infill).
    pub min_len: usize,
    pub max_len: usize,
    /// Symbol count; also the modulus for modular-sum.
    pub alphabet: usize,
    /// Blanked span length bounds for span-infill.
    pub span_min: usize,
    pub span_max: usize,
    /// Percentage of the prompt-hash space routed to the eval split.
    pub eval_percent: u8,
    pub train_examples: usize,
    pub eval_examples: usize,
    /// Vocabulary the tokens are laid out in.
    pub vocab_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            min_len: 2,
            max_len: 5,
            alphabet: 10,
            span_min: 2,
            span_max: 3,
            eval_percent: 10,
            train_examples: 4000,
            eval_examples: 100,
            vocab_size: 64,
        }
    }
}

/// One prompt/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl Example {
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.response);
        s
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    /// Longest prompt + response the spec can produce.
    pub fn max_sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::SortDigits => 2 * self.max_len + 1,
            TaskKind::ModularSum => 2 * self.max_len + 1,
            TaskKind::SpanInfill => 2 * self.max_len + 1 + self.span_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Spec(format!("length bounds {}..={} are invalid", self.min_len, self.max_len)));
        }
        if self.alphabet < 2 {
            return Err(Error::Spec(format!("{} needs at least 2 symbols, alphabet has {}", self.kind, self.alphabet)));
        }
        if self.kind == TaskKind::ModularSum && self.min_len < 2 {
            return Err(Error::Spec("modular-sum needs at least two operands".into()));
        }
        if self.kind == TaskKind::SpanInfill
            && (self.span_min == 0 || self.span_min > self.span_max || self.span_min > self.min_len)
        {
            return Err(Error::Spec(format!(
                "span bounds {}..={} are invalid for a shortest motif of {}",
                self.span_min, self.span_max, self.min_len
            )));
        }
        if self.alphabet + Vocab::NUM_SPECIAL > self.vocab_size {
            return Err(Error::Spec(format!(
                "alphabet of {} plus {} special tokens does not fit a vocabulary of {}",
                self.alphabet,
                Vocab::NUM_SPECIAL,
                self.vocab_size
            )));
        }
        if self.eval_percent == 0 || self.eval_percent >= 100 {
            return Err(Error::Spec("eval_percent must be in 1..=99".into()));
        }
        Ok(())
    }

    /// True when the prompt belongs to the eval split.
    pub fn is_eval_prompt(&self, prompt: &[usize]) -> bool {
        prompt_hash(prompt) % 100 < u64::from(self.eval_percent)
    }

    /// Deterministic answer for a task input.
    pub fn solve(&self, input: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => input.to_vec(),
            TaskKind::Reverse => input.iter().rev().copied().collect(),
            TaskKind::SortDigits => {
                let mut s = input.to_vec();
                s.sort_unstable();
                s
            }
            TaskKind::ModularSum => vec![input.iter().sum::<usize>() % self.alphabet],
            TaskKind::SpanInfill => unreachable!("span-infill answers are produced during sampling"),
        }
    }

    /// Builds the example for a task input (operands for modular-sum).
    pub fn example_for(&self, input: &[usize]) -> Example {
        let vocab = self.vocab();
        let mut prompt = Vec::new();
        if self.kind == TaskKind::ModularSum {
            for (i, &a) in input.iter().enumerate() {
                if i > 0 {
                    prompt.push(vocab.plus());
                }
                prompt.push(a);
            }
        } else {
            prompt.extend_from_slice(input);
        }
        prompt.push(vocab.sep());
        Example { prompt, response: self.solve(input) }
    }

    fn sample(&self, rng: &mut SeededRng) -> Example {
        let n = rng.int_inclusive(self.min_len, self.max_len);
        let symbols: Vec<usize> = (0..n).map(|_| rng.index(self.alphabet)).collect();
        if self.kind != TaskKind::SpanInfill {
            return self.example_for(&symbols);
        }
        // The motif appears twice; a span in one copy is blanked and must be
        // recovered from the other.
        let vocab = self.vocab();
        let m = rng.int_inclusive(self.span_min, self.span_max.min(n));
        let copy = rng.index(2);
        let start = copy * n + rng.index(n - m + 1);
        let mut full = symbols.clone();
        full.extend_from_slice(&symbols);
        let response = full[start..start + m].to_vec();
        for t in &mut full[start..start + m] {
            *t = vocab.hole();
        }
        full.push(vocab.sep());
        Example { prompt: full, response }
    }
}

fn prompt_hash(tokens: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Samples train and eval splits; routing by prompt hash keeps them disjoint.
pub fn generate_dataset(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::derived(seed, "dataset");
    let mut train = Vec::with_capacity(spec.train_examples);
    let mut eval = Vec::with_capacity(spec.eval_examples);
    let mut seen_eval = BTreeSet::new();
    let budget = 1000 * (spec.train_examples + spec.eval_examples).max(1);
    let mut draws = 0;
    while train.len() < spec.train_examples || eval.len() < spec.eval_examples {
        draws += 1;
        if draws > budget {
            return Err(Error::Spec(format!(
                "could not fill {} train / {} eval examples from the task space",
                spec.train_examples, spec.eval_examples
            )));
        }
        let ex = spec.sample(&mut rng);
        if spec.is_eval_prompt(&ex.prompt) {
            if eval.len() < spec.eval_examples && seen_eval.insert(ex.prompt.clone()) {
                eval.push(ex);
            }
        } else if train.len() < spec.train_examples {
            train.push(ex);
        }
    }
    Ok(Dataset { train, eval })
}
