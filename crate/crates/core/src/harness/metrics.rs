use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::GenerationResult;

/// Score relative to the full-depth baseline, as a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    Percent(f64),
    /// The baseline scored zero.
    Undefined,
}

impl Retention {
    pub fn value(self) -> Option<f64> {
        match self {
            Retention::Percent(v) => Some(v),
            Retention::Undefined => None,
        }
    }

    /// True when defined and under `threshold` percent.
    pub fn below(self, threshold: f64) -> bool {
        self.value().is_some_and(|v| v < threshold)
    }
}

impl fmt::Display for Retention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Retention::Percent(v) => write!(f, "{v}"),
            Retention::Undefined => f.write_str("undefined"),
        }
    }
}

/// `100 · score / baseline`, never clamped.
pub fn retention(score: f64, baseline: f64) -> Retention {
    if baseline > 0.0 {
        Retention::Percent(if score == baseline { 100.0 } else { 100.0 * score / baseline })
    } else {
        Retention::Undefined
    }
}

/// Fraction of prompts whose skipped generation equals the full-depth one.
pub fn equivalence_rate(skipped: &[GenerationResult], full: &[GenerationResult]) -> Result<f64> {
    if skipped.len() != full.len() || full.is_empty() {
        return Err(Error::Input(format!(
            "{} skipped results paired with {} full-depth ones",
            skipped.len(),
            full.len()
        )));
    }
    let mut same = 0;
    for (s, f) in skipped.iter().zip(full) {
        if s.prompt != f.prompt {
            return Err(Error::Input("results are not paired by prompt".into()));
        }
        same += usize::from(s.tokens == f.tokens);
    }
    Ok(same as f64 / full.len() as f64)
}
