//! Representation-similarity and magnitude statistics over hidden-state traces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HiddenStateTrace;
use crate::nn::ops::cosine_unchecked;
use crate::nn::{l2_norm, Tensor};

pub const DEFAULT_SINK_RATIO: f64 = 50.0;

/// Token positions a statistic is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "window", content = "prompt_len", rename_all = "kebab-case")]
pub enum TokenWindow {
    All,
    /// The first `p` positions.
    Prompt(usize),
    /// Every position from `p` on.
    Response(usize),
}

impl TokenWindow {
    fn range(self, seq_len: usize) -> Result<std::ops::Range<usize>> {
        let r = match self {
            TokenWindow::All => 0..seq_len,
            TokenWindow::Prompt(p) => {
                if p == 0 || p > seq_len {
                    return Err(Error::Input(format!("prompt length {p} invalid for {seq_len} tokens")));
                }
                0..p
            }
            TokenWindow::Response(p) => p.min(seq_len)..seq_len,
        };
        if r.is_empty() {
            return Err(Error::Input(format!("{self:?} selects no tokens of {seq_len}")));
        }
        Ok(r)
    }
}

fn check_trace(trace: &HiddenStateTrace) -> Result<()> {
    if trace.states.len() < 2 {
        return Err(Error::Input("trace needs the embedding state and at least one block".into()));
    }
    let shape = trace.states[0].shape();
    if shape.len() != 2 || trace.states.iter().any(|s| s.shape() != shape) {
        return Err(Error::Input("trace states differ in shape".into()));
    }
    Ok(())
}

/// Entry `l` (1-based) is the mean over the window of cos(H₍ₗ₋₁₎[i], Hₗ[i]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityList {
    pub values: Vec<f64>,
}

impl SimilarityList {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Input("similarities must lie in [-1, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Similarity of block `l`, 1-based.
    pub fn block(&self, l: usize) -> f64 {
        self.values[l - 1]
    }

    /// Element-wise mean of several lists of equal length.
    pub fn mean(lists: &[SimilarityList]) -> Result<SimilarityList> {
        let first = lists.first().ok_or_else(|| Error::Input("no similarity lists to average".into()))?;
        if lists.iter().any(|s| s.len() != first.len()) {
            return Err(Error::Input("similarity lists differ in length".into()));
        }
        let n = lists.len() as f64;
        let values =
            (0..first.len()).map(|l| (lists.iter().map(|s| s.values[l]).sum::<f64>() / n).clamp(-1.0, 1.0)).collect();
        Ok(SimilarityList { values })
    }
}

pub fn layerwise_similarity(trace: &HiddenStateTrace, window: TokenWindow) -> Result<SimilarityList> {
    check_trace(trace)?;
    let range = window.range(trace.seq_len())?;
    let n = range.len() as f64;
    let values = trace
        .states
        .windows(2)
        .map(|pair| {
            let total: f64 = range.clone().map(|i| cosine_unchecked(pair[0].row(i), pair[1].row(i))).sum();
            (total / n).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(SimilarityList { values })
}

/// Layer × denoising-step similarities; one column per trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStepMatrix {
    /// `cells[l - 1][t]` is block `l` at the `t`-th trace.
    pub cells: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
}

impl LayerStepMatrix {
    pub fn from_traces(traces: &[HiddenStateTrace], window: TokenWindow) -> Result<Self> {
        let lists = traces.iter().map(|t| layerwise_similarity(t, window)).collect::<Result<Vec<_>>>()?;
        let layers = lists.first().ok_or_else(|| Error::Input("no traces".into()))?.len();
        if lists.iter().any(|s| s.len() != layers) {
            return Err(Error::Input("traces differ in depth".into()));
        }
        let cells = (0..layers).map(|l| lists.iter().map(|s| s.values[l]).collect()).collect();
        Ok(Self { cells, steps: traces.iter().map(|t| t.step).collect() })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string()];
        header.extend(self.steps.iter().map(|s| format!("step_{s}")));
        out.write_record(&header)?;
        for (l, row) in self.cells.iter().enumerate() {
            let mut rec = vec![(l + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// cos(Hₗ[i], Hₗ[i+1]) for consecutive positions at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSimilaritySeries {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl TokenSimilaritySeries {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Series at state `layer` (0 is the embedding output).
pub fn tokenwise_similarity(trace: &HiddenStateTrace, layer: usize) -> Result<TokenSimilaritySeries> {
    check_trace(trace)?;
    let h = trace
        .states
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} beyond depth {}", trace.num_blocks())))?;
    if h.rows() < 2 {
        return Err(Error::Input("token-wise similarity needs at least two tokens".into()));
    }
    let values = (0..h.rows() - 1).map(|i| cosine_unchecked(h.row(i), h.row(i + 1))).collect();
    Ok(TokenSimilaritySeries { layer, values })
}

fn windowed_token_mean(trace: &HiddenStateTrace, layer: usize, window: TokenWindow) -> Result<f64> {
    let range = window.range(trace.seq_len())?;
    if range.len() < 2 {
        return Err(Error::Input(format!("{window:?} holds fewer than two tokens")));
    }
    let series = tokenwise_similarity(trace, layer)?;
    Ok(series.values[range.start..range.end - 1].iter().sum::<f64>() / (range.len() - 1) as f64)
}

/// Per-block mean and population standard deviation, across traces, of
/// the windowed token-wise similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn avg_tokenwise_profile(traces: &[HiddenStateTrace], window: TokenWindow) -> Result<AvgProfile> {
    let first = traces.first().ok_or_else(|| Error::Input("no traces".into()))?;
    let layers = first.num_blocks();
    if traces.iter().any(|t| t.num_blocks() != layers) {
        return Err(Error::Input("traces differ in depth".into()));
    }
    let mut mean = Vec::with_capacity(layers);
    let mut std = Vec::with_capacity(layers);
    for l in 1..=layers {
        let xs = traces.iter().map(|t| windowed_token_mean(t, l, window)).collect::<Result<Vec<_>>>()?;
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(AvgProfile { mean, std })
}

impl AvgProfile {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "mean", "std"])?;
        for (l, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.write_record([(l + 1).to_string(), m.to_string(), s.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `1 − mean(series)`, in `[0, 2]`.
pub fn recency_bias_score(series: &TokenSimilaritySeries) -> Result<f64> {
    if series.values.is_empty() {
        return Err(Error::Input("empty token similarity series".into()));
    }
    Ok(1.0 - series.mean())
}

/// Euclidean distance between two per-layer profiles.
pub fn profile_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("profiles of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Token ℓ2-norm statistics per state, H₀ first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub max: Vec<f64>,
    /// `sinks[l][i]` marks position `i` at state `l`.
    pub sinks: Vec<Vec<bool>>,
    pub sink_ratio: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Position `i` is a sink at state `l` iff its norm is positive and at
/// least `sink_ratio` times the median norm at that state.
pub fn norm_profile(trace: &HiddenStateTrace, sink_ratio: f64) -> Result<NormProfile> {
    check_trace(trace)?;
    if !(sink_ratio > 1.0) {
        return Err(Error::Config(format!("sink ratio {sink_ratio} must exceed 1")));
    }
    let mut p = NormProfile { mean: vec![], median: vec![], max: vec![], sinks: vec![], sink_ratio };
    for h in &trace.states {
        let norms: Vec<f64> = (0..h.rows()).map(|i| l2_norm(h.row(i))).collect();
        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let med = median(&sorted);
        p.mean.push(norms.iter().sum::<f64>() / norms.len() as f64);
        p.median.push(med);
        p.max.push(*sorted.last().expect("non-empty"));
        p.sinks.push(norms.iter().map(|&n| n > 0.0 && n >= sink_ratio * med).collect());
    }
    Ok(p)
}

impl NormProfile {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "mean", "median", "max", "sink_positions"])?;
        for l in 0..self.mean.len() {
            let sinks: Vec<String> =
                self.sinks[l].iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i.to_string()).collect();
            out.write_record([
                l.to_string(),
                self.mean[l].to_string(),
                self.median[l].to_string(),
                self.max[l].to_string(),
                sinks.join(" "),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Layer × position token-wise similarities, one row per state.
pub fn write_token_series_csv<W: Write>(trace: &HiddenStateTrace, w: W) -> Result<()> {
    check_trace(trace)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["layer".to_string()];
    header.extend((0..trace.seq_len().saturating_sub(1)).map(|i| format!("pos_{i}")));
    out.write_record(&header)?;
    for l in 0..trace.states.len() {
        let s = tokenwise_similarity(trace, l)?;
        let mut rec = vec![l.to_string()];
        rec.extend(s.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// A trace from explicit per-state matrices; handy for synthetic checks.
pub fn trace_from_states(states: Vec<Tensor>) -> HiddenStateTrace {
    HiddenStateTrace { states, step: 0 }
}
