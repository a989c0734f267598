//! Greedy similarity-driven skip selection, its brute-force oracle, FLOPs
//! accounting and selection-frequency aggregation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SkipSet};
use crate::probe::SimilarityList;

pub const DEFAULT_TAU: f64 = 0.95;
pub const ORACLE_MAX_BLOCKS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipPolicyConfig {
    pub tau: f64,
    pub n_max: usize,
    pub allow_consecutive: bool,
}

impl Default for SkipPolicyConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, n_max: 0, allow_consecutive: false }
    }
}

impl SkipPolicyConfig {
    /// Fixed-count policy: threshold disabled, exactly up to `k` blocks.
    pub fn fixed_k(k: usize, allow_consecutive: bool) -> Self {
        Self { tau: 0.0, n_max: k, allow_consecutive }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        // Values above 1 are allowed as an unreachable threshold.
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!("tau {} must be finite and ≥ 0", self.tau)));
        }
        if self.n_max > num_blocks {
            return Err(Error::Config(format!("n_max {} exceeds {num_blocks} blocks", self.n_max)));
        }
        Ok(())
    }
}

/// Visit pair indices by similarity, highest first, lower index on ties.
fn priority_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Greedy selection over blocks ranked by similarity.
///
/// A block is taken when its similarity reaches `tau` and, unless
/// `allow_consecutive`, neither neighbour was taken before it. Selection
/// stops once `n_max` blocks are taken. Entry `l` of `sims` describes block
/// `l`, so accepted indices are returned as block numbers directly.
pub fn select_skip_layers(sims: &SimilarityList, cfg: &SkipPolicyConfig) -> Result<SkipSet> {
    let n = sims.len();
    if n == 0 {
        return Err(Error::Input("empty similarity list".into()));
    }
    cfg.validate(n)?;
    let mut taken = vec![false; n];
    let mut count = 0;
    for i in priority_order(&sims.values) {
        if count == cfg.n_max {
            break;
        }
        if sims.values[i] < cfg.tau {
            // Everything after this in the order is lower still.
            break;
        }
        let blocked = !cfg.allow_consecutive && ((i > 0 && taken[i - 1]) || (i + 1 < n && taken[i + 1]));
        if !blocked {
            taken[i] = true;
            count += 1;
        }
    }
    Ok(taken.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i + 1).collect())
}

/// How the oracle treats equal similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Lower index first, as in [`select_skip_layers`].
    Pinned,
    /// Any order of tied entries; differing outcomes are reported.
    Unpinned,
}

/// Exhaustive re-derivation of the greedy semantics.
///
/// Among all eligible (≥ τ), admissible (non-adjacent unless allowed)
/// subsets of size ≤ `n_max`, the greedy pass returns the one that is
/// lexicographically largest under the visiting order. The oracle finds it
/// by enumerating every subset. With [`TieBreak::Unpinned`] it repeats this
/// for every visiting order consistent with the similarity ranking and
/// reports an ambiguity when those orders disagree.
pub fn oracle_select(sims: &SimilarityList, cfg: &SkipPolicyConfig, ties: TieBreak) -> Result<SkipSet> {
    let n = sims.len();
    if n == 0 || n > ORACLE_MAX_BLOCKS {
        return Err(Error::Input(format!("oracle handles 1..={ORACLE_MAX_BLOCKS} blocks, got {n}")));
    }
    cfg.validate(n)?;
    let orders = match ties {
        TieBreak::Pinned => vec![priority_order(&sims.values)],
        TieBreak::Unpinned => tie_consistent_orders(&sims.values),
    };
    let mut outcome: Option<u32> = None;
    for order in &orders {
        let best = lex_max_subset(&sims.values, cfg, order);
        match outcome {
            None => outcome = Some(best),
            Some(prev) if prev != best => {
                return Err(Error::Ambiguous(format!(
                    "tied similarities yield both {} and {}",
                    mask_to_set(prev),
                    mask_to_set(best)
                )));
            }
            _ => {}
        }
    }
    Ok(mask_to_set(outcome.expect("at least one order")))
}

fn mask_to_set(mask: u32) -> SkipSet {
    (0..32).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect()
}

fn lex_max_subset(values: &[f64], cfg: &SkipPolicyConfig, order: &[usize]) -> u32 {
    let n = values.len();
    // Membership read along the visiting order, first visited as the top
    // bit, so integer order is lexicographic order.
    let mut best: Option<(u32, u32)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > cfg.n_max {
            continue;
        }
        if (0..n).any(|i| mask >> i & 1 == 1 && values[i] < cfg.tau) {
            continue;
        }
        if !cfg.allow_consecutive && mask & (mask >> 1) != 0 {
            continue;
        }
        let key = order.iter().enumerate().fold(0u32, |k, (pos, &i)| k | (mask >> i & 1) << (n - 1 - pos));
        if best.is_none_or(|(k, _)| key > k) {
            best = Some((key, mask));
        }
    }
    best.map_or(0, |(_, m)| m)
}

/// Every permutation that lists higher similarities first.
fn tie_consistent_orders(values: &[f64]) -> Vec<Vec<usize>> {
    let base = priority_order(values);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in base {
        match groups.last_mut() {
            Some(g) if values[g[0]] == values[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut orders = vec![Vec::new()];
    for g in groups {
        let perms = permutations(&g);
        orders = orders
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                perms.iter().map(move |p| {
                    let mut o = prefix.clone();
                    o.extend_from_slice(p);
                    o
                })
            })
            .collect();
    }
    orders
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// Compute saved by a skip set, as a block fraction and under a detailed
/// per-component count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub num_blocks: usize,
    pub skipped: usize,
    /// `skipped / num_blocks`.
    pub block_fraction: f64,
    pub detailed: Option<DetailedFlops>,
}

/// Multiply-accumulates per token counted as 2 FLOPs each, bias adds,
/// normalization and activations ignored; attention uses `seq_len` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailedFlops {
    pub seq_len: usize,
    pub attention_per_block: u64,
    pub mlp_per_block: u64,
    pub head: u64,
    pub full_total: u64,
    pub skipped_total: u64,
    /// `1 − skipped_total / full_total`.
    pub reduction: f64,
}

pub fn flops_reduction(skip: &SkipSet, num_blocks: usize) -> Result<f64> {
    skip.validate(num_blocks)?;
    Ok(skip.len() as f64 / num_blocks as f64)
}

pub fn detailed_flops(cfg: &ModelConfig, seq_len: usize, skip: &SkipSet) -> Result<DetailedFlops> {
    skip.validate(cfg.num_blocks)?;
    let (n, d, f, v) = (seq_len as u64, cfg.d_model as u64, cfg.d_ff as u64, cfg.vocab_size as u64);
    // Q, K, V, O projections plus scores and weighted values.
    let attention = 2 * n * 4 * d * d + 2 * 2 * n * n * d;
    let mlp = 2 * n * 2 * d * f;
    let head = 2 * n * d * v;
    let per_block = attention + mlp;
    let full = cfg.num_blocks as u64 * per_block + head;
    let kept = (cfg.num_blocks - skip.len()) as u64 * per_block + head;
    Ok(DetailedFlops {
        seq_len,
        attention_per_block: attention,
        mlp_per_block: mlp,
        head,
        full_total: full,
        skipped_total: kept,
        reduction: 1.0 - kept as f64 / full as f64,
    })
}

pub fn flops_report(cfg: &ModelConfig, skip: &SkipSet, seq_len: Option<usize>) -> Result<FlopsReport> {
    let block_fraction = flops_reduction(skip, cfg.num_blocks)?;
    let detailed = seq_len.map(|n| detailed_flops(cfg, n, skip)).transpose()?;
    Ok(FlopsReport { num_blocks: cfg.num_blocks, skipped: skip.len(), block_fraction, detailed })
}

/// Per-block probability of selection across prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipDistribution {
    /// `probability[l - 1]` for block `l`.
    pub probability: Vec<f64>,
    pub num_sets: usize,
}

pub fn aggregate_skip_distribution(sets: &[SkipSet], num_blocks: usize) -> Result<SkipDistribution> {
    if sets.is_empty() {
        return Err(Error::Input("no skip sets to aggregate".into()));
    }
    let mut counts = vec![0usize; num_blocks];
    for s in sets {
        s.validate(num_blocks)?;
        for b in s.iter() {
            counts[b - 1] += 1;
        }
    }
    let probability = counts.iter().map(|&c| c as f64 / sets.len() as f64).collect();
    Ok(SkipDistribution { probability, num_sets: sets.len() })
}

impl SkipDistribution {
    /// Share of selections falling in blocks `1..=L/2`.
    pub fn first_half_share(&self) -> f64 {
        let total: f64 = self.probability.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let half = self.probability.len() / 2;
        self.probability[..half].iter().sum::<f64>() / total
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["block", "probability"])?;
        for (l, p) in self.probability.iter().enumerate() {
            out.write_record([(l + 1).to_string(), p.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One skip set for a whole corpus, chosen from the mean similarity list.
pub fn select_global(lists: &[SimilarityList], cfg: &SkipPolicyConfig) -> Result<SkipSet> {
    select_skip_layers(&SimilarityList::mean(lists)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sims(v: &[f64]) -> SimilarityList {
        SimilarityList::new(v.to_vec()).unwrap()
    }

    fn cfg(tau: f64, n_max: usize, allow_consecutive: bool) -> SkipPolicyConfig {
        SkipPolicyConfig { tau, n_max, allow_consecutive }
    }

    #[test]
    fn worked_example() {
        let s = sims(&[0.99, 0.97, 0.50, 0.98]);
        let c = cfg(0.95, 2, false);
        assert_eq!(select_skip_layers(&s, &c).unwrap(), SkipSet::new([1, 4]));
        assert_eq!(oracle_select(&s, &c, TieBreak::Pinned).unwrap(), SkipSet::new([1, 4]));
        let c = cfg(0.95, 3, true);
        assert_eq!(select_skip_layers(&s, &c).unwrap(), SkipSet::new([1, 2, 4]));
        assert_eq!(oracle_select(&s, &c, TieBreak::Pinned).unwrap(), SkipSet::new([1, 2, 4]));
    }

    #[test]
    fn below_threshold_is_empty() {
        let s = sims(&[0.5, 0.9, 0.94]);
        assert!(select_skip_layers(&s, &cfg(0.95, 3, false)).unwrap().is_empty());
        assert!(oracle_select(&s, &cfg(0.95, 3, false), TieBreak::Unpinned).unwrap().is_empty());
    }

    #[test]
    fn zero_n_max_selects_nothing() {
        assert!(select_skip_layers(&sims(&[1.0, 1.0]), &cfg(0.0, 0, true)).unwrap().is_empty());
    }

    #[test]
    fn n_max_above_depth_is_config_error() {
        assert!(matches!(select_skip_layers(&sims(&[1.0, 1.0]), &cfg(0.5, 3, false)), Err(Error::Config(_))));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let s = sims(&[0.97, 0.97, 0.97]);
        assert_eq!(select_skip_layers(&s, &cfg(0.95, 1, false)).unwrap(), SkipSet::new([1]));
        assert!(matches!(oracle_select(&s, &cfg(0.95, 1, false), TieBreak::Unpinned), Err(Error::Ambiguous(_))));
        let apart = sims(&[0.97, 0.5, 0.97]);
        assert_eq!(oracle_select(&apart, &cfg(0.95, 2, false), TieBreak::Unpinned).unwrap(), SkipSet::new([1, 3]));
    }

    #[test]
    fn flops_fractions() {
        let six: SkipSet = (1..=6).collect();
        assert_eq!(flops_reduction(&six, 32).unwrap(), 0.1875);
        assert!((flops_reduction(&SkipSet::new([3, 9]), 28).unwrap() * 100.0 - 7.14).abs() < 0.005);
        let eight: SkipSet = (1..=8).collect();
        assert_eq!(flops_reduction(&eight, 32).unwrap(), 0.25);
        assert!(flops_reduction(&SkipSet::new([5]), 4).is_err());
    }

    #[test]
    fn detailed_flops_counts() {
        let cfg = ModelConfig {
            num_blocks: 2,
            d_model: 4,
            num_heads: 1,
            d_ff: 8,
            vocab_size: 5,
            max_seq_len: 8,
            ..Default::default()
        };
        let f = detailed_flops(&cfg, 3, &SkipSet::new([2])).unwrap();
        assert_eq!(f.attention_per_block, 2 * 3 * 4 * 16 + 4 * 9 * 4);
        assert_eq!(f.mlp_per_block, 2 * 3 * 2 * 32);
        assert_eq!(f.head, 2 * 3 * 4 * 5);
        assert_eq!(f.full_total, 2 * (528 + 384) + 120);
        assert_eq!(f.skipped_total, 528 + 384 + 120);
        assert!(f.reduction < 0.5);
    }

    #[test]
    fn distribution_counts() {
        let d = aggregate_skip_distribution(&[SkipSet::new([1, 4])], 8).unwrap();
        assert_eq!(d.probability, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = aggregate_skip_distribution(&[SkipSet::new([1, 4]), SkipSet::new([2, 4])], 8).unwrap();
        assert_eq!(&d.probability[..4], &[0.5, 0.5, 0.0, 1.0]);
        assert_eq!(d.first_half_share(), 1.0);
        assert!(aggregate_skip_distribution(&[], 8).is_err());
    }

    #[test]
    fn global_mode_averages_lists() {
        let a = sims(&[1.0, 0.9, 0.5]);
        let b = sims(&[0.9, 1.0, 0.5]);
        let s = select_global(&[a, b], &cfg(0.95, 1, false)).unwrap();
        assert_eq!(s, SkipSet::new([1]));
    }

    const GRID: [f64; 5] = [0.90, 0.94, 0.95, 0.96, 1.0];

    fn decode(mut code: usize, len: usize) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let v = GRID[code % GRID.len()];
                code /= GRID.len();
                v
            })
            .collect()
    }

    #[test]
    fn greedy_matches_oracle_on_small_grid() {
        // Exhaustive up to length 5; longer vectors are sampled below.
        for len in 1..=5 {
            for code in 0..GRID.len().pow(len as u32) {
                let s = sims(&decode(code, len));
                for n_max in 0..=len {
                    for allow in [false, true] {
                        let c = cfg(0.95, n_max, allow);
                        assert_eq!(
                            select_skip_layers(&s, &c).unwrap(),
                            oracle_select(&s, &c, TieBreak::Pinned).unwrap(),
                            "{:?} {c:?}",
                            s.values
                        );
                    }
                }
            }
        }
    }

    fn grid_sims(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop::sample::select(GRID.to_vec()), 1..=max_len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn greedy_matches_oracle_up_to_eight(v in grid_sims(8), n in 0usize..9, allow: bool) {
            let s = sims(&v);
            let c = cfg(0.95, n.min(v.len()), allow);
            prop_assert_eq!(select_skip_layers(&s, &c).unwrap(), oracle_select(&s, &c, TieBreak::Pinned).unwrap());
        }

        #[test]
        fn selection_invariants(v in prop::collection::vec(-1.0f64..=1.0, 1..16), tau in 0.0f64..1.0, n in 0usize..16, allow: bool) {
            let s = sims(&v);
            let c = cfg(tau, n.min(v.len()), allow);
            let out = select_skip_layers(&s, &c).unwrap();
            prop_assert!(out.len() <= c.n_max);
            prop_assert!(out.iter().all(|b| s.block(b) >= tau));
            if !allow {
                prop_assert!(!out.has_adjacent());
            }
        }

        #[test]
        fn raising_tau_never_adds_blocks(v in prop::collection::vec(0.0f64..=1.0, 1..16), t1 in 0.0f64..1.0, dt in 0.0f64..0.5, n in 0usize..16, allow: bool) {
            let s = sims(&v);
            let n = n.min(v.len());
            let lo = select_skip_layers(&s, &cfg(t1, n, allow)).unwrap();
            let hi = select_skip_layers(&s, &cfg((t1 + dt).min(1.0), n, allow)).unwrap();
            prop_assert!(hi.is_subset(&lo));
        }

        #[test]
        fn flops_is_linear(k in 0usize..=32) {
            let s: SkipSet = (1..=k).collect();
            prop_assert_eq!(flops_reduction(&s, 32).unwrap(), k as f64 / 32.0);
        }
    }
}
