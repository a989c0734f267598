use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::{retention, Retention};
use crate::harness::run::{
    read_json, regime_dir, write_json, PolicyOutcome, PromptOutcome, RegimeEval, RegimeProbe, RunManifest, SweepPolicy,
};
use crate::inference::exact_match_rate;
use crate::model::{Regime, SkipSet};
use crate::probe::profile_distance;
use crate::skip::aggregate_skip_distribution;

pub const RETENTION_CSV: &str = "retention.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SKIP_DISTRIBUTION_CSV: &str = "skip-distribution.csv";
pub const FLOPS_RETENTION_CSV: &str = "flops-retention.csv";
pub const RECENCY_CSV: &str = "recency.csv";
pub const PROFILE_DISTANCE_CSV: &str = "profile-distance.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// The skip count the directional comparison is made at.
pub const DIRECTIONAL_K: usize = 2;

/// Either one seed or the mean over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedKey {
    Seed(u64),
    Mean,
}

impl std::fmt::Display for SeedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedKey::Seed(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub seed: SeedKey,
    pub regime: Regime,
    pub benchmark: String,
    pub policy: SweepPolicy,
    pub score: f64,
    pub baseline: f64,
    pub retention: Retention,
    pub below_threshold: bool,
    pub equivalence_rate: f64,
    pub mean_token_kl: f64,
    /// Mean over prompts of `|skip| / L`.
    pub flops_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: SeedKey,
    pub regime: Regime,
    pub benchmark: String,
    pub layers_skipped: usize,
    pub not_allowed: Retention,
    pub allowed: Retention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDistance {
    pub seed: u64,
    pub to_native_ar: f64,
    pub to_native_diffusion: f64,
}

impl SeedDistance {
    pub fn closer_to_ar(&self) -> bool {
        self.to_native_ar < self.to_native_diffusion
    }
}

/// The directional comparisons: diffusion retains more under skipping than
/// AR, and the AR-initialized model's token-wise profile stays nearer AR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalSummary {
    pub k: usize,
    pub per_seed_retention: BTreeMap<Regime, Vec<(u64, Retention)>>,
    pub mean_retention: BTreeMap<Regime, Retention>,
    /// `None` when either mean is undefined or missing.
    pub diffusion_exceeds_ar: Option<bool>,
    pub distances: Vec<SeedDistance>,
    pub seeds_closer_to_ar: usize,
    /// At least two thirds of the seeds with distances are closer to AR.
    pub initialization_bias: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub retention: Vec<RetentionRow>,
    pub ablation: Vec<AblationRow>,
    pub summary: DirectionalSummary,
}

impl Report {
    pub fn retention_at(&self, seed: SeedKey, regime: Regime, policy: &SweepPolicy) -> Option<&RetentionRow> {
        self.retention.iter().find(|r| r.seed == seed && r.regime == regime && r.policy == *policy)
    }
}

fn score(prompts: &[PromptOutcome]) -> f64 {
    exact_match_rate(prompts.iter().filter(|p| p.correct).count(), prompts.len())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    s / n as f64
}

/// Mean of per-seed retentions; undefined if any seed is.
fn mean_retention(rs: &[Retention]) -> Retention {
    let vals: Option<Vec<f64>> = rs.iter().map(|r| r.value()).collect();
    match vals {
        Some(v) if !v.is_empty() => {
            let m = mean(v.iter().copied());
            // Keeps an all-100 column exactly 100 regardless of rounding.
            if v.iter().all(|&x| x == v[0]) {
                Retention::Percent(v[0])
            } else {
                Retention::Percent(m)
            }
        }
        _ => Retention::Undefined,
    }
}

fn policy_row(eval: &RegimeEval, p: &PolicyOutcome, threshold: f64) -> RetentionRow {
    let baseline = score(&eval.full);
    let s = score(&p.prompts);
    let r = retention(s, baseline);
    RetentionRow {
        seed: SeedKey::Seed(eval.seed),
        regime: eval.regime,
        benchmark: eval.benchmark.clone(),
        policy: p.policy,
        score: s,
        baseline,
        retention: r,
        below_threshold: r.below(threshold),
        equivalence_rate: mean(p.prompts.iter().map(|o| f64::from(u8::from(o.equivalent)))),
        mean_token_kl: mean(p.prompts.iter().map(|o| o.token_kl)),
        flops_reduction: mean(p.prompts.iter().map(|o| o.skip.len() as f64 / eval.num_blocks as f64)),
    }
}

fn mean_rows(rows: &[RetentionRow], threshold: f64) -> Vec<RetentionRow> {
    let mut groups: BTreeMap<(Regime, String, String), Vec<&RetentionRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.regime, r.benchmark.clone(), serde_json::to_string(&r.policy).expect("policy serializes"));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let first = g[0];
            let ret = mean_retention(&g.iter().map(|r| r.retention).collect::<Vec<_>>());
            RetentionRow {
                seed: SeedKey::Mean,
                regime: first.regime,
                benchmark: first.benchmark.clone(),
                policy: first.policy,
                score: mean(g.iter().map(|r| r.score)),
                baseline: mean(g.iter().map(|r| r.baseline)),
                retention: ret,
                below_threshold: ret.below(threshold),
                equivalence_rate: mean(g.iter().map(|r| r.equivalence_rate)),
                mean_token_kl: mean(g.iter().map(|r| r.mean_token_kl)),
                flops_reduction: mean(g.iter().map(|r| r.flops_reduction)),
            }
        })
        .collect()
}

fn load_all<T: for<'de> Deserialize<'de>>(run_dir: &Path, m: &RunManifest, file: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for &seed in &m.seeds {
        for &regime in &m.config.regimes {
            let path = regime_dir(run_dir, seed, regime).join(file);
            if path.exists() {
                out.push(read_json(&path)?);
            }
        }
    }
    Ok(out)
}

/// Rebuilds every table from the stored per-regime JSON files.
pub fn build_report(run_dir: &Path) -> Result<Report> {
    let manifest = RunManifest::load(run_dir)?;
    let evals: Vec<RegimeEval> = load_all(run_dir, &manifest, "eval.json")?;
    let probes: Vec<RegimeProbe> = load_all(run_dir, &manifest, "probe.json")?;
    let threshold = manifest.config.skip.retention_threshold;

    let per_seed: Vec<RetentionRow> =
        evals.iter().flat_map(|e| e.policies.iter().map(|p| policy_row(e, p, threshold))).collect();
    let mut retention_rows = per_seed.clone();
    retention_rows.extend(mean_rows(&per_seed, threshold));

    let mut ablation = Vec::new();
    for r in &retention_rows {
        let SweepPolicy::FixedK { k, allow_consecutive: false } = r.policy else { continue };
        if !manifest.config.skip.ablation_k.contains(&k) {
            continue;
        }
        let allowed = SweepPolicy::FixedK { k, allow_consecutive: true };
        if let Some(a) = retention_rows.iter().find(|x| x.seed == r.seed && x.regime == r.regime && x.policy == allowed)
        {
            ablation.push(AblationRow {
                seed: r.seed,
                regime: r.regime,
                benchmark: r.benchmark.clone(),
                layers_skipped: k,
                not_allowed: r.retention,
                allowed: a.retention,
            });
        }
    }

    let summary = directional_summary(&manifest, &retention_rows, &probes)?;
    Ok(Report { retention: retention_rows, ablation, summary })
}

fn directional_summary(m: &RunManifest, rows: &[RetentionRow], probes: &[RegimeProbe]) -> Result<DirectionalSummary> {
    let k = DIRECTIONAL_K;
    let policy = SweepPolicy::FixedK { k, allow_consecutive: m.config.skip.allow_consecutive };
    let mut per_seed_retention = BTreeMap::new();
    let mut mean_ret = BTreeMap::new();
    for &regime in &m.config.regimes {
        let seeds: Vec<(u64, Retention)> = rows
            .iter()
            .filter(|r| r.regime == regime && r.policy == policy)
            .filter_map(|r| match r.seed {
                SeedKey::Seed(s) => Some((s, r.retention)),
                SeedKey::Mean => None,
            })
            .collect();
        if let Some(mr) = rows.iter().find(|r| r.regime == regime && r.policy == policy && r.seed == SeedKey::Mean) {
            mean_ret.insert(regime, mr.retention);
        }
        per_seed_retention.insert(regime, seeds);
    }
    let diffusion_exceeds_ar = match (
        mean_ret.get(&Regime::NativeDiffusion).and_then(|r| r.value()),
        mean_ret.get(&Regime::NativeAr).and_then(|r| r.value()),
    ) {
        (Some(d), Some(a)) => Some(d > a),
        _ => None,
    };

    let mut distances = Vec::new();
    for &seed in &m.seeds {
        let find = |regime| probes.iter().find(|p| p.seed == seed && p.regime == regime);
        if let (Some(init), Some(ar), Some(diff)) =
            (find(Regime::ArInitDiffusion), find(Regime::NativeAr), find(Regime::NativeDiffusion))
        {
            distances.push(SeedDistance {
                seed,
                to_native_ar: profile_distance(&init.profile.mean, &ar.profile.mean)?,
                to_native_diffusion: profile_distance(&init.profile.mean, &diff.profile.mean)?,
            });
        }
    }
    let seeds_closer_to_ar = distances.iter().filter(|d| d.closer_to_ar()).count();
    let initialization_bias = (!distances.is_empty()).then(|| 3 * seeds_closer_to_ar >= 2 * distances.len());
    Ok(DirectionalSummary {
        k,
        per_seed_retention,
        mean_retention: mean_ret,
        diffusion_exceeds_ar,
        distances,
        seeds_closer_to_ar,
        initialization_bias,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?)))
}

fn policy_cells(p: &SweepPolicy) -> [String; 4] {
    let c = p.skip_config();
    [
        p.label(),
        p.fixed_k().map(|k| k.to_string()).unwrap_or_default(),
        match p {
            SweepPolicy::Threshold { tau, .. } => tau.to_string(),
            SweepPolicy::FixedK { .. } => String::new(),
        },
        c.allow_consecutive.to_string(),
    ]
}

fn write_retention(path: &Path, rows: &[RetentionRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "seed",
        "regime",
        "benchmark",
        "policy",
        "k",
        "tau",
        "allow_consecutive",
        "score",
        "baseline",
        "retention",
        "below_threshold",
        "equivalence_rate",
        "mean_token_kl",
        "flops_reduction",
    ])?;
    for r in rows {
        let mut rec = vec![r.seed.to_string(), r.regime.to_string(), r.benchmark.clone()];
        rec.extend(policy_cells(&r.policy));
        rec.extend([
            r.score.to_string(),
            r.baseline.to_string(),
            r.retention.to_string(),
            r.below_threshold.to_string(),
            r.equivalence_rate.to_string(),
            r.mean_token_kl.to_string(),
            r.flops_reduction.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "regime", "benchmark", "layers_skipped", "not_allowed", "allowed"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.regime.to_string(),
            r.benchmark.clone(),
            r.layers_skipped.to_string(),
            r.not_allowed.to_string(),
            r.allowed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_flops_retention(path: &Path, rows: &[RetentionRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "regime", "benchmark", "policy", "flops_reduction", "retention"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.regime.to_string(),
            r.benchmark.clone(),
            r.policy.label(),
            r.flops_reduction.to_string(),
            r.retention.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_skip_distribution(path: &Path, evals: &[RegimeEval]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "regime", "policy", "allow_consecutive", "block", "probability"])?;
    let mut pooled: BTreeMap<(Regime, String), (SweepPolicy, usize, Vec<SkipSet>)> = BTreeMap::new();
    let mut order = Vec::new();
    let emit = |w: &mut csv::Writer<_>, seed: String, regime: Regime, p: &SweepPolicy, l: usize, sets: &[SkipSet]| {
        let d = aggregate_skip_distribution(sets, l)?;
        for (b, prob) in d.probability.iter().enumerate() {
            w.write_record([
                seed.clone(),
                regime.to_string(),
                p.label(),
                p.allow_consecutive().to_string(),
                (b + 1).to_string(),
                prob.to_string(),
            ])?;
        }
        Ok::<_, Error>(())
    };
    for e in evals {
        for p in &e.policies {
            if p.policy.fixed_k() == Some(0) {
                continue;
            }
            let sets: Vec<SkipSet> = p.prompts.iter().map(|o| o.skip.clone()).collect();
            emit(&mut w, e.seed.to_string(), e.regime, &p.policy, e.num_blocks, &sets)?;
            let key = (e.regime, serde_json::to_string(&p.policy)?);
            if !pooled.contains_key(&key) {
                order.push(key.clone());
            }
            pooled.entry(key).or_insert_with(|| (p.policy, e.num_blocks, Vec::new())).2.extend(sets);
        }
    }
    for key in order {
        let (p, l, sets) = &pooled[&key];
        emit(&mut w, "all".into(), key.0, p, *l, sets)?;
    }
    w.flush()?;
    Ok(())
}

fn write_recency(path: &Path, probes: &[RegimeProbe]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "regime", "block", "token_similarity", "std", "recency_bias"])?;
    for p in probes {
        for (l, ((m, s), r)) in p.profile.mean.iter().zip(&p.profile.std).zip(&p.recency).enumerate() {
            w.write_record([
                p.seed.to_string(),
                p.regime.to_string(),
                (l + 1).to_string(),
                m.to_string(),
                s.to_string(),
                r.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_profile_distance(path: &Path, probes: &[RegimeProbe]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "from", "to", "distance"])?;
    for (i, a) in probes.iter().enumerate() {
        for b in &probes[i + 1..] {
            if a.seed == b.seed {
                w.write_record([
                    a.seed.to_string(),
                    a.regime.to_string(),
                    b.regime.to_string(),
                    profile_distance(&a.profile.mean, &b.profile.mean)?.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_probe_files(run_dir: &Path, p: &RegimeProbe) -> Result<()> {
    let dir = regime_dir(run_dir, p.seed, p.regime);
    let file = |name: &str| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
    p.layer_sim.write_csv(file("layer-sim.csv")?)?;
    p.profile.write_csv(file("avg-profile.csv")?)?;
    p.norms.write_csv(file("norm-profile.csv")?)?;
    let mut w = csv::Writer::from_writer(file("token-sim.csv")?);
    let width = p.token_sim.first().map_or(0, Vec::len);
    let mut header = vec!["layer".to_string()];
    header.extend((0..width).map(|i| format!("pos_{i}")));
    w.write_record(&header)?;
    for (l, row) in p.token_sim.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every table and figure-data file under `run_dir`.
pub fn write_reports(run_dir: &Path) -> Result<Report> {
    let manifest = RunManifest::load(run_dir)?;
    let evals: Vec<RegimeEval> = load_all(run_dir, &manifest, "eval.json")?;
    let probes: Vec<RegimeProbe> = load_all(run_dir, &manifest, "probe.json")?;
    for p in &probes {
        write_probe_files(run_dir, p)?;
    }
    let report = build_report(run_dir)?;
    write_retention(&run_dir.join(RETENTION_CSV), &report.retention)?;
    write_ablation(&run_dir.join(ABLATION_CSV), &report.ablation)?;
    write_flops_retention(&run_dir.join(FLOPS_RETENTION_CSV), &report.retention)?;
    write_skip_distribution(&run_dir.join(SKIP_DISTRIBUTION_CSV), &evals)?;
    write_recency(&run_dir.join(RECENCY_CSV), &probes)?;
    write_profile_distance(&run_dir.join(PROFILE_DISTANCE_CSV), &probes)?;
    write_json(&run_dir.join(SUMMARY_JSON), &report.summary)?;
    Ok(report)
}
