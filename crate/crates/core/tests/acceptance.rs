//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! The desk-scale experiment behind checks 8 and 10 takes tens of minutes.
//! Set `SKIPLAB_DESK_RUN` to an existing run directory to reuse its results.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use skiplab::harness::{
    build_report, run_experiment, ExperimentConfig, Report, Retention, RunManifest, RunOptions, SeedKey, ABLATION_CSV,
};
use skiplab::model::{AttentionMode, Regime, SkipSet};
use skiplab::nn::{SeededRng, Tensor};
use skiplab::probe::SimilarityList;
use skiplab::probe::{
    avg_tokenwise_profile, layerwise_similarity, recency_bias_score, tokenwise_similarity, trace_from_states,
    TokenWindow,
};
use skiplab::skip::{flops_reduction, oracle_select, select_skip_layers, SkipPolicyConfig, TieBreak, DEFAULT_TAU};
use skiplab::training::Objective;

type Check = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn selector_matches_oracle() -> Check {
    let start = Instant::now();
    let alphabet = [0.90, 0.94, 0.95, 0.96, 1.0];
    let mut cases = 0usize;
    for len in 1..=8usize {
        let total = alphabet.len().pow(len as u32);
        for code in 0..total {
            let mut c = code;
            let values: Vec<f64> = (0..len)
                .map(|_| {
                    let v = alphabet[c % alphabet.len()];
                    c /= alphabet.len();
                    v
                })
                .collect();
            let sims = SimilarityList::new(values).unwrap();
            for allow in [false, true] {
                for n_max in 0..=4usize.min(len) {
                    let cfg = SkipPolicyConfig { tau: DEFAULT_TAU, n_max, allow_consecutive: allow };
                    let greedy = select_skip_layers(&sims, &cfg).map_err(|e| e.to_string())?;
                    let oracle = oracle_select(&sims, &cfg, TieBreak::Pinned).map_err(|e| e.to_string())?;
                    if greedy != oracle {
                        return Err(format!("{:?} {cfg:?}: greedy {greedy} vs oracle {oracle}", sims.values));
                    }
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("{cases} cases took {secs:.1}s"));
    }
    Ok(format!("{cases} cases agree in {secs:.1}s"))
}

fn flops_numbers() -> Check {
    let pct = |k: usize, l: usize| 100.0 * flops_reduction(&SkipSet::new(1..=k), l).unwrap();
    let (a, b, c) = (pct(6, 32), pct(2, 28), pct(8, 32));
    if a != 18.75 || (b - 7.14).abs() > 0.01 || c != 25.0 {
        return Err(format!("got {a}%, {b}%, {c}%"));
    }
    Ok(format!("{a}%, {b:.2}%, {c}%"))
}

fn non_adjacency() -> Check {
    let mut rng = SeededRng::new(2024);
    for trial in 0..10_000 {
        let len = 1 + rng.index(16);
        // Coarse values so ties are common.
        let values: Vec<f64> = (0..len).map(|_| 0.8 + 0.02 * rng.index(11) as f64).collect();
        let cfg =
            SkipPolicyConfig { tau: 0.8 + 0.2 * rng.uniform(), n_max: rng.index(len + 1), allow_consecutive: false };
        let skip = select_skip_layers(&SimilarityList::new(values.clone()).unwrap(), &cfg).unwrap();
        if skip.has_adjacent() || skip.len() > cfg.n_max {
            return Err(format!("trial {trial}: {values:?} {cfg:?} gave {skip}"));
        }
    }
    Ok("10000 random inputs".into())
}

fn bypass_exactness() -> Check {
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        for seed in 0..2 {
            let ck = common::trained(mode, seed, 60);
            common::check_bypass(&ck, 500 + seed, 40)?;
        }
    }
    Ok("160 single-block skips on 4 trained models".into())
}

fn gradient_check() -> Check {
    let mut parts = Vec::new();
    for (name, obj) in [("ar", Objective::ArNtp), ("diffusion", Objective::MaskedDiffusion)] {
        let (err, at) = common::max_gradient_error(obj);
        if !(err < 1e-4) {
            return Err(format!("{name}: {err:e} at {at}"));
        }
        parts.push(format!("{name} max rel err {err:.2e}"));
    }
    Ok(parts.join(", "))
}

fn decode_invariants() -> Check {
    let ck = common::trained(AttentionMode::Bidirectional, 3, 60);
    common::check_decode_invariants(&ck)?;
    Ok("T in {1,2,4,8} x length 1..=16".into())
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = ExperimentConfig::load(configs_dir().join("smoke.toml")).map_err(|e| e.to_string())?;
        cfg.out_dir = tmp.path().join(name);
        let res = run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
        if !res.manifest.failed_stages().is_empty() {
            return Err(format!("failed stages: {:?}", res.manifest.failed_stages()));
        }
        runs.push(csv_files(&cfg.out_dir));
    }
    if runs[0] != runs[1] {
        let differing: Vec<_> = runs[0].iter().filter(|(k, v)| runs[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
        return Err(format!("differing files: {differing:?}"));
    }
    Ok(format!("{} CSV files identical across two runs", runs[0].len()))
}

fn fmt_ret(r: &Retention) -> String {
    match r.value() {
        Some(v) => format!("{v:.1}"),
        None => "undefined".into(),
    }
}

fn directional(report: &Report) -> Check {
    let s = &report.summary;
    let per_seed = |r: Regime| {
        s.per_seed_retention.get(&r).map(|v| v.iter().map(|(_, x)| fmt_ret(x)).collect::<Vec<_>>().join("/"))
    };
    let mean = |r: Regime| s.mean_retention.get(&r).map(fmt_ret).unwrap_or_default();
    let dists: Vec<String> = s
        .distances
        .iter()
        .map(|d| format!("seed {}: {:.4} vs {:.4}", d.seed, d.to_native_ar, d.to_native_diffusion))
        .collect();
    let detail = format!(
        "(a) k={} retention diffusion {} [{}] vs ar {} [{}]; (b) ar-init closer to ar in {}/{} seeds ({})",
        s.k,
        mean(Regime::NativeDiffusion),
        per_seed(Regime::NativeDiffusion).unwrap_or_default(),
        mean(Regime::NativeAr),
        per_seed(Regime::NativeAr).unwrap_or_default(),
        s.seeds_closer_to_ar,
        s.distances.len(),
        dists.join("; ")
    );
    if s.distances.len() != 3 {
        return Err(format!("expected 3 seeds with distances; {detail}"));
    }
    match (s.diffusion_exceeds_ar, s.initialization_bias) {
        (Some(true), Some(true)) => Ok(detail),
        _ => Err(detail),
    }
}

fn probe_sanity() -> Check {
    let ck = common::jittered(&common::small_config(AttentionMode::Causal, 3, 16), 9, 0.2);
    let out = skiplab::model::forward(&ck, &[1, 4, 2, 7], &SkipSet::new([2]), true).map_err(|e| e.to_string())?;
    let trace = out.trace.expect("trace requested");
    let sims = layerwise_similarity(&trace, TokenWindow::All).map_err(|e| e.to_string())?;
    if sims.block(2) != 1.0 {
        return Err(format!("bypassed block reports {}", sims.block(2)));
    }
    let row = [0.3, -1.2, 0.7, 2.0];
    let constant = Tensor::from_rows(&vec![row.to_vec(); 6]).map_err(|e| e.to_string())?;
    let flat = trace_from_states(vec![constant.clone(), constant.clone(), constant]);
    let r =
        recency_bias_score(&tokenwise_similarity(&flat, 1).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if r != 0.0 {
        return Err(format!("constant-token recency {r}"));
    }
    let profile = avg_tokenwise_profile(std::slice::from_ref(&trace), TokenWindow::All).map_err(|e| e.to_string())?;
    if profile.std.iter().any(|&s| s != 0.0) {
        return Err(format!("single-trace std {:?}", profile.std));
    }
    Ok("bypass similarity 1.0, constant recency 0, single-trace std 0".into())
}

fn ablation_table(dir: &Path, report: &Report) -> Check {
    let rows: Vec<_> = report.ablation.iter().filter(|r| r.regime == Regime::NativeDiffusion).collect();
    let mut cells = Vec::new();
    for k in [2, 4] {
        let for_k: Vec<_> = rows.iter().filter(|r| r.layers_skipped == k).collect();
        if !for_k.iter().any(|r| r.seed == SeedKey::Mean) || for_k.len() < 2 {
            return Err(format!("missing rows for k={k}"));
        }
        for r in &for_k {
            if r.allowed.value().is_none() || r.not_allowed.value().is_none() {
                return Err(format!("k={k} seed {}: unpopulated cell", r.seed));
            }
        }
        let m = for_k.iter().find(|r| r.seed == SeedKey::Mean).expect("mean row");
        cells.push(format!("k={k}: not allowed {} / allowed {}", fmt_ret(&m.not_allowed), fmt_ret(&m.allowed)));
    }
    let text = fs::read_to_string(dir.join(ABLATION_CSV)).map_err(|e| e.to_string())?;
    if !text.starts_with("seed,regime,benchmark,layers_skipped,not_allowed,allowed\n") {
        return Err("unexpected ablation header".into());
    }
    Ok(cells.join("; "))
}

fn desk_run() -> Result<(PathBuf, Report, Option<tempfile::TempDir>), String> {
    if let Ok(dir) = std::env::var("SKIPLAB_DESK_RUN") {
        let dir = PathBuf::from(dir);
        let manifest = RunManifest::load(&dir).map_err(|e| e.to_string())?;
        let mut pinned = ExperimentConfig::load(configs_dir().join("desk.toml")).map_err(|e| e.to_string())?;
        pinned.out_dir = manifest.config.out_dir.clone();
        if manifest.config != pinned {
            return Err(format!("{} was not produced by configs/desk.toml", dir.display()));
        }
        if !manifest.failed_stages().is_empty() {
            return Err(format!("failed stages: {:?}", manifest.failed_stages()));
        }
        let report = build_report(&dir).map_err(|e| e.to_string())?;
        return Ok((dir, report, None));
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(configs_dir().join("desk.toml")).map_err(|e| e.to_string())?;
    cfg.out_dir = tmp.path().join("desk");
    let start = Instant::now();
    let res = run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    eprintln!("desk-scale run finished in {:.0}s", start.elapsed().as_secs_f64());
    if !res.manifest.failed_stages().is_empty() {
        return Err(format!("failed stages: {:?}", res.manifest.failed_stages()));
    }
    let report = build_report(&res.dir).map_err(|e| e.to_string())?;
    Ok((res.dir, report, Some(tmp)))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Check)> = vec![
        (1, "selector-oracle equivalence", guarded(selector_matches_oracle)),
        (2, "FLOPs arithmetic", guarded(flops_numbers)),
        (3, "non-adjacency invariant", guarded(non_adjacency)),
        (4, "bypass exactness", guarded(bypass_exactness)),
        (5, "gradient correctness", guarded(gradient_check)),
        (6, "decode invariants", guarded(decode_invariants)),
        (7, "pipeline determinism", guarded(pipeline_determinism)),
    ];
    let (eight, ten) = match catch_unwind(desk_run) {
        Ok(Ok((dir, report, _tmp))) => (guarded(|| directional(&report)), guarded(|| ablation_table(&dir, &report))),
        Ok(Err(e)) => (Err(e.clone()), Err(e)),
        Err(p) => {
            let e = panic_message(p);
            (Err(e.clone()), Err(e))
        }
    };
    results.push((8, "desk-scale directional reproduction", eight));
    results.push((9, "probe sanity", guarded(probe_sanity)));
    results.push((10, "ablation table generation", ten));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {id}: {name} ({d})"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id}: {name} ({d})");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
