use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{CalibrationMode, ExperimentConfig, ProfileWindow};
use crate::harness::report::write_reports;
use crate::inference::{calibration_similarities, generate, token_kl, DecodeConfig, GenerationResult};
use crate::model::{forward, AttentionMode, Checkpoint, Regime, SkipSet, FORMAT_VERSION};
use crate::nn::RNG_ALGORITHM;
use crate::probe::{
    avg_tokenwise_profile, norm_profile, tokenwise_similarity, AvgProfile, LayerStepMatrix, NormProfile, TokenWindow,
};
use crate::skip::{select_global, select_skip_layers, SkipPolicyConfig};
use crate::training::{generate_dataset, train, Dataset, Example, Objective, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ok,
    Failed,
    /// A stage it depends on failed.
    Skipped,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub rng_algorithm: String,
    pub checkpoint_format: u32,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn failed_stages(&self) -> Vec<&StageRecord> {
        self.stages.iter().filter(|s| s.status == StageStatus::Failed).collect()
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(MANIFEST_FILE))
    }
}

/// A skip-selection policy as used in an evaluation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SweepPolicy {
    FixedK { k: usize, allow_consecutive: bool },
    Threshold { tau: f64, n_max: usize, allow_consecutive: bool },
}

impl SweepPolicy {
    pub fn skip_config(&self) -> SkipPolicyConfig {
        match *self {
            SweepPolicy::FixedK { k, allow_consecutive } => SkipPolicyConfig::fixed_k(k, allow_consecutive),
            SweepPolicy::Threshold { tau, n_max, allow_consecutive } => {
                SkipPolicyConfig { tau, n_max, allow_consecutive }
            }
        }
    }

    pub fn allow_consecutive(&self) -> bool {
        self.skip_config().allow_consecutive
    }

    pub fn label(&self) -> String {
        match *self {
            SweepPolicy::FixedK { k, .. } => format!("k={k}"),
            SweepPolicy::Threshold { tau, n_max, .. } => format!("tau={tau},n_max={n_max}"),
        }
    }

    pub fn fixed_k(&self) -> Option<usize> {
        match *self {
            SweepPolicy::FixedK { k, .. } => Some(k),
            SweepPolicy::Threshold { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt: Vec<usize>,
    pub reference: Vec<usize>,
    pub output: Vec<usize>,
    pub skip: SkipSet,
    pub steps: usize,
    pub correct: bool,
    /// Output equals the full-depth output under the shared seed.
    pub equivalent: bool,
    pub token_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: SweepPolicy,
    pub prompts: Vec<PromptOutcome>,
}

/// Everything the retention, ablation, distribution and scatter tables
/// are built from for one (seed, regime).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEval {
    pub seed: u64,
    pub regime: Regime,
    pub benchmark: String,
    pub num_blocks: usize,
    pub calibration: CalibrationMode,
    pub full: Vec<PromptOutcome>,
    pub policies: Vec<PolicyOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeProbe {
    pub seed: u64,
    pub regime: Regime,
    /// Mean over probe prompts of each prompt's across-step profile.
    pub profile: AvgProfile,
    /// `1 − profile.mean` per block.
    pub recency: Vec<f64>,
    pub layer_sim: LayerStepMatrix,
    /// Token-wise similarities at every state of the first probe prompt's
    /// final forward.
    pub token_sim: Vec<Vec<f64>>,
    pub norms: NormProfile,
}

/// Options that do not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn regime_dir(run_dir: &Path, seed: u64, regime: Regime) -> PathBuf {
    run_dir.join(format!("seed-{seed}")).join(regime.as_str())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn stage_names(cfg: &ExperimentConfig) -> Vec<String> {
    let mut names = Vec::new();
    for &seed in &cfg.seeds {
        names.push(format!("dataset/seed-{seed}"));
        for r in cfg.regimes_to_train() {
            names.push(format!("train/seed-{seed}/{r}"));
        }
        for &r in &cfg.regimes {
            names.push(format!("probe/seed-{seed}/{r}"));
            names.push(format!("eval/seed-{seed}/{r}"));
        }
    }
    names.push("report".into());
    names
}

/// The full stage list, in execution order.
pub fn plan(cfg: &ExperimentConfig) -> Vec<String> {
    stage_names(cfg)
}

fn sweep_policies(cfg: &ExperimentConfig) -> Vec<SweepPolicy> {
    let s = &cfg.skip;
    let mut out: Vec<SweepPolicy> =
        s.k_values.iter().map(|&k| SweepPolicy::FixedK { k, allow_consecutive: s.allow_consecutive }).collect();
    out.extend(s.tau_values.iter().map(|&tau| SweepPolicy::Threshold {
        tau,
        n_max: s.tau_n_max,
        allow_consecutive: s.allow_consecutive,
    }));
    for &k in &s.ablation_k {
        for allow in [true, false] {
            let p = SweepPolicy::FixedK { k, allow_consecutive: allow };
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    opts: RunOptions,
    stages: Vec<StageRecord>,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: String, ready: bool, f: impl FnOnce(&Self) -> Result<T>) -> Option<T> {
        if !ready {
            self.stages.push(StageRecord { name, status: StageStatus::Skipped, error: None });
            return None;
        }
        if self.opts.verbose {
            eprintln!("[stage] {name}");
        }
        match f(self) {
            Ok(v) => {
                self.stages.push(StageRecord { name, status: StageStatus::Ok, error: None });
                Some(v)
            }
            Err(e) => {
                if self.opts.verbose {
                    eprintln!("[stage] {name} failed: {e}");
                }
                self.stages.push(StageRecord { name, status: StageStatus::Failed, error: Some(e.to_string()) });
                None
            }
        }
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            name: self.cfg.name.clone(),
            config_hash: self.cfg.hash(),
            rng_algorithm: RNG_ALGORITHM.into(),
            checkpoint_format: FORMAT_VERSION,
            seeds: self.cfg.seeds.clone(),
            config: self.cfg.clone(),
            stages: self.stages.clone(),
        }
    }

    fn eval_split<'d>(&self, data: &'d Dataset) -> &'d [Example] {
        let n = self.cfg.eval_examples;
        if n == 0 {
            &data.eval
        } else {
            &data.eval[..n.min(data.eval.len())]
        }
    }

    fn train_regime(&self, seed: u64, regime: Regime, data: &Dataset, ar: Option<&Checkpoint>) -> Result<Checkpoint> {
        let (objective, steps, init) = match regime {
            Regime::NativeAr => (Objective::ArNtp, self.cfg.train.steps, None),
            Regime::NativeDiffusion => (Objective::MaskedDiffusion, self.cfg.train.steps, None),
            Regime::ArInitDiffusion => {
                let ar = ar.ok_or_else(|| Error::Config("ar-init-diffusion needs the native-ar checkpoint".into()))?;
                (Objective::MaskedDiffusion, self.cfg.adapt_steps, Some(ar))
            }
        };
        let tcfg = TrainConfig { objective, steps, seed, ..self.cfg.train.clone() };
        let out = train(&tcfg, &self.cfg.model_for(regime), data, init)?;
        let dir = regime_dir(&self.dir, seed, regime);
        fs::create_dir_all(&dir)?;
        out.checkpoint.save(dir.join("model.ckpt"))?;
        out.log.write_csv(BufWriter::new(fs::File::create(dir.join("train-log.csv"))?))?;
        Ok(out.checkpoint)
    }

    fn decode_cfg(&self, ckpt: &Checkpoint, gen_length: usize) -> DecodeConfig {
        self.cfg.decode.for_mode(ckpt.config().attention_mode, gen_length)
    }

    fn probe_regime(&self, seed: u64, ckpt: &Checkpoint, data: &Dataset) -> Result<RegimeProbe> {
        let prompts = &self.eval_split(data)[..self.cfg.probe.prompts.min(self.eval_split(data).len())];
        if prompts.is_empty() {
            return Err(Error::Input("no eval prompts to probe".into()));
        }
        let mut profiles = Vec::new();
        let mut first: Option<(LayerStepMatrix, Vec<Vec<f64>>, NormProfile)> = None;
        for ex in prompts {
            let p = ex.prompt.len();
            let window = match self.cfg.probe.window {
                ProfileWindow::Response => TokenWindow::Response(p),
                ProfileWindow::Prompt => TokenWindow::Prompt(p),
                ProfileWindow::All => TokenWindow::All,
            };
            let dc = DecodeConfig { capture_traces: true, ..self.decode_cfg(ckpt, ex.response.len()) };
            let gen = generate(ckpt, &ex.prompt, &SkipSet::empty(), &dc)?;
            let mut full = ex.prompt.clone();
            full.extend(&gen.tokens);
            let final_trace = forward(ckpt, &full, &SkipSet::empty(), true)?.trace.expect("captured");
            // A left-to-right decoder contributes one column: the completed sequence.
            let traces = if ckpt.config().attention_mode == AttentionMode::Causal {
                vec![final_trace.clone()]
            } else {
                gen.traces
            };
            profiles.push(avg_tokenwise_profile(&traces, window)?);
            if first.is_none() {
                let matrix = LayerStepMatrix::from_traces(&traces, TokenWindow::All)?;
                let token_sim = (0..final_trace.states.len())
                    .map(|l| tokenwise_similarity(&final_trace, l).map(|s| s.values))
                    .collect::<Result<Vec<_>>>()?;
                let norms = norm_profile(&final_trace, self.cfg.probe.sink_ratio)?;
                first = Some((matrix, token_sim, norms));
            }
        }
        let layers = ckpt.num_blocks();
        let n = profiles.len() as f64;
        let mean: Vec<f64> = (0..layers).map(|l| profiles.iter().map(|p| p.mean[l]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..layers).map(|l| profiles.iter().map(|p| p.std[l]).sum::<f64>() / n).collect();
        let (layer_sim, token_sim, norms) = first.expect("at least one prompt");
        Ok(RegimeProbe {
            seed,
            regime: ckpt.regime(),
            recency: mean.iter().map(|m| 1.0 - m).collect(),
            profile: AvgProfile { mean, std },
            layer_sim,
            token_sim,
            norms,
        })
    }

    fn eval_regime(&self, seed: u64, ckpt: &Checkpoint, data: &Dataset) -> Result<RegimeEval> {
        let examples = self.eval_split(data);
        if examples.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        let dir = regime_dir(&self.dir, seed, ckpt.regime());
        fs::create_dir_all(&dir)?;
        let mut jsonl = BufWriter::new(fs::File::create(dir.join("generations.jsonl"))?);
        let mut full_results = Vec::with_capacity(examples.len());
        let mut sims = Vec::with_capacity(examples.len());
        for ex in examples {
            let dc = self.decode_cfg(ckpt, ex.response.len());
            let r = generate(ckpt, &ex.prompt, &SkipSet::empty(), &dc)?;
            write_generation(&mut jsonl, "full", &r)?;
            full_results.push(r);
            sims.push(calibration_similarities(ckpt, &ex.prompt, ex.response.len())?);
        }
        let full: Vec<PromptOutcome> =
            examples.iter().zip(&full_results).map(|(ex, r)| outcome(ex, r, r)).collect::<Result<_>>()?;
        let mut policies = Vec::new();
        for policy in sweep_policies(self.cfg) {
            let pcfg = policy.skip_config();
            let global = match self.cfg.skip.calibration {
                CalibrationMode::Global => Some(select_global(&sims, &pcfg)?),
                CalibrationMode::PerPrompt => None,
            };
            let mut prompts = Vec::with_capacity(examples.len());
            for ((ex, s), full_r) in examples.iter().zip(&sims).zip(&full_results) {
                let skip = match &global {
                    Some(g) => g.clone(),
                    None => select_skip_layers(s, &pcfg)?,
                };
                let r = if skip.is_empty() {
                    full_r.clone()
                } else {
                    generate(ckpt, &ex.prompt, &skip, &self.decode_cfg(ckpt, ex.response.len()))?
                };
                write_generation(&mut jsonl, &policy.label(), &r)?;
                prompts.push(outcome(ex, &r, full_r)?);
            }
            policies.push(PolicyOutcome { policy, prompts });
        }
        jsonl.flush()?;
        Ok(RegimeEval {
            seed,
            regime: ckpt.regime(),
            benchmark: self.cfg.task.kind.to_string(),
            num_blocks: ckpt.num_blocks(),
            calibration: self.cfg.skip.calibration,
            full,
            policies,
        })
    }
}

fn outcome(ex: &Example, r: &GenerationResult, full: &GenerationResult) -> Result<PromptOutcome> {
    Ok(PromptOutcome {
        prompt: ex.prompt.clone(),
        reference: ex.response.clone(),
        output: r.tokens.clone(),
        skip: r.skip.clone(),
        steps: r.steps,
        correct: r.tokens == ex.response,
        equivalent: r.tokens == full.tokens,
        token_kl: token_kl(r, full)?,
    })
}

#[derive(Serialize)]
struct GenerationRecord<'a> {
    policy: &'a str,
    prompt: &'a [usize],
    output: &'a [usize],
    skip: &'a SkipSet,
    steps: usize,
    step_seconds: &'a [f64],
}

fn write_generation<W: Write>(w: &mut W, policy: &str, r: &GenerationResult) -> Result<()> {
    let rec = GenerationRecord {
        policy,
        prompt: &r.prompt,
        output: &r.tokens,
        skip: &r.skip,
        steps: r.steps,
        step_seconds: &r.step_seconds,
    };
    serde_json::to_writer(&mut *w, &rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains every regime for every seed, probes and evaluates them, and
/// writes all tables. Stage failures are recorded in the manifest and do
/// not abort independent stages.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    let mut runner = Runner { cfg, dir: dir.clone(), opts, stages: Vec::new() };
    if opts.dry_run {
        runner.stages = stage_names(cfg)
            .into_iter()
            .map(|name| StageRecord { name, status: StageStatus::Planned, error: None })
            .collect();
        return Ok(RunOutcome { dir, manifest: runner.manifest() });
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    for &seed in &cfg.seeds {
        let data = runner.stage(format!("dataset/seed-{seed}"), true, |_| generate_dataset(&cfg.task, seed));
        let mut ckpts: BTreeMap<Regime, Checkpoint> = BTreeMap::new();
        for regime in cfg.regimes_to_train() {
            let ready = data.is_some() && (regime != Regime::ArInitDiffusion || ckpts.contains_key(&Regime::NativeAr));
            let ar = ckpts.get(&Regime::NativeAr).cloned();
            let ck = runner.stage(format!("train/seed-{seed}/{regime}"), ready, |r| {
                r.train_regime(seed, regime, data.as_ref().expect("ready"), ar.as_ref())
            });
            if let Some(ck) = ck {
                ckpts.insert(regime, ck);
            }
        }
        for &regime in &cfg.regimes {
            let ck = ckpts.get(&regime);
            let ready = data.is_some() && ck.is_some();
            runner.stage(format!("probe/seed-{seed}/{regime}"), ready, |r| {
                let probe = r.probe_regime(seed, ck.expect("ready"), data.as_ref().expect("ready"))?;
                let d = regime_dir(&r.dir, seed, regime);
                write_json(&d.join("probe.json"), &probe)
            });
            runner.stage(format!("eval/seed-{seed}/{regime}"), ready, |r| {
                let eval = r.eval_regime(seed, ck.expect("ready"), data.as_ref().expect("ready"))?;
                let d = regime_dir(&r.dir, seed, regime);
                write_json(&d.join("eval.json"), &eval)
            });
        }
    }
    write_json(&dir.join(MANIFEST_FILE), &runner.manifest())?;
    runner.stage("report".into(), true, |r| write_reports(&r.dir));
    let manifest = runner.manifest();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome { dir, manifest })
}
