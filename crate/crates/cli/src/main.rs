use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use skiplab::harness::{retention, run_experiment, write_reports, ExperimentConfig, RunOptions, StageStatus};
use skiplab::inference::{calibrate_skip_set, calibration_similarities, evaluate, generate, DecodeConfig, DecodeMode};
use skiplab::model::{forward, Checkpoint, Regime, SkipSet};
use skiplab::probe::{
    avg_tokenwise_profile, norm_profile, write_token_series_csv, LayerStepMatrix, SimilarityList, TokenWindow,
};
use skiplab::skip::{flops_reduction, select_skip_layers, SkipPolicyConfig, DEFAULT_TAU};
use skiplab::training::{generate_dataset, train, Objective, TrainConfig};
use skiplab::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "skiplab", version, about = "Layer-skipping experiments on toy AR and diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one regime for one seed.
    Train(TrainArgs),
    /// Write similarity and norm profiles for one prompt.
    Probe(ProbeArgs),
    /// Choose a skip set from a similarity list or a calibration forward.
    Select(SelectArgs),
    /// Generate a response for one prompt.
    Decode(DecodeArgs),
    /// Score a checkpoint on the eval split with and without skipping.
    Eval(EvalArgs),
    /// Rebuild all tables of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline.
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> skiplab::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    allow_consecutive: bool,
}

impl PolicyArgs {
    fn policy(&self) -> SkipPolicyConfig {
        SkipPolicyConfig {
            tau: self.tau.unwrap_or(DEFAULT_TAU),
            n_max: self.n_max.unwrap_or(usize::MAX),
            allow_consecutive: self.allow_consecutive,
        }
    }

    fn policy_for(&self, num_blocks: usize) -> SkipPolicyConfig {
        let mut p = self.policy();
        p.n_max = p.n_max.min(num_blocks);
        p
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    NativeAr,
    NativeDiffusion,
    ArInitDiffusion,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::NativeAr => Regime::NativeAr,
            RegimeArg::NativeDiffusion => Regime::NativeDiffusion,
            RegimeArg::ArInitDiffusion => Regime::ArInitDiffusion,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    regime: RegimeArg,
    /// Native-AR checkpoint to continue from (ar-init-diffusion only).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Space- or comma-separated token ids.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 8)]
    gen_length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps; defaults to the generation length.
    #[arg(long)]
    steps: Option<usize>,
}

impl PromptArgs {
    fn load(&self) -> anyhow::Result<(Checkpoint, Vec<usize>)> {
        let ckpt = Checkpoint::load(&self.ckpt).with_context(|| format!("loading {}", self.ckpt.display()))?;
        Ok((ckpt, parse_list(&self.prompt)?))
    }

    fn decode(&self, ckpt: &Checkpoint) -> DecodeConfig {
        DecodeConfig {
            gen_length: self.gen_length,
            seed: self.seed,
            steps: self.steps,
            ..DecodeConfig::greedy_for(ckpt.config().attention_mode)
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Comma-separated similarity list, block 1 first.
    #[arg(long, conflicts_with = "ckpt")]
    sims: Option<String>,
    #[arg(long, requires = "prompt")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 8)]
    gen_length: usize,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    /// Explicit skip set, e.g. "2,4"; otherwise chosen by the policy flags.
    #[arg(long, conflicts_with = "tau")]
    skip: Option<String>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Replaces the threshold sweep with this single value.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    allow_consecutive: bool,
    #[arg(long)]
    dry_run: bool,
    #[arg(long, short)]
    verbose: bool,
}

fn parse_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().with_context(|| format!("bad token id {t:?}")))
        .collect()
}

fn write_file(dir: &Path, name: &str) -> anyhow::Result<fs::File> {
    Ok(fs::File::create(dir.join(name))?)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.cfg.load()?;
    let seed = a.cfg.seed(&cfg);
    let regime: Regime = a.regime.into();
    let data = generate_dataset(&cfg.task, seed)?;
    let init = match (&a.init, regime) {
        (Some(p), Regime::ArInitDiffusion) => Some(Checkpoint::load(p)?),
        (None, Regime::ArInitDiffusion) => bail!(Error::Config("ar-init-diffusion needs --init".into())),
        (Some(_), _) => bail!(Error::Config("--init only applies to ar-init-diffusion".into())),
        (None, _) => None,
    };
    let (objective, steps) = match regime {
        Regime::NativeAr => (Objective::ArNtp, cfg.train.steps),
        Regime::NativeDiffusion => (Objective::MaskedDiffusion, cfg.train.steps),
        Regime::ArInitDiffusion => (Objective::MaskedDiffusion, cfg.adapt_steps),
    };
    let tcfg = TrainConfig { objective, steps, seed, ..cfg.train.clone() };
    let out = train(&tcfg, &cfg.model_for(regime), &data, init.as_ref())?;
    let dir = cfg.out_dir.join(format!("seed-{seed}")).join(regime.as_str());
    fs::create_dir_all(&dir)?;
    out.checkpoint.save(dir.join("model.ckpt"))?;
    out.log.write_csv(write_file(&dir, "train-log.csv")?)?;
    println!("{}", dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_probe(a: &ProbeArgs) -> anyhow::Result<()> {
    let (ckpt, prompt) = a.prompt.load()?;
    let dc = DecodeConfig { capture_traces: true, ..a.prompt.decode(&ckpt) };
    let gen = generate(&ckpt, &prompt, &SkipSet::empty(), &dc)?;
    let mut seq = prompt.clone();
    seq.extend(&gen.tokens);
    let trace = forward(&ckpt, &seq, &SkipSet::empty(), true)?.trace.expect("trace requested");
    let traces = if dc.mode == DecodeMode::Ar { vec![trace.clone()] } else { gen.traces };
    fs::create_dir_all(&a.out)?;
    LayerStepMatrix::from_traces(&traces, TokenWindow::All)?.write_csv(write_file(&a.out, "layer-sim.csv")?)?;
    write_token_series_csv(&trace, write_file(&a.out, "token-sim.csv")?)?;
    avg_tokenwise_profile(&traces, TokenWindow::Response(prompt.len()))?
        .write_csv(write_file(&a.out, "avg-profile.csv")?)?;
    norm_profile(&trace, skiplab::probe::DEFAULT_SINK_RATIO)?.write_csv(write_file(&a.out, "norm-profile.csv")?)?;
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> anyhow::Result<()> {
    let (sims, skip) = if let Some(s) = &a.sims {
        let values = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad similarity {t:?}")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let sims = SimilarityList::new(values)?;
        let skip = select_skip_layers(&sims, &a.policy.policy_for(sims.len()))?;
        (sims, skip)
    } else if let (Some(ck), Some(p)) = (&a.ckpt, &a.prompt) {
        let ckpt = Checkpoint::load(ck)?;
        let prompt = parse_list(p)?;
        let policy = a.policy.policy_for(ckpt.num_blocks());
        let sims = calibration_similarities(&ckpt, &prompt, a.gen_length)?;
        (sims, calibrate_skip_set(&ckpt, &prompt, a.gen_length, &policy)?)
    } else {
        bail!(Error::Config("give --sims or --ckpt with --prompt".into()));
    };
    let out = serde_json::json!({
        "similarities": sims.values,
        "skip": skip.to_vec(),
        "flops_reduction": flops_reduction(&skip, sims.len())?,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> anyhow::Result<()> {
    let (ckpt, prompt) = a.prompt.load()?;
    let skip = match &a.skip {
        Some(s) => {
            let set = SkipSet::new(parse_list(s)?);
            set.validate(ckpt.num_blocks())?;
            set
        }
        None if a.policy.tau.is_some() || a.policy.n_max.is_some() => {
            calibrate_skip_set(&ckpt, &prompt, a.prompt.gen_length, &a.policy.policy_for(ckpt.num_blocks()))?
        }
        None => SkipSet::empty(),
    };
    let r = generate(&ckpt, &prompt, &skip, &a.prompt.decode(&ckpt))?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = a.cfg.load()?;
    let seed = a.cfg.seed(&cfg);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = generate_dataset(&cfg.task, seed)?;
    let policy = a.policy.policy_for(ckpt.num_blocks());
    let examples =
        if cfg.eval_examples == 0 { &data.eval[..] } else { &data.eval[..cfg.eval_examples.min(data.eval.len())] };
    let base = evaluate(&ckpt, &SkipSet::empty(), examples, &cfg.decode.for_mode(ckpt.config().attention_mode, 1))?;
    let mut correct = 0;
    let mut skipped_blocks = 0;
    for ex in examples {
        let skip = calibrate_skip_set(&ckpt, &ex.prompt, ex.response.len(), &policy)?;
        skipped_blocks += skip.len();
        let dc = cfg.decode.for_mode(ckpt.config().attention_mode, ex.response.len());
        correct += usize::from(generate(&ckpt, &ex.prompt, &skip, &dc)?.tokens == ex.response);
    }
    let score = correct as f64 / examples.len() as f64;
    let out = serde_json::json!({
        "regime": ckpt.regime().as_str(),
        "examples": examples.len(),
        "baseline": base,
        "score": score,
        "retention": retention(score, base).to_string(),
        "flops_reduction": skipped_blocks as f64 / (examples.len() * ckpt.num_blocks()) as f64,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_run(a: &RunArgs) -> anyhow::Result<bool> {
    let mut cfg = a.cfg.load()?;
    if let Some(t) = a.tau {
        cfg.skip.tau_values = vec![t];
    }
    if let Some(n) = a.n_max {
        cfg.skip.tau_n_max = n;
    }
    if a.allow_consecutive {
        cfg.skip.allow_consecutive = true;
    }
    let res = run_experiment(&cfg, RunOptions { dry_run: a.dry_run, verbose: a.verbose })?;
    for s in &res.manifest.stages {
        match (&s.status, &s.error) {
            (StageStatus::Failed, Some(e)) => println!("{:<8} {}  {e}", "failed", s.name),
            (status, _) => println!("{:<8} {}", serde_json::to_value(status)?.as_str().unwrap_or_default(), s.name),
        }
    }
    if !a.dry_run {
        println!("results in {}", res.dir.display());
    }
    Ok(res.manifest.failed_stages().is_empty())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Spec(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Probe(a) => cmd_probe(a).map(|_| true),
        Command::Select(a) => cmd_select(a).map(|_| true),
        Command::Decode(a) => cmd_decode(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Report { out } => write_reports(out).map(|_| true).map_err(Into::into),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_STAGE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
