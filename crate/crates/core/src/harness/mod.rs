//! Experiment orchestration: training, probing, skip sweeps and reports.

mod config;
mod metrics;
mod report;
mod run;

pub use crate::inference::evaluate;
pub use config::{CalibrationMode, DecodeSettings, ExperimentConfig, ProbeConfig, ProfileWindow, SweepConfig};
pub use metrics::{equivalence_rate, retention, Retention};
pub use report::{
    build_report, write_reports, AblationRow, DirectionalSummary, Report, RetentionRow, SeedDistance, SeedKey,
    ABLATION_CSV, DIRECTIONAL_K, FLOPS_RETENTION_CSV, PROFILE_DISTANCE_CSV, RECENCY_CSV, RETENTION_CSV,
    SKIP_DISTRIBUTION_CSV, SUMMARY_JSON,
};
pub use run::{
    plan, regime_dir, run_experiment, PolicyOutcome, PromptOutcome, RegimeEval, RegimeProbe, RunManifest, RunOptions,
    RunOutcome, StageRecord, StageStatus, SweepPolicy, MANIFEST_FILE,
};
