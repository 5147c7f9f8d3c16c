//! Subcommand implementations and the flag groups they share.

pub mod ablate;
pub mod compress;
pub mod gen_suite;
pub mod reconstruct;
pub mod report;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use deltashift::{
    CodecSpec, CompressedDelta, DareCodecConfig, GradientMode, InitStrategy, SweepMetric,
    TaskArtifact, TrainConfig,
};

use crate::error::CliError;

/// 17-significant-digit float rendering used on every stdout data line;
/// parses back to the identical f64 bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Print one stdout data line. Commands emit these only after all file
/// writes have finished, so when the reader has gone away (e.g. piped into
/// `head`) ending the process quietly is safe and loses nothing durable.
pub(crate) fn print_line(line: &str) {
    use std::io::Write;
    if writeln!(std::io::stdout(), "{line}").is_err() {
        std::process::exit(0);
    }
}

/// Print a stderr warning; delivery is best-effort.
pub(crate) fn warn_line(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

/// A container path's sibling manifest: same stem, `.manifest` extension.
pub(crate) fn manifest_path(container: &Path) -> PathBuf {
    container.with_extension("manifest")
}

/// Write `bytes` to `path` atomically (temp file + rename), with path context
/// on failure.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    deltashift::checkpoint::atomic_write(path, bytes).map_err(|e| crate::error::io_error(path, &e))
}

/// The codec half of the flag surface, shared by compress/sweep/ablate.
#[derive(Debug, Args)]
pub struct CodecFlags {
    /// Delta codec for per-task residuals.
    #[arg(long, value_enum)]
    pub codec: CodecArg,
    /// DARE drop probability in [0, 1); required with --codec dare.
    #[arg(long)]
    pub sparse_rate: Option<f64>,
    /// Root seed for DARE masks; per-task masks derive from it and the task
    /// id. Defaults to 0. Only applies to --codec dare.
    #[arg(long)]
    pub codec_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CodecArg {
    Dare,
    Bitdelta,
}

impl CodecFlags {
    /// Validate the combination and build the library spec.
    pub fn to_spec(&self) -> Result<CodecSpec, CliError> {
        match self.codec {
            CodecArg::Dare => {
                let Some(sparse_rate) = self.sparse_rate else {
                    return Err(CliError::Validation(
                        "--sparse-rate is required with --codec dare".into(),
                    ));
                };
                let cfg = DareCodecConfig {
                    sparse_rate,
                    seed: self.codec_seed.unwrap_or(0),
                };
                cfg.validate()?;
                Ok(CodecSpec::Dare(cfg))
            }
            CodecArg::Bitdelta => {
                if self.sparse_rate.is_some() {
                    return Err(CliError::Validation(
                        "--sparse-rate only applies to --codec dare".into(),
                    ));
                }
                if self.codec_seed.is_some() {
                    return Err(CliError::Validation(
                        "--codec-seed only applies to --codec dare".into(),
                    ));
                }
                Ok(CodecSpec::BitDelta)
            }
        }
    }
}

/// The training half of the flag surface, shared by train/ablate.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Optimizer steps over the two modulators.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Fraction of each task's input pool sampled for training.
    #[arg(long, default_value_t = 0.1)]
    pub sample_fraction: f64,
    /// Optional cap on the sampled batch rows.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// How modulator gradients are computed.
    #[arg(long, value_enum, default_value_t = GradientModeArg::FiniteDiff)]
    pub gradient_mode: GradientModeArg,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub fd_step: f64,
    /// Root seed for pool sampling; per-task seeds derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradientModeArg {
    FiniteDiff,
    Analytic,
}

impl TrainFlags {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            sample_fraction: self.sample_fraction,
            batch_size: self.batch_size,
            mode: match self.gradient_mode {
                GradientModeArg::FiniteDiff => GradientMode::FiniteDiff,
                GradientModeArg::Analytic => GradientMode::Analytic,
            },
            fd_step: self.fd_step,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    /// Teacher-relative output error of the compressed reconstruction.
    RelOutErr,
    /// l2 norm of the pre-codec residual (independent of lambda2).
    PreCodecResidualL2,
}

impl MetricArg {
    pub fn to_metric(self) -> SweepMetric {
        match self {
            MetricArg::RelOutErr => SweepMetric::RelativeOutputError,
            MetricArg::PreCodecResidualL2 => SweepMetric::PreCodecResidualNorm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    /// lambda1 from the closed-form projection, lambda2 = 1.
    Projection,
    /// lambda1 = lambda2 = 1.
    Ones,
}

impl StrategyArg {
    pub fn to_strategy(self) -> InitStrategy {
        match self {
            StrategyArg::Projection => InitStrategy::Projection,
            StrategyArg::Ones => InitStrategy::Ones,
        }
    }
}

/// Recover the codec spec an artifact's container was produced with.
pub(crate) fn artifact_codec_spec(artifact: &TaskArtifact) -> CodecSpec {
    match &artifact.delta {
        CompressedDelta::Dare(d) => CodecSpec::Dare(d.config),
        CompressedDelta::BitDelta(_) => CodecSpec::BitDelta,
    }
}

/// Conventional artifact-directory layout shared by compress/train/report.
pub(crate) fn base_container_path(dir: &Path) -> PathBuf {
    dir.join("base.dltc")
}

pub(crate) fn task_container_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("{task_id}.dltc"))
}

pub(crate) fn trace_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("{task_id}.trace.csv"))
}

pub(crate) fn avg_model_path(dir: &Path) -> PathBuf {
    dir.join("avg_model.dlts")
}
