//! `reconstruct`: rebuild task weights from pretrained + base + artifact.

use std::path::PathBuf;

use clap::Args;
use deltashift::{
    load_checkpoint, reconstruct, reconstruct_uncompressed_base, save_checkpoint, BaseVector,
    TaskArtifact,
};

use crate::commands::{fmt_f64, manifest_path};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Pretrained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub pretrained: PathBuf,
    /// Base-vector container (its `.manifest` sibling is read too).
    /// Required unless --uncompressed-base is given.
    #[arg(long, value_name = "FILE")]
    pub base: Option<PathBuf>,
    /// Task-artifact container (its `.manifest` sibling is read too).
    #[arg(long, value_name = "FILE")]
    pub artifact: PathBuf,
    /// Output checkpoint path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Shift along the raw task-average model instead of the quantized base
    /// vector; requires --avg-model.
    #[arg(long)]
    pub uncompressed_base: bool,
    /// Raw task-average checkpoint written by `compress --emit-avg`.
    #[arg(long, value_name = "FILE")]
    pub avg_model: Option<PathBuf>,
}

impl ReconstructArgs {
    pub fn run(&self) -> Result<(), CliError> {
        if self.uncompressed_base {
            if self.avg_model.is_none() {
                return Err(CliError::Validation(
                    "--uncompressed-base requires --avg-model".into(),
                ));
            }
            if self.base.is_some() {
                return Err(CliError::Validation(
                    "--base does not apply with --uncompressed-base; the shift uses --avg-model".into(),
                ));
            }
        } else {
            if self.base.is_none() {
                return Err(CliError::Validation("--base is required".into()));
            }
            if self.avg_model.is_some() {
                return Err(CliError::Validation(
                    "--avg-model only applies with --uncompressed-base".into(),
                ));
            }
        }

        let pretrained = load_checkpoint(&self.pretrained)?;
        let artifact = TaskArtifact::load(&self.artifact, &manifest_path(&self.artifact))?;
        let weights = if self.uncompressed_base {
            let avg = load_checkpoint(self.avg_model.as_ref().expect("validated above"))?;
            reconstruct_uncompressed_base(&pretrained, &avg, &artifact)?
        } else {
            let base_path = self.base.as_ref().expect("validated above");
            let base = BaseVector::load(base_path, &manifest_path(base_path))?;
            reconstruct(&pretrained, &base, &artifact)?
        };
        save_checkpoint(&weights, &self.out)?;
        super::print_line(&format!(
            "reconstructed task={} lambda1={} lambda2={} file={}",
            artifact.task_id,
            fmt_f64(artifact.lambda1),
            fmt_f64(artifact.lambda2),
            self.out.display()
        ));
        Ok(())
    }
}
