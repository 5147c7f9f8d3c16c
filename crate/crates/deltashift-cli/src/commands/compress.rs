//! `compress`: build the base vector and one init-only artifact per task.

use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use deltashift::{
    average_model, compress_task, compute_base_vector, init_lambda1, residual_diagnostics,
    save_checkpoint, storage_bits, task_codec, SyntheticSuite, TaskArtifact, TensorMap,
    TrainingProvenance,
};
use rayon::prelude::*;

use crate::commands::{
    avg_model_path, base_container_path, fmt_f64, manifest_path, task_container_path, CodecFlags,
};
use crate::error::{io_error, CliError};

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Suite directory to compress (pretrained + every task's finetuned
    /// weights). Mutually exclusive with --pretrained/--finetuned.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["pretrained", "finetuned"])]
    pub suite: Option<PathBuf>,
    /// Pretrained checkpoint, when compressing loose checkpoint files.
    #[arg(long, value_name = "FILE", requires = "finetuned")]
    pub pretrained: Option<PathBuf>,
    /// Finetuned checkpoints; task ids are the file stems.
    #[arg(long, value_name = "FILE", num_args = 1.., requires = "pretrained")]
    pub finetuned: Vec<PathBuf>,
    /// Directory for the base vector and task artifacts (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub codec: CodecFlags,
    /// Also write the raw (unquantized) task-average model, which the
    /// uncompressed-base reconstruction path consumes.
    #[arg(long)]
    pub emit_avg: bool,
}

impl CompressArgs {
    pub fn run(&self) -> Result<(), CliError> {
        let spec = self.codec.to_spec()?;
        let (pretrained, tasks) = self.load_inputs()?;
        let owned: Vec<TensorMap> = tasks.iter().map(|(_, m)| m.clone()).collect();
        let base = compute_base_vector(&owned, &pretrained)?;

        // A zero base vector (e.g. every finetuned model equals the
        // pretrained one) has no direction to project onto; fall back to an
        // unshifted base and say so once.
        let mut warned_degenerate = false;
        let mut inits = Vec::with_capacity(tasks.len());
        for (_, finetuned) in &tasks {
            match init_lambda1(finetuned, &pretrained, &base) {
                Ok(l1) => inits.push(l1),
                Err(deltashift::DbmsError::DegenerateBase) => {
                    if !warned_degenerate {
                        super::warn_line(
                            "WARNING msg=base vector is zero; falling back to lambda1=0 for all tasks",
                        );
                        warned_degenerate = true;
                    }
                    inits.push(0.0);
                }
                Err(e) => return Err(e.into()),
            }
        }

        std::fs::create_dir_all(&self.out_dir).map_err(|e| io_error(&self.out_dir, &e))?;
        let results: Vec<(TaskArtifact, String)> = tasks
            .par_iter()
            .zip(inits)
            .map(|((task_id, finetuned), lambda1)| -> Result<_, CliError> {
                let codec_t = task_codec(&spec, task_id);
                let delta = compress_task(finetuned, &pretrained, &base, lambda1, &codec_t)?;
                let artifact = TaskArtifact {
                    task_id: task_id.clone(),
                    delta,
                    lambda1,
                    lambda2: 1.0,
                    provenance: TrainingProvenance::untrained(),
                };
                let diag = residual_diagnostics(finetuned, &pretrained, &base, lambda1)?;
                let line = format!(
                    "{task_id} lambda1={} residual_l2={} delta_l2={} bits={} file={}",
                    fmt_f64(lambda1),
                    fmt_f64(diag.norm_ours_sq.sqrt()),
                    fmt_f64(diag.norm_ori_sq.sqrt()),
                    storage_bits(&artifact.delta),
                    task_container_path(&self.out_dir, task_id).display()
                );
                Ok((artifact, line))
            })
            .collect::<Result<_, _>>()?;

        for (artifact, _) in &results {
            let container = task_container_path(&self.out_dir, &artifact.task_id);
            artifact.save(&container, &manifest_path(&container))?;
        }
        let base_path = base_container_path(&self.out_dir);
        base.save(&base_path, &manifest_path(&base_path))?;
        let avg_path = if self.emit_avg {
            let avg = average_model(&owned)?;
            let path = avg_model_path(&self.out_dir);
            save_checkpoint(&avg, &path)?;
            Some(path)
        } else {
            None
        };

        for (_, line) in &results {
            super::print_line(line);
        }
        super::print_line(&format!(
            "base task_count={} bits={} file={}",
            base.task_count(),
            storage_bits(base.compressed()),
            base_path.display()
        ));
        if let Some(path) = avg_path {
            super::print_line(&format!("avg_model file={}", path.display()));
        }
        Ok(())
    }

    /// The pretrained map plus `(task_id, finetuned)` pairs, either from a
    /// suite directory or from loose checkpoint files.
    fn load_inputs(&self) -> Result<(TensorMap, Vec<(String, TensorMap)>), CliError> {
        match (&self.suite, &self.pretrained) {
            (Some(dir), None) => {
                let suite = SyntheticSuite::load(dir)?;
                let tasks = suite
                    .tasks()
                    .iter()
                    .map(|t| (t.id.clone(), t.finetuned.clone()))
                    .collect();
                Ok((suite.pretrained().clone(), tasks))
            }
            (None, Some(pre_path)) => {
                let pretrained = deltashift::load_checkpoint(pre_path)?;
                let mut seen = HashSet::new();
                let mut tasks = Vec::with_capacity(self.finetuned.len());
                for path in &self.finetuned {
                    let id = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| {
                            CliError::Validation(format!(
                                "cannot derive a task id from {}",
                                path.display()
                            ))
                        })?;
                    if !seen.insert(id.clone()) {
                        return Err(CliError::Validation(format!(
                            "duplicate task id {id:?}; finetuned file stems must be unique"
                        )));
                    }
                    tasks.push((id, deltashift::load_checkpoint(path)?));
                }
                Ok((pretrained, tasks))
            }
            (None, None) => Err(CliError::Validation(
                "either --suite or --pretrained with --finetuned is required".into(),
            )),
            (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        }
    }
}
