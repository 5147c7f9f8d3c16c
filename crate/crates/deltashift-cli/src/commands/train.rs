//! `train`: optimize each artifact's modulators against its task pool.
//!
//! Training always restarts from the closed-form initialization
//! (`lambda1` = projection, `lambda2` = 1) and runs `--steps` optimizer
//! steps, so a run is a pure function of the suite, the artifact's codec
//! config, and the flags. `--steps 0` therefore rewrites exactly what
//! `compress` produced (byte-identical containers and manifests) and emits
//! no trace.

use std::path::PathBuf;

use clap::Args;
use deltashift::{
    task_train_config, trace_to_csv, train_task, BaseVector, SyntheticSuite, TaskArtifact,
    TrainConfig, TrainError,
};
use rayon::prelude::*;

use crate::commands::{
    artifact_codec_spec, base_container_path, fmt_f64, manifest_path, task_container_path,
    trace_path, TrainFlags,
};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Suite directory providing each task's input pool and finetuned
    /// weights.
    #[arg(long, value_name = "DIR")]
    pub suite: PathBuf,
    /// Artifact directory written by `compress`; updated in place.
    #[arg(long, value_name = "DIR")]
    pub artifacts: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

struct TaskResult {
    artifact: TaskArtifact,
    trace_csv: Option<String>,
    line: String,
}

impl TrainArgs {
    pub fn run(&self) -> Result<(), CliError> {
        let cfg = self.flags.to_config();
        // steps = 0 is CLI-level "recompute the init"; validate the rest of
        // the config as the library would see it with at least one step.
        TrainConfig {
            steps: cfg.steps.max(1),
            ..cfg
        }
        .validate()?;

        let suite = SyntheticSuite::load(&self.suite)?;
        let base_path = base_container_path(&self.artifacts);
        let base = BaseVector::load(&base_path, &manifest_path(&base_path))?;

        let results: Vec<TaskResult> = suite
            .tasks()
            .par_iter()
            .map(|task| self.train_one(&suite, &base, &task.id, &cfg))
            .collect::<Result<_, _>>()?;

        for r in &results {
            let container = task_container_path(&self.artifacts, &r.artifact.task_id);
            r.artifact.save(&container, &manifest_path(&container))?;
            if let Some(csv) = &r.trace_csv {
                super::write_atomic(&trace_path(&self.artifacts, &r.artifact.task_id), csv.as_bytes())?;
            }
        }
        for r in &results {
            super::print_line(&r.line);
        }
        Ok(())
    }

    fn train_one(
        &self,
        suite: &SyntheticSuite,
        base: &BaseVector,
        task_id: &str,
        cfg: &TrainConfig,
    ) -> Result<TaskResult, CliError> {
        let container = task_container_path(&self.artifacts, task_id);
        let stored = TaskArtifact::load(&container, &manifest_path(&container))?;
        if stored.task_id != task_id {
            return Err(CliError::Validation(format!(
                "artifact {} belongs to task {:?}, expected {task_id:?}",
                container.display(),
                stored.task_id
            )));
        }
        let spec = artifact_codec_spec(&stored);
        let task = suite.task(task_id)?;

        if cfg.steps == 0 {
            // No-op training: rebuild the init-only artifact.
            let lambda1 = deltashift::init_lambda1(&task.finetuned, suite.pretrained(), base)
                .or_else(|e| match e {
                    deltashift::DbmsError::DegenerateBase => Ok(0.0),
                    other => Err(other),
                })?;
            let delta =
                deltashift::compress_task(&task.finetuned, suite.pretrained(), base, lambda1, &spec)?;
            let artifact = TaskArtifact {
                task_id: task_id.to_owned(),
                delta,
                lambda1,
                lambda2: 1.0,
                provenance: deltashift::TrainingProvenance::untrained(),
            };
            let line = format!(
                "{task_id} lambda1={} lambda2={} steps=0 final_loss=none trace=none",
                fmt_f64(artifact.lambda1),
                fmt_f64(artifact.lambda2),
            );
            return Ok(TaskResult {
                artifact,
                trace_csv: None,
                line,
            });
        }

        let cfg_t = task_train_config(cfg, task_id);
        let outcome = train_task(
            task_id,
            suite.model(),
            suite.pretrained(),
            &task.finetuned,
            base,
            &spec,
            &task.pool,
            &cfg_t,
        );
        match outcome {
            Ok(out) => {
                let final_loss = out
                    .artifact
                    .provenance
                    .final_loss
                    .map_or_else(|| "none".to_owned(), fmt_f64);
                let trace_file = trace_path(&self.artifacts, task_id);
                let line = format!(
                    "{task_id} lambda1={} lambda2={} steps={} final_loss={final_loss} trace={}",
                    fmt_f64(out.artifact.lambda1),
                    fmt_f64(out.artifact.lambda2),
                    out.artifact.provenance.steps,
                    trace_file.display()
                );
                Ok(TaskResult {
                    artifact: out.artifact,
                    trace_csv: Some(trace_to_csv(&out.trace)),
                    line,
                })
            }
            // Preserve whatever the optimizer saw before diverging, then
            // fail with the numerical exit code.
            Err(TrainError::NonFiniteLoss { step, trace }) => {
                let path = trace_path(&self.artifacts, task_id);
                super::write_atomic(&path, trace_to_csv(&trace).as_bytes())?;
                Err(CliError::Numerical(format!(
                    "{task_id}: non-finite loss at step {step}; partial trace written to {}",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}
