//! `report`: storage accounting over an artifact directory.

use std::path::PathBuf;

use clap::Args;
use deltashift::{storage_report, BaseVector, TaskArtifact};

use crate::commands::{base_container_path, fmt_f64, manifest_path};
use crate::error::{io_error, CliError};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Artifact directory written by `compress` (and optionally `train`).
    #[arg(long, value_name = "DIR")]
    pub artifacts: PathBuf,
    /// Seed recorded in the report header (provenance only; reports carry
    /// the seed of the suite the artifacts came from).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

impl ReportArgs {
    pub fn run(&self) -> Result<(), CliError> {
        let base_path = base_container_path(&self.artifacts);
        let base = BaseVector::load(&base_path, &manifest_path(&base_path))?;

        // Every other *.dltc in the directory is a task artifact; sort by
        // file name so the report is independent of directory enumeration
        // order.
        let entries =
            std::fs::read_dir(&self.artifacts).map_err(|e| io_error(&self.artifacts, &e))?;
        let mut containers: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_error(&self.artifacts, &e))?;
            let path = entry.path();
            let hidden = path
                .file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if hidden || path.extension().is_none_or(|e| e != "dltc") || path == base_path {
                continue;
            }
            containers.push(path);
        }
        containers.sort();
        if containers.is_empty() {
            return Err(CliError::Validation(format!(
                "no task artifacts (*.dltc) found in {}",
                self.artifacts.display()
            )));
        }

        let mut artifacts = Vec::with_capacity(containers.len());
        for container in &containers {
            artifacts.push(TaskArtifact::load(container, &manifest_path(container))?);
        }
        let report = storage_report(&artifacts, &base, self.seed);
        super::write_atomic(&self.out, report.to_csv().as_bytes())?;
        super::print_line(&format!(
            "storage tasks={} vanilla_total={} dbms_total={} ratio={} file={}",
            report.rows.len(),
            report.vanilla_total,
            report.dbms_total,
            fmt_f64(report.ratio),
            self.out.display()
        ));
        Ok(())
    }
}
