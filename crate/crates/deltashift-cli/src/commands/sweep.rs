//! `sweep`: evaluate a metric over a Cartesian modulator grid for one task.

use std::path::PathBuf;

use clap::Args;
use deltashift::{sweep_lambda_grid, GridSpec, SweepOptions, SyntheticSuite};

use crate::commands::{fmt_f64, CodecFlags, MetricArg};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Suite directory.
    #[arg(long, value_name = "DIR")]
    pub suite: PathBuf,
    /// Task id to sweep (e.g. task_000).
    #[arg(long)]
    pub task: String,
    #[command(flatten)]
    pub codec: CodecFlags,
    /// lambda1 grid start.
    #[arg(long, default_value_t = 0.0)]
    pub l1_start: f64,
    /// lambda1 grid end.
    #[arg(long, default_value_t = 2.0)]
    pub l1_end: f64,
    /// lambda1 grid points (1 collapses the axis; start must equal end).
    #[arg(long, default_value_t = 21)]
    pub l1_steps: usize,
    /// lambda2 grid start.
    #[arg(long, default_value_t = 0.0)]
    pub l2_start: f64,
    /// lambda2 grid end.
    #[arg(long, default_value_t = 2.0)]
    pub l2_end: f64,
    /// lambda2 grid points (1 collapses the axis; start must equal end).
    #[arg(long, default_value_t = 21)]
    pub l2_steps: usize,
    /// Cell metric.
    #[arg(long, value_enum, default_value_t = MetricArg::RelOutErr)]
    pub metric: MetricArg,
    /// Shift along the raw task-average model instead of the quantized base.
    #[arg(long)]
    pub uncompressed_base: bool,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

impl SweepArgs {
    pub fn run(&self) -> Result<(), CliError> {
        let spec = self.codec.to_spec()?;
        let grid1 = GridSpec {
            start: self.l1_start,
            end: self.l1_end,
            steps: self.l1_steps,
        };
        let grid2 = GridSpec {
            start: self.l2_start,
            end: self.l2_end,
            steps: self.l2_steps,
        };
        grid1.validate()?;
        grid2.validate()?;
        let options = SweepOptions {
            uncompressed_base: self.uncompressed_base,
            metric: self.metric.to_metric(),
        };

        let suite = SyntheticSuite::load(&self.suite)?;
        let grid = sweep_lambda_grid(&suite, &self.task, &spec, &grid1, &grid2, options)?;
        super::write_atomic(&self.out, grid.to_csv().as_bytes())?;
        let (i1, i2) = grid.argmin();
        super::print_line(&format!(
            "sweep task={} metric={} argmin_lambda1={} argmin_lambda2={} argmin_value={} file={}",
            grid.task_id,
            options.metric,
            fmt_f64(grid.lambda1[i1]),
            fmt_f64(grid.lambda2[i2]),
            fmt_f64(grid.value(i1, i2)),
            self.out.display()
        ));
        Ok(())
    }
}
