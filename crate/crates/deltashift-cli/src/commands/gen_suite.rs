//! `gen-suite`: generate a synthetic task suite on disk.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use deltashift::{generate_suite, Activation, SuiteConfig};

use crate::error::CliError;

/// Flag defaults mirror [`SuiteConfig::default`]; a unit test pins that.
#[derive(Debug, Args)]
pub struct GenSuiteArgs {
    /// Directory to write the suite into (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of tasks (at least 2; the base vector averages across tasks).
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    /// Comma-separated layer widths, input first, output last.
    #[arg(long, value_delimiter = ',', default_value = "16,32,4")]
    pub layer_widths: Vec<usize>,
    /// Hidden-layer activation.
    #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
    pub activation: ActivationArg,
    /// Scale of the pretrained weight initialization.
    #[arg(long, default_value_t = 0.5)]
    pub param_scale: f64,
    /// Magnitude of the weight direction shared by all task teachers.
    #[arg(long, default_value_t = 0.5)]
    pub shared_strength: f64,
    /// Relative per-task spread of the shared magnitude, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub shared_spread: f64,
    /// Magnitude of each task's idiosyncratic teacher direction.
    #[arg(long, default_value_t = 0.12)]
    pub task_noise: f64,
    /// Training-input pool rows per task.
    #[arg(long, default_value_t = 256)]
    pub pool_size: usize,
    /// Held-out evaluation rows per task.
    #[arg(long, default_value_t = 128)]
    pub eval_size: usize,
    /// Gradient-descent steps used to finetune each task model.
    #[arg(long, default_value_t = 300)]
    pub finetune_steps: usize,
    /// Finetuning learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub finetune_lr: f64,
    /// Share one input pool across tasks instead of per-task pools.
    #[arg(long)]
    pub shared_pool: bool,
    /// Suite seed; every derived stream is keyed off it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Tanh,
    Relu,
}

impl GenSuiteArgs {
    fn to_config(&self) -> SuiteConfig {
        SuiteConfig {
            tasks: self.tasks,
            layer_widths: self.layer_widths.clone(),
            activation: match self.activation {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Relu => Activation::Relu,
            },
            param_scale: self.param_scale,
            shared_strength: self.shared_strength,
            shared_spread: self.shared_spread,
            task_noise: self.task_noise,
            pool_size: self.pool_size,
            eval_size: self.eval_size,
            finetune_steps: self.finetune_steps,
            finetune_lr: self.finetune_lr,
            shared_pool: self.shared_pool,
            seed: self.seed,
        }
    }

    pub fn run(&self) -> Result<(), CliError> {
        let cfg = self.to_config();
        cfg.validate()?;
        let suite = generate_suite(&cfg)?;
        suite.save(&self.out)?;
        let parameters: usize = suite.pretrained().tensors().iter().map(|t| t.len()).sum();
        crate::commands::print_line(&format!(
            "suite tasks={} parameters={parameters} seed={} dir={}",
            cfg.tasks,
            cfg.seed,
            self.out.display()
        ));
        Ok(())
    }
}
