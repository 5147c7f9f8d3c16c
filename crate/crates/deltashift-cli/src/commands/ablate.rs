//! `ablate`: compare two modulator initialization strategies on every task.

use std::path::PathBuf;

use clap::Args;
use deltashift::{ablation_init, SyntheticSuite};

use crate::commands::{fmt_f64, CodecFlags, StrategyArg, TrainFlags};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Suite directory.
    #[arg(long, value_name = "DIR")]
    pub suite: PathBuf,
    #[command(flatten)]
    pub codec: CodecFlags,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// First initialization strategy (the paired comparison reports the
    /// fraction of tasks where this arm's loss is <= the other's).
    #[arg(long, value_enum, default_value_t = StrategyArg::Projection)]
    pub strategy_a: StrategyArg,
    /// Second initialization strategy.
    #[arg(long, value_enum, default_value_t = StrategyArg::Ones)]
    pub strategy_b: StrategyArg,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

impl AblateArgs {
    pub fn run(&self) -> Result<(), CliError> {
        let spec = self.codec.to_spec()?;
        let cfg = self.flags.to_config();
        cfg.validate()?;
        let suite = SyntheticSuite::load(&self.suite)?;
        let outcome = ablation_init(
            &suite,
            &spec,
            &cfg,
            self.strategy_a.to_strategy(),
            self.strategy_b.to_strategy(),
        )?;
        super::write_atomic(&self.out, outcome.to_csv().as_bytes())?;
        super::print_line(&format!(
            "ablation step={} fraction_a_le_b={} tasks={} file={}",
            outcome.step,
            fmt_f64(outcome.fraction_a_le_b),
            outcome.rows.len(),
            self.out.display()
        ));
        Ok(())
    }
}
