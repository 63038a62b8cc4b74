//! Sensitivity of H to the attribute-drift weight.

use haszsl::config::{ExperimentConfig, SweepAxis};
use haszsl::experiment::{sweep, sweep_table};

fn main() -> haszsl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 8;
    let rows = sweep(&cfg, SweepAxis::Lambda2, &[0.0, 0.1, 1.0, 10.0])?;
    print!("{}", sweep_table(&rows)?.to_csv());
    Ok(())
}
