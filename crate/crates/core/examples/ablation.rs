//! Component ablation over a few seeds, printed as CSV.

use haszsl::config::ExperimentConfig;
use haszsl::experiment::{ablation_grid, ablation_table, VARIANTS};

fn main() -> haszsl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 8;
    cfg.seeds = vec![0, 1];
    let rows = ablation_grid(&cfg, &VARIANTS)?;
    print!("{}", ablation_table(&rows)?.to_csv());
    Ok(())
}
