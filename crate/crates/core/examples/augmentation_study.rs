//! How much each augmentation moves predicted attributes, and what training
//! with it does to accuracy.

use haszsl::augment::study_policies;
use haszsl::config::ExperimentConfig;
use haszsl::experiment::{augment_table, augmentation_study};

fn main() -> haszsl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 4;
    let policies: Vec<_> = study_policies().into_iter().step_by(2).collect();
    let study = augmentation_study(&cfg, &policies)?;
    print!("{}", augment_table(&study)?.to_csv());
    Ok(())
}
