//! Trains the same seed with and without the adversarial phase and reports
//! GZSL accuracy for both.
//!
//! `cargo run --release --example train_has -- [epochs]`

use haszsl::config::ExperimentConfig;
use haszsl::experiment::{prepare, run_prepared};

fn main() -> haszsl::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = epochs;
    let prep = prepare(&cfg, 0)?;

    for adversarial in [false, true] {
        let mut train = cfg.resolve_train(0)?;
        train.adversarial_enabled = adversarial;
        let run = run_prepared(&cfg, &prep, &train)?;
        let r = &run.report;
        println!(
            "{:<9} T1 {:5.1}  S {:5.1}  U {:5.1}  H {:5.1}  mu {:.3}  ({} adversarial updates)",
            if adversarial { "has" } else { "baseline" },
            r.t1_unseen,
            r.acc_seen,
            r.acc_unseen,
            r.harmonic,
            r.mu,
            run.state.updates.adversarial
        );
    }
    Ok(())
}
