//! Trains a short baseline and prints the seen/unseen trade-off as the
//! calibration offset grows.

use haszsl::config::ExperimentConfig;
use haszsl::eval::{auto_mu_grid, calibration_sweep, ScoreTable};
use haszsl::experiment::{prepare, run_prepared};

fn main() -> haszsl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 25;
    cfg.train.adversarial_enabled = false;
    let prep = prepare(&cfg, 0)?;
    let run = run_prepared(&cfg, &prep, &cfg.resolve_train(0)?)?;

    let ds = &prep.dataset;
    let semantics = ds.semantics()?;
    let seen: Vec<bool> = (0..ds.num_classes()).map(|c| ds.is_seen(c)).collect();
    let seen_t = ScoreTable::compute(&run.state.params, ds, &prep.protocol.test_seen, &semantics)?;
    let unseen_t = ScoreTable::compute(&run.state.params, ds, &prep.protocol.test_unseen, &semantics)?;

    let grid = auto_mu_grid(&[&seen_t, &unseen_t], &seen);
    let curve = calibration_sweep(&seen_t, &unseen_t, &seen, &grid)?;
    println!("{:>10} {:>7} {:>7} {:>7}", "mu", "seen", "unseen", "H");
    let stride = (curve.points.len() / 12).max(1);
    for p in curve.points.iter().step_by(stride) {
        println!("{:>10.4} {:>7.1} {:>7.1} {:>7.1}", p.mu, p.acc_seen, p.acc_unseen, p.harmonic);
    }
    println!("best mu on test (oracle): {:.4}", curve.best_mu);
    println!("mu chosen on validation:  {:.4}", run.report.mu);
    Ok(())
}
