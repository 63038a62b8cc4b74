//! Trains briefly, writes attention overlays and adversarial perturbation
//! panels as PPM files, and reports how often attention peaks land on the
//! right cell.
//!
//! `cargo run --release --example attention_maps -- [out_dir]`

use haszsl::config::ExperimentConfig;
use haszsl::experiment::{prepare, run_prepared};
use haszsl::figures::{export_attention, export_perturbation};
use haszsl::report::RunDir;

fn main() -> haszsl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_attention".into());
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 15;
    let prep = prepare(&cfg, 0)?;
    let run = run_prepared(&cfg, &prep, &cfg.resolve_train(0)?)?;

    let samples: Vec<usize> = prep.protocol.test_unseen.iter().take(4).copied().collect();
    let mut dir = RunDir::create(out.as_ref())?;
    let loc = export_attention(&mut dir, &run.state.params, &prep.dataset, &samples, 4)?;
    let ious = export_perturbation(&mut dir, &run.state.params, &prep.dataset, &samples, &cfg.perturb.to_config()?, 4)?;
    let files = dir.finish()?;

    println!("localization {:.1}% over {} pairs", loc.rate, loc.pairs.len());
    println!("perturbation / motif IoU {ious:.3?}");
    println!("{} files under {out}", files.len());
    Ok(())
}
