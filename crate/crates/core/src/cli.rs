//! Command-line front end.
//!
//! Per-seed commands write to `<out>/seed_<s>/<command>/`, multi-seed studies
//! to `<out>/`. Every output directory holds a copy of the resolved
//! configuration and a `manifest.json` hashing each produced file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{load_params, load_state, save_params, save_state};
use crate::config::{ExperimentConfig, SweepAxis, VisualKind};
use crate::data::{generate_dataset, Protocol};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiment::{
    ablation_grid, ablation_table, augment_table, augmentation_study, prepare, seed_table, sweep, sweep_table, Prepared,
    SeedResult, VARIANTS,
};
use crate::figures::{export_attention, export_drift, export_perturbation};
use crate::report::{RunDir, Table};
use crate::trainer::{train_until, TrainState, TrainingLog};

pub const THREADS_ENV: &str = "HASZSL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "haszsl", version, about = "Adversarial-sample training for attribute-based zero-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run this seed only instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic benchmark to disk.
    GenerateData(Common),
    /// Train a model; writes weights, a resumable state and the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `state.ckpt` in the seed's output directory.
        #[arg(long)]
        resume: bool,
        /// Stop (with a resumable state) once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate trained weights: T1, S, U, H and the calibration curve.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Component ablation, or the augmentation study with `--study augment`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "components")]
        study: Study,
    },
    /// Sensitivity of full training to one weight or the budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda1 | lambda2 | lambda3 | epsilon; defaults to the config's sweep axis.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Export attention overlays, perturbation panels or feature drift.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        what: Option<What>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Components,
    Augment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum What {
    Attention,
    Perturbation,
    Drift,
}

impl From<What> for VisualKind {
    fn from(w: What) -> Self {
        match w {
            What::Attention => VisualKind::Attention,
            What::Perturbation => VisualKind::Perturbation,
            What::Drift => VisualKind::Drift,
        }
    }
}

/// Caps the global worker pool at `HASZSL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))
}

struct Resolved {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn resolve(c: &Common) -> Result<Resolved> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(Resolved {
        out: cfg.output_dir.clone(),
        cfg,
    })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Config for a single-seed directory: that seed only.
fn for_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    }
}

fn open_run(root: &Path, cfg: &ExperimentConfig) -> Result<RunDir> {
    let mut run = RunDir::create(root)?;
    let mut text = cfg.to_pretty_json();
    text.push('\n');
    run.write("config.json", text.as_bytes())?;
    Ok(run)
}

fn each_seed(cfg: &ExperimentConfig, f: impl Fn(u64) -> Result<()> + Sync) -> Result<()> {
    cfg.seeds.par_iter().map(|&s| f(s)).collect::<Vec<_>>().into_iter().collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => generate_data(&resolve(&c)?),
        Command::Train {
            common,
            resume,
            stop_after,
        } => cmd_train(&resolve(&common)?, resume, stop_after),
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(&common)?, checkpoint),
        Command::Ablate { common, study } => cmd_ablate(&resolve(&common)?, study),
        Command::Sweep { common, axis, values } => cmd_sweep(&resolve(&common)?, axis, values),
        Command::Visualize {
            common,
            what,
            checkpoint,
        } => cmd_visualize(&resolve(&common)?, what.map(Into::into), checkpoint),
    }
}

fn generate_data(r: &Resolved) -> Result<()> {
    if r.cfg.dataset.path.is_some() {
        return Err(Error::Config("generate-data renders the synthetic benchmark; unset dataset.path".into()));
    }
    each_seed(&r.cfg, |seed| {
        let cfg = for_seed(&r.cfg, seed);
        let mut run = open_run(&seed_dir(&r.out, seed).join("data"), &cfg)?;
        let ds = generate_dataset(&cfg.synth_for(seed))?;
        ds.save(&run.path("dataset"))?;
        for f in ["dataset/manifest.json", "dataset/images.bin", "dataset/masks.bin"] {
            run.record_existing(f)?;
        }
        println!("seed {seed}: {} images, dataset {}", ds.samples.len(), ds.hash());
        run.finish().map(drop)
    })
}

fn log_table(log: &TrainingLog) -> Result<Table> {
    let mut t = Table::new(&["epoch", "batch", "phase", "cls_loss", "loc_loss", "lr", "wall_ms"]);
    for r in &log.rows {
        let phase = match r.phase {
            crate::trainer::Phase::Standard => "standard",
            crate::trainer::Phase::Adversarial => "adversarial",
        };
        t.push(vec![
            r.epoch.into(),
            r.batch.into(),
            phase.into(),
            r.cls_loss.into(),
            r.loc_loss.into(),
            r.lr.into(),
            r.wall_ms.into(),
        ])?;
    }
    Ok(t)
}

fn permutation_table(log: &TrainingLog) -> Result<Table> {
    let mut t = Table::new(&["epoch", "permutation_sha256"]);
    for (e, h) in log.permutation_hashes.iter().enumerate() {
        t.push(vec![e.into(), h.as_str().into()])?;
    }
    Ok(t)
}

fn cmd_train(r: &Resolved, resume: bool, stop_after: Option<usize>) -> Result<()> {
    each_seed(&r.cfg, |seed| {
        let cfg = for_seed(&r.cfg, seed);
        let dir = seed_dir(&r.out, seed).join("train");
        let tc = cfg.resolve_train(seed)?;
        let hash = cfg.sha256();
        let state_path = dir.join("state.ckpt");
        let mut state = if resume {
            let (st, header) = load_state(&state_path)?;
            if header.config_sha256.as_deref() != Some(hash.as_str()) {
                return Err(Error::Config(format!(
                    "{} was written under a different configuration",
                    state_path.display()
                )));
            }
            st
        } else {
            TrainState::new(&cfg.model, &tc)?
        };
        let prep = prepare(&cfg, seed)?;
        let until = stop_after.unwrap_or(tc.epochs).min(tc.epochs);
        train_until(&mut state, &prep.set, &tc, until)?;

        let mut run = open_run(&dir, &cfg)?;
        save_state(&state_path, &state, seed, Some(hash.clone()))?;
        run.record_existing("state.ckpt")?;
        run.write("train_log.csv", log_table(&state.log)?.to_csv().as_bytes())?;
        run.write("permutations.csv", permutation_table(&state.log)?.to_csv().as_bytes())?;
        if state.epochs_done >= tc.epochs {
            save_params(&run.path("model.ckpt"), &state.params, seed, Some(hash))?;
            run.record_existing("model.ckpt")?;
            println!("seed {seed}: trained {} epochs -> {}", state.epochs_done, run.path("model.ckpt").display());
        } else {
            println!("seed {seed}: stopped after epoch {}; resume with --resume", state.epochs_done);
        }
        run.finish().map(drop)
    })
}

fn checkpoint_path(cfg: &ExperimentConfig, flag: &Option<PathBuf>, out: &Path, seed: u64) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| seed_dir(out, seed).join("train").join("model.ckpt"))
}

fn load_for(cfg: &ExperimentConfig, path: &Path, seed: u64) -> Result<(crate::model::ModelParams, Prepared)> {
    let (params, _) = load_params(path)?;
    let prep = prepare(cfg, seed)?;
    if params.config.attributes != prep.dataset.attributes.len() {
        return Err(Error::Config(format!(
            "{} predicts {} attributes but the dataset has {}",
            path.display(),
            params.config.attributes,
            prep.dataset.attributes.len()
        )));
    }
    Ok((params, prep))
}

fn cmd_eval(r: &Resolved, checkpoint: Option<PathBuf>) -> Result<()> {
    each_seed(&r.cfg, |seed| {
        let cfg = for_seed(&r.cfg, seed);
        let (params, prep) = load_for(&cfg, &checkpoint_path(&cfg, &checkpoint, &r.out, seed), seed)?;
        let report = evaluate(&params, &prep.dataset, &prep.protocol, cfg.eval.mu_grid.as_deref())?;
        let mut run = open_run(&seed_dir(&r.out, seed).join("eval"), &cfg)?;
        run.write_json("eval.json", &report)?;
        let mut curve = Table::new(&["mu", "acc_seen", "acc_unseen", "h"]);
        for p in &report.calibration.points {
            curve.push(vec![p.mu.into(), p.acc_seen.into(), p.acc_unseen.into(), p.harmonic.into()])?;
        }
        run.write("calibration.csv", curve.to_csv().as_bytes())?;
        let mut classes = Table::new(&["class", "split", "samples", "gzsl_acc"]);
        for c in &report.per_class {
            let split = if c.split == crate::data::SplitKind::Seen { "seen" } else { "unseen" };
            classes.push(vec![c.class_id.into(), split.into(), c.samples.into(), c.gzsl_acc.into()])?;
        }
        run.write("per_class.csv", classes.to_csv().as_bytes())?;
        println!(
            "seed {seed}: T1 {:.2}  S {:.2}  U {:.2}  H {:.2}  (mu {:.4})",
            report.t1_unseen, report.acc_seen, report.acc_unseen, report.harmonic, report.mu
        );
        run.finish().map(drop)
    })
}

fn cmd_ablate(r: &Resolved, study: Study) -> Result<()> {
    let mut run = open_run(&r.out, &r.cfg)?;
    match study {
        Study::Components => {
            let rows = ablation_grid(&r.cfg, &VARIANTS)?;
            run.write("ablation.csv", ablation_table(&rows)?.to_csv().as_bytes())?;
            let per_seed: Vec<(String, SeedResult)> = rows
                .iter()
                .flat_map(|row| row.runs.iter().map(|s| (row.variant.clone(), s.clone())))
                .collect();
            run.write("ablation_runs.csv", seed_table("variant", &per_seed)?.to_csv().as_bytes())?;
            for row in &rows {
                println!(
                    "{:<14} T1 {:6.2} ± {:5.2}   H {:6.2} ± {:5.2}   ({} seeds)",
                    row.variant,
                    row.t1.mean,
                    row.t1.std,
                    row.harmonic.mean,
                    row.harmonic.std,
                    row.runs.len()
                );
            }
        }
        Study::Augment => {
            let study = augmentation_study(&r.cfg, &r.cfg.augment_policies())?;
            run.write("augment.csv", augment_table(&study)?.to_csv().as_bytes())?;
            run.write_json("augment.json", &study)?;
            for row in study.rows.iter().filter(|row| row.result.seed == r.cfg.seeds[0]) {
                println!(
                    "{:<18} H {:6.2}  attribute drift {:.4}",
                    row.policy, row.result.harmonic, row.distortion.mean_drift
                );
            }
        }
    }
    run.finish().map(drop)
}

fn cmd_sweep(r: &Resolved, axis: Option<String>, values: Option<Vec<f64>>) -> Result<()> {
    let axis = match axis {
        Some(a) => SweepAxis::parse(&a)?,
        None => r.cfg.sweep.axis,
    };
    let values = values
        .or_else(|| r.cfg.sweep.values.clone())
        .unwrap_or_else(|| axis.default_grid());
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut run = open_run(&r.out, &r.cfg)?;
    let rows = sweep(&r.cfg, axis, &values)?;
    run.write("sweep.csv", sweep_table(&rows)?.to_csv().as_bytes())?;
    for row in &rows {
        println!("{} = {:<8} seed {}: H {:.2}", row.axis, row.value, row.result.seed, row.result.harmonic);
    }
    run.finish().map(drop)
}

/// Alternates unseen and seen test images, up to `n`.
fn pick_samples(protocol: &Protocol, n: usize) -> Vec<usize> {
    let (u, s) = (&protocol.test_unseen, &protocol.test_seen);
    (0..u.len().max(s.len()))
        .flat_map(|i| [u.get(i), s.get(i)])
        .flatten()
        .copied()
        .take(n)
        .collect()
}

fn cmd_visualize(r: &Resolved, what: Option<VisualKind>, checkpoint: Option<PathBuf>) -> Result<()> {
    let what = what.unwrap_or(r.cfg.visualize.what);
    each_seed(&r.cfg, |seed| {
        let cfg = for_seed(&r.cfg, seed);
        let (params, prep) = load_for(&cfg, &checkpoint_path(&cfg, &checkpoint, &r.out, seed), seed)?;
        let samples = pick_samples(&prep.protocol, cfg.visualize.samples);
        let zoom = cfg.visualize.zoom;
        let perturb = cfg.perturb.to_config()?;
        let sub = match what {
            VisualKind::Attention => "attention",
            VisualKind::Perturbation => "perturbation",
            VisualKind::Drift => "drift",
        };
        let mut run = open_run(&seed_dir(&r.out, seed).join(format!("visualize_{sub}")), &cfg)?;
        match what {
            VisualKind::Attention => {
                let loc = export_attention(&mut run, &params, &prep.dataset, &samples, zoom)?;
                println!("seed {seed}: attention peak in motif cell for {:.1}% of active attributes", loc.rate);
            }
            VisualKind::Perturbation => {
                let ious = export_perturbation(&mut run, &params, &prep.dataset, &samples, &perturb, zoom)?;
                let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
                println!("seed {seed}: mean foreground/motif IoU {mean:.3}");
            }
            VisualKind::Drift => {
                let d = export_drift(&mut run, &params, &prep.dataset, &samples, &perturb)?;
                println!("seed {seed}: mean max feature drift {d:.4}");
            }
        }
        run.finish().map(drop)
    })
}
