//! Multi-seed experiments: single runs, the component ablation, weight and
//! budget sweeps, and the augmentation study.
//!
//! Seeds run in parallel; results always come back in seed order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{distortion_probe, AugmentPolicy, DistortionReport};
use crate::config::{ExperimentConfig, SweepAxis};
use crate::data::{generate_dataset, Protocol, SyntheticDataset};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::losses::LossWeights;
use crate::report::Table;
use crate::trainer::{train, TrainConfig, TrainSet, TrainState};

/// Dataset, split and training set for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: SyntheticDataset,
    pub protocol: Protocol,
    pub set: TrainSet,
}

/// Loads `dataset.path` when set, otherwise generates the benchmark for `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let dataset = match &cfg.dataset.path {
        Some(p) => SyntheticDataset::load(p)?,
        None => generate_dataset(&cfg.synth_for(seed))?,
    };
    let protocol = Protocol::new(&dataset, &cfg.eval.protocol, seed)?;
    let set = TrainSet::from_protocol(&dataset, &protocol)?;
    Ok(Prepared { dataset, protocol, set })
}

/// Trained weights and their evaluation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub state: TrainState,
    pub report: EvalReport,
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared, train_cfg: &TrainConfig) -> Result<RunOutcome> {
    let state = train(&prep.set, &cfg.model, train_cfg)?;
    let report = evaluate(&state.params, &prep.dataset, &prep.protocol, cfg.eval.mu_grid.as_deref())?;
    Ok(RunOutcome {
        seed: train_cfg.seed,
        state,
        report,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let prep = prepare(cfg, seed)?;
    run_prepared(cfg, &prep, &cfg.resolve_train(seed)?)
}

/// One row of the component ablation: which generator terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub adversarial: bool,
    pub rob: bool,
    pub rel: bool,
    pub div: bool,
}

const fn variant(name: &'static str, adversarial: bool, rob: bool, rel: bool, div: bool) -> Variant {
    Variant {
        name,
        adversarial,
        rob,
        rel,
        div,
    }
}

pub const VARIANTS: [Variant; 7] = [
    variant("baseline", false, false, false, false),
    variant("+CLS", true, false, false, false),
    variant("+CLS+ROB", true, true, false, false),
    variant("+CLS+DIV", true, false, false, true),
    variant("+CLS+ROB+REL", true, true, true, false),
    variant("+CLS+DIV+REL", true, false, true, true),
    variant("full", true, true, true, true),
];

impl Variant {
    pub fn by_name(name: &str) -> Option<Variant> {
        VARIANTS.iter().copied().find(|v| v.name == name)
    }

    /// `full` with the inactive terms zeroed.
    pub fn weights(&self, full: LossWeights) -> LossWeights {
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        LossWeights {
            lambda1: keep(self.rob, full.lambda1),
            lambda2: keep(self.rel, full.lambda2),
            lambda3: keep(self.div, full.lambda3),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.adversarial_enabled = self.adversarial;
        cfg.perturb.weights = self.weights(base.perturb.weights);
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub t1: f64,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic: f64,
    pub mu: f64,
}

impl SeedResult {
    pub fn from_report(seed: u64, r: &EvalReport) -> Self {
        Self {
            seed,
            t1: r.t1_unseen,
            acc_seen: r.acc_seen,
            acc_unseen: r.acc_unseen,
            harmonic: r.harmonic,
            mu: r.mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub t1: MeanStd,
    pub harmonic: MeanStd,
    pub runs: Vec<SeedResult>,
}

fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| f(s)).collect()
}

/// Trains every variant of `variants` on every seed of the config.
pub fn ablation_grid(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let by_seed = per_seed(&cfg.seeds, |seed| {
        let prep = prepare(cfg, seed)?;
        let base = cfg.resolve_train(seed)?;
        variants
            .iter()
            .map(|v| {
                let out = run_prepared(cfg, &prep, &v.apply(&base))?;
                log::info!("{} seed {seed}: H {:.2}", v.name, out.report.harmonic);
                Ok(SeedResult::from_report(seed, &out.report))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let runs: Vec<SeedResult> = by_seed.iter().map(|r| r[i].clone()).collect();
            AblationRow {
                variant: v.name.to_string(),
                t1: MeanStd::of(&runs.iter().map(|r| r.t1).collect::<Vec<_>>()),
                harmonic: MeanStd::of(&runs.iter().map(|r| r.harmonic).collect::<Vec<_>>()),
                runs,
            }
        })
        .collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> Result<Table> {
    let mut t = Table::new(&["variant", "seeds", "t1_mean", "t1_std", "h_mean", "h_std"]);
    for r in rows {
        t.push(vec![
            r.variant.as_str().into(),
            r.runs.len().into(),
            r.t1.mean.into(),
            r.t1.std.into(),
            r.harmonic.mean.into(),
            r.harmonic.std.into(),
        ])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    #[serde(flatten)]
    pub result: SeedResult,
}

/// One full-HAS run per (value, seed), values outermost.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        axis.set(&mut c.perturb, v);
        c.validate()?;
        configs.push(c);
    }
    let by_seed = per_seed(&cfg.seeds, |seed| {
        let prep = prepare(cfg, seed)?;
        configs
            .iter()
            .map(|c| run_prepared(c, &prep, &c.resolve_train(seed)?).map(|o| SeedResult::from_report(seed, &o.report)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::with_capacity(values.len() * cfg.seeds.len());
    for (i, &value) in values.iter().enumerate() {
        for r in &by_seed {
            rows.push(SweepRow {
                axis: axis.name().to_string(),
                value,
                result: r[i].clone(),
            });
        }
    }
    Ok(rows)
}

pub fn seed_table(first: &str, rows: &[(String, SeedResult)]) -> Result<Table> {
    let mut t = Table::new(&[first, "seed", "t1", "acc_seen", "acc_unseen", "h", "mu"]);
    for (key, r) in rows {
        t.push(vec![
            key.as_str().into(),
            r.seed.into(),
            r.t1.into(),
            r.acc_seen.into(),
            r.acc_unseen.into(),
            r.harmonic.into(),
            r.mu.into(),
        ])?;
    }
    Ok(t)
}

pub fn sweep_table(rows: &[SweepRow]) -> Result<Table> {
    let axis = rows.first().map(|r| r.axis.as_str()).unwrap_or("value");
    seed_table(axis, &rows.iter().map(|r| (crate::report::sig6(r.value), r.result.clone())).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    pub policy: String,
    pub result: SeedResult,
    /// Attribute drift of the policy applied at test time to the seed's baseline model.
    pub distortion: DistortionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentStudy {
    pub baseline: Vec<SeedResult>,
    /// Policy-major, seed-minor.
    pub rows: Vec<AugmentRow>,
}

/// Baseline training with each policy, plus the test-time distortion each
/// policy causes on the unaugmented baseline model.
pub fn augmentation_study(cfg: &ExperimentConfig, policies: &[AugmentPolicy]) -> Result<AugmentStudy> {
    for p in policies {
        p.validate()?;
    }
    let by_seed = per_seed(&cfg.seeds, |seed| {
        let prep = prepare(cfg, seed)?;
        let base = TrainConfig {
            adversarial_enabled: false,
            augment: None,
            ..cfg.resolve_train(seed)?
        };
        let clean = run_prepared(cfg, &prep, &base)?;
        let rows = policies
            .iter()
            .map(|p| {
                let distortion = probe_policy(&clean.state, &prep, p, seed)?;
                let tc = TrainConfig {
                    augment: Some(p.clone()),
                    ..base.clone()
                };
                let out = run_prepared(cfg, &prep, &tc)?;
                Ok(AugmentRow {
                    policy: p.label(),
                    result: SeedResult::from_report(seed, &out.report),
                    distortion,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((SeedResult::from_report(seed, &clean.report), rows))
    })?;
    let baseline = by_seed.iter().map(|(b, _)| b.clone()).collect();
    let mut rows = Vec::new();
    for i in 0..policies.len() {
        rows.extend(by_seed.iter().map(|(_, r)| r[i].clone()));
    }
    Ok(AugmentStudy { baseline, rows })
}

/// Test-time drift of `policy` on all test images, predictions over all classes.
pub fn probe_policy(state: &TrainState, prep: &Prepared, policy: &AugmentPolicy, seed: u64) -> Result<DistortionReport> {
    let idx: Vec<usize> = prep.protocol.test_seen.iter().chain(&prep.protocol.test_unseen).copied().collect();
    let images: Vec<_> = idx.iter().map(|&i| prep.dataset.samples[i].image.clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| prep.dataset.samples[i].class_id).collect();
    let candidates: Vec<usize> = (0..prep.dataset.num_classes()).collect();
    distortion_probe(&state.params, &images, &labels, &prep.dataset.semantics()?, &candidates, policy, seed)
}

pub fn augment_table(study: &AugmentStudy) -> Result<Table> {
    let mut t = Table::new(&["policy", "seed", "t1", "h", "h_delta", "mean_attr_drift"]);
    for r in &study.rows {
        let base = study.baseline.iter().find(|b| b.seed == r.result.seed).map_or(f64::NAN, |b| b.harmonic);
        t.push(vec![
            r.policy.as_str().into(),
            r.result.seed.into(),
            r.result.t1.into(),
            r.result.harmonic.into(),
            (r.result.harmonic - base).into(),
            r.distortion.mean_drift.into(),
        ])?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentKind;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "dataset": {"synth": {"seen_classes": 3, "unseen_classes": 2, "per_class": 10, "attributes": 4}},
                "model": {"channels": [4, 6], "attributes": 4},
                "train": {"epochs": 1, "batch_size": 16},
                "perturb": {"steps": 1},
                "seeds": [0, 1]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn variant_flags_zero_weights_as_named() {
        let full = LossWeights {
            lambda1: 0.3,
            lambda2: 2.0,
            lambda3: 1e-4,
        };
        let w = |n: &str| Variant::by_name(n).unwrap().weights(full);
        assert_eq!(w("+CLS"), LossWeights::ZERO);
        assert_eq!(w("+CLS+ROB"), LossWeights { lambda1: 0.3, ..LossWeights::ZERO });
        assert_eq!(w("+CLS+DIV"), LossWeights { lambda3: 1e-4, ..LossWeights::ZERO });
        assert_eq!(w("+CLS+ROB+REL"), LossWeights { lambda3: 0.0, ..full });
        assert_eq!(w("+CLS+DIV+REL"), LossWeights { lambda1: 0.0, ..full });
        assert_eq!(w("full"), full);
        assert!(!Variant::by_name("baseline").unwrap().adversarial);
        assert!(VARIANTS[1..].iter().all(|v| v.adversarial));
    }

    #[test]
    fn mean_std_uses_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn baseline_row_equals_plain_training() {
        let cfg = tiny();
        let rows = ablation_grid(&cfg, &VARIANTS[..1]).unwrap();
        assert_eq!(rows[0].runs.len(), 2);
        for (r, &seed) in rows[0].runs.iter().zip(&cfg.seeds) {
            let prep = prepare(&cfg, seed).unwrap();
            let tc = TrainConfig {
                adversarial_enabled: false,
                ..cfg.resolve_train(seed).unwrap()
            };
            let direct = run_prepared(&cfg, &prep, &tc).unwrap();
            assert_eq!(r, &SeedResult::from_report(seed, &direct.report));
        }
        let t = ablation_table(&rows).unwrap();
        assert!(t.to_csv().starts_with("variant,seeds,t1_mean,t1_std,h_mean,h_std\nbaseline,2,"));
    }

    #[test]
    fn zero_sweep_matches_ablated_variant() {
        let cfg = tiny();
        let rows = sweep(&cfg, SweepAxis::Lambda1, &[0.0, 1.0]).unwrap();
        assert_eq!(rows.len(), 2 * cfg.seeds.len());
        assert_eq!(sweep_table(&rows).unwrap().len(), 4);
        let ablated = ablation_grid(&cfg, &[Variant::by_name("+CLS+DIV+REL").unwrap()]).unwrap();
        for (s, a) in rows[..2].iter().zip(&ablated[0].runs) {
            assert_eq!(&s.result, a);
        }
    }

    #[test]
    fn augmentation_study_covers_every_policy_and_seed() {
        let cfg = tiny();
        let policies = vec![
            AugmentPolicy::new(AugmentKind::RandomCrop, 1.0, 1.0),
            AugmentPolicy::new(AugmentKind::Mixup, 1.0, 1.0),
        ];
        let study = augmentation_study(&cfg, &policies).unwrap();
        assert_eq!(study.baseline.len(), 2);
        assert_eq!(study.rows.len(), 4);
        assert_eq!(study.rows[0].policy, study.rows[1].policy);
        assert_eq!(augment_table(&study).unwrap().len(), 4);
    }
}
