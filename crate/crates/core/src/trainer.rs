//! Alternating clean / adversarial training with Adam.
//!
//! Every batch gets one Adam update on the clean images, then (when enabled)
//! adversarial images are generated from the updated weights and a second
//! update is taken on them. Both updates share one optimizer state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{generate_adversarial, PerturbConfig};
use crate::augment::{apply, AugmentPolicy};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Image, Protocol, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{forward_on_tape, ModelConfig, ModelParams, Semantics};

const AUGMENT_SALT: u64 = 0xa06_3e47;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_decay_every")]
    pub decay_every: usize,
    /// Weight of the attribute localization loss next to cross-entropy.
    #[serde(default = "d_one")]
    pub loc_weight: f64,
    /// Filled from the experiment's perturbation section.
    #[serde(skip)]
    pub perturb: PerturbConfig,
    /// Filled per run from the experiment's seed list.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub adversarial_enabled: bool,
    /// Optional conventional augmentation applied to clean batches.
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// Record per-row wall time; off by default so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-2
}
fn d_beta1() -> f64 {
    0.5
}
fn d_beta2() -> f64 {
    0.999
}
fn d_decay() -> f64 {
    0.8
}
fn d_decay_every() -> usize {
    10
}
fn d_one() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0) || self.decay_every == 0 {
            return bad("lr_decay must be positive and decay_every >= 1");
        }
        if !(self.loc_weight >= 0.0) {
            return bad("loc_weight must be >= 0");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.perturb.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
}

pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
        }
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients before touching
/// any state.
pub fn adam_update(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let names = params.names();
    let mut targets = params.tensors_mut();
    if grads.len() != targets.len() || state.m.len() != targets.len() {
        return Err(Error::dim("adam_update", &[targets.len()], &[grads.len()]));
    }
    for ((p, g), name) in targets.iter().zip(grads).zip(&names) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_update", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric {
                component: format!("gradient of {name}"),
                detail: "non-finite value in Adam update".into(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in targets.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Image with a (possibly mixed) target over training-class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Image,
    pub target: Vec<(usize, f64)>,
}

impl Example {
    pub fn new(image: Image, label: usize) -> Self {
        Self {
            image,
            target: vec![(label, 1.0)],
        }
    }

    /// Heaviest component of the target; first one on ties.
    pub fn primary_label(&self) -> usize {
        let mut best = self.target[0];
        for &t in &self.target[1..] {
            if t.1 > best.1 {
                best = t;
            }
        }
        best.0
    }
}

/// Seen-class training images with labels indexing `semantics` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub semantics: Semantics,
    /// Dataset class id of each semantics row.
    pub class_ids: Vec<usize>,
}

impl TrainSet {
    pub fn from_protocol(dataset: &SyntheticDataset, protocol: &Protocol) -> Result<Self> {
        let class_ids = dataset.class_ids(crate::data::SplitKind::Seen);
        let all = dataset.semantics()?;
        let semantics = all.select(&class_ids)?;
        let mut images = Vec::with_capacity(protocol.train.len());
        let mut labels = Vec::with_capacity(protocol.train.len());
        for &i in &protocol.train {
            let s = &dataset.samples[i];
            let row = class_ids
                .iter()
                .position(|&c| c == s.class_id)
                .ok_or_else(|| Error::contract("train set", format!("class {} is not seen", s.class_id)))?;
            images.push(s.image.clone());
            labels.push(row);
        }
        Ok(Self {
            images,
            labels,
            semantics,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Mean losses of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub cls_loss: f64,
    pub loc_loss: f64,
}

fn sample_gradients(
    example: &Example,
    params: &ModelParams,
    semantics: &Semantics,
    loc_weight: f64,
) -> Result<(Vec<Tensor>, f64, f64)> {
    let mut tape = Tape::new();
    let pv = params.record(&mut tape, true);
    let iv = tape.constant(example.image.to_tensor());
    let fv = forward_on_tape(&mut tape, iv, &pv, &params.config, semantics)?;
    let cls = losses::cls_mixture(&mut tape, fv.class_scores, &example.target)?;
    let k = semantics.num_attributes();
    let mut phi = vec![0.0; k];
    for &(c, w) in &example.target {
        if c >= semantics.num_classes() {
            return Err(Error::Index {
                what: "training class",
                index: c,
                len: semantics.num_classes(),
            });
        }
        for (p, v) in phi.iter_mut().zip(semantics.row(c)) {
            *p += w * v;
        }
    }
    let loc = losses::loc(&mut tape, fv.attr_local, &phi)?;
    let weighted = tape.scale(loc, loc_weight);
    let total = tape.add(cls, weighted)?;
    let (cls_v, loc_v) = (tape.value(cls).item(), tape.value(loc).item());
    for (name, v) in [("cls", cls_v), ("loc", loc_v)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                component: format!("{name} loss"),
                detail: "non-finite training loss".into(),
            });
        }
    }
    let mut grads = tape.backward(total)?;
    let g = pv.all().into_iter().map(|v| grads.take(v)).collect::<Option<Vec<_>>>();
    let g = g.ok_or_else(|| Error::contract("sample_gradients", "missing parameter gradient"))?;
    Ok((g, cls_v, loc_v))
}

/// Batch-mean gradients of `cls + loc_weight·loc` and the mean loss values.
/// Per-sample work runs in parallel; the reduction is in sample order.
pub fn batch_gradients(
    batch: &[Example],
    params: &ModelParams,
    semantics: &Semantics,
    loc_weight: f64,
) -> Result<(Vec<Tensor>, StepStats)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per: Vec<(Vec<Tensor>, f64, f64)> = batch
        .par_iter()
        .map(|e| sample_gradients(e, params, semantics, loc_weight))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut sum: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut cls, mut loc) = (0.0, 0.0);
    for (g, c, l) in &per {
        for (acc, gi) in sum.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
        cls += c;
        loc += l;
    }
    for t in &mut sum {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((
        sum,
        StepStats {
            cls_loss: cls / n,
            loc_loss: loc / n,
        },
    ))
}

/// One Adam update on the clean batch.
pub fn standard_step(
    batch: &[Example],
    semantics: &Semantics,
    params: &mut ModelParams,
    opt: &mut AdamState,
    lr: f64,
    loc_weight: f64,
) -> Result<StepStats> {
    let (grads, stats) = batch_gradients(batch, params, semantics, loc_weight)?;
    adam_update(params, &grads, opt, lr)?;
    Ok(stats)
}

/// Generates adversarial images from the current (frozen) weights, then takes
/// one Adam update on them with the original targets.
pub fn adversarial_step(
    batch: &[Example],
    semantics: &Semantics,
    params: &mut ModelParams,
    opt: &mut AdamState,
    lr: f64,
    loc_weight: f64,
    perturb: &PerturbConfig,
) -> Result<StepStats> {
    let images: Vec<Image> = batch.iter().map(|e| e.image.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(Example::primary_label).collect();
    let adv = generate_adversarial(&images, &labels, params, semantics, perturb)?;
    let adv_batch: Vec<Example> = adv
        .adv
        .into_iter()
        .zip(batch)
        .map(|(image, e)| Example {
            image,
            target: e.target.clone(),
        })
        .collect();
    standard_step(&adv_batch, semantics, params, opt, lr, loc_weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Standard,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// SHA-256 of each epoch's sample order.
    pub permutation_hashes: Vec<String>,
}

impl TrainingLog {
    /// Mean of a column over the rows of one epoch and phase.
    pub fn epoch_mean(&self, epoch: usize, phase: Phase, f: impl Fn(&LogRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch && r.phase == phase).map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub standard: u64,
    pub adversarial: u64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub log: TrainingLog,
    pub updates: UpdateCounters,
}

impl TrainState {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(cfg.seed, model)?;
        let adam = AdamState::new(&params, cfg.beta1, cfg.beta2);
        Ok(Self {
            params,
            adam,
            epochs_done: 0,
            log: TrainingLog::default(),
            updates: UpdateCounters::default(),
        })
    }
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn permutation_hash(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn augment_batch(policy: &AugmentPolicy, set: &TrainSet, idx: &[usize], seed: u64, epoch: usize, offset: usize) -> Result<Vec<Example>> {
    idx.iter()
        .enumerate()
        .map(|(j, &i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
            rng.set_stream(((epoch as u64) << 32) | (offset + j) as u64);
            let p = idx[(j + 1) % idx.len()];
            let out = apply(policy, &set.images[i], set.labels[i], Some((&set.images[p], set.labels[p])), &mut rng)?;
            Ok(Example {
                image: out.image,
                target: out.labels,
            })
        })
        .collect()
}

/// Trains from `state` until `until_epoch` epochs are complete.
pub fn train_until(state: &mut TrainState, set: &TrainSet, cfg: &TrainConfig, until_epoch: usize) -> Result<()> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    while state.epochs_done < until_epoch.min(cfg.epochs) {
        let epoch = state.epochs_done;
        let lr = cfg.lr_at(epoch);
        let order = epoch_permutation(set.len(), cfg.seed, epoch);
        state.log.permutation_hashes.push(permutation_hash(&order));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = match &cfg.augment {
                Some(policy) => augment_batch(policy, set, idx, cfg.seed, epoch, b * cfg.batch_size)?,
                None => idx.iter().map(|&i| Example::new(set.images[i].clone(), set.labels[i])).collect(),
            };
            let clock = Instant::now();
            let stats = standard_step(&batch, &set.semantics, &mut state.params, &mut state.adam, lr, cfg.loc_weight)?;
            state.updates.standard += 1;
            let ms = |c: Instant| if cfg.record_wall_time { c.elapsed().as_millis() as u64 } else { 0 };
            state.log.rows.push(LogRow {
                epoch,
                batch: b,
                phase: Phase::Standard,
                cls_loss: stats.cls_loss,
                loc_loss: stats.loc_loss,
                lr,
                wall_ms: ms(clock),
            });
            if cfg.adversarial_enabled {
                let clock = Instant::now();
                let stats = adversarial_step(
                    &batch,
                    &set.semantics,
                    &mut state.params,
                    &mut state.adam,
                    lr,
                    cfg.loc_weight,
                    &cfg.perturb,
                )?;
                state.updates.adversarial += 1;
                state.log.rows.push(LogRow {
                    epoch,
                    batch: b,
                    phase: Phase::Adversarial,
                    cls_loss: stats.cls_loss,
                    loc_loss: stats.loc_loss,
                    lr,
                    wall_ms: ms(clock),
                });
            }
        }
        state.epochs_done += 1;
        log::debug!(
            "epoch {epoch}: cls {:.4}",
            state.log.epoch_mean(epoch, Phase::Standard, |r| r.cls_loss).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Full training run from a fresh initialization.
pub fn train(set: &TrainSet, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg)?;
    train_until(&mut state, set, cfg, cfg.epochs)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use rand::Rng;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: vec![4, 6],
            attributes: 3,
            ..ModelConfig::default()
        }
    }

    /// Two classes: bright left half vs bright right half.
    fn toy_set(n: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let mut img = Image::zeros(3, 8, 8);
            for c in 0..3 {
                for r in 0..8 {
                    for x in 0..8 {
                        let on = (x < 4) == (y == 0);
                        let base = if on { 0.8 } else { 0.1 };
                        img.set(c, r, x, (base + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(img);
            labels.push(y);
        }
        TrainSet {
            images,
            labels,
            semantics: Semantics::new(&[vec![0.9, 0.1, 0.5], vec![0.1, 0.9, 0.5]]).unwrap(),
            class_ids: vec![0, 1],
        }
    }

    fn scalar_adam(g: &[f64], lr: f64, b1: f64, b2: f64, mut w: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &gi) in g.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * gi;
            v = b2 * v + (1.0 - b2) * gi * gi;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    fn with_first(params: &mut ModelParams, value: f64) {
        params.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        params.backbone[0].data_mut()[0] = value;
    }

    fn grads_like(params: &ModelParams, first: f64) -> Vec<Tensor> {
        let mut g: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        g[0].data_mut()[0] = first;
        g
    }

    #[test]
    fn adam_zero_gradient_and_single_step() {
        let mut p = ModelParams::init(0, &tiny_model()).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.5, 0.999);
        let zero = grads_like(&p, 0.0);
        adam_update(&mut p, &zero, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        with_first(&mut p, 2.0);
        let mut st = AdamState::new(&p, 0.5, 0.999);
        let g = grads_like(&p, 1.0);
        adam_update(&mut p, &g, &mut st, 1e-3).unwrap();
        assert!((p.backbone[0].data()[0] - (2.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        let mut p = ModelParams::init(0, &tiny_model()).unwrap();
        with_first(&mut p, 1.5);
        let mut st = AdamState::new(&p, 0.5, 0.999);
        let mut seen = Vec::new();
        for _ in 0..2 {
            let w = p.backbone[0].data()[0];
            let g = 2.0 * (w - 0.3);
            seen.push(g);
            let gs = grads_like(&p, g);
            adam_update(&mut p, &gs, &mut st, 0.01).unwrap();
        }
        let want = scalar_adam(&seen, 0.01, 0.5, 0.999, 1.5);
        assert!((p.backbone[0].data()[0] - want).abs() < 1e-12);
        // the oracle must also reproduce the gradient sequence it was fed
        let w1 = scalar_adam(&seen[..1], 0.01, 0.5, 0.999, 1.5);
        assert_eq!(seen[1], 2.0 * (w1 - 0.3));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = ModelParams::init(0, &tiny_model()).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.5, 0.999);
        let mut g = grads_like(&p, 0.0);
        g[2].data_mut()[1] = f64::NAN;
        match adam_update(&mut p, &g, &mut st, 1e-3) {
            Err(Error::Numeric { component, .. }) => assert!(component.contains("V")),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-2);
        assert_eq!(cfg.lr_at(9), 1e-2);
        assert_eq!(cfg.lr_at(10), 1e-2 * 0.8);
        assert_eq!(cfg.lr_at(25), 1e-2 * 0.8f64.powi(2));
        assert_eq!(cfg.beta1, 0.5);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn standard_steps_fit_separable_toy() {
        let set = toy_set(16, 1);
        let batch: Vec<Example> = (0..16).map(|i| Example::new(set.images[i].clone(), set.labels[i])).collect();
        let mut p = ModelParams::init(3, &tiny_model()).unwrap();
        let mut opt = AdamState::new(&p, 0.5, 0.999);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = standard_step(&batch, &set.semantics, &mut p, &mut opt, 0.01, 1.0).unwrap().cls_loss;
        }
        let (_, end) = batch_gradients(&batch, &p, &set.semantics, 1.0).unwrap();
        assert!(end.cls_loss < 0.1, "cls after 200 steps: {} (last step {last})", end.cls_loss);
    }

    #[test]
    fn first_small_step_lowers_loss_on_most_seeds() {
        let set = toy_set(8, 2);
        let batch: Vec<Example> = (0..8).map(|i| Example::new(set.images[i].clone(), set.labels[i])).collect();
        let mut down = 0;
        for seed in 0..20 {
            let mut p = ModelParams::init(seed, &tiny_model()).unwrap();
            let mut opt = AdamState::new(&p, 0.5, 0.999);
            let before = standard_step(&batch, &set.semantics, &mut p, &mut opt, 1e-4, 1.0).unwrap();
            let (_, after) = batch_gradients(&batch, &p, &set.semantics, 1.0).unwrap();
            if after.cls_loss + after.loc_loss < before.cls_loss + before.loc_loss {
                down += 1;
            }
        }
        assert!(down >= 18, "{down}/20");
    }

    #[test]
    fn single_sample_equals_repeated_batch() {
        let set = toy_set(2, 3);
        let e = Example::new(set.images[0].clone(), 0);
        let p = ModelParams::init(5, &tiny_model()).unwrap();
        let (g1, s1) = batch_gradients(std::slice::from_ref(&e), &p, &set.semantics, 1.0).unwrap();
        let (g4, s4) = batch_gradients(&vec![e; 4], &p, &set.semantics, 1.0).unwrap();
        assert!((s1.cls_loss - s4.cls_loss).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g4) {
            assert!(a.max_abs_diff(b) < 1e-14);
        }
    }

    #[test]
    fn adversarial_step_with_zero_epsilon_matches_standard_step() {
        let set = toy_set(6, 4);
        let batch: Vec<Example> = (0..6).map(|i| Example::new(set.images[i].clone(), set.labels[i])).collect();
        let mut pa = ModelParams::init(6, &tiny_model()).unwrap();
        let mut oa = AdamState::new(&pa, 0.5, 0.999);
        let (mut pb, mut ob) = (pa.clone(), oa.clone());
        let cfg = PerturbConfig {
            epsilon: 0.0,
            ..PerturbConfig::default()
        };
        let a = adversarial_step(&batch, &set.semantics, &mut pa, &mut oa, 1e-3, 1.0, &cfg).unwrap();
        let b = standard_step(&batch, &set.semantics, &mut pb, &mut ob, 1e-3, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(oa, ob);
    }

    #[test]
    fn adversarial_update_equals_update_on_detached_images() {
        let set = toy_set(6, 4);
        let batch: Vec<Example> = (0..6).map(|i| Example::new(set.images[i].clone(), set.labels[i])).collect();
        let p0 = ModelParams::init(7, &tiny_model()).unwrap();
        let o0 = AdamState::new(&p0, 0.5, 0.999);
        let cfg = PerturbConfig::from_255(4.0, 2, LossWeights::default());

        let (mut pa, mut oa) = (p0.clone(), o0.clone());
        adversarial_step(&batch, &set.semantics, &mut pa, &mut oa, 1e-3, 1.0, &cfg).unwrap();
        assert_ne!(pa, p0);

        let images: Vec<Image> = batch.iter().map(|e| e.image.clone()).collect();
        let adv = generate_adversarial(&images, &set.labels[..6], &p0, &set.semantics, &cfg).unwrap();
        let detached: Vec<Example> = adv.adv.into_iter().zip(&set.labels).map(|(i, &y)| Example::new(i, y)).collect();
        let (mut pb, mut ob) = (p0.clone(), o0.clone());
        standard_step(&detached, &set.semantics, &mut pb, &mut ob, 1e-3, 1.0).unwrap();
        assert_eq!(pa, pb);
    }

    fn quick_cfg(adv: bool) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 11,
            adversarial_enabled: adv,
            decay_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn update_counts_schedule_and_determinism() {
        let set = toy_set(10, 5);
        for adv in [false, true] {
            let cfg = quick_cfg(adv);
            let a = train(&set, &tiny_model(), &cfg).unwrap();
            let per_epoch = 3u64; // ceil(10 / 4)
            assert_eq!(a.updates.standard, 3 * per_epoch);
            assert_eq!(a.updates.adversarial, if adv { 3 * per_epoch } else { 0 });
            assert_eq!(a.adam.step, a.updates.standard + a.updates.adversarial);
            assert!(a.log.rows.iter().all(|r| r.lr == cfg.lr_at(r.epoch) && r.wall_ms == 0));
            assert_eq!(a.log.rows.last().unwrap().lr, 1e-3 * 0.8);
            let b = train(&set, &tiny_model(), &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let set = toy_set(10, 5);
        let cfg = quick_cfg(true);
        let full = train(&set, &tiny_model(), &cfg).unwrap();
        let mut part = TrainState::new(&tiny_model(), &cfg).unwrap();
        train_until(&mut part, &set, &cfg, 1).unwrap();
        assert_eq!(part.epochs_done, 1);
        train_until(&mut part, &set, &cfg, cfg.epochs).unwrap();
        assert_eq!(part, full);
    }

    #[test]
    fn shuffle_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_permutation(50, 3, 7), epoch_permutation(50, 3, 7));
        assert_ne!(epoch_permutation(50, 3, 7), epoch_permutation(50, 3, 8));
        assert_ne!(epoch_permutation(50, 3, 7), epoch_permutation(50, 4, 7));
        let mut p = epoch_permutation(50, 3, 7);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_set_and_bad_config_are_config_errors() {
        let mut set = toy_set(2, 1);
        set.images.clear();
        set.labels.clear();
        assert!(matches!(train(&set, &tiny_model(), &quick_cfg(false)), Err(Error::Config(_))));
        let set = toy_set(2, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg(false)
        };
        assert!(matches!(train(&set, &tiny_model(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn augmented_training_runs_with_mixing_policies() {
        let set = toy_set(8, 5);
        for kind in [crate::augment::AugmentKind::Mixup, crate::augment::AugmentKind::Cutmix] {
            let cfg = TrainConfig {
                augment: Some(AugmentPolicy::new(kind, 1.0, 1.0)),
                epochs: 1,
                ..quick_cfg(false)
            };
            let s = train(&set, &tiny_model(), &cfg).unwrap();
            assert!(s.params.is_finite());
        }
    }
}
