//! Iterated signed-gradient perturbation of training images under the
//! composite objective in [`crate::losses`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::losses::{has_objective_on_tape, LossWeights, ObjectiveTerms, SignConvention};
use crate::model::{forward_on_tape, ModelParams, Semantics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Per-step strength in normalized pixel units (`ε/255` of the 0–255 scale).
    pub epsilon: f64,
    pub steps: usize,
    pub weights: LossWeights,
    #[serde(default)]
    pub clamp_lo: f64,
    #[serde(default = "one")]
    pub clamp_hi: f64,
    /// Weight of the cross-entropy term; 1 except in isolation experiments.
    #[serde(default = "one")]
    pub cls_weight: f64,
    #[serde(default)]
    pub signs: SignConvention,
}

fn one() -> f64 {
    1.0
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0 / 255.0,
            steps: 3,
            weights: LossWeights::default(),
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            cls_weight: 1.0,
            signs: SignConvention::Descent,
        }
    }
}

impl PerturbConfig {
    /// Builds a config from a 0–255-scale strength.
    pub fn from_255(epsilon_255: f64, steps: usize, weights: LossWeights) -> Self {
        Self {
            epsilon: epsilon_255 / 255.0,
            steps,
            weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Config("clamp_lo must be below clamp_hi".into()));
        }
        self.weights.validate()
    }

    /// Largest possible `‖adv − clean‖∞`.
    pub fn budget(&self) -> f64 {
        self.steps as f64 * self.epsilon
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(image − ε·sign(grad), lo, hi)`, with `sign(0) = 0`.
pub fn fgsm_step(image: &Image, grad: &Tensor, epsilon: f64, lo: f64, hi: f64) -> Result<Image> {
    if grad.shape() != image.shape() {
        return Err(Error::dim("fgsm_step", &image.shape(), grad.shape()));
    }
    let data = image
        .data
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| (p - epsilon * sign(g)).clamp(lo, hi))
        .collect();
    Image::new(image.channels, image.height, image.width, data)
}

/// Pulls pixels of `adv` toward `clean` until `|adv − clean| ≤ budget` holds as
/// evaluated in f64. Absorbs the rounding of repeated `±ε` steps, so it moves
/// a pixel by a few ulps at most.
pub fn project_budget(adv: &mut Image, clean: &Image, budget: f64) {
    for (a, &c) in adv.data.iter_mut().zip(&clean.data) {
        while (*a - c).abs() > budget {
            *a = if *a > c { a.next_down() } else { a.next_up() };
        }
    }
}

/// Trajectory of one perturbed image.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub adv: Image,
    /// Objective value at each of the `T` steps, evaluated before the update.
    pub objective: Vec<f64>,
    /// `‖g(f(I)) − g(f(I_t))‖²` at each step, evaluated before the update.
    pub drift: Vec<f64>,
    /// Global features `g(f(I_t))` for `t = 0..T`.
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub clean: Vec<Image>,
    pub adv: Vec<Image>,
    /// Batch mean of the objective per step, length `T`.
    pub per_step_objective: Vec<f64>,
    /// Batch mean of the drift per step, length `T`.
    pub per_step_drift: Vec<f64>,
}

fn check_finite(tape: &Tape, terms: &ObjectiveTerms, grad: &Tensor) -> Result<()> {
    if grad.is_finite() && tape.value(terms.total).is_finite() {
        return Ok(());
    }
    let named = [("cls", terms.cls), ("rob", terms.rob), ("rel", terms.rel), ("div", terms.div)];
    let bad: Vec<&str> = named
        .iter()
        .filter(|(_, v)| !tape.value(*v).is_finite())
        .map(|(n, _)| *n)
        .collect();
    Err(Error::Numeric {
        component: if bad.is_empty() {
            "input gradient".into()
        } else {
            bad.join("+")
        },
        detail: "non-finite objective or gradient while generating adversarial sample".into(),
    })
}

/// Perturbs one image for `cfg.steps` steps with the model frozen.
///
/// `label` indexes a row of `semantics`. The clean-feature anchor is taken from
/// the unperturbed image and held fixed across steps. When `trace_final` is
/// set, one extra forward pass records the features of the final image.
pub fn perturb_one(
    image: &Image,
    label: usize,
    params: &ModelParams,
    semantics: &Semantics,
    cfg: &PerturbConfig,
    trace_final: bool,
) -> Result<AdversarialSample> {
    cfg.validate()?;
    let mut current = image.clone();
    let mut anchor: Option<Tensor> = None;
    let mut objective = Vec::with_capacity(cfg.steps);
    let mut drift = Vec::with_capacity(cfg.steps);
    let mut features = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let pv = params.record(&mut tape, false);
        let iv = tape.leaf(current.to_tensor(), true);
        let fv = forward_on_tape(&mut tape, iv, &pv, &params.config, semantics)?;
        let feat = tape.value(fv.global_feat).clone();
        let clean = anchor.get_or_insert_with(|| feat.clone()).clone();
        features.push(feat);
        let terms = has_objective_on_tape(&mut tape, &fv, label, &clean, &cfg.weights, cfg.cls_weight, cfg.signs)?;
        let grad = tape.backward(terms.total)?.get_or_zeros(iv);
        check_finite(&tape, &terms, &grad)?;
        objective.push(tape.value(terms.total).item());
        drift.push(tape.value(terms.rel).item());
        let step_dir = match cfg.signs {
            SignConvention::Descent => grad,
            SignConvention::Ascent => grad.map(|g| -g),
        };
        current = fgsm_step(&current, &step_dir, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)?;
        project_budget(&mut current, image, (step + 1) as f64 * cfg.epsilon);
    }
    if trace_final {
        let out = crate::model::forward(&current, params, semantics)?;
        features.push(out.global_feat);
    }
    Ok(AdversarialSample {
        adv: current,
        objective,
        drift,
        features,
    })
}

/// Perturbs every image of a batch; images are independent and processed in
/// parallel, results kept in input order.
pub fn generate_adversarial(
    images: &[Image],
    labels: &[usize],
    params: &ModelParams,
    semantics: &Semantics,
    cfg: &PerturbConfig,
) -> Result<AdversarialBatch> {
    if images.len() != labels.len() {
        return Err(Error::dim("generate_adversarial", &[images.len()], &[labels.len()]));
    }
    let samples: Vec<AdversarialSample> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &y)| perturb_one(img, y, params, semantics, cfg, false))
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let per_step = |f: fn(&AdversarialSample) -> &Vec<f64>| -> Vec<f64> {
        (0..cfg.steps)
            .map(|t| samples.iter().map(|s| f(s)[t]).sum::<f64>() / n)
            .collect()
    };
    let per_step_objective = per_step(|s| &s.objective);
    let per_step_drift = per_step(|s| &s.drift);
    Ok(AdversarialBatch {
        clean: images.to_vec(),
        adv: samples.into_iter().map(|s| s.adv).collect(),
        per_step_objective,
        per_step_drift,
    })
}

/// Decomposition of one perturbation into a background mode and foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbStats {
    /// `adv − clean`, min-max scaled to `[0, 1]` (all zero for a constant delta).
    pub normalized_delta: Vec<f64>,
    /// Center of the most populated of 256 bins of the normalized delta.
    pub background_value: f64,
    /// Per pixel: some channel differs from the background value by more than a bin width.
    pub foreground: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

pub const REPORT_BINS: usize = 256;

pub fn perturbation_report(batch: &AdversarialBatch) -> Vec<PerturbStats> {
    batch
        .clean
        .iter()
        .zip(&batch.adv)
        .map(|(c, a)| perturbation_stats(c, a))
        .collect()
}

pub fn perturbation_stats(clean: &Image, adv: &Image) -> PerturbStats {
    let delta: Vec<f64> = adv.data.iter().zip(&clean.data).map(|(a, c)| a - c).collect();
    let lo = delta.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let normalized: Vec<f64> = if range > 0.0 {
        delta.iter().map(|d| (d - lo) / range).collect()
    } else {
        vec![0.0; delta.len()]
    };
    let mut counts = [0usize; REPORT_BINS];
    for &v in &normalized {
        counts[((v * REPORT_BINS as f64) as usize).min(REPORT_BINS - 1)] += 1;
    }
    let mode_bin = (0..REPORT_BINS).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
    let width = 1.0 / REPORT_BINS as f64;
    let background_value = (mode_bin as f64 + 0.5) * width;
    let hw = clean.height * clean.width;
    let mut foreground = vec![false; hw];
    for (i, &v) in normalized.iter().enumerate() {
        if (v - background_value).abs() > width {
            foreground[i % hw] = true;
        }
    }
    PerturbStats {
        normalized_delta: normalized,
        background_value,
        foreground,
        height: clean.height,
        width: clean.width,
    }
}

/// Intersection over union of two pixel masks; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
