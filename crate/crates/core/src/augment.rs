//! Conventional pixel-space augmentations and a probe measuring how much each
//! one moves the model's attribute predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::eval::{per_class_top1, zsl_from_scores};
use crate::model::{forward, ModelParams, Semantics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    ColorJitter,
    Grayscale,
    GaussianBlur,
    RandomRotate,
    RandomCrop,
    Cutout,
    Mixup,
    Cutmix,
}

impl AugmentKind {
    /// Valid `strength` interval.
    pub fn strength_range(self) -> (f64, f64) {
        match self {
            AugmentKind::GaussianBlur => (0.0, 5.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn needs_partner(self) -> bool {
        matches!(self, AugmentKind::Mixup | AugmentKind::Cutmix)
    }
}

/// One augmentation with its strength and application probability.
///
/// Strength meaning per kind:
/// - `color_jitter`: per-channel factor drawn from `U(1−s, 1+s)`
/// - `grayscale`: blend weight towards the luminance image
/// - `gaussian_blur`: kernel sigma in pixels
/// - `random_rotate`: angle drawn from `U(0, 360·s)` degrees
/// - `random_crop`: crop side is `(1 − s/2)` of the image side, so 1 crops to half
/// - `cutout`: side of the zeroed square as a fraction of the image side
/// - `mixup`: partner weight is `s·(1−λ)` with `λ ~ Beta(1,1)`
/// - `cutmix`: pasted box covers about `s·(1−λ)` of the area, `λ ~ Beta(1,1)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    #[serde(default = "one")]
    pub strength: f64,
    #[serde(default = "one")]
    pub apply_prob: f64,
    /// Display name; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
}

fn one() -> f64 {
    1.0
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind, strength: f64, apply_prob: f64) -> Self {
        Self {
            kind,
            strength,
            apply_prob,
            name: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            serde_json::to_value(self.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.strength_range();
        if !(lo..=hi).contains(&self.strength) {
            return Err(Error::Config(format!(
                "{}: strength {} outside [{lo}, {hi}]",
                self.label(),
                self.strength
            )));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!("{}: apply_prob {} outside [0, 1]", self.label(), self.apply_prob)));
        }
        Ok(())
    }
}

/// The augmentation list of the distortion study (SnapMix omitted).
pub fn study_policies() -> Vec<AugmentPolicy> {
    use AugmentKind::*;
    vec![
        AugmentPolicy::new(ColorJitter, 0.2, 1.0).named("color_jitter_0.2"),
        AugmentPolicy::new(ColorJitter, 0.4, 1.0).named("color_jitter_0.4"),
        AugmentPolicy::new(Grayscale, 1.0, 0.2).named("grayscale_0.2"),
        AugmentPolicy::new(Grayscale, 1.0, 0.4).named("grayscale_0.4"),
        AugmentPolicy::new(GaussianBlur, 0.5, 1.0).named("gaussian_blur_L"),
        AugmentPolicy::new(GaussianBlur, 2.0, 1.0).named("gaussian_blur_H"),
        AugmentPolicy::new(RandomRotate, 1.0, 1.0).named("random_rotate"),
        AugmentPolicy::new(RandomCrop, 1.0, 1.0).named("random_crop"),
        AugmentPolicy::new(Cutout, 0.5, 1.0).named("cutout"),
        AugmentPolicy::new(Mixup, 1.0, 1.0).named("mixup"),
        AugmentPolicy::new(Cutmix, 1.0, 1.0).named("cutmix"),
    ]
}

/// Augmented image with its label mixture; weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Image,
    pub labels: Vec<(usize, f64)>,
}

/// Applies `policy` to `(image, label)`. Mixing kinds draw their second image
/// from `partner`, which must then be present.
pub fn apply(
    policy: &AugmentPolicy,
    image: &Image,
    label: usize,
    partner: Option<(&Image, usize)>,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    policy.validate()?;
    let unchanged = || Augmented {
        image: image.clone(),
        labels: vec![(label, 1.0)],
    };
    let fire = rng.gen::<f64>() < policy.apply_prob;
    if !fire || policy.strength == 0.0 {
        return Ok(unchanged());
    }
    let s = policy.strength;
    let out = match policy.kind {
        AugmentKind::ColorJitter => {
            let factors: Vec<f64> = (0..image.channels).map(|_| rng.gen_range(1.0 - s..=1.0 + s)).collect();
            color_scale(image, &factors)
        }
        AugmentKind::Grayscale => grayscale(image, s),
        AugmentKind::GaussianBlur => gaussian_blur(image, s),
        AugmentKind::RandomRotate => rotate(image, rng.gen_range(0.0..360.0 * s)),
        AugmentKind::RandomCrop => {
            let side = ((image.height.min(image.width) as f64) * (1.0 - s / 2.0)).round().max(1.0) as usize;
            let y0 = rng.gen_range(0..=image.height - side.min(image.height));
            let x0 = rng.gen_range(0..=image.width - side.min(image.width));
            crop_resize(image, y0, x0, side)
        }
        AugmentKind::Cutout => {
            let side = ((image.height.min(image.width) as f64) * s).round() as usize;
            let y0 = rng.gen_range(0..=image.height - side);
            let x0 = rng.gen_range(0..=image.width - side);
            cutout(image, y0, x0, side)
        }
        AugmentKind::Mixup | AugmentKind::Cutmix => {
            let (other, other_label) =
                partner.ok_or_else(|| Error::Config(format!("{} needs a partner image", policy.label())))?;
            let lam: f64 = Beta::new(1.0, 1.0).expect("valid beta").sample(rng);
            if policy.kind == AugmentKind::Mixup {
                return mixup(image, label, other, other_label, 1.0 - s * (1.0 - lam));
            }
            let area = s * (1.0 - lam);
            let bh = ((image.height as f64) * area.sqrt()).round() as usize;
            let bw = ((image.width as f64) * area.sqrt()).round() as usize;
            let y0 = rng.gen_range(0..=image.height - bh);
            let x0 = rng.gen_range(0..=image.width - bw);
            return cutmix(image, label, other, other_label, (y0, x0, bh, bw));
        }
    };
    Ok(Augmented {
        image: out,
        labels: vec![(label, 1.0)],
    })
}

pub fn color_scale(image: &Image, factors: &[f64]) -> Image {
    let mut out = image.clone();
    let hw = image.height * image.width;
    for (c, f) in factors.iter().enumerate() {
        for v in &mut out.data[c * hw..(c + 1) * hw] {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    out
}

/// Blends each pixel towards its luminance `0.299R + 0.587G + 0.114B`.
pub fn grayscale(image: &Image, weight: f64) -> Image {
    let hw = image.height * image.width;
    let mut out = image.clone();
    if image.channels != 3 {
        return out;
    }
    for i in 0..hw {
        let lum = 0.299 * image.data[i] + 0.587 * image.data[hw + i] + 0.114 * image.data[2 * hw + i];
        for c in 0..3 {
            let v = &mut out.data[c * hw + i];
            *v = ((1.0 - weight) * *v + weight * lum).clamp(0.0, 1.0);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (image.height as i64, image.width as i64);
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let v = (0..k.len() as i64)
                    .map(|j| k[j as usize] * image.get(c, y as usize, (x + j - r).clamp(0, w - 1) as usize))
                    .sum::<f64>();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = (0..k.len() as i64)
                    .map(|j| k[j as usize] * tmp.get(c, (y + j - r).clamp(0, h - 1) as usize, x as usize))
                    .sum::<f64>();
                out.set(c, y as usize, x as usize, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Nearest-neighbor rotation about the image center, zero fill outside.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(image.channels, image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).round();
            let sx = (sin * dy + cos * dx + cx).round();
            if sy < 0.0 || sx < 0.0 || sy >= image.height as f64 || sx >= image.width as f64 {
                continue;
            }
            for c in 0..image.channels {
                out.set(c, y, x, image.get(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Crops a `side × side` window at `(y0, x0)` and scales it back to full size.
pub fn crop_resize(image: &Image, y0: usize, x0: usize, side: usize) -> Image {
    let mut out = Image::zeros(image.channels, image.height, image.width);
    for y in 0..image.height {
        let sy = y0 + y * side / image.height;
        for x in 0..image.width {
            let sx = x0 + x * side / image.width;
            for c in 0..image.channels {
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}

pub fn cutout(image: &Image, y0: usize, x0: usize, side: usize) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out.set(c, y, x, 0.0);
            }
        }
    }
    out
}

/// `lam·a + (1−lam)·b` with matching label weights.
pub fn mixup(a: &Image, label_a: usize, b: &Image, label_b: usize, lam: f64) -> Result<Augmented> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mixup", &a.shape(), &b.shape()));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Config(format!("mixup weight {lam} outside [0, 1]")));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
    Ok(Augmented {
        image: Image::new(a.channels, a.height, a.width, data)?,
        labels: merge_labels(label_a, lam, label_b),
    })
}

/// Pastes box `(y0, x0, h, w)` of `b` into `a`; label weights follow pixel counts.
pub fn cutmix(a: &Image, label_a: usize, b: &Image, label_b: usize, bx: (usize, usize, usize, usize)) -> Result<Augmented> {
    if a.shape() != b.shape() {
        return Err(Error::dim("cutmix", &a.shape(), &b.shape()));
    }
    let (y0, x0, bh, bw) = bx;
    if y0 + bh > a.height || x0 + bw > a.width {
        return Err(Error::Config("cutmix box leaves the image".into()));
    }
    let mut out = a.clone();
    for c in 0..a.channels {
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                out.set(c, y, x, b.get(c, y, x));
            }
        }
    }
    let pasted = (bh * bw) as f64 / (a.height * a.width) as f64;
    Ok(Augmented {
        image: out,
        labels: merge_labels(label_a, 1.0 - pasted, label_b),
    })
}

fn merge_labels(a: usize, wa: f64, b: usize) -> Vec<(usize, f64)> {
    if a == b {
        vec![(a, 1.0)]
    } else {
        vec![(a, wa), (b, 1.0 - wa)]
    }
}

/// Change in model outputs caused by an augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub policy: String,
    /// Mean `|a(clean) − a(augmented)|` per attribute, global attribute head.
    pub attribute_drift: Vec<f64>,
    pub mean_drift: f64,
    /// `(class id, accuracy(augmented) − accuracy(clean))` in percentage points.
    pub accuracy_delta: Vec<(usize, f64)>,
}

/// Measures attribute drift of `policy` over `images`.
///
/// Predictions are restricted to `candidates` (rows of `semantics`). Image `i`
/// uses an RNG stream derived from `seed` and `i`; mixing kinds pair it with
/// image `(i + 1) mod n`.
pub fn distortion_probe(
    params: &ModelParams,
    images: &[Image],
    labels: &[usize],
    semantics: &Semantics,
    candidates: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<DistortionReport> {
    policy.validate()?;
    let n = images.len();
    if n == 0 || labels.len() != n {
        return Err(Error::dim("distortion_probe", &[n], &[labels.len()]));
    }
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let j = (i + 1) % n;
            let aug = apply(policy, &images[i], labels[i], Some((&images[j], labels[j])), &mut rng)?;
            let clean = forward(&images[i], params, semantics)?;
            let moved = forward(&aug.image, params, semantics)?;
            let drift: Vec<f64> = clean
                .attr_global
                .data()
                .iter()
                .zip(moved.attr_global.data())
                .map(|(a, b)| (a - b).abs())
                .collect();
            let p_clean = zsl_from_scores(clean.class_scores.data(), candidates)?;
            let p_aug = zsl_from_scores(moved.class_scores.data(), candidates)?;
            Ok((drift, p_clean, p_aug))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = semantics.num_attributes();
    let mut attribute_drift = vec![0.0; k];
    for (d, _, _) in &rows {
        for (acc, v) in attribute_drift.iter_mut().zip(d) {
            *acc += v / n as f64;
        }
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut accuracy_delta = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let lab = vec![c; idx.len()];
        let before: Vec<usize> = idx.iter().map(|&i| rows[i].1).collect();
        let after: Vec<usize> = idx.iter().map(|&i| rows[i].2).collect();
        let delta = per_class_top1(&after, &lab, &[c])? - per_class_top1(&before, &lab, &[c])?;
        accuracy_delta.push((c, delta));
    }
    Ok(DistortionReport {
        policy: policy.label(),
        mean_drift: attribute_drift.iter().sum::<f64>() / k as f64,
        attribute_drift,
        accuracy_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rand_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, 16, 16, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    const ALL: [AugmentKind; 8] = [
        AugmentKind::ColorJitter,
        AugmentKind::Grayscale,
        AugmentKind::GaussianBlur,
        AugmentKind::RandomRotate,
        AugmentKind::RandomCrop,
        AugmentKind::Cutout,
        AugmentKind::Mixup,
        AugmentKind::Cutmix,
    ];

    #[test]
    fn zero_strength_or_probability_is_identity() {
        let (a, b) = (rand_image(1), rand_image(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in ALL {
            for (s, p) in [(0.0, 1.0), (1.0, 0.0)] {
                let out = apply(&AugmentPolicy::new(kind, s, p), &a, 4, Some((&b, 7)), &mut rng).unwrap();
                assert_eq!(out.image, a, "{kind:?}");
                assert_eq!(out.labels, vec![(4, 1.0)]);
            }
        }
    }

    #[test]
    fn mixup_degenerate_weight_returns_first_image() {
        let (a, b) = (rand_image(1), rand_image(2));
        let m = mixup(&a, 0, &b, 1, 1.0).unwrap();
        assert_eq!(m.image, a);
        assert_eq!(m.labels, vec![(0, 1.0), (1, 0.0)]);
    }

    #[test]
    fn cutmix_quarter_box_weights() {
        let (a, b) = (rand_image(1), rand_image(2));
        let m = cutmix(&a, 0, &b, 1, (4, 4, 8, 8)).unwrap();
        assert_eq!(m.labels, vec![(0, 0.75), (1, 0.25)]);
        let changed = (0..256)
            .filter(|&i| (0..3).any(|c| m.image.data[c * 256 + i] != a.data[c * 256 + i]))
            .count();
        assert_eq!(changed, 64);
    }

    #[test]
    fn rotate_by_full_turn_and_quarter() {
        let a = rand_image(5);
        assert_eq!(rotate(&a, 360.0), a);
        let q = rotate(&a, 90.0);
        let back = rotate(&rotate(&rotate(&q, 90.0), 90.0), 90.0);
        assert_eq!(back, a);
    }

    #[test]
    fn crop_resize_half_doubles_pixels() {
        let a = rand_image(6);
        let c = crop_resize(&a, 2, 3, 8);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(c.get(1, y, x), a.get(1, 2 + y / 2, 3 + x / 2));
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let a = Image::new(3, 16, 16, vec![0.3; 768]).unwrap();
        let b = gaussian_blur(&a, 2.0);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let a = rand_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply(&AugmentPolicy::new(AugmentKind::ColorJitter, 1.5, 1.0), &a, 0, None, &mut rng).is_err());
        assert!(apply(&AugmentPolicy::new(AugmentKind::Cutout, 0.5, 2.0), &a, 0, None, &mut rng).is_err());
        assert!(apply(&AugmentPolicy::new(AugmentKind::Mixup, 1.0, 1.0), &a, 0, None, &mut rng).is_err());
    }

    #[test]
    fn policy_json_rejects_unknown_keys() {
        let ok: AugmentPolicy = serde_json::from_str(r#"{"kind":"random_crop"}"#).unwrap();
        assert_eq!(ok.strength, 1.0);
        assert!(serde_json::from_str::<AugmentPolicy>(r#"{"kind":"random_crop","strenght":1}"#).is_err());
    }

    #[test]
    fn probe_identity_policy_has_zero_drift() {
        let p = ModelParams::init(1, &ModelConfig::default()).unwrap();
        let imgs: Vec<Image> = (0..4).map(rand_image).collect();
        let sem = Semantics::new(&[vec![0.2; 8], vec![0.7; 8]]).unwrap();
        let id = AugmentPolicy::new(AugmentKind::RandomCrop, 0.0, 1.0);
        let r = distortion_probe(&p, &imgs, &[0, 1, 0, 1], &sem, &[0, 1], &id, 9).unwrap();
        assert_eq!(r.mean_drift, 0.0);
        assert!(r.accuracy_delta.iter().all(|(_, d)| *d == 0.0));
        let crop = AugmentPolicy::new(AugmentKind::RandomCrop, 1.0, 1.0);
        let r = distortion_probe(&p, &imgs, &[0, 1, 0, 1], &sem, &[0, 1], &crop, 9).unwrap();
        assert!(r.attribute_drift.iter().all(|d| *d >= 0.0));
        assert!(r.mean_drift > 0.0);
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range_and_weights_sum_to_one(seed in 0u64..1000, k in 0usize..8, s in 0.0..1.0f64) {
            let kind = ALL[k];
            let (lo, hi) = kind.strength_range();
            let strength = lo + s * (hi - lo);
            let (a, b) = (rand_image(seed), rand_image(seed + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pol = AugmentPolicy::new(kind, strength, 1.0);
            let out = apply(&pol, &a, 1, Some((&b, 2)), &mut rng).unwrap();
            prop_assert!(out.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let total: f64 = out.labels.iter().map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(apply(&pol, &a, 1, Some((&b, 2)), &mut rng2).unwrap(), out);
        }
    }
}
