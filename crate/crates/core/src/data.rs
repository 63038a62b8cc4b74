//! Attribute-grounded synthetic benchmark.
//!
//! Every attribute is a colored square motif at a fixed grid cell. A class is a
//! vector of motif intensities φ(y) ∈ [0, 1]^K, and each image renders every
//! motif at `φ_k · color_k` plus clipped Gaussian pixel noise. Ground-truth
//! motif masks ship with every image, so localization can be checked exactly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Semantics;

pub const SCHEMA_VERSION: u32 = 1;
const PHI_LOW: f64 = 0.1;
const PHI_HIGH: f64 = 0.9;
const PHI_JITTER: f64 = 0.05;
const PROTOCOL_SALT: u64 = 0x5eed_5b1d;

/// Channel-major image with pixels nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim("image", &[channels, height, width], &[data.len()]));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::contract("image", format!("expected [C,H,W], got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub attr_id: usize,
    /// Grid cell `(row, col)`.
    pub location: (usize, usize),
    pub color: [f64; 3],
    /// Side of the square motif in pixels.
    pub side: usize,
}

impl AttributeSpec {
    /// Top-left pixel of the motif.
    pub fn origin(&self, cell: usize) -> (usize, usize) {
        let pad = (cell - self.side) / 2;
        (self.location.0 * cell + pad, self.location.1 * cell + pad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_id: usize,
    pub phi: Vec<f64>,
    pub split: SplitKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_k")]
    pub attributes: usize,
    #[serde(default = "d_seen")]
    pub seen_classes: usize,
    #[serde(default = "d_unseen")]
    pub unseen_classes: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_img")]
    pub image_size: usize,
    /// Grid cells per side; motifs occupy distinct cells.
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// Motif side in pixels; defaults to the full cell.
    #[serde(default)]
    pub patch_side: Option<usize>,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_k() -> usize {
    8
}
fn d_seen() -> usize {
    12
}
fn d_unseen() -> usize {
    4
}
fn d_per_class() -> usize {
    40
}
fn d_img() -> usize {
    16
}
fn d_grid() -> usize {
    4
}
fn d_noise() -> f64 {
    0.05
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            attributes: d_k(),
            seen_classes: d_seen(),
            unseen_classes: d_unseen(),
            per_class: d_per_class(),
            image_size: d_img(),
            grid: d_grid(),
            patch_side: None,
            noise_sigma: d_noise(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn cell(&self) -> usize {
        self.image_size / self.grid.max(1)
    }

    pub fn side(&self) -> usize {
        self.patch_side.unwrap_or_else(|| self.cell())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.attributes == 0 || self.seen_classes == 0 || self.unseen_classes == 0 || self.per_class == 0 {
            return bad("attribute and class counts must be >= 1");
        }
        if self.grid == 0 || !self.image_size.is_multiple_of(self.grid) {
            return bad("image_size must be a positive multiple of grid");
        }
        if self.attributes > self.grid * self.grid {
            return Err(Error::Config(format!(
                "cannot pack {} attributes into a {}x{} grid",
                self.attributes, self.grid, self.grid
            )));
        }
        let side = self.side();
        if side == 0 || side > self.cell() {
            return bad("patch_side must be in 1..=cell size");
        }
        let total = self.seen_classes + self.unseen_classes;
        if self.attributes < 63 && total as u64 > 1u64 << self.attributes {
            return bad("more classes than distinct binary attribute patterns");
        }
        if self.seen_classes < 2 {
            return bad("need at least two seen classes to bound unseen attributes");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class_id: usize,
    /// `K × H × W` motif masks, one byte per pixel per attribute.
    pub masks: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub attributes: Vec<AttributeSpec>,
    pub classes: Vec<ClassDef>,
    pub samples: Vec<Sample>,
}

fn hue_color(k: usize, n: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / n as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

fn sample_patterns(rng: &mut ChaCha8Rng, k: usize, count: usize, taken: &mut Vec<Vec<bool>>) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        if !taken.contains(&p) {
            taken.push(p.clone());
            out.push(p);
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, pattern: &[bool]) -> Vec<f64> {
    pattern
        .iter()
        .map(|&hi| {
            let base = if hi { PHI_HIGH } else { PHI_LOW };
            to_f32_grid(base + rng.gen_range(-PHI_JITTER..PHI_JITTER))
        })
        .collect()
}

/// Renders one image of class φ and returns it with its motif masks.
fn render(
    cfg: &SynthConfig,
    attributes: &[AttributeSpec],
    phi: &[f64],
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f64>>,
) -> (Image, Vec<u8>) {
    let n = cfg.image_size;
    let (cell, side) = (cfg.cell(), cfg.side());
    let mut img = Image::zeros(3, n, n);
    let mut masks = vec![0u8; attributes.len() * n * n];
    for a in attributes {
        let (y0, x0) = a.origin(cell);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                masks[(a.attr_id * n + y) * n + x] = 1;
                for c in 0..3 {
                    img.set(c, y, x, phi[a.attr_id] * a.color[c]);
                }
            }
        }
    }
    for v in img.data.iter_mut() {
        let noisy = match noise {
            Some(d) => *v + d.sample(rng),
            None => *v,
        };
        *v = to_f32_grid(noisy.clamp(0.0, 1.0));
    }
    (img, masks)
}

/// Builds a dataset deterministically from `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.attributes;

    let mut cells: Vec<(usize, usize)> = (0..cfg.grid).flat_map(|r| (0..cfg.grid).map(move |c| (r, c))).collect();
    cells.shuffle(&mut rng);
    let attributes: Vec<AttributeSpec> = (0..k)
        .map(|a| AttributeSpec {
            attr_id: a,
            location: cells[a],
            color: hue_color(a, k),
            side: cfg.side(),
        })
        .collect();

    // Seen patterns must cover both levels in every attribute so the unseen
    // classes can sit inside the seen bounding box.
    let (seen_patterns, mut taken) = loop {
        let mut trial_taken = Vec::new();
        let pats = sample_patterns(&mut rng, k, cfg.seen_classes, &mut trial_taken);
        let covers = (0..k).all(|a| pats.iter().any(|p| p[a]) && pats.iter().any(|p| !p[a]));
        if covers {
            break (pats, trial_taken);
        }
    };
    let unseen_patterns = sample_patterns(&mut rng, k, cfg.unseen_classes, &mut taken);

    let mut classes = Vec::new();
    for p in &seen_patterns {
        classes.push(ClassDef {
            class_id: classes.len(),
            phi: jitter(&mut rng, p),
            split: SplitKind::Seen,
        });
    }
    let lo: Vec<f64> = (0..k).map(|a| classes.iter().map(|c| c.phi[a]).fold(f64::MAX, f64::min)).collect();
    let hi: Vec<f64> = (0..k).map(|a| classes.iter().map(|c| c.phi[a]).fold(f64::MIN, f64::max)).collect();
    for p in &unseen_patterns {
        let phi = jitter(&mut rng, p).into_iter().enumerate().map(|(a, v)| v.clamp(lo[a], hi[a])).collect();
        classes.push(ClassDef {
            class_id: classes.len(),
            phi,
            split: SplitKind::Unseen,
        });
    }

    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(classes.len() * cfg.per_class);
    for class in &classes {
        for _ in 0..cfg.per_class {
            let (image, masks) = render(cfg, &attributes, &class.phi, &mut rng, noise.as_ref());
            samples.push(Sample {
                image,
                class_id: class.class_id,
                masks,
            });
        }
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        attributes,
        classes,
        samples,
    })
}

/// Sample indices partitioned by class split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

pub fn split(dataset: &SyntheticDataset) -> Split {
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        match dataset.classes[s.class_id].split {
            SplitKind::Seen => seen.push(i),
            SplitKind::Unseen => unseen.push(i),
        }
    }
    Split { seen, unseen }
}

/// Train / validation / test partition used by the evaluation protocol.
///
/// Seen-class images are divided per class into train, a validation slice and
/// a seen test slice. Unseen-class images never reach training; a calibration
/// slice of them joins the seen validation slice when choosing μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub train: Vec<usize>,
    pub val_seen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub val_unseen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    #[serde(default = "d_test")]
    pub test_seen_fraction: f64,
    #[serde(default = "d_val")]
    pub unseen_val_fraction: f64,
}

fn d_val() -> f64 {
    0.1
}
fn d_test() -> f64 {
    0.2
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            val_fraction: d_val(),
            test_seen_fraction: d_test(),
            unseen_val_fraction: d_val(),
        }
    }
}

impl Protocol {
    pub fn new(dataset: &SyntheticDataset, cfg: &ProtocolConfig, seed: u64) -> Result<Self> {
        let fr = [cfg.val_fraction, cfg.test_seen_fraction, cfg.unseen_val_fraction];
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) || cfg.val_fraction + cfg.test_seen_fraction >= 1.0 {
            return Err(Error::Config("protocol fractions must lie in [0,1) and leave training data".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROTOCOL_SALT);
        let mut p = Protocol {
            train: vec![],
            val_seen: vec![],
            test_seen: vec![],
            val_unseen: vec![],
            test_unseen: vec![],
        };
        for class in &dataset.classes {
            let mut idx: Vec<usize> = (0..dataset.samples.len())
                .filter(|&i| dataset.samples[i].class_id == class.class_id)
                .collect();
            idx.shuffle(&mut rng);
            let n = idx.len();
            match class.split {
                SplitKind::Seen => {
                    let nv = (n as f64 * cfg.val_fraction).round() as usize;
                    let nt = (n as f64 * cfg.test_seen_fraction).round() as usize;
                    p.val_seen.extend(&idx[..nv]);
                    p.test_seen.extend(&idx[nv..nv + nt]);
                    p.train.extend(&idx[nv + nt..]);
                }
                SplitKind::Unseen => {
                    let nv = (n as f64 * cfg.unseen_val_fraction).round() as usize;
                    p.val_unseen.extend(&idx[..nv]);
                    p.test_unseen.extend(&idx[nv..]);
                }
            }
        }
        for v in [&mut p.train, &mut p.val_seen, &mut p.test_seen, &mut p.val_unseen, &mut p.test_unseen] {
            v.sort_unstable();
        }
        if p.train.is_empty() {
            return Err(Error::Config("protocol leaves no training images".into()));
        }
        Ok(p)
    }
}


impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self, kind: SplitKind) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == kind).map(|c| c.class_id).collect()
    }

    pub fn is_seen(&self, class_id: usize) -> bool {
        self.classes[class_id].split == SplitKind::Seen
    }

    pub fn phi(&self, class_id: usize) -> &[f64] {
        &self.classes[class_id].phi
    }

    /// φ rows for every class, indexed by class id.
    pub fn semantics(&self) -> Result<Semantics> {
        let rows: Vec<Vec<f64>> = self.classes.iter().map(|c| c.phi.clone()).collect();
        Semantics::new(&rows)
    }

    /// Grid cell containing pixel `(y, x)`.
    pub fn cell_of(&self, y: usize, x: usize) -> (usize, usize) {
        let c = self.config.cell();
        (y / c, x / c)
    }

    fn canonical_header(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "attributes": self.attributes,
            "classes": self.classes,
            "labels": self.samples.iter().map(|s| s.class_id).collect::<Vec<_>>(),
            "image_shape": self.samples.first().map(|s| s.image.shape()),
        });
        serde_json::to_vec(&header).expect("serializable header")
    }

    fn images_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.iter().map(|s| s.image.data.len() * 4).sum());
        for s in &self.samples {
            for &v in &s.image.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    fn masks_bytes(&self) -> Vec<u8> {
        self.samples.iter().flat_map(|s| s.masks.iter().copied()).collect()
    }

    /// SHA-256 over the canonical header and both payloads, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_header());
        h.update(self.images_bytes());
        h.update(self.masks_bytes());
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let images = self.images_bytes();
        let masks = self.masks_bytes();
        let mut h = Sha256::new();
        h.update(&images);
        h.update(&masks);
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            seed: self.config.seed,
            payload_sha256: hex::encode(h.finalize()),
            dataset_sha256: self.hash(),
            image_shape: self.samples.first().map(|s| s.image.shape()).unwrap_or([3, 0, 0]),
            attributes: self.attributes.clone(),
            classes: self.classes.clone(),
            labels: self.samples.iter().map(|s| s.class_id).collect(),
        };
        write_file(&dir.join("images.bin"), &images)?;
        write_file(&dir.join("masks.bin"), &masks)?;
        write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let value: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::format(&mpath, "missing schema_version")
        })? as u32;
        if version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let ipath = dir.join("images.bin");
        let kpath = dir.join("masks.bin");
        let images = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let masks = fs::read(&kpath).map_err(|e| Error::io(&kpath, e))?;
        let [c, h, w] = m.image_shape;
        let n = m.labels.len();
        let k = m.attributes.len();
        if images.len() != n * c * h * w * 4 {
            return Err(Error::format(&ipath, format!("expected {} bytes, found {}", n * c * h * w * 4, images.len())));
        }
        if masks.len() != n * k * h * w {
            return Err(Error::format(&kpath, format!("expected {} bytes, found {}", n * k * h * w, masks.len())));
        }
        let mut hasher = Sha256::new();
        hasher.update(&images);
        hasher.update(&masks);
        if hex::encode(hasher.finalize()) != m.payload_sha256 {
            return Err(Error::format(dir, "payload hash mismatch"));
        }
        if let Some(bad) = m.labels.iter().find(|&&l| l >= m.classes.len()) {
            return Err(Error::format(&mpath, format!("label {bad} has no class entry")));
        }
        let px = c * h * w;
        let samples = (0..n)
            .map(|i| {
                let data = images[i * px * 4..(i + 1) * px * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                Sample {
                    image: Image::new(c, h, w, data).expect("sized above"),
                    class_id: m.labels[i],
                    masks: masks[i * k * h * w..(i + 1) * k * h * w].to_vec(),
                }
            })
            .collect();
        let ds = SyntheticDataset {
            config: m.config,
            attributes: m.attributes,
            classes: m.classes,
            samples,
        };
        if ds.hash() != m.dataset_sha256 {
            return Err(Error::format(&mpath, "dataset hash mismatch"));
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    config: SynthConfig,
    seed: u64,
    payload_sha256: String,
    dataset_sha256: String,
    image_shape: [usize; 3],
    attributes: Vec<AttributeSpec>,
    classes: Vec<ClassDef>,
    labels: Vec<usize>,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
