//! Figure artifacts: attention overlays, perturbation panels and feature drift,
//! with the localization score computed against ground-truth motif cells.

use serde::{Deserialize, Serialize};

use crate::adversarial::{generate_adversarial, mask_iou, perturbation_stats, PerturbConfig};
use crate::data::{Image, SyntheticDataset};
use crate::error::Result;
use crate::eval::{argmax_first, drift_trace};
use crate::model::{forward, ModelParams};
use crate::report::{heat_overlay, image_ppm, ppm_bytes, RunDir, Table};

/// Attributes whose class intensity exceeds this are rendered visibly.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHit {
    pub sample: usize,
    pub class_id: usize,
    pub attribute: usize,
    /// Grid cell under the attention peak.
    pub predicted_cell: (usize, usize),
    pub true_cell: (usize, usize),
}

impl AttentionHit {
    pub fn hit(&self) -> bool {
        self.predicted_cell == self.true_cell
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub pairs: Vec<AttentionHit>,
    /// Percentage of (image, active attribute) pairs whose peak lands in the motif cell.
    pub rate: f64,
}

/// Grid cell holding the first maximum of attention map `k`.
fn peak_cell(dataset: &SyntheticDataset, maps: &[f64], k: usize, map_h: usize, map_w: usize) -> (usize, usize) {
    let m = &maps[k * map_h * map_w..(k + 1) * map_h * map_w];
    let p = argmax_first(m);
    let (h, w) = (dataset.config.image_size, dataset.config.image_size);
    let y = (p / map_w) * h / map_h + h / map_h / 2;
    let x = (p % map_w) * w / map_w + w / map_w / 2;
    dataset.cell_of(y, x)
}

pub fn localization(params: &ModelParams, dataset: &SyntheticDataset, samples: &[usize]) -> Result<Localization> {
    use rayon::prelude::*;
    let semantics = dataset.semantics()?;
    let per_image = samples
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let out = forward(&s.image, params, &semantics)?;
            let shape = out.attn_maps.shape();
            let (mh, mw) = (shape[1], shape[2]);
            Ok(dataset
                .phi(s.class_id)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > ACTIVE_THRESHOLD)
                .map(|(k, _)| AttentionHit {
                    sample: i,
                    class_id: s.class_id,
                    attribute: k,
                    predicted_cell: peak_cell(dataset, out.attn_maps.data(), k, mh, mw),
                    true_cell: dataset.attributes[k].location,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<AttentionHit> = per_image.into_iter().flatten().collect();
    let hits = pairs.iter().filter(|p| p.hit()).count();
    let rate = if pairs.is_empty() { 0.0 } else { 100.0 * hits as f64 / pairs.len() as f64 };
    Ok(Localization { pairs, rate })
}

/// One overlay per (sample, attribute) plus `attention.csv`; returns the localization score.
pub fn export_attention(
    run: &mut RunDir,
    params: &ModelParams,
    dataset: &SyntheticDataset,
    samples: &[usize],
    zoom: usize,
) -> Result<Localization> {
    let semantics = dataset.semantics()?;
    for &i in samples {
        let s = &dataset.samples[i];
        let out = forward(&s.image, params, &semantics)?;
        let shape = out.attn_maps.shape();
        let (mh, mw) = (shape[1], shape[2]);
        for k in 0..shape[0] {
            let map = &out.attn_maps.data()[k * mh * mw..(k + 1) * mh * mw];
            run.write(&format!("attention/s{i:05}_a{k:02}.ppm"), &heat_overlay(&s.image, map, mh, mw, zoom)?)?;
        }
    }
    let loc = localization(params, dataset, samples)?;
    let mut t = Table::new(&["sample", "class", "attribute", "pred_row", "pred_col", "true_row", "true_col", "hit"]);
    for p in &loc.pairs {
        t.push(vec![
            p.sample.into(),
            p.class_id.into(),
            p.attribute.into(),
            p.predicted_cell.0.into(),
            p.predicted_cell.1.into(),
            p.true_cell.0.into(),
            p.true_cell.1.into(),
            usize::from(p.hit()).into(),
        ])?;
    }
    run.write("attention.csv", t.to_csv().as_bytes())?;
    Ok(loc)
}

fn gray(values: &[f64], h: usize, w: usize) -> Result<Image> {
    Image::new(1, h, w, values.to_vec())
}

/// Per sample: clean, normalized delta, adversarial, foreground and background
/// components; `perturbation.csv` holds foreground/motif IoU.
pub fn export_perturbation(
    run: &mut RunDir,
    params: &ModelParams,
    dataset: &SyntheticDataset,
    samples: &[usize],
    cfg: &PerturbConfig,
    zoom: usize,
) -> Result<Vec<f64>> {
    let images: Vec<Image> = samples.iter().map(|&i| dataset.samples[i].image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|&i| dataset.samples[i].class_id).collect();
    let batch = generate_adversarial(&images, &labels, params, &dataset.semantics()?, cfg)?;
    let mut t = Table::new(&["sample", "class", "background_value", "foreground_pixels", "motif_iou"]);
    let mut ious = Vec::with_capacity(samples.len());
    for (j, &i) in samples.iter().enumerate() {
        let (clean, adv) = (&batch.clean[j], &batch.adv[j]);
        let st = perturbation_stats(clean, adv);
        let (h, w) = (st.height, st.width);
        let delta = Image::new(clean.channels, h, w, st.normalized_delta.clone())?;
        let plane = h * w;
        let fg: Vec<f64> = st.foreground.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let mut bg = vec![0.0; plane];
        for (p, v) in bg.iter_mut().enumerate() {
            if !st.foreground[p] {
                *v = (0..clean.channels).map(|c| st.normalized_delta[c * plane + p]).sum::<f64>() / clean.channels as f64;
            }
        }
        let masks = &dataset.samples[i].masks;
        let motif: Vec<bool> = (0..plane).map(|p| masks.chunks(plane).any(|m| m[p] != 0)).collect();
        let iou = mask_iou(&st.foreground, &motif);
        ious.push(iou);
        let panels = [
            ("a_clean", clean.clone()),
            ("b_delta", delta),
            ("c_adv", adv.clone()),
            ("d_foreground", gray(&fg, h, w)?),
            ("e_background", gray(&bg, h, w)?),
        ];
        for (name, img) in panels {
            run.write(&format!("perturbation/s{i:05}_{name}.ppm"), &image_ppm(&img, zoom)?)?;
        }
        t.push(vec![
            i.into(),
            labels[j].into(),
            st.background_value.into(),
            st.foreground.iter().filter(|&&f| f).count().into(),
            iou.into(),
        ])?;
    }
    run.write("perturbation.csv", t.to_csv().as_bytes())?;
    Ok(ious)
}

/// Side of the drift scatter plot in pixels.
const SCATTER: usize = 128;

/// `drift.csv` with every projected step, and a scatter plot in which later
/// steps are drawn darker.
pub fn export_drift(
    run: &mut RunDir,
    params: &ModelParams,
    dataset: &SyntheticDataset,
    samples: &[usize],
    cfg: &PerturbConfig,
) -> Result<f64> {
    let images: Vec<Image> = samples.iter().map(|&i| dataset.samples[i].image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|&i| dataset.samples[i].class_id).collect();
    let trace = drift_trace(params, &images, &labels, &dataset.semantics()?, cfg)?;
    let mut t = Table::new(&["sample", "class", "step", "x", "y", "drift"]);
    for (j, &i) in samples.iter().enumerate() {
        let start = trace.features[j][0].data();
        for (step, (p, g)) in trace.projected[j].iter().zip(&trace.features[j]).enumerate() {
            let d = g.data().iter().zip(start).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            t.push(vec![i.into(), labels[j].into(), step.into(), p[0].into(), p[1].into(), d.into()])?;
        }
    }
    run.write("drift.csv", t.to_csv().as_bytes())?;

    let pts: Vec<[f64; 2]> = trace.projected.iter().flatten().copied().collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut rgb = vec![255u8; SCATTER * SCATTER * 3];
    let steps = trace.projected.first().map_or(1, |p| p.len());
    for traj in &trace.projected {
        for (step, p) in traj.iter().enumerate() {
            let at = |a: usize| {
                let span = hi[a] - lo[a];
                let u = if span > 0.0 { (p[a] - lo[a]) / span } else { 0.5 };
                ((u * (SCATTER - 3) as f64).round() as usize + 1).min(SCATTER - 2)
            };
            let (x, y) = (at(0), SCATTER - 1 - at(1));
            let shade = (200.0 * (1.0 - step as f64 / steps.max(2).saturating_sub(1) as f64)) as u8;
            for dy in 0..2 {
                for dx in 0..2 {
                    let o = ((y - dy) * SCATTER + x + dx) * 3;
                    rgb[o..o + 3].copy_from_slice(&[shade, shade, 255]);
                }
            }
        }
    }
    run.write("drift.ppm", &ppm_bytes(SCATTER, SCATTER, &rgb)?)?;
    Ok(trace.mean_max_drift())
}
