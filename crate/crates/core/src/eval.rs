//! ZSL / GZSL inference, per-class accuracy, calibration and feature drift.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{perturb_one, PerturbConfig};
use crate::autodiff::Tensor;
use crate::data::{Image, Protocol, SplitKind, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, Semantics};

/// Index of the largest score; the first index wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring class among `candidates`; ties go to the lowest class id.
pub fn zsl_from_scores(scores: &[f64], candidates: &[usize]) -> Result<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best: Option<usize> = None;
    for &c in &sorted {
        if c >= scores.len() {
            return Err(Error::Index {
                what: "candidate class",
                index: c,
                len: scores.len(),
            });
        }
        if best.is_none_or(|b| scores[c] > scores[b]) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::contract("zsl_predict", "candidate set is empty"))
}

/// Calibrated stacking: argmax over all classes of `score − μ·[seen]`.
pub fn gzsl_from_scores(scores: &[f64], seen: &[bool], mu: f64) -> usize {
    let adjusted: Vec<f64> = scores
        .iter()
        .zip(seen)
        .map(|(&s, &is_seen)| if is_seen { s - mu } else { s })
        .collect();
    argmax_first(&adjusted)
}

pub fn class_scores(params: &ModelParams, image: &Image, semantics: &Semantics) -> Result<Vec<f64>> {
    Ok(forward(image, params, semantics)?.class_scores.into_data())
}

pub fn zsl_predict(params: &ModelParams, image: &Image, semantics: &Semantics, candidates: &[usize]) -> Result<usize> {
    zsl_from_scores(&class_scores(params, image, semantics)?, candidates)
}

pub fn gzsl_predict(params: &ModelParams, image: &Image, semantics: &Semantics, seen: &[bool], mu: f64) -> Result<usize> {
    Ok(gzsl_from_scores(&class_scores(params, image, semantics)?, seen, mu))
}

/// Unweighted mean over classes of within-class top-1 accuracy, in percent.
///
/// Classes without samples are skipped with a warning.
pub fn per_class_top1(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("per_class_top1", &[predictions.len()], &[labels.len()]));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        let entry = tally
            .get_mut(&y)
            .ok_or_else(|| Error::contract("per_class_top1", format!("label {y} outside the class set")))?;
        entry.0 += usize::from(p == y);
        entry.1 += 1;
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (class, (hit, n)) in tally {
        if n == 0 {
            log::warn!("per_class_top1: class {class} has no samples, excluded");
            continue;
        }
        sum += hit as f64 / n as f64;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { 100.0 * sum / used as f64 })
}

/// `2SU/(S+U)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Class scores for a set of images, rows in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ScoreTable {
    pub fn compute(params: &ModelParams, dataset: &SyntheticDataset, indices: &[usize], semantics: &Semantics) -> Result<Self> {
        let scores = indices
            .par_iter()
            .map(|&i| class_scores(params, &dataset.samples[i].image, semantics))
            .collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| dataset.samples[i].class_id).collect();
        Ok(Self { scores, labels })
    }

    pub fn gzsl_predictions(&self, seen: &[bool], mu: f64) -> Vec<usize> {
        self.scores.iter().map(|s| gzsl_from_scores(s, seen, mu)).collect()
    }

    pub fn zsl_predictions(&self, candidates: &[usize]) -> Result<Vec<usize>> {
        self.scores.iter().map(|s| zsl_from_scores(s, candidates)).collect()
    }
}

/// Seen accuracy, unseen accuracy and their harmonic mean at one μ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslPoint {
    pub mu: f64,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic: f64,
}

pub fn gzsl_point(
    seen_table: &ScoreTable,
    unseen_table: &ScoreTable,
    seen_mask: &[bool],
    mu: f64,
) -> Result<GzslPoint> {
    let seen_ids: Vec<usize> = (0..seen_mask.len()).filter(|&c| seen_mask[c]).collect();
    let unseen_ids: Vec<usize> = (0..seen_mask.len()).filter(|&c| !seen_mask[c]).collect();
    let s = per_class_top1(&seen_table.gzsl_predictions(seen_mask, mu), &seen_table.labels, &seen_ids)?;
    let u = per_class_top1(&unseen_table.gzsl_predictions(seen_mask, mu), &unseen_table.labels, &unseen_ids)?;
    Ok(GzslPoint {
        mu,
        acc_seen: s,
        acc_unseen: u,
        harmonic: harmonic_mean(s, u),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub best_mu: f64,
    pub points: Vec<GzslPoint>,
}

/// Evaluates `H(μ)` on every grid value and picks the best; ties go to the smallest μ.
pub fn calibration_sweep(
    seen_table: &ScoreTable,
    unseen_table: &ScoreTable,
    seen_mask: &[bool],
    grid: &[f64],
) -> Result<CalibrationCurve> {
    if grid.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }
    let points = grid
        .iter()
        .map(|&mu| gzsl_point(seen_table, unseen_table, seen_mask, mu))
        .collect::<Result<Vec<_>>>()?;
    let mut best = points[0];
    for p in &points[1..] {
        if p.harmonic > best.harmonic || (p.harmonic == best.harmonic && p.mu < best.mu) {
            best = *p;
        }
    }
    Ok(CalibrationCurve {
        best_mu: best.mu,
        points,
    })
}

/// Grid on which `H(μ)` attains every value it can take over the given tables.
///
/// Predictions only change where μ crosses a gap between the best seen and the
/// best unseen score of some image, so one point inside each interval between
/// consecutive positive gaps suffices.
pub fn auto_mu_grid(tables: &[&ScoreTable], seen_mask: &[bool]) -> Vec<f64> {
    let mut gaps: Vec<f64> = tables
        .iter()
        .flat_map(|t| t.scores.iter())
        .map(|s| {
            let best = |want: bool| {
                s.iter()
                    .zip(seen_mask)
                    .filter(|(_, &m)| m == want)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            best(true) - best(false)
        })
        .filter(|g| g.is_finite() && *g > 0.0)
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    let mut grid = vec![0.0];
    for w in gaps.windows(2) {
        grid.push(0.5 * (w[0] + w[1]));
    }
    if let Some(&last) = gaps.last() {
        grid.push(last + 1.0);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub split: SplitKind,
    pub samples: usize,
    /// Top-1 under calibrated GZSL prediction, percent.
    pub gzsl_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Conventional ZSL accuracy on unseen classes, percent.
    pub t1_unseen: f64,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic: f64,
    pub mu: f64,
    pub per_class: Vec<ClassRow>,
    /// `H(μ)` on the validation slices used to choose `mu`.
    pub calibration: CalibrationCurve,
}

/// Chooses μ on the validation slices, then reports T1, S, U and H on the test slices.
pub fn evaluate(
    params: &ModelParams,
    dataset: &SyntheticDataset,
    protocol: &Protocol,
    mu_grid: Option<&[f64]>,
) -> Result<EvalReport> {
    let semantics = dataset.semantics()?;
    let seen_mask: Vec<bool> = (0..dataset.num_classes()).map(|c| dataset.is_seen(c)).collect();
    let unseen_ids = dataset.class_ids(SplitKind::Unseen);
    let table = |idx: &[usize]| ScoreTable::compute(params, dataset, idx, &semantics);
    let (val_s, val_u) = (table(&protocol.val_seen)?, table(&protocol.val_unseen)?);
    let (test_s, test_u) = (table(&protocol.test_seen)?, table(&protocol.test_unseen)?);

    let grid = match mu_grid {
        Some(g) => g.to_vec(),
        None => auto_mu_grid(&[&val_s, &val_u], &seen_mask),
    };
    let calibration = calibration_sweep(&val_s, &val_u, &seen_mask, &grid)?;
    let mu = calibration.best_mu;
    let point = gzsl_point(&test_s, &test_u, &seen_mask, mu)?;
    let t1 = per_class_top1(&test_u.zsl_predictions(&unseen_ids)?, &test_u.labels, &unseen_ids)?;

    let mut per_class = Vec::with_capacity(dataset.num_classes());
    for class in &dataset.classes {
        let t = if class.split == SplitKind::Seen { &test_s } else { &test_u };
        let preds = t.gzsl_predictions(&seen_mask, mu);
        let (hit, n) = preds
            .iter()
            .zip(&t.labels)
            .filter(|(_, &y)| y == class.class_id)
            .fold((0, 0), |(h, n), (&p, &y)| (h + usize::from(p == y), n + 1));
        per_class.push(ClassRow {
            class_id: class.class_id,
            split: class.split,
            samples: n,
            gzsl_acc: if n == 0 { 0.0 } else { 100.0 * hit as f64 / n as f64 },
        });
    }
    Ok(EvalReport {
        t1_unseen: t1,
        acc_seen: point.acc_seen,
        acc_unseen: point.acc_unseen,
        harmonic: point.harmonic,
        mu,
        per_class,
        calibration,
    })
}

/// Top-2 principal axes of a point cloud, fitted once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

impl Projection2d {
    /// Fits on row vectors of equal length. Each axis is oriented so its
    /// largest-magnitude entry is positive.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::contract("pca", "no points"));
        }
        let d = points[0].len();
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| -> Vec<f64> {
            if k >= d {
                return vec![0.0; d];
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let lead = argmax_first(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
        })
    }

    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let dot = |axis: &[f64]| point.iter().zip(&self.mean).zip(axis).map(|((p, m), a)| (p - m) * a).sum();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

/// Feature trajectories of images under perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTrace {
    /// `features[i][t]` is `g(f(I_t))` of image `i`, `t = 0..=T`.
    pub features: Vec<Vec<Tensor>>,
    /// Positions in the plane of the top-2 principal axes of the `t = 0` features.
    pub projected: Vec<Vec<[f64; 2]>>,
    /// `max_t ‖g_t − g_0‖₂` per image.
    pub max_drift: Vec<f64>,
}

impl DriftTrace {
    pub fn mean_max_drift(&self) -> f64 {
        self.max_drift.iter().sum::<f64>() / self.max_drift.len().max(1) as f64
    }
}

pub fn drift_trace(
    params: &ModelParams,
    images: &[Image],
    labels: &[usize],
    semantics: &Semantics,
    cfg: &PerturbConfig,
) -> Result<DriftTrace> {
    if images.len() != labels.len() {
        return Err(Error::dim("drift_trace", &[images.len()], &[labels.len()]));
    }
    let features: Vec<Vec<Tensor>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &y)| perturb_one(img, y, params, semantics, cfg, true).map(|s| s.features))
        .collect::<Result<_>>()?;
    let start: Vec<Vec<f64>> = features.iter().map(|f| f[0].data().to_vec()).collect();
    let pca = Projection2d::fit(&start)?;
    let projected = features
        .iter()
        .map(|traj| traj.iter().map(|g| pca.project(g.data())).collect())
        .collect();
    let max_drift = features
        .iter()
        .map(|traj| {
            traj.iter()
                .map(|g| g.data().iter().zip(traj[0].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(DriftTrace {
        features,
        projected,
        max_drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(74.1, 69.6) - 71.8).abs() <= 0.05);
        assert!((harmonic_mean(87.3, 63.1) - 73.3).abs() <= 0.05);
        assert_eq!(harmonic_mean(40.0, 40.0), 40.0);
        assert_eq!(harmonic_mean(50.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn per_class_is_not_per_sample() {
        let mut preds = vec![0; 10];
        let mut labels = vec![0; 10];
        preds.push(0);
        labels.push(1);
        assert_eq!(per_class_top1(&preds, &labels, &[0, 1]).unwrap(), 50.0);
        assert_eq!(per_class_top1(&[1, 1], &[1, 1], &[0, 1, 2]).unwrap(), 100.0);
        assert!(per_class_top1(&[0], &[5], &[0, 1]).is_err());
    }

    #[test]
    fn zsl_ties_and_single_candidate() {
        assert_eq!(zsl_from_scores(&[1.0, 3.0, 3.0], &[2, 1]).unwrap(), 1);
        assert_eq!(zsl_from_scores(&[9.0, -3.0], &[1]).unwrap(), 1);
        assert!(zsl_from_scores(&[1.0], &[]).is_err());
    }

    #[test]
    fn gzsl_boundary_flip() {
        let seen = [true, false];
        let scores = [2.0, 1.25];
        assert_eq!(gzsl_from_scores(&scores, &seen, 0.0), 0);
        // at μ equal to the gap the two tie and the lower id wins
        assert_eq!(gzsl_from_scores(&scores, &seen, 0.75), 0);
        assert_eq!(gzsl_from_scores(&scores, &seen, 0.75 + 1e-12), 1);
        assert_eq!(gzsl_from_scores(&scores, &seen, 1e9), 1);
    }

    #[test]
    fn brute_force_recomputation_of_predictions() {
        let p = ModelParams::init(3, &ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let sem = Semantics::new(&rows).unwrap();
        for _ in 0..100 {
            let img = Image::new(3, 16, 16, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let out = forward(&img, &p, &sem).unwrap();
            // score_y = Σ_a attr_global[a]·φ_y[a]
            let manual: Vec<f64> = rows
                .iter()
                .map(|r| r.iter().zip(out.attr_global.data()).map(|(a, b)| a * b).sum())
                .collect();
            let cands = [2, 4, 5];
            let mut want = 2;
            for &c in &cands {
                if manual[c] > manual[want] + 1e-12 {
                    want = c;
                }
            }
            assert_eq!(zsl_predict(&p, &img, &sem, &cands).unwrap(), want);
            assert_eq!(zsl_predict(&p, &img, &sem.scaled(2.0), &cands).unwrap(), want);
        }
    }

    #[test]
    fn calibration_sweep_cases() {
        let seen_mask = [true, true, false];
        let seen_t = ScoreTable {
            scores: vec![vec![3.0, 1.0, 2.0], vec![0.5, 2.0, 1.8], vec![1.0, 0.0, 1.5]],
            labels: vec![0, 1, 0],
        };
        let unseen_t = ScoreTable {
            scores: vec![vec![2.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
            labels: vec![2, 2],
        };
        let c = calibration_sweep(&seen_t, &unseen_t, &seen_mask, &[0.0]).unwrap();
        assert_eq!(c.best_mu, 0.0);
        let grid = [0.0, 0.1, 0.5, 1.1, 5.0, 1e9];
        let c = calibration_sweep(&seen_t, &unseen_t, &seen_mask, &grid).unwrap();
        let best_h = c.points.iter().map(|p| p.harmonic).fold(0.0, f64::max);
        assert!(c.points[0].harmonic <= best_h && c.points[5].harmonic <= best_h);
        for p in &c.points {
            let again = gzsl_point(&seen_t, &unseen_t, &seen_mask, p.mu).unwrap();
            assert_eq!(*p, again);
        }
        // the first unseen row becomes correct only once μ passes its gap of 1
        assert_eq!(c.points[2].acc_unseen, 50.0);
        assert_eq!(c.points[3].acc_unseen, 100.0);
        assert_eq!(c.points[5].acc_seen, 0.0);
        let first_best = c.points.iter().find(|p| p.harmonic == best_h).unwrap().mu;
        assert_eq!(c.best_mu, first_best);
    }

    #[test]
    fn auto_grid_reaches_every_harmonic_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seen_mask = [true, true, true, false, false];
        let mk = |rng: &mut ChaCha8Rng, labels: Vec<usize>| ScoreTable {
            scores: labels.iter().map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            labels,
        };
        let s = mk(&mut rng, (0..30).map(|i| i % 3).collect());
        let u = mk(&mut rng, (0..20).map(|i| 3 + i % 2).collect());
        let auto = auto_mu_grid(&[&s, &u], &seen_mask);
        let fine: Vec<f64> = (0..4000).map(|i| i as f64 * 0.001).collect();
        let best_auto = calibration_sweep(&s, &u, &seen_mask, &auto).unwrap();
        let best_fine = calibration_sweep(&s, &u, &seen_mask, &fine).unwrap();
        let h = |c: &CalibrationCurve| c.points.iter().map(|p| p.harmonic).fold(0.0, f64::max);
        assert!(h(&best_auto) >= h(&best_fine));
    }

    #[test]
    fn pca_preserves_distance_order_on_three_points() {
        let pts = vec![vec![0.0, 0.0, 0.0], vec![4.0, 0.1, 0.0], vec![1.0, 0.0, 0.05]];
        let pca = Projection2d::fit(&pts).unwrap();
        let q: Vec<[f64; 2]> = pts.iter().map(|p| pca.project(p)).collect();
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let (d01, d02, d12) = (d(q[0], q[1]), d(q[0], q[2]), d(q[1], q[2]));
        assert!(d01 > d12 && d12 > d02);
    }

    #[test]
    fn zero_epsilon_has_no_drift() {
        let p = ModelParams::init(1, &ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<Image> = (0..3)
            .map(|_| Image::new(3, 16, 16, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let sem = Semantics::new(&[vec![0.3; 8], vec![0.6; 8]]).unwrap();
        let cfg = PerturbConfig {
            epsilon: 0.0,
            ..PerturbConfig::default()
        };
        let t = drift_trace(&p, &imgs, &[0, 1, 0], &sem, &cfg).unwrap();
        assert_eq!(t.mean_max_drift(), 0.0);
        assert_eq!(t.features[0].len(), cfg.steps + 1);
    }

    proptest! {
        #[test]
        fn harmonic_bounds(s in 0.0..100.0f64, u in 0.0..100.0f64) {
            let h = harmonic_mean(s, u);
            prop_assert!(h <= (s + u) / 2.0 + 1e-12);
            prop_assert!(h <= 2.0 * s.min(u) + 1e-12);
        }

        #[test]
        fn gzsl_limits(scores in prop::collection::vec(-5.0..5.0f64, 6)) {
            let seen = [true, true, true, true, false, false];
            prop_assert_eq!(gzsl_from_scores(&scores, &seen, 0.0), argmax_first(&scores));
            prop_assert!(!seen[gzsl_from_scores(&scores, &seen, 1e9)]);
        }

        #[test]
        fn predictions_invariant_to_monotone_transform(scores in prop::collection::vec(-5.0..5.0f64, 6)) {
            let t: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
            prop_assert_eq!(argmax_first(&scores), argmax_first(&t));
            prop_assert_eq!(zsl_from_scores(&scores, &[1, 3, 5]).unwrap(), zsl_from_scores(&t, &[1, 3, 5]).unwrap());
        }

        #[test]
        fn per_class_invariant_to_duplicating_a_class(
            labels in prop::collection::vec(0usize..4, 1..30),
            preds in prop::collection::vec(0usize..4, 30),
            dup in 0usize..4,
        ) {
            let preds = &preds[..labels.len()];
            let base = per_class_top1(preds, &labels, &[0, 1, 2, 3]).unwrap();
            let (mut p2, mut l2) = (preds.to_vec(), labels.clone());
            for (&p, &y) in preds.iter().zip(&labels) {
                if y == dup {
                    p2.push(p);
                    l2.push(y);
                }
            }
            let again = per_class_top1(&p2, &l2, &[0, 1, 2, 3]).unwrap();
            prop_assert!((base - again).abs() < 1e-9);
        }
    }
}
