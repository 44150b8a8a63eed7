//! Segmentation quality metrics: per-class Dice, IoU, precision, recall
//! from pixel counts, and the (max, non-percentile) Hausdorff distance in
//! pixel units via an exact Euclidean distance transform.
//!
//! A metric whose denominator is zero is undefined and excluded from
//! means, never scored as 0 or 1.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::synthgen::SegmentationMask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("empty split")]
    EmptySplit,
}

/// Ratio metrics for one class on one sample; `None` marks an undefined
/// metric (zero denominator).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassMetrics {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn check_dims(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(), MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::DimMismatch(
            pred.height,
            pred.width,
            gt.height,
            gt.width,
        ));
    }
    Ok(())
}

/// Dice, IoU, precision and recall for class `c` from TP/FP/FN counts.
pub fn class_metrics(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    c: u8,
) -> Result<ClassMetrics, MetricsError> {
    check_dims(pred, gt)?;
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p == c, g == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(ClassMetrics {
        dice: ratio(2 * tp, 2 * tp + fp + fne),
        iou: ratio(tp, tp + fp + fne),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fne),
    })
}

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher),
/// 1D lower envelope applied per row then per column.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Squared distance to the nearest set pixel, for every pixel. Infinite
/// when the set is empty.
fn distance_transform_sq(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e18;
    let mut grid: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let side = h.max(w);
    let mut f = vec![0.0; side];
    let mut d = vec![0.0; side];
    let mut v = vec![0usize; side];
    let mut z = vec![0.0; side + 1];
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    grid
}

/// Max of the two directed Hausdorff distances between the class-c pixel
/// sets, Euclidean, in pixels. `None` when either set is empty.
pub fn hausdorff(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    c: u8,
) -> Result<Option<f64>, MetricsError> {
    check_dims(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let pset: Vec<bool> = pred.labels.iter().map(|&l| l == c).collect();
    let gset: Vec<bool> = gt.labels.iter().map(|&l| l == c).collect();
    if !pset.iter().any(|&b| b) || !gset.iter().any(|&b| b) {
        return Ok(None);
    }
    let dt_g = distance_transform_sq(&gset, h, w);
    let dt_p = distance_transform_sq(&pset, h, w);
    let mut max_sq = 0.0f64;
    for i in 0..h * w {
        if pset[i] && dt_g[i] > max_sq {
            max_sq = dt_g[i];
        }
        if gset[i] && dt_p[i] > max_sq {
            max_sq = dt_p[i];
        }
    }
    Ok(Some(max_sq.sqrt()))
}

/// Per-class means over the samples where each metric was defined.
#[derive(Debug, Clone, Default)]
pub struct ClassAggregate {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub hausdorff: Option<f64>,
}

/// Evaluation summary: per-foreground-class means and their averages.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub per_class: BTreeMap<u8, ClassAggregate>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// NaN when undefined for every class.
    pub mean_hausdorff: f64,
    pub num_samples: usize,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }
    fn mean(&self) -> Option<f64> {
        if self.n == 0 {
            None
        } else {
            Some(self.sum / self.n as f64)
        }
    }
}

/// Aggregate per-class metrics over (pred, gt) pairs: average over samples
/// where defined, then over foreground classes (class 0 excluded).
pub fn evaluate_pairs(
    pairs: &[(SegmentationMask, SegmentationMask)],
) -> Result<MetricsRecord, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let k = pairs[0].1.num_classes;
    let mut per_class = BTreeMap::new();
    let mut class_means: Vec<ClassAggregate> = Vec::new();
    for c in 1..k {
        let (mut d, mut i, mut p, mut r, mut hd) =
            (Acc::default(), Acc::default(), Acc::default(), Acc::default(), Acc::default());
        for (pred, gt) in pairs {
            let m = class_metrics(pred, gt, c)?;
            d.push(m.dice);
            i.push(m.iou);
            p.push(m.precision);
            r.push(m.recall);
            hd.push(hausdorff(pred, gt, c)?);
        }
        let agg = ClassAggregate {
            dice: d.mean(),
            iou: i.mean(),
            precision: p.mean(),
            recall: r.mean(),
            hausdorff: hd.mean(),
        };
        per_class.insert(c, agg.clone());
        class_means.push(agg);
    }
    let over_classes = |f: fn(&ClassAggregate) -> Option<f64>| {
        let mut a = Acc::default();
        for cm in &class_means {
            a.push(f(cm));
        }
        a.mean().unwrap_or(f64::NAN)
    };
    Ok(MetricsRecord {
        per_class,
        mean_dice: over_classes(|c| c.dice),
        mean_iou: over_classes(|c| c.iou),
        mean_precision: over_classes(|c| c.precision),
        mean_recall: over_classes(|c| c.recall),
        mean_hausdorff: over_classes(|c| c.hausdorff),
        num_samples: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, k: u8, labels: Vec<u8>) -> SegmentationMask {
        SegmentationMask::new(h, w, k, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = mask(2, 2, 2, vec![0, 1, 1, 0]);
        let m = class_metrics(&gt, &gt, 1).unwrap();
        assert_eq!(m.dice, Some(1.0));
        assert_eq!(m.iou, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
    }

    #[test]
    fn disjoint_regions_score_zero() {
        let gt = mask(1, 4, 2, vec![1, 1, 0, 0]);
        let pred = mask(1, 4, 2, vec![0, 0, 1, 1]);
        let m = class_metrics(&pred, &gt, 1).unwrap();
        assert_eq!(m.dice, Some(0.0));
        assert_eq!(m.iou, Some(0.0));
        assert_eq!(m.precision, Some(0.0));
        assert_eq!(m.recall, Some(0.0));
    }

    #[test]
    fn half_subset_hand_counts() {
        // pred is half of gt: dice 2/3, iou 1/2, precision 1, recall 1/2
        let gt = mask(1, 4, 2, vec![1, 1, 1, 1]);
        let pred = mask(1, 4, 2, vec![1, 1, 0, 0]);
        let m = class_metrics(&pred, &gt, 1).unwrap();
        assert_eq!(m.dice, Some(2.0 / 3.0));
        assert_eq!(m.iou, Some(0.5));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(0.5));
    }

    #[test]
    fn absent_class_is_undefined() {
        let gt = mask(1, 2, 3, vec![0, 0]);
        let pred = mask(1, 2, 3, vec![0, 0]);
        let m = class_metrics(&pred, &gt, 2).unwrap();
        assert_eq!(m.dice, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = mask(1, 2, 2, vec![0, 1]);
        let b = mask(2, 1, 2, vec![0, 1]);
        assert!(class_metrics(&a, &b, 1).is_err());
    }

    #[test]
    fn hausdorff_identical_sets_zero() {
        let gt = mask(2, 2, 2, vec![0, 1, 1, 0]);
        assert_eq!(hausdorff(&gt, &gt, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn hausdorff_three_four_five() {
        // singletons at (0,0) and (3,4): distance 5
        let mut a = vec![0u8; 5 * 5];
        let mut b = vec![0u8; 5 * 5];
        a[0] = 1;
        b[3 * 5 + 4] = 1;
        let pa = mask(5, 5, 2, a);
        let pb = mask(5, 5, 2, b);
        assert_eq!(hausdorff(&pa, &pb, 1).unwrap(), Some(5.0));
    }

    #[test]
    fn hausdorff_empty_gt_is_undefined() {
        let gt = mask(2, 2, 2, vec![0, 0, 0, 0]);
        let pred = mask(2, 2, 2, vec![1, 0, 0, 0]);
        assert_eq!(hausdorff(&pred, &gt, 1).unwrap(), None);
    }

    fn brute_force_hausdorff(pred: &SegmentationMask, gt: &SegmentationMask, c: u8) -> Option<f64> {
        let pts = |m: &SegmentationMask| -> Vec<(f64, f64)> {
            let mut v = Vec::new();
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.labels[y * m.width + x] == c {
                        v.push((y as f64, x as f64));
                    }
                }
            }
            v
        };
        let (pa, pb) = (pts(pred), pts(gt));
        if pa.is_empty() || pb.is_empty() {
            return None;
        }
        let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
            from.iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(gy, gx)| ((y - gy).powi(2) + (x - gx).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        Some(directed(&pa, &pb).max(directed(&pb, &pa)))
    }

    #[test]
    fn hausdorff_matches_brute_force() {
        use crate::rng::Rng;
        let mut rng = Rng::new(17, 0);
        for _ in 0..100 {
            let (h, w) = (12, 14);
            let gen = |rng: &mut Rng| {
                let mut labels = vec![0u8; h * w];
                let points = 1 + rng.uniform_usize(40); // <= 200 points
                for _ in 0..points {
                    let i = rng.uniform_usize(h * w);
                    labels[i] = 1;
                }
                mask(h, w, 2, labels)
            };
            let pred = gen(&mut rng);
            let gt = gen(&mut rng);
            let fast = hausdorff(&pred, &gt, 1).unwrap();
            let brute = brute_force_hausdorff(&pred, &gt, 1);
            match (fast, brute) {
                (Some(a), Some(b)) => assert_eq!(a, b, "exact match expected"),
                (None, None) => {}
                other => panic!("definedness mismatch: {:?}", other),
            }
        }
    }

    #[test]
    fn swap_symmetry() {
        use crate::rng::Rng;
        let mut rng = Rng::new(23, 0);
        for _ in 0..50 {
            let gen = |rng: &mut Rng| {
                let labels = (0..64).map(|_| rng.uniform_usize(3) as u8).collect();
                mask(8, 8, 3, labels)
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            for c in 1..3u8 {
                let m_ab = class_metrics(&a, &b, c).unwrap();
                let m_ba = class_metrics(&b, &a, c).unwrap();
                assert_eq!(m_ab.dice, m_ba.dice);
                assert_eq!(m_ab.iou, m_ba.iou);
                assert_eq!(m_ab.precision, m_ba.recall);
                assert_eq!(m_ab.recall, m_ba.precision);
                assert_eq!(hausdorff(&a, &b, c).unwrap(), hausdorff(&b, &a, c).unwrap());
            }
        }
    }

    #[test]
    fn dice_iou_identity() {
        use crate::rng::Rng;
        let mut rng = Rng::new(31, 0);
        for _ in 0..200 {
            let gen = |rng: &mut Rng| {
                let labels = (0..64).map(|_| rng.uniform_usize(4) as u8).collect();
                mask(8, 8, 4, labels)
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            for c in 1..4u8 {
                let m = class_metrics(&a, &b, c).unwrap();
                if let (Some(d), Some(i)) = (m.dice, m.iou) {
                    assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn evaluate_oracle_predictor_scores_one() {
        use crate::rng::Rng;
        let mut rng = Rng::new(2, 0);
        let pairs: Vec<_> = (0..5)
            .map(|_| {
                let labels: Vec<u8> = (0..64).map(|_| rng.uniform_usize(4) as u8).collect();
                let m = mask(8, 8, 4, labels);
                (m.clone(), m)
            })
            .collect();
        let rec = evaluate_pairs(&pairs).unwrap();
        assert_eq!(rec.mean_dice, 1.0);
        assert_eq!(rec.mean_hausdorff, 0.0);
        assert_eq!(rec.num_samples, 5);
    }

    #[test]
    fn evaluate_constant_background_scores_zero() {
        let gt = mask(2, 2, 2, vec![1, 1, 0, 0]);
        let pred = mask(2, 2, 2, vec![0, 0, 0, 0]);
        let rec = evaluate_pairs(&[(pred, gt)]).unwrap();
        assert_eq!(rec.mean_dice, 0.0);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        use crate::rng::Rng;
        let mut rng = Rng::new(4, 0);
        let mut pairs: Vec<_> = (0..6)
            .map(|_| {
                let gen: Vec<u8> = (0..64).map(|_| rng.uniform_usize(4) as u8).collect();
                let gt = mask(8, 8, 4, gen);
                let pl: Vec<u8> = (0..64).map(|_| rng.uniform_usize(4) as u8).collect();
                (mask(8, 8, 4, pl), gt)
            })
            .collect();
        let a = evaluate_pairs(&pairs).unwrap();
        pairs.reverse();
        let b = evaluate_pairs(&pairs).unwrap();
        assert!((a.mean_dice - b.mean_dice).abs() < 1e-12);
        assert!((a.mean_hausdorff - b.mean_hausdorff).abs() < 1e-12);
    }
}
