//! Evaluation arithmetic: box IoU, detection precision/recall and average
//! precision, retrieval Recall@K and alignment accuracy.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Alignment;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("average precision needs at least one ground-truth box")]
    NoGroundTruth,
    #[error("K must be at least 1")]
    KOutOfRange,
    #[error("similarity matrix must be square and nonempty, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("gold alignment has no entry for subfigure {0}")]
    GoldMismatch(usize),
}

/// Axis-aligned box: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRect<T> {
    pub rect: Rect<T>,
    pub confidence: T,
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= T::zero() || iy <= T::zero() {
        return T::zero();
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageDetections<T> {
    pub predictions: Vec<ScoredRect<T>>,
    pub ground_truth: Vec<Rect<T>>,
}

/// Predictions and ground truth keyed by image id. Keeping both in one map
/// makes every prediction's image a ground-truth image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet<T> {
    pub images: BTreeMap<String, ImageDetections<T>>,
}

impl<T: Scalar> DetectionSet<T> {
    pub fn new() -> Self {
        Self {
            images: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, image: impl Into<String>, predictions: Vec<ScoredRect<T>>, ground_truth: Vec<Rect<T>>) {
        self.images.insert(
            image.into(),
            ImageDetections {
                predictions,
                ground_truth,
            },
        );
    }

    pub fn ground_truth_count(&self) -> usize {
        self.images.values().map(|d| d.ground_truth.len()).sum()
    }
}

/// Predictions of one image in descending confidence (stable), each
/// marked true positive if it claims a still-unmatched ground-truth box with
/// IoU >= `iou_threshold` (best IoU wins).
fn match_image<T: Scalar>(
    det: &ImageDetections<T>,
    conf_threshold: Option<T>,
    iou_threshold: T,
) -> Vec<(T, bool)> {
    let mut preds: Vec<&ScoredRect<T>> = det
        .predictions
        .iter()
        .filter(|p| conf_threshold.is_none_or(|c| p.confidence >= c))
        .collect();
    preds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidences"));
    let mut taken = vec![false; det.ground_truth.len()];
    preds
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, T)> = None;
            for (g, gt) in det.ground_truth.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&p.rect, gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (p.confidence, best.is_some())
        })
        .collect()
}

/// Precision and recall of predictions at or above `conf_threshold`.
/// No predictions gives precision 1; no ground truth gives recall 1.
pub fn precision_recall<T: Scalar>(det: &DetectionSet<T>, conf_threshold: T, iou_threshold: T) -> (T, T) {
    let (mut tp, mut predicted) = (0usize, 0usize);
    for d in det.images.values() {
        let matched = match_image(d, Some(conf_threshold), iou_threshold);
        predicted += matched.len();
        tp += matched.iter().filter(|(_, hit)| *hit).count();
    }
    let gt = det.ground_truth_count();
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            T::one()
        } else {
            T::from_usize_lossy(num) / T::from_usize_lossy(den)
        }
    };
    (ratio(tp, predicted), ratio(tp, gt))
}

/// All-point interpolated average precision over every image's predictions.
pub fn average_precision<T: Scalar>(det: &DetectionSet<T>, iou_threshold: T) -> Result<T, MetricsError> {
    let gt = det.ground_truth_count();
    if gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut scored: Vec<(T, bool)> = det
        .images
        .values()
        .flat_map(|d| match_image(d, None, iou_threshold))
        .collect();
    // stable: equal confidences keep image-key then per-image order
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite confidences"));

    let total = T::from_usize_lossy(gt);
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, (_, hit)) in scored.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        let t = T::from_usize_lossy(tp);
        points.push((t / total, t / T::from_usize_lossy(k + 1)));
    }
    // precision envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = T::zero();
    let mut prev_recall = T::zero();
    for (r, p) in points {
        ap = ap + (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// Recall@K both ways over a square similarity matrix whose diagonal holds
/// the true pairs. Ties rank the lower index first; K above n clamps to n.
pub fn recall_at_k<T: Scalar>(sim: &Array2<T>, k: usize) -> Result<(T, T), MetricsError> {
    let (rows, cols) = sim.dim();
    if rows != cols || rows == 0 {
        return Err(MetricsError::NotSquare(rows, cols));
    }
    if k < 1 {
        return Err(MetricsError::KOutOfRange);
    }
    let n = rows;
    let k = k.min(n);
    let rank = |i: usize, at: &dyn Fn(usize) -> T| {
        let target = at(i);
        (0..n)
            .filter(|&j| {
                let v = at(j);
                v > target || (v == target && j < i)
            })
            .count()
    };
    let mut i2t = 0usize;
    let mut t2i = 0usize;
    for i in 0..n {
        if rank(i, &|j| sim[[i, j]]) < k {
            i2t += 1;
        }
        if rank(i, &|j| sim[[j, i]]) < k {
            t2i += 1;
        }
    }
    let nn = T::from_usize_lossy(n);
    Ok((T::from_usize_lossy(i2t) / nn, T::from_usize_lossy(t2i) / nn))
}

/// Recall@K for each K, keyed by K.
pub fn retrieval_report<T: Scalar>(sim: &Array2<T>, ks: &[usize]) -> Result<BTreeMap<usize, (T, T)>, MetricsError> {
    ks.iter().map(|&k| recall_at_k(sim, k).map(|r| (k, r))).collect()
}

/// Fraction of predicted subfigures whose subcaption matches the gold pair.
pub fn alignment_accuracy(predicted: &Alignment, gold: &[(usize, usize)]) -> Result<f64, MetricsError> {
    let gold: HashMap<usize, usize> = gold.iter().copied().collect();
    if predicted.pairs.is_empty() {
        return Ok(1.0);
    }
    let mut correct = 0usize;
    for &(sub, cap) in &predicted.pairs {
        let want = gold.get(&sub).ok_or(MetricsError::GoldMismatch(sub))?;
        if *want == cap {
            correct += 1;
        }
    }
    Ok(correct as f64 / predicted.pairs.len() as f64)
}
