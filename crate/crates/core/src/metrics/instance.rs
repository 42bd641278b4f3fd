//! Mask average precision in the COCO style: per category and IoU threshold,
//! score-ranked detections are greedily matched to the best still-unmatched
//! ground truth, and the precision/recall curve is summarized at 101 recall
//! points.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask};
use crate::metrics::AreaBand;

/// Ground-truth instance. Instances may overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub image_id: u64,
    pub category_id: u32,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub mask: BinaryMask,
}

/// 0.50, 0.55, ..., 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: usize = 101;
/// Detections kept per image and category, highest score first.
pub const MAX_DETS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// Mean over thresholds, all areas.
    pub per_category: BTreeMap<u32, f64>,
}

/// Outcome of matching one category's detections at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Score and true-positive flag per non-ignored detection, ranked.
    pub ranked: Vec<(f64, bool)>,
    /// Ground truth counted for recall.
    pub num_gt: usize,
}

fn desc_score(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy matching for one category at one threshold.
///
/// Inputs must all carry the same category. Images are visited in ascending id.
pub fn match_category(
    dets: &[&DetectionRecord],
    gts: &[&InstanceAnnotation],
    iou_threshold: f64,
    band: AreaBand,
) -> Result<MatchOutcome> {
    let images: BTreeSet<u64> = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id)).collect();
    let thr = iou_threshold.min(1.0 - 1e-10);
    // (score, image order, det order, tp, ignored)
    let mut all: Vec<(f64, usize, usize, bool, bool)> = Vec::new();
    let mut num_gt = 0usize;
    for (img_rank, img) in images.iter().enumerate() {
        let mut img_dets: Vec<&DetectionRecord> = dets.iter().copied().filter(|d| d.image_id == *img).collect();
        img_dets.sort_by(|a, b| desc_score(a.score, b.score));
        img_dets.truncate(MAX_DETS_PER_IMAGE);
        let mut img_gts: Vec<(&InstanceAnnotation, bool)> =
            gts.iter().copied().filter(|g| g.image_id == *img).map(|g| (g, !band.contains(g.mask.area()))).collect();
        // Non-ignored ground truth first.
        img_gts.sort_by_key(|(_, ignored)| *ignored);
        num_gt += img_gts.iter().filter(|(_, ig)| !ig).count();

        let mut gt_taken = vec![false; img_gts.len()];
        for (d_rank, d) in img_dets.iter().enumerate() {
            let mut best_iou = thr;
            let mut best: Option<usize> = None;
            for (gi, (g, ignored)) in img_gts.iter().enumerate() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(b) = best {
                    if !img_gts[b].1 && *ignored {
                        break;
                    }
                }
                let iou = mask_iou(&d.mask, &g.mask)?;
                if iou < best_iou {
                    continue;
                }
                best_iou = iou;
                best = Some(gi);
            }
            let (tp, ignored) = match best {
                Some(gi) => {
                    gt_taken[gi] = true;
                    (true, img_gts[gi].1)
                }
                None => (false, !band.contains(d.mask.area())),
            };
            all.push((d.score, img_rank, d_rank, tp, ignored));
        }
    }
    all.sort_by(|a, b| desc_score(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(MatchOutcome { ranked: all.into_iter().filter(|e| !e.4).map(|e| (e.0, e.3)).collect(), num_gt })
}

/// 101-point interpolated average precision of a ranked TP/FP list.
/// `None` when there is no ground truth.
pub fn interpolated_ap(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (i, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Monotone envelope from the right.
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn group<T>(items: &[T], key: impl Fn(&T) -> u32) -> BTreeMap<u32, Vec<&T>> {
    let mut out: BTreeMap<u32, Vec<&T>> = BTreeMap::new();
    for it in items {
        out.entry(key(it)).or_default().push(it);
    }
    out
}

/// AP of every category with in-band ground truth at one threshold.
pub fn per_category_ap_at(
    dets: &[DetectionRecord],
    gts: &[InstanceAnnotation],
    iou_threshold: f64,
    band: AreaBand,
) -> Result<BTreeMap<u32, f64>> {
    let d = group(dets, |d| d.category_id);
    let g = group(gts, |g| g.category_id);
    let cats: Vec<u32> = g.keys().copied().collect();
    let results: Vec<(u32, Option<f64>)> = cats
        .par_iter()
        .map(|c| {
            let cd = d.get(c).cloned().unwrap_or_default();
            let outcome = match_category(&cd, &g[c], iou_threshold, band)?;
            Ok((*c, interpolated_ap(&outcome.ranked, outcome.num_gt)))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().filter_map(|(c, ap)| ap.map(|v| (c, v))).collect())
}

/// AP per category averaged over `thresholds`.
pub fn per_category_ap(
    dets: &[DetectionRecord],
    gts: &[InstanceAnnotation],
    thresholds: &[f64],
    band: AreaBand,
) -> Result<BTreeMap<u32, f64>> {
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds given".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0,1)")));
    }
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::Format(format!("detection score {} outside [0,1]", d.score)));
    }
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    for &t in thresholds {
        for (c, ap) in per_category_ap_at(dets, gts, t, band)? {
            *acc.entry(c).or_default() += ap;
        }
    }
    Ok(acc.into_iter().map(|(c, s)| (c, s / thresholds.len() as f64)).collect())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// AP over `thresholds`, AP50, AP75 and the size-banded variants. Categories
/// without ground truth are left out of every mean.
pub fn instance_ap(dets: &[DetectionRecord], gts: &[InstanceAnnotation], thresholds: &[f64]) -> Result<ApReport> {
    let per_category = per_category_ap(dets, gts, thresholds, AreaBand::All)?;
    let at =
        |t: f64| -> Result<Option<f64>> { Ok(mean(per_category_ap_at(dets, gts, t, AreaBand::All)?.into_values())) };
    let banded =
        |b: AreaBand| -> Result<Option<f64>> { Ok(mean(per_category_ap(dets, gts, thresholds, b)?.into_values())) };
    Ok(ApReport {
        ap: mean(per_category.values().copied()),
        ap50: at(0.5)?,
        ap75: at(0.75)?,
        ap_s: banded(AreaBand::Small)?,
        ap_m: banded(AreaBand::Medium)?,
        ap_l: banded(AreaBand::Large)?,
        per_category,
    })
}
