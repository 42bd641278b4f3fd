use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::LabelSpace;
use crate::metrics::AreaBand;
use crate::postproc::PanopticMap;

/// Segments match when they share a category and their IoU exceeds this.
pub const PQ_MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PqCategoryStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PqValues {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl PqCategoryStats {
    pub fn is_present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn values(&self) -> Option<PqValues> {
        if !self.is_present() {
            return None;
        }
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
        Some(PqValues { pq: self.iou_sum / denom, sq, rq: self.tp as f64 / denom })
    }
}

/// Per-category accumulators keyed by category id. Counts merge by addition,
/// so per-image stats can be combined in any grouping.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PqStats {
    pub per_category: BTreeMap<u32, PqCategoryStats>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (cat, s) in &other.per_category {
            let e = self.per_category.entry(*cat).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    fn entry(&mut self, cat: u32) -> &mut PqCategoryStats {
        self.per_category.entry(cat).or_default()
    }

    pub fn result(&self) -> PqResult {
        let per_category: BTreeMap<u32, PqValues> =
            self.per_category.iter().filter_map(|(c, s)| s.values().map(|v| (*c, v))).collect();
        let n = per_category.len();
        let mean = |f: fn(&PqValues) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_category.values().map(f).sum::<f64>() / n as f64
            }
        };
        PqResult { pq: mean(|v| v.pq), sq: mean(|v| v.sq), rq: mean(|v| v.rq), num_categories: n, per_category }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Categories present in ground truth or prediction; the means run over these.
    pub num_categories: usize,
    pub per_category: BTreeMap<u32, PqValues>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqOptions {
    pub match_threshold: f64,
    pub band: AreaBand,
}

impl Default for PqOptions {
    fn default() -> Self {
        PqOptions { match_threshold: PQ_MATCH_THRESHOLD, band: AreaBand::All }
    }
}

/// Match statistics for one image.
///
/// IoU excludes predicted pixels that fall on ground-truth void. Unmatched
/// predictions lying more than half on void are ignored rather than counted as
/// false positives. With an area band, only ground truth inside the band is
/// counted; predictions matched to out-of-band ground truth are ignored, and
/// unmatched predictions count only when their own area is in the band.
pub fn pq_image_stats(pred: &PanopticMap, gt: &PanopticMap, space: &LabelSpace, opts: PqOptions) -> Result<PqStats> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if !(opts.match_threshold >= 0.5 && opts.match_threshold < 1.0) {
        return Err(Error::Config(format!(
            "PQ match threshold must be in [0.5, 1) for unique matching, got {}",
            opts.match_threshold
        )));
    }
    for s in pred.segments().iter().chain(gt.segments()) {
        if space.by_id(s.category_id).is_none() {
            return Err(Error::LabelSpace(format!("segment category {} not in the label space", s.category_id)));
        }
    }

    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
        if p != 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let void_overlap = |p: u32| inter.get(&(0, p)).copied().unwrap_or(0);

    let mut stats = PqStats::default();
    for s in gt.segments().iter().chain(pred.segments()) {
        stats.entry(s.category_id);
    }
    let mut gt_matched: HashMap<u32, bool> = HashMap::new();
    let mut pred_matched: HashMap<u32, bool> = HashMap::new();

    let mut pairs: Vec<(&(u32, u32), &u64)> = inter.iter().filter(|((g, _), _)| *g != 0).collect();
    pairs.sort_unstable_by_key(|(k, _)| **k);
    for (&(g, p), &i) in pairs {
        let gs = gt.segment(g).expect("validated map");
        let ps = pred.segment(p).expect("validated map");
        if gs.category_id != ps.category_id {
            continue;
        }
        let union = ps.area + gs.area - i - void_overlap(p);
        let iou = i as f64 / union as f64;
        if iou > opts.match_threshold {
            gt_matched.insert(g, true);
            pred_matched.insert(p, true);
            if opts.band.contains(gs.area) {
                let e = stats.entry(gs.category_id);
                e.tp += 1;
                e.iou_sum += iou;
            }
        }
    }
    for s in gt.segments() {
        if !gt_matched.contains_key(&s.id) && opts.band.contains(s.area) {
            stats.entry(s.category_id).fn_ += 1;
        }
    }
    for s in pred.segments() {
        if pred_matched.contains_key(&s.id) {
            continue;
        }
        if void_overlap(s.id) as f64 / s.area as f64 > 0.5 {
            continue;
        }
        if opts.band.contains(s.area) {
            stats.entry(s.category_id).fp += 1;
        }
    }
    Ok(stats)
}

/// PQ, SQ and RQ per category and averaged over present categories.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, space: &LabelSpace) -> Result<PqResult> {
    Ok(pq_image_stats(pred, gt, space, PqOptions::default())?.result())
}

/// Dataset-level stats: images are evaluated in parallel and merged in input
/// order.
pub fn pq_dataset_stats(
    pairs: &[(&PanopticMap, &PanopticMap)],
    space: &LabelSpace,
    opts: PqOptions,
) -> Result<PqStats> {
    let per_image: Vec<PqStats> =
        pairs.par_iter().map(|(p, g)| pq_image_stats(p, g, space, opts)).collect::<Result<_>>()?;
    let mut total = PqStats::default();
    for s in &per_image {
        total.merge(s);
    }
    Ok(total)
}
